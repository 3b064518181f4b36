//! Analysis cache and device-session registry on top of [`KeyValueStore`].
//!
//! Cache keys compose the package name, a fingerprint of the granted
//! permission set, and the KB snapshot version: a reinstall with identical
//! grants is a hit, while a grant change or a KB upgrade recomputes.
//! Concurrent misses for the same key collapse to a single computation.

use std::collections::HashMap;
use std::sync::{Arc, Condvar, Mutex};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use dsaudit_bus::topic_name;
use dsaudit_core::analysis::{AnalysisResult, DeclaredBehavior, RuntimeBehavior};
use dsaudit_core::summary::WarningReport;

use crate::kv::{KeyValueStore, StoreError};

const ANALYSES_KEYSPACE: &str = "analyses";
const DEVICES_KEYSPACE: &str = "devices";
const PROCESSED_KEYSPACE: &str = "processed";
const KEY_SEPARATOR: &str = "::";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CachedAnalysis {
    pub package_name: String,
    pub runtime: RuntimeBehavior,
    pub declared: DeclaredBehavior,
    pub result: AnalysisResult,
    pub warning: WarningReport,
    pub stored_at: DateTime<Utc>,
    pub kb_snapshot_version: String,
}

impl CachedAnalysis {
    fn is_coherent(&self) -> bool {
        self.package_name == self.result.package_name.as_str()
            && self.kb_snapshot_version == self.result.kb_snapshot_version
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceSession {
    pub device_id: String,
    pub topic: String,
    pub created_at: DateTime<Utc>,
}

/// What a cache miss must compute.
#[derive(Debug, Clone)]
pub struct AnalysisBundle {
    pub declared: DeclaredBehavior,
    pub result: AnalysisResult,
    pub warning: WarningReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheStatus {
    Hit,
    MissStored,
    /// Computed fine, but persisting the entry failed; the result is still
    /// returned and the next request will recompute.
    MissStoreFailed,
}

impl CacheStatus {
    pub fn is_hit(&self) -> bool {
        matches!(self, CacheStatus::Hit)
    }
}

/// Stable fingerprint of a granted-permission set: SHA-256 of the sorted
/// names, truncated to 16 hex chars.
pub fn grants_fingerprint(runtime: &RuntimeBehavior) -> String {
    let mut hasher = Sha256::new();
    for name in &runtime.granted {
        hasher.update(name.as_bytes());
        hasher.update(b"\n");
    }
    let digest = hasher.finalize();
    let mut hex = String::with_capacity(16);
    for byte in digest.iter().take(8) {
        hex.push_str(&format!("{byte:02x}"));
    }
    hex
}

struct Flight {
    done: Mutex<bool>,
    wakeup: Condvar,
}

/// Releases a flight on drop so a panicking `compute` cannot strand the
/// threads waiting on it.
struct FlightGuard<'a> {
    inflight: &'a Mutex<HashMap<String, Arc<Flight>>>,
    key: String,
}

impl Drop for FlightGuard<'_> {
    fn drop(&mut self) {
        if let Some(flight) = self.inflight.lock().unwrap().remove(&self.key) {
            *flight.done.lock().unwrap() = true;
            flight.wakeup.notify_all();
        }
    }
}

pub struct AnalysisStore {
    store: Arc<dyn KeyValueStore>,
    inflight: Mutex<HashMap<String, Arc<Flight>>>,
    registration: Mutex<()>,
}

impl AnalysisStore {
    pub fn new(store: Arc<dyn KeyValueStore>) -> Self {
        AnalysisStore {
            store,
            inflight: Mutex::new(HashMap::new()),
            registration: Mutex::new(()),
        }
    }

    pub fn cache_key(runtime: &RuntimeBehavior, kb_snapshot_version: &str) -> String {
        format!(
            "{}{KEY_SEPARATOR}{}{KEY_SEPARATOR}{kb_snapshot_version}",
            runtime.package_name,
            grants_fingerprint(runtime)
        )
    }

    fn lookup(&self, key: &str) -> Option<CachedAnalysis> {
        let value = self.store.get(ANALYSES_KEYSPACE, key).ok()??;
        let cached: CachedAnalysis = serde_json::from_value(value).ok()?;
        cached.is_coherent().then_some(cached)
    }

    /// Returns the cached analysis for (package, grants, KB version) or
    /// computes, stores, and returns it. Under concurrent misses for one
    /// key, `compute` runs exactly once and the rest wait for its entry.
    /// A storage failure after compute degrades to `MissStoreFailed`
    /// rather than discarding the result.
    pub fn get_or_insert<E>(
        &self,
        runtime: &RuntimeBehavior,
        kb_snapshot_version: &str,
        compute: impl FnOnce() -> Result<AnalysisBundle, E>,
    ) -> Result<(CachedAnalysis, CacheStatus), E> {
        let key = Self::cache_key(runtime, kb_snapshot_version);
        let mut compute = Some(compute);
        loop {
            if let Some(hit) = self.lookup(&key) {
                return Ok((hit, CacheStatus::Hit));
            }
            let flight = {
                let mut inflight = self.inflight.lock().unwrap();
                match inflight.get(&key) {
                    Some(existing) => Some(Arc::clone(existing)),
                    None => {
                        inflight.insert(
                            key.clone(),
                            Arc::new(Flight {
                                done: Mutex::new(false),
                                wakeup: Condvar::new(),
                            }),
                        );
                        None
                    }
                }
            };
            if let Some(flight) = flight {
                // Someone else is computing this key; wait and re-check.
                let mut done = flight.done.lock().unwrap();
                while !*done {
                    done = flight.wakeup.wait(done).unwrap();
                }
                continue;
            }

            let _guard = FlightGuard {
                inflight: &self.inflight,
                key: key.clone(),
            };
            let outcome = (compute.take().expect("compute claimed once"))();
            let response = outcome.map(|bundle| {
                let cached = CachedAnalysis {
                    package_name: runtime.package_name.to_string(),
                    runtime: runtime.clone(),
                    declared: bundle.declared,
                    result: bundle.result,
                    warning: bundle.warning,
                    stored_at: Utc::now(),
                    kb_snapshot_version: kb_snapshot_version.to_string(),
                };
                debug_assert!(cached.is_coherent());
                let status = match serde_json::to_value(&cached)
                    .map_err(|_| ())
                    .and_then(|value| {
                        self.store
                            .put(ANALYSES_KEYSPACE, &key, &value)
                            .map_err(|_| ())
                    }) {
                    Ok(()) => CacheStatus::MissStored,
                    Err(()) => CacheStatus::MissStoreFailed,
                };
                (cached, status)
            });
            return response;
        }
    }

    /// Direct cache inspection (no compute).
    pub fn peek(&self, runtime: &RuntimeBehavior, kb_snapshot_version: &str) -> Option<CachedAnalysis> {
        self.lookup(&Self::cache_key(runtime, kb_snapshot_version))
    }

    /// Registers a device session; re-registration returns the stored
    /// session unchanged, even under races.
    pub fn register_device(&self, device_id: &str) -> Result<DeviceSession, StoreError> {
        let topic = topic_name(device_id)?;
        let _guard = self.registration.lock().unwrap();
        if let Some(value) = self.store.get(DEVICES_KEYSPACE, device_id)? {
            if let Ok(existing) = serde_json::from_value::<DeviceSession>(value) {
                return Ok(existing);
            }
        }
        let session = DeviceSession {
            device_id: device_id.to_string(),
            topic,
            created_at: Utc::now(),
        };
        let value = serde_json::to_value(&session).expect("session serializes");
        self.store.put(DEVICES_KEYSPACE, device_id, &value)?;
        Ok(session)
    }

    pub fn sessions(&self) -> Result<Vec<DeviceSession>, StoreError> {
        let mut sessions = Vec::new();
        for key in self.store.keys(DEVICES_KEYSPACE)? {
            if let Some(value) = self.store.get(DEVICES_KEYSPACE, &key)? {
                if let Ok(session) = serde_json::from_value(value) {
                    sessions.push(session);
                }
            }
        }
        Ok(sessions)
    }

    /// Drops every cached analysis for the package. Returns how many
    /// entries went away.
    pub fn evict_package(&self, package_name: &str) -> Result<usize, StoreError> {
        self.evict_matching(|key| {
            key.starts_with(&format!("{package_name}{KEY_SEPARATOR}"))
        })
    }

    /// Drops every cached analysis computed under the given KB snapshot.
    pub fn evict_kb_version(&self, kb_snapshot_version: &str) -> Result<usize, StoreError> {
        self.evict_matching(|key| key.ends_with(&format!("{KEY_SEPARATOR}{kb_snapshot_version}")))
    }

    fn evict_matching(&self, predicate: impl Fn(&str) -> bool) -> Result<usize, StoreError> {
        let mut evicted = 0;
        for key in self.store.keys(ANALYSES_KEYSPACE)? {
            if predicate(&key) && self.store.remove(ANALYSES_KEYSPACE, &key)? {
                evicted += 1;
            }
        }
        Ok(evicted)
    }

    pub fn cached_count(&self) -> Result<usize, StoreError> {
        Ok(self.store.keys(ANALYSES_KEYSPACE)?.len())
    }

    /// Durable dedup marker for handled envelopes: returns true the first
    /// time an id is marked, false if it was already processed. Survives
    /// restarts, so an at-least-once bus cannot trigger double handling.
    pub fn mark_processed(&self, msg_id: &str, topic: &str) -> Result<bool, StoreError> {
        if self.store.get(PROCESSED_KEYSPACE, msg_id)?.is_some() {
            return Ok(false);
        }
        let record = serde_json::json!({ "topic": topic, "at": Utc::now() });
        self.store.put(PROCESSED_KEYSPACE, msg_id, &record)?;
        Ok(true)
    }

    pub fn already_processed(&self, msg_id: &str) -> Result<bool, StoreError> {
        Ok(self.store.get(PROCESSED_KEYSPACE, msg_id)?.is_some())
    }
}

#[cfg(test)]
mod tests {
    use std::convert::Infallible;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Barrier;

    use super::*;
    use crate::kv::MemoryStore;
    use dsaudit_core::analysis::{
        detect_inconsistencies, PackageName, RelevanceTable,
    };
    use dsaudit_core::kb::KnowledgeBase;
    use dsaudit_core::summary::summarize;

    fn runtime(package: &str, granted: &[&str]) -> RuntimeBehavior {
        RuntimeBehavior::new(
            PackageName::new(package).unwrap(),
            granted.iter().map(|p| p.to_string()),
        )
    }

    fn bundle_for(runtime: &RuntimeBehavior, kb_snapshot_version: &str) -> AnalysisBundle {
        let declared = DeclaredBehavior::new(
            ["Photos and videos".to_string()],
            "listing",
            "Games",
        )
        .unwrap();
        let mut result = detect_inconsistencies(
            runtime,
            &declared,
            KnowledgeBase::bundled(),
            RelevanceTable::bundled(),
        )
        .unwrap();
        // Tests exercise the cache under made-up KB versions; the result
        // must agree with the version it is filed under.
        result.kb_snapshot_version = kb_snapshot_version.to_string();
        let warning = summarize(&result);
        AnalysisBundle {
            declared,
            result,
            warning,
        }
    }

    fn store() -> AnalysisStore {
        AnalysisStore::new(Arc::new(MemoryStore::new()))
    }

    #[test]
    fn cold_then_hit_then_grant_change() {
        let cache = store();
        let calls = AtomicUsize::new(0);
        let rt = runtime("com.example.app", &["CAMERA"]);
        let kb = "kb-v1";

        let (first, status) = cache
            .get_or_insert::<Infallible>(&rt, kb, || {
                calls.fetch_add(1, Ordering::SeqCst);
                Ok(bundle_for(&rt, kb))
            })
            .unwrap();
        assert_eq!(status, CacheStatus::MissStored);
        assert_eq!(calls.load(Ordering::SeqCst), 1);

        let (second, status) = cache
            .get_or_insert::<Infallible>(&rt, kb, || {
                calls.fetch_add(1, Ordering::SeqCst);
                Ok(bundle_for(&rt, kb))
            })
            .unwrap();
        assert_eq!(status, CacheStatus::Hit);
        assert_eq!(calls.load(Ordering::SeqCst), 1, "hit must not recompute");
        assert_eq!(first.result, second.result);

        let widened = runtime("com.example.app", &["CAMERA", "RECORD_AUDIO"]);
        let (_, status) = cache
            .get_or_insert::<Infallible>(&widened, kb, || {
                calls.fetch_add(1, Ordering::SeqCst);
                Ok(bundle_for(&widened, kb))
            })
            .unwrap();
        assert_eq!(status, CacheStatus::MissStored, "grant change is a miss");

        let (_, status) = cache
            .get_or_insert::<Infallible>(&rt, "kb-v2", || {
                calls.fetch_add(1, Ordering::SeqCst);
                Ok(bundle_for(&rt, "kb-v2"))
            })
            .unwrap();
        assert_eq!(status, CacheStatus::MissStored, "kb change is a miss");
        assert_eq!(calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn fingerprint_ignores_order_and_tracks_content() {
        let a = runtime("com.example.app", &["CAMERA", "RECORD_AUDIO"]);
        let b = runtime("com.example.app", &["RECORD_AUDIO", "CAMERA"]);
        let c = runtime("com.example.app", &["CAMERA"]);
        assert_eq!(grants_fingerprint(&a), grants_fingerprint(&b));
        assert_ne!(grants_fingerprint(&a), grants_fingerprint(&c));
        assert_eq!(grants_fingerprint(&a).len(), 16);
    }

    #[test]
    fn sixteen_thread_hammer_computes_once() {
        let cache = Arc::new(store());
        let calls = Arc::new(AtomicUsize::new(0));
        let barrier = Arc::new(Barrier::new(16));
        let mut handles = Vec::new();
        for _ in 0..16 {
            let cache = Arc::clone(&cache);
            let calls = Arc::clone(&calls);
            let barrier = Arc::clone(&barrier);
            handles.push(std::thread::spawn(move || {
                let rt = runtime("com.example.app", &["CAMERA"]);
                barrier.wait();
                let (cached, _) = cache
                    .get_or_insert::<Infallible>(&rt, "kb-v1", || {
                        calls.fetch_add(1, Ordering::SeqCst);
                        std::thread::sleep(std::time::Duration::from_millis(25));
                        Ok(bundle_for(&rt, "kb-v1"))
                    })
                    .unwrap();
                cached.result.verdict
            }));
        }
        let verdicts: Vec<_> = handles.into_iter().map(|h| h.join().unwrap()).collect();
        assert_eq!(calls.load(Ordering::SeqCst), 1, "single flight");
        assert!(verdicts.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn panicking_compute_does_not_strand_waiters() {
        let cache = Arc::new(store());
        let barrier = Arc::new(Barrier::new(4));
        let mut handles = Vec::new();
        for i in 0..4 {
            let cache = Arc::clone(&cache);
            let barrier = Arc::clone(&barrier);
            handles.push(std::thread::spawn(move || {
                let rt = runtime("com.example.app", &["CAMERA"]);
                barrier.wait();
                std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
                    cache
                        .get_or_insert::<Infallible>(&rt, "kb-v1", || {
                            if i == 0 {
                                panic!("compute blew up");
                            }
                            Ok(bundle_for(&rt, "kb-v1"))
                        })
                        .unwrap()
                        .0
                }))
                .ok()
            }));
        }
        let results: Vec<_> = handles.into_iter().map(|h| h.join().unwrap()).collect();
        let survivors = results.iter().flatten().count();
        // Thread 0 may or may not have won the flight; everyone else
        // terminates with a real entry either way.
        assert!(survivors >= 3, "waiters must recover from a panicked flight");
    }

    struct BrokenStore;

    impl KeyValueStore for BrokenStore {
        fn get(&self, _: &str, _: &str) -> Result<Option<serde_json::Value>, StoreError> {
            Ok(None)
        }
        fn put(&self, _: &str, _: &str, _: &serde_json::Value) -> Result<(), StoreError> {
            Err(StoreError::Io {
                path: "broken".into(),
                source: std::io::Error::other("disk on fire"),
            })
        }
        fn remove(&self, _: &str, _: &str) -> Result<bool, StoreError> {
            Ok(false)
        }
        fn keys(&self, _: &str) -> Result<Vec<String>, StoreError> {
            Ok(Vec::new())
        }
    }

    #[test]
    fn storage_failure_still_returns_the_computed_result() {
        let cache = AnalysisStore::new(Arc::new(BrokenStore));
        let rt = runtime("com.example.app", &["CAMERA"]);
        let (cached, status) = cache
            .get_or_insert::<Infallible>(&rt, "kb-v1", || Ok(bundle_for(&rt, "kb-v1")))
            .unwrap();
        assert_eq!(status, CacheStatus::MissStoreFailed);
        assert_eq!(cached.package_name, "com.example.app");
        assert!(cache.peek(&rt, "kb-v1").is_none(), "entry must be absent");
    }

    #[test]
    fn compute_errors_propagate_and_release_the_flight() {
        let cache = store();
        let rt = runtime("com.example.app", &["CAMERA"]);
        let err = cache
            .get_or_insert::<&str>(&rt, "kb-v1", || Err("fixture missing"))
            .unwrap_err();
        assert_eq!(err, "fixture missing");
        // The key is not poisoned: a later call can compute again.
        let (_, status) = cache
            .get_or_insert::<Infallible>(&rt, "kb-v1", || Ok(bundle_for(&rt, "kb-v1")))
            .unwrap();
        assert_eq!(status, CacheStatus::MissStored);
    }

    #[test]
    fn read_your_writes() {
        let cache = store();
        let rt = runtime("com.example.app", &["CAMERA"]);
        cache
            .get_or_insert::<Infallible>(&rt, "kb-v1", || Ok(bundle_for(&rt, "kb-v1")))
            .unwrap();
        assert!(cache.peek(&rt, "kb-v1").is_some());
        assert_eq!(cache.cached_count().unwrap(), 1);
    }

    #[test]
    fn device_registration_is_idempotent() {
        let cache = store();
        let first = cache.register_device("9774d56d682e549c").unwrap();
        assert_eq!(first.topic, "device-9774d56d682e549c");
        let second = cache.register_device("9774d56d682e549c").unwrap();
        assert_eq!(first, second, "same session, same created_at");
        assert!(cache.register_device("bad id!").is_err());
    }

    #[test]
    fn hundred_concurrent_registrations_store_one_session() {
        let cache = Arc::new(store());
        let barrier = Arc::new(Barrier::new(100));
        let mut handles = Vec::new();
        for _ in 0..100 {
            let cache = Arc::clone(&cache);
            let barrier = Arc::clone(&barrier);
            handles.push(std::thread::spawn(move || {
                barrier.wait();
                cache.register_device("shared-device").unwrap()
            }));
        }
        let sessions: Vec<DeviceSession> =
            handles.into_iter().map(|h| h.join().unwrap()).collect();
        assert!(sessions.windows(2).all(|w| w[0] == w[1]));
        assert_eq!(cache.sessions().unwrap().len(), 1);
    }

    #[test]
    fn eviction_by_package_and_kb_version() {
        let cache = store();
        let a1 = runtime("com.example.alpha", &["CAMERA"]);
        let a2 = runtime("com.example.alpha", &["CAMERA", "RECORD_AUDIO"]);
        let b = runtime("com.example.beta", &["CAMERA"]);
        for (rt, kb) in [(&a1, "kb-v1"), (&a2, "kb-v1"), (&b, "kb-v1"), (&a1, "kb-v2")] {
            cache
                .get_or_insert::<Infallible>(rt, kb, || Ok(bundle_for(rt, kb)))
                .unwrap();
        }
        assert_eq!(cache.cached_count().unwrap(), 4);
        assert_eq!(cache.evict_package("com.example.alpha").unwrap(), 3);
        assert_eq!(cache.cached_count().unwrap(), 1);
        assert_eq!(cache.evict_kb_version("kb-v1").unwrap(), 1);
        assert_eq!(cache.cached_count().unwrap(), 0);
    }

    #[test]
    fn processed_markers_dedupe() {
        let cache = store();
        assert!(cache.mark_processed("msg-1", "device-dev1").unwrap());
        assert!(!cache.mark_processed("msg-1", "device-dev1").unwrap());
        assert!(cache.already_processed("msg-1").unwrap());
        assert!(!cache.already_processed("msg-2").unwrap());
    }

    #[test]
    fn hits_equal_recomputation() {
        let cache = store();
        let rt = runtime("com.example.app", &["CAMERA", "READ_CALL_LOG"]);
        let (stored, _) = cache
            .get_or_insert::<Infallible>(&rt, "kb-v1", || Ok(bundle_for(&rt, "kb-v1")))
            .unwrap();
        let (hit, status) = cache
            .get_or_insert::<Infallible>(&rt, "kb-v1", || Ok(bundle_for(&rt, "kb-v1")))
            .unwrap();
        assert!(status.is_hit());
        let fresh = bundle_for(&rt, "kb-v1");
        assert_eq!(hit.result, fresh.result);
        assert_eq!(hit.result, stored.result);
        assert_eq!(hit.warning.sentences, fresh.warning.sentences);
    }
}
