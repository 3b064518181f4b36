//! The serve loop: discover device topics, consume install events in order,
//! run ingest → analysis → cache → summarize, and publish the warning back
//! on the same topic. Per-message failures become error reports; the loop
//! itself never dies with the message.

use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use dsaudit_bus::{
    error_report, warning_report, Broker, ErrorReportBody, InstallEventBody, MessageEnvelope,
    MsgType,
};
use dsaudit_core::analysis::RuntimeBehavior;
use dsaudit_core::analyst::{analyze, AnalysisRequest, AnalystError};
use dsaudit_core::ingest::load_declared_or_empty;
use dsaudit_core::kb::KnowledgeBase;
use dsaudit_core::summary::summarize;
use dsaudit_core::{AnalyzeOptions, GenerationClient, PackageName, RelevanceTable, RetrievalIndex};
use dsaudit_store::{AnalysisBundle, AnalysisStore};

#[derive(Debug, Clone)]
pub struct ServeOptions {
    pub fixtures_dir: PathBuf,
    pub analyze: AnalyzeOptions,
    /// Named-consumer identity on every device topic.
    pub consumer_name: String,
    /// Disabled only by tests that force redelivery.
    pub commit_offsets: bool,
    pub poll_interval: Duration,
}

impl ServeOptions {
    pub fn new(fixtures_dir: impl Into<PathBuf>) -> Self {
        ServeOptions {
            fixtures_dir: fixtures_dir.into(),
            analyze: AnalyzeOptions::default(),
            consumer_name: "server".to_string(),
            commit_offsets: true,
            poll_interval: Duration::from_millis(50),
        }
    }
}

/// Everything the loop analyzes with; immutable and shared across workers.
#[derive(Clone)]
pub struct ServerDeps {
    pub kb: Arc<KnowledgeBase>,
    pub index: Arc<RetrievalIndex>,
    pub relevance: Arc<RelevanceTable>,
    pub store: Arc<AnalysisStore>,
    pub client: Option<Arc<dyn GenerationClient>>,
}

/// Counter snapshot; `warnings_published + errors_published +
/// duplicates_skipped` accounts for every install event seen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServeStats {
    pub events_seen: u64,
    pub warnings_published: u64,
    pub errors_published: u64,
    pub duplicates_skipped: u64,
    pub cache_hits: u64,
}

#[derive(Default)]
struct Counters {
    events_seen: AtomicU64,
    warnings_published: AtomicU64,
    errors_published: AtomicU64,
    duplicates_skipped: AtomicU64,
    cache_hits: AtomicU64,
}

impl Counters {
    fn snapshot(&self) -> ServeStats {
        ServeStats {
            events_seen: self.events_seen.load(Ordering::SeqCst),
            warnings_published: self.warnings_published.load(Ordering::SeqCst),
            errors_published: self.errors_published.load(Ordering::SeqCst),
            duplicates_skipped: self.duplicates_skipped.load(Ordering::SeqCst),
            cache_hits: self.cache_hits.load(Ordering::SeqCst),
        }
    }
}

pub struct Server {
    bus: Broker,
    counters: Arc<Counters>,
    shutdown: Arc<AtomicBool>,
    workers: Arc<Mutex<Vec<JoinHandle<()>>>>,
    discovery: Option<JoinHandle<()>>,
}

impl Server {
    /// Starts topic discovery plus one worker per device topic. Topics that
    /// appear later are picked up automatically.
    pub fn start(bus: Broker, deps: ServerDeps, options: ServeOptions) -> Server {
        let counters = Arc::new(Counters::default());
        let shutdown = Arc::new(AtomicBool::new(false));
        let workers: Arc<Mutex<Vec<JoinHandle<()>>>> = Arc::new(Mutex::new(Vec::new()));

        let discovery = {
            let bus = bus.clone();
            let deps = deps.clone();
            let options = options.clone();
            let counters = Arc::clone(&counters);
            let shutdown = Arc::clone(&shutdown);
            let workers = Arc::clone(&workers);
            std::thread::spawn(move || {
                let mut known: Vec<String> = Vec::new();
                while !shutdown.load(Ordering::SeqCst) {
                    let topics = bus.wait_for_topic_change(known.len(), Duration::from_millis(100));
                    for topic in &topics {
                        if known.contains(topic) {
                            continue;
                        }
                        info!(component = "server", topic = %topic, "worker started");
                        let worker = spawn_worker(
                            bus.clone(),
                            topic.clone(),
                            deps.clone(),
                            options.clone(),
                            Arc::clone(&counters),
                            Arc::clone(&shutdown),
                        );
                        workers.lock().unwrap().push(worker);
                    }
                    known = topics;
                }
            })
        };

        Server {
            bus,
            counters,
            shutdown,
            workers,
            discovery: Some(discovery),
        }
    }

    pub fn stats(&self) -> ServeStats {
        self.counters.snapshot()
    }

    /// Signals shutdown, lets every worker drain what is already in its
    /// topic log, joins all threads, and returns the final counters.
    pub fn shutdown(mut self) -> ServeStats {
        self.shutdown.store(true, Ordering::SeqCst);
        if let Some(discovery) = self.discovery.take() {
            let _ = discovery.join();
        }
        let workers = std::mem::take(&mut *self.workers.lock().unwrap());
        for worker in workers {
            let _ = worker.join();
        }
        let _ = &self.bus;
        self.counters.snapshot()
    }
}

fn spawn_worker(
    bus: Broker,
    topic: String,
    deps: ServerDeps,
    options: ServeOptions,
    counters: Arc<Counters>,
    shutdown: Arc<AtomicBool>,
) -> JoinHandle<()> {
    std::thread::spawn(move || {
        let mut sub = match bus.subscribe_named(&topic, Some(MsgType::InstallEvent), &options.consumer_name)
        {
            Ok(sub) => sub,
            Err(err) => {
                warn!(component = "server", topic = %topic, error = %err, "subscribe failed");
                return;
            }
        };
        loop {
            let draining = shutdown.load(Ordering::SeqCst);
            let timeout = if draining {
                Duration::ZERO
            } else {
                options.poll_interval
            };
            match sub.next(timeout) {
                Some(envelope) => {
                    handle_install(&bus, &topic, envelope, &deps, &options, &counters);
                    if options.commit_offsets {
                        sub.commit();
                    }
                }
                None => {
                    if draining || bus.is_closed() {
                        return;
                    }
                }
            }
        }
    })
}

fn handle_install(
    bus: &Broker,
    topic: &str,
    envelope: MessageEnvelope,
    deps: &ServerDeps,
    options: &ServeOptions,
    counters: &Counters,
) {
    counters.events_seen.fetch_add(1, Ordering::SeqCst);
    let msg_id = envelope.msg_id.clone();

    if deps.store.already_processed(&msg_id).unwrap_or(false) {
        counters.duplicates_skipped.fetch_add(1, Ordering::SeqCst);
        info!(component = "server", msg_id = %msg_id, "duplicate install event skipped");
        return;
    }

    match process_install(topic, &envelope, deps, options) {
        Ok((warning_payload, cache_hit)) => {
            if cache_hit {
                counters.cache_hits.fetch_add(1, Ordering::SeqCst);
            }
            let out = warning_report(topic, warning_payload);
            let warning_id = out.msg_id.clone();
            match bus.publish(out) {
                Ok(_) => {
                    counters.warnings_published.fetch_add(1, Ordering::SeqCst);
                    info!(
                        component = "server",
                        msg_id = %msg_id,
                        warning_id = %warning_id,
                        cache_hit,
                        "warning published"
                    );
                }
                Err(err) => {
                    warn!(component = "server", msg_id = %msg_id, error = %err, "publish failed");
                    return;
                }
            }
        }
        Err(error) => {
            let body = ErrorReportBody {
                package_name: error.package,
                error: error.message,
            };
            if bus.publish(error_report(topic, &body)).is_ok() {
                counters.errors_published.fetch_add(1, Ordering::SeqCst);
            }
            warn!(component = "server", msg_id = %msg_id, error = %body.error, "install event failed");
        }
    }

    if let Err(err) = deps.store.mark_processed(&msg_id, topic) {
        warn!(component = "server", msg_id = %msg_id, error = %err, "processed marker not stored");
    }
}

struct InstallFailure {
    package: Option<String>,
    message: String,
}

fn process_install(
    topic: &str,
    envelope: &MessageEnvelope,
    deps: &ServerDeps,
    options: &ServeOptions,
) -> Result<(serde_json::Value, bool), InstallFailure> {
    let body: InstallEventBody =
        serde_json::from_value(envelope.payload.clone()).map_err(|err| InstallFailure {
            package: None,
            message: format!("install event payload unreadable: {err}"),
        })?;
    let package = PackageName::new(&body.package_name).map_err(|err| InstallFailure {
        package: Some(body.package_name.clone()),
        message: format!("bad package name: {err}"),
    })?;
    let runtime = RuntimeBehavior::new(package.clone(), body.granted.iter().cloned());

    let (declared, ingest_diagnostics) = load_declared_or_empty(&package, &options.fixtures_dir)
        .map_err(|err| InstallFailure {
            package: Some(package.to_string()),
            message: format!("declared behavior unavailable: {err}"),
        })?;

    let kb_version = deps.kb.snapshot_version();
    let (cached, status) = deps
        .store
        .get_or_insert(&runtime, kb_version, || -> Result<AnalysisBundle, AnalystError> {
            let request = AnalysisRequest {
                runtime: runtime.clone(),
                declared: declared.clone(),
            };
            let outcome = analyze(
                &request,
                &deps.kb,
                &deps.index,
                &deps.relevance,
                options.analyze,
                deps.client.as_deref(),
            )?;
            let mut result = outcome.result;
            result.diagnostics.extend(ingest_diagnostics.iter().cloned());
            let warning = summarize(&result);
            Ok(AnalysisBundle {
                declared: declared.clone(),
                result,
                warning,
            })
        })
        .map_err(|err| InstallFailure {
            package: Some(package.to_string()),
            message: format!("analysis failed: {err}"),
        })?;

    let _ = topic;
    let payload = serde_json::to_value(&cached.warning).expect("warning serializes");
    Ok((payload, status.is_hit()))
}
