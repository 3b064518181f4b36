//! Persistence for the analysis pipeline: a small keyspace/key/value
//! storage interface with embedded implementations, an analysis cache with
//! single-flight semantics, and the device-session registry.

mod cache;
mod kv;

pub use cache::{
    grants_fingerprint, AnalysisBundle, AnalysisStore, CacheStatus, CachedAnalysis, DeviceSession,
};
pub use kv::{FileStore, KeyValueStore, MemoryStore, StoreError};
