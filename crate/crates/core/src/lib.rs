//! Core analysis pipeline for auditing Android apps against their declared
//! Data Safety practices.
//!
//! The flow runs in stages: [`kb`] loads the permission registry, the
//! sensitive-data taxonomy, and the permission-to-category mapping;
//! [`ingest`] brings in an app's declared behavior from fixture files;
//! [`analysis`] compares granted permissions with declarations and classifies
//! the inconsistency case; [`retrieval`] backs the optional generative
//! analyst with similarity search over KB entries; [`summary`] turns an
//! analysis result into short user-facing warning sentences.

pub mod analysis;
pub mod analyst;
pub mod ingest;
pub mod kb;
pub mod retrieval;
pub mod summary;

pub use analysis::{
    AnalysisResult, DeclaredBehavior, Finding, FindingKind, PackageName, RelevanceTable,
    RuntimeBehavior, Verdict,
};
pub use analyst::{AnalysisRequest, AnalystKind, AnalyzeOptions, GenerationClient};
pub use kb::KnowledgeBase;
pub use retrieval::RetrievalIndex;
pub use summary::WarningReport;
