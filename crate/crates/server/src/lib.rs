//! Server side of the pipeline: the long-running loop that answers install
//! events with warning reports, batch corpus analysis with statistics, and
//! the HTTP client for an external generation endpoint.

mod corpus;
mod http;
mod serve;

pub use corpus::{
    analyze_corpus, load_corpus, percent_half_up, AppAnalysis, CorpusEntry, CorpusError,
    CorpusOptions, CorpusStats,
};
pub use http::HttpGenerationClient;
pub use serve::{Server, ServeOptions, ServeStats, ServerDeps};
