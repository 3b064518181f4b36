//! The pluggable analyst boundary.
//!
//! Two analysts sit behind one entry point: the deterministic rules
//! analyst (the default, and the only one acceptance trusts) and an
//! external generative analyst that builds an analysis prompt, optionally
//! augments it with retrieved KB context, sends it to a text-generation
//! backend, and validates the structured response against the same
//! invariants the rules path guarantees by construction.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{
    detect_inconsistencies, AnalysisError, AnalysisResult, DeclaredBehavior, Finding,
    RelevanceTable, RuntimeBehavior, Verdict,
};
use crate::kb::{self, KnowledgeBase};
use crate::retrieval::{
    assemble_final_prompt, default_k, RetrievalContext, RetrievalError, RetrievalIndex,
};

const PROMPT_TASK: &str = "Task: Detect inconsistencies between runtime-granted permissions and declared DS information according to the following definitions.";
const PROMPT_INPUTS: &str = "Inputs: X_runtime (permissions granted to app X) and X_declared (sensitive data categories the app claims to collect).";
const PROMPT_CASES: &str = "Inconsistency cases: Case 1 occurs when permission to access sensitive data is granted in X_runtime but not declared in X_declared; Case 2 occurs when sensitive data is declared in X_declared without corresponding granted permissions in X_runtime; and Case 3 occurs when both Case 1 and Case 2 are satisfied.";

#[derive(Debug, Error)]
pub enum AnalystError {
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error("external analyst selected but no generation client is configured")]
    MissingClient,
    #[error("external analyst endpoint failed: {0}")]
    Endpoint(String),
    #[error("external analyst response failed validation ({reason}); raw response: {raw}")]
    InvalidResponse { reason: String, raw: String },
}

/// Failure surfaced by a generation backend (transport, HTTP, timeout).
#[derive(Debug, Error)]
#[error("{message}")]
pub struct GenerationError {
    pub message: String,
}

impl GenerationError {
    pub fn new(message: impl Into<String>) -> Self {
        GenerationError {
            message: message.into(),
        }
    }
}

/// Text-generation backend. Implementations must tolerate concurrent
/// in-flight calls and apply their own per-request timeouts.
pub trait GenerationClient: Send + Sync {
    fn generate(&self, prompt: &str) -> Result<String, GenerationError>;
}

/// One analysis request: what the app does plus what it claims.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalysisRequest {
    pub runtime: RuntimeBehavior,
    pub declared: DeclaredBehavior,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnalystKind {
    Rules,
    External,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AnalyzeOptions {
    pub analyst: AnalystKind,
    /// Ablation switch: when off, the external analyst sends the bare
    /// prompt with no retrieved context.
    pub use_retrieval: bool,
    /// When the external path fails (endpoint or validation), fall back to
    /// the rules analyst instead of surfacing the error.
    pub fallback_to_rules: bool,
}

impl Default for AnalyzeOptions {
    fn default() -> Self {
        AnalyzeOptions {
            analyst: AnalystKind::Rules,
            use_retrieval: true,
            fallback_to_rules: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalystOutcome {
    pub result: AnalysisResult,
    /// Present only on the external path: the context actually sent.
    pub context: Option<RetrievalContext>,
    pub fell_back_to_rules: bool,
}

/// Builds the analysis prompt P for a request. Inputs are serialized as
/// sorted JSON arrays, so the prompt is deterministic.
pub fn build_prompt(request: &AnalysisRequest) -> String {
    let granted = serde_json::to_string(&request.runtime.granted).expect("set serializes");
    let declared =
        serde_json::to_string(&request.declared.declared_categories).expect("set serializes");
    format!(
        "{PROMPT_TASK}\n{PROMPT_INPUTS}\n{PROMPT_CASES}\nX_pkgname: {}\nX_runtime: {granted}\nX_declared: {declared}",
        request.runtime.package_name
    )
}

/// Retrieves KB context for a request: one top-1 lookup per granted
/// permission present in the KB and per declared category, deduplicated,
/// ordered by (score desc, entry_id asc), truncated to the default k.
pub fn build_retrieval_context(
    request: &AnalysisRequest,
    kb: &KnowledgeBase,
    index: &RetrievalIndex,
) -> Result<RetrievalContext, AnalystError> {
    let p = build_prompt(request);
    let mut hits: BTreeMap<String, f64> = BTreeMap::new();
    let mut lookup = |entry_id: &str| -> Result<(), AnalystError> {
        let Some(entry) = index.entry(entry_id) else {
            return Ok(());
        };
        let text = entry.text.clone();
        for (id, score) in index.retrieve(&text, 1)? {
            let slot = hits.entry(id).or_insert(score);
            if score > *slot {
                *slot = score;
            }
        }
        Ok(())
    };
    for name in &request.runtime.granted {
        lookup(name)?;
    }
    for category in &request.declared.declared_categories {
        lookup(&format!("category:{category}"))?;
    }

    let mut ranked: Vec<(String, f64)> = hits.into_iter().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let k = default_k(
        request.runtime.granted.len(),
        request.declared.declared_categories.len(),
    );
    ranked.truncate(k);
    Ok(assemble_final_prompt(&p, &ranked, kb)?)
}

/// Response schema expected from the external analyst.
#[derive(Debug, Deserialize)]
struct ExternalResponse {
    #[serde(default)]
    matched: Vec<(String, String)>,
    findings: Vec<Finding>,
    verdict: Verdict,
}

fn parse_external_response(
    raw: &str,
    request: &AnalysisRequest,
    kb: &KnowledgeBase,
) -> Result<AnalysisResult, AnalystError> {
    let invalid = |reason: String| AnalystError::InvalidResponse {
        reason,
        raw: raw.to_string(),
    };
    let response: ExternalResponse =
        serde_json::from_str(raw).map_err(|e| invalid(format!("not valid response JSON: {e}")))?;
    for finding in &response.findings {
        for name in &finding.permissions {
            if kb.permission(name).is_none() {
                return Err(invalid(format!("finding names unknown permission {name:?}")));
            }
        }
        for category in &finding.categories {
            if !kb::is_canonical_category(category) && !kb::is_mapping_label(category) {
                return Err(invalid(format!("finding names unknown category {category:?}")));
            }
        }
    }
    let result = AnalysisResult {
        package_name: request.runtime.package_name.clone(),
        app_category: request.declared.app_category.clone(),
        matched: response.matched,
        findings: response.findings,
        verdict: response.verdict,
        kb_snapshot_version: kb.snapshot_version().to_string(),
        diagnostics: Vec::new(),
    };
    result.validate().map_err(|e| invalid(e.to_string()))?;
    Ok(result)
}

fn rules_outcome(
    request: &AnalysisRequest,
    kb: &KnowledgeBase,
    relevance: &RelevanceTable,
) -> Result<AnalystOutcome, AnalystError> {
    let result = detect_inconsistencies(&request.runtime, &request.declared, kb, relevance)?;
    Ok(AnalystOutcome {
        result,
        context: None,
        fell_back_to_rules: false,
    })
}

/// Runs the configured analyst over a request.
pub fn analyze(
    request: &AnalysisRequest,
    kb: &KnowledgeBase,
    index: &RetrievalIndex,
    relevance: &RelevanceTable,
    options: AnalyzeOptions,
    client: Option<&dyn GenerationClient>,
) -> Result<AnalystOutcome, AnalystError> {
    match options.analyst {
        AnalystKind::Rules => rules_outcome(request, kb, relevance),
        AnalystKind::External => {
            let Some(client) = client else {
                return Err(AnalystError::MissingClient);
            };
            let context = if options.use_retrieval {
                build_retrieval_context(request, kb, index)?
            } else {
                let p = build_prompt(request);
                RetrievalContext {
                    query_prompt: p.clone(),
                    retrieved: Vec::new(),
                    final_prompt: p,
                }
            };
            let external = client
                .generate(&context.final_prompt)
                .map_err(|e| AnalystError::Endpoint(e.message))
                .and_then(|raw| parse_external_response(&raw, request, kb));
            match external {
                Ok(result) => Ok(AnalystOutcome {
                    result,
                    context: Some(context),
                    fell_back_to_rules: false,
                }),
                Err(error) if options.fallback_to_rules => {
                    let mut outcome = rules_outcome(request, kb, relevance)?;
                    outcome
                        .result
                        .diagnostics
                        .push(format!("external analyst failed, used rules instead: {error}"));
                    outcome.context = Some(context);
                    outcome.fell_back_to_rules = true;
                    Ok(outcome)
                }
                Err(error) => Err(error),
            }
        }
    }
}
