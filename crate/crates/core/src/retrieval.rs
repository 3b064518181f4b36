//! Similarity-search index over knowledge-base entries.
//!
//! Featurization is deterministic and lexical: TF-IDF over the KB corpus
//! with cosine similarity. One entry is indexed per permission (its name
//! plus registry description) and per category (its name plus data-type
//! definitions). Everything here is pure; the index is immutable after
//! build, so concurrent retrieval needs no coordination.

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::kb::KnowledgeBase;

/// Delimiter line between the query prompt and retrieved context blocks.
pub const PROMPT_SEPARATOR: &str = "\n---\n";

/// Prefix distinguishing category entry ids from permission names.
pub const CATEGORY_ENTRY_PREFIX: &str = "category:";

/// Scores this close to 1.0 are reported as exact matches; cosine of a
/// vector with itself is 1 by definition and only float noise says otherwise.
const SELF_SIMILARITY_EPSILON: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("knowledge base has no permissions to index")]
    EmptyKnowledgeBase,
    #[error("entries unusable for indexing (empty or token-free text): {0:?}")]
    UnindexableEntries(Vec<String>),
    #[error("empty text")]
    EmptyText,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("retrieved list references unknown entry id {0:?}")]
    UnknownEntry(String),
    #[error("retrieved list is not sorted by non-increasing score")]
    UnsortedRetrievals,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IndexedEntry {
    pub entry_id: String,
    pub text: String,
    pub vector: Vec<f64>,
}

/// One retrieved entry with its similarity score and decoded text.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetrievedEntry {
    pub entry_id: String,
    pub score: f64,
    pub decoded_text: String,
}

/// The assembled context for a generative analyst call.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetrievalContext {
    pub query_prompt: String,
    pub retrieved: Vec<RetrievedEntry>,
    pub final_prompt: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    vocabulary: BTreeMap<String, usize>,
    idf: Vec<f64>,
    entries: Vec<IndexedEntry>,
}

fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .replace('_', " ")
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

fn entry_text_for_permission(name: &str, description: &str) -> String {
    format!("{name} {description}")
}

fn entry_text_for_category(kb: &KnowledgeBase, name: &str) -> Option<String> {
    Some(format!("{name} {}", decode_data_types(kb, name)?))
}

fn decode_data_types(kb: &KnowledgeBase, name: &str) -> Option<String> {
    let category = kb.category(name)?;
    Some(
        category
            .data_types
            .iter()
            .map(|dt| format!("{}: {}", dt.type_name, dt.definition))
            .collect::<Vec<_>>()
            .join("; "),
    )
}

impl RetrievalIndex {
    /// Builds the index over every permission and category in `kb`.
    pub fn build(kb: &KnowledgeBase) -> Result<Self, RetrievalError> {
        if kb.permissions().is_empty() {
            return Err(RetrievalError::EmptyKnowledgeBase);
        }

        let mut sources: Vec<(String, String)> = Vec::new();
        let mut unusable: Vec<String> = Vec::new();
        for (name, permission) in kb.permissions() {
            let text = entry_text_for_permission(name, &permission.description);
            if permission.description.trim().is_empty() || tokenize(&text).is_empty() {
                unusable.push(name.clone());
                continue;
            }
            sources.push((name.clone(), text));
        }
        for name in kb.categories().keys() {
            let entry_id = format!("{CATEGORY_ENTRY_PREFIX}{name}");
            let text = entry_text_for_category(kb, name).unwrap_or_default();
            if text.trim().is_empty() || tokenize(&text).is_empty() {
                unusable.push(entry_id);
                continue;
            }
            sources.push((entry_id, text));
        }
        if !unusable.is_empty() {
            return Err(RetrievalError::UnindexableEntries(unusable));
        }

        let tokenized: Vec<Vec<String>> = sources.iter().map(|(_, text)| tokenize(text)).collect();
        let mut document_frequency: BTreeMap<String, usize> = BTreeMap::new();
        for tokens in &tokenized {
            let mut seen = std::collections::BTreeSet::new();
            for token in tokens {
                if seen.insert(token) {
                    *document_frequency.entry(token.clone()).or_insert(0) += 1;
                }
            }
        }
        let vocabulary: BTreeMap<String, usize> = document_frequency
            .keys()
            .enumerate()
            .map(|(i, term)| (term.clone(), i))
            .collect();
        let n = sources.len() as f64;
        let mut idf = vec![0.0; vocabulary.len()];
        for (term, &slot) in &vocabulary {
            let df = document_frequency[term] as f64;
            idf[slot] = ((n + 1.0) / (df + 1.0)).ln() + 1.0;
        }

        let mut index = RetrievalIndex {
            vocabulary,
            idf,
            entries: Vec::with_capacity(sources.len()),
        };
        for ((entry_id, text), tokens) in sources.into_iter().zip(tokenized) {
            let vector = index.vectorize(&tokens);
            index.entries.push(IndexedEntry {
                entry_id,
                text,
                vector,
            });
        }
        Ok(index)
    }

    fn vectorize(&self, tokens: &[String]) -> Vec<f64> {
        let mut vector = vec![0.0; self.vocabulary.len()];
        for token in tokens {
            if let Some(&slot) = self.vocabulary.get(token) {
                vector[slot] += self.idf[slot];
            }
        }
        let norm = vector.iter().map(|w| w * w).sum::<f64>().sqrt();
        if norm > 0.0 {
            for w in &mut vector {
                *w /= norm;
            }
        }
        vector
    }

    /// Embeds free text into the index's vector space. Tokens outside the
    /// corpus vocabulary contribute nothing.
    pub fn embed(&self, text: &str) -> Result<Vec<f64>, RetrievalError> {
        if text.trim().is_empty() {
            return Err(RetrievalError::EmptyText);
        }
        Ok(self.vectorize(&tokenize(text)))
    }

    /// Top-k entries by cosine similarity, ties broken by entry id.
    pub fn retrieve(&self, query: &str, k: usize) -> Result<Vec<(String, f64)>, RetrievalError> {
        if k == 0 {
            return Err(RetrievalError::ZeroK);
        }
        let query_vector = self.embed(query)?;
        let mut scored: Vec<(String, f64)> = self
            .entries
            .iter()
            .map(|entry| (entry.entry_id.clone(), cosine(&query_vector, &entry.vector)))
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        scored.truncate(k.min(self.entries.len()));
        Ok(scored)
    }

    pub fn entries(&self) -> &[IndexedEntry] {
        &self.entries
    }

    pub fn entry(&self, entry_id: &str) -> Option<&IndexedEntry> {
        self.entries.iter().find(|e| e.entry_id == entry_id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dimensionality(&self) -> usize {
        self.vocabulary.len()
    }

    /// Debug dump: entry_id → vector. Not a stability contract.
    pub fn dump_debug_json(&self) -> serde_json::Value {
        let map: BTreeMap<&str, &Vec<f64>> = self
            .entries
            .iter()
            .map(|e| (e.entry_id.as_str(), &e.vector))
            .collect();
        serde_json::to_value(map).expect("vectors serialize")
    }
}

/// Cosine similarity of two same-space vectors, clamped to [0, 1]; values
/// within float noise of 1.0 are snapped to exactly 1.0.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let norm_a = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let norm_b = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm_a == 0.0 || norm_b == 0.0 {
        return 0.0;
    }
    let score = (dot / (norm_a * norm_b)).clamp(0.0, 1.0);
    if score > 1.0 - SELF_SIMILARITY_EPSILON {
        1.0
    } else {
        score
    }
}

/// Default retrieval breadth: one slot per granted permission and per
/// declared category, clamped to [1, 32].
pub fn default_k(granted: usize, declared: usize) -> usize {
    (granted + declared).clamp(1, 32)
}

/// Decoded text for an entry id: a permission's registry description or a
/// category's data-type definitions.
pub fn decode_entry(kb: &KnowledgeBase, entry_id: &str) -> Result<String, RetrievalError> {
    if let Some(name) = entry_id.strip_prefix(CATEGORY_ENTRY_PREFIX) {
        decode_data_types(kb, name).ok_or_else(|| RetrievalError::UnknownEntry(entry_id.into()))
    } else {
        kb.permission(entry_id)
            .map(|p| p.description.clone())
            .ok_or_else(|| RetrievalError::UnknownEntry(entry_id.into()))
    }
}

/// Combines the query prompt with decoded context blocks in rank order.
pub fn assemble_final_prompt(
    p: &str,
    retrieved: &[(String, f64)],
    kb: &KnowledgeBase,
) -> Result<RetrievalContext, RetrievalError> {
    if p.is_empty() {
        return Err(RetrievalError::EmptyText);
    }
    if retrieved.windows(2).any(|w| w[0].1 < w[1].1) {
        return Err(RetrievalError::UnsortedRetrievals);
    }
    let mut decoded = Vec::with_capacity(retrieved.len());
    for (entry_id, score) in retrieved {
        decoded.push(RetrievedEntry {
            entry_id: entry_id.clone(),
            score: *score,
            decoded_text: decode_entry(kb, entry_id)?,
        });
    }
    let final_prompt = if decoded.is_empty() {
        p.to_string()
    } else {
        let blocks: Vec<String> = decoded
            .iter()
            .map(|entry| format!("{}: {}", entry.entry_id, entry.decoded_text))
            .collect();
        format!("{p}{PROMPT_SEPARATOR}{}", blocks.join("\n"))
    };
    Ok(RetrievalContext {
        query_prompt: p.to_string(),
        retrieved: decoded,
        final_prompt,
    })
}
