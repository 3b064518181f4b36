//! Deterministic map-reduce summarization of an analysis result into a
//! short, user-facing warning.
//!
//! `map_sections` turns each nonempty section of the result (matched pairs,
//! undeclared collection, unconsented declaration, over-collection) into an
//! intermediate summary; `reduce_sections` merges the intermediates into
//! fixed-template sentences. Templates keep every sentence within a pop-up
//! friendly length; when a category list would push a sentence over the
//! limit, the list is split across several sentences of the same template.

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::analysis::{AnalysisError, AnalysisResult, FindingKind, PackageName, Verdict};

/// Pop-up display budget per sentence.
pub const MAX_SENTENCE_CHARS: usize = 280;

pub const ALL_CLEAR_SENTENCE: &str = "No privacy inconsistencies were detected: every permission you granted matches the developer's declared data practices.";

/// Category order used in the unconsented-declaration and over-collection
/// sentences. Chosen so the flagship fixtures read naturally; everything
/// else falls back to lexicographic order after these.
const DISPLAY_ORDER: [&str; 14] = [
    "Web browsing",
    "App activity",
    "App info and performance",
    "Messages",
    "Personal info",
    "Financial info",
    "Health and fitness",
    "Location",
    "Photos and videos",
    "Audio",
    "Files and docs",
    "Calendar",
    "Contacts",
    "Device or other IDs",
];

/// How a category is described to the user when the app can access it.
pub fn lay_phrase(category: &str) -> Option<&'static str> {
    Some(match category {
        "Call logs" => "your call history",
        "Web browsing" => "your browsing activity",
        "App activity" => "app usage details",
        "App info and performance" => "app performance details",
        "Messages" => "messages",
        "Personal info" => "personal information",
        "Financial info" => "financial information",
        "Health and fitness" => "health data",
        "Location" => "your precise location",
        "Photos and videos" => "your photos and videos",
        "Audio" => "audio recordings",
        "Files and docs" => "your files and documents",
        "Contacts" => "your contacts",
        "Calendar" => "your calendar",
        "Device or other IDs" => "device identifiers",
        _ => return None,
    })
}

/// Adjective-style phrase used in the over-collection sentence, where the
/// template supplies the word "data".
pub fn short_phrase(category: &str) -> Option<&'static str> {
    Some(match category {
        "Web browsing" => "web browsing",
        "App activity" => "app activity",
        "App info and performance" => "app performance",
        "Messages" => "message",
        "Personal info" => "personal",
        "Financial info" => "financial",
        "Health and fitness" => "health",
        "Location" => "location",
        "Photos and videos" => "photo and video",
        "Audio" => "audio",
        "Files and docs" => "file and document",
        "Calendar" => "calendar",
        "Contacts" => "contact",
        "Device or other IDs" => "device identifier",
        _ => return None,
    })
}

fn display_rank(category: &str) -> usize {
    DISPLAY_ORDER
        .iter()
        .position(|c| *c == category)
        .unwrap_or(DISPLAY_ORDER.len())
}

/// Serial-comma join: "a", "a and b", "a, b, and c".
fn join_phrases(phrases: &[String]) -> String {
    match phrases {
        [] => String::new(),
        [one] => one.clone(),
        [first, second] => format!("{first} and {second}"),
        [head @ .., last] => format!("{}, and {last}", head.join(", ")),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SectionTag {
    Matched,
    UndeclaredCollection,
    UnconsentedDeclaration,
    ExcessiveCollection,
}

/// Per-section intermediate: the ordered lay phrases plus a readable line
/// for diagnostics.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SectionSummary {
    pub tag: SectionTag,
    pub phrases: Vec<String>,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WarningReport {
    pub package_name: PackageName,
    pub verdict: Verdict,
    pub sentences: Vec<String>,
    pub generated_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<String>,
}

impl WarningReport {
    pub fn validate(&self) -> Result<(), AnalysisError> {
        if self.sentences.is_empty() {
            return Err(AnalysisError::ResultInvariant(
                "warning report has no sentences".into(),
            ));
        }
        for sentence in &self.sentences {
            let length = sentence.chars().count();
            if length > MAX_SENTENCE_CHARS {
                return Err(AnalysisError::ResultInvariant(format!(
                    "sentence exceeds {MAX_SENTENCE_CHARS} characters ({length}): {sentence:?}"
                )));
            }
        }
        Ok(())
    }
}

fn categories_of(result: &AnalysisResult, kind: FindingKind) -> Vec<String> {
    let mut categories: Vec<String> = result
        .findings
        .iter()
        .filter(|f| f.kind == kind)
        .flat_map(|f| f.categories.iter().cloned())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    if matches!(
        kind,
        FindingKind::UnconsentedDeclaration | FindingKind::ExcessiveCollection
    ) {
        categories.sort_by(|a, b| display_rank(a).cmp(&display_rank(b)).then_with(|| a.cmp(b)));
    }
    categories
}

/// Decomposes the result into one intermediate per nonempty section.
pub fn map_sections(result: &AnalysisResult) -> Vec<SectionSummary> {
    let mut sections = Vec::new();

    let mut matched_categories: Vec<String> = result
        .matched
        .iter()
        .map(|(_, category)| category.clone())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    matched_categories.sort();
    if !matched_categories.is_empty() {
        let phrases: Vec<String> = matched_categories
            .iter()
            .map(|c| lay_phrase(c).unwrap_or(c).to_string())
            .collect();
        sections.push(SectionSummary {
            tag: SectionTag::Matched,
            text: format!("declared access covers {}", join_phrases(&phrases)),
            phrases,
        });
    }

    let undeclared = categories_of(result, FindingKind::UndeclaredCollection);
    if !undeclared.is_empty() {
        let phrases: Vec<String> = undeclared
            .iter()
            .map(|c| lay_phrase(c).unwrap_or(c).to_string())
            .collect();
        sections.push(SectionSummary {
            tag: SectionTag::UndeclaredCollection,
            text: format!("collects {} without declaring it", join_phrases(&phrases)),
            phrases,
        });
    }

    let unconsented = categories_of(result, FindingKind::UnconsentedDeclaration);
    if !unconsented.is_empty() {
        let phrases: Vec<String> = unconsented
            .iter()
            .map(|c| lay_phrase(c).unwrap_or(c).to_string())
            .collect();
        sections.push(SectionSummary {
            tag: SectionTag::UnconsentedDeclaration,
            text: format!("declares {} without granted access", join_phrases(&phrases)),
            phrases,
        });
    }

    let excessive = categories_of(result, FindingKind::ExcessiveCollection);
    if !excessive.is_empty() {
        let phrases: Vec<String> = excessive
            .iter()
            .map(|c| short_phrase(c).unwrap_or(c).to_string())
            .collect();
        sections.push(SectionSummary {
            tag: SectionTag::ExcessiveCollection,
            text: format!(
                "declares {} data unrelated to its store category",
                join_phrases(&phrases)
            ),
            phrases,
        });
    }

    sections
}

/// Instantiates `render` over the phrase list, splitting the list across
/// several sentences when a single one would exceed the display budget.
fn render_chunked(phrases: &[String], render: impl Fn(&str) -> String) -> Vec<String> {
    let mut sentences = Vec::new();
    let mut chunk: Vec<String> = Vec::new();
    for phrase in phrases {
        let mut candidate = chunk.clone();
        candidate.push(phrase.clone());
        let rendered = render(&join_phrases(&candidate));
        if rendered.chars().count() > MAX_SENTENCE_CHARS && !chunk.is_empty() {
            sentences.push(render(&join_phrases(&chunk)));
            chunk = vec![phrase.clone()];
        } else {
            chunk = candidate;
        }
    }
    if !chunk.is_empty() {
        sentences.push(render(&join_phrases(&chunk)));
    }
    sentences
}

/// Merges intermediates into the final report. Sentence order is fixed:
/// undeclared collection, unconsented declaration, over-collection, then
/// the all-clear line (only for a consistent verdict). The matched
/// intermediate stays diagnostic and produces no user-facing sentence.
pub fn reduce_sections(result: &AnalysisResult, sections: &[SectionSummary]) -> WarningReport {
    let mut sentences = Vec::new();
    for section in sections {
        match section.tag {
            SectionTag::Matched => {}
            SectionTag::UndeclaredCollection => sentences.extend(render_chunked(
                &section.phrases,
                |list| format!("The app can collect {list}, but the app developer does not mention it in the privacy information shown on the app store."),
            )),
            SectionTag::UnconsentedDeclaration => sentences.extend(render_chunked(
                &section.phrases,
                |list| format!("The app states that it collects data such as {list}, even though it has not received your consent to access this information on your device."),
            )),
            SectionTag::ExcessiveCollection => sentences.extend(render_chunked(
                &section.phrases,
                |list| {
                    format!(
                        "The app may over-collect because {list} data may not relate to its {} features.",
                        result.app_category
                    )
                },
            )),
        }
    }
    if result.verdict == Verdict::Consistent {
        sentences.push(ALL_CLEAR_SENTENCE.to_string());
    }
    WarningReport {
        package_name: result.package_name.clone(),
        verdict: result.verdict,
        sentences,
        generated_at: Utc::now(),
        diagnostics: result.diagnostics.clone(),
    }
}

/// Full pipeline: map then reduce.
pub fn summarize(result: &AnalysisResult) -> WarningReport {
    reduce_sections(result, &map_sections(result))
}
