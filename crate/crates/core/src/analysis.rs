//! Inconsistency analysis between runtime grants and declared data practices.
//!
//! The engine is set-theoretic. A granted permission is *covered* when at
//! least one of its mapped categories is declared; a declared category is
//! *covered* when at least one granted permission maps to it. Uncovered
//! grants yield Case 1, uncovered declarations yield Case 2, both together
//! yield Case 3. Over-collection flags (declared categories unrelated to
//! the app's store category) are advisory and never move the verdict.
//!
//! Everything here is a pure function of immutable inputs, so corpus-scale
//! parallel analysis needs no locking.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kb::{self, KbError, KnowledgeBase};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("invalid package name {0:?}: expected dot-separated segments like \"com.example.app\"")]
    InvalidPackageName(String),
    #[error("declared categories not in the registry: {0:?}")]
    UnknownCategories(Vec<String>),
    #[error("app category must be nonempty")]
    EmptyAppCategory,
    #[error("relevance table references unknown categories: {0:?}")]
    InvalidRelevanceTable(Vec<String>),
    #[error("failed to read relevance table {path}: {source}")]
    RelevanceIo {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to parse relevance table {path}: {source}")]
    RelevanceParse {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Kb(#[from] KbError),
    #[error("analysis result violates invariants: {0}")]
    ResultInvariant(String),
}

/// Reverse-domain package identifier, e.g. `com.facebook.katana`.
///
/// At least two dot-separated segments; each segment starts with a letter
/// and continues with letters, digits, or underscores.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct PackageName(String);

impl PackageName {
    pub fn new(name: impl Into<String>) -> Result<Self, AnalysisError> {
        let name = name.into();
        let segments: Vec<&str> = name.split('.').collect();
        let segment_ok = |s: &&str| {
            let mut chars = s.chars();
            matches!(chars.next(), Some(c) if c.is_ascii_alphabetic())
                && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
        };
        if segments.len() < 2 || !segments.iter().all(segment_ok) {
            return Err(AnalysisError::InvalidPackageName(name));
        }
        Ok(PackageName(name))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for PackageName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl TryFrom<String> for PackageName {
    type Error = AnalysisError;
    fn try_from(value: String) -> Result<Self, Self::Error> {
        PackageName::new(value)
    }
}

impl From<PackageName> for String {
    fn from(value: PackageName) -> Self {
        value.0
    }
}

/// What the app actually does on the device: the granted permission set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuntimeBehavior {
    pub package_name: PackageName,
    pub granted: BTreeSet<String>,
}

impl RuntimeBehavior {
    pub fn new(
        package_name: PackageName,
        granted: impl IntoIterator<Item = String>,
    ) -> Self {
        RuntimeBehavior {
            package_name,
            granted: granted.into_iter().collect(),
        }
    }
}

/// What the app claims on the store: data-safety categories, the listing
/// description, and the store category.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeclaredBehavior {
    pub declared_categories: BTreeSet<String>,
    pub description: String,
    pub app_category: String,
}

impl DeclaredBehavior {
    pub fn new(
        declared_categories: impl IntoIterator<Item = String>,
        description: impl Into<String>,
        app_category: impl Into<String>,
    ) -> Result<Self, AnalysisError> {
        let declared = DeclaredBehavior {
            declared_categories: declared_categories.into_iter().collect(),
            description: description.into(),
            app_category: app_category.into(),
        };
        declared.validate()?;
        Ok(declared)
    }

    pub fn validate(&self) -> Result<(), AnalysisError> {
        let unknown: Vec<String> = self
            .declared_categories
            .iter()
            .filter(|c| !kb::is_canonical_category(c))
            .cloned()
            .collect();
        if !unknown.is_empty() {
            return Err(AnalysisError::UnknownCategories(unknown));
        }
        if self.app_category.trim().is_empty() {
            return Err(AnalysisError::EmptyAppCategory);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FindingKind {
    UndeclaredCollection,
    UnconsentedDeclaration,
    ExcessiveCollection,
}

impl fmt::Display for FindingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FindingKind::UndeclaredCollection => "undeclared_collection",
            FindingKind::UnconsentedDeclaration => "unconsented_declaration",
            FindingKind::ExcessiveCollection => "excessive_collection",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub kind: FindingKind,
    pub permissions: BTreeSet<String>,
    pub categories: BTreeSet<String>,
}

impl Finding {
    pub fn validate(&self) -> Result<(), AnalysisError> {
        if self.categories.is_empty() {
            return Err(AnalysisError::ResultInvariant(format!(
                "{} finding has no categories",
                self.kind
            )));
        }
        match self.kind {
            FindingKind::UndeclaredCollection if self.permissions.is_empty() => {
                Err(AnalysisError::ResultInvariant(
                    "undeclared_collection finding has no permissions".into(),
                ))
            }
            FindingKind::UnconsentedDeclaration | FindingKind::ExcessiveCollection
                if !self.permissions.is_empty() =>
            {
                Err(AnalysisError::ResultInvariant(format!(
                    "{} finding must not carry permissions",
                    self.kind
                )))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Verdict {
    Consistent,
    Case1,
    Case2,
    Case3,
}

impl Verdict {
    /// The verdict implied by a finding set; excessive flags are ignored.
    pub fn from_findings(findings: &[Finding]) -> Verdict {
        let case1 = findings
            .iter()
            .any(|f| f.kind == FindingKind::UndeclaredCollection);
        let case2 = findings
            .iter()
            .any(|f| f.kind == FindingKind::UnconsentedDeclaration);
        match (case1, case2) {
            (false, false) => Verdict::Consistent,
            (true, false) => Verdict::Case1,
            (false, true) => Verdict::Case2,
            (true, true) => Verdict::Case3,
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Consistent => "Consistent",
            Verdict::Case1 => "Case 1",
            Verdict::Case2 => "Case 2",
            Verdict::Case3 => "Case 3",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalysisResult {
    pub package_name: PackageName,
    pub app_category: String,
    pub matched: Vec<(String, String)>,
    pub findings: Vec<Finding>,
    pub verdict: Verdict,
    pub kb_snapshot_version: String,
    #[serde(default)]
    pub diagnostics: Vec<String>,
}

impl AnalysisResult {
    /// Checks the verdict/finding invariants. Used both on our own output
    /// (as a safety net) and on externally produced results.
    pub fn validate(&self) -> Result<(), AnalysisError> {
        for finding in &self.findings {
            finding.validate()?;
        }
        let implied = Verdict::from_findings(&self.findings);
        if implied != self.verdict {
            return Err(AnalysisError::ResultInvariant(format!(
                "verdict {} does not match findings (implied {})",
                self.verdict, implied
            )));
        }
        Ok(())
    }
}

/// Expected data-safety categories per store category. Declared categories
/// outside the expected set for the app's store category are flagged as
/// potential over-collection.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<String, BTreeSet<String>>")]
#[serde(into = "BTreeMap<String, BTreeSet<String>>")]
pub struct RelevanceTable {
    map: BTreeMap<String, BTreeSet<String>>,
}

impl RelevanceTable {
    pub fn new(map: BTreeMap<String, BTreeSet<String>>) -> Result<Self, AnalysisError> {
        let unknown: Vec<String> = map
            .values()
            .flatten()
            .filter(|c| !kb::is_canonical_category(c))
            .cloned()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        if !unknown.is_empty() {
            return Err(AnalysisError::InvalidRelevanceTable(unknown));
        }
        Ok(RelevanceTable { map })
    }

    /// Table with no rows: every lookup misses, so nothing gets flagged.
    pub fn empty() -> Self {
        RelevanceTable::default()
    }

    /// The table shipped with the crate, covering ten common store categories.
    pub fn bundled() -> &'static RelevanceTable {
        static TABLE: OnceLock<RelevanceTable> = OnceLock::new();
        TABLE.get_or_init(|| {
            let map: BTreeMap<String, BTreeSet<String>> =
                serde_json::from_str(include_str!("../data/kb/relevance.json"))
                    .expect("bundled relevance table parses");
            RelevanceTable::new(map).expect("bundled relevance table is valid")
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, AnalysisError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| AnalysisError::RelevanceIo {
            path: path.display().to_string(),
            source,
        })?;
        let map: BTreeMap<String, BTreeSet<String>> =
            serde_json::from_str(&text).map_err(|source| AnalysisError::RelevanceParse {
                path: path.display().to_string(),
                source,
            })?;
        RelevanceTable::new(map)
    }

    pub fn expected(&self, app_category: &str) -> Option<&BTreeSet<String>> {
        self.map.get(app_category)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &BTreeSet<String>)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

impl TryFrom<BTreeMap<String, BTreeSet<String>>> for RelevanceTable {
    type Error = AnalysisError;
    fn try_from(map: BTreeMap<String, BTreeSet<String>>) -> Result<Self, Self::Error> {
        RelevanceTable::new(map)
    }
}

impl From<RelevanceTable> for BTreeMap<String, BTreeSet<String>> {
    fn from(table: RelevanceTable) -> Self {
        table.map
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchOutcome {
    pub matched: Vec<(String, String)>,
    pub uncovered_permissions: BTreeSet<String>,
    pub uncovered_categories: BTreeSet<String>,
}

/// Pairs granted permissions with the declared categories they map to.
///
/// Permissions with an empty mapping (not privacy-relevant) appear in no
/// output. Unknown permission names are an error here; strip them first if
/// the grant snapshot may outrun the KB.
pub fn compute_matches(
    runtime: &RuntimeBehavior,
    declared: &DeclaredBehavior,
    kb: &KnowledgeBase,
) -> Result<MatchOutcome, AnalysisError> {
    declared.validate()?;
    let mut matched = Vec::new();
    let mut uncovered_permissions = BTreeSet::new();
    let mut covered_categories: BTreeSet<String> = BTreeSet::new();
    for name in &runtime.granted {
        let mapped = kb::map_permission_to_categories(name, kb)?;
        if mapped.is_empty() {
            continue;
        }
        let mut covered = false;
        for category in &mapped {
            if declared.declared_categories.contains(category) {
                matched.push((name.clone(), category.clone()));
                covered_categories.insert(category.clone());
                covered = true;
            }
        }
        if !covered {
            uncovered_permissions.insert(name.clone());
        }
    }
    let uncovered_categories = declared
        .declared_categories
        .difference(&covered_categories)
        .cloned()
        .collect();
    Ok(MatchOutcome {
        matched,
        uncovered_permissions,
        uncovered_categories,
    })
}

/// Flags declared categories that fall outside the expected set for the
/// app's store category. Returns the findings plus any diagnostics (e.g. a
/// store category missing from the table).
pub fn detect_excessive(
    declared: &DeclaredBehavior,
    relevance: &RelevanceTable,
) -> (Vec<Finding>, Vec<String>) {
    let Some(expected) = relevance.expected(&declared.app_category) else {
        return (
            Vec::new(),
            vec![format!(
                "unknown category: store category {:?} has no relevance entry; over-collection check skipped",
                declared.app_category
            )],
        );
    };
    let outside: BTreeSet<String> = declared
        .declared_categories
        .difference(expected)
        .cloned()
        .collect();
    if outside.is_empty() {
        return (Vec::new(), Vec::new());
    }
    (
        vec![Finding {
            kind: FindingKind::ExcessiveCollection,
            permissions: BTreeSet::new(),
            categories: outside,
        }],
        Vec::new(),
    )
}

/// Full deterministic analysis: match, classify, flag over-collection.
///
/// Granted permissions missing from the KB are stripped and reported as
/// diagnostics rather than failing the whole request; device snapshots can
/// outrun KB snapshots and alerts must still fire.
pub fn detect_inconsistencies(
    runtime: &RuntimeBehavior,
    declared: &DeclaredBehavior,
    kb: &KnowledgeBase,
    relevance: &RelevanceTable,
) -> Result<AnalysisResult, AnalysisError> {
    declared.validate()?;
    let mut diagnostics = Vec::new();
    let mut known = RuntimeBehavior {
        package_name: runtime.package_name.clone(),
        granted: BTreeSet::new(),
    };
    for name in &runtime.granted {
        if kb.permission(name).is_some() {
            known.granted.insert(name.clone());
        } else {
            diagnostics.push(format!(
                "unknown permission: {name} is not in KB snapshot {}; ignored",
                kb.snapshot_version()
            ));
        }
    }

    let outcome = compute_matches(&known, declared, kb)?;

    let mut findings = Vec::new();
    // One Case-1 finding per distinct mapped category set, so sibling
    // permissions (e.g. the call family) land in a single finding.
    let mut by_category_set: BTreeMap<BTreeSet<String>, BTreeSet<String>> = BTreeMap::new();
    for name in &outcome.uncovered_permissions {
        let mapped = kb::map_permission_to_categories(name, kb)?;
        by_category_set.entry(mapped).or_default().insert(name.clone());
    }
    for (categories, permissions) in by_category_set {
        findings.push(Finding {
            kind: FindingKind::UndeclaredCollection,
            permissions,
            categories,
        });
    }
    if !outcome.uncovered_categories.is_empty() {
        findings.push(Finding {
            kind: FindingKind::UnconsentedDeclaration,
            permissions: BTreeSet::new(),
            categories: outcome.uncovered_categories.clone(),
        });
    }
    let verdict = Verdict::from_findings(&findings);

    let (excessive, excess_diagnostics) = detect_excessive(declared, relevance);
    findings.extend(excessive);
    diagnostics.extend(excess_diagnostics);

    let result = AnalysisResult {
        package_name: runtime.package_name.clone(),
        app_category: declared.app_category.clone(),
        matched: outcome.matched,
        findings,
        verdict,
        kb_snapshot_version: kb.snapshot_version().to_string(),
        diagnostics,
    };
    result.validate()?;
    Ok(result)
}
