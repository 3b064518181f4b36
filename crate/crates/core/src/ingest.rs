//! Loads declared behavior (data-safety categories, listing description,
//! store category) from fixture files.
//!
//! Fixtures stand in for live store-page retrieval; a live client can
//! implement the same loading contract. Category names are normalized
//! through an alias table so close variants ("Photos & videos") land on
//! the canonical spelling, and anything unrecognized is an error rather
//! than a silent drop.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{AnalysisError, DeclaredBehavior, PackageName};
use crate::kb;

/// Marker placed in diagnostics when analysis ran without store data.
pub const DECLARATION_UNAVAILABLE: &str = "declaration-unavailable";

/// Store category used when no fixture exists for a package.
pub const UNKNOWN_APP_CATEGORY: &str = "Unknown";

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("declared behavior unavailable for {package}: no fixture at {path}")]
    MissingFixture { package: String, path: String },
    #[error("failed to read declared fixture {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to parse declared fixture {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("fixture {path} names package {found:?}, expected {expected:?}")]
    PackageMismatch {
        path: String,
        found: String,
        expected: String,
    },
    #[error("unknown declared categories for {package}: {offenders:?}")]
    UnknownCategories {
        package: String,
        offenders: Vec<String>,
    },
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeclaredSource {
    Fixture,
    Live,
}

/// A loaded, normalized declaration with provenance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeclaredFixture {
    pub package_name: PackageName,
    pub declared_categories: Vec<String>,
    pub description: String,
    pub app_category: String,
    pub source: DeclaredSource,
    pub fetched_at: DateTime<Utc>,
}

impl DeclaredFixture {
    pub fn behavior(&self) -> Result<DeclaredBehavior, AnalysisError> {
        DeclaredBehavior::new(
            self.declared_categories.iter().cloned(),
            self.description.clone(),
            self.app_category.clone(),
        )
    }
}

/// On-disk fixture shape.
#[derive(Debug, Serialize, Deserialize)]
struct RawDeclaredFixture {
    package_name: String,
    data_safety: Vec<String>,
    description: String,
    app_category: String,
}

/// Alias → canonical category spellings shipped with the crate.
pub fn bundled_aliases() -> &'static BTreeMap<String, String> {
    static ALIASES: OnceLock<BTreeMap<String, String>> = OnceLock::new();
    ALIASES.get_or_init(|| {
        let aliases: BTreeMap<String, String> =
            serde_json::from_str(include_str!("../data/kb/aliases.json"))
                .expect("bundled alias table parses");
        for canonical in aliases.values() {
            assert!(
                kb::is_canonical_category(canonical),
                "alias target {canonical:?} is not canonical"
            );
        }
        aliases
    })
}

/// Maps a raw category string to its canonical name, if recognized.
pub fn normalize_category(raw: &str) -> Option<String> {
    let trimmed = raw.trim();
    if kb::is_canonical_category(trimmed) {
        return Some(trimmed.to_string());
    }
    bundled_aliases().get(trimmed).cloned()
}

pub fn fixture_path(fixture_dir: &Path, package: &PackageName) -> PathBuf {
    fixture_dir.join(format!("{package}.json"))
}

/// Loads and normalizes the fixture for one package.
pub fn load_fixture(
    package: &PackageName,
    fixture_dir: &Path,
) -> Result<DeclaredFixture, IngestError> {
    let path = fixture_path(fixture_dir, package);
    let display = path.display().to_string();
    let text = match std::fs::read_to_string(&path) {
        Ok(text) => text,
        Err(source) if source.kind() == std::io::ErrorKind::NotFound => {
            return Err(IngestError::MissingFixture {
                package: package.to_string(),
                path: display,
            });
        }
        Err(source) => {
            return Err(IngestError::Io {
                path: display,
                source,
            });
        }
    };
    let raw: RawDeclaredFixture =
        serde_json::from_str(&text).map_err(|source| IngestError::Parse {
            path: display.clone(),
            source,
        })?;
    if raw.package_name != package.as_str() {
        return Err(IngestError::PackageMismatch {
            path: display,
            found: raw.package_name,
            expected: package.to_string(),
        });
    }

    let mut categories = Vec::new();
    let mut offenders = Vec::new();
    for entry in &raw.data_safety {
        match normalize_category(entry) {
            Some(canonical) => categories.push(canonical),
            None => offenders.push(entry.trim().to_string()),
        }
    }
    if !offenders.is_empty() {
        offenders.sort();
        offenders.dedup();
        return Err(IngestError::UnknownCategories {
            package: package.to_string(),
            offenders,
        });
    }
    categories.sort();
    categories.dedup();

    Ok(DeclaredFixture {
        package_name: package.clone(),
        declared_categories: categories,
        description: raw.description,
        app_category: raw.app_category,
        source: DeclaredSource::Fixture,
        fetched_at: Utc::now(),
    })
}

/// Loads the declaration for a package as analysis input.
pub fn load_declared(
    package: &PackageName,
    fixture_dir: &Path,
) -> Result<DeclaredBehavior, IngestError> {
    Ok(load_fixture(package, fixture_dir)?.behavior()?)
}

/// Like [`load_declared`], but a missing fixture degrades to an empty
/// declaration plus a diagnostic instead of failing: the monitoring path
/// must still warn the user. Every other error remains fatal.
pub fn load_declared_or_empty(
    package: &PackageName,
    fixture_dir: &Path,
) -> Result<(DeclaredBehavior, Vec<String>), IngestError> {
    match load_declared(package, fixture_dir) {
        Ok(declared) => Ok((declared, Vec::new())),
        Err(IngestError::MissingFixture { package, path }) => Ok((
            DeclaredBehavior {
                declared_categories: Default::default(),
                description: String::new(),
                app_category: UNKNOWN_APP_CATEGORY.to_string(),
            },
            vec![format!(
                "{DECLARATION_UNAVAILABLE}: no declared-behavior fixture for {package} at {path}; analyzed with an empty declaration"
            )],
        )),
        Err(other) => Err(other),
    }
}
