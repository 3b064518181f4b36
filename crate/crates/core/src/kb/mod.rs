//! Knowledge base: permission registry, sensitive-data taxonomy, and the
//! curated permission-to-category mapping.
//!
//! The taxonomy is a closed set of 14 declarable categories. The mapping may
//! additionally reference auxiliary sensitive-data labels (currently only
//! "Call logs") that no store declaration can cover; a granted permission
//! mapped only to auxiliary labels therefore always surfaces as undeclared
//! collection.

mod snapshot;
mod validate;

pub use snapshot::{dedupe_permissions, load_permission_snapshot, parse_permission_snapshot};
pub use validate::{validate_kb, ValidationReport, Violation};

use std::collections::{BTreeMap, BTreeSet};
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The 14 declarable sensitive-data categories, in presentation order.
pub const CANONICAL_CATEGORIES: [&str; 14] = [
    "Location",
    "Personal info",
    "Financial info",
    "Health and fitness",
    "Messages",
    "Photos and videos",
    "Audio",
    "Files and docs",
    "Calendar",
    "Contacts",
    "App activity",
    "Web browsing",
    "App info and performance",
    "Device or other IDs",
];

/// Sensitive-data labels the mapping may reference that are not declarable
/// categories.
pub const AUX_MAPPING_LABELS: [&str; 1] = ["Call logs"];

/// Android versions the permission snapshot covers.
pub const VERSION_RANGE: RangeInclusive<u8> = 10..=15;

pub fn is_canonical_category(name: &str) -> bool {
    CANONICAL_CATEGORIES.contains(&name)
}

pub fn is_mapping_label(name: &str) -> bool {
    is_canonical_category(name) || AUX_MAPPING_LABELS.contains(&name)
}

#[derive(Debug, Error)]
pub enum KbError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed JSON in {context}: {source}")]
    Parse {
        context: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("snapshot record {index} ({name}): unknown protection level {level:?}")]
    UnknownProtectionLevel {
        index: usize,
        name: String,
        level: String,
    },
    #[error("snapshot record {index} ({name}): android_version {version} outside 10..=15")]
    VersionOutOfRange {
        index: usize,
        name: String,
        version: i64,
    },
    #[error("snapshot record {index}: invalid permission name {name:?}")]
    InvalidPermissionName { index: usize, name: String },
    #[error(
        "contradictory snapshot: {name} at version {version} appears as both {first} and {second}"
    )]
    ContradictorySnapshot {
        name: String,
        version: u8,
        first: ProtectionLevel,
        second: ProtectionLevel,
    },
    #[error("unknown permission name {0:?}")]
    UnknownPermission(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProtectionLevel {
    Normal,
    Dangerous,
}

impl std::fmt::Display for ProtectionLevel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ProtectionLevel::Normal => f.write_str("normal"),
            ProtectionLevel::Dangerous => f.write_str("dangerous"),
        }
    }
}

/// A registry entry for one Android permission, covering every snapshot
/// version it appeared in.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Permission {
    pub name: String,
    pub description: String,
    pub protection_level: ProtectionLevel,
    pub versions: BTreeSet<u8>,
}

/// One data type within a sensitive-data category ("Precise location", ...).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataType {
    pub type_name: String,
    pub definition: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensitiveCategory {
    pub name: String,
    pub data_types: Vec<DataType>,
}

/// Curated permission-name → category-set mapping.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PermissionMapping {
    entries: BTreeMap<String, BTreeSet<String>>,
}

impl PermissionMapping {
    pub fn new(entries: BTreeMap<String, BTreeSet<String>>) -> Self {
        Self { entries }
    }

    pub fn categories_for(&self, permission: &str) -> Option<&BTreeSet<String>> {
        self.entries.get(permission)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &BTreeSet<String>)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeBase {
    snapshot_version: String,
    permissions: BTreeMap<String, Permission>,
    categories: BTreeMap<String, SensitiveCategory>,
    mapping: PermissionMapping,
}

impl KnowledgeBase {
    pub fn new(
        snapshot_version: impl Into<String>,
        permissions: BTreeMap<String, Permission>,
        categories: BTreeMap<String, SensitiveCategory>,
        mapping: PermissionMapping,
    ) -> Self {
        Self {
            snapshot_version: snapshot_version.into(),
            permissions,
            categories,
            mapping,
        }
    }

    /// The knowledge base compiled into the binary from `data/kb/`.
    pub fn bundled() -> &'static KnowledgeBase {
        static BUNDLED: OnceLock<KnowledgeBase> = OnceLock::new();
        BUNDLED.get_or_init(|| {
            let raw = parse_permission_snapshot(
                include_str!("../../data/kb/permissions.json"),
                "bundled permissions.json",
            )
            .expect("bundled permission snapshot parses");
            let permissions = dedupe_permissions(raw).expect("bundled snapshot is consistent");
            let categories =
                parse_taxonomy(include_str!("../../data/kb/categories.json"), "bundled categories.json")
                    .expect("bundled taxonomy parses");
            let mapping = parse_mapping(include_str!("../../data/kb/mapping.json"), "bundled mapping.json")
                .expect("bundled mapping parses");
            KnowledgeBase::new(BUNDLED_SNAPSHOT_VERSION, permissions, categories, mapping)
        })
    }

    pub fn snapshot_version(&self) -> &str {
        &self.snapshot_version
    }

    pub fn permissions(&self) -> &BTreeMap<String, Permission> {
        &self.permissions
    }

    pub fn categories(&self) -> &BTreeMap<String, SensitiveCategory> {
        &self.categories
    }

    pub fn mapping(&self) -> &PermissionMapping {
        &self.mapping
    }

    pub fn permission(&self, name: &str) -> Option<&Permission> {
        self.permissions.get(name)
    }

    pub fn category(&self, name: &str) -> Option<&SensitiveCategory> {
        self.categories.get(name)
    }

    pub fn is_known_permission(&self, name: &str) -> bool {
        self.permissions.contains_key(name)
    }

    /// Reads a knowledge base previously written by `build-kb`.
    pub fn load(path: &Path) -> Result<Self, KbError> {
        let text = std::fs::read_to_string(path).map_err(|source| KbError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| KbError::Parse {
            context: path.display().to_string(),
            source,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), KbError> {
        let text = serde_json::to_string_pretty(self).expect("knowledge base serializes");
        std::fs::write(path, text).map_err(|source| KbError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

pub const BUNDLED_SNAPSHOT_VERSION: &str = "bundled-v1";

/// Categories a permission maps to; empty for non-sensitive permissions.
pub fn map_permission_to_categories(
    permission: &str,
    kb: &KnowledgeBase,
) -> Result<BTreeSet<String>, KbError> {
    if !kb.is_known_permission(permission) {
        return Err(KbError::UnknownPermission(permission.to_string()));
    }
    Ok(kb
        .mapping
        .categories_for(permission)
        .cloned()
        .unwrap_or_default())
}

pub fn load_taxonomy(path: &Path) -> Result<BTreeMap<String, SensitiveCategory>, KbError> {
    let text = std::fs::read_to_string(path).map_err(|source| KbError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_taxonomy(&text, &path.display().to_string())
}

pub fn parse_taxonomy(
    text: &str,
    context: &str,
) -> Result<BTreeMap<String, SensitiveCategory>, KbError> {
    let raw: BTreeMap<String, Vec<DataType>> =
        serde_json::from_str(text).map_err(|source| KbError::Parse {
            context: context.to_string(),
            source,
        })?;
    Ok(raw
        .into_iter()
        .map(|(name, data_types)| {
            let category = SensitiveCategory {
                name: name.clone(),
                data_types,
            };
            (name, category)
        })
        .collect())
}

pub fn load_mapping(path: &Path) -> Result<PermissionMapping, KbError> {
    let text = std::fs::read_to_string(path).map_err(|source| KbError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_mapping(&text, &path.display().to_string())
}

pub fn parse_mapping(text: &str, context: &str) -> Result<PermissionMapping, KbError> {
    let raw: BTreeMap<String, BTreeSet<String>> =
        serde_json::from_str(text).map_err(|source| KbError::Parse {
            context: context.to_string(),
            source,
        })?;
    Ok(PermissionMapping::new(raw))
}

pub(crate) fn is_valid_permission_name(name: &str) -> bool {
    let mut chars = name.chars();
    match chars.next() {
        Some(c) if c.is_ascii_uppercase() => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_uppercase() || c.is_ascii_digit() || c == '_')
}
