//! Referential-integrity validation across the knowledge base.

use super::{
    is_mapping_label, is_valid_permission_name, KnowledgeBase, CANONICAL_CATEGORIES, VERSION_RANGE,
};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    CategoryCountMismatch { expected: usize, actual: usize },
    MissingCanonicalCategory { name: String },
    UnknownCategory { name: String },
    EmptyDataTypes { category: String },
    DuplicateDataType { category: String, type_name: String },
    InvalidPermissionName { name: String },
    EmptyDescription { name: String },
    EmptyVersions { name: String },
    VersionOutOfRange { name: String, version: u8 },
    MappingUnknownPermission { permission: String },
    MappingUnknownCategory { permission: String, category: String },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::CategoryCountMismatch { expected, actual } => {
                write!(f, "category-count mismatch: expected {expected}, found {actual}")
            }
            Violation::MissingCanonicalCategory { name } => {
                write!(f, "missing canonical category {name:?}")
            }
            Violation::UnknownCategory { name } => {
                write!(f, "category {name:?} is not one of the 14 canonical categories")
            }
            Violation::EmptyDataTypes { category } => {
                write!(f, "category {category:?} has no data types")
            }
            Violation::DuplicateDataType { category, type_name } => {
                write!(f, "category {category:?} repeats data type {type_name:?}")
            }
            Violation::InvalidPermissionName { name } => {
                write!(f, "invalid permission name {name:?}")
            }
            Violation::EmptyDescription { name } => {
                write!(f, "permission {name} has an empty description")
            }
            Violation::EmptyVersions { name } => {
                write!(f, "permission {name} covers no Android versions")
            }
            Violation::VersionOutOfRange { name, version } => {
                write!(f, "permission {name} lists version {version} outside 10..=15")
            }
            Violation::MappingUnknownPermission { permission } => {
                write!(f, "mapping references unknown permission {permission:?}")
            }
            Violation::MappingUnknownCategory { permission, category } => {
                write!(
                    f,
                    "mapping for {permission} references unknown category {category:?}"
                )
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.is_clean() {
            return f.write_str("knowledge base validates cleanly");
        }
        writeln!(f, "{} violation(s):", self.violations.len())?;
        for violation in &self.violations {
            writeln!(f, "  - {violation}")?;
        }
        Ok(())
    }
}

/// Checks every type invariant and cross-reference; an empty report means the
/// knowledge base is internally consistent.
pub fn validate_kb(kb: &KnowledgeBase) -> ValidationReport {
    let mut violations = Vec::new();

    if kb.categories().len() != CANONICAL_CATEGORIES.len() {
        violations.push(Violation::CategoryCountMismatch {
            expected: CANONICAL_CATEGORIES.len(),
            actual: kb.categories().len(),
        });
    }
    for name in CANONICAL_CATEGORIES {
        if !kb.categories().contains_key(name) {
            violations.push(Violation::MissingCanonicalCategory { name: name.into() });
        }
    }
    for (name, category) in kb.categories() {
        if !CANONICAL_CATEGORIES.contains(&name.as_str()) {
            violations.push(Violation::UnknownCategory { name: name.clone() });
        }
        if category.data_types.is_empty() {
            violations.push(Violation::EmptyDataTypes {
                category: name.clone(),
            });
        }
        let mut seen = std::collections::BTreeSet::new();
        for data_type in &category.data_types {
            if !seen.insert(&data_type.type_name) {
                violations.push(Violation::DuplicateDataType {
                    category: name.clone(),
                    type_name: data_type.type_name.clone(),
                });
            }
        }
    }

    for (name, permission) in kb.permissions() {
        if !is_valid_permission_name(name) {
            violations.push(Violation::InvalidPermissionName { name: name.clone() });
        }
        if permission.description.trim().is_empty() {
            violations.push(Violation::EmptyDescription { name: name.clone() });
        }
        if permission.versions.is_empty() {
            violations.push(Violation::EmptyVersions { name: name.clone() });
        }
        for &version in &permission.versions {
            if !VERSION_RANGE.contains(&version) {
                violations.push(Violation::VersionOutOfRange {
                    name: name.clone(),
                    version,
                });
            }
        }
    }

    for (permission, categories) in kb.mapping().iter() {
        if !kb.is_known_permission(permission) {
            violations.push(Violation::MappingUnknownPermission {
                permission: permission.clone(),
            });
        }
        for category in categories {
            if !is_mapping_label(category) {
                violations.push(Violation::MappingUnknownCategory {
                    permission: permission.clone(),
                    category: category.clone(),
                });
            }
        }
    }

    ValidationReport { violations }
}
