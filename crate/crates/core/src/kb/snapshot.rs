//! Permission-snapshot loading and deduplication.
//!
//! A snapshot is a crawl artifact: one record per (permission, Android
//! version), so the same name legitimately appears several times. Dedupe
//! folds those records into one registry entry per name.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::Deserialize;

use super::{is_valid_permission_name, KbError, Permission, ProtectionLevel, VERSION_RANGE};

#[derive(Debug, Deserialize)]
struct SnapshotRecord {
    name: String,
    description: String,
    protection_level: String,
    android_version: i64,
}

/// Parses a snapshot file into per-record permissions (one version each),
/// preserving duplicates for [`dedupe_permissions`].
pub fn load_permission_snapshot(path: &Path) -> Result<Vec<Permission>, KbError> {
    let text = std::fs::read_to_string(path).map_err(|source| KbError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_permission_snapshot(&text, &path.display().to_string())
}

pub fn parse_permission_snapshot(text: &str, context: &str) -> Result<Vec<Permission>, KbError> {
    let records: Vec<SnapshotRecord> =
        serde_json::from_str(text).map_err(|source| KbError::Parse {
            context: context.to_string(),
            source,
        })?;
    records
        .into_iter()
        .enumerate()
        .map(|(index, record)| {
            if !is_valid_permission_name(&record.name) {
                return Err(KbError::InvalidPermissionName {
                    index,
                    name: record.name,
                });
            }
            let protection_level = match record.protection_level.as_str() {
                "normal" => ProtectionLevel::Normal,
                "dangerous" => ProtectionLevel::Dangerous,
                other => {
                    return Err(KbError::UnknownProtectionLevel {
                        index,
                        name: record.name,
                        level: other.to_string(),
                    })
                }
            };
            let version = u8::try_from(record.android_version).ok().filter(|v| VERSION_RANGE.contains(v));
            let Some(version) = version else {
                return Err(KbError::VersionOutOfRange {
                    index,
                    name: record.name,
                    version: record.android_version,
                });
            };
            Ok(Permission {
                name: record.name,
                description: record.description,
                protection_level,
                versions: BTreeSet::from([version]),
            })
        })
        .collect()
}

/// Folds snapshot entries into one registry entry per permission name.
///
/// Versions are unioned. Description and protection level come from the
/// highest version present; if several records share that version with
/// different descriptions, the lexicographically greatest wins, keeping the
/// fold order-insensitive. The same name and version with different
/// protection levels is a contradictory snapshot and fails.
pub fn dedupe_permissions<I>(entries: I) -> Result<BTreeMap<String, Permission>, KbError>
where
    I: IntoIterator<Item = Permission>,
{
    #[derive(Default)]
    struct VersionSlot {
        protection_level: Option<ProtectionLevel>,
        descriptions: BTreeSet<String>,
    }

    let mut by_name: BTreeMap<String, BTreeMap<u8, VersionSlot>> = BTreeMap::new();
    for entry in entries {
        let slots = by_name.entry(entry.name.clone()).or_default();
        for &version in &entry.versions {
            let slot = slots.entry(version).or_default();
            match slot.protection_level {
                None => slot.protection_level = Some(entry.protection_level),
                Some(existing) if existing != entry.protection_level => {
                    return Err(KbError::ContradictorySnapshot {
                        name: entry.name,
                        version,
                        first: existing,
                        second: entry.protection_level,
                    });
                }
                Some(_) => {}
            }
            slot.descriptions.insert(entry.description.clone());
        }
    }

    Ok(by_name
        .into_iter()
        .map(|(name, slots)| {
            let versions: BTreeSet<u8> = slots.keys().copied().collect();
            let (_, newest) = slots.last_key_value().expect("at least one version");
            let permission = Permission {
                name: name.clone(),
                description: newest
                    .descriptions
                    .last()
                    .cloned()
                    .expect("at least one description"),
                protection_level: newest.protection_level.expect("level recorded"),
                versions,
            };
            (name, permission)
        })
        .collect())
}
