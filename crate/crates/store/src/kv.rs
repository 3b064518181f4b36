//! Keyspace/key/value storage with embedded implementations.
//!
//! [`FileStore`] keeps one append-only JSONL file per keyspace under a
//! root directory (`<root>/<keyspace>.jsonl`). Every mutation is a record
//! line — `{"op":"put","key":…,"value":…}` or `{"op":"evict","key":…}` —
//! written before the in-memory view updates, so an interrupted write
//! leaves at most one partial trailing line, which replay tolerates.
//! Corruption anywhere before the final line is reported, not skipped.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("store I/O failure at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt store record at {path} line {line}: {message}")]
    Corrupt {
        path: String,
        line: usize,
        message: String,
    },
    #[error("invalid keyspace name {0:?}: expected 1-64 chars of [0-9A-Za-z_-]")]
    InvalidKeyspace(String),
    #[error(transparent)]
    Bus(#[from] dsaudit_bus::BusError),
}

/// Minimal storage contract the pipeline needs. Implementations must be
/// safe for concurrent use.
pub trait KeyValueStore: Send + Sync {
    fn get(&self, keyspace: &str, key: &str) -> Result<Option<Value>, StoreError>;
    fn put(&self, keyspace: &str, key: &str, value: &Value) -> Result<(), StoreError>;
    /// Removes the key; returns whether it existed.
    fn remove(&self, keyspace: &str, key: &str) -> Result<bool, StoreError>;
    fn keys(&self, keyspace: &str) -> Result<Vec<String>, StoreError>;
}

fn validate_keyspace(keyspace: &str) -> Result<(), StoreError> {
    let ok = !keyspace.is_empty()
        && keyspace.len() <= 64
        && keyspace
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
    if ok {
        Ok(())
    } else {
        Err(StoreError::InvalidKeyspace(keyspace.to_string()))
    }
}

/// Volatile store for tests and simulation runs.
#[derive(Default)]
pub struct MemoryStore {
    data: Mutex<BTreeMap<String, BTreeMap<String, Value>>>,
}

impl MemoryStore {
    pub fn new() -> Self {
        MemoryStore::default()
    }
}

impl KeyValueStore for MemoryStore {
    fn get(&self, keyspace: &str, key: &str) -> Result<Option<Value>, StoreError> {
        validate_keyspace(keyspace)?;
        Ok(self
            .data
            .lock()
            .unwrap()
            .get(keyspace)
            .and_then(|space| space.get(key))
            .cloned())
    }

    fn put(&self, keyspace: &str, key: &str, value: &Value) -> Result<(), StoreError> {
        validate_keyspace(keyspace)?;
        self.data
            .lock()
            .unwrap()
            .entry(keyspace.to_string())
            .or_default()
            .insert(key.to_string(), value.clone());
        Ok(())
    }

    fn remove(&self, keyspace: &str, key: &str) -> Result<bool, StoreError> {
        validate_keyspace(keyspace)?;
        Ok(self
            .data
            .lock()
            .unwrap()
            .get_mut(keyspace)
            .is_some_and(|space| space.remove(key).is_some()))
    }

    fn keys(&self, keyspace: &str) -> Result<Vec<String>, StoreError> {
        validate_keyspace(keyspace)?;
        Ok(self
            .data
            .lock()
            .unwrap()
            .get(keyspace)
            .map(|space| space.keys().cloned().collect())
            .unwrap_or_default())
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum LogRecord {
    Put { key: String, value: Value },
    Evict { key: String },
}

#[derive(Debug)]
struct FileStoreState {
    data: BTreeMap<String, BTreeMap<String, Value>>,
    files: BTreeMap<String, File>,
}

/// Durable store: one JSONL append log per keyspace.
#[derive(Debug)]
pub struct FileStore {
    root: PathBuf,
    state: Mutex<FileStoreState>,
}

impl FileStore {
    /// Opens (creating if needed) a store rooted at `root`, replaying every
    /// keyspace log found there.
    pub fn open(root: impl AsRef<Path>) -> Result<Self, StoreError> {
        let root = root.as_ref().to_path_buf();
        let io_err = |source: std::io::Error, path: &Path| StoreError::Io {
            path: path.display().to_string(),
            source,
        };
        std::fs::create_dir_all(&root).map_err(|e| io_err(e, &root))?;
        let mut data = BTreeMap::new();
        for entry in std::fs::read_dir(&root).map_err(|e| io_err(e, &root))? {
            let path = entry.map_err(|e| io_err(e, &root))?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("jsonl") {
                continue;
            }
            let keyspace = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or_default()
                .to_string();
            if validate_keyspace(&keyspace).is_err() {
                continue;
            }
            data.insert(keyspace, Self::replay(&path)?);
        }
        Ok(FileStore {
            root,
            state: Mutex::new(FileStoreState {
                data,
                files: BTreeMap::new(),
            }),
        })
    }

    fn replay(path: &Path) -> Result<BTreeMap<String, Value>, StoreError> {
        let text = std::fs::read_to_string(path).map_err(|source| StoreError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut space = BTreeMap::new();
        let lines: Vec<&str> = text.lines().collect();
        for (index, line) in lines.iter().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<LogRecord>(line) {
                Ok(LogRecord::Put { key, value }) => {
                    space.insert(key, value);
                }
                Ok(LogRecord::Evict { key }) => {
                    space.remove(&key);
                }
                // A torn final line is the expected crash artifact of an
                // interrupted append; anything earlier is real corruption.
                Err(message) if index + 1 == lines.len() => {
                    let _ = message;
                    break;
                }
                Err(message) => {
                    return Err(StoreError::Corrupt {
                        path: path.display().to_string(),
                        line: index + 1,
                        message: message.to_string(),
                    });
                }
            }
        }
        Ok(space)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn append(&self, state: &mut FileStoreState, keyspace: &str, record: &LogRecord) -> Result<(), StoreError> {
        let path = self.root.join(format!("{keyspace}.jsonl"));
        let io_err = |source: std::io::Error| StoreError::Io {
            path: path.display().to_string(),
            source,
        };
        if !state.files.contains_key(keyspace) {
            let file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(io_err)?;
            state.files.insert(keyspace.to_string(), file);
        }
        let file = state.files.get_mut(keyspace).expect("file just opened");
        let line = serde_json::to_string(record).expect("log record serializes");
        writeln!(file, "{line}").map_err(io_err)?;
        file.flush().map_err(io_err)?;
        Ok(())
    }
}

impl KeyValueStore for FileStore {
    fn get(&self, keyspace: &str, key: &str) -> Result<Option<Value>, StoreError> {
        validate_keyspace(keyspace)?;
        Ok(self
            .state
            .lock()
            .unwrap()
            .data
            .get(keyspace)
            .and_then(|space| space.get(key))
            .cloned())
    }

    fn put(&self, keyspace: &str, key: &str, value: &Value) -> Result<(), StoreError> {
        validate_keyspace(keyspace)?;
        let mut state = self.state.lock().unwrap();
        self.append(
            &mut state,
            keyspace,
            &LogRecord::Put {
                key: key.to_string(),
                value: value.clone(),
            },
        )?;
        state
            .data
            .entry(keyspace.to_string())
            .or_default()
            .insert(key.to_string(), value.clone());
        Ok(())
    }

    fn remove(&self, keyspace: &str, key: &str) -> Result<bool, StoreError> {
        validate_keyspace(keyspace)?;
        let mut state = self.state.lock().unwrap();
        let existed = state
            .data
            .get(keyspace)
            .is_some_and(|space| space.contains_key(key));
        if !existed {
            return Ok(false);
        }
        self.append(
            &mut state,
            keyspace,
            &LogRecord::Evict {
                key: key.to_string(),
            },
        )?;
        state
            .data
            .get_mut(keyspace)
            .expect("keyspace exists")
            .remove(key);
        Ok(true)
    }

    fn keys(&self, keyspace: &str) -> Result<Vec<String>, StoreError> {
        validate_keyspace(keyspace)?;
        Ok(self
            .state
            .lock()
            .unwrap()
            .data
            .get(keyspace)
            .map(|space| space.keys().cloned().collect())
            .unwrap_or_default())
    }
}
