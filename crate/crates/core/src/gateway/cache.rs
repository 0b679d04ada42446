//! Content-addressed response cache.
//!
//! On disk every entry is `<key>.resp` (response bytes) plus `<key>.req`
//! (canonical request echo). `.resp` is written last, so its presence
//! implies a complete entry.

use std::collections::HashMap;
use std::fs;
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};
use std::time::SystemTime;

use sha2::{Digest, Sha256};

const STRIPES: usize = 64;

#[derive(Debug, thiserror::Error)]
pub enum CacheError {
    #[error("cache entry {key} is corrupt: {reason}")]
    Corrupt { key: String, reason: String },
    #[error("cache io at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CacheEntry {
    pub key: String,
    pub request_echo: Vec<u8>,
    pub response: Vec<u8>,
    pub created_at: Option<SystemTime>,
}

/// SHA-256 of `backend_id ‖ 0x1f ‖ role ‖ 0x1f ‖ canonical request`.
pub fn cache_key(backend_id: &str, role: &str, canonical: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(backend_id.as_bytes());
    h.update([0x1f]);
    h.update(role.as_bytes());
    h.update([0x1f]);
    h.update(canonical);
    hex::encode(h.finalize())
}

/// Key to (response, canonical request).
type MemoryMap = HashMap<String, (Vec<u8>, Vec<u8>)>;

enum Store {
    Dir(PathBuf),
    Memory(RwLock<MemoryMap>),
}

pub struct Cache {
    store: Store,
    stripes: Vec<Mutex<()>>,
}

impl std::fmt::Debug for Cache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.store {
            Store::Dir(d) => write!(f, "Cache({})", d.display()),
            Store::Memory(_) => f.write_str("Cache(memory)"),
        }
    }
}

fn io_err(path: &Path, source: std::io::Error) -> CacheError {
    CacheError::Io {
        path: path.display().to_string(),
        source,
    }
}

impl Cache {
    pub fn in_memory() -> Self {
        Self {
            store: Store::Memory(RwLock::new(HashMap::new())),
            stripes: (0..STRIPES).map(|_| Mutex::new(())).collect(),
        }
    }

    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, CacheError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        Ok(Self {
            store: Store::Dir(dir),
            stripes: (0..STRIPES).map(|_| Mutex::new(())).collect(),
        })
    }

    fn stripe(&self, key: &str) -> &Mutex<()> {
        let idx = u8::from_str_radix(key.get(..2).unwrap_or("00"), 16).unwrap_or(0) as usize;
        &self.stripes[idx % STRIPES]
    }

    fn paths(dir: &Path, key: &str) -> (PathBuf, PathBuf) {
        (dir.join(format!("{key}.req")), dir.join(format!("{key}.resp")))
    }

    /// Response bytes for `key`, checking the stored request echo.
    pub fn get(&self, key: &str, canonical: &[u8]) -> Result<Option<Vec<u8>>, CacheError> {
        let Some(entry) = self.entry(key)? else {
            return Ok(None);
        };
        if entry.request_echo != canonical {
            return Err(CacheError::Corrupt {
                key: key.to_owned(),
                reason: "request echo does not match".into(),
            });
        }
        Ok(Some(entry.response))
    }

    pub fn contains(&self, key: &str) -> bool {
        match &self.store {
            Store::Dir(dir) => Self::paths(dir, key).1.exists(),
            Store::Memory(m) => m.read().unwrap().contains_key(key),
        }
    }

    pub fn entry(&self, key: &str) -> Result<Option<CacheEntry>, CacheError> {
        match &self.store {
            Store::Memory(m) => Ok(m.read().unwrap().get(key).map(|(req, resp)| CacheEntry {
                key: key.to_owned(),
                request_echo: req.clone(),
                response: resp.clone(),
                created_at: None,
            })),
            Store::Dir(dir) => {
                let (req_path, resp_path) = Self::paths(dir, key);
                let response = match fs::read(&resp_path) {
                    Ok(b) => b,
                    Err(e) if e.kind() == ErrorKind::NotFound => return Ok(None),
                    Err(e) => return Err(io_err(&resp_path, e)),
                };
                let request_echo = match fs::read(&req_path) {
                    Ok(b) => b,
                    Err(e) if e.kind() == ErrorKind::NotFound => {
                        return Err(CacheError::Corrupt {
                            key: key.to_owned(),
                            reason: "request echo missing".into(),
                        })
                    }
                    Err(e) => return Err(io_err(&req_path, e)),
                };
                let created_at = fs::metadata(&resp_path).and_then(|m| m.modified()).ok();
                Ok(Some(CacheEntry {
                    key: key.to_owned(),
                    request_echo,
                    response,
                    created_at,
                }))
            }
        }
    }

    /// Store an entry. The first writer of a key wins.
    pub fn put(&self, key: &str, canonical: &[u8], response: &[u8]) -> Result<(), CacheError> {
        let _guard = self.stripe(key).lock().unwrap();
        match &self.store {
            Store::Memory(m) => {
                m.write()
                    .unwrap()
                    .entry(key.to_owned())
                    .or_insert_with(|| (canonical.to_vec(), response.to_vec()));
                Ok(())
            }
            Store::Dir(dir) => {
                let (req_path, resp_path) = Self::paths(dir, key);
                if resp_path.exists() {
                    return Ok(());
                }
                write_atomic(dir, &req_path, canonical)?;
                write_atomic(dir, &resp_path, response)
            }
        }
    }

    pub fn len(&self) -> usize {
        match &self.store {
            Store::Memory(m) => m.read().unwrap().len(),
            Store::Dir(dir) => fs::read_dir(dir)
                .map(|it| {
                    it.filter_map(Result::ok)
                        .filter(|e| e.path().extension().is_some_and(|x| x == "resp"))
                        .count()
                })
                .unwrap_or(0),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn write_atomic(dir: &Path, target: &Path, bytes: &[u8]) -> Result<(), CacheError> {
    let mut tmp = tempfile::Builder::new()
        .prefix(".tmp-")
        .tempfile_in(dir)
        .map_err(|e| io_err(dir, e))?;
    tmp.write_all(bytes).map_err(|e| io_err(tmp.path(), e))?;
    tmp.as_file().sync_data().map_err(|e| io_err(target, e))?;
    tmp.persist(target).map_err(|e| io_err(target, e.error))?;
    Ok(())
}
