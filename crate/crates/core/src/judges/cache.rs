//! Request/response cache keyed by a digest of the canonical request.
//!
//! Layout: one file `<dir>/<sha256-hex>.json` per request, holding
//! `{"request": ..., "response": ...}`.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::{Backend, BackendError, Request, Response};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheMode {
    /// Miss calls the backend and stores the response.
    Record,
    /// Miss is an error.
    Replay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CachedExchange {
    pub request: Value,
    pub response: Response,
}

/// JSON text with object keys sorted at every depth, no insignificant whitespace.
pub fn canonical_json(value: &Value) -> String {
    fn sorted(v: &Value) -> Value {
        match v {
            Value::Object(map) => {
                let mut keys: Vec<&String> = map.keys().collect();
                keys.sort();
                let mut out = serde_json::Map::new();
                for k in keys {
                    out.insert(k.clone(), sorted(&map[k]));
                }
                Value::Object(out)
            }
            Value::Array(items) => Value::Array(items.iter().map(sorted).collect()),
            other => other.clone(),
        }
    }
    serde_json::to_string(&sorted(value)).expect("json values serialize")
}

/// Hex SHA-256 of the canonical serialization.
pub fn cache_key(value: &Value) -> String {
    hex::encode(Sha256::digest(canonical_json(value).as_bytes()))
}

pub struct ResponseCache {
    dir: PathBuf,
    writes: Mutex<()>,
}

impl ResponseCache {
    pub fn new(dir: PathBuf) -> Result<Self, BackendError> {
        fs::create_dir_all(&dir).map_err(|e| BackendError::Cache(format!("{}: {e}", dir.display())))?;
        Ok(ResponseCache {
            dir,
            writes: Mutex::new(()),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    pub fn lookup(&self, key: &str) -> Result<Option<Response>, BackendError> {
        let path = self.path_for(key);
        match fs::read_to_string(&path) {
            Ok(text) => {
                let exchange: CachedExchange = serde_json::from_str(&text)
                    .map_err(|e| BackendError::Cache(format!("{}: {e}", path.display())))?;
                Ok(Some(exchange.response))
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(BackendError::Cache(format!("{}: {e}", path.display()))),
        }
    }

    pub fn store(&self, key: &str, request: &Value, response: &Response) -> Result<(), BackendError> {
        let exchange = CachedExchange {
            request: request.clone(),
            response: response.clone(),
        };
        let body = canonical_json(&serde_json::to_value(&exchange).expect("exchange serializes"));
        let path = self.path_for(key);
        let tmp = self.dir.join(format!(".{key}.tmp"));
        let _guard = self.writes.lock().expect("cache write lock");
        fs::write(&tmp, body)
            .and_then(|_| fs::rename(&tmp, &path))
            .map_err(|e| BackendError::Cache(format!("{}: {e}", path.display())))
    }

    /// Number of cached exchanges.
    pub fn len(&self) -> usize {
        fs::read_dir(&self.dir)
            .map(|rd| {
                rd.filter_map(Result::ok)
                    .filter(|e| e.path().extension().is_some_and(|x| x == "json"))
                    .count()
            })
            .unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Cache-aware call. Hits never reach `backend`.
pub fn cached_call(
    cache: &ResponseCache,
    request: &Request,
    mode: CacheMode,
    backend: Option<&dyn Backend>,
) -> Result<Response, BackendError> {
    let value = serde_json::to_value(request).expect("requests serialize");
    let key = cache_key(&value);
    if let Some(hit) = cache.lookup(&key)? {
        return Ok(hit);
    }
    match (mode, backend) {
        (CacheMode::Record, Some(backend)) => {
            let response = backend.call(request)?;
            cache.store(&key, &value, &response)?;
            Ok(response)
        }
        _ => Err(BackendError::MissingFixture { hash: key }),
    }
}
