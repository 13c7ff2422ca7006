use std::collections::HashMap;
use std::fs;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use super::{tmp_path, write_atomic, EmbeddingVector};
use crate::digest::sha256_hex;
use crate::error::{Error, Result};

pub const CACHE_DIGEST_ALGORITHM: &str = "sha256";

const HEADER_LEN: usize = 16;

/// Content digest of `(model_tag, prompt, text)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EmbeddingCacheKey {
    pub digest: String,
}

impl EmbeddingCacheKey {
    pub fn new(model_tag: &str, prompt: &str, text: &str) -> Self {
        let canonical = format!("{model_tag}\n{prompt}\n{text}");
        Self {
            digest: sha256_hex(canonical.as_bytes()),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CacheMeta {
    digest: String,
    dims: usize,
    format: String,
}

/// Content-addressed embedding cache, in memory and optionally on disk.
///
/// Values are stored as f32; every returned vector has been through that rounding
/// so cache hits and misses yield identical values.
#[derive(Debug)]
pub struct EmbeddingCache {
    dir: Option<PathBuf>,
    dims: usize,
    mem: RwLock<HashMap<String, Arc<Vec<f64>>>>,
}

impl EmbeddingCache {
    pub fn in_memory(dims: usize) -> Self {
        Self {
            dir: None,
            dims,
            mem: RwLock::new(HashMap::new()),
        }
    }

    pub fn open(dir: impl Into<PathBuf>, dims: usize) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let meta_path = dir.join("meta.json");
        match fs::read(&meta_path) {
            Ok(bytes) => {
                let meta: CacheMeta = serde_json::from_slice(&bytes)?;
                if meta.dims != dims {
                    return Err(Error::DimensionMismatch {
                        expected: meta.dims,
                        actual: dims,
                    });
                }
                if meta.digest != CACHE_DIGEST_ALGORITHM {
                    return Err(Error::InvalidDatabase(format!(
                        "embedding cache uses digest `{}`",
                        meta.digest
                    )));
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                let meta = CacheMeta {
                    digest: CACHE_DIGEST_ALGORITHM.into(),
                    dims,
                    format: "u32le dims + 12 zero bytes, then f32le values".into(),
                };
                write_atomic(&meta_path, &serde_json::to_vec_pretty(&meta)?)?;
            }
            Err(e) => return Err(Error::io(&meta_path, e)),
        }
        Ok(Self {
            dir: Some(dir),
            dims,
            mem: RwLock::new(HashMap::new()),
        })
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    /// Returns the cached vector for `key`, or runs `producer` and stores its result.
    /// The flag is true on a cache hit.
    pub fn get_or_compute<F>(
        &self,
        key: &EmbeddingCacheKey,
        model_tag: &str,
        producer: F,
    ) -> Result<(EmbeddingVector, bool)>
    where
        F: FnOnce() -> Result<Vec<f64>>,
    {
        if let Some(v) = self.lookup(key)? {
            return Ok((self.wrap(&v, model_tag), true));
        }
        let raw = producer()?;
        if raw.len() != self.dims {
            return Err(Error::DimensionMismatch {
                expected: self.dims,
                actual: raw.len(),
            });
        }
        let vector = EmbeddingVector::new(raw, model_tag)?;
        let rounded: Vec<f64> = vector.values.iter().map(|v| *v as f32 as f64).collect();
        let stored = self.store(key, rounded)?;
        Ok((self.wrap(&stored, model_tag), false))
    }

    fn wrap(&self, values: &[f64], model_tag: &str) -> EmbeddingVector {
        EmbeddingVector {
            dims: values.len(),
            values: values.to_vec(),
            model_tag: model_tag.to_string(),
        }
    }

    fn lookup(&self, key: &EmbeddingCacheKey) -> Result<Option<Arc<Vec<f64>>>> {
        if let Some(v) = self.mem.read().unwrap().get(&key.digest) {
            return Ok(Some(v.clone()));
        }
        let Some(path) = self.file_path(key) else {
            return Ok(None);
        };
        match fs::read(&path) {
            Ok(bytes) => {
                let values = decode(&bytes, self.dims)?;
                let mut mem = self.mem.write().unwrap();
                let v = mem
                    .entry(key.digest.clone())
                    .or_insert_with(|| Arc::new(values));
                Ok(Some(v.clone()))
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(&path, e)),
        }
    }

    /// First writer wins; a losing concurrent writer adopts the stored value.
    fn store(&self, key: &EmbeddingCacheKey, values: Vec<f64>) -> Result<Arc<Vec<f64>>> {
        let mut values = Arc::new(values);
        if let Some(path) = self.file_path(key) {
            let tmp = tmp_path(&path);
            fs::write(&tmp, encode(&values)).map_err(|e| Error::io(&tmp, e))?;
            let linked = fs::hard_link(&tmp, &path);
            let _ = fs::remove_file(&tmp);
            match linked {
                Ok(()) => {}
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
                    values = Arc::new(decode(&bytes, self.dims)?);
                }
                Err(e) => return Err(Error::io(&path, e)),
            }
        }
        let mut mem = self.mem.write().unwrap();
        Ok(mem.entry(key.digest.clone()).or_insert(values).clone())
    }

    fn file_path(&self, key: &EmbeddingCacheKey) -> Option<PathBuf> {
        self.dir
            .as_ref()
            .map(|d| d.join(format!("{}.bin", key.digest)))
    }
}

fn encode(values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * values.len());
    out.extend_from_slice(&(values.len() as u32).to_le_bytes());
    out.extend_from_slice(&[0u8; HEADER_LEN - 4]);
    for v in values {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

fn decode(bytes: &[u8], dims: usize) -> Result<Vec<f64>> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::InvalidDatabase("truncated embedding entry".into()));
    }
    let stored = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
    if stored != dims {
        return Err(Error::DimensionMismatch {
            expected: dims,
            actual: stored,
        });
    }
    if bytes.len() != HEADER_LEN + 4 * dims {
        return Err(Error::InvalidDatabase("embedding entry length mismatch".into()));
    }
    Ok(bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect())
}
