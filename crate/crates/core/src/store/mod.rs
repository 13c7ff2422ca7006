//! On-disk persona store.
//!
//! Layout under the store root:
//!
//! ```text
//! users/<user>/history.jsonl   one UserRecord per line, timestamp order
//! users/<user>/persona.json    {user_id, taxonomy, meta, layers}
//! embeddings/meta.json         digest algorithm and dims
//! embeddings/<sha256>.bin      16-byte header + little-endian f32 values
//! ```
//!
//! Writers take a per-user lock file; a second writer gets [`Error::Locked`].

mod embedding_cache;
mod types;

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use embedding_cache::{EmbeddingCache, EmbeddingCacheKey, CACHE_DIGEST_ALGORITHM};
pub use types::{
    default_taxonomy, EmbeddingVector, EntryRef, Layer, PersonaDatabase, PersonaEntry,
    PersonaMeta, RecordKind, UserRecord, DEFAULT_TAXONOMY,
};

use crate::digest::sha256_hex;
use crate::error::{Error, Result};

const HISTORY_FILE: &str = "history.jsonl";
const PERSONA_FILE: &str = "persona.json";
const LOCK_FILE: &str = ".lock";

#[derive(Serialize, Deserialize)]
struct PersonaFile {
    user_id: String,
    taxonomy: Vec<String>,
    #[serde(default)]
    meta: PersonaMeta,
    layers: BTreeMap<Layer, Vec<PersonaEntry>>,
}

#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
    taxonomy: Vec<String>,
}

/// Exclusive write access to one user's directory. Released on drop.
#[derive(Debug)]
pub struct UserLock {
    path: PathBuf,
}

impl Drop for UserLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

impl Store {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        Self::open_with_taxonomy(root, default_taxonomy())
    }

    /// `taxonomy` is what newly created databases start with.
    pub fn open_with_taxonomy(root: impl AsRef<Path>, taxonomy: Vec<String>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let users = root.join("users");
        fs::create_dir_all(&users).map_err(|e| Error::io(&users, e))?;
        Ok(Self { root, taxonomy })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn embeddings_dir(&self) -> PathBuf {
        self.root.join("embeddings")
    }

    fn user_dir(&self, user_id: &str) -> PathBuf {
        self.root.join("users").join(encode_user_dir(user_id))
    }

    pub fn user_exists(&self, user_id: &str) -> bool {
        self.user_dir(user_id).join(HISTORY_FILE).is_file()
    }

    /// All stored user ids, sorted.
    pub fn user_ids(&self) -> Result<Vec<String>> {
        let users = self.root.join("users");
        let mut out = Vec::new();
        for ent in fs::read_dir(&users).map_err(|e| Error::io(&users, e))? {
            let ent = ent.map_err(|e| Error::io(&users, e))?;
            if !ent.path().join(HISTORY_FILE).is_file() {
                continue;
            }
            if let Some(id) = ent.file_name().to_str().and_then(decode_user_dir) {
                out.push(id);
            }
        }
        out.sort();
        Ok(out)
    }

    pub fn lock_user(&self, user_id: &str) -> Result<UserLock> {
        let dir = self.user_dir(user_id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(UserLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(Error::Locked(user_id.to_string()))
            }
            Err(e) => Err(Error::io(&path, e)),
        }
    }

    /// Appends records to their users' histories. Returns the number of distinct
    /// users touched. Nothing is written if any record is invalid.
    pub fn ingest_records(&self, records: Vec<UserRecord>) -> Result<usize> {
        if records.is_empty() {
            return Ok(0);
        }
        let mut seen = HashSet::new();
        for r in &records {
            r.validate()?;
            if !seen.insert(r.record_id.clone()) {
                return Err(Error::DuplicateRecordId(r.record_id.clone()));
            }
        }
        for user in self.user_ids()? {
            for r in self.read_history(&user)? {
                if seen.contains(&r.record_id) {
                    return Err(Error::DuplicateRecordId(r.record_id));
                }
            }
        }

        let mut by_user: BTreeMap<String, Vec<UserRecord>> = BTreeMap::new();
        for r in records {
            by_user.entry(r.user_id.clone()).or_default().push(r);
        }
        let touched = by_user.len();
        for (user, mut recs) in by_user {
            let _lock = self.lock_user(&user)?;
            let mut db = if self.user_exists(&user) {
                self.load_database(&user)?
            } else {
                PersonaDatabase::new(user.clone(), self.taxonomy.clone())
            };
            recs.sort_by_key(|r| r.timestamp);
            for r in recs {
                db.insert_record(r);
            }
            self.write_database(&db)?;
        }
        Ok(touched)
    }

    fn read_history(&self, user_id: &str) -> Result<Vec<UserRecord>> {
        let path = self.user_dir(user_id).join(HISTORY_FILE);
        let file = File::open(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::UnknownUser(user_id.to_string()),
            _ => Error::io(&path, e),
        })?;
        let mut out = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(&path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(serde_json::from_str(&line)?);
        }
        Ok(out)
    }

    pub fn load_database(&self, user_id: &str) -> Result<PersonaDatabase> {
        let history = self.read_history(user_id)?;
        let path = self.user_dir(user_id).join(PERSONA_FILE);
        let (taxonomy, meta, layers) = match fs::read(&path) {
            Ok(bytes) => {
                let pf: PersonaFile = serde_json::from_slice(&bytes)?;
                if pf.user_id != user_id {
                    return Err(Error::InvalidDatabase(format!(
                        "{} holds data for `{}`",
                        path.display(),
                        pf.user_id
                    )));
                }
                (pf.taxonomy, pf.meta, pf.layers)
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                (self.taxonomy.clone(), PersonaMeta::default(), BTreeMap::new())
            }
            Err(e) => return Err(Error::io(&path, e)),
        };
        Ok(PersonaDatabase {
            user_id: user_id.to_string(),
            taxonomy,
            meta,
            history,
            layers,
        })
    }

    /// Validates and persists a database under the user's write lock.
    pub fn save_database(&self, db: &PersonaDatabase) -> Result<()> {
        let _lock = self.lock_user(&db.user_id)?;
        self.write_database(db)
    }

    /// Persists without taking the lock; caller must hold it.
    pub fn write_database(&self, db: &PersonaDatabase) -> Result<()> {
        db.validate()?;
        let dir = self.user_dir(&db.user_id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

        let mut history = Vec::new();
        for r in &db.history {
            serde_json::to_writer(&mut history, r)?;
            history.push(b'\n');
        }
        write_atomic(&dir.join(HISTORY_FILE), &history)?;
        write_atomic(&dir.join(PERSONA_FILE), &persona_bytes(db)?)?;
        Ok(())
    }

    /// Cheap change marker for a user's persona.json: (length, modification time).
    pub fn persona_stamp(&self, user_id: &str) -> Option<(u64, std::time::SystemTime)> {
        let meta = fs::metadata(self.user_dir(user_id).join(PERSONA_FILE)).ok()?;
        Some((meta.len(), meta.modified().ok()?))
    }

    /// Content digest of a user's persona.json, or of nothing when it does not exist.
    pub fn persona_digest(&self, user_id: &str) -> Result<String> {
        let path = self.user_dir(user_id).join(PERSONA_FILE);
        match fs::read(&path) {
            Ok(bytes) => Ok(sha256_hex(&bytes)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(sha256_hex(b"")),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

/// Reads one JSON value per non-blank line. Parse errors carry `path:line`.
pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| {
            Error::MalformedRecord(format!("{}:{}: {e}", path.display(), i + 1))
        })?);
    }
    Ok(out)
}

/// Loads and validates a corpus of user records.
pub fn load_corpus(path: &Path) -> Result<Vec<UserRecord>> {
    let records: Vec<UserRecord> = read_jsonl(path)?;
    for r in &records {
        r.validate()?;
    }
    Ok(records)
}

/// Canonical persona.json serialization.
pub fn persona_bytes(db: &PersonaDatabase) -> Result<Vec<u8>> {
    let pf = PersonaFile {
        user_id: db.user_id.clone(),
        taxonomy: db.taxonomy.clone(),
        meta: db.meta.clone(),
        layers: db.layers.clone(),
    };
    let mut bytes = serde_json::to_vec_pretty(&pf)?;
    bytes.push(b'\n');
    Ok(bytes)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = tmp_path(path);
    {
        let mut f = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub(crate) fn tmp_path(path: &Path) -> PathBuf {
    use std::sync::atomic::{AtomicU64, Ordering};
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    let n = COUNTER.fetch_add(1, Ordering::Relaxed);
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(format!(".tmp.{}.{n}", std::process::id()));
    path.with_file_name(name)
}

fn is_plain_id(id: &str) -> bool {
    !id.is_empty()
        && !id.starts_with('.')
        && !id.starts_with("x-")
        && id
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-' || b == b'.')
}

fn encode_user_dir(id: &str) -> String {
    if is_plain_id(id) {
        id.to_string()
    } else {
        format!("x-{}", hex::encode(id.as_bytes()))
    }
}

fn decode_user_dir(name: &str) -> Option<String> {
    match name.strip_prefix("x-") {
        Some(h) => String::from_utf8(hex::decode(h).ok()?).ok(),
        None if is_plain_id(name) => Some(name.to_string()),
        None => None,
    }
}
