//! Content-addressed response cache on disk.
//!
//! Each entry is `<dir>/<sha256-hex>.json` holding the canonical request and
//! the response text. Writes go to a unique temporary file in the same
//! directory and are renamed into place, so readers never see partial entries.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, SystemTime};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::GenError;

pub const CACHE_DIR_ENV: &str = "SUBTRACE_CACHE_DIR";

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    request: serde_json::Value,
    response: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CacheStats {
    pub entries: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone)]
pub struct DiskCache {
    dir: PathBuf,
}

impl DiskCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    /// `$SUBTRACE_CACHE_DIR` when set, else `fallback`.
    pub fn from_env_or(fallback: impl Into<PathBuf>) -> Self {
        match std::env::var_os(CACHE_DIR_ENV) {
            Some(d) if !d.is_empty() => Self::new(d),
            _ => Self::new(fallback),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Hex digest of the canonical (compact, key-sorted) JSON of `request`.
    pub fn key(request: &serde_json::Value) -> String {
        // serde_json's default map is ordered, so to_vec is canonical.
        let bytes = serde_json::to_vec(request).expect("JSON value serializes");
        hex::encode(Sha256::digest(bytes))
    }

    fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    fn err(path: &Path) -> impl FnOnce(io::Error) -> GenError + '_ {
        move |source| GenError::Cache {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn get(&self, request: &serde_json::Value) -> Result<Option<String>, GenError> {
        let path = self.path_for(&Self::key(request));
        match fs::read(&path) {
            Ok(bytes) => {
                let entry: Entry = serde_json::from_slice(&bytes)
                    .map_err(|e| GenError::Malformed(format!("cache entry {}: {e}", path.display())))?;
                Ok(Some(entry.response))
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Self::err(&path)(e)),
        }
    }

    pub fn put(&self, request: &serde_json::Value, response: &str) -> Result<(), GenError> {
        fs::create_dir_all(&self.dir).map_err(Self::err(&self.dir))?;
        let path = self.path_for(&Self::key(request));
        let tmp = self.dir.join(format!(
            ".tmp-{}-{}",
            std::process::id(),
            TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        let entry = Entry {
            request: request.clone(),
            response: response.to_owned(),
        };
        let bytes = serde_json::to_vec(&entry).expect("cache entry serializes");
        fs::write(&tmp, bytes).map_err(Self::err(&tmp))?;
        fs::rename(&tmp, &path).map_err(Self::err(&path))
    }

    fn entries(&self) -> Result<Vec<(PathBuf, fs::Metadata)>, GenError> {
        let rd = match fs::read_dir(&self.dir) {
            Ok(rd) => rd,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(Self::err(&self.dir)(e)),
        };
        let mut out = Vec::new();
        for ent in rd {
            let ent = ent.map_err(Self::err(&self.dir))?;
            let path = ent.path();
            if path.extension().is_some_and(|e| e == "json") {
                let meta = ent.metadata().map_err(Self::err(&path))?;
                out.push((path, meta));
            }
        }
        Ok(out)
    }

    pub fn stats(&self) -> Result<CacheStats, GenError> {
        let mut s = CacheStats::default();
        for (_, meta) in self.entries()? {
            s.entries += 1;
            s.bytes += meta.len();
        }
        Ok(s)
    }

    /// Remove entries last modified more than `retention` ago. Returns the
    /// number removed.
    pub fn gc(&self, retention: Duration) -> Result<u64, GenError> {
        let now = SystemTime::now();
        let mut removed = 0;
        for (path, meta) in self.entries()? {
            let age = meta
                .modified()
                .ok()
                .and_then(|m| now.duration_since(m).ok())
                .unwrap_or_default();
            if age > retention {
                fs::remove_file(&path).map_err(Self::err(&path))?;
                removed += 1;
            }
        }
        Ok(removed)
    }
}
