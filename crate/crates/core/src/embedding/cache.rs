//! On-disk vector cache, one pair of files per (backend, side, strategy):
//! `<key>.manifest.json` lists backend, dim and content hashes in order, and
//! `<key>.bin` holds the matching vectors as little-endian f32.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{EmbeddingError, EmbeddingVector};

#[derive(Debug, Serialize, Deserialize)]
struct CacheManifest {
    backend: String,
    side: String,
    strategy: String,
    dim: usize,
    hashes: Vec<String>,
}

#[derive(Debug)]
pub struct EmbeddingCache {
    manifest_path: PathBuf,
    data_path: PathBuf,
    backend: String,
    side: String,
    strategy: String,
    dim: Option<usize>,
    entries: BTreeMap<String, EmbeddingVector>,
    dirty: bool,
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect()
}

impl EmbeddingCache {
    /// Opens the cache, starting empty if the files are missing or corrupt.
    pub fn open(dir: &Path, backend: &str, side: &str, strategy: &str) -> Self {
        let stem = format!("{}__{}__{}", sanitize(backend), side, strategy);
        let mut cache = EmbeddingCache {
            manifest_path: dir.join(format!("{stem}.manifest.json")),
            data_path: dir.join(format!("{stem}.bin")),
            backend: backend.to_string(),
            side: side.to_string(),
            strategy: strategy.to_string(),
            dim: None,
            entries: BTreeMap::new(),
            dirty: false,
        };
        if cache.manifest_path.exists() {
            if let Err(e) = cache.load() {
                tracing::warn!(path = %cache.manifest_path.display(), error = %e, "discarding embedding cache");
                cache.entries.clear();
                cache.dim = None;
                cache.dirty = true;
            }
        }
        cache
    }

    fn load(&mut self) -> Result<(), EmbeddingError> {
        let corrupt = |msg: String| EmbeddingError::CacheCorrupt(msg);
        let manifest: CacheManifest = serde_json::from_slice(&fs::read(&self.manifest_path)?)
            .map_err(|e| corrupt(e.to_string()))?;
        if manifest.backend != self.backend || manifest.strategy != self.strategy || manifest.side != self.side {
            return Err(corrupt("manifest key does not match file name".into()));
        }
        let bytes = fs::read(&self.data_path)?;
        let expected = manifest.hashes.len() * manifest.dim * 4;
        if bytes.len() != expected {
            return Err(corrupt(format!("expected {expected} bytes, found {}", bytes.len())));
        }
        let row_bytes = manifest.dim * 4;
        for (i, hash) in manifest.hashes.into_iter().enumerate() {
            let row = &bytes[i * row_bytes..(i + 1) * row_bytes];
            let values = row
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            let v = EmbeddingVector::new(values).map_err(|e| corrupt(e.to_string()))?;
            self.entries.insert(hash, v);
        }
        self.dim = Some(manifest.dim);
        Ok(())
    }

    pub fn get(&self, hash: &str) -> Option<&EmbeddingVector> {
        self.entries.get(hash)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, hash: String, v: EmbeddingVector) -> Result<(), EmbeddingError> {
        match self.dim {
            Some(d) if d != v.dim() => {
                return Err(EmbeddingError::DimMismatch {
                    expected: d,
                    actual: v.dim(),
                })
            }
            _ => self.dim = Some(v.dim()),
        }
        self.entries.insert(hash, v);
        self.dirty = true;
        Ok(())
    }

    /// Writes the cache if anything changed since it was opened.
    pub fn save(&mut self) -> Result<(), EmbeddingError> {
        if !self.dirty {
            return Ok(());
        }
        if let Some(parent) = self.manifest_path.parent() {
            fs::create_dir_all(parent)?;
        }
        let dim = self.dim.unwrap_or(0);
        let mut bytes = Vec::with_capacity(self.entries.len() * dim * 4);
        for v in self.entries.values() {
            for x in v.values() {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
        let manifest = CacheManifest {
            backend: self.backend.clone(),
            side: self.side.clone(),
            strategy: self.strategy.clone(),
            dim,
            hashes: self.entries.keys().cloned().collect(),
        };
        fs::write(&self.data_path, bytes)?;
        fs::write(
            &self.manifest_path,
            serde_json::to_vec_pretty(&manifest).map_err(|e| EmbeddingError::CacheCorrupt(e.to_string()))?,
        )?;
        self.dirty = false;
        Ok(())
    }
}
