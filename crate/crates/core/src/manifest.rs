//! Append-only run manifests: one JSON line per artifact-producing command.

use std::fs::OpenOptions;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputHash {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Value,
    pub seed: Option<u64>,
    pub inputs: Vec<InputHash>,
    pub tool_version: String,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub outputs: Vec<PathBuf>,
}

pub fn now_rfc3339() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

/// Hex sha256 of a file, or of every file beneath a directory in sorted
/// path order.
pub fn hash_path(path: &Path) -> io::Result<String> {
    let mut hasher = Sha256::new();
    let mut files = Vec::new();
    collect_files(path, &mut files)?;
    files.sort();
    let mut buf = Vec::new();
    for f in &files {
        if path.is_dir() {
            let rel = f.strip_prefix(path).unwrap_or(f);
            hasher.update(rel.to_string_lossy().as_bytes());
            hasher.update([0]);
        }
        buf.clear();
        std::fs::File::open(f)?.read_to_end(&mut buf)?;
        hasher.update(&buf);
    }
    Ok(hex::encode(hasher.finalize()))
}

fn collect_files(path: &Path, out: &mut Vec<PathBuf>) -> io::Result<()> {
    if path.is_dir() {
        for entry in std::fs::read_dir(path)? {
            collect_files(&entry?.path(), out)?;
        }
    } else {
        out.push(path.to_path_buf());
    }
    Ok(())
}

impl RunManifest {
    pub fn start(command: &str, config: Value, seed: Option<u64>) -> Self {
        RunManifest {
            command: command.to_string(),
            config,
            seed,
            inputs: Vec::new(),
            tool_version: TOOL_VERSION.to_string(),
            started_at: now_rfc3339(),
            finished_at: None,
            outputs: Vec::new(),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> io::Result<()> {
        self.inputs.push(InputHash {
            path: path.to_path_buf(),
            sha256: hash_path(path)?,
        });
        Ok(())
    }

    pub fn add_output(&mut self, path: impl Into<PathBuf>) {
        self.outputs.push(path.into());
    }

    /// Stamps the finish time and appends one line to `<dir>/manifest.jsonl`.
    pub fn finish(mut self, dir: &Path) -> io::Result<PathBuf> {
        self.finished_at = Some(now_rfc3339());
        std::fs::create_dir_all(dir)?;
        let path = dir.join(MANIFEST_FILE);
        let mut f = OpenOptions::new().create(true).append(true).open(&path)?;
        let line = serde_json::to_string(&self).map_err(io::Error::other)?;
        writeln!(f, "{line}")?;
        Ok(path)
    }
}

pub fn read_manifests(path: &Path) -> io::Result<Vec<RunManifest>> {
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(io::Error::other))
        .collect()
}
