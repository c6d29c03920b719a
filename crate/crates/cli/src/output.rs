//! Run directories `runs/<hash>/` and their manifests.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST: &str = "manifest.json";

/// Hex SHA-256 of the canonical config text(s) and the subcommand.
pub fn run_hash(canonical: &[&str], subcommand: &str) -> String {
    let mut h = Sha256::new();
    for c in canonical {
        h.update(c.as_bytes());
        h.update([0u8]);
    }
    h.update(subcommand.as_bytes());
    hex::encode(h.finalize())
}

#[derive(Serialize)]
struct FileEntry {
    path: String,
    bytes: u64,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    config_hash: &'a str,
    subcommand: &'a str,
    seed: u64,
    version: &'a str,
    started: &'a str,
    finished: String,
    status: &'a str,
    files: Vec<FileEntry>,
}

/// Output directory of one invocation. Files are registered as they are
/// written; the manifest goes last, via rename, so its presence marks a
/// complete run.
pub struct RunDir {
    pub path: PathBuf,
    pub hash: String,
    subcommand: String,
    seed: u64,
    started: String,
    files: Vec<String>,
}

impl RunDir {
    pub fn create(root: &Path, hash: String, subcommand: &str, seed: u64) -> Result<Self> {
        let path = root.join(&hash);
        if path.exists() {
            // a rerun replaces the previous artifacts of the same inputs
            fs::remove_dir_all(&path).with_context(|| format!("clearing {}", path.display()))?;
        }
        fs::create_dir_all(&path).with_context(|| format!("creating {}", path.display()))?;
        Ok(Self {
            path,
            hash,
            subcommand: subcommand.to_string(),
            seed,
            started: chrono::Utc::now().to_rfc3339(),
            files: Vec::new(),
        })
    }

    pub fn write(&mut self, rel: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
        let target = self.path.join(rel);
        if let Some(parent) = target.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&target, bytes).with_context(|| format!("writing {}", target.display()))?;
        self.files.push(rel.to_string());
        Ok(())
    }

    pub fn finish(mut self, status: &str) -> Result<PathBuf> {
        self.files.sort();
        let mut files = Vec::with_capacity(self.files.len());
        for rel in &self.files {
            let bytes = fs::read(self.path.join(rel))?;
            files.push(FileEntry { path: rel.clone(), bytes: bytes.len() as u64, sha256: hex::encode(Sha256::digest(&bytes)) });
        }
        let m = Manifest {
            config_hash: &self.hash,
            subcommand: &self.subcommand,
            seed: self.seed,
            version: env!("CARGO_PKG_VERSION"),
            started: &self.started,
            finished: chrono::Utc::now().to_rfc3339(),
            status,
            files,
        };
        let tmp = self.path.join(".manifest.json.tmp");
        fs::write(&tmp, serde_json::to_string_pretty(&m)? + "\n")?;
        fs::rename(&tmp, self.path.join(MANIFEST))?;
        Ok(self.path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_separates_inputs() {
        assert_ne!(run_hash(&["a"], "flow"), run_hash(&["a"], "lambda"));
        assert_ne!(run_hash(&["ab", "c"], "x"), run_hash(&["a", "bc"], "x"));
        assert_eq!(run_hash(&["a"], "flow").len(), 64);
    }

    #[test]
    fn manifest_lists_every_file() {
        let dir = tempfile::tempdir().unwrap();
        let mut run = RunDir::create(dir.path(), "h".into(), "t", 1).unwrap();
        run.write("b.csv", "1\n").unwrap();
        run.write("sub/a.txt", "x").unwrap();
        let path = run.finish("ok").unwrap();
        let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(path.join(MANIFEST)).unwrap()).unwrap();
        let names: Vec<&str> = m["files"].as_array().unwrap().iter().map(|f| f["path"].as_str().unwrap()).collect();
        assert_eq!(names, ["b.csv", "sub/a.txt"]);
        assert!(!path.join(".manifest.json.tmp").exists());
    }
}
