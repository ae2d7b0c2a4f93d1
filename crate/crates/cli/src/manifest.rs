use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub seed: u64,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    /// Git blob hash of the effective configuration.
    pub config_hash: String,
    pub started_at: String,
    pub finished_at: String,
    pub version: String,
}

/// Same digest as `git hash-object`, over SHA-256.
pub fn git_blob_hash(content: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content);
    hex::encode(h.finalize())
}

pub fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

impl RunManifest {
    pub fn start(command: &str, config_path: Option<&Path>, seed: u64, effective_config: &str) -> Self {
        RunManifest {
            command: command.to_string(),
            config_path: config_path.map(Path::to_path_buf),
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            config_hash: git_blob_hash(effective_config.as_bytes()),
            started_at: now(),
            finished_at: String::new(),
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    /// Stamps the finish time and writes `manifest.json` into `dir`,
    /// replacing any earlier one.
    pub fn finish(mut self, dir: &Path) -> Result<PathBuf> {
        self.finished_at = now();
        std::fs::create_dir_all(dir)?;
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self)?;
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_hash_matches_git_format() {
        // printf 'blob 6\0hello\n' | sha256sum
        assert_eq!(git_blob_hash(b"hello\n"), "2cf8d83d9ee29543b34a87727421fdecb7e3f3a183d337639025de576db9ebb4");
    }

    #[test]
    fn manifest_is_written_once_per_directory() {
        let dir = tempfile::tempdir().unwrap();
        let m = RunManifest::start("eval", None, 3, "seed = 3\n");
        m.clone().finish(dir.path()).unwrap();
        let p = m.finish(dir.path()).unwrap();
        let back: RunManifest = serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap();
        assert_eq!(back.seed, 3);
        assert_eq!(back.config_hash, git_blob_hash(b"seed = 3\n"));
        let n = std::fs::read_dir(dir.path()).unwrap().count();
        assert_eq!(n, 1);
    }
}
