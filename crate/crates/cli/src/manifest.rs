//! Per-run manifest written next to a command's outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub inputs: Vec<String>,
    /// Output file (relative to the output directory, `/`-separated) to SHA-256.
    pub artifacts: BTreeMap<String, String>,
    /// Unix seconds; both come from `SOURCE_DATE_EPOCH` when it is set.
    pub started_at: u64,
    pub finished_at: u64,
}

/// Current time, or `SOURCE_DATE_EPOCH` for reproducible runs.
pub fn timestamp() -> u64 {
    if let Some(t) = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|v| v.trim().parse().ok())
    {
        return t;
    }
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn collect(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<(), CliError> {
    let entries =
        fs::read_dir(dir).map_err(|e| CliError::Failed(format!("{}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Failed(format!("{}: {e}", dir.display())))?;
    paths.sort();
    for p in paths {
        if p.is_dir() {
            collect(root, &p, out)?;
            continue;
        }
        let rel = p.strip_prefix(root).expect("walked from root");
        if rel == Path::new(MANIFEST_FILE) || rel.extension().is_some_and(|e| e == "tmp") {
            continue;
        }
        let key = rel
            .components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/");
        out.insert(key, sha256_file(&p)?);
    }
    Ok(())
}

impl RunManifest {
    /// Hashes every file under `out_dir` and writes the manifest atomically.
    pub fn finish(mut self, out_dir: &Path) -> Result<RunManifest, CliError> {
        let mut artifacts = BTreeMap::new();
        collect(out_dir, out_dir, &mut artifacts)?;
        self.artifacts = artifacts;
        self.finished_at = timestamp();
        let path = out_dir.join(MANIFEST_FILE);
        let tmp = out_dir.join("manifest.json.tmp");
        let text =
            serde_json::to_string_pretty(&self).map_err(|e| CliError::Failed(e.to_string()))?;
        fs::write(&tmp, text + "\n")
            .map_err(|e| CliError::Failed(format!("{}: {e}", tmp.display())))?;
        fs::rename(&tmp, &path)
            .map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))?;
        Ok(self)
    }
}
