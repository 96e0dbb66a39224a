use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use ducs_core::mathcore::to_json_pretty;
use ducs_core::pipeline::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

impl FileHash {
    pub fn of(path: &Path) -> Result<FileHash> {
        Ok(FileHash {
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        })
    }
}

/// Everything needed to re-run a command: the subcommand arguments, the
/// effective configuration and seed, and hashes of what was read and written.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// The parsed subcommand with its arguments, global flags excluded.
    pub args: serde_json::Value,
    pub config: TrainConfig,
    pub seed: u64,
    pub inputs: Vec<FileHash>,
    /// Paths relative to the output directory.
    pub outputs: Vec<FileHash>,
    pub tool_version: String,
    /// Wall-clock time of the run; informational only.
    pub created_at: String,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<RunManifest> {
        let text = fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, out_dir: &Path) -> Result<()> {
        fs::write(out_dir.join(MANIFEST_FILE), to_json_pretty(self)?)?;
        Ok(())
    }

    /// Names of recorded outputs whose current hash under `dir` differs.
    pub fn mismatched_outputs(&self, dir: &Path) -> Result<Vec<String>> {
        let mut bad = Vec::new();
        for f in &self.outputs {
            let path = dir.join(&f.path);
            if !path.exists() || sha256_file(&path)? != f.sha256 {
                bad.push(f.path.clone());
            }
        }
        Ok(bad)
    }

    pub fn mismatched_inputs(&self) -> Result<Vec<String>> {
        let mut bad = Vec::new();
        for f in &self.inputs {
            let path = PathBuf::from(&f.path);
            if !path.exists() || sha256_file(&path)? != f.sha256 {
                bad.push(f.path.clone());
            }
        }
        Ok(bad)
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
