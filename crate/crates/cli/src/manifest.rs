use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const MANIFEST: &str = "manifest.json";

/// Provenance record written into every artifact directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: Vec<String>,
    pub config: Value,
    pub seed: u64,
    pub dataset_hash: String,
    pub outputs: Vec<PathBuf>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

pub fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

impl RunManifest {
    pub fn new(config: Value, seed: u64, dataset_hash: String) -> Self {
        Self {
            command: std::env::args().collect(),
            config,
            seed,
            dataset_hash,
            outputs: Vec::new(),
            started_unix: now(),
            finished_unix: 0,
        }
    }

    pub fn finish(mut self, outputs: Vec<PathBuf>) -> Self {
        self.outputs = outputs;
        self.finished_unix = now();
        self
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST);
        std::fs::write(&path, serde_json::to_string_pretty(self)?)
            .with_context(|| format!("writing {}", path.display()))
    }

    pub fn read(dir: &Path) -> Result<Option<Self>> {
        let path = dir.join(MANIFEST);
        if !path.is_file() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        Ok(Some(
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?,
        ))
    }
}

/// Fails when `dir` holds a manifest recorded against another dataset.
pub fn check_dataset(dir: &Path, hash: &str) -> Result<()> {
    if let Some(m) = RunManifest::read(dir)? {
        if m.dataset_hash != hash {
            bail!(
                "{} was produced from dataset {} but the current dataset is {hash}",
                dir.display(),
                m.dataset_hash
            );
        }
    }
    Ok(())
}
