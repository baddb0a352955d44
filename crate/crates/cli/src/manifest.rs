use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataset::ensure_dir;
use crate::error::{io_err, CliResult};

/// Provenance record written next to a command's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub threads: usize,
    pub inputs: Vec<String>,
    pub artifacts: Vec<String>,
    pub versions: BTreeMap<String, String>,
    pub wall_seconds: f64,
    pub config: RunConfig,
}

impl RunManifest {
    pub fn new(command: &str, cfg: &RunConfig, inputs: &[PathBuf], artifacts: &[PathBuf], wall_seconds: f64) -> Self {
        let versions = BTreeMap::from([
            ("bsnpp".to_string(), env!("CARGO_PKG_VERSION").to_string()),
            ("features".to_string(), "BSNF1".to_string()),
            ("checkpoint".to_string(), "BSNC1".to_string()),
        ]);
        let show = |ps: &[PathBuf]| ps.iter().map(|p| p.display().to_string()).collect();
        RunManifest {
            command: command.into(),
            config_hash: cfg.hash(),
            seed: cfg.seed,
            threads: cfg.threads,
            inputs: show(inputs),
            artifacts: show(artifacts),
            versions,
            wall_seconds,
            config: cfg.clone(),
        }
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        if let Some(dir) = path.parent() {
            ensure_dir(dir)?;
        }
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text + "\n").map_err(|e| io_err(path, e))
    }
}
