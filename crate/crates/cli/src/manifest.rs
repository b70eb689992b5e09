//! Run manifests: the resolved invocation of a subcommand, written next to
//! its outputs. Replaying `args` reproduces the outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use fedroam::data::store::write_atomic;

use crate::error::{Context, Failure};

pub const FORMAT: &str = "fedroam-run-manifest/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub subcommand: String,
    pub tool_version: String,
    pub seed: u64,
    /// Resolved settings, flags and config file merged.
    pub config: BTreeMap<String, String>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    /// Complete argument list, subcommand first, with every setting explicit.
    pub args: Vec<String>,
    pub started_unix_ms: u64,
    pub finished_unix_ms: u64,
}

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

impl RunManifest {
    pub fn new(subcommand: &str, seed: u64, started_unix_ms: u64) -> Self {
        RunManifest {
            format: FORMAT.to_string(),
            subcommand: subcommand.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            args: Vec::new(),
            started_unix_ms,
            finished_unix_ms: started_unix_ms,
        }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.config.insert(key.to_string(), value.to_string());
        self
    }

    /// Stamps the finish time and writes atomically to `path`.
    pub fn write(&mut self, path: &Path) -> Result<(), Failure> {
        self.finished_unix_ms = now_ms();
        let mut text = serde_json::to_string_pretty(self).internal("serializing run manifest")?;
        text.push('\n');
        write_atomic(path, text.as_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .bad_input(format!("reading run manifest {}", path.display()))?;
        let m: RunManifest = serde_json::from_str(&text)
            .bad_input(format!("parsing run manifest {}", path.display()))?;
        if m.format != FORMAT {
            return Err(Failure::bad_input(format!(
                "{}: unsupported format {:?}",
                path.display(),
                m.format
            )));
        }
        if m.args.first() != Some(&m.subcommand) {
            return Err(Failure::bad_input(format!(
                "{}: args do not start with the subcommand",
                path.display()
            )));
        }
        Ok(m)
    }
}

/// `<artifact>.run.json`.
pub fn manifest_path_for(artifact: &Path) -> PathBuf {
    let mut s = artifact.as_os_str().to_owned();
    s.push(".run.json");
    PathBuf::from(s)
}
