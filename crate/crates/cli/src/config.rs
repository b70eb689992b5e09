//! `key = value` config files and flag > file > default resolution.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use fedroam::fl::{RoundConfig, Weighting};
use fedroam::nn::ArchDescriptor;

use crate::error::Failure;

pub const SEED_ENV: &str = "FEDROAM_SEED";

const KNOWN_KEYS: [&str; 7] = [
    "rounds",
    "local_epochs",
    "batch_size",
    "lr",
    "weighting",
    "seed",
    "arch",
];

/// Parsed config file. Blank lines and `#` comments are ignored.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self, Failure> {
        let mut values = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Failure::bad_input(format!(
                    "config line {}: expected key = value",
                    n + 1
                )));
            };
            let k = k.trim().replace('-', "_");
            if !KNOWN_KEYS.contains(&k.as_str()) {
                return Err(Failure::bad_input(format!(
                    "config line {}: unknown key {k:?}",
                    n + 1
                )));
            }
            values.insert(k, v.trim().to_string());
        }
        Ok(ConfigFile { values })
    }

    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::bad_input(format!("config file {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, Failure>
    where
        T::Err: std::fmt::Display,
    {
        self.values
            .get(key)
            .map(|v| {
                v.parse()
                    .map_err(|e| Failure::bad_input(format!("config key {key} = {v:?}: {e}")))
            })
            .transpose()
    }
}

/// Training settings as given on the command line; None means unset.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingOverrides {
    pub rounds: Option<usize>,
    pub local_epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f32>,
    pub weighting: Option<Weighting>,
    pub seed: Option<u64>,
    pub arch: Option<String>,
}

/// Seed from the flag, else the config file, else `FEDROAM_SEED`, else 0.
pub fn resolve_seed(flag: Option<u64>, file: Option<u64>) -> Result<u64, Failure> {
    if let Some(s) = flag.or(file) {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|e| Failure::bad_input(format!("{SEED_ENV}={v:?}: {e}"))),
        Err(_) => Ok(0),
    }
}

pub fn resolve(
    flags: &TrainingOverrides,
    file: &ConfigFile,
) -> Result<(RoundConfig, ArchDescriptor), Failure> {
    let d = RoundConfig::default();
    let cfg = RoundConfig {
        rounds: flags.rounds.or(file.get("rounds")?).unwrap_or(d.rounds),
        local_epochs: flags
            .local_epochs
            .or(file.get("local_epochs")?)
            .unwrap_or(d.local_epochs),
        batch_size: flags
            .batch_size
            .or(file.get("batch_size")?)
            .unwrap_or(d.batch_size),
        lr: flags.lr.or(file.get("lr")?).unwrap_or(d.lr),
        weighting: flags
            .weighting
            .or(file.get("weighting")?)
            .unwrap_or(d.weighting),
        seed: resolve_seed(flags.seed, file.get("seed")?)?,
    };
    cfg.validate().map_err(|e| Failure::bad_input(e))?;
    let arch = match flags.arch.clone().or(file.get("arch")?) {
        Some(s) => s
            .parse::<ArchDescriptor>()
            .map_err(|e| Failure::bad_input(format!("arch {s:?}: {e}")))?,
        None => ArchDescriptor::default_alexnet(),
    };
    arch.plan().map_err(|e| Failure::bad_input(e))?;
    Ok((cfg, arch))
}
