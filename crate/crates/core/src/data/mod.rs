//! Synthetic navigation datasets: generation, partitioning and storage.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::nn::{BLOCKED, FREE};
use crate::seed;
use crate::Tensor;

pub mod env;
pub mod partition;
pub mod render;
pub mod store;

pub use env::{Domain, EnvSpec, ObstacleFamily};
pub use partition::{
    build_paper_partitions, largest_remainder, train_val_split, PartitionSpec, Table,
};
pub use render::{oracle_is_blocked, CHANNELS, IMAGE_LEN, IMAGE_SIZE};
pub use store::{load_dataset, save_dataset};

/// Name of the mixed-room hold-out set.
pub const HOLDOUT_NAME: &str = "R*";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{0}")]
    Invalid(String),
    #[error("manifest {0} not found")]
    MissingManifest(String),
    #[error("blob {0} referenced by the manifest not found")]
    MissingBlob(String),
    #[error(
        "blob checksum mismatch: manifest says {expected:#010x}, blob hashes to {actual:#010x}"
    )]
    ChecksumMismatch { expected: u32, actual: u32 },
    #[error("blob holds {actual} bytes but the manifest needs {expected}")]
    TruncatedBlob { expected: u64, actual: u64 },
    #[error("manifest line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Blocked,
    Free,
}

impl Label {
    /// Class index used by the classifier.
    pub fn index(self) -> u8 {
        match self {
            Label::Blocked => BLOCKED as u8,
            Label::Free => FREE as u8,
        }
    }

    pub fn from_blocked(blocked: bool) -> Self {
        if blocked {
            Label::Blocked
        } else {
            Label::Free
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Blocked => "blocked",
            Label::Free => "free",
        }
    }
}

impl FromStr for Label {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "blocked" => Ok(Label::Blocked),
            "free" => Ok(Label::Free),
            other => Err(DataError::Invalid(format!("unknown label {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Validation,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            other => Err(DataError::Invalid(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    /// `[64, 64, 3]`, values in `[0, 1]`.
    pub pixels: Tensor,
    pub label: Label,
    pub env_id: String,
    pub domain: Domain,
}

impl LabeledImage {
    pub fn new(
        pixels: Tensor,
        label: Label,
        env_id: String,
        domain: Domain,
    ) -> Result<Self, DataError> {
        if pixels.shape() != [IMAGE_SIZE, IMAGE_SIZE, CHANNELS] {
            return Err(DataError::Invalid(format!(
                "image shape {:?}, expected [{IMAGE_SIZE}, {IMAGE_SIZE}, {CHANNELS}]",
                pixels.shape()
            )));
        }
        if let Some(i) = pixels.data().iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(DataError::Invalid(format!("pixel {i} outside [0, 1]")));
        }
        Ok(LabeledImage {
            pixels,
            label,
            env_id,
            domain,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    name: String,
    items: Vec<LabeledImage>,
    split: Split,
}

impl Dataset {
    /// Rejects empty datasets and mixed domains (except in [`HOLDOUT_NAME`]).
    pub fn new(
        name: impl Into<String>,
        items: Vec<LabeledImage>,
        split: Split,
    ) -> Result<Self, DataError> {
        let name = name.into();
        if name.is_empty() || name.contains(['\n', '\r', ' ']) {
            return Err(DataError::Invalid(format!("bad dataset name {name:?}")));
        }
        let Some(first) = items.first() else {
            return Err(DataError::Invalid(format!("dataset {name} is empty")));
        };
        if name != HOLDOUT_NAME && items.iter().any(|it| it.domain != first.domain) {
            return Err(DataError::Invalid(format!("dataset {name} mixes domains")));
        }
        Ok(Dataset { name, items, split })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn items(&self) -> &[LabeledImage] {
        &self.items
    }

    pub fn into_items(self) -> Vec<LabeledImage> {
        self.items
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Domain of the first item; uniform for every dataset but the hold-out.
    pub fn domain(&self) -> Domain {
        self.items[0].domain
    }

    pub fn blocked_count(&self) -> usize {
        self.items
            .iter()
            .filter(|it| it.label == Label::Blocked)
            .count()
    }

    /// CRC-32 over labels, env ids and pixel bytes, in item order.
    pub fn checksum(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for it in &self.items {
            h.update(&[it.label.index()]);
            h.update(it.env_id.as_bytes());
            for v in it.pixels.data() {
                h.update(&v.to_le_bytes());
            }
        }
        h.finalize()
    }

    /// Stem used for on-disk files: the name with `*` spelled out, plus the
    /// split for validation sets.
    pub fn file_stem(&self) -> String {
        let base = self.name.replace('*', "star");
        match self.split {
            Split::Train => base,
            Split::Validation => format!("{base}-val"),
        }
    }
}

fn exact_blocked(n: usize, fraction: f64) -> usize {
    (n as f64 * fraction).round() as usize
}

fn render_item(spec: &EnvSpec, blocked: bool, root: u64, index: usize) -> LabeledImage {
    let mut rng = seed::rng(
        root,
        "image",
        &[seed::fnv1a(spec.env_id.as_bytes()), index as u64],
    );
    let scene = render::sample_scene(spec, blocked, &mut rng);
    let px = render::render(&scene, spec, &mut rng);
    LabeledImage {
        pixels: Tensor::new(vec![IMAGE_SIZE, IMAGE_SIZE, CHANNELS], px).expect("image shape"),
        label: Label::from_blocked(blocked),
        env_id: spec.env_id.clone(),
        domain: spec.domain,
    }
}

/// `n` frames of environment `spec`, exactly `round(n * blocked_fraction)`
/// of them blocked, in a seeded random label order. Named after the env.
pub fn generate_dataset(spec: &EnvSpec, n: usize, seed: u64) -> Result<Dataset, DataError> {
    spec.validate()?;
    if n < 2 {
        return Err(DataError::Invalid(format!(
            "need at least 2 images, got {n}"
        )));
    }
    let k = exact_blocked(n, spec.blocked_fraction);
    let mut labels: Vec<bool> = (0..n).map(|i| i < k).collect();
    labels.shuffle(&mut seed::rng(
        seed,
        "labels",
        &[seed::fnv1a(spec.env_id.as_bytes())],
    ));
    let items = labels
        .iter()
        .enumerate()
        .map(|(i, &b)| render_item(spec, b, seed, i))
        .collect();
    Dataset::new(spec.env_id.clone(), items, Split::Train)
}

/// Mixed-room real-domain validation set over the three training rooms and
/// one unseen room, near-equal per room, exactly `n / 2` blocked.
pub fn generate_sim2real_holdout(n: usize, seed: u64) -> Result<Dataset, DataError> {
    if n < 10 {
        return Err(DataError::Invalid(format!(
            "hold-out needs at least 10 images, got {n}"
        )));
    }
    let [r0, r1, r2] = env::real_envs();
    let rooms = [r0, r1, r2, env::room_unseen()];
    let mut rng = seed::rng(seed, "holdout", &[]);
    let mut assignment: Vec<usize> = (0..n).map(|i| i % rooms.len()).collect();
    assignment.shuffle(&mut rng);
    let mut labels: Vec<bool> = (0..n).map(|i| i < n / 2).collect();
    labels.shuffle(&mut rng);
    let root = seed::derive(seed, "holdout-images", &[]);
    let items = assignment
        .iter()
        .zip(&labels)
        .enumerate()
        .map(|(i, (&r, &b))| render_item(&rooms[r], b, root, i))
        .collect();
    Dataset::new(HOLDOUT_NAME, items, Split::Validation)
}
