//! Accuracy, ROC/AUC and the experiment grids of environment combinations.

mod grid;
pub mod report;
mod roc;

use thiserror::Error;

use crate::data::{Dataset, Label};
use crate::fl::FlError;
use crate::nn::{ModelParams, NnError, Scorer};

pub use grid::{
    centralized_columns, federated_columns, grid_from_models, run_experiment_grid, run_sim2real,
    sim2real_from_models, train_columns, Combination, EnvPartition, GridReport, Regime,
    Sim2RealPoint, TrainedColumn,
};
pub use roc::{auc, concordance_auc, roc_curve, RocCurve};

/// Scores at or above this are predicted blocked.
pub const THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dataset {0} is empty")]
    EmptyDataset(String),
    #[error("AUC undefined: labels contain a single class")]
    SingleClass,
    #[error("{scores} scores but {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("label {0} is not 0 or 1")]
    BadLabel(u8),
    #[error("NaN score")]
    NanScore,
    #[error("invalid ROC curve: {0}")]
    BadCurve(String),
    #[error("{0}")]
    Domain(String),
    #[error("expected 3 environment partitions, got {0}")]
    PartitionCount(usize),
    #[error("column {column} ({regime}): {source}")]
    Column {
        column: String,
        regime: &'static str,
        #[source]
        source: FlError,
    },
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total() as f64
    }
}

/// Positive class is blocked.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub dataset: String,
    pub accuracy: f64,
    /// None when the dataset holds a single class.
    pub auc: Option<f64>,
    pub confusion: Confusion,
}

/// Blocked probabilities of every item, in dataset order.
pub fn scores(params: &ModelParams, dataset: &Dataset) -> Result<Vec<f64>, EvalError> {
    let want = params.arch().input.len();
    if let Some(it) = dataset.items().iter().find(|it| it.pixels.len() != want) {
        return Err(NnError::InputShape {
            expected: params.arch().input.dims().to_vec(),
            actual: it.pixels.shape().to_vec(),
        }
        .into());
    }
    let mut scorer = Scorer::new(params)?;
    Ok(dataset
        .items()
        .iter()
        .map(|it| f64::from(scorer.blocked_proba(it.pixels.data())))
        .collect())
}

/// Report from precomputed scores; `labels` uses 1 for blocked.
pub fn report_from_scores(
    name: &str,
    scores: &[f64],
    labels: &[u8],
) -> Result<EvalReport, EvalError> {
    if scores.is_empty() {
        return Err(EvalError::EmptyDataset(name.to_string()));
    }
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    let mut c = Confusion::default();
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= THRESHOLD, l == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    let auc = match roc_curve(scores, labels) {
        Ok(curve) => Some(auc(&curve)),
        Err(EvalError::SingleClass) => None,
        Err(e) => return Err(e),
    };
    Ok(EvalReport {
        dataset: name.to_string(),
        accuracy: c.accuracy(),
        auc,
        confusion: c,
    })
}

pub fn labels(dataset: &Dataset) -> Vec<u8> {
    dataset
        .items()
        .iter()
        .map(|it| u8::from(it.label == Label::Blocked))
        .collect()
}

/// Accuracy at [`THRESHOLD`], AUC and confusion counts of `params` on
/// `dataset`.
pub fn evaluate(params: &ModelParams, dataset: &Dataset) -> Result<EvalReport, EvalError> {
    if dataset.is_empty() {
        return Err(EvalError::EmptyDataset(dataset.name().to_string()));
    }
    report_from_scores(dataset.name(), &scores(params, dataset)?, &labels(dataset))
}
