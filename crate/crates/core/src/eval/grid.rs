use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use super::{evaluate, EvalError, EvalReport};
use crate::data::{Dataset, Domain};
use crate::fl::{run_centralized, run_federated, ClientState, RoundConfig};
use crate::nn::{ArchDescriptor, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Regime {
    Centralized,
    Federated,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Centralized => "centralized",
            Regime::Federated => "federated",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Regime {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "centralized" => Ok(Regime::Centralized),
            "federated" => Ok(Regime::Federated),
            other => Err(format!(
                "unknown regime {other:?} (expected centralized or federated)"
            )),
        }
    }
}

/// Indices of the environments a column trains on, ascending.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Combination(pub Vec<usize>);

impl Combination {
    /// `S0`, `S01`, `S012`, ...: the environment prefix then the indices.
    pub fn label(&self, prefix: &str) -> String {
        let digits: String = self.0.iter().map(|i| i.to_string()).collect();
        format!("{prefix}{digits}")
    }
}

/// {0} {1} {2} {0,1} {0,2} {1,2} {0,1,2}
pub fn centralized_columns() -> Vec<Combination> {
    [&[0][..], &[1], &[2], &[0, 1], &[0, 2], &[1, 2], &[0, 1, 2]]
        .iter()
        .map(|c| Combination(c.to_vec()))
        .collect()
}

/// Federation needs at least two clients, so singletons have no column.
pub fn federated_columns() -> Vec<Combination> {
    centralized_columns()
        .into_iter()
        .filter(|c| c.0.len() >= 2)
        .collect()
}

fn columns_for(regime: Regime) -> Vec<Combination> {
    match regime {
        Regime::Centralized => centralized_columns(),
        Regime::Federated => federated_columns(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvPartition {
    pub train: Dataset,
    pub val: Dataset,
}

#[derive(Debug, Clone)]
pub struct TrainedColumn {
    pub combination: Combination,
    pub regime: Regime,
    pub model: ModelParams,
}

/// Environment prefix of partition names: `S` for S0..S2.
fn prefix(partitions: &[EnvPartition]) -> String {
    partitions
        .first()
        .map(|p| {
            p.train
                .name()
                .trim_end_matches(|c: char| c.is_ascii_digit())
                .to_string()
        })
        .unwrap_or_default()
}

fn check_partitions(partitions: &[EnvPartition]) -> Result<(), EvalError> {
    if partitions.len() != 3 {
        return Err(EvalError::PartitionCount(partitions.len()));
    }
    Ok(())
}

/// Trains every column of `regime`; columns run in parallel on the rayon
/// pool and come back in column order.
pub fn train_columns(
    arch: &ArchDescriptor,
    partitions: &[EnvPartition],
    regime: Regime,
    cfg: &RoundConfig,
) -> Result<Vec<TrainedColumn>, EvalError> {
    check_partitions(partitions)?;
    let pre = prefix(partitions);
    columns_for(regime)
        .into_par_iter()
        .map(|combination| {
            let sets: Vec<&Dataset> = combination
                .0
                .iter()
                .map(|&i| &partitions[i].train)
                .collect();
            let trained = match regime {
                Regime::Centralized => run_centralized(arch, &sets, cfg).map(|(m, _)| m),
                Regime::Federated => {
                    let clients: Vec<ClientState<'_>> =
                        sets.iter().map(|d| ClientState::new(d)).collect();
                    run_federated(arch, &clients, cfg).map(|(m, _)| m)
                }
            };
            let model = trained.map_err(|source| EvalError::Column {
                column: combination.label(&pre),
                regime: regime.as_str(),
                source,
            })?;
            Ok(TrainedColumn {
                combination,
                regime,
                model,
            })
        })
        .collect()
}

/// Rows are validation sets, columns training combinations.
#[derive(Debug, Clone, PartialEq)]
pub struct GridReport {
    pub regime: Regime,
    pub rows: Vec<String>,
    pub columns: Vec<String>,
    /// `cells[row][column]`.
    pub cells: Vec<Vec<EvalReport>>,
}

impl GridReport {
    pub fn cell(&self, row: usize, column: usize) -> &EvalReport {
        &self.cells[row][column]
    }

    /// Mean accuracy of a column over all rows.
    pub fn column_mean_accuracy(&self, column: usize) -> f64 {
        self.cells.iter().map(|r| r[column].accuracy).sum::<f64>() / self.rows.len() as f64
    }

    pub fn column_index(&self, label: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == label)
    }
}

/// Evaluates trained columns (all of one regime) on every validation split.
pub fn grid_from_models(
    columns: &[TrainedColumn],
    partitions: &[EnvPartition],
) -> Result<GridReport, EvalError> {
    check_partitions(partitions)?;
    let regime = columns.first().map_or(Regime::Centralized, |c| c.regime);
    if columns.iter().any(|c| c.regime != regime) {
        return Err(EvalError::Domain("grid columns mix regimes".into()));
    }
    let pre = prefix(partitions);
    let cells = partitions
        .par_iter()
        .map(|p| {
            columns
                .iter()
                .map(|c| evaluate(&c.model, &p.val))
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(GridReport {
        regime,
        rows: partitions
            .iter()
            .map(|p| p.val.name().to_string())
            .collect(),
        columns: columns.iter().map(|c| c.combination.label(&pre)).collect(),
        cells,
    })
}

/// Trains and evaluates every column of `regime`.
pub fn run_experiment_grid(
    arch: &ArchDescriptor,
    partitions: &[EnvPartition],
    cfg: &RoundConfig,
    regime: Regime,
) -> Result<GridReport, EvalError> {
    grid_from_models(&train_columns(arch, partitions, regime, cfg)?, partitions)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sim2RealPoint {
    pub combination: String,
    pub regime: Regime,
    pub accuracy: f64,
    pub auc: Option<f64>,
}

/// Scores trained columns on the real-domain hold-out, in the given order.
pub fn sim2real_from_models(
    columns: &[TrainedColumn],
    partitions: &[EnvPartition],
    holdout: &Dataset,
) -> Result<Vec<Sim2RealPoint>, EvalError> {
    if holdout.is_empty() || holdout.domain() != Domain::Real {
        return Err(EvalError::Domain(format!(
            "hold-out {} is not a real-domain set",
            holdout.name()
        )));
    }
    let pre = prefix(partitions);
    columns
        .par_iter()
        .map(|c| {
            let r = evaluate(&c.model, holdout)?;
            Ok(Sim2RealPoint {
                combination: c.combination.label(&pre),
                regime: c.regime,
                accuracy: r.accuracy,
                auc: r.auc,
            })
        })
        .collect()
}

/// The 7 centralized then 4 federated models, each scored on `holdout`.
pub fn run_sim2real(
    arch: &ArchDescriptor,
    partitions: &[EnvPartition],
    holdout: &Dataset,
    cfg: &RoundConfig,
) -> Result<Vec<Sim2RealPoint>, EvalError> {
    check_partitions(partitions)?;
    if let Some(p) = partitions.iter().find(|p| p.train.domain() != Domain::Sim) {
        return Err(EvalError::Domain(format!(
            "partition {} is not sim-domain",
            p.train.name()
        )));
    }
    if holdout.domain() != Domain::Real {
        return Err(EvalError::Domain(format!(
            "hold-out {} is not a real-domain set",
            holdout.name()
        )));
    }
    let mut columns = train_columns(arch, partitions, Regime::Centralized, cfg)?;
    columns.extend(train_columns(arch, partitions, Regime::Federated, cfg)?);
    sim2real_from_models(&columns, partitions, holdout)
}
