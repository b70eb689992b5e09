//! Environment partitions and stratified train/validation splits.

use std::str::FromStr;

use rand::seq::SliceRandom;

use super::env::{self, EnvSpec};
use super::{generate_dataset, DataError, Dataset, Label, Split};
use crate::seed;

/// Which distribution table to reproduce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Table {
    Sim,
    Real,
}

impl FromStr for Table {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sim" => Ok(Table::Sim),
            "real" => Ok(Table::Real),
            other => Err(DataError::Invalid(format!(
                "unknown table {other:?} (expected sim or real)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionSpec {
    pub shares: Vec<f64>,
    pub blocked_fractions: Vec<f64>,
}

impl PartitionSpec {
    pub fn for_table(table: Table) -> Self {
        match table {
            Table::Sim => PartitionSpec {
                shares: vec![0.27, 0.54, 0.19],
                blocked_fractions: vec![0.44, 0.582, 0.60],
            },
            Table::Real => PartitionSpec {
                shares: vec![0.11, 0.44, 0.45],
                blocked_fractions: vec![0.40, 0.50, 0.50],
            },
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.shares.is_empty() || self.shares.len() != self.blocked_fractions.len() {
            return Err(DataError::Invalid(
                "shares and blocked fractions must pair up".into(),
            ));
        }
        if self.shares.iter().any(|&s| !(s > 0.0)) {
            return Err(DataError::Invalid("every share must be positive".into()));
        }
        let sum: f64 = self.shares.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(DataError::Invalid(format!("shares sum to {sum}, not 1")));
        }
        if self
            .blocked_fractions
            .iter()
            .any(|&b| !(b > 0.0 && b < 1.0))
        {
            return Err(DataError::Invalid(
                "blocked fractions must lie in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Splits `total` into integer parts proportional to `shares` (Hamilton's
/// method). Ties in the remainder go to the earlier share.
pub fn largest_remainder(total: usize, shares: &[f64]) -> Vec<usize> {
    // quotas are rounded so that 0.27 * 1000 does not floor to 269
    let quotas: Vec<f64> = shares
        .iter()
        .map(|s| (s * total as f64 * 1e9).round() / 1e9)
        .collect();
    let mut sizes: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = sizes.iter().sum();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(total.saturating_sub(assigned)) {
        sizes[i] += 1;
    }
    sizes
}

fn table_envs(table: Table) -> Vec<EnvSpec> {
    match table {
        Table::Sim => env::sim_envs().to_vec(),
        Table::Real => env::real_envs().to_vec(),
    }
}

/// Three environment datasets sized and labeled per the distribution table.
pub fn build_paper_partitions(
    total: usize,
    table: Table,
    seed: u64,
) -> Result<Vec<Dataset>, DataError> {
    if total < 100 {
        return Err(DataError::Invalid(format!(
            "total {total} below the minimum of 100"
        )));
    }
    let spec = PartitionSpec::for_table(table);
    spec.validate()?;
    let sizes = largest_remainder(total, &spec.shares);
    table_envs(table)
        .into_iter()
        .zip(sizes)
        .zip(&spec.blocked_fractions)
        .enumerate()
        .map(|(i, ((mut env, n), &bf))| {
            env.blocked_fraction = bf;
            generate_dataset(&env, n, seed::derive(seed, "partition", &[i as u64]))
        })
        .collect()
}

/// Stratified split: each class contributes `round(count * val_fraction)`
/// items to validation. Both halves keep the input order and name.
pub fn train_val_split(
    d: &Dataset,
    val_fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset), DataError> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(DataError::Invalid(format!(
            "validation fraction {val_fraction} outside (0, 1)"
        )));
    }
    let mut is_val = vec![false; d.len()];
    for label in [Label::Blocked, Label::Free] {
        let mut idx: Vec<usize> = (0..d.len())
            .filter(|&i| d.items()[i].label == label)
            .collect();
        let k = (idx.len() as f64 * val_fraction).round() as usize;
        idx.shuffle(&mut seed::rng(
            seed,
            "split",
            &[seed::fnv1a(d.name().as_bytes()), u64::from(label.index())],
        ));
        for &i in &idx[..k] {
            is_val[i] = true;
        }
    }
    let n_val = is_val.iter().filter(|&&v| v).count();
    if n_val == 0 || n_val == d.len() {
        return Err(DataError::Invalid(format!(
            "fraction {val_fraction} leaves an empty split of {} items",
            d.len()
        )));
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (item, v) in d.items().iter().zip(is_val) {
        if v { &mut val } else { &mut train }.push(item.clone());
    }
    Ok((
        Dataset::new(d.name(), train, Split::Train)?,
        Dataset::new(d.name(), val, Split::Validation)?,
    ))
}
