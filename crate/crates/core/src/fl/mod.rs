//! Centralized training on pooled data and synchronous federated averaging.

use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use thiserror::Error;

use crate::data::{Dataset, LabeledImage, IMAGE_LEN};
use crate::nn::params::sgd_step_in_place;
use crate::nn::{init_params, loss_and_grad, ArchDescriptor, ModelParams, NnError};
use crate::seed;
use crate::Tensor;

#[derive(Debug, Error)]
pub enum FlError {
    #[error("invalid round config: {0}")]
    Config(String),
    #[error("client {0} has no training data")]
    EmptyDataset(String),
    #[error("no updates to average")]
    NoUpdates,
    #[error("update {index} has architecture {found}, expected {expected}")]
    ArchMismatch {
        index: usize,
        expected: String,
        found: String,
    },
    #[error("update {0} reports zero samples")]
    ZeroCount(usize),
    #[error("no clients")]
    NoClients,
    #[error("duplicate client id {0}")]
    DuplicateClient(String),
    #[error("round {round}, client {client}: {source}")]
    Client {
        round: usize,
        client: String,
        #[source]
        source: Box<FlError>,
    },
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Weighting {
    /// FedAvg: weight `n_i / sum n`.
    SampleCount,
    Uniform,
}

impl std::str::FromStr for Weighting {
    type Err = FlError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "samples" | "sample-count" => Ok(Weighting::SampleCount),
            "uniform" => Ok(Weighting::Uniform),
            other => Err(FlError::Config(format!("unknown weighting {other:?}"))),
        }
    }
}

impl Weighting {
    pub fn as_str(self) -> &'static str {
        match self {
            Weighting::SampleCount => "samples",
            Weighting::Uniform => "uniform",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundConfig {
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub seed: u64,
    pub weighting: Weighting,
}

impl Default for RoundConfig {
    fn default() -> Self {
        RoundConfig {
            rounds: 20,
            local_epochs: 1,
            batch_size: 32,
            lr: 0.01,
            seed: 0,
            weighting: Weighting::SampleCount,
        }
    }
}

impl RoundConfig {
    pub fn validate(&self) -> Result<(), FlError> {
        if self.rounds == 0 || self.local_epochs == 0 || self.batch_size == 0 {
            return Err(FlError::Config(
                "rounds, local_epochs and batch_size must be positive".into(),
            ));
        }
        // lr = 0 is accepted as a no-op for identity checks
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(FlError::Config(format!(
                "learning rate {} must be finite and non-negative",
                self.lr
            )));
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.rounds * self.local_epochs
    }
}

/// A federated participant holding its private training split.
#[derive(Debug, Clone, Copy)]
pub struct ClientState<'a> {
    pub client_id: &'a str,
    pub dataset: &'a Dataset,
}

impl<'a> ClientState<'a> {
    /// A client named after its dataset.
    pub fn new(dataset: &'a Dataset) -> Self {
        ClientState {
            client_id: dataset.name(),
            dataset,
        }
    }

    pub fn sample_count(&self) -> usize {
        self.dataset.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientReport {
    pub client_id: String,
    pub sample_count: usize,
    pub loss: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    pub round: usize,
    /// Sorted by client id.
    pub clients: Vec<ClientReport>,
    pub global_checksum: u64,
    pub wall_time: Duration,
    /// Parameter bytes down plus up, summed over clients.
    pub bytes_transferred: u64,
}

/// Parameter bytes one client moves per round: the global model down and
/// its update up, 4 bytes per value each way.
pub fn bytes_per_client_round(param_count: usize) -> u64 {
    2 * param_count as u64 * 4
}

/// Runs epochs `first_epoch..first_epoch + epochs` of shuffled mini-batch
/// SGD. Epoch `g` shuffles with the `shuffle` stream at `(stream_key, g)`.
/// Returns the mean training loss of the last epoch.
fn train_epochs(
    params: &mut ModelParams,
    items: &[&LabeledImage],
    stream_key: u64,
    first_epoch: usize,
    epochs: usize,
    cfg: &RoundConfig,
) -> Result<f32, FlError> {
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut epoch_loss = f32::NAN;
    let mut batch = Vec::with_capacity(cfg.batch_size * IMAGE_LEN);
    let mut labels = Vec::with_capacity(cfg.batch_size);
    let [h, w, c] = params.arch().input.dims();
    for g in first_epoch..first_epoch + epochs {
        order.sort_unstable();
        order.shuffle(&mut seed::rng(cfg.seed, "shuffle", &[stream_key, g as u64]));
        let mut total = 0.0f64;
        for chunk in order.chunks(cfg.batch_size) {
            batch.clear();
            labels.clear();
            for &i in chunk {
                batch.extend_from_slice(items[i].pixels.data());
                labels.push(items[i].label.index());
            }
            let t = Tensor::new(vec![chunk.len(), h, w, c], std::mem::take(&mut batch))
                .map_err(|e| NnError::Shape(e.to_string()))?;
            let (loss, grads) = loss_and_grad(params, &t, &labels)?;
            batch = t.into_data();
            sgd_step_in_place(params, &grads, cfg.lr);
            total += f64::from(loss) * chunk.len() as f64;
        }
        epoch_loss = (total / items.len() as f64) as f32;
    }
    Ok(epoch_loss)
}

/// Local training in round `round`: `cfg.local_epochs` epochs starting at
/// global epoch `round * local_epochs` of the client's shuffle stream.
pub fn local_train_at(
    params: &ModelParams,
    client: ClientState<'_>,
    cfg: &RoundConfig,
    round: usize,
) -> Result<(ModelParams, usize, f32), FlError> {
    cfg.validate()?;
    if client.dataset.is_empty() {
        return Err(FlError::EmptyDataset(client.client_id.to_string()));
    }
    let items: Vec<&LabeledImage> = client.dataset.items().iter().collect();
    let mut out = params.clone();
    let key = seed::fnv1a(client.client_id.as_bytes());
    let loss = train_epochs(
        &mut out,
        &items,
        key,
        round * cfg.local_epochs,
        cfg.local_epochs,
        cfg,
    )?;
    Ok((out, client.sample_count(), loss))
}

/// [`local_train_at`] round 0.
pub fn local_train(
    params: &ModelParams,
    client: ClientState<'_>,
    cfg: &RoundConfig,
) -> Result<(ModelParams, usize, f32), FlError> {
    local_train_at(params, client, cfg, 0)
}

fn canonical_order(updates: &[(&ModelParams, usize)]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..updates.len()).collect();
    // content-defined order, so the reduction does not depend on list order
    idx.sort_by(|&a, &b| {
        let (pa, na) = updates[a];
        let (pb, nb) = updates[b];
        na.cmp(&nb)
            .then(pa.checksum().cmp(&pb.checksum()))
            .then_with(|| {
                let ba = pa.values().iter().map(|v| v.to_bits());
                let bb = pb.values().iter().map(|v| v.to_bits());
                ba.cmp(bb)
            })
    });
    idx
}

/// Weighted elementwise mean of the updates. Weights and sums are carried in
/// `f64` and rounded once, over a canonical ordering of the updates.
pub fn fedavg_with(
    updates: &[(&ModelParams, usize)],
    weighting: Weighting,
) -> Result<ModelParams, FlError> {
    let (first, _) = *updates.first().ok_or(FlError::NoUpdates)?;
    for (i, (p, n)) in updates.iter().enumerate() {
        if p.arch() != first.arch() || p.len() != first.len() {
            return Err(FlError::ArchMismatch {
                index: i,
                expected: first.arch().to_string(),
                found: p.arch().to_string(),
            });
        }
        if *n == 0 {
            return Err(FlError::ZeroCount(i));
        }
    }
    let order = canonical_order(updates);
    let total: f64 = match weighting {
        Weighting::SampleCount => updates.iter().map(|(_, n)| *n as f64).sum(),
        Weighting::Uniform => updates.len() as f64,
    };
    let weights: Vec<f64> = order
        .iter()
        .map(|&i| match weighting {
            Weighting::SampleCount => updates[i].1 as f64 / total,
            Weighting::Uniform => 1.0 / total,
        })
        .collect();
    let mut acc = vec![0.0f64; first.len()];
    for (&i, &w) in order.iter().zip(&weights) {
        for (a, &v) in acc.iter_mut().zip(updates[i].0.values()) {
            *a += w * f64::from(v);
        }
    }
    let values = acc.into_iter().map(|a| a as f32).collect();
    Ok(ModelParams::new(first.arch().clone(), values)?)
}

/// Sample-count weighted [`fedavg_with`].
pub fn fedavg(updates: &[(&ModelParams, usize)]) -> Result<ModelParams, FlError> {
    fedavg_with(updates, Weighting::SampleCount)
}

/// Clients sorted by id; rejects duplicates.
pub fn sorted_clients<'a>(clients: &[ClientState<'a>]) -> Result<Vec<ClientState<'a>>, FlError> {
    if clients.is_empty() {
        return Err(FlError::NoClients);
    }
    let mut sorted = clients.to_vec();
    sorted.sort_by(|a, b| a.client_id.cmp(b.client_id));
    for w in sorted.windows(2) {
        if w[0].client_id == w[1].client_id {
            return Err(FlError::DuplicateClient(w[0].client_id.to_string()));
        }
    }
    Ok(sorted)
}

/// Initial global model of a run.
pub fn initial_model(arch: &ArchDescriptor, cfg: &RoundConfig) -> Result<ModelParams, FlError> {
    Ok(init_params(arch, cfg.seed)?)
}

/// Synchronous full-participation federated training. Clients of a round
/// train concurrently on the rayon pool; the result does not depend on the
/// schedule.
pub fn run_federated(
    arch: &ArchDescriptor,
    clients: &[ClientState<'_>],
    cfg: &RoundConfig,
) -> Result<(ModelParams, Vec<RoundReport>), FlError> {
    cfg.validate()?;
    let clients = sorted_clients(clients)?;
    let mut global = initial_model(arch, cfg)?;
    let mut reports = Vec::with_capacity(cfg.rounds);
    for round in 0..cfg.rounds {
        let start = Instant::now();
        let updates: Vec<(ModelParams, usize, f32)> = clients
            .par_iter()
            .map(|c| {
                local_train_at(&global, *c, cfg, round).map_err(|e| FlError::Client {
                    round,
                    client: c.client_id.to_string(),
                    source: Box::new(e),
                })
            })
            .collect::<Result<_, _>>()?;
        let refs: Vec<(&ModelParams, usize)> = updates.iter().map(|(p, n, _)| (p, *n)).collect();
        global = fedavg_with(&refs, cfg.weighting)?;
        reports.push(RoundReport {
            round,
            clients: clients
                .iter()
                .zip(&updates)
                .map(|(c, (_, n, loss))| ClientReport {
                    client_id: c.client_id.to_string(),
                    sample_count: *n,
                    loss: *loss,
                })
                .collect(),
            global_checksum: global.checksum(),
            wall_time: start.elapsed(),
            bytes_transferred: bytes_per_client_round(global.len()) * clients.len() as u64,
        });
    }
    Ok((global, reports))
}

/// Shuffle-stream id of a pooled run: the sorted dataset names joined by
/// `+`. A single dataset gets its own name, matching its federated client.
pub fn pooled_id(datasets: &[&Dataset]) -> String {
    let mut names: Vec<&str> = datasets.iter().map(|d| d.name()).collect();
    names.sort_unstable();
    names.join("+")
}

/// Pools every item, in canonical dataset order, and trains for
/// `rounds * local_epochs` epochs from the same initial model as
/// [`run_federated`]. Returns the model and the final epoch's loss.
pub fn run_centralized(
    arch: &ArchDescriptor,
    datasets: &[&Dataset],
    cfg: &RoundConfig,
) -> Result<(ModelParams, f32), FlError> {
    cfg.validate()?;
    let mut sorted = datasets.to_vec();
    sorted.sort_by_key(|d| (d.name().to_string(), d.checksum()));
    let items: Vec<&LabeledImage> = sorted.iter().flat_map(|d| d.items()).collect();
    let id = pooled_id(datasets);
    if items.is_empty() {
        return Err(FlError::EmptyDataset(id));
    }
    let mut params = initial_model(arch, cfg)?;
    let loss = train_epochs(
        &mut params,
        &items,
        seed::fnv1a(id.as_bytes()),
        0,
        cfg.total_epochs(),
        cfg,
    )?;
    Ok((params, loss))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{env, generate_dataset};

    fn tiny_arch() -> ArchDescriptor {
        "input=64x64x3;conv=2,5,4,2;relu;maxpool=4,4;flatten;dense=2"
            .parse()
            .unwrap()
    }

    fn params_of(vals: &[f32]) -> ModelParams {
        let arch: ArchDescriptor = "input=1x1x1;flatten;dense=2".parse().unwrap();
        // 2 weights + 2 biases
        assert_eq!(arch.param_count().unwrap(), 4);
        ModelParams::new(arch, vals.to_vec()).unwrap()
    }

    fn quick_cfg() -> RoundConfig {
        RoundConfig {
            rounds: 2,
            local_epochs: 1,
            batch_size: 8,
            lr: 0.05,
            seed: 3,
            weighting: Weighting::SampleCount,
        }
    }

    #[test]
    fn fedavg_hand_values() {
        let a = params_of(&[1.0, 3.0, 0.0, 0.0]);
        let b = params_of(&[5.0, 7.0, 0.0, 0.0]);
        let out = fedavg(&[(&a, 1), (&b, 3)]).unwrap();
        assert_eq!(&out.values()[..2], &[4.0, 6.0]);
        let z = params_of(&[0.0; 4]);
        let o = params_of(&[1.0; 4]);
        assert!(fedavg(&[(&z, 2), (&o, 2)])
            .unwrap()
            .values()
            .iter()
            .all(|&v| v == 0.5));
        let u = fedavg_with(&[(&a, 1), (&b, 3)], Weighting::Uniform).unwrap();
        assert_eq!(&u.values()[..2], &[3.0, 5.0]);
    }

    #[test]
    fn fedavg_errors() {
        assert!(matches!(fedavg(&[]), Err(FlError::NoUpdates)));
        let a = params_of(&[1.0; 4]);
        let other = ModelParams::zeros("input=2x1x1;flatten;dense=2".parse().unwrap()).unwrap();
        assert!(matches!(
            fedavg(&[(&a, 1), (&other, 1)]),
            Err(FlError::ArchMismatch { index: 1, .. })
        ));
        assert!(matches!(fedavg(&[(&a, 0)]), Err(FlError::ZeroCount(0))));
    }

    #[test]
    fn config_validation() {
        assert!(RoundConfig::default().validate().is_ok());
        for f in [
            |c: &mut RoundConfig| c.rounds = 0,
            |c: &mut RoundConfig| c.local_epochs = 0,
            |c: &mut RoundConfig| c.batch_size = 0,
            |c: &mut RoundConfig| c.lr = -1.0,
            |c: &mut RoundConfig| c.lr = f32::NAN,
        ] {
            let mut c = RoundConfig::default();
            f(&mut c);
            assert!(c.validate().is_err());
        }
    }

    #[test]
    fn zero_lr_is_identity_and_training_is_deterministic() {
        let d = generate_dataset(&env::hospital(), 20, 1).unwrap();
        let p = init_params(&tiny_arch(), 5).unwrap();
        let mut cfg = quick_cfg();
        cfg.lr = 0.0;
        let (out, n, _) = local_train(&p, ClientState::new(&d), &cfg).unwrap();
        assert!(out.bit_eq(&p));
        assert_eq!(n, 20);
        cfg.lr = 0.05;
        let (a, _, la) = local_train(&p, ClientState::new(&d), &cfg).unwrap();
        let (b, _, lb) = local_train(&p, ClientState::new(&d), &cfg).unwrap();
        assert!(a.bit_eq(&b));
        assert_eq!(la.to_bits(), lb.to_bits());
        assert!(!a.bit_eq(&p));
    }

    #[test]
    fn duplicate_clients_rejected() {
        let d = generate_dataset(&env::hospital(), 4, 1).unwrap();
        let c = ClientState::new(&d);
        assert!(matches!(
            run_federated(&tiny_arch(), &[c, c], &quick_cfg()),
            Err(FlError::DuplicateClient(_))
        ));
        assert!(matches!(
            run_federated(&tiny_arch(), &[], &quick_cfg()),
            Err(FlError::NoClients)
        ));
    }

    #[test]
    fn reports_cover_clients_and_bytes() {
        let a = generate_dataset(&env::hospital(), 6, 1).unwrap();
        let b = generate_dataset(&env::office(), 10, 1).unwrap();
        let (model, reports) = run_federated(
            &tiny_arch(),
            &[ClientState::new(&b), ClientState::new(&a)],
            &quick_cfg(),
        )
        .unwrap();
        assert_eq!(reports.len(), 2);
        let ids: Vec<_> = reports[0]
            .clients
            .iter()
            .map(|c| c.client_id.as_str())
            .collect();
        assert_eq!(ids, ["S0", "S1"]);
        assert_eq!(reports[1].global_checksum, model.checksum());
        assert_eq!(reports[0].bytes_transferred, 2 * 2 * model.len() as u64 * 4);
    }

    #[test]
    fn default_arch_round_traffic() {
        // 39378 parameters, 4 bytes each, down and up
        let n = ArchDescriptor::default_alexnet().param_count().unwrap();
        assert_eq!(bytes_per_client_round(n), 315_024);
    }
}
