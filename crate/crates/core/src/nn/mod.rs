//! Minimal convolutional network engine: forward pass, backpropagation and
//! plain SGD for a small blocked/free classifier.

pub mod arch;
pub mod engine;
pub mod format;
pub mod params;

use thiserror::Error;

pub use arch::{ArchDescriptor, InputShape, Layer, NUM_CLASSES};
pub use format::{deserialize_params, serialize_params, ModelFileError};
pub use params::{init_params, sgd_step, Gradients, ModelParams};

use engine::{softmax, Network, Scalar, Workspace, LOG_CLAMP};

use crate::tensor::Tensor;

/// Output index of the "blocked" class.
pub const BLOCKED: usize = 0;
/// Output index of the "free" class.
pub const FREE: usize = 1;

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("inconsistent architecture: {0}")]
    Shape(String),
    #[error("cannot parse architecture: {0}")]
    InvalidArch(String),
    #[error("input shape mismatch: expected {expected:?}, got {actual:?}")]
    InputShape {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("parameter length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("{labels} labels for a batch of {batch}")]
    LabelCount { labels: usize, batch: usize },
    #[error("label {value} at position {index} is not a class index in {{0, 1}}")]
    Label { index: usize, value: u8 },
    #[error("learning rate must be finite and non-negative, got {0}")]
    LearningRate(f32),
    #[error("empty batch")]
    EmptyBatch,
}

fn check_batch(arch: &ArchDescriptor, batch: &Tensor) -> Result<usize, NnError> {
    let dims = arch.input.dims();
    let shape = batch.shape();
    if shape.len() != 4 || shape[1..] != dims {
        return Err(NnError::InputShape {
            expected: vec![
                shape.first().copied().unwrap_or(0),
                dims[0],
                dims[1],
                dims[2],
            ],
            actual: shape.to_vec(),
        });
    }
    Ok(shape[0])
}

fn check_labels(labels: &[u8], n: usize) -> Result<(), NnError> {
    if labels.len() != n {
        return Err(NnError::LabelCount {
            labels: labels.len(),
            batch: n,
        });
    }
    if let Some((index, &value)) = labels
        .iter()
        .enumerate()
        .find(|(_, &l)| l as usize >= NUM_CLASSES)
    {
        return Err(NnError::Label { index, value });
    }
    Ok(())
}

/// Class probabilities for an `[N, H, W, C]` batch, shape `[N, 2]`.
pub fn forward(params: &ModelParams, batch: &Tensor) -> Result<Tensor, NnError> {
    let n = check_batch(params.arch(), batch)?;
    let plan = params.arch().plan()?;
    let net = Network::new(&plan, params.values());
    let mut ws = Workspace::<f32>::new(&plan);
    let mut out = Vec::with_capacity(n * NUM_CLASSES);
    for i in 0..n {
        net.forward_hwc(batch.row(i), &mut ws);
        out.extend(softmax(ws.logits()));
    }
    Ok(Tensor::new(vec![n, NUM_CLASSES], out).expect("n x 2 output"))
}

/// Probability of "blocked" for one `[H, W, C]` (or `[1, H, W, C]`) image.
pub fn predict_proba(params: &ModelParams, image: &Tensor) -> Result<f32, NnError> {
    let dims = params.arch().input.dims();
    let shape = image.shape();
    if !(shape == dims || (shape.len() == 4 && shape[0] == 1 && shape[1..] == dims)) {
        return Err(NnError::InputShape {
            expected: dims.to_vec(),
            actual: shape.to_vec(),
        });
    }
    let mut scorer = Scorer::new(params)?;
    Ok(scorer.blocked_proba(image.data()))
}

/// Reusable single-image inference state.
pub struct Scorer<'a> {
    plan: arch::Plan,
    params: &'a ModelParams,
    ws: Workspace<f32>,
}

impl<'a> Scorer<'a> {
    pub fn new(params: &'a ModelParams) -> Result<Self, NnError> {
        let plan = params.arch().plan()?;
        let ws = Workspace::new(&plan);
        Ok(Scorer { plan, params, ws })
    }

    /// `image` is `H*W*C` values in height-width-channel order.
    pub fn blocked_proba(&mut self, image: &[f32]) -> f32 {
        let net = Network::new(&self.plan, self.params.values());
        net.forward_hwc(image, &mut self.ws);
        softmax(self.ws.logits())[BLOCKED]
    }
}

fn loss_and_grad_generic<T: Scalar>(
    plan: &arch::Plan,
    values: &[T],
    batch: &Tensor,
    labels: &[u8],
) -> (T, Vec<T>) {
    let n = batch.shape()[0];
    let net = Network::new(plan, values);
    let mut ws = Workspace::<T>::new(plan);
    let mut grads = vec![T::zero(); values.len()];
    let inv_n = T::one() / T::from_f32(n as f32);
    let clamp = T::from(LOG_CLAMP).expect("representable");
    let mut total = T::zero();
    let mut dlogits = [T::zero(); NUM_CLASSES];
    for i in 0..n {
        net.forward_hwc(batch.row(i), &mut ws);
        let p = softmax(ws.logits());
        let y = labels[i] as usize;
        total = total - p[y].max(clamp).ln();
        for k in 0..NUM_CLASSES {
            let target = if k == y { T::one() } else { T::zero() };
            dlogits[k] = (p[k] - target) * inv_n;
        }
        net.backward(&dlogits, &mut ws, &mut grads);
    }
    (total * inv_n, grads)
}

fn loss_generic<T: Scalar>(plan: &arch::Plan, values: &[T], batch: &Tensor, labels: &[u8]) -> T {
    let n = batch.shape()[0];
    let net = Network::new(plan, values);
    let mut ws = Workspace::<T>::new(plan);
    let clamp = T::from(LOG_CLAMP).expect("representable");
    let mut total = T::zero();
    for i in 0..n {
        net.forward_hwc(batch.row(i), &mut ws);
        let p = softmax(ws.logits());
        total = total - p[labels[i] as usize].max(clamp).ln();
    }
    total / T::from_f32(n as f32)
}

/// Mean softmax cross-entropy over the batch and its gradient.
///
/// `labels` are class indices: [`BLOCKED`] (0) or [`FREE`] (1).
pub fn loss_and_grad(
    params: &ModelParams,
    batch: &Tensor,
    labels: &[u8],
) -> Result<(f32, Gradients), NnError> {
    let n = check_batch(params.arch(), batch)?;
    check_labels(labels, n)?;
    let plan = params.arch().plan()?;
    let (loss, values) = loss_and_grad_generic(&plan, params.values(), batch, labels);
    Ok((loss, Gradients { values }))
}

/// Gradient-check mode: the same computation carried out in `f64` on a
/// widened parameter vector.
pub fn loss_and_grad_wide(
    arch: &ArchDescriptor,
    values: &[f64],
    batch: &Tensor,
    labels: &[u8],
) -> Result<(f64, Vec<f64>), NnError> {
    let plan = wide_plan(arch, values, batch, labels)?;
    Ok(loss_and_grad_generic(&plan, values, batch, labels))
}

/// Loss only, in `f64`.
pub fn loss_wide(
    arch: &ArchDescriptor,
    values: &[f64],
    batch: &Tensor,
    labels: &[u8],
) -> Result<f64, NnError> {
    let plan = wide_plan(arch, values, batch, labels)?;
    Ok(loss_generic(&plan, values, batch, labels))
}

/// Hash of the relu/maxpool decisions taken over the whole batch at `values`.
pub fn activation_signature_wide(
    arch: &ArchDescriptor,
    values: &[f64],
    batch: &Tensor,
) -> Result<u64, NnError> {
    let n = check_batch(arch, batch)?;
    let plan = arch.plan()?;
    if values.len() != plan.param_count {
        return Err(NnError::LengthMismatch {
            expected: plan.param_count,
            actual: values.len(),
        });
    }
    let net = Network::new(&plan, values);
    let mut ws = Workspace::<f64>::new(&plan);
    let mut h = 0u64;
    for i in 0..n {
        net.forward_hwc(batch.row(i), &mut ws);
        h = h.rotate_left(7) ^ net.activation_signature(&ws);
    }
    Ok(h)
}

fn wide_plan(
    arch: &ArchDescriptor,
    values: &[f64],
    batch: &Tensor,
    labels: &[u8],
) -> Result<arch::Plan, NnError> {
    let n = check_batch(arch, batch)?;
    check_labels(labels, n)?;
    let plan = arch.plan()?;
    if values.len() != plan.param_count {
        return Err(NnError::LengthMismatch {
            expected: plan.param_count,
            actual: values.len(),
        });
    }
    Ok(plan)
}
