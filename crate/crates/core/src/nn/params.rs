use rand_distr::{Distribution, StandardNormal};

use super::arch::{ArchDescriptor, Layer};
use super::NnError;
use crate::seed;

/// Architecture plus the flat parameter vector: for every parameterised
/// layer in order, its weights followed by its biases.
///
/// Conv weights are laid out `[out][in][ky][kx]`, dense weights `[out][in]`
/// where the input of the first dense layer is the channel-major flattening
/// of the last spatial map.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    arch: ArchDescriptor,
    values: Vec<f32>,
}

impl ModelParams {
    pub fn new(arch: ArchDescriptor, values: Vec<f32>) -> Result<Self, NnError> {
        let expected = arch.param_count()?;
        if values.len() != expected {
            return Err(NnError::LengthMismatch {
                expected,
                actual: values.len(),
            });
        }
        Ok(ModelParams { arch, values })
    }

    pub fn zeros(arch: ArchDescriptor) -> Result<Self, NnError> {
        let n = arch.param_count()?;
        Ok(ModelParams {
            arch,
            values: vec![0.0; n],
        })
    }

    pub fn arch(&self) -> &ArchDescriptor {
        &self.arch
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// FNV-1a over the little-endian bytes of the parameters.
    pub fn checksum(&self) -> u64 {
        let mut bytes = Vec::with_capacity(self.values.len() * 4);
        for v in &self.values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        seed::fnv1a(&bytes)
    }

    /// Bitwise equality of the parameter vectors (distinguishes `-0.0` and
    /// NaN payloads, unlike `==`).
    pub fn bit_eq(&self, other: &ModelParams) -> bool {
        self.arch == other.arch
            && self.values.len() == other.values.len()
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Gradient vector with the same layout as [`ModelParams::values`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub values: Vec<f32>,
}

impl Gradients {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// He-normal weights (`std = sqrt(2 / fan_in)`) and zero biases, drawn in
/// parameter order from the `init` stream of `seed`.
pub fn init_params(arch: &ArchDescriptor, seed: u64) -> Result<ModelParams, NnError> {
    let plan = arch.plan()?;
    let mut rng = seed::rng(seed, "init", &[]);
    let mut values = vec![0.0f32; plan.param_count];
    for lp in &plan.layers {
        if !matches!(lp.layer, Layer::Conv { .. } | Layer::Dense { .. }) {
            continue;
        }
        let std = (2.0 / lp.fan_in() as f64).sqrt();
        for v in &mut values[lp.weight_offset..lp.weight_offset + lp.weight_len] {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = (z * std) as f32;
        }
    }
    Ok(ModelParams {
        arch: arch.clone(),
        values,
    })
}

/// `values - lr * grads`, elementwise.
pub fn sgd_step(params: &ModelParams, grads: &Gradients, lr: f32) -> Result<ModelParams, NnError> {
    if grads.values.len() != params.values.len() {
        return Err(NnError::LengthMismatch {
            expected: params.values.len(),
            actual: grads.values.len(),
        });
    }
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(NnError::LearningRate(lr));
    }
    let mut out = params.clone();
    sgd_step_in_place(&mut out, grads, lr);
    Ok(out)
}

pub(crate) fn sgd_step_in_place(params: &mut ModelParams, grads: &Gradients, lr: f32) {
    if lr == 0.0 {
        return;
    }
    for (p, &g) in params.values.iter_mut().zip(&grads.values) {
        *p -= lr * g;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ArchDescriptor {
        "input=4x4x1;conv=2,3,1,0;relu;flatten;dense=2"
            .parse()
            .unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_params(&tiny(), 7).unwrap();
        let b = init_params(&tiny(), 7).unwrap();
        assert!(a.bit_eq(&b));
        let c = init_params(&tiny(), 8).unwrap();
        assert!(!a.bit_eq(&c));
    }

    #[test]
    fn init_biases_are_zero() {
        let arch = ArchDescriptor::default_alexnet();
        let p = init_params(&arch, 3).unwrap();
        for lp in arch.plan().unwrap().layers {
            for &b in &p.values()[lp.bias_offset()..lp.bias_offset() + lp.bias_len] {
                assert_eq!(b.to_bits(), 0.0f32.to_bits());
            }
        }
    }

    #[test]
    fn init_weight_scale_is_he() {
        let arch = ArchDescriptor::default_alexnet();
        let plan = arch.plan().unwrap();
        let p = init_params(&arch, 11).unwrap();
        // the 512x64 dense layer has enough samples for a tight variance check
        let lp = plan
            .layers
            .iter()
            .find(|l| l.weight_len == 512 * 64)
            .unwrap();
        let w = &p.values()[lp.weight_offset..lp.weight_offset + lp.weight_len];
        let var: f64 = w.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>() / w.len() as f64;
        let expected = 2.0 / 512.0;
        assert!(
            (var / expected - 1.0).abs() < 0.05,
            "var {var} vs {expected}"
        );
    }

    #[test]
    fn init_rejects_bad_arch() {
        let arch: ArchDescriptor = "input=4x4x1;dense=2".parse().unwrap();
        assert!(matches!(init_params(&arch, 0), Err(NnError::Shape(_))));
    }

    #[test]
    fn sgd_step_definition() {
        let arch: ArchDescriptor = "input=1x1x1;flatten;dense=2".parse().unwrap();
        // 1x1 input -> 2 weights + 2 biases
        let p = ModelParams::new(arch, vec![1.0, 2.0, 0.0, 0.0]).unwrap();
        let g = Gradients {
            values: vec![0.5, -1.0, 0.0, 0.0],
        };
        let out = sgd_step(&p, &g, 0.1).unwrap();
        assert_eq!(&out.values()[..2], &[0.95, 2.1]);
    }

    #[test]
    fn sgd_zero_lr_or_zero_grad_is_identity() {
        let p = init_params(&tiny(), 1).unwrap();
        let g = Gradients {
            values: vec![0.25; p.len()],
        };
        assert!(sgd_step(&p, &g, 0.0).unwrap().bit_eq(&p));
        let zero = Gradients {
            values: vec![0.0; p.len()],
        };
        assert!(sgd_step(&p, &zero, 0.3).unwrap().bit_eq(&p));
    }

    #[test]
    fn sgd_length_mismatch() {
        let p = init_params(&tiny(), 1).unwrap();
        let g = Gradients {
            values: vec![0.0; 3],
        };
        assert!(matches!(
            sgd_step(&p, &g, 0.1),
            Err(NnError::LengthMismatch { .. })
        ));
    }
}
