//! Per-sample forward and backward passes, generic over the working float.
//!
//! Activations are channel-major (`[c][h][w]`) internally. Convolutions run
//! as im2col followed by a row-oriented product so the inner loops are plain
//! axpy updates; reductions use a fixed 8-lane accumulation order. Nothing
//! here depends on thread scheduling, so results are bit-reproducible.

use num_traits::Float;

use super::arch::{ActShape, Layer, Plan};

pub trait Scalar: Float + Default + Send + Sync + std::fmt::Debug + 'static {
    fn from_f32(v: f32) -> Self;
    fn to_f32(self) -> f32;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f32(v: f32) -> Self {
        v
    }
    #[inline]
    fn to_f32(self) -> f32 {
        self
    }
    #[inline]
    fn to_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f32(v: f32) -> Self {
        f64::from(v)
    }
    #[inline]
    fn to_f32(self) -> f32 {
        self as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

/// Logarithm floor for the cross-entropy.
pub const LOG_CLAMP: f64 = 1e-12;

#[inline]
fn axpy<T: Scalar>(y: &mut [T], a: T, x: &[T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + a * xi;
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for (&x, &y) in ra.iter().zip(rb) {
        s = s + x * y;
    }
    s
}

#[inline]
fn sum<T: Scalar>(a: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = a.chunks_exact(8);
    let rem = chunks.remainder();
    for x in chunks {
        for l in 0..8 {
            acc[l] = acc[l] + x[l];
        }
    }
    let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for &x in rem {
        s = s + x;
    }
    s
}

/// Numerically stable two-way (or n-way) softmax.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total = exps.iter().copied().fold(T::zero(), |a, b| a + b);
    exps.into_iter().map(|e| e / total).collect()
}

/// Reusable per-sample buffers.
pub struct Workspace<T> {
    /// `acts[i]` is the input of layer `i`; the last entry holds the logits.
    acts: Vec<Vec<T>>,
    cols: Vec<Vec<T>>,
    argmax: Vec<Vec<u32>>,
    dcols: Vec<T>,
}

impl<T: Scalar> Workspace<T> {
    pub fn new(plan: &Plan) -> Self {
        let mut acts = Vec::with_capacity(plan.layers.len() + 1);
        let mut cols = Vec::with_capacity(plan.layers.len());
        let mut argmax = Vec::with_capacity(plan.layers.len());
        let mut max_cols = 0;
        for lp in &plan.layers {
            acts.push(vec![T::zero(); lp.input.len()]);
            let ncols = match (lp.layer, lp.input, lp.output) {
                (
                    Layer::Conv { kernel, .. },
                    ActShape::Spatial { c, .. },
                    ActShape::Spatial { h, w, .. },
                ) => c * kernel * kernel * h * w,
                _ => 0,
            };
            max_cols = max_cols.max(ncols);
            cols.push(vec![T::zero(); ncols]);
            let npool = match lp.layer {
                Layer::MaxPool { .. } => lp.output.len(),
                _ => 0,
            };
            argmax.push(vec![0u32; npool]);
        }
        acts.push(vec![
            T::zero();
            plan.layers.last().map_or(0, |l| l.output.len())
        ]);
        Workspace {
            acts,
            cols,
            argmax,
            dcols: vec![T::zero(); max_cols],
        }
    }

    pub fn logits(&self) -> &[T] {
        self.acts.last().expect("workspace has an output slot")
    }
}

/// A plan bound to a parameter vector.
pub struct Network<'a, T> {
    pub plan: &'a Plan,
    pub params: &'a [T],
}

impl<'a, T: Scalar> Network<'a, T> {
    pub fn new(plan: &'a Plan, params: &'a [T]) -> Self {
        debug_assert_eq!(plan.param_count, params.len());
        Network { plan, params }
    }

    /// Runs one image given in height-width-channel order; logits land in
    /// `ws.logits()`.
    pub fn forward_hwc(&self, image: &[f32], ws: &mut Workspace<T>) {
        let (c, h, w) = match self.plan.layers[0].input {
            ActShape::Spatial { c, h, w } => (c, h, w),
            ActShape::Flat(_) => unreachable!("plans always start spatial"),
        };
        let x0 = &mut ws.acts[0];
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    x0[(ch * h + y) * w + xx] = T::from_f32(image[(y * w + xx) * c + ch]);
                }
            }
        }
        for i in 0..self.plan.layers.len() {
            self.forward_layer(i, ws);
        }
    }

    fn forward_layer(&self, i: usize, ws: &mut Workspace<T>) {
        let lp = &self.plan.layers[i];
        let (before, after) = ws.acts.split_at_mut(i + 1);
        let input = &before[i];
        let output = &mut after[0];
        match (lp.layer, lp.input, lp.output) {
            (
                Layer::Conv {
                    kernel,
                    stride,
                    padding,
                    ..
                },
                ActShape::Spatial { c, h, w },
                ActShape::Spatial {
                    c: co,
                    h: oh,
                    w: ow,
                },
            ) => {
                let cols = &mut ws.cols[i];
                im2col(input, c, h, w, kernel, stride, padding, oh, ow, cols);
                let npos = oh * ow;
                let kk = c * kernel * kernel;
                let weights = &self.params[lp.weight_offset..lp.weight_offset + lp.weight_len];
                let bias = &self.params[lp.bias_offset()..lp.bias_offset() + lp.bias_len];
                for o in 0..co {
                    let out_row = &mut output[o * npos..(o + 1) * npos];
                    out_row.fill(bias[o]);
                    let wrow = &weights[o * kk..(o + 1) * kk];
                    for (k, &wv) in wrow.iter().enumerate() {
                        axpy(out_row, wv, &cols[k * npos..(k + 1) * npos]);
                    }
                }
            }
            (Layer::Relu, _, _) => {
                for (o, &x) in output.iter_mut().zip(input.iter()) {
                    *o = if x > T::zero() { x } else { T::zero() };
                }
            }
            (
                Layer::MaxPool { kernel, stride },
                ActShape::Spatial { c, h, w },
                ActShape::Spatial { h: oh, w: ow, .. },
            ) => {
                let argmax = &mut ws.argmax[i];
                for ch in 0..c {
                    for y in 0..oh {
                        for x in 0..ow {
                            let mut best = T::neg_infinity();
                            let mut best_idx = 0usize;
                            for ky in 0..kernel {
                                let row = (ch * h + y * stride + ky) * w + x * stride;
                                for kx in 0..kernel {
                                    let v = input[row + kx];
                                    if v > best {
                                        best = v;
                                        best_idx = row + kx;
                                    }
                                }
                            }
                            let out = (ch * oh + y) * ow + x;
                            output[out] = best;
                            argmax[out] = best_idx as u32;
                        }
                    }
                }
            }
            (Layer::Flatten, _, _) => output.copy_from_slice(input),
            (Layer::Dense { out_features }, ActShape::Flat(n), _) => {
                let weights = &self.params[lp.weight_offset..lp.weight_offset + lp.weight_len];
                let bias = &self.params[lp.bias_offset()..lp.bias_offset() + lp.bias_len];
                for o in 0..out_features {
                    output[o] = bias[o] + dot(&weights[o * n..(o + 1) * n], input);
                }
            }
            _ => unreachable!("plan validated layer/shape pairing"),
        }
    }

    /// Backpropagates `dlogits` through the activations stored in `ws`,
    /// adding parameter gradients into `grads`.
    pub fn backward(&self, dlogits: &[T], ws: &mut Workspace<T>, grads: &mut [T]) {
        let nlayers = self.plan.layers.len();
        let mut dy: Vec<T> = dlogits.to_vec();
        for i in (0..nlayers).rev() {
            let lp = &self.plan.layers[i];
            let need_dx = i > 0;
            let input = &ws.acts[i];
            let mut dx = if need_dx {
                vec![T::zero(); lp.input.len()]
            } else {
                Vec::new()
            };
            match (lp.layer, lp.input, lp.output) {
                (
                    Layer::Conv {
                        kernel,
                        stride,
                        padding,
                        ..
                    },
                    ActShape::Spatial { c, h, w },
                    ActShape::Spatial {
                        c: co,
                        h: oh,
                        w: ow,
                    },
                ) => {
                    let npos = oh * ow;
                    let kk = c * kernel * kernel;
                    let cols = &ws.cols[i];
                    let weights = &self.params[lp.weight_offset..lp.weight_offset + lp.weight_len];
                    let (gw, gb) = grads[lp.weight_offset..lp.weight_offset + lp.param_len()]
                        .split_at_mut(lp.weight_len);
                    for o in 0..co {
                        let drow = &dy[o * npos..(o + 1) * npos];
                        gb[o] = gb[o] + sum(drow);
                        let gwrow = &mut gw[o * kk..(o + 1) * kk];
                        for (k, g) in gwrow.iter_mut().enumerate() {
                            *g = *g + dot(drow, &cols[k * npos..(k + 1) * npos]);
                        }
                    }
                    if need_dx {
                        let dcols = &mut ws.dcols[..kk * npos];
                        dcols.fill(T::zero());
                        for o in 0..co {
                            let drow = &dy[o * npos..(o + 1) * npos];
                            let wrow = &weights[o * kk..(o + 1) * kk];
                            for (k, &wv) in wrow.iter().enumerate() {
                                axpy(&mut dcols[k * npos..(k + 1) * npos], wv, drow);
                            }
                        }
                        col2im(dcols, c, h, w, kernel, stride, padding, oh, ow, &mut dx);
                    }
                }
                (Layer::Relu, _, _) => {
                    if need_dx {
                        for ((d, &g), &x) in dx.iter_mut().zip(dy.iter()).zip(input.iter()) {
                            *d = if x > T::zero() { g } else { T::zero() };
                        }
                    }
                }
                (Layer::MaxPool { .. }, _, _) => {
                    if need_dx {
                        for (&src, &g) in ws.argmax[i].iter().zip(dy.iter()) {
                            dx[src as usize] = dx[src as usize] + g;
                        }
                    }
                }
                (Layer::Flatten, _, _) => {
                    if need_dx {
                        dx.copy_from_slice(&dy);
                    }
                }
                (Layer::Dense { out_features }, ActShape::Flat(n), _) => {
                    let weights = &self.params[lp.weight_offset..lp.weight_offset + lp.weight_len];
                    let (gw, gb) = grads[lp.weight_offset..lp.weight_offset + lp.param_len()]
                        .split_at_mut(lp.weight_len);
                    for o in 0..out_features {
                        let g = dy[o];
                        gb[o] = gb[o] + g;
                        axpy(&mut gw[o * n..(o + 1) * n], g, input);
                        if need_dx {
                            axpy(&mut dx, g, &weights[o * n..(o + 1) * n]);
                        }
                    }
                }
                _ => unreachable!("plan validated layer/shape pairing"),
            }
            dy = dx;
        }
    }

    /// Hash of every relu mask and maxpool selection from the last forward
    /// pass. Two parameter points with equal signatures lie in the same
    /// piecewise-smooth region of the network.
    pub fn activation_signature(&self, ws: &Workspace<T>) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |v: u64| {
            h ^= v;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for (i, lp) in self.plan.layers.iter().enumerate() {
            match lp.layer {
                Layer::Relu => {
                    for &x in &ws.acts[i] {
                        feed(u64::from(x > T::zero()));
                    }
                }
                Layer::MaxPool { .. } => {
                    for &a in &ws.argmax[i] {
                        feed(u64::from(a));
                    }
                }
                _ => {}
            }
        }
        h
    }
}

/// Output columns `x` in `[lo, hi)` read input column `x * stride + k - padding`
/// inside `[0, w)`.
#[inline]
fn valid_range(k: usize, stride: usize, padding: usize, w: usize, ow: usize) -> (usize, usize) {
    // smallest x with x*stride + k >= padding
    let lo = if k >= padding {
        0
    } else {
        (padding - k).div_ceil(stride)
    };
    // largest x with x*stride + k - padding <= w - 1
    let hi = if k > padding + w - 1 {
        0
    } else {
        (padding + w - 1 - k) / stride + 1
    };
    (lo.min(ow), hi.min(ow).max(lo.min(ow)))
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    input: &[T],
    c: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
    cols: &mut [T],
) {
    let npos = oh * ow;
    for ch in 0..c {
        for ky in 0..kernel {
            for kx in 0..kernel {
                let k = (ch * kernel + ky) * kernel + kx;
                let row = &mut cols[k * npos..(k + 1) * npos];
                let (lo, hi) = valid_range(kx, stride, padding, w, ow);
                for y in 0..oh {
                    let iy = (y * stride + ky) as isize - padding as isize;
                    let dst = &mut row[y * ow..(y + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src_row =
                        &input[(ch * h + iy as usize) * w..(ch * h + iy as usize + 1) * w];
                    dst[..lo].fill(T::zero());
                    dst[hi..].fill(T::zero());
                    let start = lo * stride + kx - padding;
                    if stride == 1 {
                        dst[lo..hi].copy_from_slice(&src_row[start..start + (hi - lo)]);
                    } else {
                        for (d, s) in dst[lo..hi]
                            .iter_mut()
                            .zip(src_row[start..].iter().step_by(stride))
                        {
                            *d = *s;
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
    dx: &mut [T],
) {
    let npos = oh * ow;
    for ch in 0..c {
        for ky in 0..kernel {
            for kx in 0..kernel {
                let k = (ch * kernel + ky) * kernel + kx;
                let row = &cols[k * npos..(k + 1) * npos];
                let (lo, hi) = valid_range(kx, stride, padding, w, ow);
                if lo >= hi {
                    continue;
                }
                for y in 0..oh {
                    let iy = (y * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ch * h + iy as usize) * w + lo * stride + kx - padding;
                    let src = &row[y * ow + lo..y * ow + hi];
                    if stride == 1 {
                        for (d, &s) in dx[base..base + (hi - lo)].iter_mut().zip(src) {
                            *d = *d + s;
                        }
                    } else {
                        for (d, &s) in dx[base..].iter_mut().step_by(stride).zip(src) {
                            *d = *d + s;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lane_dot_matches_naive_on_integers() {
        let a: Vec<f64> = (0..21).map(f64::from).collect();
        let b: Vec<f64> = (0..21).map(|i| f64::from(2 * i + 1)).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert_eq!(dot(&a, &b), naive);
        assert_eq!(sum(&a), 210.0);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let p = softmax(&[3.0f32, 3.0]);
        assert_eq!(p, vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_handles_large_logits() {
        let p = softmax(&[1000.0f32, -1000.0]);
        assert!(p.iter().all(|v| v.is_finite()));
        assert_eq!(p[0], 1.0);
    }
}
