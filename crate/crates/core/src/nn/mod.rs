//! Minimal CPU training engine: channel-major feature maps, a flat parameter
//! vector, hand-derived backward passes and Adam.
//!
//! Models own a [`ParamLayout`]-assigned slice of one flat `Vec<f32>`; every
//! layer reads its weights from that slice and accumulates gradients into a
//! buffer of the same length. Batches are processed one sample at a time and
//! the per-sample gradients are summed in index order, so results do not
//! depend on thread scheduling.

mod layers;

pub use layers::{
    relu_backward, relu_inplace, Conv2d, ConvCache, ConvTranspose2x2, Linear, MaxPool2,
    PoolCache,
};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// A `channels × height × width` activation stored channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), channels * height * width, "feature map size");
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    /// Stack `self` and `other` along the channel axis.
    pub fn concat(&self, other: &FeatureMap) -> FeatureMap {
        assert_eq!((self.height, self.width), (other.height, other.width));
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        FeatureMap::from_vec(self.channels + other.channels, self.height, self.width, data)
    }

    /// Inverse of [`FeatureMap::concat`]: first `channels` planes, then the rest.
    pub fn split_channels(mut self, channels: usize) -> (FeatureMap, FeatureMap) {
        let n = self.plane_len();
        let rest = self.data.split_off(channels * n);
        let (h, w) = (self.height, self.width);
        let tail = FeatureMap::from_vec(self.channels - channels, h, w, rest);
        (FeatureMap::from_vec(channels, h, w, self.data), tail)
    }

    pub fn add_assign(&mut self, other: &FeatureMap) {
        assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Row-major `c = op(a) · op(b) + beta · c` where `op(a)` is `m × k` and
/// `op(b)` is `k × n`.
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    trans_a: bool,
    b: &[f32],
    trans_b: bool,
    c: &mut [f32],
    beta: f32,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds checked above; strides describe exactly the row-major
    // layouts of the given slices and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Hands out contiguous ranges of the flat parameter vector.
#[derive(Debug, Default)]
pub struct ParamLayout {
    len: usize,
}

impl ParamLayout {
    pub fn alloc(&mut self, n: usize) -> usize {
        let off = self.len;
        self.len += n;
        off
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Fill `dst` with `N(0, std²)` samples.
pub(crate) fn fill_normal<R: Rng>(rng: &mut R, dst: &mut [f32], std: f32) {
    let normal = Normal::new(0.0f32, std).expect("finite std");
    for v in dst {
        *v = normal.sample(rng);
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    m: Vec<f32>,
    v: Vec<f32>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize, lr: f32) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f32], grads: &[f32]) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let step = self.lr * bc2.sqrt() / bc1;
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            params[i] -= step * self.m[i] / (self.v[i].sqrt() + self.eps * bc2.sqrt());
        }
    }
}

/// Run `f` on every index of a batch, in parallel when the `parallel` feature
/// is on. Output order always matches index order.
pub(crate) fn map_indices<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Sum per-sample gradient vectors in index order.
pub(crate) fn sum_grads(parts: Vec<Vec<f32>>, len: usize) -> Vec<f32> {
    let mut total = vec![0.0f32; len];
    for part in parts {
        for (t, g) in total.iter_mut().zip(&part) {
            *t += g;
        }
    }
    total
}

/// Numerically stable `log(sum(exp(x)))`-based softmax.
pub fn softmax(logits: &[f32]) -> Vec<f32> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f64> = logits.iter().map(|&z| ((z - max) as f64).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| (e / sum) as f32).collect()
}

#[inline]
pub fn sigmoid(z: f32) -> f32 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean binary cross-entropy over logits plus its gradient w.r.t. the logits.
pub fn bce_with_logits(logits: &[f32], targets: &[f32]) -> (f32, Vec<f32>) {
    assert_eq!(logits.len(), targets.len());
    let n = logits.len() as f32;
    let mut loss = 0.0f64;
    let grad = logits
        .iter()
        .zip(targets)
        .map(|(&z, &t)| {
            loss += (z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()) as f64;
            (sigmoid(z) - t) / n
        })
        .collect();
    ((loss / n as f64) as f32, grad)
}
