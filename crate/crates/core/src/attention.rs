//! Attention reweighting of the Wiener statistics.
//!
//! Per frequency bin, the instantaneous rank-one statistics of every frame
//! are packed into a real feature row `V`, and a causal scaled dot-product
//! attention over the time axis replaces each row with a softmax-weighted
//! mixture of its history before the usual sliding-window sum:
//!
//! ```text
//! Q1 = LN(Linear(unfold(|X|^0.5))) . sigmoid(q)
//! K1 = LN(Linear(conv1x1(|D|^0.5))) . sigmoid(k)
//! V1 = V . sigmoid(v)
//! W  = Q1 K1^T / sqrt(m),  causally masked
//! A  = softmax(W) V1
//! ```
//!
//! The learned weights push attention mass away from double-talk frames, so
//! the summed statistics approximate what a single-talk (echo-only) window
//! would have produced. Frequencies never mix: every bin runs the same
//! parameters independently.
//!
//! The backward pass is hand-derived and verified against central finite
//! differences (see `surrogate::gradcheck`).

use num_complex::Complex64;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::stft::Spectrogram;
use crate::wiener::WienerStats;

/// Layer-normalization variance floor.
const LN_EPS: f64 = 1e-5;

/// Checkpoint schema version.
pub const CHECKPOINT_VERSION: u32 = 1;

/// Packed feature width for `m` taps: re/im of the `m x m` rank-one matrix
/// plus re/im of the length-`m` cross vector.
pub fn feature_dim(m: usize) -> usize {
    2 * m * m + 2 * m
}

/// Attention mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    /// Frame `t` attends to frames `0..=t`.
    Causal,
    /// Frame `t` attends only to itself; with unit gates this collapses the
    /// module to plain sliding-window statistics (diagnostic ablation).
    SelfOnly,
}

/// Learnable parameters of the attention stage.
///
/// Gates enter through `sigmoid(.)` only and start at 0 (gate value 0.5);
/// projections use fan-in-scaled uniform init, layer norms start at identity.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    /// Tap depth `m`; fixes every tensor shape below.
    pub taps: usize,
    /// Seed the parameters were initialized from (recorded in checkpoints).
    pub seed: u64,
    /// Q-path projection, row-major `m x m`.
    pub w_q: Vec<f64>,
    pub b_q: Vec<f64>,
    pub ln_q_scale: Vec<f64>,
    pub ln_q_shift: Vec<f64>,
    /// Pre-sigmoid Q gate, length `m`.
    pub q_gate: Vec<f64>,
    /// K-path projection, row-major `m x m`.
    pub w_k: Vec<f64>,
    pub b_k: Vec<f64>,
    pub ln_k_scale: Vec<f64>,
    pub ln_k_shift: Vec<f64>,
    pub k_gate: Vec<f64>,
    /// Pointwise convolution expanding the single mic channel to `m`.
    pub conv_k_weight: Vec<f64>,
    pub conv_k_bias: Vec<f64>,
    /// Pre-sigmoid V gate, length `feature_dim(m)`.
    pub v_gate: Vec<f64>,
}

impl AttentionParams {
    /// Deterministic initialization for tap depth `m`.
    pub fn init(m: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (m as f64).sqrt();
        let mut uniform = |n: usize, b: f64| -> Vec<f64> {
            (0..n).map(|_| rng.random_range(-b..b)).collect()
        };
        let w_q = uniform(m * m, bound);
        let w_k = uniform(m * m, bound);
        let conv_k_weight = uniform(m, 1.0);
        Self {
            taps: m,
            seed,
            w_q,
            b_q: vec![0.0; m],
            ln_q_scale: vec![1.0; m],
            ln_q_shift: vec![0.0; m],
            q_gate: vec![0.0; m],
            w_k,
            b_k: vec![0.0; m],
            ln_k_scale: vec![1.0; m],
            ln_k_shift: vec![0.0; m],
            k_gate: vec![0.0; m],
            conv_k_weight,
            conv_k_bias: vec![0.0; m],
            v_gate: vec![0.0; feature_dim(m)],
        }
    }

    pub fn taps(&self) -> usize {
        self.taps
    }

    /// Tensor views in a fixed order, paired with their checkpoint names.
    pub fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        vec![
            ("w_q", &self.w_q[..]),
            ("b_q", &self.b_q[..]),
            ("ln_q_scale", &self.ln_q_scale[..]),
            ("ln_q_shift", &self.ln_q_shift[..]),
            ("q_gate", &self.q_gate[..]),
            ("w_k", &self.w_k[..]),
            ("b_k", &self.b_k[..]),
            ("ln_k_scale", &self.ln_k_scale[..]),
            ("ln_k_shift", &self.ln_k_shift[..]),
            ("k_gate", &self.k_gate[..]),
            ("conv_k_weight", &self.conv_k_weight[..]),
            ("conv_k_bias", &self.conv_k_bias[..]),
            ("v_gate", &self.v_gate[..]),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        vec![
            ("w_q", &mut self.w_q[..]),
            ("b_q", &mut self.b_q[..]),
            ("ln_q_scale", &mut self.ln_q_scale[..]),
            ("ln_q_shift", &mut self.ln_q_shift[..]),
            ("q_gate", &mut self.q_gate[..]),
            ("w_k", &mut self.w_k[..]),
            ("b_k", &mut self.b_k[..]),
            ("ln_k_scale", &mut self.ln_k_scale[..]),
            ("ln_k_shift", &mut self.ln_k_shift[..]),
            ("k_gate", &mut self.k_gate[..]),
            ("conv_k_weight", &mut self.conv_k_weight[..]),
            ("conv_k_bias", &mut self.conv_k_bias[..]),
            ("v_gate", &mut self.v_gate[..]),
        ]
    }

    fn expected_len(name: &str, m: usize) -> usize {
        match name {
            "w_q" | "w_k" => m * m,
            "v_gate" => feature_dim(m),
            _ => m,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.taps == 0 {
            return Err(Error::Config("attention taps must be at least 1".into()));
        }
        for (name, tensor) in self.tensors() {
            if tensor.len() != Self::expected_len(name, self.taps) {
                return Err(Error::ShapeMismatch(format!(
                    "tensor {name} has {} entries, expected {} for m = {}",
                    tensor.len(),
                    Self::expected_len(name, self.taps),
                    self.taps
                )));
            }
            if let Some(idx) = tensor.iter().position(|v| !v.is_finite()) {
                return Err(Error::Data(format!(
                    "tensor {name} has a non-finite entry at index {idx}"
                )));
            }
        }
        Ok(())
    }

    /// Concatenate all tensors in declaration order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (_, t) in self.tensors() {
            out.extend_from_slice(t);
        }
        out
    }

    /// Inverse of [`flatten`](Self::flatten); `flat` must have the exact
    /// total length.
    pub fn unflatten(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for (_, t) in self.tensors_mut() {
            t.copy_from_slice(&flat[offset..offset + t.len()]);
            offset += t.len();
        }
        assert_eq!(offset, flat.len(), "flat parameter vector length mismatch");
    }

    /// One gradient-descent step `theta -= lr * grad`.
    pub fn apply_gradient_step(&mut self, grads: &AttentionGrads, lr: f64) {
        for ((_, t), (_, g)) in self.tensors_mut().into_iter().zip(grads.tensors()) {
            for (ti, gi) in t.iter_mut().zip(g.iter()) {
                *ti -= lr * gi;
            }
        }
    }
}

/// Gradients of a scalar loss with respect to every attention parameter;
/// field-for-field mirror of [`AttentionParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGrads {
    pub taps: usize,
    pub w_q: Vec<f64>,
    pub b_q: Vec<f64>,
    pub ln_q_scale: Vec<f64>,
    pub ln_q_shift: Vec<f64>,
    pub q_gate: Vec<f64>,
    pub w_k: Vec<f64>,
    pub b_k: Vec<f64>,
    pub ln_k_scale: Vec<f64>,
    pub ln_k_shift: Vec<f64>,
    pub k_gate: Vec<f64>,
    pub conv_k_weight: Vec<f64>,
    pub conv_k_bias: Vec<f64>,
    pub v_gate: Vec<f64>,
}

impl AttentionGrads {
    pub fn zeros(m: usize) -> Self {
        Self {
            taps: m,
            w_q: vec![0.0; m * m],
            b_q: vec![0.0; m],
            ln_q_scale: vec![0.0; m],
            ln_q_shift: vec![0.0; m],
            q_gate: vec![0.0; m],
            w_k: vec![0.0; m * m],
            b_k: vec![0.0; m],
            ln_k_scale: vec![0.0; m],
            ln_k_shift: vec![0.0; m],
            k_gate: vec![0.0; m],
            conv_k_weight: vec![0.0; m],
            conv_k_bias: vec![0.0; m],
            v_gate: vec![0.0; feature_dim(m)],
        }
    }

    pub fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        vec![
            ("w_q", &self.w_q[..]),
            ("b_q", &self.b_q[..]),
            ("ln_q_scale", &self.ln_q_scale[..]),
            ("ln_q_shift", &self.ln_q_shift[..]),
            ("q_gate", &self.q_gate[..]),
            ("w_k", &self.w_k[..]),
            ("b_k", &self.b_k[..]),
            ("ln_k_scale", &self.ln_k_scale[..]),
            ("ln_k_shift", &self.ln_k_shift[..]),
            ("k_gate", &self.k_gate[..]),
            ("conv_k_weight", &self.conv_k_weight[..]),
            ("conv_k_bias", &self.conv_k_bias[..]),
            ("v_gate", &self.v_gate[..]),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            &mut self.w_q[..],
            &mut self.b_q[..],
            &mut self.ln_q_scale[..],
            &mut self.ln_q_shift[..],
            &mut self.q_gate[..],
            &mut self.w_k[..],
            &mut self.b_k[..],
            &mut self.ln_k_scale[..],
            &mut self.ln_k_shift[..],
            &mut self.k_gate[..],
            &mut self.conv_k_weight[..],
            &mut self.conv_k_bias[..],
            &mut self.v_gate[..],
        ]
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (_, t) in self.tensors() {
            out.extend_from_slice(t);
        }
        out
    }

    pub fn add_assign(&mut self, other: &AttentionGrads) {
        for (t, (_, o)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (ti, oi) in t.iter_mut().zip(o.iter()) {
                *ti += oi;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            for ti in t.iter_mut() {
                *ti *= factor;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(_, t)| t.iter())
            .fold(0.0f64, |acc, v| acc.max(v.abs()))
    }
}

/// Per-(bin, frame) instantaneous statistics packed to real features,
/// `data[(f * T + t) * d_v ..][..d_v]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StatsFeature {
    data: Vec<f64>,
    num_bins: usize,
    num_frames: usize,
    taps: usize,
}

impl StatsFeature {
    pub fn num_bins(&self) -> usize {
        self.num_bins
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn taps(&self) -> usize {
        self.taps
    }

    pub fn feature_dim(&self) -> usize {
        feature_dim(self.taps)
    }

    #[inline]
    pub fn row(&self, bin: usize, frame: usize) -> &[f64] {
        let dv = self.feature_dim();
        let base = (bin * self.num_frames + frame) * dv;
        &self.data[base..base + dv]
    }

    /// All rows of one bin, `T x d_v`.
    pub fn bin_rows(&self, bin: usize) -> &[f64] {
        let dv = self.feature_dim();
        let base = bin * self.num_frames * dv;
        &self.data[base..base + self.num_frames * dv]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Pack one frame: `out = [re(vec M), im(vec M), re(r), im(r)]` with
/// `M[i][j] = conj(x[i]) x[j]` and `r[i] = conj(x[i]) d`.
pub fn pack_row(x: &[Complex64], d: Complex64, out: &mut [f64]) {
    let m = x.len();
    debug_assert_eq!(out.len(), feature_dim(m));
    for i in 0..m {
        let ci = x[i].conj();
        for j in 0..m {
            let v = ci * x[j];
            out[i * m + j] = v.re;
            out[m * m + i * m + j] = v.im;
        }
        let r = ci * d;
        out[2 * m * m + i] = r.re;
        out[2 * m * m + m + i] = r.im;
    }
}

/// Pack already-summed complex statistics into the same layout as
/// [`pack_row`].
pub fn pack_stats_row(mat: &[Complex64], vec: &[Complex64], out: &mut [f64]) {
    let m = vec.len();
    debug_assert_eq!(mat.len(), m * m);
    debug_assert_eq!(out.len(), feature_dim(m));
    for (i, v) in mat.iter().enumerate() {
        out[i] = v.re;
        out[m * m + i] = v.im;
    }
    for (i, v) in vec.iter().enumerate() {
        out[2 * m * m + i] = v.re;
        out[2 * m * m + m + i] = v.im;
    }
}

/// Inverse of [`pack_stats_row`].
pub fn unpack_row(row: &[f64], m: usize, mat: &mut [Complex64], vec: &mut [Complex64]) {
    debug_assert_eq!(row.len(), feature_dim(m));
    for i in 0..m * m {
        mat[i] = Complex64::new(row[i], row[m * m + i]);
    }
    for i in 0..m {
        vec[i] = Complex64::new(row[2 * m * m + i], row[2 * m * m + m + i]);
    }
}

/// Project the matrix part of a packed row onto the Hermitian subspace:
/// `M <- (M + M^H) / 2`. Self-adjoint, so the backward pass reuses it.
pub fn symmetrize_packed(row: &mut [f64], m: usize) {
    for i in 0..m {
        row[m * m + i * m + i] = 0.0; // imaginary diagonal
        for j in i + 1..m {
            let re = 0.5 * (row[i * m + j] + row[j * m + i]);
            row[i * m + j] = re;
            row[j * m + i] = re;
            let im = 0.5 * (row[m * m + i * m + j] - row[m * m + j * m + i]);
            row[m * m + i * m + j] = im;
            row[m * m + j * m + i] = -im;
        }
    }
}

/// Magnitude-compressed far-end features of one bin: `|X[t-k, f]|^0.5`,
/// row-major `T x m`, zero history before frame 0.
pub fn far_features_bin(spec: &Spectrogram, bin: usize, m: usize) -> Vec<f64> {
    let frames = spec.num_frames();
    let mut out = vec![0.0; frames * m];
    for t in 0..frames {
        for k in 0..=t.min(m - 1) {
            out[t * m + k] = spec.at(t - k, bin).norm().sqrt();
        }
    }
    out
}

/// Magnitude-compressed microphone feature of one bin: `|D[t, f]|^0.5`.
pub fn mic_features_bin(spec: &Spectrogram, bin: usize) -> Vec<f64> {
    (0..spec.num_frames())
        .map(|t| spec.at(t, bin).norm().sqrt())
        .collect()
}

/// Pack the instantaneous statistics of every (bin, frame). No temporal
/// summation happens here; the window sum runs after attention weighting.
pub fn pack_stats(x_unf: &crate::stft::UnfoldedFarEnd, d: &Spectrogram) -> Result<StatsFeature> {
    if x_unf.num_bins() != d.num_bins() || x_unf.num_frames() != d.num_frames() {
        return Err(Error::ShapeMismatch(format!(
            "unfolded far end is {} bins x {} frames, microphone is {} x {}",
            x_unf.num_bins(),
            x_unf.num_frames(),
            d.num_bins(),
            d.num_frames()
        )));
    }
    let m = x_unf.taps();
    let dv = feature_dim(m);
    let bins = d.num_bins();
    let frames = d.num_frames();
    let mut data = vec![0.0; bins * frames * dv];
    par::for_each_chunk_mut(&mut data, frames * dv, |f, chunk| {
        for t in 0..frames {
            pack_row(
                x_unf.tap_vector(f, t),
                d.at(t, f),
                &mut chunk[t * dv..(t + 1) * dv],
            );
        }
    });
    Ok(StatsFeature {
        data,
        num_bins: bins,
        num_frames: frames,
        taps: m,
    })
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Layer norm over the feature axis; returns the normalized vector and the
/// inverse standard deviation.
fn layer_norm(a: &[f64], normalized: &mut [f64]) -> f64 {
    let n = a.len() as f64;
    let mean = a.iter().sum::<f64>() / n;
    let var = a.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + LN_EPS).sqrt();
    for (o, v) in normalized.iter_mut().zip(a.iter()) {
        *o = (v - mean) * inv_std;
    }
    inv_std
}

/// Smallest layer-norm input variance over both paths and all frames.
/// Near-zero values mean the normalization sits on the `LN_EPS` floor where
/// derivatives are steep; the gradient checker rejects such instances.
pub(crate) fn min_layer_norm_variance(
    params: &AttentionParams,
    q_feat: &[f64],
    k_feat: &[f64],
    frames: usize,
) -> f64 {
    let m = params.taps;
    let mut min_var = f64::INFINITY;
    let mut a = vec![0.0; m];
    for t in 0..frames {
        let qf = &q_feat[t * m..(t + 1) * m];
        for i in 0..m {
            let row = &params.w_q[i * m..(i + 1) * m];
            a[i] = params.b_q[i] + row.iter().zip(qf).map(|(w, x)| w * x).sum::<f64>();
        }
        min_var = min_var.min(variance(&a));
        let kf = k_feat[t];
        for i in 0..m {
            let mut acc = params.b_k[i];
            for j in 0..m {
                acc += params.w_k[i * m + j] * (params.conv_k_weight[j] * kf + params.conv_k_bias[j]);
            }
            a[i] = acc;
        }
        min_var = min_var.min(variance(&a));
    }
    min_var
}

fn variance(a: &[f64]) -> f64 {
    let n = a.len() as f64;
    let mean = a.iter().sum::<f64>() / n;
    a.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

/// Intermediate activations of one bin, kept for the backward pass.
pub(crate) struct BinCache {
    /// Normalized (pre scale/shift) Q activations, `T x m`.
    n_q: Vec<f64>,
    inv_std_q: Vec<f64>,
    q1: Vec<f64>,
    /// Conv output feeding the K linear layer, `T x m`.
    h_k: Vec<f64>,
    n_k: Vec<f64>,
    inv_std_k: Vec<f64>,
    k1: Vec<f64>,
    v1: Vec<f64>,
    /// Softmax rows, dense `T x T` (zero above the mask).
    probs: Vec<f64>,
}

impl BinCache {
    fn new(frames: usize, m: usize, dv: usize) -> Self {
        Self {
            n_q: vec![0.0; frames * m],
            inv_std_q: vec![0.0; frames],
            q1: vec![0.0; frames * m],
            h_k: vec![0.0; frames * m],
            n_k: vec![0.0; frames * m],
            inv_std_k: vec![0.0; frames],
            k1: vec![0.0; frames * m],
            v1: vec![0.0; frames * dv],
            probs: vec![0.0; frames * frames],
        }
    }
}

/// Run the attention stage for one bin and return the window-summed,
/// Hermitian-symmetrized packed statistics, `T x d_v`.
///
/// When `cache` is provided the intermediates needed by `backward_bin` are
/// recorded (including the dense softmax matrix, so only use it at training
/// scale).
#[allow(clippy::too_many_arguments)]
pub(crate) fn forward_bin_impl(
    params: &AttentionParams,
    q_feat: &[f64],
    k_feat: &[f64],
    v_feat: &[f64],
    frames: usize,
    window_frames: usize,
    mask: MaskMode,
    mut cache: Option<&mut BinCache>,
) -> Vec<f64> {
    let m = params.taps;
    let dv = feature_dim(m);
    let scale = 1.0 / (m as f64).sqrt();

    let sig_q: Vec<f64> = params.q_gate.iter().map(|&g| sigmoid(g)).collect();
    let sig_k: Vec<f64> = params.k_gate.iter().map(|&g| sigmoid(g)).collect();
    let sig_v: Vec<f64> = params.v_gate.iter().map(|&g| sigmoid(g)).collect();

    // Projections, layer norms and gates for every frame.
    let mut q1 = vec![0.0; frames * m];
    let mut k1 = vec![0.0; frames * m];
    let mut v1 = vec![0.0; frames * dv];
    let mut a = vec![0.0; m];
    let mut h = vec![0.0; m];
    let mut n = vec![0.0; m];
    for t in 0..frames {
        let qf = &q_feat[t * m..(t + 1) * m];
        for i in 0..m {
            let row = &params.w_q[i * m..(i + 1) * m];
            a[i] = params.b_q[i] + row.iter().zip(qf).map(|(w, x)| w * x).sum::<f64>();
        }
        let inv_std = layer_norm(&a, &mut n);
        for i in 0..m {
            q1[t * m + i] =
                (params.ln_q_scale[i] * n[i] + params.ln_q_shift[i]) * sig_q[i];
        }
        if let Some(c) = cache.as_deref_mut() {
            c.n_q[t * m..(t + 1) * m].copy_from_slice(&n);
            c.inv_std_q[t] = inv_std;
        }

        let kf = k_feat[t];
        for i in 0..m {
            h[i] = params.conv_k_weight[i] * kf + params.conv_k_bias[i];
        }
        if let Some(c) = cache.as_deref_mut() {
            c.h_k[t * m..(t + 1) * m].copy_from_slice(&h);
        }
        for i in 0..m {
            let row = &params.w_k[i * m..(i + 1) * m];
            a[i] = params.b_k[i] + row.iter().zip(&h).map(|(w, x)| w * x).sum::<f64>();
        }
        let inv_std = layer_norm(&a, &mut n);
        for i in 0..m {
            k1[t * m + i] =
                (params.ln_k_scale[i] * n[i] + params.ln_k_shift[i]) * sig_k[i];
        }
        if let Some(c) = cache.as_deref_mut() {
            c.n_k[t * m..(t + 1) * m].copy_from_slice(&n);
            c.inv_std_k[t] = inv_std;
        }

        for c_idx in 0..dv {
            v1[t * dv + c_idx] = v_feat[t * dv + c_idx] * sig_v[c_idx];
        }
    }
    if let Some(c) = cache.as_deref_mut() {
        c.q1.copy_from_slice(&q1);
        c.k1.copy_from_slice(&k1);
        c.v1.copy_from_slice(&v1);
    }

    // Attention mixing, one causal row at a time.
    let mut mixed = vec![0.0; frames * dv];
    let mut scores = vec![0.0; frames];
    for t in 0..frames {
        let lo = match mask {
            MaskMode::Causal => 0,
            MaskMode::SelfOnly => t,
        };
        let q_row = &q1[t * m..(t + 1) * m];
        let mut max_score = f64::NEG_INFINITY;
        for tau in lo..=t {
            let k_row = &k1[tau * m..(tau + 1) * m];
            let s = scale * q_row.iter().zip(k_row).map(|(q, k)| q * k).sum::<f64>();
            scores[tau] = s;
            max_score = max_score.max(s);
        }
        let mut denom = 0.0;
        for tau in lo..=t {
            scores[tau] = (scores[tau] - max_score).exp();
            denom += scores[tau];
        }
        let out = &mut mixed[t * dv..(t + 1) * dv];
        for tau in lo..=t {
            let p = scores[tau] / denom;
            if let Some(c) = cache.as_deref_mut() {
                c.probs[t * frames + tau] = p;
            }
            let v_row = &v1[tau * dv..(tau + 1) * dv];
            for (o, v) in out.iter_mut().zip(v_row) {
                *o += p * v;
            }
        }
    }

    // Sliding-window sum over the mixed rows, then Hermitian projection.
    let mut out = vec![0.0; frames * dv];
    let mut running = vec![0.0; dv];
    for t in 0..frames {
        if t >= window_frames {
            let old = &mixed[(t - window_frames) * dv..(t - window_frames + 1) * dv];
            for (r, o) in running.iter_mut().zip(old) {
                *r -= o;
            }
        }
        let cur = &mixed[t * dv..(t + 1) * dv];
        for (r, c_val) in running.iter_mut().zip(cur) {
            *r += c_val;
        }
        let row = &mut out[t * dv..(t + 1) * dv];
        row.copy_from_slice(&running);
        symmetrize_packed(row, m);
    }
    out
}

/// Forward pass for one bin without caching (pipeline use).
pub(crate) fn forward_bin(
    params: &AttentionParams,
    q_feat: &[f64],
    k_feat: &[f64],
    v_feat: &[f64],
    frames: usize,
    window_frames: usize,
    mask: MaskMode,
) -> Vec<f64> {
    forward_bin_impl(params, q_feat, k_feat, v_feat, frames, window_frames, mask, None)
}

/// Backward pass for one bin: accumulates parameter gradients for the given
/// upstream gradient over the symmetrized window-summed output.
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward_bin(
    params: &AttentionParams,
    q_feat: &[f64],
    k_feat: &[f64],
    v_feat: &[f64],
    frames: usize,
    window_frames: usize,
    mask: MaskMode,
    upstream: &[f64],
    grads: &mut AttentionGrads,
) {
    let m = params.taps;
    let dv = feature_dim(m);
    let scale = 1.0 / (m as f64).sqrt();
    let mut cache = BinCache::new(frames, m, dv);
    forward_bin_impl(
        params,
        q_feat,
        k_feat,
        v_feat,
        frames,
        window_frames,
        mask,
        Some(&mut cache),
    );

    let sig_q: Vec<f64> = params.q_gate.iter().map(|&g| sigmoid(g)).collect();
    let sig_k: Vec<f64> = params.k_gate.iter().map(|&g| sigmoid(g)).collect();
    let sig_v: Vec<f64> = params.v_gate.iter().map(|&g| sigmoid(g)).collect();

    // Symmetrization is self-adjoint: push the upstream gradient through it,
    // then through the window sum (each mixed row feeds the next L outputs).
    let mut d_sym = upstream.to_vec();
    for t in 0..frames {
        symmetrize_packed(&mut d_sym[t * dv..(t + 1) * dv], m);
    }
    let mut d_mixed = vec![0.0; frames * dv];
    let mut running = vec![0.0; dv];
    for tau in (0..frames).rev() {
        let hi = (tau + window_frames).min(frames);
        // running currently holds sum of d_sym rows (tau+1..hi_prev); rebuild
        // bounds: add row tau, drop rows >= hi.
        let add = &d_sym[tau * dv..(tau + 1) * dv];
        for (r, a) in running.iter_mut().zip(add) {
            *r += a;
        }
        if hi < frames {
            let drop = &d_sym[hi * dv..(hi + 1) * dv];
            for (r, d) in running.iter_mut().zip(drop) {
                *r -= d;
            }
        }
        d_mixed[tau * dv..(tau + 1) * dv].copy_from_slice(&running);
    }

    // Attention backward.
    let mut d_q1 = vec![0.0; frames * m];
    let mut d_k1 = vec![0.0; frames * m];
    let mut d_v1 = vec![0.0; frames * dv];
    let mut d_p = vec![0.0; frames];
    for t in 0..frames {
        let lo = match mask {
            MaskMode::Causal => 0,
            MaskMode::SelfOnly => t,
        };
        let da = &d_mixed[t * dv..(t + 1) * dv];
        let mut inner = 0.0;
        for tau in lo..=t {
            let p = cache.probs[t * frames + tau];
            let v_row = &cache.v1[tau * dv..(tau + 1) * dv];
            let dp = da.iter().zip(v_row).map(|(a, v)| a * v).sum::<f64>();
            d_p[tau] = dp;
            inner += p * dp;
            let dv1_row = &mut d_v1[tau * dv..(tau + 1) * dv];
            for (o, a_val) in dv1_row.iter_mut().zip(da) {
                *o += p * a_val;
            }
        }
        let q_row = &cache.q1[t * m..(t + 1) * m];
        for tau in lo..=t {
            let p = cache.probs[t * frames + tau];
            let ds = p * (d_p[tau] - inner) * scale;
            let k_row = &cache.k1[tau * m..(tau + 1) * m];
            for i in 0..m {
                d_q1[t * m + i] += ds * k_row[i];
                d_k1[tau * m + i] += ds * q_row[i];
            }
        }
    }

    // V gate.
    for t in 0..frames {
        for c_idx in 0..dv {
            let dv1 = d_v1[t * dv + c_idx];
            grads.v_gate[c_idx] += dv1
                * v_feat[t * dv + c_idx]
                * sig_v[c_idx]
                * (1.0 - sig_v[c_idx]);
        }
    }

    // Q path: gate -> layer norm -> linear.
    let mut d_u = vec![0.0; m];
    let mut d_n = vec![0.0; m];
    let mut d_a = vec![0.0; m];
    for t in 0..frames {
        let n_row = &cache.n_q[t * m..(t + 1) * m];
        for i in 0..m {
            let dq1 = d_q1[t * m + i];
            let u = params.ln_q_scale[i] * n_row[i] + params.ln_q_shift[i];
            grads.q_gate[i] += dq1 * u * sig_q[i] * (1.0 - sig_q[i]);
            d_u[i] = dq1 * sig_q[i];
            grads.ln_q_scale[i] += d_u[i] * n_row[i];
            grads.ln_q_shift[i] += d_u[i];
            d_n[i] = d_u[i] * params.ln_q_scale[i];
        }
        let mean_dn = d_n.iter().sum::<f64>() / m as f64;
        let mean_dn_n = d_n.iter().zip(n_row).map(|(d, n)| d * n).sum::<f64>() / m as f64;
        let inv_std = cache.inv_std_q[t];
        for i in 0..m {
            d_a[i] = inv_std * (d_n[i] - mean_dn - n_row[i] * mean_dn_n);
        }
        let qf = &q_feat[t * m..(t + 1) * m];
        for i in 0..m {
            grads.b_q[i] += d_a[i];
            let w_row = &mut grads.w_q[i * m..(i + 1) * m];
            for (w, x) in w_row.iter_mut().zip(qf) {
                *w += d_a[i] * x;
            }
        }
    }

    // K path: gate -> layer norm -> linear -> conv.
    for t in 0..frames {
        let n_row = &cache.n_k[t * m..(t + 1) * m];
        for i in 0..m {
            let dk1 = d_k1[t * m + i];
            let u = params.ln_k_scale[i] * n_row[i] + params.ln_k_shift[i];
            grads.k_gate[i] += dk1 * u * sig_k[i] * (1.0 - sig_k[i]);
            d_u[i] = dk1 * sig_k[i];
            grads.ln_k_scale[i] += d_u[i] * n_row[i];
            grads.ln_k_shift[i] += d_u[i];
            d_n[i] = d_u[i] * params.ln_k_scale[i];
        }
        let mean_dn = d_n.iter().sum::<f64>() / m as f64;
        let mean_dn_n = d_n.iter().zip(n_row).map(|(d, n)| d * n).sum::<f64>() / m as f64;
        let inv_std = cache.inv_std_k[t];
        for i in 0..m {
            d_a[i] = inv_std * (d_n[i] - mean_dn - n_row[i] * mean_dn_n);
        }
        let h_row = &cache.h_k[t * m..(t + 1) * m];
        // d_h = W_k^T d_a
        for i in 0..m {
            grads.b_k[i] += d_a[i];
            let w_row = &mut grads.w_k[i * m..(i + 1) * m];
            for (w, h) in w_row.iter_mut().zip(h_row) {
                *w += d_a[i] * h;
            }
        }
        let kf = k_feat[t];
        for j in 0..m {
            let mut dh = 0.0;
            for i in 0..m {
                dh += params.w_k[i * m + j] * d_a[i];
            }
            grads.conv_k_weight[j] += dh * kf;
            grads.conv_k_bias[j] += dh;
        }
    }
}

fn check_attention_shapes(
    params: &AttentionParams,
    far: &Spectrogram,
    mic: &Spectrogram,
    v_feat: &StatsFeature,
) -> Result<()> {
    params.validate()?;
    if far.num_bins() != mic.num_bins() || far.num_frames() != mic.num_frames() {
        return Err(Error::ShapeMismatch(
            "far-end and microphone spectrograms disagree in shape".into(),
        ));
    }
    if v_feat.num_bins() != far.num_bins()
        || v_feat.num_frames() != far.num_frames()
        || v_feat.taps() != params.taps
    {
        return Err(Error::ShapeMismatch(
            "packed statistics do not match the spectrograms or tap depth".into(),
        ));
    }
    Ok(())
}

/// Attention-enhanced Wiener statistics with the standard causal mask.
pub fn attention_forward(
    params: &AttentionParams,
    far: &Spectrogram,
    mic: &Spectrogram,
    v_feat: &StatsFeature,
    window_frames: usize,
) -> Result<WienerStats> {
    attention_forward_masked(params, far, mic, v_feat, window_frames, MaskMode::Causal)
}

/// Attention-enhanced Wiener statistics with an explicit mask choice.
pub fn attention_forward_masked(
    params: &AttentionParams,
    far: &Spectrogram,
    mic: &Spectrogram,
    v_feat: &StatsFeature,
    window_frames: usize,
    mask: MaskMode,
) -> Result<WienerStats> {
    check_attention_shapes(params, far, mic, v_feat)?;
    if window_frames == 0 {
        return Err(Error::Config("window_frames must be at least 1".into()));
    }
    let m = params.taps;
    let dv = feature_dim(m);
    let bins = far.num_bins();
    let frames = far.num_frames();

    let columns: Vec<Vec<f64>> = par::map_indexed(bins, |f| {
        let q_feat = far_features_bin(far, f, m);
        let k_feat = mic_features_bin(mic, f);
        forward_bin(
            params,
            &q_feat,
            &k_feat,
            v_feat.bin_rows(f),
            frames,
            window_frames,
            mask,
        )
    });

    let mut mat = vec![Complex64::default(); bins * frames * m * m];
    let mut vect = vec![Complex64::default(); bins * frames * m];
    for (f, rows) in columns.into_iter().enumerate() {
        for t in 0..frames {
            let mat_out =
                &mut mat[(f * frames + t) * m * m..(f * frames + t + 1) * m * m];
            let vec_out = &mut vect[(f * frames + t) * m..(f * frames + t + 1) * m];
            // unpack_row needs disjoint borrows; do it manually on slices.
            let row = &rows[t * dv..(t + 1) * dv];
            for i in 0..m * m {
                mat_out[i] = Complex64::new(row[i], row[m * m + i]);
            }
            for i in 0..m {
                vec_out[i] = Complex64::new(row[2 * m * m + i], row[2 * m * m + m + i]);
            }
        }
    }
    WienerStats::from_parts(mat, vect, bins, frames, m, window_frames)
}

/// Gradients of a scalar loss with respect to every parameter, given the
/// upstream gradient over the enhanced statistics (a [`WienerStats`]-shaped
/// container whose re/im parts hold the partials).
pub fn attention_backward(
    params: &AttentionParams,
    far: &Spectrogram,
    mic: &Spectrogram,
    v_feat: &StatsFeature,
    window_frames: usize,
    upstream: &WienerStats,
) -> Result<AttentionGrads> {
    check_attention_shapes(params, far, mic, v_feat)?;
    let m = params.taps;
    let dv = feature_dim(m);
    let bins = far.num_bins();
    let frames = far.num_frames();
    if upstream.num_bins() != bins || upstream.num_frames() != frames || upstream.taps() != m {
        return Err(Error::ShapeMismatch(
            "upstream gradient does not match the forward shapes".into(),
        ));
    }

    let partials: Vec<AttentionGrads> = par::map_indexed(bins, |f| {
        let q_feat = far_features_bin(far, f, m);
        let k_feat = mic_features_bin(mic, f);
        let mut up = vec![0.0; frames * dv];
        for t in 0..frames {
            pack_stats_row(
                upstream.mat_at(f, t),
                upstream.vec_at(f, t),
                &mut up[t * dv..(t + 1) * dv],
            );
        }
        let mut g = AttentionGrads::zeros(m);
        backward_bin(
            params,
            &q_feat,
            &k_feat,
            v_feat.bin_rows(f),
            frames,
            window_frames,
            MaskMode::Causal,
            &up,
            &mut g,
        );
        g
    });

    let mut total = AttentionGrads::zeros(m);
    for g in &partials {
        total.add_assign(g);
    }
    Ok(total)
}

// Checkpoint file format: structured JSON with a version tag, the tap depth,
// the init seed and one named array per tensor.

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    taps: usize,
    seed: u64,
    tensors: CheckpointTensors,
}

#[derive(Serialize, Deserialize)]
struct CheckpointTensors {
    w_q: Vec<f64>,
    b_q: Vec<f64>,
    ln_q_scale: Vec<f64>,
    ln_q_shift: Vec<f64>,
    q_gate: Vec<f64>,
    w_k: Vec<f64>,
    b_k: Vec<f64>,
    ln_k_scale: Vec<f64>,
    ln_k_shift: Vec<f64>,
    k_gate: Vec<f64>,
    conv_k_weight: Vec<f64>,
    conv_k_bias: Vec<f64>,
    v_gate: Vec<f64>,
}

/// Serialize parameters to the JSON checkpoint format.
pub fn checkpoint_to_string(params: &AttentionParams) -> Result<String> {
    params.validate()?;
    let file = CheckpointFile {
        format_version: CHECKPOINT_VERSION,
        taps: params.taps,
        seed: params.seed,
        tensors: CheckpointTensors {
            w_q: params.w_q.clone(),
            b_q: params.b_q.clone(),
            ln_q_scale: params.ln_q_scale.clone(),
            ln_q_shift: params.ln_q_shift.clone(),
            q_gate: params.q_gate.clone(),
            w_k: params.w_k.clone(),
            b_k: params.b_k.clone(),
            ln_k_scale: params.ln_k_scale.clone(),
            ln_k_shift: params.ln_k_shift.clone(),
            k_gate: params.k_gate.clone(),
            conv_k_weight: params.conv_k_weight.clone(),
            conv_k_bias: params.conv_k_bias.clone(),
            v_gate: params.v_gate.clone(),
        },
    };
    serde_json::to_string_pretty(&file)
        .map_err(|e| Error::Data(format!("checkpoint serialization failed: {e}")))
}

/// Parse a JSON checkpoint; errors name the offending tensor.
pub fn checkpoint_from_str(text: &str) -> Result<AttentionParams> {
    let file: CheckpointFile = serde_json::from_str(text)
        .map_err(|e| Error::Data(format!("checkpoint parse error: {e}")))?;
    if file.format_version != CHECKPOINT_VERSION {
        return Err(Error::Config(format!(
            "unsupported checkpoint version {} (expected {})",
            file.format_version, CHECKPOINT_VERSION
        )));
    }
    let t = file.tensors;
    let params = AttentionParams {
        taps: file.taps,
        seed: file.seed,
        w_q: t.w_q,
        b_q: t.b_q,
        ln_q_scale: t.ln_q_scale,
        ln_q_shift: t.ln_q_shift,
        q_gate: t.q_gate,
        w_k: t.w_k,
        b_k: t.b_k,
        ln_k_scale: t.ln_k_scale,
        ln_k_shift: t.ln_k_shift,
        k_gate: t.k_gate,
        conv_k_weight: t.conv_k_weight,
        conv_k_bias: t.conv_k_bias,
        v_gate: t.v_gate,
    };
    params.validate()?;
    Ok(params)
}

/// Write a checkpoint file.
pub fn save_checkpoint(params: &AttentionParams, path: &std::path::Path) -> Result<()> {
    let text = checkpoint_to_string(params)?;
    std::fs::write(path, text)
        .map_err(|e| Error::Data(format!("cannot write checkpoint {}: {e}", path.display())))
}

/// Read a checkpoint file.
pub fn load_checkpoint(path: &std::path::Path) -> Result<AttentionParams> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read checkpoint {}: {e}", path.display())))?;
    checkpoint_from_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stft;
    use crate::stft::{StftConfig, WindowKind};
    use crate::wiener;

    /// 3-bin configuration for attention-level tests.
    fn tiny_cfg() -> StftConfig {
        StftConfig {
            sample_rate: 16_000,
            window_len: 4,
            hop: 2,
            window: WindowKind::Hamming,
            fft_size: 4,
        }
    }

    fn random_complex(rng: &mut ChaCha8Rng) -> Complex64 {
        Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
    }

    fn random_spec(frames: usize, seed: u64) -> Spectrogram {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<Complex64> = (0..frames * cfg.num_bins())
            .map(|_| random_complex(&mut rng))
            .collect();
        Spectrogram::from_parts(data, frames, frames * cfg.hop, cfg).unwrap()
    }

    fn jittered_params(m: usize, seed: u64) -> AttentionParams {
        let mut params = AttentionParams::init(m, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
        let mut flat = params.flatten();
        for v in flat.iter_mut() {
            *v += rng.random_range(-0.4..0.4);
        }
        params.unflatten(&flat);
        params
    }

    #[test]
    fn pack_row_m1_layout() {
        let mut out = [0.0; 4];
        pack_row(&[Complex64::new(1.0, 0.0)], Complex64::new(2.0, 0.0), &mut out);
        assert_eq!(out, [1.0, 0.0, 2.0, 0.0]);
    }

    #[test]
    fn pack_zero_inputs_gives_zero_features() {
        let far = Spectrogram::from_parts(
            vec![Complex64::default(); 4 * 3],
            4,
            8,
            tiny_cfg(),
        )
        .unwrap();
        let x = stft::unfold(&far, 2).unwrap();
        let v = pack_stats(&x, &far).unwrap();
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn pack_unpack_roundtrip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let m = 3;
        let x: Vec<Complex64> = (0..m).map(|_| random_complex(&mut rng)).collect();
        let d = random_complex(&mut rng);
        let mut row = vec![0.0; feature_dim(m)];
        pack_row(&x, d, &mut row);
        let mut mat = vec![Complex64::default(); m * m];
        let mut vect = vec![Complex64::default(); m];
        unpack_row(&row, m, &mut mat, &mut vect);
        for i in 0..m {
            for j in 0..m {
                assert_eq!(mat[i * m + j], x[i].conj() * x[j]);
            }
            assert_eq!(vect[i], x[i].conj() * d);
        }
        let mut row2 = vec![0.0; feature_dim(m)];
        pack_stats_row(&mat, &vect, &mut row2);
        assert_eq!(row, row2);
    }

    /// Straight-line scalar reimplementation of the whole gated-attention
    /// stage, kept deliberately independent of the production kernels.
    fn oracle_enhanced_stats(
        p: &AttentionParams,
        far: &Spectrogram,
        mic: &Spectrogram,
        window: usize,
        bin: usize,
    ) -> (Vec<Vec<Complex64>>, Vec<Vec<Complex64>>) {
        let m = p.taps;
        let dv = feature_dim(m);
        let frames = far.num_frames();
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());

        // Feature extraction.
        let mut q_in = vec![vec![0.0; m]; frames];
        let mut k_in = vec![0.0; frames];
        let mut v_in = vec![vec![0.0; dv]; frames];
        for t in 0..frames {
            for k in 0..m {
                if t >= k {
                    q_in[t][k] = far.at(t - k, bin).norm().sqrt();
                }
            }
            k_in[t] = mic.at(t, bin).norm().sqrt();
            let taps: Vec<Complex64> = (0..m)
                .map(|k| if t >= k { far.at(t - k, bin) } else { Complex64::default() })
                .collect();
            for i in 0..m {
                for j in 0..m {
                    let v = taps[i].conj() * taps[j];
                    v_in[t][i * m + j] = v.re;
                    v_in[t][m * m + i * m + j] = v.im;
                }
                let r = taps[i].conj() * mic.at(t, bin);
                v_in[t][2 * m * m + i] = r.re;
                v_in[t][2 * m * m + m + i] = r.im;
            }
        }

        // Q path.
        let mut q1 = vec![vec![0.0; m]; frames];
        for t in 0..frames {
            let mut lin = vec![0.0; m];
            for i in 0..m {
                lin[i] = p.b_q[i];
                for j in 0..m {
                    lin[i] += p.w_q[i * m + j] * q_in[t][j];
                }
            }
            let mean: f64 = lin.iter().sum::<f64>() / m as f64;
            let var: f64 = lin.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            for i in 0..m {
                let n = (lin[i] - mean) / (var + 1e-5).sqrt();
                q1[t][i] = (p.ln_q_scale[i] * n + p.ln_q_shift[i]) * sig(p.q_gate[i]);
            }
        }
        // K path.
        let mut k1 = vec![vec![0.0; m]; frames];
        for t in 0..frames {
            let mut lin = vec![0.0; m];
            for i in 0..m {
                lin[i] = p.b_k[i];
                for j in 0..m {
                    lin[i] += p.w_k[i * m + j]
                        * (p.conv_k_weight[j] * k_in[t] + p.conv_k_bias[j]);
                }
            }
            let mean: f64 = lin.iter().sum::<f64>() / m as f64;
            let var: f64 = lin.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            for i in 0..m {
                let n = (lin[i] - mean) / (var + 1e-5).sqrt();
                k1[t][i] = (p.ln_k_scale[i] * n + p.ln_k_shift[i]) * sig(p.k_gate[i]);
            }
        }
        // V gating.
        let mut v1 = vec![vec![0.0; dv]; frames];
        for t in 0..frames {
            for c in 0..dv {
                v1[t][c] = v_in[t][c] * sig(p.v_gate[c]);
            }
        }
        // Causal softmax attention, plain exponentials.
        let mut mixed = vec![vec![0.0; dv]; frames];
        for t in 0..frames {
            let mut weights = vec![0.0; t + 1];
            let mut denom = 0.0;
            for tau in 0..=t {
                let mut score = 0.0;
                for i in 0..m {
                    score += q1[t][i] * k1[tau][i];
                }
                weights[tau] = (score / (m as f64).sqrt()).exp();
                denom += weights[tau];
            }
            for tau in 0..=t {
                for c in 0..dv {
                    mixed[t][c] += weights[tau] / denom * v1[tau][c];
                }
            }
        }
        // Window sum, unpack, Hermitian symmetrization on the complex side.
        let mut mats = Vec::with_capacity(frames);
        let mut vecs = Vec::with_capacity(frames);
        for t in 0..frames {
            let lo = t.saturating_sub(window - 1);
            let mut g = vec![0.0; dv];
            for row in mixed.iter().take(t + 1).skip(lo) {
                for c in 0..dv {
                    g[c] += row[c];
                }
            }
            let mut mat = vec![Complex64::default(); m * m];
            let mut vect = vec![Complex64::default(); m];
            for i in 0..m * m {
                mat[i] = Complex64::new(g[i], g[m * m + i]);
            }
            for i in 0..m {
                vect[i] = Complex64::new(g[2 * m * m + i], g[2 * m * m + m + i]);
            }
            let mut sym = vec![Complex64::default(); m * m];
            for i in 0..m {
                for j in 0..m {
                    sym[i * m + j] = 0.5 * (mat[i * m + j] + mat[j * m + i].conj());
                }
            }
            mats.push(sym);
            vecs.push(vect);
        }
        (mats, vecs)
    }

    #[test]
    fn forward_matches_scalar_loop_oracle() {
        let frames = 4;
        let far = random_spec(frames, 41);
        let mic = random_spec(frames, 42);
        let params = jittered_params(2, 43);
        let x = stft::unfold(&far, 2).unwrap();
        let v = pack_stats(&x, &mic).unwrap();
        let window = 3;
        let stats = attention_forward(&params, &far, &mic, &v, window).unwrap();

        for f in 0..far.num_bins() {
            let (mats, vecs) = oracle_enhanced_stats(&params, &far, &mic, window, f);
            for t in 0..frames {
                for (got, want) in stats.mat_at(f, t).iter().zip(&mats[t]) {
                    assert!((got - want).norm() < 1e-10, "mat ({f},{t}): {got} vs {want}");
                }
                for (got, want) in stats.vec_at(f, t).iter().zip(&vecs[t]) {
                    assert!((got - want).norm() < 1e-10, "vec ({f},{t}): {got} vs {want}");
                }
            }
        }
    }

    #[test]
    fn closed_v_gate_zeroes_stats_and_filter() {
        let frames = 5;
        let far = random_spec(frames, 44);
        let mic = random_spec(frames, 45);
        let mut params = jittered_params(2, 46);
        for g in params.v_gate.iter_mut() {
            *g = -800.0; // sigmoid underflows to exactly 0
        }
        let x = stft::unfold(&far, 2).unwrap();
        let v = pack_stats(&x, &mic).unwrap();
        let stats = attention_forward(&params, &far, &mic, &v, 3).unwrap();
        assert!(stats.mat_at(0, 0).iter().all(|z| z.norm() == 0.0));
        let h = wiener::solve(&stats, 1e-3).unwrap();
        assert!(h.data().iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn single_frame_softmax_is_identity() {
        let far = random_spec(1, 47);
        let mic = random_spec(1, 48);
        let mut params = jittered_params(2, 49);
        // A uniform V gate keeps the packed row Hermitian, so the
        // symmetrization is a no-op and the output is exactly the gated
        // instantaneous statistics.
        let gate = 0.3;
        for g in params.v_gate.iter_mut() {
            *g = gate;
        }
        let x = stft::unfold(&far, 2).unwrap();
        let v = pack_stats(&x, &mic).unwrap();
        let stats = attention_forward(&params, &far, &mic, &v, 4).unwrap();
        let sig = 1.0 / (1.0 + (-gate as f64).exp());
        for f in 0..far.num_bins() {
            let taps = x.tap_vector(f, 0);
            for i in 0..2 {
                for j in 0..2 {
                    let want = taps[i].conj() * taps[j] * sig;
                    let got = stats.mat_at(f, 0)[i * 2 + j];
                    assert!((got - want).norm() < 1e-12);
                }
                let want = taps[i].conj() * mic.at(0, f) * sig;
                assert!((stats.vec_at(f, 0)[i] - want).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_rows_are_normalized() {
        // With identical V rows the attention mixture must reproduce the row
        // exactly; any normalization defect would scale it.
        let m = 2;
        let dv = feature_dim(m);
        let frames = 6;
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let params = jittered_params(m, 51);
        let q_feat: Vec<f64> = (0..frames * m).map(|_| rng.random_range(0.0..1.0)).collect();
        let k_feat: Vec<f64> = (0..frames).map(|_| rng.random_range(0.0..1.0)).collect();
        let row: Vec<f64> = (0..dv).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v_feat: Vec<f64> = (0..frames).flat_map(|_| row.clone()).collect();

        let window = 1; // isolate single attention outputs
        let out = forward_bin(&params, &q_feat, &k_feat, &v_feat, frames, window, MaskMode::Causal);
        let sig_v: Vec<f64> = params.v_gate.iter().map(|&g| 1.0 / (1.0 + (-g).exp())).collect();
        let mut expected: Vec<f64> = row.iter().zip(&sig_v).map(|(v, s)| v * s).collect();
        symmetrize_packed(&mut expected, m);
        for t in 0..frames {
            for c in 0..dv {
                assert!(
                    (out[t * dv + c] - expected[c]).abs() < 1e-8,
                    "frame {t} feature {c}"
                );
            }
        }
    }

    #[test]
    fn attention_is_causal_to_the_bit() {
        let m = 2;
        let dv = feature_dim(m);
        let frames = 7;
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let params = jittered_params(m, 53);
        let q_feat: Vec<f64> = (0..frames * m).map(|_| rng.random_range(0.0..1.0)).collect();
        let k_feat: Vec<f64> = (0..frames).map(|_| rng.random_range(0.0..1.0)).collect();
        let v_feat: Vec<f64> = (0..frames * dv).map(|_| rng.random_range(-1.0..1.0)).collect();
        let out_a = forward_bin(&params, &q_feat, &k_feat, &v_feat, frames, 3, MaskMode::Causal);

        let t_cut = 3;
        let mut q_b = q_feat.clone();
        let mut k_b = k_feat.clone();
        let mut v_b = v_feat.clone();
        for v in q_b.iter_mut().skip((t_cut + 1) * m) {
            *v += 1.0;
        }
        for v in k_b.iter_mut().skip(t_cut + 1) {
            *v *= 2.0;
        }
        for v in v_b.iter_mut().skip((t_cut + 1) * dv) {
            *v = -*v;
        }
        let out_b = forward_bin(&params, &q_b, &k_b, &v_b, frames, 3, MaskMode::Causal);
        assert_eq!(&out_a[..(t_cut + 1) * dv], &out_b[..(t_cut + 1) * dv]);
    }

    #[test]
    fn v_gate_increase_grows_feature_magnitude() {
        let m = 2;
        let dv = feature_dim(m);
        let frames = 5;
        let mut rng = ChaCha8Rng::seed_from_u64(54);
        let params = jittered_params(m, 55);
        let q_feat: Vec<f64> = (0..frames * m).map(|_| rng.random_range(0.0..1.0)).collect();
        let k_feat: Vec<f64> = (0..frames).map(|_| rng.random_range(0.0..1.0)).collect();
        let v_feat: Vec<f64> = (0..frames * dv).map(|_| rng.random_range(-1.0..1.0)).collect();

        // Window 1 with self-only masking isolates single gated rows. The
        // probed column is a matrix diagonal entry, which the Hermitian
        // projection leaves untouched.
        let c_idx = m * m - 1; // re(M[m-1][m-1])
        let out_lo = forward_bin(&params, &q_feat, &k_feat, &v_feat, frames, 1, MaskMode::SelfOnly);
        let mut boosted = params.clone();
        boosted.v_gate[c_idx] += 1.0;
        let out_hi = forward_bin(&boosted, &q_feat, &k_feat, &v_feat, frames, 1, MaskMode::SelfOnly);
        let mut grew = false;
        for t in 0..frames {
            let a = out_lo[t * dv + c_idx].abs();
            let b = out_hi[t * dv + c_idx].abs();
            assert!(b + 1e-12 >= a, "gate increase must not shrink magnitude");
            if b > a + 1e-12 {
                grew = true;
            }
        }
        assert!(grew);
    }

    #[test]
    fn frequency_permutation_consistency() {
        let frames = 5;
        let far = random_spec(frames, 56);
        let mic = random_spec(frames, 57);
        let params = jittered_params(2, 58);
        let x = stft::unfold(&far, 2).unwrap();
        let v = pack_stats(&x, &mic).unwrap();
        let stats = attention_forward(&params, &far, &mic, &v, 3).unwrap();

        let perm = [2usize, 0, 1];
        let permute = |s: &Spectrogram| -> Spectrogram {
            let bins = s.num_bins();
            let mut data = vec![Complex64::default(); s.data().len()];
            for t in 0..s.num_frames() {
                for (new_f, &old_f) in perm.iter().enumerate() {
                    data[t * bins + new_f] = s.at(t, old_f);
                }
            }
            Spectrogram::from_parts(data, s.num_frames(), s.signal_len(), s.config().clone())
                .unwrap()
        };
        let far_p = permute(&far);
        let mic_p = permute(&mic);
        let x_p = stft::unfold(&far_p, 2).unwrap();
        let v_p = pack_stats(&x_p, &mic_p).unwrap();
        let stats_p = attention_forward(&params, &far_p, &mic_p, &v_p, 3).unwrap();

        for (new_f, &old_f) in perm.iter().enumerate() {
            for t in 0..frames {
                assert_eq!(stats_p.mat_at(new_f, t), stats.mat_at(old_f, t));
                assert_eq!(stats_p.vec_at(new_f, t), stats.vec_at(old_f, t));
            }
        }
    }

    #[test]
    fn unit_gates_and_self_mask_reduce_to_plain_stats() {
        let frames = 9;
        let far = random_spec(frames, 59);
        let mic = random_spec(frames, 60);
        let mut params = AttentionParams::init(3, 61);
        for g in params
            .q_gate
            .iter_mut()
            .chain(params.k_gate.iter_mut())
            .chain(params.v_gate.iter_mut())
        {
            *g = 800.0; // sigmoid saturates to exactly 1
        }
        let x = stft::unfold(&far, 3).unwrap();
        let v = pack_stats(&x, &mic).unwrap();
        let window = 4;
        let enhanced =
            attention_forward_masked(&params, &far, &mic, &v, window, MaskMode::SelfOnly).unwrap();
        let plain = wiener::accumulate_stats(&x, &mic, window).unwrap();
        for f in 0..far.num_bins() {
            for t in 0..frames {
                for (a, b) in enhanced.mat_at(f, t).iter().zip(plain.mat_at(f, t)) {
                    assert!((a - b).norm() < 1e-8, "({f},{t}) {a} vs {b}");
                }
                for (a, b) in enhanced.vec_at(f, t).iter().zip(plain.vec_at(f, t)) {
                    assert!((a - b).norm() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_grads() {
        let frames = 4;
        let far = random_spec(frames, 62);
        let mic = random_spec(frames, 63);
        let params = jittered_params(2, 64);
        let x = stft::unfold(&far, 2).unwrap();
        let v = pack_stats(&x, &mic).unwrap();
        let zero_up = WienerStats::from_parts(
            vec![Complex64::default(); far.num_bins() * frames * 4],
            vec![Complex64::default(); far.num_bins() * frames * 2],
            far.num_bins(),
            frames,
            2,
            3,
        )
        .unwrap();
        let grads = attention_backward(&params, &far, &mic, &v, 3, &zero_up).unwrap();
        assert_eq!(grads.max_abs(), 0.0);
    }

    #[test]
    fn non_finite_params_rejected() {
        let frames = 3;
        let far = random_spec(frames, 65);
        let mic = random_spec(frames, 66);
        let mut params = AttentionParams::init(2, 67);
        params.w_q[1] = f64::NAN;
        let x = stft::unfold(&far, 2).unwrap();
        let v = pack_stats(&x, &mic).unwrap();
        let err = attention_forward(&params, &far, &mic, &v, 2).unwrap_err();
        assert!(err.to_string().contains("w_q"), "{err}");
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let params = jittered_params(3, 68);
        let text = checkpoint_to_string(&params).unwrap();
        let back = checkpoint_from_str(&text).unwrap();
        assert_eq!(params, back);
    }

    #[test]
    fn corrupted_checkpoint_names_tensor() {
        let params = jittered_params(2, 69);
        let text = checkpoint_to_string(&params).unwrap();
        let bad = text.replace(
            "\"conv_k_weight\": [",
            "\"conv_k_weight\": [1e999, ",
        );
        let err = checkpoint_from_str(&bad).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("conv_k_weight") || msg.contains("parse"),
            "error should name the tensor or fail parsing: {msg}"
        );
        let bad_len = text.replace("\"q_gate\": [", "\"q_gate\": [0.0, ");
        let err = checkpoint_from_str(&bad_len).unwrap_err();
        assert!(err.to_string().contains("q_gate"), "{err}");
    }
}
