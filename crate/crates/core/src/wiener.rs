//! Per-bin short-time Wiener statistics, the regularized normal-equation
//! solve, and echo subtraction.
//!
//! For every frame `t` and bin `f` the engine models the microphone spectrum
//! as `D[t,f] = S[t,f] + sum_k H[k,f] X[t-k,f]` and estimates the taps `H`
//! that minimize the summed squared error over the trailing `L`-frame window:
//!
//! ```text
//! R[i][j] = sum_tau conj(X[tau-i, f]) X[tau-j, f]
//! r[i]    = sum_tau conj(X[tau-i, f]) D[tau, f]
//! H       = (R + eps * tr(R)/m * I)^-1 r
//! ```
//!
//! `R` uses the conjugate transpose (Hermitian, positive semidefinite); a
//! plain transpose would produce a complex-symmetric matrix with the wrong
//! minimum. The solver is an LDL^H factorization that zeroes unexcited
//! directions instead of failing, so rank-deficient windows (startup frames,
//! silent far end) degrade to partial or zero filters deterministically.

use num_complex::Complex64;

use crate::attention::{self, AttentionParams, MaskMode};
use crate::error::{Error, Result};
use crate::par;
use crate::stft::{self, Spectrogram, StftConfig, UnfoldedFarEnd};

/// Sliding-window autocorrelation / cross-correlation statistics per
/// (bin, frame). Bins-major: the `m x m` matrix of `(f, t)` starts at
/// `mat[((f * T) + t) * m * m]`, the vector at `vec[((f * T) + t) * m]`.
#[derive(Debug, Clone)]
pub struct WienerStats {
    mat: Vec<Complex64>,
    vec: Vec<Complex64>,
    num_bins: usize,
    num_frames: usize,
    taps: usize,
    window_frames: usize,
}

impl WienerStats {
    pub fn from_parts(
        mat: Vec<Complex64>,
        vec: Vec<Complex64>,
        num_bins: usize,
        num_frames: usize,
        taps: usize,
        window_frames: usize,
    ) -> Result<Self> {
        if mat.len() != num_bins * num_frames * taps * taps
            || vec.len() != num_bins * num_frames * taps
        {
            return Err(Error::ShapeMismatch(format!(
                "stats buffers do not match {num_bins} bins x {num_frames} frames x {taps} taps"
            )));
        }
        Ok(Self {
            mat,
            vec,
            num_bins,
            num_frames,
            taps,
            window_frames,
        })
    }

    pub fn num_bins(&self) -> usize {
        self.num_bins
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn taps(&self) -> usize {
        self.taps
    }

    /// Length `L` of the sliding estimation window, in frames.
    pub fn window_frames(&self) -> usize {
        self.window_frames
    }

    /// Autocorrelation matrix of `(bin, frame)`, row-major `m x m`.
    #[inline]
    pub fn mat_at(&self, bin: usize, frame: usize) -> &[Complex64] {
        let base = (bin * self.num_frames + frame) * self.taps * self.taps;
        &self.mat[base..base + self.taps * self.taps]
    }

    /// Cross-correlation vector of `(bin, frame)`.
    #[inline]
    pub fn vec_at(&self, bin: usize, frame: usize) -> &[Complex64] {
        let base = (bin * self.num_frames + frame) * self.taps;
        &self.vec[base..base + self.taps]
    }

    pub fn is_finite(&self) -> bool {
        self.mat.iter().chain(self.vec.iter()).all(|z| z.re.is_finite() && z.im.is_finite())
    }
}

/// Solved per-bin, per-frame filter taps. Bins-major like [`UnfoldedFarEnd`]:
/// taps of `(f, t)` start at `data[(f * T + t) * m]`.
#[derive(Debug, Clone)]
pub struct WienerFilter {
    data: Vec<Complex64>,
    num_bins: usize,
    num_frames: usize,
    taps: usize,
    epsilon: f64,
}

impl WienerFilter {
    pub fn num_bins(&self) -> usize {
        self.num_bins
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn taps(&self) -> usize {
        self.taps
    }

    /// Regularization weight the filter was solved with.
    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    #[inline]
    pub fn taps_at(&self, bin: usize, frame: usize) -> &[Complex64] {
        let base = (bin * self.num_frames + frame) * self.taps;
        &self.data[base..base + self.taps]
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }
}

/// Rolling window of instantaneous rank-one statistics for one bin.
///
/// `push` retires the oldest frame once `window` frames are held, so the
/// running sums always cover frames `max(0, t-L+1) ..= t`. The retire/add
/// order is fixed, which keeps results bit-identical across code paths.
pub(crate) struct SlidingStats {
    taps: usize,
    window: usize,
    ring_mat: Vec<Complex64>,
    ring_vec: Vec<Complex64>,
    sum_mat: Vec<Complex64>,
    sum_vec: Vec<Complex64>,
    count: usize,
}

impl SlidingStats {
    pub(crate) fn new(taps: usize, window: usize) -> Self {
        Self {
            taps,
            window,
            ring_mat: vec![Complex64::default(); window * taps * taps],
            ring_vec: vec![Complex64::default(); window * taps],
            sum_mat: vec![Complex64::default(); taps * taps],
            sum_vec: vec![Complex64::default(); taps],
            count: 0,
        }
    }

    /// Ingest frame statistics built from the tap vector `x` and microphone
    /// value `d`; afterwards `sums()` reflects the trailing window.
    pub(crate) fn push(&mut self, x: &[Complex64], d: Complex64) {
        let m = self.taps;
        let slot = self.count % self.window;
        let mat_slot = &mut self.ring_mat[slot * m * m..(slot + 1) * m * m];
        let vec_slot = &mut self.ring_vec[slot * m..(slot + 1) * m];
        if self.count >= self.window {
            for (s, v) in self.sum_mat.iter_mut().zip(mat_slot.iter()) {
                *s -= v;
            }
            for (s, v) in self.sum_vec.iter_mut().zip(vec_slot.iter()) {
                *s -= v;
            }
        }
        for i in 0..m {
            let ci = x[i].conj();
            for j in 0..m {
                mat_slot[i * m + j] = ci * x[j];
            }
            vec_slot[i] = ci * d;
        }
        for (s, v) in self.sum_mat.iter_mut().zip(mat_slot.iter()) {
            *s += v;
        }
        for (s, v) in self.sum_vec.iter_mut().zip(vec_slot.iter()) {
            *s += v;
        }
        self.count += 1;
    }

    pub(crate) fn sums(&self) -> (&[Complex64], &[Complex64]) {
        (&self.sum_mat, &self.sum_vec)
    }
}

/// Build sliding-window Wiener statistics for every (bin, frame).
pub fn accumulate_stats(
    x_unf: &UnfoldedFarEnd,
    d: &Spectrogram,
    window_frames: usize,
) -> Result<WienerStats> {
    if window_frames == 0 {
        return Err(Error::Config("window_frames must be at least 1".into()));
    }
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
    let bins = x_unf.num_bins();
    let frames = x_unf.num_frames();

    let mut mat = vec![Complex64::default(); bins * frames * m * m];
    let mut vec_out = vec![Complex64::default(); bins * frames * m];

    // Two passes would double the sliding work; build per-bin rows into
    // (mat, vec) pairs and scatter once.
    let per_bin: Vec<(Vec<Complex64>, Vec<Complex64>)> = par::map_indexed(bins, |f| {
        let mut sliding = SlidingStats::new(m, window_frames);
        let mut bin_mat = vec![Complex64::default(); frames * m * m];
        let mut bin_vec = vec![Complex64::default(); frames * m];
        for t in 0..frames {
            sliding.push(x_unf.tap_vector(f, t), d.at(t, f));
            let (sm, sv) = sliding.sums();
            bin_mat[t * m * m..(t + 1) * m * m].copy_from_slice(sm);
            bin_vec[t * m..(t + 1) * m].copy_from_slice(sv);
        }
        (bin_mat, bin_vec)
    });
    for (f, (bin_mat, bin_vec)) in per_bin.into_iter().enumerate() {
        mat[f * frames * m * m..(f + 1) * frames * m * m].copy_from_slice(&bin_mat);
        vec_out[f * frames * m..(f + 1) * frames * m].copy_from_slice(&bin_vec);
    }

    WienerStats::from_parts(mat, vec_out, bins, frames, m, window_frames)
}

/// Relative diagonal floor below which an LDL^H pivot is treated as an
/// unexcited direction and zeroed.
const PIVOT_REL_FLOOR: f64 = 1e-12;

/// Solve `(A + lambda I) h = b` for Hermitian `A` (row-major, `m x m`) via
/// LDL^H. Pivots at or below the floor -- including negative ones produced by
/// attention-reweighted statistics -- zero their direction instead of
/// propagating, so the result is always finite.
pub(crate) fn ldlh_solve(a: &mut [Complex64], b: &mut [Complex64], m: usize, lambda: f64) {
    let mut diag_max: f64 = 0.0;
    for j in 0..m {
        a[j * m + j] += lambda;
        diag_max = diag_max.max(a[j * m + j].re.abs());
    }
    if diag_max <= 0.0 {
        b.fill(Complex64::default());
        return;
    }
    let floor = diag_max * PIVOT_REL_FLOOR;

    // In-place factorization: strict lower triangle holds L, d holds pivots.
    let mut d = vec![0.0f64; m];
    for j in 0..m {
        let mut dj = a[j * m + j].re;
        for k in 0..j {
            dj -= a[j * m + k].norm_sqr() * d[k];
        }
        if dj <= floor {
            d[j] = 0.0;
            for i in j + 1..m {
                a[i * m + j] = Complex64::default();
            }
            continue;
        }
        d[j] = dj;
        for i in j + 1..m {
            let mut lij = a[i * m + j];
            for k in 0..j {
                lij -= a[i * m + k] * a[j * m + k].conj() * d[k];
            }
            a[i * m + j] = lij / dj;
        }
    }

    // Forward substitution L y = b.
    for i in 0..m {
        let mut yi = b[i];
        for k in 0..i {
            yi -= a[i * m + k] * b[k];
        }
        b[i] = yi;
    }
    // Diagonal scaling, skipping dead directions.
    for i in 0..m {
        b[i] = if d[i] > 0.0 {
            b[i] / d[i]
        } else {
            Complex64::default()
        };
    }
    // Backward substitution L^H h = z.
    for i in (0..m).rev() {
        let mut hi = b[i];
        for k in i + 1..m {
            hi -= a[k * m + i].conj() * b[k];
        }
        b[i] = hi;
    }
}

/// Solve the regularized normal equations at every (bin, frame).
pub fn solve(stats: &WienerStats, epsilon: f64) -> Result<WienerFilter> {
    if epsilon < 0.0 {
        return Err(Error::Config(format!("epsilon must be >= 0, got {epsilon}")));
    }
    if !stats.is_finite() {
        return Err(Error::Data("non-finite Wiener statistics".into()));
    }
    let m = stats.taps();
    let bins = stats.num_bins();
    let frames = stats.num_frames();

    let mut data = vec![Complex64::default(); bins * frames * m];
    par::for_each_chunk_mut(&mut data, frames * m, |f, chunk| {
        let mut a = vec![Complex64::default(); m * m];
        for t in 0..frames {
            a.copy_from_slice(stats.mat_at(f, t));
            let h = &mut chunk[t * m..(t + 1) * m];
            h.copy_from_slice(stats.vec_at(f, t));
            let lambda = epsilon * regularizer_scale(&a, m);
            ldlh_solve(&mut a, h, m, lambda);
        }
    });

    Ok(WienerFilter {
        data,
        num_bins: bins,
        num_frames: frames,
        taps: m,
        epsilon,
    })
}

/// `tr(R)/m`, clamped to be nonnegative; used to scale the ridge weight so
/// regularization is invariant to the far-end level.
#[inline]
fn regularizer_scale(a: &[Complex64], m: usize) -> f64 {
    let mut tr = 0.0;
    for j in 0..m {
        tr += a[j * m + j].re;
    }
    (tr / m as f64).max(0.0)
}

/// Subtract the filtered far end: `S[t,f] = D[t,f] - sum_k H[f,t,k] X[t-k,f]`.
pub fn subtract_echo(
    d: &Spectrogram,
    x_unf: &UnfoldedFarEnd,
    h: &WienerFilter,
) -> Result<Spectrogram> {
    if x_unf.num_bins() != d.num_bins()
        || x_unf.num_frames() != d.num_frames()
        || h.num_bins() != d.num_bins()
        || h.num_frames() != d.num_frames()
        || h.taps() != x_unf.taps()
    {
        return Err(Error::ShapeMismatch(
            "microphone, unfolded far end and filter shapes disagree".into(),
        ));
    }
    let bins = d.num_bins();
    let mut out = d.clone();
    let frames = d.num_frames();
    par::for_each_chunk_mut(out.data_mut(), bins, |t, row| {
        let _ = frames;
        for (f, entry) in row.iter_mut().enumerate() {
            let taps = h.taps_at(f, t);
            let x = x_unf.tap_vector(f, t);
            let mut echo = Complex64::default();
            for (hk, xk) in taps.iter().zip(x.iter()) {
                echo += hk * xk;
            }
            *entry -= echo;
        }
    });
    Ok(out)
}

/// Knobs of the short-time Wiener pipeline.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PipelineConfig {
    /// Filter-block count `m` (tap depth per bin).
    pub taps: usize,
    /// Sliding estimation window `L` in frames.
    pub window_frames: usize,
    /// Ridge weight relative to `tr(R)/m`.
    pub epsilon: f64,
    pub stft: StftConfig,
}

impl PipelineConfig {
    /// Defaults used by the CLI: m = 20, L = 100 frames, eps = 1e-3,
    /// 16 kHz speech STFT.
    pub fn default_16k() -> Self {
        Self {
            taps: 20,
            window_frames: 100,
            epsilon: 1e-3,
            stft: StftConfig::speech_16k(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        if self.taps == 0 {
            return Err(Error::Config("taps must be at least 1".into()));
        }
        if self.window_frames == 0 {
            return Err(Error::Config("window_frames must be at least 1".into()));
        }
        if self.epsilon.is_nan() || self.epsilon < 0.0 {
            return Err(Error::Config(format!(
                "epsilon must be >= 0, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// End-to-end short-time Wiener echo cancellation.
///
/// Composes stft -> unfold -> sliding statistics -> solve -> subtract,
/// strictly causally. When `stats_override` is supplied (e.g. the
/// attention-enhanced statistics) the plain sliding statistics are skipped
/// and the override is solved instead.
pub fn stws_pipeline(
    far: &[f64],
    mic: &[f64],
    config: &PipelineConfig,
    stats_override: Option<&WienerStats>,
) -> Result<(Spectrogram, WienerFilter)> {
    config.validate()?;
    if far.len() != mic.len() {
        return Err(Error::InvalidInput(format!(
            "far end has {} samples, microphone has {}",
            far.len(),
            mic.len()
        )));
    }
    let far_spec = stft::stft(far, &config.stft)?;
    let mic_spec = stft::stft(mic, &config.stft)?;
    let x_unf = stft::unfold(&far_spec, config.taps)?;

    if let Some(stats) = stats_override {
        if stats.num_bins() != mic_spec.num_bins()
            || stats.num_frames() != mic_spec.num_frames()
            || stats.taps() != config.taps
        {
            return Err(Error::ShapeMismatch(
                "override statistics do not match the pipeline shapes".into(),
            ));
        }
        let h = solve(stats, config.epsilon)?;
        let s = subtract_echo(&mic_spec, &x_unf, &h)?;
        return Ok((s, h));
    }

    let (s, h) = solve_and_subtract_streaming(&mic_spec, &x_unf, config)?;
    Ok((s, h))
}

/// Attention-enhanced pipeline: per bin, the instantaneous statistics are
/// softmax-reweighted with the trained attention parameters before the
/// window sum and solve. Fused per bin so full-length inputs never
/// materialize the [F x T x m^2] statistics tensor.
pub fn astws_pipeline(
    far: &[f64],
    mic: &[f64],
    config: &PipelineConfig,
    params: &AttentionParams,
) -> Result<(Spectrogram, WienerFilter)> {
    config.validate()?;
    params.validate()?;
    if params.taps() != config.taps {
        return Err(Error::ShapeMismatch(format!(
            "attention parameters are for m = {}, pipeline uses m = {}",
            params.taps(),
            config.taps
        )));
    }
    if far.len() != mic.len() {
        return Err(Error::InvalidInput(format!(
            "far end has {} samples, microphone has {}",
            far.len(),
            mic.len()
        )));
    }
    let far_spec = stft::stft(far, &config.stft)?;
    let mic_spec = stft::stft(mic, &config.stft)?;
    let x_unf = stft::unfold(&far_spec, config.taps)?;

    let m = config.taps;
    let bins = mic_spec.num_bins();
    let frames = mic_spec.num_frames();
    let dv = attention::feature_dim(m);

    // Per bin: gather features, run attention, solve, subtract.
    let columns: Vec<(Vec<Complex64>, Vec<Complex64>)> = par::map_indexed(bins, |f| {
        let d_col = mic_spec.bin_column(f);
        let q_feat = attention::far_features_bin(&far_spec, f, m);
        let k_feat = attention::mic_features_bin(&mic_spec, f);
        let mut v_feat = vec![0.0; frames * dv];
        for t in 0..frames {
            attention::pack_row(
                x_unf.tap_vector(f, t),
                d_col[t],
                &mut v_feat[t * dv..(t + 1) * dv],
            );
        }
        let enhanced = attention::forward_bin(
            params,
            &q_feat,
            &k_feat,
            &v_feat,
            frames,
            config.window_frames,
            MaskMode::Causal,
        );

        let mut h_col = vec![Complex64::default(); frames * m];
        let mut s_col = vec![Complex64::default(); frames];
        let mut a = vec![Complex64::default(); m * m];
        let mut r = vec![Complex64::default(); m];
        for t in 0..frames {
            attention::unpack_row(&enhanced[t * dv..(t + 1) * dv], m, &mut a, &mut r);
            let lambda = config.epsilon * regularizer_scale(&a, m);
            ldlh_solve(&mut a, &mut r, m, lambda);
            h_col[t * m..(t + 1) * m].copy_from_slice(&r);
            let x = x_unf.tap_vector(f, t);
            let mut echo = Complex64::default();
            for (hk, xk) in r.iter().zip(x.iter()) {
                echo += hk * xk;
            }
            s_col[t] = d_col[t] - echo;
        }
        (h_col, s_col)
    });

    assemble_columns(columns, &mic_spec, bins, frames, m, config.epsilon)
}

/// Streaming per-bin solve used by the plain pipeline: identical arithmetic
/// to accumulate_stats + solve + subtract_echo, without materializing the
/// statistics tensor.
fn solve_and_subtract_streaming(
    mic_spec: &Spectrogram,
    x_unf: &UnfoldedFarEnd,
    config: &PipelineConfig,
) -> Result<(Spectrogram, WienerFilter)> {
    let m = config.taps;
    let bins = mic_spec.num_bins();
    let frames = mic_spec.num_frames();

    let columns: Vec<(Vec<Complex64>, Vec<Complex64>)> = par::map_indexed(bins, |f| {
        let mut sliding = SlidingStats::new(m, config.window_frames);
        let mut a = vec![Complex64::default(); m * m];
        let mut h_col = vec![Complex64::default(); frames * m];
        let mut s_col = vec![Complex64::default(); frames];
        for t in 0..frames {
            let x = x_unf.tap_vector(f, t);
            let d = mic_spec.at(t, f);
            sliding.push(x, d);
            let (sm, sv) = sliding.sums();
            a.copy_from_slice(sm);
            let h = &mut h_col[t * m..(t + 1) * m];
            h.copy_from_slice(sv);
            let lambda = config.epsilon * regularizer_scale(&a, m);
            ldlh_solve(&mut a, h, m, lambda);
            let mut echo = Complex64::default();
            for (hk, xk) in h.iter().zip(x.iter()) {
                echo += hk * xk;
            }
            s_col[t] = d - echo;
        }
        (h_col, s_col)
    });

    assemble_columns(columns, mic_spec, bins, frames, m, config.epsilon)
}

fn assemble_columns(
    columns: Vec<(Vec<Complex64>, Vec<Complex64>)>,
    mic_spec: &Spectrogram,
    bins: usize,
    frames: usize,
    m: usize,
    epsilon: f64,
) -> Result<(Spectrogram, WienerFilter)> {
    let mut h_data = vec![Complex64::default(); bins * frames * m];
    let mut s_data = vec![Complex64::default(); frames * bins];
    for (f, (h_col, s_col)) in columns.into_iter().enumerate() {
        h_data[f * frames * m..(f + 1) * frames * m].copy_from_slice(&h_col);
        for t in 0..frames {
            s_data[t * bins + f] = s_col[t];
        }
    }
    let s = Spectrogram::from_parts(
        s_data,
        frames,
        mic_spec.signal_len(),
        mic_spec.config().clone(),
    )?;
    let h = WienerFilter {
        data: h_data,
        num_bins: bins,
        num_frames: frames,
        taps: m,
        epsilon,
    };
    Ok((s, h))
}
