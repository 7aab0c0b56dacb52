//! Short-time Fourier analysis/synthesis and the causal frame unfolding that
//! feeds the multi-frame Wiener machinery.
//!
//! Framing convention: the signal is left-padded with `window_len - hop`
//! zeros, so frame `t` covers original sample indices
//! `[t*hop - (window_len - hop), t*hop + hop)` and never looks past sample
//! `(t+1)*hop - 1`. That keeps every downstream consumer strictly causal and
//! makes the frame count `T = ceil((len + window_len - hop) / hop)`
//! deterministic in the signal length alone.
//!
//! Synthesis divides the overlap-added output by the summed squared analysis
//! window, which reconstructs the input exactly for any hop that leaves no
//! zero-coverage gaps (a 20 ms Hamming window with 5 ms hop is not COLA, the
//! compensation handles that).

use num_complex::Complex64;
use rustfft::FftPlanner;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::par;

/// Window taper used for analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowKind {
    /// `0.54 - 0.46 cos(2 pi n / (N - 1))`, the symmetric Hamming window.
    Hamming,
}

/// Analysis/synthesis configuration.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StftConfig {
    pub sample_rate: u32,
    /// Window length in samples.
    pub window_len: usize,
    /// Hop between consecutive frames in samples; must not exceed `window_len`.
    pub hop: usize,
    pub window: WindowKind,
    /// FFT length; zero-pads the windowed frame when larger than `window_len`.
    pub fft_size: usize,
}

impl StftConfig {
    /// The 16 kHz speech configuration used throughout: 20 ms Hamming window,
    /// 5 ms hop, 512-point FFT.
    pub fn speech_16k() -> Self {
        Self {
            sample_rate: 16_000,
            window_len: 320,
            hop: 80,
            window: WindowKind::Hamming,
            fft_size: 512,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(Error::Config("sample_rate must be positive".into()));
        }
        if self.window_len == 0 {
            return Err(Error::Config("window_len must be positive".into()));
        }
        if self.hop == 0 || self.hop > self.window_len {
            return Err(Error::Config(format!(
                "hop must satisfy 1 <= hop <= window_len, got hop={} window_len={}",
                self.hop, self.window_len
            )));
        }
        if self.fft_size < self.window_len {
            return Err(Error::Config(format!(
                "fft_size {} is smaller than window_len {}",
                self.fft_size, self.window_len
            )));
        }
        Ok(())
    }

    /// One-sided bin count `fft_size / 2 + 1`.
    pub fn num_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Number of frames produced for a signal of `len` samples.
    pub fn num_frames(&self, len: usize) -> usize {
        (len + self.window_len - self.hop).div_ceil(self.hop)
    }

    /// Zeros prepended to the signal before framing.
    pub fn left_pad(&self) -> usize {
        self.window_len - self.hop
    }

    /// Analysis window samples.
    pub fn window_samples(&self) -> Vec<f64> {
        match self.window {
            WindowKind::Hamming => {
                let n = self.window_len;
                (0..n)
                    .map(|i| {
                        if n == 1 {
                            1.0
                        } else {
                            0.54 - 0.46
                                * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos()
                        }
                    })
                    .collect()
            }
        }
    }
}

/// One-sided complex spectrogram, frames-major: entry `(t, f)` lives at
/// `data[t * num_bins + f]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    data: Vec<Complex64>,
    num_frames: usize,
    num_bins: usize,
    /// Length in samples of the signal this spectrogram was computed from;
    /// synthesis trims its output back to this length.
    signal_len: usize,
    config: StftConfig,
}

impl Spectrogram {
    /// Build a spectrogram from raw parts; shapes must be consistent.
    pub fn from_parts(
        data: Vec<Complex64>,
        num_frames: usize,
        signal_len: usize,
        config: StftConfig,
    ) -> Result<Self> {
        config.validate()?;
        let num_bins = config.num_bins();
        if data.len() != num_frames * num_bins {
            return Err(Error::ShapeMismatch(format!(
                "spectrogram data has {} entries, expected {} frames x {} bins",
                data.len(),
                num_frames,
                num_bins
            )));
        }
        Ok(Self {
            data,
            num_frames,
            num_bins,
            signal_len,
            config,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn num_bins(&self) -> usize {
        self.num_bins
    }

    pub fn signal_len(&self) -> usize {
        self.signal_len
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    #[inline]
    pub fn at(&self, frame: usize, bin: usize) -> Complex64 {
        self.data[frame * self.num_bins + bin]
    }

    /// All bins of one frame.
    pub fn frame(&self, frame: usize) -> &[Complex64] {
        &self.data[frame * self.num_bins..(frame + 1) * self.num_bins]
    }

    /// One bin across all frames, copied out (the storage is frames-major).
    pub fn bin_column(&self, bin: usize) -> Vec<Complex64> {
        (0..self.num_frames).map(|t| self.at(t, bin)).collect()
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }
}

/// Causal stack of far-end frames, bins-major: the `m` taps of bin `f` at
/// frame `t` are contiguous at `data[(f * T + t) * m ..][..m]`, with
/// `taps[k] = X[t - k, f]` and zeros for `t - k < 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct UnfoldedFarEnd {
    data: Vec<Complex64>,
    num_bins: usize,
    num_frames: usize,
    taps: usize,
}

impl UnfoldedFarEnd {
    pub fn num_bins(&self) -> usize {
        self.num_bins
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    /// Filter-block count `m`.
    pub fn taps(&self) -> usize {
        self.taps
    }

    /// Tap vector `(X[t, f], X[t-1, f], ..., X[t-m+1, f])`.
    #[inline]
    pub fn tap_vector(&self, bin: usize, frame: usize) -> &[Complex64] {
        let base = (bin * self.num_frames + frame) * self.taps;
        &self.data[base..base + self.taps]
    }

    #[inline]
    pub fn at(&self, bin: usize, frame: usize, tap: usize) -> Complex64 {
        self.data[(bin * self.num_frames + frame) * self.taps + tap]
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }
}

/// Forward transform: frames-major one-sided spectrogram of a real signal.
pub fn stft(signal: &[f64], config: &StftConfig) -> Result<Spectrogram> {
    config.validate()?;
    if signal.is_empty() {
        return Err(Error::InvalidInput("empty signal".into()));
    }

    let window = config.window_samples();
    let num_frames = config.num_frames(signal.len());
    let num_bins = config.num_bins();
    let pad = config.left_pad();
    let fft = FftPlanner::new().plan_fft_forward(config.fft_size);

    let mut data = vec![Complex64::default(); num_frames * num_bins];
    let hop = config.hop;
    let window_len = config.window_len;
    let fft_size = config.fft_size;

    par::for_each_chunk_mut(&mut data, num_bins, |t, out| {
        let fft: Arc<dyn rustfft::Fft<f64>> = Arc::clone(&fft);
        let mut buf = vec![Complex64::default(); fft_size];
        let mut scratch = vec![Complex64::default(); fft.get_inplace_scratch_len()];
        for (i, w) in window.iter().enumerate() {
            let p = t * hop + i; // padded index
            let s = if p >= pad && p - pad < signal.len() {
                signal[p - pad]
            } else {
                0.0
            };
            buf[i] = Complex64::new(s * w, 0.0);
        }
        for b in buf[window_len..].iter_mut() {
            *b = Complex64::default();
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        out.copy_from_slice(&buf[..num_bins]);
    });

    Ok(Spectrogram {
        data,
        num_frames,
        num_bins,
        signal_len: signal.len(),
        config: config.clone(),
    })
}

/// Inverse transform: weighted overlap-add with squared-window compensation,
/// trimmed back to the originating signal length.
pub fn istft(spec: &Spectrogram) -> Result<Vec<f64>> {
    let config = &spec.config;
    config.validate()?;
    if spec.num_bins != config.num_bins() {
        return Err(Error::Config(format!(
            "spectrogram has {} bins but config implies {}",
            spec.num_bins,
            config.num_bins()
        )));
    }
    let pad = config.left_pad();
    let (padded, den) = overlap_add(spec)?;
    let mut out = vec![0.0; spec.signal_len];
    for (i, o) in out.iter_mut().enumerate() {
        let p = pad + i;
        if p < padded.len() && den[p] > 0.0 {
            *o = padded[p] / den[p];
        }
    }
    Ok(out)
}

/// Overlap-add core: returns the un-normalized synthesis in padded-signal
/// coordinates together with the squared-window weight of every position.
pub fn overlap_add(spec: &Spectrogram) -> Result<(Vec<f64>, Vec<f64>)> {
    let config = &spec.config;
    let window = config.window_samples();
    let fft_size = config.fft_size;
    let num_bins = spec.num_bins;
    let ifft = FftPlanner::new().plan_fft_inverse(fft_size);
    let mut scratch = vec![Complex64::default(); ifft.get_inplace_scratch_len()];
    let mut buf = vec![Complex64::default(); fft_size];

    let total = spec.num_frames.saturating_sub(1) * config.hop + config.window_len;
    let mut acc = vec![0.0; total];
    let mut den = vec![0.0; total];
    let scale = 1.0 / fft_size as f64;

    for t in 0..spec.num_frames {
        let row = spec.frame(t);
        buf[..num_bins].copy_from_slice(row);
        // Hermitian completion of the one-sided spectrum.
        for f in num_bins..fft_size {
            buf[f] = buf[fft_size - f].conj();
        }
        ifft.process_with_scratch(&mut buf, &mut scratch);
        let base = t * config.hop;
        for (i, w) in window.iter().enumerate() {
            acc[base + i] += buf[i].re * scale * w;
            den[base + i] += w * w;
        }
    }
    Ok((acc, den))
}

/// Stack the current and previous `m - 1` frames of each bin into tap
/// vectors, zero-padding history before frame 0.
pub fn unfold(spec: &Spectrogram, m: usize) -> Result<UnfoldedFarEnd> {
    if m == 0 {
        return Err(Error::Config("tap count m must be at least 1".into()));
    }
    let num_bins = spec.num_bins;
    let num_frames = spec.num_frames;
    let mut data = vec![Complex64::default(); num_bins * num_frames * m];

    par::for_each_chunk_mut(&mut data, num_frames * m, |f, chunk| {
        for t in 0..num_frames {
            for k in 0..=t.min(m - 1) {
                chunk[t * m + k] = spec.at(t - k, f);
            }
        }
    });

    Ok(UnfoldedFarEnd {
        data,
        num_bins,
        num_frames,
        taps: m,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use stws_testkit::naive_dft;

    fn cfg() -> StftConfig {
        StftConfig::speech_16k()
    }

    fn white_noise(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn rel_rms(a: &[f64], b: &[f64]) -> f64 {
        let err: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        let refe: f64 = b.iter().map(|x| x * x).sum();
        (err / refe).sqrt()
    }

    #[test]
    fn frame_count_matches_formula() {
        let c = cfg();
        assert_eq!(c.num_frames(16_000), 203);
        assert_eq!(c.num_bins(), 257);
    }

    #[test]
    fn zero_signal_gives_zero_spectrogram() {
        let c = cfg();
        let spec = stft(&vec![0.0; 16_000], &c).unwrap();
        assert_eq!(spec.num_frames(), 203);
        assert_eq!(spec.num_bins(), 257);
        assert!(spec.data().iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn empty_signal_rejected() {
        assert!(matches!(stft(&[], &cfg()), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn undersized_fft_rejected() {
        let mut c = cfg();
        c.fft_size = 256;
        assert!(matches!(stft(&[0.0; 100], &c), Err(Error::Config(_))));
    }

    #[test]
    fn impulse_frame_zero_matches_naive_dft() {
        // Unit impulse at sample 0 sits at padded index `left_pad` of frame 0.
        let c = cfg();
        let mut signal = vec![0.0; 400];
        signal[0] = 1.0;
        let spec = stft(&signal, &c).unwrap();

        let window = c.window_samples();
        let mut frame0 = vec![0.0; c.fft_size];
        frame0[c.left_pad()] = window[c.left_pad()];
        let oracle = naive_dft(&frame0);
        for f in 0..c.num_bins() {
            assert_relative_eq!(spec.at(0, f).re, oracle[f].re, epsilon = 1e-10);
            assert_relative_eq!(spec.at(0, f).im, oracle[f].im, epsilon = 1e-10);
        }
    }

    #[test]
    fn random_frame_matches_naive_dft() {
        let c = cfg();
        let signal = white_noise(2_000, 3);
        let spec = stft(&signal, &c).unwrap();

        // Frame 10 covers original samples [10*80-240, 10*80+80).
        let t = 10;
        let window = c.window_samples();
        let mut frame = vec![0.0; c.fft_size];
        for (i, w) in window.iter().enumerate() {
            let idx = t * c.hop + i;
            let s = if idx >= c.left_pad() {
                signal[idx - c.left_pad()]
            } else {
                0.0
            };
            frame[i] = s * w;
        }
        let oracle = naive_dft(&frame);
        for f in 0..c.num_bins() {
            assert_relative_eq!(spec.at(t, f).re, oracle[f].re, epsilon = 1e-9);
            assert_relative_eq!(spec.at(t, f).im, oracle[f].im, epsilon = 1e-9);
        }
    }

    #[test]
    fn sine_peaks_at_expected_bin() {
        let c = cfg();
        let freq = 1_000.0;
        let n = 8_000;
        let signal: Vec<f64> = (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / 16_000.0).sin())
            .collect();
        let spec = stft(&signal, &c).unwrap();
        let expected_bin = (freq * c.fft_size as f64 / 16_000.0).round() as usize;
        assert_eq!(expected_bin, 32);

        // Fully-overlapped frames: window entirely inside the signal.
        let first_full = c.left_pad().div_ceil(c.hop);
        let last_full = (n - c.window_len + c.left_pad()) / c.hop;
        for t in first_full..=last_full {
            let peak_bin = (0..c.num_bins())
                .max_by(|&a, &b| {
                    spec.at(t, a)
                        .norm()
                        .partial_cmp(&spec.at(t, b).norm())
                        .unwrap()
                })
                .unwrap();
            assert_eq!(peak_bin, expected_bin, "frame {t}");
        }
    }

    #[test]
    fn roundtrip_white_noise_interior() {
        let c = cfg();
        let signal = white_noise(16_000, 7);
        let spec = stft(&signal, &c).unwrap();
        let rec = istft(&spec).unwrap();
        assert_eq!(rec.len(), signal.len());
        let lo = c.window_len;
        let hi = signal.len() - c.window_len;
        assert!(rel_rms(&rec[lo..hi], &signal[lo..hi]) <= 1e-6);
    }

    #[test]
    fn roundtrip_zero_spectrogram() {
        let c = cfg();
        let spec = stft(&vec![0.0; 4_000], &c).unwrap();
        let rec = istft(&spec).unwrap();
        assert!(rec.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_frame_overlap_add_returns_segment() {
        // One directly-constructed frame: OLA with compensation must undo the
        // analysis window exactly.
        let c = cfg();
        let seg: Vec<f64> = (0..c.window_len)
            .map(|i| (2.0 * std::f64::consts::PI * 440.0 * i as f64 / 16_000.0).sin())
            .collect();
        let window = c.window_samples();
        let mut frame = vec![0.0; c.fft_size];
        for i in 0..c.window_len {
            frame[i] = seg[i] * window[i];
        }
        let row = naive_dft(&frame)[..c.num_bins()].to_vec();
        let spec = Spectrogram::from_parts(row, 1, c.window_len, c.clone()).unwrap();
        let (acc, den) = overlap_add(&spec).unwrap();
        for i in 0..c.window_len {
            assert_relative_eq!(acc[i] / den[i], seg[i], epsilon = 1e-9);
        }
    }

    #[test]
    fn linearity() {
        let c = cfg();
        let x = white_noise(3_000, 11);
        let y = white_noise(3_000, 13);
        let (a, b) = (0.7, -2.3);
        let combo: Vec<f64> = x.iter().zip(&y).map(|(u, v)| a * u + b * v).collect();
        let sx = stft(&x, &c).unwrap();
        let sy = stft(&y, &c).unwrap();
        let sc = stft(&combo, &c).unwrap();
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..sc.data().len() {
            let lin = a * sx.data()[i] + b * sy.data()[i];
            num += (sc.data()[i] - lin).norm_sqr();
            den += lin.norm_sqr();
        }
        assert!((num / den).sqrt() < 1e-10);
    }

    #[test]
    fn per_frame_parseval() {
        // One-sided spectrum with interior bins doubled carries exactly
        // fft_size times the windowed frame energy.
        let c = cfg();
        let signal = white_noise(2_000, 17);
        let spec = stft(&signal, &c).unwrap();
        let window = c.window_samples();
        for t in [0usize, 5, 20] {
            let mut frame_energy = 0.0;
            for (i, w) in window.iter().enumerate() {
                let idx = t * c.hop + i;
                let s = if idx >= c.left_pad() && idx - c.left_pad() < signal.len() {
                    signal[idx - c.left_pad()]
                } else {
                    0.0
                };
                frame_energy += (s * w) * (s * w);
            }
            let mut spec_energy = 0.0;
            for f in 0..c.num_bins() {
                let mult = if f == 0 || f == c.num_bins() - 1 { 1.0 } else { 2.0 };
                spec_energy += mult * spec.at(t, f).norm_sqr();
            }
            assert_relative_eq!(
                spec_energy,
                c.fft_size as f64 * frame_energy,
                max_relative = 1e-10
            );
        }
    }

    #[test]
    fn aggregate_energy_follows_window_normalization() {
        // Total one-sided spectral energy of a long stationary signal is
        // fft_size * sum(w^2)/hop times the signal energy (each interior
        // sample is weighted by the squared window once per covering frame).
        let c = cfg();
        let signal = white_noise(40_000, 29);
        let spec = stft(&signal, &c).unwrap();
        let window = c.window_samples();
        let window_mass: f64 = window.iter().map(|w| w * w).sum::<f64>() / c.hop as f64;

        let mut spec_energy = 0.0;
        for t in 0..spec.num_frames() {
            for f in 0..c.num_bins() {
                let mult = if f == 0 || f == c.num_bins() - 1 { 1.0 } else { 2.0 };
                spec_energy += mult * spec.at(t, f).norm_sqr();
            }
        }
        let signal_energy: f64 = signal.iter().map(|x| x * x).sum();
        let ratio = spec_energy / (c.fft_size as f64 * window_mass * signal_energy);
        assert!(
            (ratio - 1.0).abs() < 0.02,
            "energy ratio {ratio} (window mass constant {window_mass:.4})"
        );
    }

    #[test]
    fn unfold_identity_at_m1() {
        let c = cfg();
        let signal = white_noise(1_000, 19);
        let spec = stft(&signal, &c).unwrap();
        let unf = unfold(&spec, 1).unwrap();
        for f in 0..spec.num_bins() {
            for t in 0..spec.num_frames() {
                assert_eq!(unf.at(f, t, 0), spec.at(t, f));
            }
        }
    }

    #[test]
    fn unfold_zero_history_padding() {
        let c = cfg();
        let data = vec![Complex64::new(1.0, -2.0); 2 * c.num_bins()];
        let spec = Spectrogram::from_parts(data, 2, 160, c.clone()).unwrap();
        let unf = unfold(&spec, 3).unwrap();
        for f in 0..spec.num_bins() {
            assert_eq!(unf.at(f, 0, 0), spec.at(0, f));
            assert_eq!(unf.at(f, 0, 1), Complex64::default());
            assert_eq!(unf.at(f, 0, 2), Complex64::default());
            assert_eq!(unf.at(f, 1, 0), spec.at(1, f));
            assert_eq!(unf.at(f, 1, 1), spec.at(0, f));
            assert_eq!(unf.at(f, 1, 2), Complex64::default());
        }
    }

    #[test]
    fn unfold_default_tap_depth_shape() {
        let c = cfg();
        let data = vec![Complex64::default(); 100 * c.num_bins()];
        let spec = Spectrogram::from_parts(data, 100, 8_000, c.clone()).unwrap();
        let unf = unfold(&spec, 20).unwrap();
        assert_eq!(unf.num_bins(), 257);
        assert_eq!(unf.num_frames(), 100);
        assert_eq!(unf.taps(), 20);
        assert_eq!(unf.data().len(), 257 * 100 * 20);
    }

    #[test]
    fn unfold_rejects_zero_taps() {
        let c = cfg();
        let spec = stft(&[1.0; 400], &c).unwrap();
        assert!(matches!(unfold(&spec, 0), Err(Error::Config(_))));
    }

    #[test]
    fn causality_tail_perturbation() {
        let c = cfg();
        let mut a = white_noise(4_000, 23);
        let spec_a = stft(&a, &c).unwrap();
        let unf_a = unfold(&spec_a, 4).unwrap();

        // Perturb everything from sample (t+1)*hop on.
        let t = 20;
        for s in a.iter_mut().skip((t + 1) * c.hop) {
            *s += 0.5;
        }
        let spec_b = stft(&a, &c).unwrap();
        let unf_b = unfold(&spec_b, 4).unwrap();

        for f in 0..spec_a.num_bins() {
            for tt in 0..=t {
                assert_eq!(spec_a.at(tt, f), spec_b.at(tt, f), "stft bit-causality");
                for k in 0..4 {
                    assert_eq!(unf_a.at(f, tt, k), unf_b.at(f, tt, k), "unfold bit-causality");
                }
            }
        }
    }
}
