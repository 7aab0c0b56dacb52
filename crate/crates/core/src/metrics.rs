//! Objective metrics (ERLE, SDR, SI-SNR) and the spectral/temporal training
//! losses.
//!
//! All dB metrics are clamped to [-100, 100] (ERLE to [0, 100]) so degenerate
//! inputs report finite numbers instead of infinities. The stretched SI-SNR
//! grows with alignment; the combined loss therefore subtracts it, and the
//! reported value keeps the raw sign convention.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stft::{self, Spectrogram, StftConfig};

const CLAMP_DB: f64 = 100.0;
/// Output-power floor relative to microphone power inside ERLE.
const ERLE_POWER_FLOOR: f64 = 1e-12;
/// |cos beta| clamp inside the stretched SI-SNR.
const COS_CLAMP: f64 = 1.0 - 1e-8;
/// Spectral compression factor shared by the magnitude/RI losses.
pub const SPECTRAL_COMPRESSION: f64 = 0.5;

fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

fn check_equal_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!(
            "signal lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// Echo return loss enhancement in dB: `10 log10(P_mic / P_out)`, clamped to
/// [0, 100]. Meaningful on far-end single-talk material.
pub fn erle_db(mic: &[f64], out: &[f64]) -> Result<f64> {
    check_equal_len(mic, out)?;
    let p_mic = energy(mic);
    if p_mic <= 0.0 {
        return Err(Error::InvalidInput("microphone signal has zero energy".into()));
    }
    let p_out = energy(out).max(ERLE_POWER_FLOOR * p_mic);
    Ok((10.0 * (p_mic / p_out).log10()).clamp(0.0, CLAMP_DB))
}

/// ERLE restricted to frames where the ground-truth near end is quiet
/// (RMS below -60 dBFS). Returns `None` when no frame qualifies.
pub fn erle_segmented(
    mic: &[f64],
    out: &[f64],
    near: &[f64],
    frame_len: usize,
) -> Result<Option<f64>> {
    check_equal_len(mic, out)?;
    check_equal_len(mic, near)?;
    if frame_len == 0 {
        return Err(Error::Config("frame_len must be positive".into()));
    }
    let threshold_rms = 1e-3; // -60 dBFS
    let mut p_mic = 0.0;
    let mut p_out = 0.0;
    let mut any = false;
    let mut start = 0;
    while start < mic.len() {
        let end = (start + frame_len).min(mic.len());
        let near_rms = (energy(&near[start..end]) / (end - start) as f64).sqrt();
        if near_rms < threshold_rms {
            p_mic += energy(&mic[start..end]);
            p_out += energy(&out[start..end]);
            any = true;
        }
        start = end;
    }
    if !any || p_mic <= 0.0 {
        return Ok(None);
    }
    let p_out = p_out.max(ERLE_POWER_FLOOR * p_mic);
    Ok(Some((10.0 * (p_mic / p_out).log10()).clamp(0.0, CLAMP_DB)))
}

/// Signal-to-distortion ratio in dB against a fixed reference.
pub fn sdr_db(reference: &[f64], estimate: &[f64]) -> Result<f64> {
    check_equal_len(reference, estimate)?;
    let p_ref = energy(reference);
    if p_ref <= 0.0 {
        return Err(Error::InvalidInput("reference signal has zero energy".into()));
    }
    let p_err: f64 = reference
        .iter()
        .zip(estimate.iter())
        .map(|(r, e)| (r - e) * (r - e))
        .sum();
    if p_err <= 0.0 {
        return Ok(CLAMP_DB);
    }
    Ok((10.0 * (p_ref / p_err).log10()).clamp(-CLAMP_DB, CLAMP_DB))
}

/// Scale-invariant SNR in dB: project the (mean-removed) estimate onto the
/// reference and compare projection to residual.
pub fn sisnr_db(reference: &[f64], estimate: &[f64]) -> Result<f64> {
    check_equal_len(reference, estimate)?;
    let s = mean_removed(reference);
    let e = mean_removed(estimate);
    let p_s = energy(&s);
    if p_s <= 0.0 {
        return Err(Error::InvalidInput("reference signal has zero energy".into()));
    }
    let alpha = dot(&e, &s) / p_s;
    let p_target = alpha * alpha * p_s;
    let p_resid: f64 = e
        .iter()
        .zip(s.iter())
        .map(|(ei, si)| {
            let r = ei - alpha * si;
            r * r
        })
        .sum();
    if p_target <= 0.0 {
        return Ok(-CLAMP_DB);
    }
    if p_resid <= 0.0 {
        return Ok(CLAMP_DB);
    }
    Ok((10.0 * (p_target / p_resid).log10()).clamp(-CLAMP_DB, CLAMP_DB))
}

/// Stretched SI-SNR: `10 log10((1 + cos b) / (1 - cos b))` of the angle
/// between the mean-removed reference and estimate. Grows with alignment;
/// trainers minimize its negative.
pub fn s_sisnr(reference: &[f64], estimate: &[f64]) -> Result<f64> {
    check_equal_len(reference, estimate)?;
    let s = mean_removed(reference);
    let e = mean_removed(estimate);
    let ns = energy(&s).sqrt();
    let ne = energy(&e).sqrt();
    if ns <= 0.0 || ne <= 0.0 {
        return Err(Error::InvalidInput(
            "s_sisnr needs both signals to have nonzero (mean-removed) energy".into(),
        ));
    }
    let cos_b = (dot(&s, &e) / (ns * ne)).clamp(-COS_CLAMP, COS_CLAMP);
    Ok(10.0 * ((1.0 + cos_b) / (1.0 - cos_b)).log10())
}

fn mean_removed(x: &[f64]) -> Vec<f64> {
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    x.iter().map(|v| v - mean).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

fn check_same_shape(s: &Spectrogram, s_hat: &Spectrogram) -> Result<()> {
    if s.num_frames() != s_hat.num_frames() || s.num_bins() != s_hat.num_bins() {
        return Err(Error::ShapeMismatch(format!(
            "spectrogram shapes differ: {}x{} vs {}x{}",
            s.num_frames(),
            s.num_bins(),
            s_hat.num_frames(),
            s_hat.num_bins()
        )));
    }
    Ok(())
}

/// Compressed-magnitude loss: mean over all T-F cells of
/// `(|S|^p - |S_hat|^p)^2`.
pub fn mag_loss(s: &Spectrogram, s_hat: &Spectrogram, p: f64) -> Result<f64> {
    check_same_shape(s, s_hat)?;
    let n = s.data().len() as f64;
    let sum: f64 = s
        .data()
        .iter()
        .zip(s_hat.data().iter())
        .map(|(a, b)| {
            let d = a.norm().powf(p) - b.norm().powf(p);
            d * d
        })
        .sum();
    Ok(sum / n)
}

/// Compressed complex (RI) loss: mean squared modulus of the difference of
/// the magnitude-compressed, phase-preserved spectra.
pub fn ri_loss(s: &Spectrogram, s_hat: &Spectrogram, p: f64) -> Result<f64> {
    check_same_shape(s, s_hat)?;
    let n = s.data().len() as f64;
    let sum: f64 = s
        .data()
        .iter()
        .zip(s_hat.data().iter())
        .map(|(a, b)| (compress(*a, p) - compress(*b, p)).norm_sqr())
        .sum();
    Ok(sum / n)
}

fn compress(z: Complex64, p: f64) -> Complex64 {
    let mag = z.norm();
    if mag <= 0.0 {
        Complex64::default()
    } else {
        z * mag.powf(p - 1.0)
    }
}

/// Combined training objective `L_RI + L_mag - L_s-sisnr`, computed from the
/// waveforms (the spectra use `config`). The stretched SI-SNR enters with a
/// minus sign so smaller is better throughout.
pub fn total_loss(
    reference: &[f64],
    estimate: &[f64],
    config: &StftConfig,
    p: f64,
) -> Result<f64> {
    let s = stft::stft(reference, config)?;
    let s_hat = stft::stft(estimate, config)?;
    Ok(ri_loss(&s, &s_hat, p)? + mag_loss(&s, &s_hat, p)? - s_sisnr(reference, estimate)?)
}

/// Condition label of an evaluated utterance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SegmentLabel {
    #[serde(rename = "DT")]
    DoubleTalk,
    #[serde(rename = "ST_FE")]
    FarEndSingleTalk,
}

impl std::fmt::Display for SegmentLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SegmentLabel::DoubleTalk => write!(f, "DT"),
            SegmentLabel::FarEndSingleTalk => write!(f, "ST_FE"),
        }
    }
}

/// Per-utterance evaluation row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub id: String,
    pub label: SegmentLabel,
    pub ser_db: Option<f64>,
    /// Echo return loss enhancement over near-end-silent frames; absent when
    /// no frame qualifies.
    pub erle_db: Option<f64>,
    pub sdr_db: f64,
    pub sisnr_db: f64,
    pub s_sisnr: f64,
    pub mag_loss: f64,
    pub ri_loss: f64,
    pub total_loss: f64,
}

impl EvalReport {
    pub fn csv_header() -> &'static str {
        "id,label,ser_db,erle_db,sdr_db,sisnr_db,s_sisnr,mag_loss,ri_loss,total_loss"
    }

    /// One CSV row; undefined metrics (NaN or absent) print as empty cells.
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| {
            v.filter(|x| x.is_finite())
                .map(|x| format!("{x:.6}"))
                .unwrap_or_default()
        };
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.id,
            self.label,
            opt(self.ser_db),
            opt(self.erle_db),
            opt(Some(self.sdr_db)),
            opt(Some(self.sisnr_db)),
            opt(Some(self.s_sisnr)),
            opt(Some(self.mag_loss)),
            opt(Some(self.ri_loss)),
            opt(Some(self.total_loss))
        )
    }
}
