//! Synthetic AEC scenarios: image-method room impulse responses, loudspeaker
//! nonlinearities, echo rendering and SER-controlled double-talk mixing.
//!
//! Everything is a pure function of (scenario, seed); two runs with the same
//! inputs produce bit-identical signals.

use num_complex::Complex64;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SPEED_OF_SOUND: f64 = 343.0;
pub const SAMPLE_RATE: u32 = 16_000;

/// Signals with total energy at or below this are treated as silent.
const SILENCE_ENERGY: f64 = 1e-30;

/// Loudspeaker distortion applied to the far end before the echo path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Nonlinearity {
    None,
    /// Clamp to `threshold * max|x|`.
    HardClip { threshold: f64 },
    /// Odd memoryless saturation `tanh(gain * x) / gain`; unit slope at the
    /// origin, saturates near `1 / gain`.
    Sigmoidal { gain: f64 },
}

/// One synthetic mixture: room geometry, endpoints, reverberation, mixing
/// ratio, distortion and the seed that makes it reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    /// Room size (l, w, h) in meters.
    pub room: [f64; 3],
    pub mic_pos: [f64; 3],
    pub src_pos: [f64; 3],
    /// Reverberation time in seconds.
    pub t60: f64,
    /// Signal-to-echo ratio in dB (ignored for far-end single talk).
    pub ser_db: i32,
    pub nonlinearity: Nonlinearity,
    pub seed: u64,
}

const ROOM_L: (f64, f64) = (3.0, 8.0);
const ROOM_W: (f64, f64) = (3.0, 7.0);
const ROOM_H: (f64, f64) = (3.0, 5.0);
const MIC_SRC_DISTANCES: [f64; 5] = [0.2, 0.3, 0.4, 0.5, 0.8];
const T60_GRID: [f64; 6] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6];

fn on_half_meter_grid(v: f64) -> bool {
    (v * 2.0 - (v * 2.0).round()).abs() < 1e-9
}

impl Scenario {
    /// Check every field against the allowed grid; the error message names
    /// the offending field.
    pub fn validate(&self) -> Result<()> {
        let [l, w, h] = self.room;
        for (name, v, (lo, hi)) in [
            ("room.l", l, ROOM_L),
            ("room.w", w, ROOM_W),
            ("room.h", h, ROOM_H),
        ] {
            if !(v >= lo && v <= hi) || !on_half_meter_grid(v) {
                return Err(Error::Config(format!(
                    "{name} = {v} must lie in [{lo}, {hi}] on a 0.5 m grid"
                )));
            }
        }
        for (name, pos) in [("mic_pos", self.mic_pos), ("src_pos", self.src_pos)] {
            for (axis, (p, dim)) in pos.iter().zip(self.room.iter()).enumerate() {
                if !(*p > 0.0 && *p < *dim) {
                    return Err(Error::Config(format!(
                        "{name}[{axis}] = {p} must be strictly inside the room (0, {dim})"
                    )));
                }
            }
        }
        let dist = distance(&self.mic_pos, &self.src_pos);
        if !MIC_SRC_DISTANCES.iter().any(|d| (dist - d).abs() < 1e-6) {
            return Err(Error::Config(format!(
                "mic_src_distance = {dist:.6} must be one of {MIC_SRC_DISTANCES:?}"
            )));
        }
        if !T60_GRID.iter().any(|t| (self.t60 - t).abs() < 1e-9) {
            return Err(Error::Config(format!(
                "t60 = {} must be one of {T60_GRID:?}",
                self.t60
            )));
        }
        if !(-10..=10).contains(&self.ser_db) {
            return Err(Error::Config(format!(
                "ser_db = {} must lie in [-10, 10]",
                self.ser_db
            )));
        }
        match self.nonlinearity {
            Nonlinearity::HardClip { threshold } if threshold <= 0.0 => {
                return Err(Error::Config(format!(
                    "nonlinearity.threshold = {threshold} must be positive"
                )));
            }
            Nonlinearity::Sigmoidal { gain } if gain <= 0.0 => {
                return Err(Error::Config(format!(
                    "nonlinearity.gain = {gain} must be positive"
                )));
            }
            _ => {}
        }
        Ok(())
    }
}

fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Room impulse response at a fixed sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Rir {
    pub taps: Vec<f64>,
    pub sample_rate: u32,
}

/// Uniform Sabine absorption for a room and target decay time.
pub fn sabine_absorption(room: &[f64; 3], t60: f64) -> f64 {
    let [l, w, h] = *room;
    let volume = l * w * h;
    let surface = 2.0 * (l * w + l * h + w * h);
    24.0 * std::f64::consts::LN_10 * volume / (SPEED_OF_SOUND * surface * t60)
}

/// Allen-Berkley image-method RIR; nearest-sample delays, length capped at
/// `min(1 s, 1.5 * t60)`.
///
/// The uniform wall reflection coefficient starts from Sabine's formula and
/// is then calibrated: a uniform-absorption shoebox decays slower than the
/// diffuse-field prediction (the tail is carried by axial image families),
/// so the reflection exponent is rescaled until the Schroeder decay of the
/// generated response matches the configured T60.
pub fn image_method_rir(scenario: &Scenario) -> Result<Rir> {
    scenario.validate()?;
    let alpha = sabine_absorption(&scenario.room, scenario.t60);
    if alpha > 1.0 {
        return Err(Error::Config(format!(
            "t60 = {} s is unreachable for room {:?}: Sabine absorption {alpha:.3} exceeds 1",
            scenario.t60, scenario.room
        )));
    }
    let mut beta = (1.0 - alpha).sqrt();
    let mut rir = build_image_rir(scenario, beta);
    for _ in 0..2 {
        let Some(measured) = schroeder_t60(&rir) else {
            break;
        };
        let ratio = measured / scenario.t60;
        if (ratio - 1.0).abs() <= 0.05 {
            break;
        }
        beta = beta.powf(ratio);
        rir = build_image_rir(scenario, beta);
    }
    Ok(rir)
}

fn build_image_rir(scenario: &Scenario, beta: f64) -> Rir {
    let fs = SAMPLE_RATE as f64;
    let duration = (1.5 * scenario.t60).min(1.0);
    let len = (duration * fs).round() as usize;
    let max_dist = duration * SPEED_OF_SOUND;

    let [lx, ly, lz] = scenario.room;
    let src = scenario.src_pos;
    let mic = scenario.mic_pos;
    let order = |dim: f64| -> i64 { (max_dist / (2.0 * dim)).ceil() as i64 + 1 };
    let (nx, ny, nz) = (order(lx), order(ly), order(lz));

    let mut taps = vec![0.0f64; len];
    let max_dist_sq = max_dist * max_dist;
    for mx in -nx..=nx {
        let min_x = (2.0 * mx.abs() as f64 * lx - 2.0 * lx).max(0.0);
        if min_x * min_x > max_dist_sq {
            continue;
        }
        for my in -ny..=ny {
            let min_y = (2.0 * my.abs() as f64 * ly - 2.0 * ly).max(0.0);
            if min_x * min_x + min_y * min_y > max_dist_sq {
                continue;
            }
            for mz in -nz..=nz {
                let min_z = (2.0 * mz.abs() as f64 * lz - 2.0 * lz).max(0.0);
                if min_x * min_x + min_y * min_y + min_z * min_z > max_dist_sq {
                    continue;
                }
                for q in 0..2i64 {
                    for j in 0..2i64 {
                        for k in 0..2i64 {
                            let px = (1 - 2 * q) as f64 * src[0] - mic[0]
                                + 2.0 * mx as f64 * lx;
                            let py = (1 - 2 * j) as f64 * src[1] - mic[1]
                                + 2.0 * my as f64 * ly;
                            let pz = (1 - 2 * k) as f64 * src[2] - mic[2]
                                + 2.0 * mz as f64 * lz;
                            let dist = (px * px + py * py + pz * pz).sqrt();
                            if dist < 1e-9 {
                                continue;
                            }
                            let delay = (dist / SPEED_OF_SOUND * fs).round() as usize;
                            if delay >= len {
                                continue;
                            }
                            let refl = beta.powi(((mx - q).abs() + mx.abs()) as i32)
                                * beta.powi(((my - j).abs() + my.abs()) as i32)
                                * beta.powi(((mz - k).abs() + mz.abs()) as i32);
                            taps[delay] += refl / (4.0 * std::f64::consts::PI * dist);
                        }
                    }
                }
            }
        }
    }
    Rir {
        taps,
        sample_rate: SAMPLE_RATE,
    }
}

/// Backward-integrated (Schroeder) energy decay in dB, normalized to 0 dB at
/// the start.
pub fn schroeder_curve(rir: &Rir) -> Vec<f64> {
    let mut acc = 0.0;
    let mut rev: Vec<f64> = rir
        .taps
        .iter()
        .rev()
        .map(|&x| {
            acc += x * x;
            acc
        })
        .collect();
    rev.reverse();
    let total = rev.first().copied().unwrap_or(0.0);
    rev.iter()
        .map(|&e| {
            if total > 0.0 && e > 0.0 {
                10.0 * (e / total).log10()
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect()
}

/// First time (seconds) the Schroeder curve falls to `level_db`.
pub fn schroeder_crossing(rir: &Rir, level_db: f64) -> Option<f64> {
    let curve = schroeder_curve(rir);
    curve
        .iter()
        .position(|&db| db <= level_db)
        .map(|n| n as f64 / rir.sample_rate as f64)
}

/// Decay-fit T60 estimate: least-squares slope of the Schroeder curve
/// between -5 and -25 dB, extrapolated to -60 dB. Robust against the direct
/// path dominating the curve start and the truncation floor at the tail.
pub fn schroeder_t60(rir: &Rir) -> Option<f64> {
    let curve = schroeder_curve(rir);
    let fs = rir.sample_rate as f64;
    let pts: Vec<(f64, f64)> = curve
        .iter()
        .enumerate()
        .filter(|(_, &db)| (-25.0..=-5.0).contains(&db))
        .map(|(n, &db)| (n as f64 / fs, db))
        .collect();
    if pts.len() < 8 {
        return None;
    }
    let n = pts.len() as f64;
    let sx: f64 = pts.iter().map(|p| p.0).sum();
    let sy: f64 = pts.iter().map(|p| p.1).sum();
    let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
    let denom = n * sxx - sx * sx;
    if denom <= 0.0 {
        return None;
    }
    let slope = (n * sxy - sx * sy) / denom; // dB per second, negative
    if slope >= -1e-9 {
        return None;
    }
    Some(-60.0 / slope)
}

/// Apply the loudspeaker distortion model.
pub fn apply_nonlinearity(x: &[f64], model: &Nonlinearity) -> Result<Vec<f64>> {
    match *model {
        Nonlinearity::None => Ok(x.to_vec()),
        Nonlinearity::HardClip { threshold } => {
            if threshold <= 0.0 {
                return Err(Error::Config(format!(
                    "hard clip threshold must be positive, got {threshold}"
                )));
            }
            let peak = x.iter().fold(0.0f64, |acc, &v| acc.max(v.abs()));
            let limit = threshold * peak;
            Ok(x.iter().map(|&v| v.clamp(-limit, limit)).collect())
        }
        Nonlinearity::Sigmoidal { gain } => {
            if gain <= 0.0 {
                return Err(Error::Config(format!(
                    "sigmoidal gain must be positive, got {gain}"
                )));
            }
            Ok(x.iter().map(|&v| (gain * v).tanh() / gain).collect())
        }
    }
}

/// Scale the echo so that `10 log10(P_near / P_echo)` equals `ser_db`, then
/// mix. Returns the microphone signal and the applied echo scale.
pub fn mix_at_ser(near: &[f64], echo: &[f64], ser_db: f64) -> Result<(Vec<f64>, f64)> {
    if near.len() != echo.len() {
        return Err(Error::ShapeMismatch(format!(
            "near has {} samples, echo has {}",
            near.len(),
            echo.len()
        )));
    }
    let p_near: f64 = near.iter().map(|v| v * v).sum();
    let p_echo: f64 = echo.iter().map(|v| v * v).sum();
    if p_echo <= SILENCE_ENERGY {
        return Err(Error::InvalidInput("echo signal has zero energy".into()));
    }
    if p_near <= SILENCE_ENERGY {
        return Err(Error::InvalidInput(
            "near-end signal has zero energy; SER mixing is undefined".into(),
        ));
    }
    let scale = (p_near / (p_echo * 10f64.powf(ser_db / 10.0))).sqrt();
    let mic = near
        .iter()
        .zip(echo.iter())
        .map(|(&n, &e)| n + scale * e)
        .collect();
    Ok((mic, scale))
}

/// Linear convolution via FFT, truncated to the input length so all rendered
/// signals stay aligned.
pub fn convolve(x: &[f64], h: &[f64]) -> Vec<f64> {
    if x.is_empty() || h.is_empty() {
        return vec![0.0; x.len()];
    }
    let out_len = x.len();
    let full = x.len() + h.len() - 1;
    let fft_len = full.next_power_of_two();
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(fft_len);
    let ifft = planner.plan_fft_inverse(fft_len);

    let mut a: Vec<Complex64> = x
        .iter()
        .map(|&v| Complex64::new(v, 0.0))
        .chain(std::iter::repeat(Complex64::default()))
        .take(fft_len)
        .collect();
    let mut b: Vec<Complex64> = h
        .iter()
        .map(|&v| Complex64::new(v, 0.0))
        .chain(std::iter::repeat(Complex64::default()))
        .take(fft_len)
        .collect();
    fft.process(&mut a);
    fft.process(&mut b);
    for (u, v) in a.iter_mut().zip(b.iter()) {
        *u *= v;
    }
    ifft.process(&mut a);
    let scale = 1.0 / fft_len as f64;
    a[..out_len].iter().map(|z| z.re * scale).collect()
}

/// All signals of one rendered scenario, aligned sample-for-sample:
/// `mic = near + echo` exactly, with `echo` already SER-scaled.
#[derive(Debug, Clone)]
pub struct RenderedBundle {
    pub far: Vec<f64>,
    pub near: Vec<f64>,
    pub echo: Vec<f64>,
    pub mic: Vec<f64>,
    /// Scale applied to the raw rendered echo to hit the configured SER
    /// (1.0 for far-end single talk).
    pub echo_scale: f64,
}

/// Render with an explicit echo path. A silent near end produces the far-end
/// single-talk case `mic = echo`.
pub fn render_with_rir(
    rir: &Rir,
    far: &[f64],
    near: &[f64],
    ser_db: f64,
    nonlinearity: &Nonlinearity,
) -> Result<RenderedBundle> {
    if far.len() != near.len() {
        return Err(Error::ShapeMismatch(format!(
            "far has {} samples, near has {}",
            far.len(),
            near.len()
        )));
    }
    let driven = apply_nonlinearity(far, nonlinearity)?;
    let echo_raw = convolve(&driven, &rir.taps);
    let p_near: f64 = near.iter().map(|v| v * v).sum();
    if p_near <= SILENCE_ENERGY {
        let mic = echo_raw.clone();
        return Ok(RenderedBundle {
            far: far.to_vec(),
            near: near.to_vec(),
            echo: echo_raw,
            mic,
            echo_scale: 1.0,
        });
    }
    let (mic, scale) = mix_at_ser(near, &echo_raw, ser_db)?;
    let echo = echo_raw.iter().map(|&e| scale * e).collect();
    Ok(RenderedBundle {
        far: far.to_vec(),
        near: near.to_vec(),
        echo,
        mic,
        echo_scale: scale,
    })
}

/// Rendered scenario bundle plus its provenance.
#[derive(Debug, Clone)]
pub struct RenderedScenario {
    pub bundle: RenderedBundle,
    pub rir: Rir,
    pub scenario: Scenario,
}

/// Render a scenario end to end: image-method RIR, loudspeaker distortion,
/// echo convolution and SER mixing.
pub fn render_scenario(scenario: &Scenario, far: &[f64], near: &[f64]) -> Result<RenderedScenario> {
    let rir = image_method_rir(scenario)?;
    let bundle = render_with_rir(&rir, far, near, scenario.ser_db as f64, &scenario.nonlinearity)?;
    Ok(RenderedScenario {
        bundle,
        rir,
        scenario: scenario.clone(),
    })
}

/// Draw a random valid scenario from the allowed grid. The T60 value is
/// drawn from the subset that Sabine absorption can realize for the sampled
/// room; 90% of draws get a nonlinearity (hard clip 0.8 or sigmoidal drive
/// 4, evenly split).
pub fn sample_scenario(seed: u64) -> Scenario {
    sample_scenario_with(seed, 0.9)
}

/// [`sample_scenario`] with an explicit fraction of nonlinear scenarios.
pub fn sample_scenario_with(seed: u64, nonlinear_fraction: f64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = 3.0 + 0.5 * rng.random_range(0..=10) as f64;
    let w = 3.0 + 0.5 * rng.random_range(0..=8) as f64;
    let h = 3.0 + 0.5 * rng.random_range(0..=4) as f64;
    let room = [l, w, h];

    let feasible: Vec<f64> = T60_GRID
        .iter()
        .copied()
        .filter(|&t60| sabine_absorption(&room, t60) < 0.99)
        .collect();
    let t60 = feasible[rng.random_range(0..feasible.len())];

    let margin = 0.5;
    let mic = [
        rng.random_range(margin..l - margin),
        rng.random_range(margin..w - margin),
        rng.random_range(margin..h - margin),
    ];
    let dist = MIC_SRC_DISTANCES[rng.random_range(0..MIC_SRC_DISTANCES.len())];
    let src = loop {
        let phi = rng.random_range(0.0..std::f64::consts::TAU);
        let cos_theta: f64 = rng.random_range(-1.0..1.0);
        let sin_theta = (1.0 - cos_theta * cos_theta).sqrt();
        let cand = [
            mic[0] + dist * sin_theta * phi.cos(),
            mic[1] + dist * sin_theta * phi.sin(),
            mic[2] + dist * cos_theta,
        ];
        let inside = cand
            .iter()
            .zip(room.iter())
            .all(|(p, dim)| *p > 0.05 && *p < dim - 0.05);
        if inside {
            break cand;
        }
    };

    let ser_db = rng.random_range(-10..=10);
    let nonlinearity = if rng.random_bool(nonlinear_fraction.clamp(0.0, 1.0)) {
        if rng.random_bool(0.5) {
            Nonlinearity::HardClip { threshold: 0.8 }
        } else {
            Nonlinearity::Sigmoidal { gain: 4.0 }
        }
    } else {
        Nonlinearity::None
    };

    Scenario {
        room,
        mic_pos: mic,
        src_pos: src,
        t60,
        ser_db,
        nonlinearity,
        seed,
    }
}

/// Self-contained "speech-like" source: spectrally tilted noise under a
/// syllabic on/off envelope with smooth ramps and real pauses. Not speech,
/// but enough structure (bursts, silences, 1/f-ish tilt) to exercise
/// double-talk logic without bundling a corpus.
pub fn speech_like(len: usize, sample_rate: u32, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fs = sample_rate as f64;

    // Excitation: leaky-integrated white noise plus a little of the raw
    // noise to keep some high end; DC-blocked.
    let mut low = 0.0f64;
    let mut dc = 0.0f64;
    let mut prev = 0.0f64;
    let mut x: Vec<f64> = (0..len)
        .map(|_| {
            let white: f64 = rng.random_range(-1.0..1.0);
            low = 0.9 * low + white;
            let shaped = 0.7 * low + 0.3 * white;
            let blocked = shaped - prev + 0.995 * dc;
            prev = shaped;
            dc = blocked;
            blocked
        })
        .collect();

    // Syllabic envelope: alternating bursts and pauses with raised-cosine
    // ramps.
    let ramp = (0.01 * fs) as usize;
    let mut env = vec![0.0f64; len];
    let mut pos = 0usize;
    let mut active = rng.random_bool(0.6);
    while pos < len {
        let dur_s = if active {
            rng.random_range(0.08..0.40)
        } else {
            rng.random_range(0.05..0.35)
        };
        let level = if active {
            rng.random_range(0.4..1.0)
        } else {
            0.0
        };
        let dur = ((dur_s * fs) as usize).max(ramp * 2);
        let end = (pos + dur).min(len);
        for (i, e) in env[pos..end].iter_mut().enumerate() {
            let up = ((i as f64 + 1.0) / ramp as f64).min(1.0);
            let down = ((end - pos - i) as f64 / ramp as f64).min(1.0);
            *e = level * 0.5 * (1.0 - (std::f64::consts::PI * up).cos()) * 0.5
                * (1.0 - (std::f64::consts::PI * down).cos());
        }
        pos = end;
        active = !active;
    }

    for (s, e) in x.iter_mut().zip(env.iter()) {
        *s *= e;
    }
    let peak = x.iter().fold(0.0f64, |acc, &v| acc.max(v.abs()));
    if peak > 0.0 {
        let g = 0.5 / peak;
        for s in x.iter_mut() {
            *s *= g;
        }
    }
    x
}
