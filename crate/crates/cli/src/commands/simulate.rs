//! `stws simulate`: synthesize scenario bundles on disk.

use std::path::PathBuf;

use rayon::prelude::*;
use stws_core::simulate::{self, Scenario};

use crate::config::{BundleMeta, ScenarioKind, SimulateConfig};
use crate::wav;
use crate::CliError;

/// Seed spacing between scenarios of one batch.
const SEED_STRIDE: u64 = 0x9e37_79b9_7f4a_7c15;

pub struct SimulatedBundle {
    pub dir: PathBuf,
    pub meta: BundleMeta,
}

pub fn cmd_simulate(config: &SimulateConfig) -> Result<Vec<SimulatedBundle>, CliError> {
    let out_dir = config
        .out_dir
        .as_ref()
        .ok_or_else(|| CliError::Usage("simulate requires an output directory".into()))?;
    if config.duration_s <= 0.0 {
        return Err(CliError::Usage(format!(
            "duration_s must be positive, got {}",
            config.duration_s
        )));
    }
    for ser in &config.ser_db {
        if !(-10..=10).contains(ser) {
            return Err(CliError::Usage(format!(
                "ser_db = {ser} must lie in [-10, 10]"
            )));
        }
    }
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Usage(format!("cannot create {}: {e}", out_dir.display())))?;

    let explicit = config
        .scenario_file
        .as_deref()
        .map(crate::config::load_scenario)
        .transpose()?;
    if let Some(s) = &explicit {
        s.validate().map_err(CliError::from)?;
    }

    let count = if explicit.is_some() { 1 } else { config.count };
    let len = (config.duration_s * simulate::SAMPLE_RATE as f64).round() as usize;

    let bundles: Vec<Result<SimulatedBundle, CliError>> = (0..count)
        .into_par_iter()
        .map(|i| {
            let scenario = match &explicit {
                Some(s) => s.clone(),
                None => {
                    let seed = config.seed.wrapping_add(SEED_STRIDE.wrapping_mul(i as u64));
                    let mut s = simulate::sample_scenario_with(seed, config.nonlinear_fraction);
                    if !config.ser_db.is_empty() {
                        s.ser_db = config.ser_db[i % config.ser_db.len()];
                    }
                    s
                }
            };
            render_bundle(config, out_dir, i, &scenario, len)
        })
        .collect();

    bundles.into_iter().collect()
}

fn render_bundle(
    config: &SimulateConfig,
    out_dir: &std::path::Path,
    index: usize,
    scenario: &Scenario,
    len: usize,
) -> Result<SimulatedBundle, CliError> {
    let id = format!("scenario_{index:04}");
    let far = simulate::speech_like(len, simulate::SAMPLE_RATE, scenario.seed ^ 0x5eed_fa11);
    let near = match config.kind {
        ScenarioKind::DoubleTalk => {
            simulate::speech_like(len, simulate::SAMPLE_RATE, scenario.seed ^ 0x5eed_0ea1)
        }
        ScenarioKind::FarEndSingleTalk => vec![0.0; len],
    };
    let rendered = simulate::render_scenario(scenario, &far, &near).map_err(CliError::from)?;
    let bundle = rendered.bundle;

    let measured_ser_db = match config.kind {
        ScenarioKind::DoubleTalk => {
            let p_near: f64 = bundle.near.iter().map(|v| v * v).sum();
            let p_echo: f64 = bundle.echo.iter().map(|v| v * v).sum();
            Some(10.0 * (p_near / p_echo).log10())
        }
        ScenarioKind::FarEndSingleTalk => None,
    };

    let dir = out_dir.join(&id);
    std::fs::create_dir_all(&dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
    let write = |name: &str, samples: &[f64]| -> Result<(), CliError> {
        wav::write_wav(
            &dir.join(name),
            samples,
            simulate::SAMPLE_RATE,
            config.format,
        )
        .map_err(|e| CliError::Runtime(e.to_string()))
    };
    write("far.wav", &bundle.far)?;
    write("near.wav", &bundle.near)?;
    write("echo.wav", &bundle.echo)?;
    write("mic.wav", &bundle.mic)?;

    let meta = BundleMeta {
        id: id.clone(),
        kind: config.kind,
        scenario: scenario.clone(),
        duration_s: config.duration_s,
        num_samples: len,
        sample_rate: simulate::SAMPLE_RATE,
        echo_scale: bundle.echo_scale,
        measured_ser_db,
        format: config.format,
    };
    let meta_json = serde_json::to_string_pretty(&meta)
        .map_err(|e| CliError::Runtime(format!("metadata serialization failed: {e}")))?;
    std::fs::write(dir.join("scenario.json"), meta_json)
        .map_err(|e| CliError::Runtime(format!("cannot write metadata: {e}")))?;

    Ok(SimulatedBundle { dir, meta })
}
