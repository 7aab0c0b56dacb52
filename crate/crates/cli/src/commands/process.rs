//! `stws process`: run the cancellation pipeline on a far/mic WAV pair.

use std::io::Write;

use stws_core::attention::{self, AttentionParams};
use stws_core::stft::{self, StftConfig};
use stws_core::wiener::{self, PipelineConfig, WienerFilter};

use crate::config::ProcessConfig;
use crate::wav;
use crate::CliError;

pub struct ProcessSummary {
    pub num_samples: usize,
    pub num_frames: usize,
    pub attention: bool,
}

pub fn cmd_process(config: &ProcessConfig) -> Result<ProcessSummary, CliError> {
    let far_path = config
        .far
        .as_ref()
        .ok_or_else(|| CliError::Usage("process requires --far".into()))?;
    let mic_path = config
        .mic
        .as_ref()
        .ok_or_else(|| CliError::Usage("process requires --mic".into()))?;
    let out_path = config
        .out
        .as_ref()
        .ok_or_else(|| CliError::Usage("process requires --out".into()))?;

    let (far, far_rate) = wav::read_wav(far_path).map_err(|e| CliError::Usage(e.to_string()))?;
    let (mic, mic_rate) = wav::read_wav(mic_path).map_err(|e| CliError::Usage(e.to_string()))?;
    let stft_config = StftConfig::speech_16k();
    if far_rate != stft_config.sample_rate || mic_rate != stft_config.sample_rate {
        return Err(CliError::Usage(format!(
            "sample-rate mismatch: engine runs at {} Hz, inputs are {} / {} Hz",
            stft_config.sample_rate, far_rate, mic_rate
        )));
    }
    if far.len() != mic.len() {
        return Err(CliError::Usage(format!(
            "far end has {} samples, microphone has {}",
            far.len(),
            mic.len()
        )));
    }

    let pipeline = PipelineConfig {
        taps: config.m,
        window_frames: config.window_frames,
        epsilon: config.epsilon,
        stft: stft_config,
    };
    pipeline.validate().map_err(CliError::from)?;

    let (s_spec, filter) = if config.attention {
        let params = match &config.params {
            Some(path) => {
                let p = attention::load_checkpoint(path).map_err(CliError::from)?;
                if p.taps() != config.m {
                    return Err(CliError::Usage(format!(
                        "checkpoint {} holds m = {} parameters, pipeline uses m = {}",
                        path.display(),
                        p.taps(),
                        config.m
                    )));
                }
                p
            }
            None => AttentionParams::init(config.m, config.seed),
        };
        wiener::astws_pipeline(&far, &mic, &pipeline, &params).map_err(CliError::from)?
    } else {
        wiener::stws_pipeline(&far, &mic, &pipeline, None).map_err(CliError::from)?
    };

    let out = stft::istft(&s_spec).map_err(CliError::from)?;
    wav::write_wav(out_path, &out, mic_rate, config.format)
        .map_err(|e| CliError::Runtime(e.to_string()))?;

    if let Some(dump_path) = &config.dump_filter {
        dump_filter_norms(dump_path, &filter)?;
    }

    Ok(ProcessSummary {
        num_samples: out.len(),
        num_frames: s_spec.num_frames(),
        attention: config.attention,
    })
}

/// Per-frame filter diagnostics: mean and max tap-vector norm across bins.
fn dump_filter_norms(path: &std::path::Path, filter: &WienerFilter) -> Result<(), CliError> {
    let mut out = std::io::BufWriter::new(
        std::fs::File::create(path)
            .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", path.display())))?,
    );
    writeln!(out, "frame,mean_tap_norm,max_tap_norm")
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    for t in 0..filter.num_frames() {
        let mut sum = 0.0;
        let mut max = 0.0f64;
        for f in 0..filter.num_bins() {
            let norm = filter
                .taps_at(f, t)
                .iter()
                .map(|z| z.norm_sqr())
                .sum::<f64>()
                .sqrt();
            sum += norm;
            max = max.max(norm);
        }
        writeln!(
            out,
            "{t},{:.9},{:.9}",
            sum / filter.num_bins() as f64,
            max
        )
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    Ok(())
}
