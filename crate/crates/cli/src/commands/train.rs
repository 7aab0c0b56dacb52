//! `stws train`: fit the attention stage with the surrogate objective and
//! write a checkpoint.

use stws_core::attention::{self, AttentionParams};
use stws_core::simulate;
use stws_core::stft::StftConfig;
use stws_core::surrogate;
use stws_core::wiener::PipelineConfig;

use crate::config::TrainConfig;
use crate::CliError;

const SEED_STRIDE: u64 = 0x9e37_79b9_7f4a_7c15;

pub struct TrainSummary {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub num_examples: usize,
}

pub fn cmd_train(config: &TrainConfig) -> Result<TrainSummary, CliError> {
    let out = config
        .out
        .as_ref()
        .ok_or_else(|| CliError::Usage("train requires --out for the checkpoint".into()))?;
    if config.scenarios == 0 || config.steps == 0 {
        return Err(CliError::Usage(
            "train needs at least one scenario and one step".into(),
        ));
    }
    if config.bin_stride == 0 {
        return Err(CliError::Usage("bin_stride must be positive".into()));
    }

    let pipeline = PipelineConfig {
        taps: config.m,
        window_frames: config.window_frames,
        epsilon: 1e-3,
        stft: StftConfig::speech_16k(),
    };
    pipeline.validate().map_err(CliError::from)?;

    let len = (config.duration_s * simulate::SAMPLE_RATE as f64).round() as usize;
    let bins: Vec<usize> = (4..pipeline.stft.num_bins() / 2).step_by(config.bin_stride).collect();

    let mut examples = Vec::new();
    for i in 0..config.scenarios {
        let seed = config.seed.wrapping_add(SEED_STRIDE.wrapping_mul(i as u64));
        let mut scenario = simulate::sample_scenario_with(seed, config.nonlinear_fraction);
        scenario.ser_db = config.ser_db;
        let far = simulate::speech_like(len, simulate::SAMPLE_RATE, seed ^ 0x5eed_fa11);
        let near = simulate::speech_like(len, simulate::SAMPLE_RATE, seed ^ 0x5eed_0ea1);
        let rendered = simulate::render_scenario(&scenario, &far, &near).map_err(CliError::from)?;
        examples.extend(
            surrogate::build_examples(
                &rendered.bundle.far,
                &rendered.bundle.mic,
                &rendered.bundle.echo,
                &pipeline,
                &bins,
            )
            .map_err(CliError::from)?,
        );
    }
    if examples.is_empty() {
        return Err(CliError::Runtime(
            "no usable training slices (all selected bins were silent)".into(),
        ));
    }

    let mut params = AttentionParams::init(config.m, 17);
    let trace =
        surrogate::train_surrogate(&mut params, &examples, config.steps, config.lr)
            .map_err(CliError::from)?;
    attention::save_checkpoint(&params, out).map_err(CliError::from)?;

    Ok(TrainSummary {
        initial_loss: trace.initial(),
        final_loss: trace.final_loss(),
        num_examples: examples.len(),
    })
}
