//! Run configurations: JSON files with command-line overrides (flags win).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stws_core::metrics::SegmentLabel;
use stws_core::simulate::Scenario;

use crate::wav::WavFormat;
use crate::CliError;

/// Scenario condition produced by `simulate`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    /// Near end and echo both active (DT).
    #[default]
    DoubleTalk,
    /// Silent near end (ST_FE).
    FarEndSingleTalk,
}

impl ScenarioKind {
    pub fn label(self) -> SegmentLabel {
        match self {
            ScenarioKind::DoubleTalk => SegmentLabel::DoubleTalk,
            ScenarioKind::FarEndSingleTalk => SegmentLabel::FarEndSingleTalk,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub out_dir: Option<PathBuf>,
    pub count: usize,
    pub seed: u64,
    pub duration_s: f64,
    pub kind: ScenarioKind,
    /// SER values cycled across the batch; random per scenario when empty.
    pub ser_db: Vec<i32>,
    pub nonlinear_fraction: f64,
    pub format: WavFormat,
    /// Render exactly this scenario instead of sampling a batch.
    pub scenario_file: Option<PathBuf>,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            out_dir: None,
            count: 10,
            seed: 1,
            duration_s: 5.0,
            kind: ScenarioKind::DoubleTalk,
            ser_db: Vec::new(),
            nonlinear_fraction: 0.9,
            format: WavFormat::Float32,
            scenario_file: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProcessConfig {
    pub far: Option<PathBuf>,
    pub mic: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub attention: bool,
    /// Attention checkpoint; a fresh seeded init is used when absent.
    pub params: Option<PathBuf>,
    /// Filter blocks per bin.
    pub m: usize,
    pub window_frames: usize,
    pub epsilon: f64,
    pub seed: u64,
    pub format: WavFormat,
    /// Per-frame filter norm diagnostics (CSV), off by default.
    pub dump_filter: Option<PathBuf>,
}

impl Default for ProcessConfig {
    fn default() -> Self {
        Self {
            far: None,
            mic: None,
            out: None,
            attention: false,
            params: None,
            m: 20,
            window_frames: 100,
            epsilon: 1e-3,
            seed: 17,
            format: WavFormat::Float32,
            dump_filter: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    pub bundle_dir: Option<PathBuf>,
    /// Directory of processed files named `<bundle-id>.wav`; the bundle's own
    /// microphone signal is evaluated when absent (the unprocessed row).
    pub processed_dir: Option<PathBuf>,
    pub csv: Option<PathBuf>,
    pub json: Option<PathBuf>,
    /// Frame length (samples) for near-end-silence segmentation in ERLE.
    pub erle_frame: usize,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            bundle_dir: None,
            processed_dir: None,
            csv: None,
            json: None,
            erle_frame: 160,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub out: Option<PathBuf>,
    pub scenarios: usize,
    pub seed: u64,
    pub duration_s: f64,
    pub m: usize,
    pub window_frames: usize,
    pub steps: usize,
    pub lr: f64,
    pub bin_stride: usize,
    pub ser_db: i32,
    pub nonlinear_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            out: None,
            scenarios: 12,
            seed: 1,
            duration_s: 1.0,
            m: 8,
            window_frames: 50,
            steps: 250,
            lr: 1.0,
            bin_stride: 10,
            ser_db: 0,
            nonlinear_fraction: 0.0,
        }
    }
}

/// Load a JSON config file into any of the config types.
pub fn load_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
}

/// Load a scenario description file.
pub fn load_scenario(path: &Path) -> Result<Scenario, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read scenario {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("invalid scenario {}: {e}", path.display())))
}

/// Metadata stored next to the four WAV files of a bundle.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BundleMeta {
    pub id: String,
    pub kind: ScenarioKind,
    pub scenario: Scenario,
    pub duration_s: f64,
    pub num_samples: usize,
    pub sample_rate: u32,
    pub echo_scale: f64,
    /// SER measured from the written signals; absent for far-end single talk.
    pub measured_ser_db: Option<f64>,
    pub format: WavFormat,
}
