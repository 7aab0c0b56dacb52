//! `stws evaluate`: score processed utterances against bundle ground truth.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use stws_core::metrics::{self, EvalReport};
use stws_core::stft::{self, StftConfig};

use crate::config::{BundleMeta, EvaluateConfig, ScenarioKind};
use crate::wav;
use crate::CliError;

pub struct EvaluateSummary {
    pub reports: Vec<EvalReport>,
    pub csv_path: Option<PathBuf>,
    pub json_path: Option<PathBuf>,
}

pub fn cmd_evaluate(config: &EvaluateConfig) -> Result<EvaluateSummary, CliError> {
    let bundle_dir = config
        .bundle_dir
        .as_ref()
        .ok_or_else(|| CliError::Usage("evaluate requires --bundle-dir".into()))?;
    if !bundle_dir.is_dir() {
        return Err(CliError::Usage(format!(
            "bundle directory {} does not exist",
            bundle_dir.display()
        )));
    }

    let mut bundle_paths: Vec<PathBuf> = std::fs::read_dir(bundle_dir)
        .map_err(|e| CliError::Usage(format!("cannot list {}: {e}", bundle_dir.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.join("scenario.json").is_file())
        .collect();
    bundle_paths.sort();

    let mut reports = Vec::with_capacity(bundle_paths.len());
    for dir in &bundle_paths {
        reports.push(evaluate_bundle(config, dir)?);
    }

    if let Some(csv_path) = &config.csv {
        write_csv(csv_path, &reports)?;
    }
    if let Some(json_path) = &config.json {
        write_aggregate(json_path, &reports)?;
    }
    Ok(EvaluateSummary {
        reports,
        csv_path: config.csv.clone(),
        json_path: config.json.clone(),
    })
}

fn evaluate_bundle(config: &EvaluateConfig, dir: &Path) -> Result<EvalReport, CliError> {
    let meta: BundleMeta = {
        let text = std::fs::read_to_string(dir.join("scenario.json"))
            .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", dir.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("invalid metadata in {}: {e}", dir.display())))?
    };
    let read = |name: &str| -> Result<Vec<f64>, CliError> {
        let (samples, rate) = wav::read_wav(&dir.join(name))
            .map_err(|e| CliError::Usage(format!("missing reference signal: {e}")))?;
        if rate != meta.sample_rate {
            return Err(CliError::Usage(format!(
                "{name} in {} has sample rate {rate}, metadata says {}",
                dir.display(),
                meta.sample_rate
            )));
        }
        Ok(samples)
    };
    let near = read("near.wav")?;
    let mic = read("mic.wav")?;

    let processed = match &config.processed_dir {
        Some(proc_dir) => {
            let path = proc_dir.join(format!("{}.wav", meta.id));
            let (samples, _) = wav::read_wav(&path).map_err(|e| {
                CliError::Usage(format!("missing processed file for {}: {e}", meta.id))
            })?;
            samples
        }
        None => mic.clone(),
    };
    if processed.len() != mic.len() {
        return Err(CliError::Usage(format!(
            "processed file for {} has {} samples, bundle has {}",
            meta.id,
            processed.len(),
            mic.len()
        )));
    }

    let label = meta.kind.label();
    let erle_db = metrics::erle_segmented(&mic, &processed, &near, config.erle_frame)
        .map_err(CliError::from)?;

    // Reference-based metrics need a nonzero near end.
    let (sdr_db, sisnr_db, s_sisnr, mag, ri, total) = if matches!(meta.kind, ScenarioKind::DoubleTalk)
    {
        let cfg = StftConfig::speech_16k();
        let near_spec = stft::stft(&near, &cfg).map_err(CliError::from)?;
        let proc_spec = stft::stft(&processed, &cfg).map_err(CliError::from)?;
        let p = metrics::SPECTRAL_COMPRESSION;
        (
            Some(metrics::sdr_db(&near, &processed).map_err(CliError::from)?),
            Some(metrics::sisnr_db(&near, &processed).map_err(CliError::from)?),
            Some(metrics::s_sisnr(&near, &processed).map_err(CliError::from)?),
            Some(metrics::mag_loss(&near_spec, &proc_spec, p).map_err(CliError::from)?),
            Some(metrics::ri_loss(&near_spec, &proc_spec, p).map_err(CliError::from)?),
            Some(metrics::total_loss(&near, &processed, &cfg, p).map_err(CliError::from)?),
        )
    } else {
        (None, None, None, None, None, None)
    };

    Ok(EvalReport {
        id: meta.id,
        label,
        ser_db: meta.measured_ser_db.map(|_| meta.scenario.ser_db as f64),
        erle_db,
        sdr_db: sdr_db.unwrap_or(f64::NAN),
        sisnr_db: sisnr_db.unwrap_or(f64::NAN),
        s_sisnr: s_sisnr.unwrap_or(f64::NAN),
        mag_loss: mag.unwrap_or(f64::NAN),
        ri_loss: ri.unwrap_or(f64::NAN),
        total_loss: total.unwrap_or(f64::NAN),
    })
}

fn write_csv(path: &Path, reports: &[EvalReport]) -> Result<(), CliError> {
    let mut out = std::io::BufWriter::new(
        std::fs::File::create(path)
            .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", path.display())))?,
    );
    writeln!(out, "{}", EvalReport::csv_header()).map_err(|e| CliError::Runtime(e.to_string()))?;
    for r in reports {
        writeln!(out, "{}", r.csv_row()).map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct AggregateGroup {
    label: String,
    ser_db: Option<i64>,
    count: usize,
    mean: BTreeMap<&'static str, f64>,
    median: BTreeMap<&'static str, f64>,
}

#[derive(Serialize)]
struct Aggregate {
    groups: Vec<AggregateGroup>,
}

fn write_aggregate(path: &Path, reports: &[EvalReport]) -> Result<(), CliError> {
    let mut grouped: BTreeMap<(String, Option<i64>), Vec<&EvalReport>> = BTreeMap::new();
    for r in reports {
        let key = (r.label.to_string(), r.ser_db.map(|s| s.round() as i64));
        grouped.entry(key).or_default().push(r);
    }

    let metric =
        |r: &EvalReport, name: &str| -> Option<f64> {
            let v = match name {
                "erle_db" => return r.erle_db,
                "sdr_db" => r.sdr_db,
                "sisnr_db" => r.sisnr_db,
                "s_sisnr" => r.s_sisnr,
                "mag_loss" => r.mag_loss,
                "ri_loss" => r.ri_loss,
                "total_loss" => r.total_loss,
                _ => f64::NAN,
            };
            v.is_finite().then_some(v)
        };

    let mut groups = Vec::new();
    for ((label, ser_db), members) in grouped {
        let mut mean = BTreeMap::new();
        let mut median = BTreeMap::new();
        for name in [
            "erle_db", "sdr_db", "sisnr_db", "s_sisnr", "mag_loss", "ri_loss", "total_loss",
        ] {
            let mut values: Vec<f64> = members.iter().filter_map(|r| metric(r, name)).collect();
            if values.is_empty() {
                continue;
            }
            values.sort_by(|a, b| a.partial_cmp(b).unwrap());
            mean.insert(name, values.iter().sum::<f64>() / values.len() as f64);
            let mid = values.len() / 2;
            let med = if values.len() % 2 == 0 {
                0.5 * (values[mid - 1] + values[mid])
            } else {
                values[mid]
            };
            median.insert(name, med);
        }
        groups.push(AggregateGroup {
            label,
            ser_db,
            count: members.len(),
            mean,
            median,
        });
    }

    let text = serde_json::to_string_pretty(&Aggregate { groups })
        .map_err(|e| CliError::Runtime(format!("aggregate serialization failed: {e}")))?;
    std::fs::write(path, text)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
    Ok(())
}
