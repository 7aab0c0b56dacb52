//! Minimal WAV reader/writer: mono, 16 kHz, PCM16 or IEEE float32.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum WavError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Format { path: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum, Default)]
#[serde(rename_all = "snake_case")]
pub enum WavFormat {
    /// 16-bit signed integer PCM.
    Pcm16,
    /// 32-bit IEEE float.
    #[default]
    Float32,
}

fn io_err(path: &Path, source: std::io::Error) -> WavError {
    WavError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn format_err(path: &Path, reason: impl Into<String>) -> WavError {
    WavError::Format {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

/// Write a mono WAV file.
pub fn write_wav(
    path: &Path,
    samples: &[f64],
    sample_rate: u32,
    format: WavFormat,
) -> Result<(), WavError> {
    let (audio_format, bits): (u16, u16) = match format {
        WavFormat::Pcm16 => (1, 16),
        WavFormat::Float32 => (3, 32),
    };
    let bytes_per_sample = (bits / 8) as u32;
    let data_len = samples.len() as u32 * bytes_per_sample;
    let fact_len: u32 = if audio_format == 3 { 12 } else { 0 };
    let riff_len = 4 + 24 + fact_len + 8 + data_len;

    let mut buf = Vec::with_capacity(riff_len as usize + 8);
    buf.extend_from_slice(b"RIFF");
    buf.extend_from_slice(&riff_len.to_le_bytes());
    buf.extend_from_slice(b"WAVE");
    buf.extend_from_slice(b"fmt ");
    buf.extend_from_slice(&16u32.to_le_bytes());
    buf.extend_from_slice(&audio_format.to_le_bytes());
    buf.extend_from_slice(&1u16.to_le_bytes()); // mono
    buf.extend_from_slice(&sample_rate.to_le_bytes());
    buf.extend_from_slice(&(sample_rate * bytes_per_sample).to_le_bytes());
    buf.extend_from_slice(&(bytes_per_sample as u16).to_le_bytes());
    buf.extend_from_slice(&bits.to_le_bytes());
    if audio_format == 3 {
        buf.extend_from_slice(b"fact");
        buf.extend_from_slice(&4u32.to_le_bytes());
        buf.extend_from_slice(&(samples.len() as u32).to_le_bytes());
    }
    buf.extend_from_slice(b"data");
    buf.extend_from_slice(&data_len.to_le_bytes());
    match format {
        WavFormat::Pcm16 => {
            for &s in samples {
                let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        WavFormat::Float32 => {
            for &s in samples {
                buf.extend_from_slice(&(s as f32).to_le_bytes());
            }
        }
    }
    let mut file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    file.write_all(&buf).map_err(|e| io_err(path, e))
}

/// Read a mono WAV file; returns samples in [-1, 1]-ish range and the
/// sample rate.
pub fn read_wav(path: &Path) -> Result<(Vec<f64>, u32), WavError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| io_err(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| io_err(path, e))?;
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(format_err(path, "not a RIFF/WAVE file"));
    }

    let mut fmt: Option<(u16, u16, u32)> = None; // (audio_format, bits, rate)
    let mut data: Option<&[u8]> = None;
    let mut pos = 12;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let len = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_end = (pos + 8 + len).min(bytes.len());
        let body = &bytes[pos + 8..body_end];
        match id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(format_err(path, "fmt chunk too short"));
                }
                let audio_format = u16::from_le_bytes(body[0..2].try_into().unwrap());
                let channels = u16::from_le_bytes(body[2..4].try_into().unwrap());
                let rate = u32::from_le_bytes(body[4..8].try_into().unwrap());
                let bits = u16::from_le_bytes(body[14..16].try_into().unwrap());
                if channels != 1 {
                    return Err(format_err(
                        path,
                        format!("expected mono audio, found {channels} channels"),
                    ));
                }
                fmt = Some((audio_format, bits, rate));
            }
            b"data" => {
                data = Some(body);
            }
            _ => {}
        }
        pos += 8 + len + (len & 1); // chunks are word aligned
    }

    let (audio_format, bits, rate) =
        fmt.ok_or_else(|| format_err(path, "missing fmt chunk"))?;
    let data = data.ok_or_else(|| format_err(path, "missing data chunk"))?;
    let samples = match (audio_format, bits) {
        (1, 16) => data
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
            .collect(),
        (3, 32) => data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
        other => {
            return Err(format_err(
                path,
                format!("unsupported sample format {other:?} (want PCM16 or float32)"),
            ));
        }
    };
    Ok((samples, rate))
}
