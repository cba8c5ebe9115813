//! Mono WAV persistence: PCM16 and IEEE float32.

use std::path::Path;

use crate::dsp::Waveform;
use crate::error::{Error, Result};

/// Sample encoding for written files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum WavEncoding {
    Pcm16,
    Float32,
}

pub fn read(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let mut reader = hound::WavReader::open(path)
        .map_err(|e| Error::format(format!("{}: {}", path.display(), describe(&e))))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::format(format!(
            "{}: fmt chunk declares {} channels, only mono is supported",
            path.display(),
            spec.channels
        )));
    }
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => {
            let collected: std::result::Result<Vec<i16>, _> = reader.samples::<i16>().collect();
            collected
                .map_err(|e| Error::format(format!("{}: data chunk: {}", path.display(), describe(&e))))?
                .into_iter()
                .map(|s| f64::from(s) / 32768.0)
                .collect()
        }
        (hound::SampleFormat::Float, 32) => {
            let collected: std::result::Result<Vec<f32>, _> = reader.samples::<f32>().collect();
            collected
                .map_err(|e| Error::format(format!("{}: data chunk: {}", path.display(), describe(&e))))?
                .into_iter()
                .map(f64::from)
                .collect()
        }
        (fmt, bits) => {
            return Err(Error::format(format!(
                "{}: fmt chunk declares unsupported codec {fmt:?}/{bits}-bit (want PCM16 or float32)",
                path.display()
            )))
        }
    };
    if samples.is_empty() {
        return Err(Error::format(format!("{}: data chunk holds no samples", path.display())));
    }
    Waveform::new(samples, spec.sample_rate)
}

pub fn write(path: impl AsRef<Path>, w: &Waveform, encoding: WavEncoding) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: match encoding {
            WavEncoding::Pcm16 => 16,
            WavEncoding::Float32 => 32,
        },
        sample_format: match encoding {
            WavEncoding::Pcm16 => hound::SampleFormat::Int,
            WavEncoding::Float32 => hound::SampleFormat::Float,
        },
    };
    let mut writer = hound::WavWriter::create(path, spec)
        .map_err(|e| Error::format(format!("{}: {}", path.display(), describe(&e))))?;
    match encoding {
        WavEncoding::Pcm16 => {
            for &s in &w.samples {
                let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                writer
                    .write_sample(v)
                    .map_err(|e| Error::format(format!("{}: {}", path.display(), describe(&e))))?;
            }
        }
        WavEncoding::Float32 => {
            for &s in &w.samples {
                writer
                    .write_sample(s as f32)
                    .map_err(|e| Error::format(format!("{}: {}", path.display(), describe(&e))))?;
            }
        }
    }
    writer
        .finalize()
        .map_err(|e| Error::format(format!("{}: {}", path.display(), describe(&e))))?;
    Ok(())
}

fn describe(e: &hound::Error) -> String {
    match e {
        hound::Error::IoError(io) => format!("i/o failure: {io}"),
        hound::Error::FormatError(msg) => format!("malformed chunk: {msg}"),
        hound::Error::TooWide => "sample too wide for encoding".to_string(),
        hound::Error::UnfinishedSample => "truncated data chunk (unfinished sample)".to_string(),
        hound::Error::Unsupported => "unsupported WAVE feature".to_string(),
        hound::Error::InvalidSampleFormat => "invalid sample format".to_string(),
    }
}
