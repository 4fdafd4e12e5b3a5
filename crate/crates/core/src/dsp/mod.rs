//! Audio front end: resampling, peak normalisation, log-mel extraction,
//! train-only standardisation and the on-disk feature/stats formats.

pub mod cache;
pub mod mel;
pub mod resample;
pub mod stats;

use std::path::Path;

pub use cache::{read_feature, read_stats, write_feature, write_stats};
pub use mel::{logmel, LogMelExtractor};
pub use resample::resample;
pub use stats::{fit_standardization, standardize, StandardizationStats};

use crate::error::{Error, Result};

/// Mono audio.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate_hz: u32,
}

impl Waveform {
    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }
}

/// `frames × bands` row-major log-mel matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LogMelFeature {
    pub values: Vec<f32>,
    pub frames: usize,
    pub bands: usize,
    pub hop_s: f64,
    pub standardized: bool,
}

impl LogMelFeature {
    pub fn row(&self, t: usize) -> &[f32] {
        &self.values[t * self.bands..(t + 1) * self.bands]
    }

    /// Contiguous frame range `[start, start + len)`.
    pub fn slice_frames(&self, start: usize, len: usize) -> LogMelFeature {
        LogMelFeature {
            values: self.values[start * self.bands..(start + len) * self.bands].to_vec(),
            frames: len,
            bands: self.bands,
            hop_s: self.hop_s,
            standardized: self.standardized,
        }
    }
}

/// Divides by the peak absolute sample; silence is returned unchanged.
pub fn peak_normalize(w: &Waveform) -> Waveform {
    let peak = w.samples.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    if peak == 0.0 || !peak.is_finite() {
        return w.clone();
    }
    Waveform {
        samples: w.samples.iter().map(|s| s / peak).collect(),
        sample_rate_hz: w.sample_rate_hz,
    }
}

/// Reads a WAV file, down-mixing to mono and scaling integer PCM to [-1, 1).
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = hound::WavReader::open(path).map_err(wav_err)?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let interleaved: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Float => reader.samples::<f32>().collect::<Result<_, _>>().map_err(wav_err)?,
        hound::SampleFormat::Int => {
            let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f32 * scale))
                .collect::<Result<_, _>>()
                .map_err(wav_err)?
        }
    };
    let samples = interleaved
        .chunks(channels)
        .map(|frame| frame.iter().map(|v| *v as f64).sum::<f64>() / channels as f64)
        .collect();
    Ok(Waveform {
        samples,
        sample_rate_hz: spec.sample_rate,
    })
}

/// Writes 16-bit PCM mono, clamping to [-1, 1].
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate_hz,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for s in &w.samples {
        let v = (s.clamp(-1.0, 1.0) * i16::MAX as f64).round() as i16;
        writer.write_sample(v).map_err(wav_err)?;
    }
    writer.finalize().map_err(wav_err)
}

/// Full per-clip front end: resample to 8 kHz, peak-normalise, log-mel.
pub fn extract_clip(w: &Waveform, extractor: &LogMelExtractor) -> Result<LogMelFeature> {
    let resampled = resample(w, mel::SAMPLE_RATE_HZ)?;
    extractor.extract(&peak_normalize(&resampled))
}
