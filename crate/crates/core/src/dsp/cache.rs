//! Binary feature (`CDMF`) and statistics (`CDMS`) files. Little-endian.
//!
//! Feature layout: magic `CDMF`, version u16, frames u32, bands u16, hop_s
//! f64, flags u16, then `frames * bands` f32 values row-major.
//!
//! Stats layout: magic `CDMS`, version u16, 64 f64 means, 64 f64 stds, then
//! the source split identifier as a u32 byte length followed by UTF-8.

use std::path::Path;

use super::mel::N_MELS;
use super::{LogMelFeature, StandardizationStats};
use crate::error::{Error, Result};
use crate::util::{write_atomic, ByteReader};

pub const FEATURE_MAGIC: &[u8; 4] = b"CDMF";
pub const STATS_MAGIC: &[u8; 4] = b"CDMS";
pub const FORMAT_VERSION: u16 = 1;

pub const FLAG_STANDARDIZED: u16 = 1 << 0;
/// Mel scale is HTK (2595 log10(1 + f/700)), filters unit-peak.
pub const FLAG_MEL_HTK: u16 = 1 << 1;
/// Filters applied to the power (not magnitude) spectrum.
pub const FLAG_POWER: u16 = 1 << 2;
/// Natural log of (energy + 1e-10).
pub const FLAG_LN_EPS: u16 = 1 << 3;
pub const FRONT_END_FLAGS: u16 = FLAG_MEL_HTK | FLAG_POWER | FLAG_LN_EPS;

pub fn encode_feature(f: &LogMelFeature) -> Vec<u8> {
    let mut out = Vec::with_capacity(22 + f.values.len() * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(f.frames as u32).to_le_bytes());
    out.extend_from_slice(&(f.bands as u16).to_le_bytes());
    out.extend_from_slice(&f.hop_s.to_le_bytes());
    let flags = FRONT_END_FLAGS | if f.standardized { FLAG_STANDARDIZED } else { 0 };
    out.extend_from_slice(&flags.to_le_bytes());
    for v in &f.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_feature(bytes: &[u8]) -> Result<LogMelFeature> {
    let mut r = ByteReader::new(bytes, "feature");
    r.magic(FEATURE_MAGIC)?;
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(Error::bad("feature", format!("unsupported version {version}")));
    }
    let frames = r.u32()? as usize;
    let bands = r.u16()? as usize;
    let hop_s = r.f64()?;
    let flags = r.u16()?;
    if flags & FRONT_END_FLAGS != FRONT_END_FLAGS {
        return Err(Error::bad(
            "feature",
            format!("front-end flags {flags:#06b} do not match this extractor"),
        ));
    }
    let values = r.f32_vec(frames * bands)?;
    r.finish()?;
    Ok(LogMelFeature {
        values,
        frames,
        bands,
        hop_s,
        standardized: flags & FLAG_STANDARDIZED != 0,
    })
}

pub fn write_feature(path: &Path, f: &LogMelFeature) -> Result<()> {
    write_atomic(path, &encode_feature(f))
}

pub fn read_feature(path: &Path) -> Result<LogMelFeature> {
    let bytes = std::fs::read(path).map_err(Error::io("read feature", path))?;
    decode_feature(&bytes).map_err(|e| e.context(path.display().to_string()))
}

pub fn encode_stats(s: &StandardizationStats) -> Result<Vec<u8>> {
    if s.bands() != N_MELS || s.std.len() != N_MELS {
        return Err(Error::BandMismatch {
            expected: N_MELS,
            actual: s.bands(),
        });
    }
    let mut out = Vec::new();
    out.extend_from_slice(STATS_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for v in s.mean.iter().chain(&s.std) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(s.source.len() as u32).to_le_bytes());
    out.extend_from_slice(s.source.as_bytes());
    Ok(out)
}

pub fn decode_stats(bytes: &[u8]) -> Result<StandardizationStats> {
    let mut r = ByteReader::new(bytes, "stats");
    r.magic(STATS_MAGIC)?;
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(Error::bad("stats", format!("unsupported version {version}")));
    }
    let mean = (0..N_MELS).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    let std = (0..N_MELS).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    let source = r.string_u32()?;
    r.finish()?;
    let floored_bands = std
        .iter()
        .enumerate()
        .filter(|(_, s)| **s <= super::stats::STD_FLOOR)
        .map(|(b, _)| b)
        .collect();
    Ok(StandardizationStats {
        mean,
        std,
        source,
        floored_bands,
    })
}

pub fn write_stats(path: &Path, s: &StandardizationStats) -> Result<()> {
    write_atomic(path, &encode_stats(s)?)
}

pub fn read_stats(path: &Path) -> Result<StandardizationStats> {
    let bytes = std::fs::read(path).map_err(Error::io("read stats", path))?;
    decode_stats(&bytes).map_err(|e| e.context(path.display().to_string()))
}
