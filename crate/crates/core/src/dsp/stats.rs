use log::warn;

use super::LogMelFeature;
use crate::error::{Error, Result};

/// Per-band standard deviations are clamped to at least this value.
pub const STD_FLOOR: f64 = 1e-8;

/// Per-band mean and population standard deviation of training frames.
#[derive(Debug, Clone, PartialEq)]
pub struct StandardizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Identifier of the split the statistics came from.
    pub source: String,
    /// Bands whose variance was zero and whose std was clamped.
    pub floored_bands: Vec<usize>,
}

impl StandardizationStats {
    pub fn bands(&self) -> usize {
        self.mean.len()
    }

    pub fn identity(bands: usize) -> Self {
        Self {
            mean: vec![0.0; bands],
            std: vec![1.0; bands],
            source: "identity".into(),
            floored_bands: Vec::new(),
        }
    }
}

/// Running (count, mean, M2) per band, merged clip by clip in input order.
struct Moments {
    count: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Moments {
    fn of_clip(f: &LogMelFeature) -> Self {
        let n = f.frames as f64;
        let mut mean = vec![0.0; f.bands];
        for t in 0..f.frames {
            for (m, v) in mean.iter_mut().zip(f.row(t)) {
                *m += *v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut m2 = vec![0.0; f.bands];
        for t in 0..f.frames {
            for ((acc, v), m) in m2.iter_mut().zip(f.row(t)).zip(&mean) {
                let d = *v as f64 - m;
                *acc += d * d;
            }
        }
        Self { count: n, mean, m2 }
    }

    fn merge(&mut self, other: &Moments) {
        if other.count == 0.0 {
            return;
        }
        let total = self.count + other.count;
        for b in 0..self.mean.len() {
            let delta = other.mean[b] - self.mean[b];
            self.mean[b] += delta * other.count / total;
            self.m2[b] += other.m2[b] + delta * delta * self.count * other.count / total;
        }
        self.count = total;
    }
}

/// Fits per-band statistics over every frame of the given clips.
///
/// Each clip is reduced with a two-pass mean/M2 and clips are combined with
/// the pairwise update, in iteration order.
pub fn fit_standardization<'a>(
    features: impl IntoIterator<Item = &'a LogMelFeature>,
    source: &str,
) -> Result<StandardizationStats> {
    let mut acc: Option<Moments> = None;
    for f in features {
        if f.frames == 0 {
            continue;
        }
        let clip = Moments::of_clip(f);
        match acc.as_mut() {
            None => acc = Some(clip),
            Some(a) => {
                if a.mean.len() != clip.mean.len() {
                    return Err(Error::BandMismatch {
                        expected: a.mean.len(),
                        actual: clip.mean.len(),
                    });
                }
                a.merge(&clip)
            }
        }
    }
    let acc = acc.ok_or(Error::NoFrames)?;
    let mut floored = Vec::new();
    let std = acc
        .m2
        .iter()
        .enumerate()
        .map(|(b, m2)| {
            let s = (m2 / acc.count).sqrt();
            if s < STD_FLOOR {
                floored.push(b);
                STD_FLOOR
            } else {
                s
            }
        })
        .collect();
    if !floored.is_empty() {
        warn!("constant feature bands {floored:?}: std clamped to {STD_FLOOR}");
    }
    Ok(StandardizationStats {
        mean: acc.mean,
        std,
        source: source.to_string(),
        floored_bands: floored,
    })
}

pub fn standardize(f: &LogMelFeature, s: &StandardizationStats) -> Result<LogMelFeature> {
    if f.standardized {
        return Err(Error::AlreadyStandardized);
    }
    if f.bands != s.bands() {
        return Err(Error::BandMismatch {
            expected: s.bands(),
            actual: f.bands,
        });
    }
    let values = f
        .values
        .chunks(f.bands)
        .flat_map(|row| {
            row.iter()
                .enumerate()
                .map(|(b, v)| ((*v as f64 - s.mean[b]) / s.std[b]) as f32)
        })
        .collect();
    Ok(LogMelFeature {
        values,
        standardized: true,
        ..f.clone()
    })
}
