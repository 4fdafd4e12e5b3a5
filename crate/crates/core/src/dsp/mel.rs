//! Log-mel front end: centred STFT (Hann-512, hop 80, reflect padding),
//! power spectrum, 64 HTK-mel triangular filters over 0–4 kHz, natural log.

use std::sync::Arc;

use rustfft::{num_complex::Complex, Fft, FftPlanner};

use super::{LogMelFeature, Waveform};
use crate::error::{Error, Result};

pub const SAMPLE_RATE_HZ: u32 = 8_000;
pub const N_FFT: usize = 512;
pub const HOP: usize = 80;
pub const N_MELS: usize = 64;
pub const FMIN_HZ: f64 = 0.0;
pub const FMAX_HZ: f64 = 4_000.0;
pub const LOG_EPS: f64 = 1e-10;
pub const HOP_S: f64 = HOP as f64 / SAMPLE_RATE_HZ as f64;
/// Spacing between FFT bins.
pub const BIN_HZ: f64 = SAMPLE_RATE_HZ as f64 / N_FFT as f64;

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// `ceil(n / hop)`: one frame centred on every hop position inside the signal.
pub fn frame_count(num_samples: usize) -> usize {
    num_samples.div_ceil(HOP)
}

/// Centre frequencies of the mel filters.
pub fn band_centers_hz() -> Vec<f64> {
    let points = mel_points_hz();
    points[1..=N_MELS].to_vec()
}

fn mel_points_hz() -> Vec<f64> {
    let lo = hz_to_mel(FMIN_HZ);
    let hi = hz_to_mel(FMAX_HZ);
    (0..N_MELS + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (N_MELS + 1) as f64))
        .collect()
}

/// Triangular filters with unit peak, `[N_MELS][N_FFT/2 + 1]`.
pub fn mel_filterbank() -> Vec<Vec<f64>> {
    let pts = mel_points_hz();
    let n_bins = N_FFT / 2 + 1;
    (0..N_MELS)
        .map(|m| {
            let (left, center, right) = (pts[m], pts[m + 1], pts[m + 2]);
            (0..n_bins)
                .map(|k| {
                    let f = k as f64 * BIN_HZ;
                    let up = (f - left) / (center - left);
                    let down = (right - f) / (right - center);
                    up.min(down).max(0.0)
                })
                .collect()
        })
        .collect()
}

/// Periodic Hann window.
fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Maps an out-of-range index into `[0, n)` by mirror reflection about the
/// end samples (edge samples are not repeated).
fn reflect(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let m = i.rem_euclid(period);
    if m < n as i64 {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Reusable extractor holding the FFT plan, window and filterbank.
pub struct LogMelExtractor {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    filters: Vec<(usize, Vec<f64>)>,
}

impl Default for LogMelExtractor {
    fn default() -> Self {
        Self::new()
    }
}

impl LogMelExtractor {
    pub fn new() -> Self {
        let fft = FftPlanner::new().plan_fft_forward(N_FFT);
        // store each filter as (first nonzero bin, weights) to skip zeros
        let filters = mel_filterbank()
            .into_iter()
            .map(|row| {
                let first = row.iter().position(|w| *w > 0.0).unwrap_or(0);
                let last = row.iter().rposition(|w| *w > 0.0).unwrap_or(0);
                (first, row[first..=last].to_vec())
            })
            .collect();
        Self {
            fft,
            window: hann(N_FFT),
            filters,
        }
    }

    pub fn extract(&self, w: &Waveform) -> Result<LogMelFeature> {
        if w.sample_rate_hz != SAMPLE_RATE_HZ {
            return Err(Error::WrongSampleRate {
                expected: SAMPLE_RATE_HZ,
                actual: w.sample_rate_hz,
            });
        }
        if w.samples.is_empty() {
            return Err(Error::EmptyInput);
        }
        let n = w.samples.len();
        let frames = frame_count(n);
        let half = (N_FFT / 2) as i64;
        let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut power = vec![0.0f64; N_FFT / 2 + 1];
        let mut values = Vec::with_capacity(frames * N_MELS);
        for t in 0..frames {
            let start = (t * HOP) as i64 - half;
            for (j, slot) in buf.iter_mut().enumerate() {
                let idx = start + j as i64;
                let idx = if idx < 0 || idx >= n as i64 {
                    reflect(idx, n)
                } else {
                    idx as usize
                };
                *slot = Complex::new(w.samples[idx] * self.window[j], 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            for (first, weights) in &self.filters {
                let e: f64 = weights.iter().zip(&power[*first..]).map(|(w, p)| w * p).sum();
                values.push((e + LOG_EPS).ln() as f32);
            }
        }
        Ok(LogMelFeature {
            values,
            frames,
            bands: N_MELS,
            hop_s: HOP_S,
            standardized: false,
        })
    }
}

/// Log-mel energies of an 8 kHz waveform.
pub fn logmel(w: &Waveform) -> Result<LogMelFeature> {
    LogMelExtractor::new().extract(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn tone(freq: f64, n: usize) -> Waveform {
        Waveform {
            samples: (0..n).map(|i| (2.0 * PI * freq * i as f64 / 8000.0).sin()).collect(),
            sample_rate_hz: 8000,
        }
    }

    #[test]
    fn frame_count_law() {
        for n in [1usize, 79, 80, 81, 8_800, 16_000] {
            let f = logmel(&tone(500.0, n)).unwrap();
            assert_eq!(f.frames, n.div_ceil(80), "n = {n}");
            assert_eq!(f.values.len(), f.frames * 64);
            assert!(f.values.iter().all(|v| v.is_finite()));
        }
        assert_eq!(frame_count(16_000), 200);
        assert_eq!(BIN_HZ, 15.625);
    }

    #[test]
    fn wrong_rate_rejected() {
        let w = Waveform {
            samples: vec![0.0; 100],
            sample_rate_hz: 16_000,
        };
        assert!(matches!(logmel(&w), Err(Error::WrongSampleRate { .. })));
    }

    #[test]
    fn filters_nonnegative_and_cover_band() {
        let fb = mel_filterbank();
        assert_eq!(fb.len(), 64);
        assert!(fb.iter().flatten().all(|w| *w >= 0.0));
        for k in 1..256 {
            // bins strictly inside (0, 4000) Hz
            assert!(fb.iter().any(|row| row[k] > 0.0), "bin {k} uncovered");
        }
        assert!(fb.iter().all(|row| row.iter().any(|w| *w > 0.0)), "empty filter");
    }

    #[test]
    fn mel_formula_round_trips() {
        for hz in [0.0, 15.625, 700.0, 1000.0, 4000.0] {
            assert!((mel_to_hz(hz_to_mel(hz)) - hz).abs() < 1e-9);
        }
        assert!((hz_to_mel(700.0) - 2595.0 * 2f64.log10()).abs() < 1e-12);
    }

    #[test]
    fn sine_peaks_at_nearest_band() {
        let centers = band_centers_hz();
        let expected = centers
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - 1000.0).abs().partial_cmp(&(b.1 - 1000.0).abs()).unwrap())
            .unwrap()
            .0;
        let f = logmel(&tone(1000.0, 16_000)).unwrap();
        for t in 5..f.frames - 5 {
            let row = &f.values[t * 64..(t + 1) * 64];
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(argmax, expected, "frame {t}");
        }
    }

    #[test]
    fn reflect_indexing() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(-4, 5), 4);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(-300, 1), 0);
        assert_eq!(reflect(-9, 5), 1);
    }

    #[test]
    fn silence_is_finite() {
        let f = logmel(&Waveform {
            samples: vec![0.0; 500],
            sample_rate_hz: 8000,
        })
        .unwrap();
        assert!(f.values.iter().all(|v| (*v as f64 - LOG_EPS.ln()).abs() < 1e-3));
    }
}
