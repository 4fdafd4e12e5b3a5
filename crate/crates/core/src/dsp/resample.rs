//! Rational-ratio polyphase resampler with a Blackman-windowed sinc kernel.
//!
//! The ratio `target/source` is reduced to `up/down`. Output sample `n` sits at
//! input position `n * down / up`; its fractional part takes only `up` distinct
//! values, so one filter phase is precomputed per value.

use std::f64::consts::PI;

use super::Waveform;
use crate::error::{Error, Result};

/// Zero crossings of the sinc on each side of the kernel centre.
pub const ZERO_CROSSINGS: usize = 16;
/// Cutoff as a fraction of the lower Nyquist frequency.
pub const ROLLOFF: f64 = 0.94;

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn blackman(x: f64) -> f64 {
    // x in [-1, 1]
    let t = (x + 1.0) / 2.0;
    0.42 - 0.5 * (2.0 * PI * t).cos() + 0.08 * (4.0 * PI * t).cos()
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

struct PolyphaseBank {
    up: u64,
    down: u64,
    /// Taps per phase; phase p starts at input offset `first_tap`.
    taps: usize,
    first_tap: i64,
    phases: Vec<Vec<f64>>,
}

impl PolyphaseBank {
    fn new(source_hz: u32, target_hz: u32) -> Self {
        let g = gcd(source_hz as u64, target_hz as u64);
        let up = target_hz as u64 / g;
        let down = source_hz as u64 / g;
        // cutoff in cycles per input sample, relative to input Nyquist
        let cutoff = ROLLOFF * (up as f64 / down as f64).min(1.0);
        let half_width = (ZERO_CROSSINGS as f64 / cutoff).ceil() as i64;
        let first_tap = -half_width + 1;
        let taps = (2 * half_width) as usize;
        let phases = (0..up)
            .map(|p| {
                let frac = p as f64 / up as f64;
                let mut h: Vec<f64> = (0..taps)
                    .map(|j| {
                        // distance from the output instant to input sample (base + first_tap + j)
                        let u = (first_tap + j as i64) as f64 - frac;
                        let w = u / half_width as f64;
                        if w.abs() >= 1.0 {
                            0.0
                        } else {
                            cutoff * sinc(cutoff * u) * blackman(w)
                        }
                    })
                    .collect();
                // unity DC gain per phase
                let sum: f64 = h.iter().sum();
                if sum != 0.0 {
                    h.iter_mut().for_each(|v| *v /= sum);
                }
                h
            })
            .collect();
        Self {
            up,
            down,
            taps,
            first_tap,
            phases,
        }
    }

    fn apply(&self, input: &[f64]) -> Vec<f64> {
        let n_in = input.len() as u64;
        let n_out = (n_in * self.up).div_ceil(self.down);
        (0..n_out)
            .map(|n| {
                let pos = n * self.down;
                let base = (pos / self.up) as i64;
                let phase = &self.phases[(pos % self.up) as usize];
                let start = base + self.first_tap;
                let mut acc = 0.0f64;
                for (j, w) in phase.iter().enumerate().take(self.taps) {
                    let i = start + j as i64;
                    if i >= 0 && (i as u64) < n_in {
                        acc += w * input[i as usize];
                    }
                }
                acc
            })
            .collect()
    }
}

/// Resamples `w` to `target_hz`. Same-rate input is returned unchanged.
pub fn resample(w: &Waveform, target_hz: u32) -> Result<Waveform> {
    if w.samples.is_empty() {
        return Err(Error::EmptyInput);
    }
    if target_hz == 0 || w.sample_rate_hz == 0 {
        return Err(Error::Config("sample rates must be positive".into()));
    }
    if w.sample_rate_hz == target_hz {
        return Ok(w.clone());
    }
    let bank = PolyphaseBank::new(w.sample_rate_hz, target_hz);
    Ok(Waveform {
        samples: bank.apply(&w.samples),
        sample_rate_hz: target_hz,
    })
}
