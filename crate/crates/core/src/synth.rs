//! Deterministic synthetic corpora: harmonic flight tones per species, noise
//! colouring and sample rate per domain.
//!
//! A clip is `sum_h (1/h) sin(phase_h)` with an instantaneous fundamental
//! that drifts by up to `jitter_pct` around `f0_hz`, plus Gaussian noise
//! shaped to `tilt_db_per_octave` (relative to 1 kHz) and scaled to the
//! domain SNR. Every clip's random stream is keyed by SHA-256 of
//! (master seed, species, domain, index), so generation order does not
//! matter.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{write_test_list, ClipKey, ClipRecord, DomainId, Manifest, SpeciesId};
use crate::dsp::mel::band_centers_hz;
use crate::dsp::{write_wav, LogMelFeature, Waveform};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeciesDef {
    pub id: u8,
    pub f0_hz: f64,
    pub harmonics: usize,
    /// Peak fundamental drift in percent.
    pub jitter_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainDef {
    pub id: u8,
    /// Signal-to-noise ratio; `inf` renders noise-free clips.
    pub snr_db: f64,
    /// Noise spectral slope relative to 1 kHz.
    pub tilt_db_per_octave: f64,
    pub sample_rate_hz: u32,
}

/// Clips to generate for one (species, domain) cell. A cell with
/// `trainval = 0` and `test > 0` is held out: its test clips are unseen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellCount {
    pub species: u8,
    pub domain: u8,
    pub trainval: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    /// Clip durations are drawn uniformly from `[min, max]` seconds.
    pub duration_s: (f64, f64),
    pub species: Vec<SpeciesDef>,
    pub domains: Vec<DomainDef>,
    pub cells: Vec<CellCount>,
}

impl SynthSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Config(format!("synth spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io("read synth spec", path))?;
        Self::from_toml(&text).map_err(|e| e.context(path.display().to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("synth spec serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let (lo, hi) = self.duration_s;
        if !(lo >= 0.2 && hi >= lo) {
            return bad(format!("duration range ({lo}, {hi}) must satisfy 0.2 <= min <= max"));
        }
        for s in &self.species {
            SpeciesId::new(s.id)?;
            if !(s.f0_hz > 100.0 && s.f0_hz < 1200.0) {
                return bad(format!("species {}: f0 {} Hz outside (100, 1200)", s.id, s.f0_hz));
            }
            if s.harmonics == 0 || !(0.0..50.0).contains(&s.jitter_pct) {
                return bad(format!("species {}: need >= 1 harmonic and jitter in [0, 50)", s.id));
            }
        }
        for d in &self.domains {
            DomainId::new(d.id)?;
            if d.sample_rate_hz < 2_000 || d.snr_db.is_nan() || !d.tilt_db_per_octave.is_finite() {
                return bad(format!("domain {}: invalid rate, SNR or tilt", d.id));
            }
        }
        let unique = |ids: Vec<u8>| ids.iter().collect::<BTreeSet<_>>().len() == ids.len();
        if !unique(self.species.iter().map(|s| s.id).collect()) || !unique(self.domains.iter().map(|d| d.id).collect())
        {
            return bad("species and domain ids must be unique".into());
        }
        let mut cells = BTreeSet::new();
        for c in &self.cells {
            if self.species_def(c.species).is_none() || self.domain_def(c.domain).is_none() {
                return bad(format!(
                    "cell ({}, {}) refers to an undefined species or domain",
                    c.species, c.domain
                ));
            }
            if !cells.insert((c.species, c.domain)) {
                return bad(format!("cell ({}, {}) listed twice", c.species, c.domain));
            }
        }
        Ok(())
    }

    pub fn species_def(&self, id: u8) -> Option<&SpeciesDef> {
        self.species.iter().find(|s| s.id == id)
    }

    pub fn domain_def(&self, id: u8) -> Option<&DomainDef> {
        self.domains.iter().find(|d| d.id == id)
    }

    pub fn total_clips(&self) -> usize {
        self.cells.iter().map(|c| c.trainval + c.test).sum()
    }

    /// Desk-scale benchmark: 4 species x 3 domains, species 2 never recorded
    /// in domain 3 during training, and domain 3 carrying 15 dB more noise.
    /// Domain 3's noise tilts down from 1 kHz and is recorded at 8 kHz, so it
    /// all lands in the feature band over the fundamentals. Holding out a
    /// middle species leaves neighbours on both sides to be confused with.
    pub fn desk() -> Self {
        let species = [400.0, 480.0, 560.0, 640.0]
            .iter()
            .enumerate()
            .map(|(i, f0)| SpeciesDef {
                id: i as u8 + 1,
                f0_hz: *f0,
                harmonics: 4,
                jitter_pct: 4.0,
            })
            .collect();
        let domains = vec![
            DomainDef {
                id: 1,
                snr_db: 25.0,
                tilt_db_per_octave: 0.0,
                sample_rate_hz: 8_000,
            },
            DomainDef {
                id: 2,
                snr_db: 25.0,
                tilt_db_per_octave: -3.0,
                sample_rate_hz: 16_000,
            },
            DomainDef {
                id: 3,
                snr_db: 10.0,
                tilt_db_per_octave: -6.0,
                sample_rate_hz: 8_000,
            },
        ];
        let mut cells = Vec::new();
        for s in 1..=4u8 {
            for d in 1..=3u8 {
                let held_out = (s, d) == (2, 3);
                cells.push(CellCount {
                    species: s,
                    domain: d,
                    trainval: if held_out { 0 } else { 30 },
                    test: if held_out { 30 } else { 8 },
                });
            }
        }
        Self {
            seed: 2026,
            duration_s: (1.2, 1.6),
            species,
            domains,
            cells,
        }
    }
}

/// Per-clip random stream keyed by (master seed, species, domain, index).
pub fn clip_rng(master: u64, species: u8, domain: u8, index: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update([species, domain]);
    h.update(index.to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Gaussian noise with amplitude slope `tilt` dB/octave around 1 kHz.
fn tilted_noise<R: Rng>(n: usize, rate: u32, tilt: f64, rng: &mut R) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = (0..n).map(|_| Complex::new(rng.sample(StandardNormal), 0.0)).collect();
    if tilt == 0.0 {
        return buf.iter().map(|c| c.re).collect();
    }
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, c) in buf.iter_mut().enumerate() {
        let f = (k.min(n - k) as f64 * rate as f64 / n as f64).max(50.0);
        *c *= 10f64.powf(tilt * (f / 1000.0).log2() / 20.0);
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    buf.iter().map(|c| c.re / n as f64).collect()
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt()
}

/// One clip at the domain's sample rate, `round(duration * rate)` samples long.
pub fn synth_clip(species: &SpeciesDef, domain: &DomainDef, duration_s: f64, rng: &mut ChaCha8Rng) -> Waveform {
    let rate = domain.sample_rate_hz as f64;
    let n = (duration_s * rate).round().max(1.0) as usize;
    let jitter = species.jitter_pct / 100.0;
    let offset: f64 = rng.gen_range(-1.0..=1.0);
    let wobble_hz: f64 = rng.gen_range(0.5..3.0);
    let wobble_phase: f64 = rng.gen_range(0.0..2.0 * PI);
    let phases: Vec<f64> = (0..species.harmonics).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
    let mut signal = vec![0.0; n];
    let mut phase = 0.0f64;
    for (i, s) in signal.iter_mut().enumerate() {
        let t = i as f64 / rate;
        let f = species.f0_hz * (1.0 + jitter * (0.6 * offset + 0.4 * (2.0 * PI * wobble_hz * t + wobble_phase).sin()));
        for (h, p0) in phases.iter().enumerate() {
            let k = (h + 1) as f64;
            if f * k < rate / 2.0 {
                *s += (k * phase + p0).sin() / k;
            }
        }
        phase = (phase + 2.0 * PI * f / rate) % (2.0 * PI);
    }
    if domain.snr_db.is_finite() {
        let noise = tilted_noise(n, domain.sample_rate_hz, domain.tilt_db_per_octave, rng);
        let scale = rms(&signal) / 10f64.powf(domain.snr_db / 20.0) / rms(&noise).max(1e-12);
        signal.iter_mut().zip(&noise).for_each(|(s, v)| *s += v * scale);
    }
    // random recording gain; peak normalisation downstream removes it
    let gain: f64 = rng.gen_range(0.3..0.9);
    let peak = signal.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    signal.iter_mut().for_each(|v| *v *= gain / peak);
    Waveform {
        samples: signal,
        sample_rate_hz: domain.sample_rate_hz,
    }
}

/// Renders the clip of `key` exactly as [`synth_corpus`] writes it.
pub fn render(spec: &SynthSpec, key: &ClipKey) -> Result<Waveform> {
    let s = spec
        .species_def(key.species.get())
        .ok_or_else(|| Error::Config(format!("species {} not in spec", key.species)))?;
    let d = spec
        .domain_def(key.domain.get())
        .ok_or_else(|| Error::Config(format!("domain {} not in spec", key.domain)))?;
    let mut rng = clip_rng(spec.seed, s.id, d.id, key.clip_index);
    let (lo, hi) = spec.duration_s;
    let duration = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    Ok(synth_clip(s, d, duration, &mut rng))
}

/// A generated corpus: all clips plus which of them form the test list.
pub struct SynthCorpus {
    pub manifest: Manifest,
    pub test: BTreeSet<ClipKey>,
}

pub const AUDIO_DIR: &str = "audio";
pub const MANIFEST_FILE: &str = "manifest.csv";
pub const TEST_LIST_FILE: &str = "test_list.csv";

/// Writes every clip of `spec` as 16-bit WAV under `out_dir/audio`, plus
/// `manifest.csv` and `test_list.csv`. In each cell the first `test` clip
/// indices are test clips and the remaining `trainval` ones are not.
pub fn synth_corpus(spec: &SynthSpec, out_dir: &Path) -> Result<SynthCorpus> {
    spec.validate()?;
    let audio = out_dir.join(AUDIO_DIR);
    std::fs::create_dir_all(&audio).map_err(Error::io("create corpus directory", &audio))?;
    let mut jobs = Vec::new();
    let mut test = BTreeSet::new();
    for c in &spec.cells {
        for i in 0..(c.test + c.trainval) as u64 {
            let key = ClipKey {
                species: SpeciesId::new(c.species)?,
                domain: DomainId::new(c.domain)?,
                clip_index: i,
            };
            if i < c.test as u64 {
                test.insert(key);
            }
            jobs.push(key);
        }
    }
    let records: Vec<ClipRecord> = jobs
        .par_iter()
        .map(|key| -> Result<ClipRecord> {
            let w = render(spec, key)?;
            let rel = PathBuf::from(AUDIO_DIR).join(format!("{}.wav", key.file_stem()));
            write_wav(&out_dir.join(&rel), &w)?;
            Ok(ClipRecord {
                path: rel,
                species: key.species,
                domain: key.domain,
                clip_index: key.clip_index,
                duration_s: w.duration_s(),
                num_samples: w.samples.len() as u64,
            })
        })
        .collect::<Result<_>>()?;
    let manifest = Manifest::from_records(out_dir, records)?;
    manifest.write_csv(&out_dir.join(MANIFEST_FILE))?;
    write_test_list(&manifest, &test, &out_dir.join(TEST_LIST_FILE))?;
    Ok(SynthCorpus { manifest, test })
}

/// Sanity classifier: the species whose fundamental lies nearest (in band
/// index) to the loudest time-averaged mel band. Returns an index into `species`.
pub fn nearest_band_baseline(f: &LogMelFeature, species: &[SpeciesDef]) -> usize {
    let mut mean = vec![0.0f64; f.bands];
    for t in 0..f.frames {
        mean.iter_mut().zip(f.row(t)).for_each(|(m, v)| *m += *v as f64);
    }
    let loudest = (0..f.bands).fold(0, |b, k| if mean[k] > mean[b] { k } else { b });
    let centers = band_centers_hz();
    let band_of = |hz: f64| {
        (0..centers.len())
            .min_by(|a, b| (centers[*a] - hz).abs().total_cmp(&(centers[*b] - hz).abs()))
            .unwrap_or(0)
    };
    (0..species.len())
        .min_by_key(|i| band_of(species[*i].f0_hz).abs_diff(loudest))
        .unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{derive_seen_unseen, scan_corpus, Stratum};
    use crate::dsp::{extract_clip, LogMelExtractor};
    use crate::eval::{balanced_accuracy, confusion};

    fn clean(f0: f64) -> (SpeciesDef, DomainDef) {
        (
            SpeciesDef {
                id: 1,
                f0_hz: f0,
                harmonics: 1,
                jitter_pct: 0.0,
            },
            DomainDef {
                id: 1,
                snr_db: f64::INFINITY,
                tilt_db_per_octave: 0.0,
                sample_rate_hz: 8_000,
            },
        )
    }

    #[test]
    fn clean_tone_peaks_at_f0() {
        let (s, d) = clean(400.0);
        let w = synth_clip(&s, &d, 2.0, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(w.samples.len(), 16_000);
        // direct DFT over a 2000-sample window, 4 Hz bins
        let x = &w.samples[..2000];
        let mut best = (0, 0.0);
        for k in 1..1000 {
            let (mut re, mut im) = (0.0, 0.0);
            for (i, v) in x.iter().enumerate() {
                let a = 2.0 * PI * (k * i % 2000) as f64 / 2000.0;
                re += v * a.cos();
                im -= v * a.sin();
            }
            if re * re + im * im > best.1 {
                best = (k, re * re + im * im);
            }
        }
        assert!((best.0 as f64 * 4.0 - 400.0).abs() <= 4.0, "peak {} Hz", best.0 * 4);
    }

    #[test]
    fn clips_are_deterministic() {
        let spec = SynthSpec::desk();
        let key = ClipKey {
            species: SpeciesId::new(2).unwrap(),
            domain: DomainId::new(3).unwrap(),
            clip_index: 5,
        };
        let a = render(&spec, &key).unwrap();
        let b = render(&spec, &key).unwrap();
        assert_eq!(
            a.samples.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.samples.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(a.sample_rate_hz, 8_000);
    }

    #[test]
    fn snr_is_respected() {
        let (s, quiet) = clean(500.0);
        for (snr, tilt) in [(10.0, -6.0), (25.0, 0.0), (0.0, 6.0)] {
            let d = DomainDef {
                snr_db: snr,
                tilt_db_per_octave: tilt,
                ..quiet.clone()
            };
            // same seed: identical tone parameters, different overall gain
            let noisy = synth_clip(&s, &d, 1.0, &mut ChaCha8Rng::seed_from_u64(3)).samples;
            let tone = synth_clip(&s, &quiet, 1.0, &mut ChaCha8Rng::seed_from_u64(3)).samples;
            let a = noisy.iter().zip(&tone).map(|(x, y)| x * y).sum::<f64>() / tone.iter().map(|y| y * y).sum::<f64>();
            let residual: Vec<f64> = noisy.iter().zip(&tone).map(|(x, y)| x - a * y).collect();
            let tone_rms = rms(&tone) * a;
            let measured = 20.0 * (tone_rms / rms(&residual)).log10();
            assert!((measured - snr).abs() < 0.5, "snr {snr}: measured {measured}");
        }
    }

    #[test]
    fn spec_round_trips_and_validates() {
        let spec = SynthSpec::desk();
        assert_eq!(SynthSpec::from_toml(&spec.to_toml()).unwrap(), spec);
        let mut bad = spec.clone();
        bad.species[0].f0_hz = 90.0;
        assert!(bad.validate().is_err());
        let mut dup = spec.clone();
        dup.cells.push(dup.cells[0].clone());
        assert!(dup.validate().is_err());
        assert!(SynthSpec::from_toml("seed = 1\nbogus = 2").is_err());
    }

    #[test]
    fn small_corpus_layout() {
        let mut spec = SynthSpec::desk();
        spec.species.truncate(2);
        spec.domains.truncate(2);
        spec.duration_s = (0.3, 0.4);
        spec.cells = vec![
            CellCount {
                species: 1,
                domain: 1,
                trainval: 3,
                test: 1,
            },
            CellCount {
                species: 2,
                domain: 1,
                trainval: 3,
                test: 1,
            },
            CellCount {
                species: 1,
                domain: 2,
                trainval: 2,
                test: 1,
            },
            CellCount {
                species: 2,
                domain: 2,
                trainval: 0,
                test: 2,
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let out = synth_corpus(&spec, dir.path()).unwrap();
        assert_eq!(out.manifest.len(), 13);
        assert_eq!(out.test.len(), 5);
        let scanned = scan_corpus(dir.path()).unwrap();
        assert_eq!(scanned.len(), 13);
        for r in scanned.records() {
            let name = r.path.file_name().unwrap().to_str().unwrap();
            assert_eq!(crate::corpus::parse_clip_name(name).unwrap(), r.key());
        }
        let trainval = out.manifest.filter(|k| !out.test.contains(k));
        let test = out.manifest.filter(|k| out.test.contains(k));
        let su = derive_seen_unseen(&trainval, &test);
        let unseen = su.label(&test).iter().filter(|(_, s)| *s == Stratum::Unseen).count();
        assert_eq!(unseen, 2);

        // regenerating gives identical bytes
        let again = tempfile::tempdir().unwrap();
        synth_corpus(&spec, again.path()).unwrap();
        for r in out.manifest.records() {
            assert_eq!(
                std::fs::read(dir.path().join(&r.path)).unwrap(),
                std::fs::read(again.path().join(&r.path)).unwrap()
            );
        }
    }

    #[test]
    fn zero_counts_give_empty_manifest() {
        let mut spec = SynthSpec::desk();
        spec.cells.iter_mut().for_each(|c| {
            c.trainval = 0;
            c.test = 0;
        });
        let dir = tempfile::tempdir().unwrap();
        let out = synth_corpus(&spec, dir.path()).unwrap();
        assert!(out.manifest.is_empty());
        assert!(matches!(scan_corpus(dir.path()), Err(Error::EmptyCorpus(_))));
    }

    #[test]
    fn desk_spec_is_desk_sized() {
        let spec = SynthSpec::desk();
        let max_audio = spec.total_clips() as f64 * spec.duration_s.1;
        assert!(max_audio < 30.0 * 60.0);
        let held_out: Vec<_> = spec.cells.iter().filter(|c| c.trainval == 0).collect();
        assert_eq!(held_out.len(), 1);
        assert!(held_out[0].test > 0);
    }

    #[test]
    fn separable_spec_beats_nearest_band_threshold() {
        let species: Vec<SpeciesDef> = [300.0, 380.0, 460.0, 540.0]
            .iter()
            .enumerate()
            .map(|(i, f0)| SpeciesDef {
                id: i as u8 + 1,
                f0_hz: *f0,
                harmonics: 4,
                jitter_pct: 2.0,
            })
            .collect();
        let domain = DomainDef {
            id: 1,
            snr_db: 30.0,
            tilt_db_per_octave: -3.0,
            sample_rate_hz: 16_000,
        };
        let ex = LogMelExtractor::new();
        let (mut truth, mut pred) = (Vec::new(), Vec::new());
        for (i, s) in species.iter().enumerate() {
            for clip in 0..15u64 {
                let w = synth_clip(s, &domain, 0.8, &mut clip_rng(9, s.id, 1, clip));
                let f = extract_clip(&w, &ex).unwrap();
                truth.push(i);
                pred.push(nearest_band_baseline(&f, &species));
            }
        }
        let ba = balanced_accuracy(&confusion(&truth, &pred, 4).unwrap()).unwrap();
        assert!(ba >= 0.95, "baseline BA {ba}");
    }
}
