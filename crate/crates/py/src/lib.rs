//! Python bindings. Audio goes in as lists of floats, features come back as
//! lists of frames, labels are 0-based indices as in the core library.

use std::path::PathBuf;

use cdmsc::corpus::{self, ClipRecord, Manifest};
use cdmsc::dsp::{self, LogMelFeature, Waveform};
use cdmsc::eval::{self, AbsentClassPolicy};
use cdmsc::model::{self, pack_batch, ModelConfig, MtrcnnModel};
use cdmsc::pipeline::{self, PipelineConfig};
use cdmsc::synth::{self, DomainDef, SpeciesDef};
use cdmsc::train::{Checkpoint, CheckpointKind};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn err(e: cdmsc::Error) -> PyErr {
    match e {
        cdmsc::Error::Io { .. } | cdmsc::Error::Wav { .. } | cdmsc::Error::Csv { .. } => {
            PyRuntimeError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn wave(samples: Vec<f64>, sample_rate_hz: u32) -> Waveform {
    Waveform {
        samples,
        sample_rate_hz,
    }
}

fn frames_of(f: &LogMelFeature) -> Vec<Vec<f32>> {
    (0..f.frames).map(|t| f.row(t).to_vec()).collect()
}

fn feature_from(frames: Vec<Vec<f32>>) -> PyResult<LogMelFeature> {
    let bands = frames.first().map_or(dsp::mel::N_MELS, Vec::len);
    if frames.iter().any(|r| r.len() != bands) {
        return Err(PyValueError::new_err("all frames must have the same number of bands"));
    }
    Ok(LogMelFeature {
        values: frames.concat(),
        frames: frames.len(),
        bands,
        hop_s: dsp::mel::HOP_S,
        standardized: true,
    })
}

fn policy(name: &str) -> PyResult<AbsentClassPolicy> {
    match name {
        "exclude" => Ok(AbsentClassPolicy::Exclude),
        "zero_score" => Ok(AbsentClassPolicy::ZeroScore),
        other => Err(PyValueError::new_err(format!(
            "unknown policy `{other}` (exclude or zero_score)"
        ))),
    }
}

/// `(species, domain, clip_index)` from `S_<s>_D_<d>_<i>[.wav]`.
#[pyfunction]
fn parse_clip_name(name: &str) -> PyResult<(u8, u8, u64)> {
    let k = corpus::parse_clip_name(name).map_err(err)?;
    Ok((k.species.get(), k.domain.get(), k.clip_index))
}

#[pyfunction]
fn frame_count(num_samples: usize) -> usize {
    dsp::mel::frame_count(num_samples)
}

#[pyfunction]
fn resample(samples: Vec<f64>, sample_rate_hz: u32, target_hz: u32) -> PyResult<Vec<f64>> {
    Ok(dsp::resample(&wave(samples, sample_rate_hz), target_hz)
        .map_err(err)?
        .samples)
}

#[pyfunction]
fn peak_normalize(samples: Vec<f64>) -> Vec<f64> {
    dsp::peak_normalize(&wave(samples, 1)).samples
}

/// Log-mel frames of 8 kHz audio (64 bands each).
#[pyfunction]
fn logmel(samples: Vec<f64>) -> PyResult<Vec<Vec<f32>>> {
    let f = dsp::logmel(&wave(samples, dsp::mel::SAMPLE_RATE_HZ)).map_err(err)?;
    Ok(frames_of(&f))
}

/// Full front end: resample to 8 kHz, peak-normalise, log-mel.
#[pyfunction]
fn extract_features(samples: Vec<f64>, sample_rate_hz: u32) -> PyResult<Vec<Vec<f32>>> {
    let f = dsp::extract_clip(&wave(samples, sample_rate_hz), &dsp::LogMelExtractor::new()).map_err(err)?;
    Ok(frames_of(&f))
}

/// Confusion counts, rows = true class.
#[pyfunction]
fn confusion(truth: Vec<usize>, predicted: Vec<usize>, classes: usize) -> PyResult<Vec<Vec<u64>>> {
    Ok(eval::confusion(&truth, &predicted, classes).map_err(err)?.counts)
}

#[pyfunction]
#[pyo3(signature = (truth, predicted, classes, policy = "exclude"))]
fn balanced_accuracy(truth: Vec<usize>, predicted: Vec<usize>, classes: usize, policy: &str) -> PyResult<f64> {
    let m = eval::confusion(&truth, &predicted, classes).map_err(err)?;
    eval::balanced_accuracy_with(&m, self::policy(policy)?).map_err(err)
}

#[pyfunction]
fn dsg(ba_seen: f64, ba_unseen: f64) -> f64 {
    eval::dsg(ba_seen, ba_unseen)
}

/// Train/validation roles for clip names, stratified by species.
#[pyfunction]
fn split(names: Vec<String>, fraction: f64, seed: u64) -> PyResult<Vec<(String, String)>> {
    let records = names
        .iter()
        .map(|n| {
            let k = corpus::parse_clip_name(n)?;
            Ok(ClipRecord {
                path: PathBuf::from(n),
                species: k.species,
                domain: k.domain,
                clip_index: k.clip_index,
                duration_s: 1.0,
                num_samples: 8000,
            })
        })
        .collect::<cdmsc::Result<Vec<_>>>()
        .map_err(err)?;
    let manifest = Manifest::from_records("", records).map_err(err)?;
    let s = corpus::stratified_validation_split(&manifest, fraction, seed).map_err(err)?;
    Ok(manifest
        .records()
        .iter()
        .map(|r| {
            (
                r.path.to_string_lossy().into_owned(),
                s.roles[&r.key()].as_str().to_string(),
            )
        })
        .collect())
}

/// One synthetic clip; `seed` plays the role of the clip's master seed.
#[pyfunction]
#[pyo3(signature = (f0_hz, duration_s, sample_rate_hz = 8000, harmonics = 4, jitter_pct = 2.0, snr_db = f64::INFINITY, tilt_db_per_octave = 0.0, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn synth_clip(
    f0_hz: f64,
    duration_s: f64,
    sample_rate_hz: u32,
    harmonics: usize,
    jitter_pct: f64,
    snr_db: f64,
    tilt_db_per_octave: f64,
    seed: u64,
) -> Vec<f64> {
    let s = SpeciesDef {
        id: 1,
        f0_hz,
        harmonics,
        jitter_pct,
    };
    let d = DomainDef {
        id: 1,
        snr_db,
        tilt_db_per_octave,
        sample_rate_hz,
    };
    synth::synth_clip(&s, &d, duration_s, &mut synth::clip_rng(seed, 1, 1, 0)).samples
}

type Rows = Vec<Vec<f32>>;

/// The dual-head classifier.
#[pyclass(name = "Model", module = "cdmsc_py")]
struct PyModel {
    inner: MtrcnnModel<f32>,
}

#[pymethods]
impl PyModel {
    /// Default architecture, parameter budget enforced.
    #[new]
    #[pyo3(signature = (seed = 0, num_species = 9, num_domains = 5))]
    fn new(seed: u64, num_species: usize, num_domains: usize) -> PyResult<Self> {
        let cfg = ModelConfig {
            num_species,
            num_domains,
            ..ModelConfig::default()
        };
        Ok(Self {
            inner: model::build_model(&cfg, seed).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: Checkpoint::load(&path).map_err(err)?.model,
        })
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    fn describe(&self) -> String {
        self.inner.describe()
    }

    /// Species and domain logits for a batch of standardised clips.
    fn logits(&self, clips: Vec<Vec<Vec<f32>>>) -> PyResult<(Rows, Rows)> {
        let feats = clips.into_iter().map(feature_from).collect::<PyResult<Vec<_>>>()?;
        let batch = pack_batch(&feats, self.inner.config.min_frames).map_err(err)?;
        let out = self.inner.forward(&batch).map_err(err)?;
        let rows = |v: &[f32], w: usize| v.chunks(w).map(<[f32]>::to_vec).collect();
        Ok((
            rows(&out.species, self.inner.config.num_species),
            rows(&out.domain, self.inner.config.num_domains),
        ))
    }

    /// Argmax species and domain indices per clip.
    fn predict(&self, clips: Vec<Vec<Vec<f32>>>) -> PyResult<(Vec<usize>, Vec<usize>)> {
        let feats = clips.into_iter().map(feature_from).collect::<PyResult<Vec<_>>>()?;
        let batch = pack_batch(&feats, self.inner.config.min_frames).map_err(err)?;
        self.inner.predict(&batch).map_err(err)
    }
}

/// Runs one pipeline stage from a config file, as the `cdmsc` command does.
/// Returns the stage's main output path.
#[pyfunction]
#[pyo3(signature = (config, stage, checkpoint = "best"))]
fn run_stage(py: Python<'_>, config: PathBuf, stage: &str, checkpoint: &str) -> PyResult<String> {
    let mut cfg = PipelineConfig::load(&config).map_err(err)?;
    cfg.apply_env();
    cfg.validate().map_err(err)?;
    let kind = CheckpointKind::parse(checkpoint).map_err(err)?;
    let stage = stage.to_string();
    py.detach(move || -> cdmsc::Result<PathBuf> {
        Ok(match stage.as_str() {
            "synth" => {
                pipeline::cmd_synth(&cfg)?;
                cfg.corpus_root.clone()
            }
            "scan" => {
                pipeline::cmd_scan(&cfg)?;
                cfg.manifest_path()
            }
            "split" => {
                pipeline::cmd_split(&cfg)?;
                cfg.split_path()
            }
            "features" => pipeline::cmd_features(&cfg)?.stats_path,
            "train" => {
                pipeline::cmd_train(&cfg)?;
                cfg.runs_dir()
            }
            "evaluate" => {
                pipeline::cmd_evaluate(&cfg, kind)?;
                cfg.eval_dir(kind)
            }
            "report" => pipeline::cmd_report(&cfg, kind)?.species_svg,
            other => return Err(cdmsc::Error::Config(format!("unknown stage `{other}`"))),
        })
    })
    .map(|p| p.display().to_string())
    .map_err(err)
}

#[pymodule]
fn cdmsc_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(parse_clip_name, m)?)?;
    m.add_function(wrap_pyfunction!(frame_count, m)?)?;
    m.add_function(wrap_pyfunction!(resample, m)?)?;
    m.add_function(wrap_pyfunction!(peak_normalize, m)?)?;
    m.add_function(wrap_pyfunction!(logmel, m)?)?;
    m.add_function(wrap_pyfunction!(extract_features, m)?)?;
    m.add_function(wrap_pyfunction!(confusion, m)?)?;
    m.add_function(wrap_pyfunction!(balanced_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(dsg, m)?)?;
    m.add_function(wrap_pyfunction!(split, m)?)?;
    m.add_function(wrap_pyfunction!(synth_clip, m)?)?;
    m.add_function(wrap_pyfunction!(run_stage, m)?)?;
    m.add_class::<PyModel>()?;
    m.add(
        "PARAM_BUDGET",
        (*model::PARAM_BUDGET.start(), *model::PARAM_BUDGET.end()),
    )?;
    Ok(())
}
