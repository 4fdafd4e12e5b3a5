//! Multi-seed training: random cropping, the dual-head loss, early stopping
//! on validation species balanced accuracy, and best/final checkpoints.
//!
//! Checkpoint layout (`CDMC`, little-endian): magic, version u16, kind u8
//! (0 best-validation, 1 final), seed u64, epoch u32, validation BA f64,
//! config digest (u16-length string), model config TOML (u32-length string),
//! standardisation reference (u16-length string), parameter count u32 and per
//! parameter its name (u16-length string), rank u8, dims u32 each and f32
//! values; then norm-layer count u32 with per layer a u32 width and f64 means
//! and variances; then an optimiser flag u8 and, if set, the AdamW state.

use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::ClipKey;
use crate::dsp::LogMelFeature;
use crate::error::{Error, Result};
use crate::eval::{balanced_accuracy, confusion};
use crate::model::{pack_batch, ModelConfig, MtrcnnModel, RunningStats};
use crate::nn::{AdamW, DiffTensor, ParamStore, Parameter};
use crate::util::{fmt6, sha256_hex, write_atomic, ByteReader};

/// The ten run seeds of the reference protocol.
pub const DEFAULT_SEEDS: [u64; 10] = [42, 3407, 1234, 2023, 2024, 1024, 2048, 4096, 8192, 10086];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub train_batch: usize,
    pub eval_batch: usize,
    pub max_epochs: usize,
    /// Epochs up to and including this one never stop training.
    pub early_stop_start_epoch: usize,
    pub patience: usize,
    pub crop_frames: usize,
    /// Weight of the domain-head loss.
    pub aux_weight: f64,
    pub seeds: Vec<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 0.01,
            train_batch: 64,
            eval_batch: 8,
            max_epochs: 100,
            early_stop_start_epoch: 10,
            patience: 5,
            crop_frames: 200,
            aux_weight: 1.0,
            seeds: DEFAULT_SEEDS.to_vec(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.weight_decay >= 0.0
            && self.aux_weight >= 0.0
            && self.train_batch >= 1
            && self.eval_batch >= 1
            && self.max_epochs >= 1
            && self.patience >= 1
            && self.crop_frames >= 1
            && !self.seeds.is_empty();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid training configuration {self:?}")))
        }
    }
}

/// A feature with its species and domain labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledClip {
    pub key: ClipKey,
    pub feature: LogMelFeature,
}

impl LabeledClip {
    pub fn species_label(&self) -> usize {
        self.key.species.index()
    }

    pub fn domain_label(&self) -> usize {
        self.key.domain.index()
    }
}

/// A uniformly placed `crop_frames` window of longer clips; shorter clips
/// are returned whole.
pub fn random_crop<R: Rng>(f: &LogMelFeature, crop_frames: usize, rng: &mut R) -> LogMelFeature {
    if f.frames <= crop_frames {
        return f.clone();
    }
    let start = rng.gen_range(0..=f.frames - crop_frames);
    f.slice_frames(start, crop_frames)
}

/// Patience bookkeeping: the best epoch counts from epoch 1, but only
/// epochs after `start_epoch` add to the non-improvement counter.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    start_epoch: usize,
    patience: usize,
    best: Option<(usize, f64)>,
    stale: usize,
}

impl EarlyStopper {
    pub fn new(start_epoch: usize, patience: usize) -> Self {
        Self {
            start_epoch,
            patience,
            best: None,
            stale: 0,
        }
    }

    /// Records validation BA for 1-based `epoch`; returns `(improved, stop)`.
    pub fn observe(&mut self, epoch: usize, ba: f64) -> (bool, bool) {
        let improved = self.best.is_none_or(|(_, b)| ba > b);
        if improved {
            self.best = Some((epoch, ba));
            self.stale = 0;
        } else if epoch > self.start_epoch {
            self.stale += 1;
        }
        (improved, self.stale >= self.patience)
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best.map(|(e, _)| e)
    }
}

/// `(best_epoch, stop_epoch)` for a per-epoch BA sequence; training that
/// never stops ends at the last listed epoch.
pub fn simulate_early_stopping(bas: &[f64], start_epoch: usize, patience: usize) -> (usize, usize) {
    let mut s = EarlyStopper::new(start_epoch, patience);
    for (i, ba) in bas.iter().enumerate() {
        if s.observe(i + 1, *ba).1 {
            return (s.best_epoch().unwrap_or(1), i + 1);
        }
    }
    (s.best_epoch().unwrap_or(0), bas.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    BestValidation,
    Final,
}

impl CheckpointKind {
    pub fn file_name(self) -> &'static str {
        match self {
            Self::BestValidation => "best.cdmc",
            Self::Final => "final.cdmc",
        }
    }

    /// Row label in summaries.
    pub fn label(self) -> &'static str {
        crate::eval::checkpoint_label(self == Self::BestValidation)
    }

    pub fn short(self) -> &'static str {
        match self {
            Self::BestValidation => "best",
            Self::Final => "final",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "best" | "best_validation" => Ok(Self::BestValidation),
            "final" => Ok(Self::Final),
            other => Err(Error::Config(format!(
                "unknown checkpoint kind `{other}` (expected best or final)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub seed: u64,
    pub epoch: usize,
    pub val_species_ba: f64,
    /// Digest of the standardisation statistics the model was trained on.
    pub stats_ref: String,
    pub model: MtrcnnModel<f32>,
    pub optimizer: Option<AdamW<f32>>,
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CDMC";
pub const CHECKPOINT_VERSION: u16 = 1;

fn put_str16(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u16).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_str32(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_f32s(out: &mut Vec<u8>, v: &[f32]) {
    out.extend_from_slice(&(v.len() as u32).to_le_bytes());
    v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
}

fn get_f32s(r: &mut ByteReader<'_>) -> Result<Vec<f32>> {
    let n = r.u32()? as usize;
    r.f32_vec(n)
}

fn get_f64s(r: &mut ByteReader<'_>, n: usize) -> Result<Vec<f64>> {
    (0..n).map(|_| r.f64()).collect()
}

pub fn config_toml(cfg: &ModelConfig) -> String {
    toml::to_string(cfg).expect("model config serialises")
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.push(match self.kind {
            CheckpointKind::BestValidation => 0,
            CheckpointKind::Final => 1,
        });
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.epoch as u32).to_le_bytes());
        out.extend_from_slice(&self.val_species_ba.to_le_bytes());
        let cfg = config_toml(&self.model.config);
        put_str16(&mut out, &sha256_hex(cfg.as_bytes()));
        put_str32(&mut out, &cfg);
        put_str16(&mut out, &self.stats_ref);
        out.extend_from_slice(&(self.model.params.len() as u32).to_le_bytes());
        for p in self.model.params.iter() {
            put_str16(&mut out, &p.name);
            out.push(p.tensor.shape.len() as u8);
            for d in &p.tensor.shape {
                out.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            p.tensor
                .values
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        }
        out.extend_from_slice(&(self.model.running.len() as u32).to_le_bytes());
        for r in &self.model.running {
            out.extend_from_slice(&(r.mean.len() as u32).to_le_bytes());
            r.mean
                .iter()
                .chain(&r.var)
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        }
        match &self.optimizer {
            None => out.push(0),
            Some(opt) => {
                out.push(1);
                for v in [opt.lr, opt.beta1, opt.beta2, opt.eps, opt.weight_decay] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                out.extend_from_slice(&opt.step_count.to_le_bytes());
                out.extend_from_slice(&(opt.moments.len() as u32).to_le_bytes());
                for (m, v) in &opt.moments {
                    put_f32s(&mut out, m);
                    put_f32s(&mut out, v);
                }
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        const WHAT: &str = "checkpoint";
        let mut r = ByteReader::new(bytes, WHAT);
        r.magic(CHECKPOINT_MAGIC)?;
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::bad(WHAT, format!("unsupported version {version}")));
        }
        let kind = match r.u8()? {
            0 => CheckpointKind::BestValidation,
            1 => CheckpointKind::Final,
            k => return Err(Error::bad(WHAT, format!("unknown kind {k}"))),
        };
        let seed = r.u64()?;
        let epoch = r.u32()? as usize;
        let val_species_ba = r.f64()?;
        let digest = r.string_u16()?;
        let cfg_text = r.string_u32()?;
        if sha256_hex(cfg_text.as_bytes()) != digest {
            return Err(Error::bad(WHAT, "model config digest mismatch"));
        }
        let config: ModelConfig =
            toml::from_str(&cfg_text).map_err(|e| Error::bad(WHAT, format!("model config: {e}")))?;
        let stats_ref = r.string_u16()?;
        let mut model = MtrcnnModel::<f32>::new(config, 0)?;
        let n = r.u32()? as usize;
        if n != model.params.len() {
            return Err(Error::bad(
                WHAT,
                format!("{n} parameters, config implies {}", model.params.len()),
            ));
        }
        let mut params = Vec::with_capacity(n);
        for i in 0..n {
            let name = r.string_u16()?;
            let rank = r.u8()? as usize;
            let shape: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
            let expected = model.params.at(i);
            if expected.name != name || expected.tensor.shape != shape {
                return Err(Error::bad(
                    WHAT,
                    format!("parameter `{name}` {shape:?} does not match the config"),
                ));
            }
            let values = r.f32_vec(shape.iter().product())?;
            params.push(Parameter {
                name,
                tensor: DiffTensor::new(shape, values, true)?,
            });
        }
        model.params = ParamStore::new(params)?;
        let layers = r.u32()? as usize;
        if layers != model.running.len() {
            return Err(Error::bad(WHAT, "norm layer count does not match the config"));
        }
        for slot in model.running.iter_mut() {
            let width = r.u32()? as usize;
            if width != slot.mean.len() {
                return Err(Error::bad(WHAT, "norm layer width does not match the config"));
            }
            *slot = RunningStats {
                mean: get_f64s(&mut r, width)?,
                var: get_f64s(&mut r, width)?,
            };
        }
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let mut opt = AdamW::new(r.f64()?, 0.0);
                opt.beta1 = r.f64()?;
                opt.beta2 = r.f64()?;
                opt.eps = r.f64()?;
                opt.weight_decay = r.f64()?;
                opt.step_count = r.u64()?;
                let m = r.u32()? as usize;
                opt.moments = (0..m)
                    .map(|_| Ok((get_f32s(&mut r)?, get_f32s(&mut r)?)))
                    .collect::<Result<_>>()?;
                Some(opt)
            }
            f => return Err(Error::bad(WHAT, format!("bad optimizer flag {f}"))),
        };
        r.finish()?;
        Ok(Self {
            kind,
            seed,
            epoch,
            val_species_ba,
            stats_ref,
            model,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingCheckpoint(path.display().to_string()),
            _ => Error::io("read checkpoint", path)(e),
        })?;
        Self::decode(&bytes).map_err(|e| e.context(path.display().to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
    pub val_ba: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub seed: u64,
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stop_epoch: usize,
    pub wall_time_s: f64,
}

impl RunLog {
    /// CSV `epoch,train_loss,val_acc,val_ba` (wall time is not included so
    /// that logs of identical runs compare equal).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_acc,val_ba\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.epoch,
                fmt6(r.train_loss),
                fmt6(r.val_acc),
                fmt6(r.val_ba)
            ));
        }
        out
    }

    /// Earliest epoch with the maximal validation BA.
    pub fn best_record(&self) -> Option<&EpochRecord> {
        self.records
            .iter()
            .fold(None, |best: Option<&EpochRecord>, r| match best {
                Some(b) if b.val_ba >= r.val_ba => Some(b),
                _ => Some(r),
            })
    }
}

pub struct RunOutput {
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub log: RunLog,
}

/// Species and domain predictions for full (uncropped) clips, `eval_batch` at a time.
pub fn predict_clips(
    model: &MtrcnnModel<f32>,
    clips: &[&LogMelFeature],
    eval_batch: usize,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut species = Vec::with_capacity(clips.len());
    let mut domains = Vec::with_capacity(clips.len());
    for chunk in clips.chunks(eval_batch.max(1)) {
        let batch = pack_batch(chunk.iter().copied(), model.config.min_frames)?;
        let (s, d) = model.predict(&batch)?;
        species.extend(s);
        domains.extend(d);
    }
    Ok((species, domains))
}

/// Species accuracy and balanced accuracy on labelled clips.
pub fn species_scores(model: &MtrcnnModel<f32>, clips: &[LabeledClip], eval_batch: usize) -> Result<(f64, f64)> {
    let feats: Vec<&LogMelFeature> = clips.iter().map(|c| &c.feature).collect();
    let (pred, _) = predict_clips(model, &feats, eval_batch)?;
    let truth: Vec<usize> = clips.iter().map(|c| c.species_label()).collect();
    let m = confusion(&truth, &pred, model.config.num_species)?;
    Ok((m.accuracy().unwrap_or(0.0), balanced_accuracy(&m)?))
}

fn diverged(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::NonFinite { .. } => Error::DivergedLoss { epoch, batch },
        other => other,
    }
}

/// One seeded run. Initialisation, shuffling and cropping all derive from `seed`.
pub fn train_one_run(
    train: &[LabeledClip],
    val: &[LabeledClip],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    seed: u64,
    stats_ref: &str,
) -> Result<RunOutput> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptySplit("train"));
    }
    if val.is_empty() {
        return Err(Error::EmptySplit("validation"));
    }
    let started = Instant::now();
    let mut model = MtrcnnModel::<f32>::new(model_cfg.clone(), seed)?;
    let mut opt = AdamW::<f32>::new(cfg.lr, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stopper = EarlyStopper::new(cfg.early_stop_start_epoch, cfg.patience);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut records = Vec::new();
    let mut best: Option<Checkpoint> = None;
    let snapshot = |kind, epoch, ba, model: &MtrcnnModel<f32>, opt: &AdamW<f32>| Checkpoint {
        kind,
        seed,
        epoch,
        val_species_ba: ba,
        stats_ref: stats_ref.to_string(),
        model: model.clone(),
        optimizer: Some(opt.clone()),
    };
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (bi, idx) in order.chunks(cfg.train_batch).enumerate() {
            let crops: Vec<LogMelFeature> = idx
                .iter()
                .map(|i| random_crop(&train[*i].feature, cfg.crop_frames, &mut rng))
                .collect();
            let batch = pack_batch(&crops, model.config.min_frames)?;
            let species: Vec<usize> = idx.iter().map(|i| train[*i].species_label()).collect();
            let domains: Vec<usize> = idx.iter().map(|i| train[*i].domain_label()).collect();
            let loss = model
                .train_step(&batch, &species, &domains, cfg.aux_weight)
                .map_err(|e| diverged(e, epoch, bi + 1))?;
            if !loss.is_finite() {
                return Err(Error::DivergedLoss { epoch, batch: bi + 1 });
            }
            opt.step(&mut model.params)?;
            model.params.zero_grad();
            loss_sum += loss * idx.len() as f64;
        }
        let (val_acc, val_ba) = species_scores(&model, val, cfg.eval_batch)?;
        records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_acc,
            val_ba,
        });
        info!(
            "seed {seed} epoch {epoch}: loss {:.4} val acc {val_acc:.4} val BA {val_ba:.4}",
            loss_sum / train.len() as f64
        );
        let (improved, stop) = stopper.observe(epoch, val_ba);
        if improved {
            best = Some(snapshot(CheckpointKind::BestValidation, epoch, val_ba, &model, &opt));
        }
        if stop || epoch == cfg.max_epochs {
            break;
        }
    }
    let last_record = *records.last().expect("at least one epoch");
    let best = best.expect("first epoch always improves");
    let log = RunLog {
        seed,
        best_epoch: best.epoch,
        stop_epoch: last_record.epoch,
        records,
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    Ok(RunOutput {
        last: snapshot(
            CheckpointKind::Final,
            last_record.epoch,
            last_record.val_ba,
            &model,
            &opt,
        ),
        best,
        log,
    })
}

pub fn run_dir(out_dir: &Path, seed: u64) -> PathBuf {
    out_dir.join(format!("seed_{seed}"))
}

/// Writes both checkpoints and the run log into `dir`.
pub fn save_run(run: &RunOutput, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(Error::io("create run directory", dir))?;
    run.best.save(&dir.join(CheckpointKind::BestValidation.file_name()))?;
    run.last.save(&dir.join(CheckpointKind::Final.file_name()))?;
    write_atomic(&dir.join("runlog.csv"), run.log.to_csv().as_bytes())
}

/// Training inputs shared by every seed.
pub struct TrainData<'a> {
    pub train: &'a [LabeledClip],
    pub val: &'a [LabeledClip],
    pub stats_ref: &'a str,
}

/// Trains every seed in `cfg.seeds` on up to `workers` threads, each into
/// `out_dir/seed_<seed>`. A failed seed is reported and the rest continue.
/// Results come back in seed order whatever the worker count.
pub fn run_all_seeds(
    data: &TrainData<'_>,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    out_dir: &Path,
    workers: usize,
) -> Result<Vec<(u64, Result<RunLog>)>> {
    cfg.validate()?;
    let one = |seed: u64| -> Result<RunLog> {
        let run = train_one_run(data.train, data.val, model_cfg, cfg, seed, data.stats_ref)?;
        save_run(&run, &run_dir(out_dir, seed))?;
        Ok(run.log)
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    use rayon::prelude::*;
    let results: Vec<(u64, Result<RunLog>)> = pool.install(|| cfg.seeds.par_iter().map(|s| (*s, one(*s))).collect());
    for (seed, r) in &results {
        if let Err(e) = r {
            warn!("seed {seed} failed: {e}");
        }
    }
    Ok(results)
}

/// Loads the requested checkpoint of a finished run.
pub fn select_checkpoint(run_dir: &Path, kind: CheckpointKind) -> Result<Checkpoint> {
    let path = run_dir.join(kind.file_name());
    if !path.exists() {
        return Err(Error::MissingCheckpoint(path.display().to_string()));
    }
    Checkpoint::load(&path)
}
