//! Stage drivers shared by the `cdmsc` command and the Python bindings.
//!
//! Every stage reads its inputs from and writes its outputs to fixed places
//! under the configured directories:
//!
//! ```text
//! corpus_root/            audio (+ manifest.csv, test_list.csv when synthetic)
//! out_dir/manifest.csv    scan
//! out_dir/split.csv       split
//! cache_dir/features/     features: one .cdmf per clip
//! cache_dir/index.csv     features: content digests for idempotent reruns
//! cache_dir/stats.cdms    features: standardisation fitted on the train split
//! out_dir/runs/           train: seed_<n>/{best,final}.cdmc, runlog.csv, index.csv
//! out_dir/eval/<kind>/    evaluate: per-seed and aggregate CSVs, summaries
//! out_dir/report/<kind>/  report: SVG charts and the CSVs behind them
//! ```

mod chart;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    assign_roles, derive_seen_unseen_with, read_roles_csv, read_test_list, scan_corpus, ClipKey, Manifest, Role,
    SpeciesNames, UnseenPolicy,
};
use crate::dsp::cache::{decode_feature, encode_feature, encode_stats};
use crate::dsp::{
    extract_clip, fit_standardization, read_stats, read_wav, standardize, LogMelExtractor, LogMelFeature,
};
use crate::error::{Error, Result};
use crate::eval::{
    aggregate_runs, cross_domain_table, seen_unseen_metrics, split_table, write_text, AbsentClassPolicy,
    AggregateReport, MetricsReport,
};
use crate::model::{check_budget, ModelConfig};
use crate::synth::{synth_corpus, SynthCorpus, SynthSpec, TEST_LIST_FILE};
use crate::train::{
    predict_clips, run_all_seeds, run_dir, select_checkpoint, CheckpointKind, LabeledClip, RunLog, TrainConfig,
    TrainData,
};
use crate::util::{fmt6, sha256_hex, write_atomic};

pub const ENV_CACHE_DIR: &str = "CDMSC_CACHE_DIR";
pub const ENV_OUT_DIR: &str = "CDMSC_OUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Directory scanned for `S_<s>_D_<d>_<i>.wav` clips; `synth` writes here.
    pub corpus_root: PathBuf,
    /// Clips held out as the test set. Defaults to `corpus_root/test_list.csv`.
    pub test_list: Option<PathBuf>,
    pub cache_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Synthetic corpus definition; the built-in desk spec when unset.
    pub synth_spec: Option<PathBuf>,
    pub val_fraction: f64,
    pub split_seed: u64,
    pub unseen_policy: UnseenPolicy,
    pub absent_class_policy: AbsentClassPolicy,
    pub workers: usize,
    /// Species names by id, starting at species 1.
    pub species_names: Option<Vec<String>>,
    pub train: TrainConfig,
    pub model: ModelConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            corpus_root: "corpus".into(),
            test_list: None,
            cache_dir: "cache".into(),
            out_dir: "out".into(),
            synth_spec: None,
            val_fraction: 0.12498,
            split_seed: 42,
            unseen_policy: UnseenPolicy::Cell,
            absent_class_policy: AbsentClassPolicy::Exclude,
            workers: 1,
            species_names: None,
            train: TrainConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Parses TOML; relative paths stay relative until [`resolve`](Self::resolve).
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Loads a config file and resolves its paths against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io("read config", path))?;
        let cfg = Self::from_toml(&text).map_err(|e| e.context(path.display().to_string()))?;
        let base = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        Ok(cfg.resolve(base))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Makes every relative path relative to `base`.
    pub fn resolve(mut self, base: &Path) -> Self {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.corpus_root);
        fix(&mut self.cache_dir);
        fix(&mut self.out_dir);
        self.test_list.as_mut().map(fix);
        self.synth_spec.as_mut().map(fix);
        self
    }

    /// Applies `CDMSC_CACHE_DIR` / `CDMSC_OUT_DIR` when set.
    pub fn apply_env(&mut self) {
        self.apply_overrides(
            std::env::var_os(ENV_CACHE_DIR).map(PathBuf::from),
            std::env::var_os(ENV_OUT_DIR).map(PathBuf::from),
        );
    }

    pub fn apply_overrides(&mut self, cache_dir: Option<PathBuf>, out_dir: Option<PathBuf>) {
        if let Some(c) = cache_dir {
            self.cache_dir = c;
        }
        if let Some(o) = out_dir {
            self.out_dir = o;
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::InvalidFraction(self.val_fraction));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        self.train.validate()?;
        self.model.validate()?;
        self.names().map(|_| ())
    }

    pub fn names(&self) -> Result<SpeciesNames> {
        match &self.species_names {
            Some(n) => SpeciesNames::new(n.clone()),
            None => Ok(SpeciesNames::default()),
        }
    }

    pub fn test_list_path(&self) -> PathBuf {
        self.test_list
            .clone()
            .unwrap_or_else(|| self.corpus_root.join(TEST_LIST_FILE))
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.out_dir.join("manifest.csv")
    }

    pub fn split_path(&self) -> PathBuf {
        self.out_dir.join("split.csv")
    }

    pub fn features_dir(&self) -> PathBuf {
        self.cache_dir.join("features")
    }

    pub fn feature_path(&self, key: &ClipKey) -> PathBuf {
        self.features_dir().join(format!("{}.cdmf", key.file_stem()))
    }

    pub fn cache_index_path(&self) -> PathBuf {
        self.cache_dir.join("index.csv")
    }

    pub fn stats_path(&self) -> PathBuf {
        self.cache_dir.join("stats.cdms")
    }

    pub fn runs_dir(&self) -> PathBuf {
        self.out_dir.join("runs")
    }

    pub fn eval_dir(&self, kind: CheckpointKind) -> PathBuf {
        self.out_dir.join("eval").join(kind.short())
    }

    pub fn report_dir(&self, kind: CheckpointKind) -> PathBuf {
        self.out_dir.join("report").join(kind.short())
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers.max(1))
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))
    }
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(Error::io("create directory", dir))
}

fn require(path: &Path, what: &'static str, step: &'static str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingStage {
            what,
            path: path.to_path_buf(),
            step,
        })
    }
}

/// Generates the synthetic corpus into `corpus_root`.
pub fn cmd_synth(cfg: &PipelineConfig) -> Result<SynthCorpus> {
    let spec = match &cfg.synth_spec {
        Some(p) => SynthSpec::load(p)?,
        None => SynthSpec::desk(),
    };
    let corpus = cfg.pool()?.install(|| synth_corpus(&spec, &cfg.corpus_root))?;
    info!(
        "synthesised {} clips into {}",
        corpus.manifest.len(),
        cfg.corpus_root.display()
    );
    Ok(corpus)
}

/// Catalogues the corpus into `out_dir/manifest.csv` and writes the cell counts.
pub fn cmd_scan(cfg: &PipelineConfig) -> Result<Manifest> {
    let manifest = scan_corpus(&cfg.corpus_root)?;
    mkdir(&cfg.out_dir)?;
    manifest.write_csv(&cfg.manifest_path())?;
    write_text(
        &cfg.out_dir.join("counts.csv"),
        &manifest.count_table().render(&cfg.names()?),
    )?;
    info!("scanned {} clips", manifest.len());
    Ok(manifest)
}

pub fn load_manifest(cfg: &PipelineConfig) -> Result<Manifest> {
    let path = cfg.manifest_path();
    require(&path, "manifest", "scan")?;
    Manifest::read_csv(&path, cfg.corpus_root.clone())
}

/// Assigns train/validation/test roles into `out_dir/split.csv`.
pub fn cmd_split(cfg: &PipelineConfig) -> Result<BTreeMap<ClipKey, Role>> {
    let manifest = load_manifest(cfg)?;
    let test_path = cfg.test_list_path();
    if !test_path.exists() {
        return Err(Error::Config(format!("test list not found at {}", test_path.display())));
    }
    let test = read_test_list(&test_path)?;
    let split = assign_roles(&manifest, &test, cfg.val_fraction, cfg.split_seed)?;
    split.write_csv(&manifest, &cfg.split_path())?;
    let names = cfg.names()?;
    let mut counts = String::new();
    for role in [Role::Train, Role::Validation, Role::Test] {
        let _ = writeln!(counts, "# {}", role.as_str());
        counts.push_str(&split.subset(&manifest, role).count_table().render(&names));
    }
    write_text(&cfg.out_dir.join("split_counts.csv"), &counts)?;
    info!(
        "split: {} train, {} validation, {} test",
        split.count(Role::Train),
        split.count(Role::Validation),
        split.count(Role::Test)
    );
    Ok(split.roles)
}

pub fn load_split(cfg: &PipelineConfig) -> Result<BTreeMap<ClipKey, Role>> {
    let path = cfg.split_path();
    require(&path, "split", "split")?;
    read_roles_csv(&path)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureReport {
    pub total: usize,
    pub computed: usize,
    pub reused: usize,
    pub stats_path: PathBuf,
    /// SHA-256 of the stats file; checkpoints record it as their stats reference.
    pub stats_ref: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct IndexEntry {
    source: String,
    feature: String,
}

fn read_cache_index(path: &Path) -> BTreeMap<String, IndexEntry> {
    let Ok(text) = std::fs::read_to_string(path) else {
        return BTreeMap::new();
    };
    let mut index = BTreeMap::new();
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if let [stem, source, feature] = f[..] {
            index.insert(
                stem.to_string(),
                IndexEntry {
                    source: source.to_string(),
                    feature: feature.to_string(),
                },
            );
        } else {
            warn!("ignoring malformed cache index line `{line}`");
        }
    }
    index
}

/// Whether the cached feature for `stem` is still valid for audio with digest `source`.
fn cache_hit(path: &Path, entry: Option<&IndexEntry>, source: &str) -> bool {
    let Some(entry) = entry.filter(|e| e.source == source) else {
        return false;
    };
    match std::fs::read(path) {
        Ok(bytes) => sha256_hex(&bytes) == entry.feature && decode_feature(&bytes).is_ok(),
        Err(_) => false,
    }
}

/// Extracts log-mel features for every clip in the manifest, reusing cached
/// files whose audio and feature digests still match, then fits the
/// standardisation statistics on the train split.
pub fn cmd_features(cfg: &PipelineConfig) -> Result<FeatureReport> {
    let manifest = load_manifest(cfg)?;
    let roles = load_split(cfg)?;
    mkdir(&cfg.features_dir())?;
    let old = read_cache_index(&cfg.cache_index_path());
    let extractor = LogMelExtractor::new();
    let entries: Vec<(String, IndexEntry, bool)> = cfg.pool()?.install(|| {
        manifest
            .records()
            .par_iter()
            .map(|r| -> Result<(String, IndexEntry, bool)> {
                let key = r.key();
                let stem = key.file_stem();
                let audio_path = manifest.absolute_path(r);
                let audio = std::fs::read(&audio_path).map_err(Error::io("read audio", &audio_path))?;
                let source = sha256_hex(&audio);
                let feature_path = cfg.feature_path(&key);
                if cache_hit(&feature_path, old.get(&stem), &source) {
                    let feature = old[&stem].feature.clone();
                    return Ok((stem, IndexEntry { source, feature }, false));
                }
                let w = read_wav(&audio_path)?;
                let f = extract_clip(&w, &extractor).map_err(|e| e.context(audio_path.display().to_string()))?;
                let bytes = encode_feature(&f);
                write_atomic(&feature_path, &bytes)?;
                let feature = sha256_hex(&bytes);
                Ok((stem, IndexEntry { source, feature }, true))
            })
            .collect::<Result<_>>()
    })?;
    let computed = entries.iter().filter(|e| e.2).count();
    let mut index = String::from("stem,source_sha256,feature_sha256\n");
    for (stem, e, _) in &entries {
        let _ = writeln!(index, "{stem},{},{}", e.source, e.feature);
    }
    write_atomic(&cfg.cache_index_path(), index.as_bytes())?;

    // Clip order is manifest order, so the merged statistics do not depend on workers.
    let split_digest = sha256_hex(&std::fs::read(cfg.split_path()).map_err(Error::io("read split", cfg.split_path()))?);
    let train: Vec<LogMelFeature> = manifest
        .records()
        .iter()
        .filter(|r| roles.get(&r.key()) == Some(&Role::Train))
        .map(|r| crate::dsp::read_feature(&cfg.feature_path(&r.key())))
        .collect::<Result<_>>()?;
    if train.is_empty() {
        return Err(Error::EmptySplit("train"));
    }
    let stats = fit_standardization(&train, &format!("train split {}", &split_digest[..16]))?;
    let bytes = encode_stats(&stats)?;
    write_atomic(&cfg.stats_path(), &bytes)?;
    let report = FeatureReport {
        total: entries.len(),
        computed,
        reused: entries.len() - computed,
        stats_path: cfg.stats_path(),
        stats_ref: sha256_hex(&bytes),
    };
    info!("features: {} computed, {} reused", report.computed, report.reused);
    Ok(report)
}

/// Standardised clips of one role, in manifest order, plus the stats reference.
pub struct RoleClips {
    pub clips: Vec<LabeledClip>,
    pub stats_ref: String,
}

pub fn load_role_clips(
    cfg: &PipelineConfig,
    manifest: &Manifest,
    roles: &BTreeMap<ClipKey, Role>,
    role: Role,
) -> Result<RoleClips> {
    let stats_path = cfg.stats_path();
    require(&stats_path, "standardisation stats", "features")?;
    let stats_bytes = std::fs::read(&stats_path).map_err(Error::io("read stats", &stats_path))?;
    let stats = read_stats(&stats_path)?;
    let clips = manifest
        .records()
        .iter()
        .filter(|r| roles.get(&r.key()) == Some(&role))
        .map(|r| -> Result<LabeledClip> {
            let key = r.key();
            let path = cfg.feature_path(&key);
            require(&path, "feature file", "features")?;
            let raw = crate::dsp::read_feature(&path)?;
            Ok(LabeledClip {
                key,
                feature: standardize(&raw, &stats)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(RoleClips {
        clips,
        stats_ref: sha256_hex(&stats_bytes),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunIndexRow {
    pub seed: u64,
    pub ok: bool,
    pub best_epoch: Option<usize>,
    pub stop_epoch: Option<usize>,
    pub best_val_ba: Option<f64>,
    pub error: Option<String>,
}

fn run_index_csv(rows: &[RunIndexRow]) -> String {
    let mut out = String::from("seed,status,best_epoch,stop_epoch,best_val_ba,error\n");
    let opt = |v: Option<String>| v.unwrap_or_default();
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.seed,
            if r.ok { "ok" } else { "failed" },
            opt(r.best_epoch.map(|e| e.to_string())),
            opt(r.stop_epoch.map(|e| e.to_string())),
            opt(r.best_val_ba.map(fmt6)),
            opt(r.error.as_ref().map(|e| e.replace([',', '\n'], ";"))),
        );
    }
    out
}

/// Trains one run per configured seed and writes `runs/index.csv`. Failed
/// seeds do not stop the others; any failure makes the result an error.
pub fn cmd_train(cfg: &PipelineConfig) -> Result<Vec<(u64, RunLog)>> {
    check_budget(&cfg.model)?;
    require(&cfg.stats_path(), "standardisation stats", "features")?;
    let manifest = load_manifest(cfg)?;
    let roles = load_split(cfg)?;
    let train = load_role_clips(cfg, &manifest, &roles, Role::Train)?;
    let val = load_role_clips(cfg, &manifest, &roles, Role::Validation)?;
    let runs_dir = cfg.runs_dir();
    mkdir(&runs_dir)?;
    let data = TrainData {
        train: &train.clips,
        val: &val.clips,
        stats_ref: &train.stats_ref,
    };
    let results = run_all_seeds(&data, &cfg.model, &cfg.train, &runs_dir, cfg.workers)?;
    let mut rows = Vec::new();
    let mut logs = Vec::new();
    let mut failed = Vec::new();
    for (seed, r) in results {
        match r {
            Ok(log) => {
                rows.push(RunIndexRow {
                    seed,
                    ok: true,
                    best_epoch: Some(log.best_epoch),
                    stop_epoch: Some(log.stop_epoch),
                    best_val_ba: log.best_record().map(|b| b.val_ba),
                    error: None,
                });
                info!(
                    "seed {seed}: best epoch {}, stopped at {} ({:.1} s)",
                    log.best_epoch, log.stop_epoch, log.wall_time_s
                );
                logs.push((seed, log));
            }
            Err(e) => {
                rows.push(RunIndexRow {
                    seed,
                    ok: false,
                    best_epoch: None,
                    stop_epoch: None,
                    best_val_ba: None,
                    error: Some(e.to_string()),
                });
                failed.push(seed);
            }
        }
    }
    write_atomic(&runs_dir.join("index.csv"), run_index_csv(&rows).as_bytes())?;
    if !failed.is_empty() {
        return Err(Error::RunsFailed {
            failed: failed.len(),
            total: rows.len(),
            seeds: failed,
        });
    }
    Ok(logs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub kind: CheckpointKind,
    /// Test-set report per seed, in seed order.
    pub test: Vec<(u64, MetricsReport)>,
    pub validation: Vec<(u64, MetricsReport)>,
    pub test_aggregate: AggregateReport,
    pub validation_aggregate: AggregateReport,
    /// BA_seen, BA_unseen and DSG as mean ± std.
    pub cross_domain: String,
    /// Accuracy and BA on validation and test as mean ± std.
    pub splits: String,
}

fn score(
    model: &crate::model::MtrcnnModel<f32>,
    clips: &[LabeledClip],
    cfg: &PipelineConfig,
    su: &crate::corpus::SeenUnseenMap,
) -> Result<MetricsReport> {
    let feats: Vec<&LogMelFeature> = clips.iter().map(|c| &c.feature).collect();
    let (pred, _) = predict_clips(model, &feats, cfg.train.eval_batch)?;
    let keys: Vec<ClipKey> = clips.iter().map(|c| c.key).collect();
    let predictions: BTreeMap<ClipKey, usize> = keys.iter().copied().zip(pred).collect();
    seen_unseen_metrics(
        &predictions,
        &keys,
        su,
        model.config.num_species,
        model.config.num_domains,
        cfg.absent_class_policy,
    )
}

/// Scores the chosen checkpoint of every seed on the test and validation
/// splits and writes per-seed and aggregate reports under `eval/<kind>/`.
pub fn cmd_evaluate(cfg: &PipelineConfig, kind: CheckpointKind) -> Result<Evaluation> {
    let manifest = load_manifest(cfg)?;
    let roles = load_split(cfg)?;
    let test = load_role_clips(cfg, &manifest, &roles, Role::Test)?;
    let val = load_role_clips(cfg, &manifest, &roles, Role::Validation)?;
    let trainval = manifest.filter(|k| matches!(roles.get(k), Some(Role::Train | Role::Validation)));
    let test_manifest = manifest.filter(|k| roles.get(k) == Some(&Role::Test));
    let su = derive_seen_unseen_with(&trainval, &test_manifest, cfg.unseen_policy);
    let dir = cfg.eval_dir(kind);
    let mut test_reports = Vec::new();
    let mut val_reports = Vec::new();
    for &seed in &cfg.train.seeds {
        let ckpt = select_checkpoint(&run_dir(&cfg.runs_dir(), seed), kind)?;
        if ckpt.stats_ref != test.stats_ref {
            return Err(Error::Config(format!(
                "seed {seed}: checkpoint was trained with different standardisation stats; rerun `cdmsc train`"
            )));
        }
        let t = score(&ckpt.model, &test.clips, cfg, &su).map_err(|e| e.context(format!("seed {seed}")))?;
        let v = score(&ckpt.model, &val.clips, cfg, &su).map_err(|e| e.context(format!("seed {seed}")))?;
        let seed_dir = dir.join(format!("seed_{seed}"));
        mkdir(&seed_dir)?;
        write_text(&seed_dir.join("test_metrics.csv"), &t.to_csv())?;
        write_text(&seed_dir.join("val_metrics.csv"), &v.to_csv())?;
        test_reports.push((seed, t));
        val_reports.push((seed, v));
    }
    let strip = |r: &[(u64, MetricsReport)]| r.iter().map(|(_, m)| m.clone()).collect::<Vec<_>>();
    let test_aggregate = aggregate_runs(&strip(&test_reports))?;
    let validation_aggregate = aggregate_runs(&strip(&val_reports))?;
    let cross_domain = cross_domain_table(&[(kind.label(), &test_aggregate)]);
    let splits = split_table(&[(kind.label(), &validation_aggregate, &test_aggregate)]);
    write_text(&dir.join("test_aggregate.csv"), &test_aggregate.to_csv())?;
    write_text(&dir.join("val_aggregate.csv"), &validation_aggregate.to_csv())?;
    write_text(&dir.join("cross_domain.txt"), &cross_domain)?;
    write_text(&dir.join("splits.txt"), &splits)?;
    write_combined_summary(cfg)?;
    Ok(Evaluation {
        kind,
        test: test_reports,
        validation: val_reports,
        test_aggregate,
        validation_aggregate,
        cross_domain,
        splits,
    })
}

pub fn load_aggregate(cfg: &PipelineConfig, kind: CheckpointKind, file: &str) -> Result<AggregateReport> {
    let path = cfg.eval_dir(kind).join(file);
    let text = std::fs::read_to_string(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingEvaluation(format!(
            "{} (run `cdmsc evaluate --checkpoint {}` first)",
            path.display(),
            kind.short()
        )),
        _ => Error::io("read evaluation", &path)(e),
    })?;
    AggregateReport::from_csv(&text).map_err(|e| e.context(path.display().to_string()))
}

/// `eval/summary.txt`: both summary tables over whichever kinds have been evaluated.
fn write_combined_summary(cfg: &PipelineConfig) -> Result<()> {
    let mut loaded = Vec::new();
    for kind in [CheckpointKind::BestValidation, CheckpointKind::Final] {
        if cfg.eval_dir(kind).join("test_aggregate.csv").exists() {
            let test = load_aggregate(cfg, kind, "test_aggregate.csv")?;
            let val = load_aggregate(cfg, kind, "val_aggregate.csv")?;
            loaded.push((kind.label(), val, test));
        }
    }
    let cross: Vec<(&str, &AggregateReport)> = loaded.iter().map(|(l, _, t)| (*l, t)).collect();
    let splits: Vec<(&str, &AggregateReport, &AggregateReport)> = loaded.iter().map(|(l, v, t)| (*l, v, t)).collect();
    let text = format!(
        "Seen and unseen domains (test)\n{}\nValidation and test\n{}",
        cross_domain_table(&cross),
        split_table(&splits)
    );
    write_text(&cfg.out_dir.join("eval").join("summary.txt"), &text)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportFiles {
    pub species_svg: PathBuf,
    pub species_csv: PathBuf,
    pub domain_svg: PathBuf,
    pub domain_csv: PathBuf,
}

/// Per-species seen/unseen and per-domain BA charts from an evaluation.
pub fn cmd_report(cfg: &PipelineConfig, kind: CheckpointKind) -> Result<ReportFiles> {
    let agg = load_aggregate(cfg, kind, "test_aggregate.csv")?;
    let names = cfg.names()?;
    let dir = cfg.report_dir(kind);
    mkdir(&dir)?;
    let species = chart::species_series(&agg, &names);
    let domains = chart::domain_series(&agg);
    let files = ReportFiles {
        species_svg: dir.join("species_ba.svg"),
        species_csv: dir.join("species_ba.csv"),
        domain_svg: dir.join("domain_ba.svg"),
        domain_csv: dir.join("domain_ba.csv"),
    };
    let runs = agg.runs;
    write_text(&files.species_csv, &chart::species_csv(&species))?;
    write_text(&files.domain_csv, &chart::domain_csv(&domains))?;
    write_text(
        &files.species_svg,
        &chart::species_svg(
            &species,
            &format!("Per-species balanced accuracy ({}, {runs} runs)", kind.label()),
        ),
    )?;
    write_text(
        &files.domain_svg,
        &chart::domain_svg(
            &domains,
            &format!("Per-domain balanced accuracy ({}, {runs} runs)", kind.label()),
        ),
    )?;
    Ok(files)
}
