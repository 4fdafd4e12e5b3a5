//! MTRCNN: three parallel branches of dilated convolutions with different
//! kernel sizes, masked temporal pooling and two linear heads (species and
//! recording domain).
//!
//! Each branch runs `conv -> batch-norm -> ReLU -> frequency pool` three
//! times. Dilation and frequency pooling touch only their own axis: dilation
//! the time axis, pooling the mel axis, so the temporal receptive field of a
//! branch is `1 + (k - 1) * sum(dilations)` and padded frames can be masked
//! exactly.

use std::fmt::Write as _;
use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};

use crate::dsp::LogMelFeature;
use crate::error::{Error, Result};
use crate::nn::{
    seeded_init, BatchNormMode, BatchStats, Conv2dConfig, DiffTensor, ParamStore, Parameter, Real, Tape, Var,
};

/// Inclusive window the default configuration must fall in.
pub const PARAM_BUDGET: RangeInclusive<usize> = 200_000..=240_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// `(time, freq)` kernel per branch.
    pub kernel_sizes: Vec<(usize, usize)>,
    /// Time-axis dilation of each conv layer within a branch.
    pub dilations_per_layer: Vec<usize>,
    /// Output channels of each conv layer within a branch.
    pub channels: Vec<usize>,
    /// Mel-axis average-pool factor after each layer (1 = none).
    pub freq_pool: Vec<usize>,
    pub num_species: usize,
    pub num_domains: usize,
    /// Shorter clips are zero-padded up to this many frames.
    pub min_frames: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kernel_sizes: vec![(3, 3), (5, 5), (7, 7)],
            dilations_per_layer: vec![1, 2, 5],
            channels: vec![16, 32, 64],
            freq_pool: vec![4, 4, 1],
            num_species: 9,
            num_domains: 5,
            min_frames: 110,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.kernel_sizes.len() != 3 {
            return bad(format!("expected 3 branches, got {}", self.kernel_sizes.len()));
        }
        let layers = self.dilations_per_layer.len();
        if layers != 3 || self.channels.len() != 3 || self.freq_pool.len() != 3 {
            return bad("dilations_per_layer, channels and freq_pool must each list 3 layers".into());
        }
        if self.kernel_sizes.iter().any(|(kt, kf)| kt % 2 == 0 || kf % 2 == 0) {
            return bad("kernel sizes must be odd for same padding".into());
        }
        if self
            .dilations_per_layer
            .iter()
            .chain(&self.channels)
            .chain(&self.freq_pool)
            .any(|v| *v == 0)
        {
            return bad("dilations, channels and pool factors must be positive".into());
        }
        if self.num_species < 2 || self.num_domains < 1 || self.min_frames == 0 {
            return bad("need at least 2 species, 1 domain and min_frames >= 1".into());
        }
        if !(self.bn_eps > 0.0 && self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return bad("bn_eps must be > 0 and bn_momentum in (0, 1]".into());
        }
        Ok(())
    }

    /// Mel bands an input needs for every pooling stage to be valid.
    pub fn min_bands(&self) -> usize {
        self.freq_pool.iter().product()
    }

    pub fn embedding_width(&self) -> usize {
        self.kernel_sizes.len() * self.channels.last().copied().unwrap_or(0)
    }

    fn conv_config(&self, branch: usize, layer: usize) -> Conv2dConfig {
        let (kt, kf) = self.kernel_sizes[branch];
        let d = self.dilations_per_layer[layer];
        Conv2dConfig {
            stride: (1, 1),
            padding: (d * (kt - 1) / 2, (kf - 1) / 2),
            dilation: (d, 1),
        }
    }

    /// Parameter count implied by the configuration.
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        for &(kt, kf) in &self.kernel_sizes {
            let mut c_in = 1;
            for &c in &self.channels {
                n += c * c_in * kt * kf + 2 * c;
                c_in = c;
            }
        }
        let e = self.embedding_width();
        n + (e + 1) * (self.num_species + self.num_domains)
    }
}

/// Temporal receptive field of one branch: `1 + (k - 1) * sum(dilations)`.
pub fn temporal_receptive_field(kernel_time: usize, dilations: &[usize]) -> usize {
    1 + (kernel_time - 1) * dilations.iter().sum::<usize>()
}

/// Zero-padded batch `[B, 1, T_max, bands]` with per-clip valid lengths.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchInput {
    pub features: Vec<f32>,
    pub batch: usize,
    pub frames: usize,
    pub bands: usize,
    pub lengths: Vec<usize>,
}

impl BatchInput {
    /// `mask[b][t]` is true on valid frames.
    pub fn mask(&self) -> Vec<Vec<bool>> {
        self.lengths
            .iter()
            .map(|l| (0..self.frames).map(|t| t < *l).collect())
            .collect()
    }
}

/// Packs clips into one zero-padded batch. `T_max` is at least `min_frames`,
/// and clips shorter than `min_frames` count as `min_frames` long (their
/// zero padding becomes part of the valid signal).
pub fn pack_batch<'a>(features: impl IntoIterator<Item = &'a LogMelFeature>, min_frames: usize) -> Result<BatchInput> {
    let features: Vec<&LogMelFeature> = features.into_iter().collect();
    let first = features.first().ok_or(Error::EmptyBatch)?;
    let bands = first.bands;
    for f in &features {
        if !f.standardized {
            return Err(Error::NotStandardized);
        }
        if f.bands != bands {
            return Err(Error::BandMismatch {
                expected: bands,
                actual: f.bands,
            });
        }
        if f.frames == 0 {
            return Err(Error::NoFrames);
        }
    }
    let frames = features.iter().map(|f| f.frames).max().unwrap_or(0).max(min_frames);
    let mut values = vec![0.0f32; features.len() * frames * bands];
    for (i, f) in features.iter().enumerate() {
        let dst = i * frames * bands;
        values[dst..dst + f.values.len()].copy_from_slice(&f.values);
    }
    Ok(BatchInput {
        features: values,
        batch: features.len(),
        frames,
        bands,
        lengths: features.iter().map(|f| f.frames.max(min_frames)).collect(),
    })
}

/// Logits of both heads, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DualLogits<T> {
    pub species: Vec<T>,
    pub domain: Vec<T>,
    pub batch: usize,
}

/// Row-wise argmax; ties go to the lowest index.
pub fn argmax_rows<T: PartialOrd + Copy>(values: &[T], width: usize) -> Vec<usize> {
    values
        .chunks(width)
        .map(|row| {
            let mut best = 0;
            for (k, v) in row.iter().enumerate().skip(1) {
                if *v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Running batch-norm statistics, one entry per norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Handles into a recorded forward pass.
pub struct ForwardVars {
    pub species: Var,
    pub domain: Var,
    /// Inputs of every ReLU, in layer order (kink diagnostics).
    pub pre_activations: Vec<Var>,
    /// Batch statistics per norm layer when recorded in training mode.
    pub batch_stats: Vec<BatchStats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MtrcnnModel<T = f32> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    /// In branch-major, layer-minor order.
    pub running: Vec<RunningStats>,
}

fn conv_name(b: usize, l: usize) -> String {
    format!("branch{b}.conv{l}.weight")
}

fn bn_names(b: usize, l: usize) -> (String, String) {
    (format!("branch{b}.bn{l}.gamma"), format!("branch{b}.bn{l}.beta"))
}

/// Validates `cfg` and checks its parameter count against [`PARAM_BUDGET`].
pub fn check_budget(cfg: &ModelConfig) -> Result<usize> {
    cfg.validate()?;
    let count = cfg.param_count();
    if !PARAM_BUDGET.contains(&count) {
        return Err(Error::ParamBudgetViolation {
            count,
            min: *PARAM_BUDGET.start(),
            max: *PARAM_BUDGET.end(),
        });
    }
    Ok(count)
}

/// Builds the default-shaped model and enforces the parameter budget.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<MtrcnnModel> {
    check_budget(cfg)?;
    MtrcnnModel::new(cfg.clone(), seed)
}

impl<T: Real> MtrcnnModel<T> {
    /// Builds a model of any size. [`build_model`] additionally checks the
    /// parameter budget; this constructor exists for reduced test models.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = Vec::new();
        let mut running = Vec::new();
        for (b, &(kt, kf)) in config.kernel_sizes.iter().enumerate() {
            let mut c_in = 1;
            for (l, &c) in config.channels.iter().enumerate() {
                let name = conv_name(b, l);
                let fan_in = c_in * kt * kf;
                params.push(Parameter {
                    tensor: seeded_init(vec![c, c_in, kt, kf], fan_in, seed, &name),
                    name,
                });
                let (g, bt) = bn_names(b, l);
                let ones = DiffTensor::new(vec![c], vec![T::one(); c], true)?;
                let zeros = DiffTensor::new(vec![c], vec![T::zero(); c], true)?;
                params.push(Parameter { name: g, tensor: ones });
                params.push(Parameter {
                    name: bt,
                    tensor: zeros,
                });
                running.push(RunningStats {
                    mean: vec![0.0; c],
                    var: vec![1.0; c],
                });
                c_in = c;
            }
        }
        let e = config.embedding_width();
        for (head, width) in [("species", config.num_species), ("domain", config.num_domains)] {
            let w = format!("{head}.weight");
            let bias = format!("{head}.bias");
            params.push(Parameter {
                tensor: seeded_init(vec![width, e], e, seed, &w),
                name: w,
            });
            params.push(Parameter {
                tensor: seeded_init(vec![width], e, seed, &bias),
                name: bias,
            });
        }
        Ok(Self {
            params: ParamStore::new(params)?,
            running,
            config,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    pub fn cast<U: Real>(&self) -> MtrcnnModel<U> {
        MtrcnnModel {
            config: self.config.clone(),
            params: self.params.cast(),
            running: self.running.clone(),
        }
    }

    fn check_batch(&self, batch: &BatchInput) -> Result<()> {
        let expected = batch.batch * batch.frames * batch.bands;
        if batch.batch == 0 {
            return Err(Error::EmptyBatch);
        }
        if batch.features.len() != expected || batch.lengths.len() != batch.batch {
            return Err(Error::ShapeMismatch {
                op: "forward",
                detail: format!(
                    "batch buffers do not match [{}, 1, {}, {}]",
                    batch.batch, batch.frames, batch.bands
                ),
            });
        }
        if batch.lengths.iter().any(|l| *l > batch.frames) {
            return Err(Error::ShapeMismatch {
                op: "forward",
                detail: format!("clip lengths {:?} exceed {} frames", batch.lengths, batch.frames),
            });
        }
        if batch.bands < self.config.min_bands() || !batch.bands.is_multiple_of(self.config.min_bands()) {
            return Err(Error::ShapeMismatch {
                op: "forward",
                detail: format!(
                    "{} bands not divisible by the pooling product {}",
                    batch.bands,
                    self.config.min_bands()
                ),
            });
        }
        Ok(())
    }

    /// Records the forward pass on `tape`. `params` are the leaves returned by
    /// `tape.params(&self.params, ..)`. With `training` the norm layers use
    /// batch statistics over valid frames, otherwise the running statistics.
    pub fn record(
        &self,
        tape: &mut Tape<T>,
        params: &[Var],
        batch: &BatchInput,
        training: bool,
    ) -> Result<ForwardVars> {
        self.check_batch(batch)?;
        let cfg = &self.config;
        // Frames past each clip's length are zeroed so the first convolution
        // reads the same zeros there whatever the padding holds.
        let row = batch.frames * batch.bands;
        let values = batch
            .features
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let (b, t) = (i / row, (i % row) / batch.bands);
                if t < batch.lengths[b] {
                    T::of(*v as f64)
                } else {
                    T::zero()
                }
            })
            .collect();
        let input = tape.leaf(vec![batch.batch, 1, batch.frames, batch.bands], values, false)?;
        let p = |name: &str| -> Var { params[self.params.index_of(name).expect("parameter exists")] };
        let mut embeddings = Vec::new();
        let mut pre_activations = Vec::new();
        let mut batch_stats = Vec::new();
        for b in 0..cfg.kernel_sizes.len() {
            let mut x = input;
            for l in 0..cfg.channels.len() {
                x = tape.conv2d(x, p(&conv_name(b, l)), None, cfg.conv_config(b, l))?;
                let (g, bt) = bn_names(b, l);
                let stats = &self.running[b * cfg.channels.len() + l];
                let mode = if training {
                    BatchNormMode::Batch
                } else {
                    BatchNormMode::Fixed {
                        mean: &stats.mean,
                        var: &stats.var,
                    }
                };
                let (y, s) = tape.batch_norm(x, p(&g), p(&bt), &batch.lengths, mode, cfg.bn_eps)?;
                batch_stats.extend(s);
                pre_activations.push(y);
                x = tape.relu(y)?;
                if cfg.freq_pool[l] > 1 {
                    x = tape.pool_freq(x, cfg.freq_pool[l])?;
                }
            }
            embeddings.push(tape.masked_mean_pool(x, &batch.lengths)?);
        }
        let z = tape.concat(&embeddings)?;
        let species = tape.linear(z, p("species.weight"), p("species.bias"))?;
        let domain = tape.linear(z, p("domain.weight"), p("domain.bias"))?;
        Ok(ForwardVars {
            species,
            domain,
            pre_activations,
            batch_stats,
        })
    }

    /// Inference-mode logits (running statistics, no gradients).
    pub fn forward(&self, batch: &BatchInput) -> Result<DualLogits<T>> {
        let mut tape = Tape::new();
        let leaves = tape.params(&self.params, false)?;
        let out = self.record(&mut tape, &leaves, batch, false)?;
        Ok(DualLogits {
            species: tape.value(out.species).to_vec(),
            domain: tape.value(out.domain).to_vec(),
            batch: batch.batch,
        })
    }

    /// Argmax species and domain labels per clip.
    pub fn predict(&self, batch: &BatchInput) -> Result<(Vec<usize>, Vec<usize>)> {
        let logits = self.forward(batch)?;
        Ok((
            argmax_rows(&logits.species, self.config.num_species),
            argmax_rows(&logits.domain, self.config.num_domains),
        ))
    }

    /// One training-mode pass: `CE_species + lambda * CE_domain`. Gradients
    /// are added to the parameter store and the running statistics updated.
    /// Returns the loss.
    pub fn train_step(&mut self, batch: &BatchInput, species: &[usize], domains: &[usize], lambda: f64) -> Result<f64> {
        let mut tape = Tape::new();
        let leaves = tape.params(&self.params, true)?;
        let out = self.record(&mut tape, &leaves, batch, true)?;
        let loss = dual_loss(&mut tape, &out, species, domains, lambda)?;
        let value = tape.value(loss)[0].f64();
        tape.backward(loss)?;
        self.params.accumulate_grads(&tape, &leaves);
        self.update_running(&out.batch_stats);
        Ok(value)
    }

    fn update_running(&mut self, stats: &[BatchStats]) {
        let m = self.config.bn_momentum;
        for (r, s) in self.running.iter_mut().zip(stats) {
            for (a, b) in r.mean.iter_mut().zip(&s.mean) {
                *a = (1.0 - m) * *a + m * b;
            }
            for (a, b) in r.var.iter_mut().zip(&s.var_unbiased) {
                *a = (1.0 - m) * *a + m * b;
            }
        }
    }

    /// Human-readable layer table with per-layer parameter counts.
    pub fn describe(&self) -> String {
        let cfg = &self.config;
        let mut out = String::new();
        let _ = writeln!(out, "{:<28} {:>22} {:>10}", "layer", "shape", "params");
        for p in self.params.iter() {
            let _ = writeln!(
                out,
                "{:<28} {:>22} {:>10}",
                p.name,
                format!("{:?}", p.tensor.shape),
                p.tensor.numel()
            );
        }
        let _ = writeln!(out, "{:<28} {:>22} {:>10}", "total", "", self.param_count());
        for (b, &(kt, _)) in cfg.kernel_sizes.iter().enumerate() {
            let _ = writeln!(
                out,
                "branch{b}: kernel {:?}, dilations {:?}, temporal receptive field {} frames",
                cfg.kernel_sizes[b],
                cfg.dilations_per_layer,
                temporal_receptive_field(kt, &cfg.dilations_per_layer)
            );
        }
        out
    }
}

/// `CE(species) + lambda * CE(domain)` on a recorded forward pass.
pub fn dual_loss<T: Real>(
    tape: &mut Tape<T>,
    out: &ForwardVars,
    species: &[usize],
    domains: &[usize],
    lambda: f64,
) -> Result<Var> {
    let ce_s = tape.cross_entropy(out.species, species)?;
    let ce_d = tape.cross_entropy(out.domain, domains)?;
    let weighted = tape.scale(ce_d, lambda)?;
    tape.add(ce_s, weighted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn clip(frames: usize, seed: u64) -> LogMelFeature {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LogMelFeature {
            values: (0..frames * 64).map(|_| rng.gen_range(-2.0f32..2.0)).collect(),
            frames,
            bands: 64,
            hop_s: 0.01,
            standardized: true,
        }
    }

    fn small() -> ModelConfig {
        ModelConfig {
            channels: vec![3, 4, 5],
            ..ModelConfig::default()
        }
    }

    #[test]
    fn default_count_is_pinned_and_in_budget() {
        let m = build_model(&ModelConfig::default(), 42).unwrap();
        assert_eq!(m.param_count(), 217_182);
        assert_eq!(ModelConfig::default().param_count(), 217_182);
        assert!(PARAM_BUDGET.contains(&m.param_count()));
    }

    #[test]
    fn budget_violation_is_reported() {
        let cfg = ModelConfig {
            channels: vec![16, 32, 80],
            ..ModelConfig::default()
        };
        assert!(matches!(build_model(&cfg, 1), Err(Error::ParamBudgetViolation { .. })));
        assert!(matches!(
            build_model(&small(), 1),
            Err(Error::ParamBudgetViolation { .. })
        ));
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = build_model(&ModelConfig::default(), 7).unwrap();
        let b = build_model(&ModelConfig::default(), 7).unwrap();
        assert_eq!(a, b);
        let c = build_model(&ModelConfig::default(), 8).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn toy_species_head_width() {
        let cfg = ModelConfig {
            num_species: 2,
            ..small()
        };
        let m = MtrcnnModel::<f32>::new(cfg, 1).unwrap();
        let batch = pack_batch([&clip(120, 1)], 110).unwrap();
        let out = m.forward(&batch).unwrap();
        assert_eq!(out.species.len(), 2);
        assert_eq!(out.domain.len(), 5);
    }

    #[test]
    fn pack_batch_examples() {
        let b = pack_batch([&clip(110, 1), &clip(200, 2)], 110).unwrap();
        assert_eq!(b.frames, 200);
        let mask = b.mask();
        assert_eq!(mask[0].iter().filter(|m| **m).count(), 110);
        assert_eq!(mask[1].iter().filter(|m| **m).count(), 200);
        assert!(b.features[110 * 64..200 * 64].iter().all(|v| *v == 0.0));

        let short = pack_batch([&clip(50, 3)], 110).unwrap();
        assert_eq!((short.frames, short.lengths[0]), (110, 110));

        let same = pack_batch([&clip(150, 4), &clip(150, 5)], 110).unwrap();
        assert_eq!(same.frames, 150);
        assert!(same.mask().iter().flatten().all(|m| *m));

        assert!(matches!(pack_batch([], 110), Err(Error::EmptyBatch)));
        let mut raw = clip(120, 6);
        raw.standardized = false;
        assert!(matches!(pack_batch([&raw], 110), Err(Error::NotStandardized)));
    }

    #[test]
    fn default_shapes() {
        let m = build_model(&ModelConfig::default(), 3).unwrap();
        let batch = pack_batch([&clip(112, 1), &clip(130, 2), &clip(40, 3)], 110).unwrap();
        let out = m.forward(&batch).unwrap();
        assert_eq!(out.species.len(), 3 * 9);
        assert_eq!(out.domain.len(), 3 * 5);
        assert!(out.species.iter().chain(&out.domain).all(|v| v.is_finite()));
    }

    #[test]
    fn padding_does_not_change_logits() {
        let m = MtrcnnModel::<f32>::new(small(), 9).unwrap();
        let c = clip(115, 4);
        let alone = m.forward(&pack_batch([&c], 110).unwrap()).unwrap();
        let mut padded = pack_batch([&c], 110).unwrap();
        padded.frames = 160;
        padded.features.resize(160 * 64, 0.0);
        let more = m.forward(&padded).unwrap();
        for (a, b) in alone
            .species
            .iter()
            .chain(&alone.domain)
            .zip(more.species.iter().chain(&more.domain))
        {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn duplicate_rows_identical_at_inference() {
        let m = build_model(&ModelConfig::default(), 5).unwrap();
        let c = clip(120, 8);
        let out = m.forward(&pack_batch([&c, &c], 110).unwrap()).unwrap();
        for k in 0..9 {
            assert!((out.species[k] - out.species[9 + k]).abs() < 1e-6);
        }
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax_rows(&[0.1, 0.9, 0.0], 3), vec![1]);
        assert_eq!(argmax_rows(&[0.0, 0.0, 5.0, 1.0, 5.0], 5), vec![2]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v: Vec<f64> = (0..900).map(|_| rng.gen()).collect();
        for (row, got) in v.chunks(9).zip(argmax_rows(&v, 9)) {
            let mut best = 0;
            for k in 0..9 {
                if row[k] > row[best] {
                    best = k;
                }
            }
            assert_eq!(got, best);
        }
    }

    #[test]
    fn receptive_field_formula() {
        assert_eq!(temporal_receptive_field(3, &[1, 2, 5]), 17);
        assert_eq!(temporal_receptive_field(5, &[1, 2, 5]), 33);
        assert_eq!(temporal_receptive_field(7, &[1, 2, 5]), 49);
    }

    /// Support of d(out[t0]) / d(input) through one branch's conv stack.
    #[test]
    fn receptive_field_matches_gradient_support() {
        let cfg = ModelConfig::default();
        for (b, &(kt, kf)) in cfg.kernel_sizes.iter().enumerate() {
            let frames = 80;
            let mut tape = Tape::<f64>::new();
            let x = tape.leaf(vec![1, 1, frames, 8], vec![1.0; frames * 8], true).unwrap();
            let mut h = x;
            let mut c_in = 1;
            for l in 0..3 {
                let w = tape
                    .leaf(vec![1, c_in, kt, kf], vec![1.0; c_in * kt * kf], false)
                    .unwrap();
                h = tape.conv2d(h, w, None, cfg.conv_config(b, l)).unwrap();
                c_in = 1;
            }
            // pick the centre time row of channel 0, all freq columns
            let t0 = frames / 2;
            let sel: Vec<f64> = (0..frames * 8).map(|i| if i / 8 == t0 { 1.0 } else { 0.0 }).collect();
            let sel = tape.leaf(vec![1, 1, frames, 8], sel, false).unwrap();
            let picked = tape.mul(h, sel).unwrap();
            let loss = tape.sum(picked).unwrap();
            tape.backward(loss).unwrap();
            let g = tape.grad(x).unwrap();
            let rows: Vec<usize> = (0..frames)
                .filter(|t| g[t * 8..t * 8 + 8].iter().any(|v| *v != 0.0))
                .collect();
            assert_eq!(
                rows.len(),
                temporal_receptive_field(kt, &cfg.dilations_per_layer),
                "branch {b}"
            );
        }
    }

    #[test]
    fn running_stats_move_toward_batch_stats() {
        let mut m = MtrcnnModel::<f32>::new(small(), 2).unwrap();
        let batch = pack_batch([&clip(120, 1), &clip(130, 2)], 110).unwrap();
        let before = m.running.clone();
        m.train_step(&batch, &[0, 1], &[0, 1], 1.0).unwrap();
        assert_ne!(before, m.running);
        assert!(m.params.iter().all(|p| p.tensor.grad.is_some()));
    }

    #[test]
    fn zero_lambda_leaves_domain_head_without_gradient() {
        let mut m = MtrcnnModel::<f64>::new(small(), 2).unwrap();
        let batch = pack_batch([&clip(120, 1), &clip(130, 2)], 110).unwrap();
        m.train_step(&batch, &[0, 1], &[0, 1], 0.0).unwrap();
        for p in m.params.iter().filter(|p| p.name.starts_with("domain.")) {
            assert!(p.tensor.grad.as_ref().unwrap().iter().all(|g| *g == 0.0));
        }
    }
}
