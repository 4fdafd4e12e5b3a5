//! Accuracy, balanced accuracy, seen/unseen strata, domain shift gap and
//! cross-run aggregation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::corpus::{ClipKey, SeenUnseenMap, Stratum};
use crate::error::{Error, Result};
use crate::util::{fmt6, write_atomic};

/// `counts[true][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(classes: usize) -> Self {
        Self {
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn support(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    pub fn correct(&self, c: usize) -> u64 {
        self.counts[c][c]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Classes with at least one true clip.
    pub fn present_classes(&self) -> Vec<usize> {
        (0..self.classes()).filter(|c| self.support(*c) > 0).collect()
    }

    /// Recall of class `c`, `None` without support.
    pub fn recall(&self, c: usize) -> Option<f64> {
        let n = self.support(c);
        (n > 0).then(|| self.correct(c) as f64 / n as f64)
    }

    pub fn accuracy(&self) -> Option<f64> {
        let total = self.total();
        let correct: u64 = (0..self.classes()).map(|c| self.correct(c)).sum();
        (total > 0).then(|| correct as f64 / total as f64)
    }
}

pub fn confusion(truth: &[usize], predicted: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if truth.len() != predicted.len() {
        return Err(Error::LengthMismatch(truth.len(), predicted.len()));
    }
    let mut m = ConfusionMatrix::zeros(classes);
    for (&t, &p) in truth.iter().zip(predicted) {
        if let Some(&label) = [t, p].iter().find(|l| **l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        m.counts[t][p] += 1;
    }
    Ok(m)
}

/// How classes without true clips enter the balanced-accuracy mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbsentClassPolicy {
    /// Drop them and average over the present classes only.
    #[default]
    Exclude,
    /// Count them as recall 0 over all `C` classes.
    ZeroScore,
}

/// Mean per-class recall over classes with support.
pub fn balanced_accuracy(m: &ConfusionMatrix) -> Result<f64> {
    balanced_accuracy_with(m, AbsentClassPolicy::Exclude)
}

pub fn balanced_accuracy_with(m: &ConfusionMatrix, policy: AbsentClassPolicy) -> Result<f64> {
    let recalls: Vec<f64> = (0..m.classes()).filter_map(|c| m.recall(c)).collect();
    if recalls.is_empty() {
        return Err(Error::NoSupport);
    }
    let denom = match policy {
        AbsentClassPolicy::Exclude => recalls.len(),
        AbsentClassPolicy::ZeroScore => m.classes(),
    };
    Ok(recalls.iter().sum::<f64>() / denom as f64)
}

/// Domain shift gap `|BA_unseen - BA_seen|`.
pub fn dsg(ba_seen: f64, ba_unseen: f64) -> f64 {
    (ba_unseen - ba_seen).abs()
}

/// Metrics of one stratum; `None` where the stratum has no clips.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StratumMetrics {
    pub clips: usize,
    pub accuracy: Option<f64>,
    pub balanced_accuracy: Option<f64>,
    /// Recall per species index; `None` for species absent from the stratum.
    pub per_species: Vec<Option<f64>>,
    pub evaluated_classes: Vec<usize>,
}

impl StratumMetrics {
    fn from_matrix(m: &ConfusionMatrix, policy: AbsentClassPolicy) -> Self {
        Self {
            clips: m.total() as usize,
            accuracy: m.accuracy(),
            balanced_accuracy: balanced_accuracy_with(m, policy).ok(),
            per_species: (0..m.classes()).map(|c| m.recall(c)).collect(),
            evaluated_classes: m.present_classes(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub overall: StratumMetrics,
    pub seen: StratumMetrics,
    pub unseen: StratumMetrics,
    /// `|BA_unseen - BA_seen|`, undefined when either stratum is.
    pub dsg: Option<f64>,
    /// Species balanced accuracy among clips of each domain index.
    pub per_domain_ba: Vec<Option<f64>>,
}

impl MetricsReport {
    pub fn accuracy(&self) -> Option<f64> {
        self.overall.accuracy
    }

    pub fn balanced_accuracy(&self) -> Option<f64> {
        self.overall.balanced_accuracy
    }

    pub fn ba_seen(&self) -> Option<f64> {
        self.seen.balanced_accuracy
    }

    pub fn ba_unseen(&self) -> Option<f64> {
        self.unseen.balanced_accuracy
    }

    /// Flat `(metric, stratum, class, value)` rows.
    pub fn rows(&self) -> Vec<(String, String, String, Option<f64>)> {
        let mut rows = Vec::new();
        let mut push = |metric: &str, stratum: &str, class: String, v: Option<f64>| {
            rows.push((metric.to_string(), stratum.to_string(), class, v));
        };
        for (name, s) in [("all", &self.overall), ("seen", &self.seen), ("unseen", &self.unseen)] {
            push("clips", name, String::new(), Some(s.clips as f64));
            push("accuracy", name, String::new(), s.accuracy);
            push("balanced_accuracy", name, String::new(), s.balanced_accuracy);
        }
        push("dsg", "", String::new(), self.dsg);
        for (name, s) in [("seen", &self.seen), ("unseen", &self.unseen)] {
            for (c, v) in s.per_species.iter().enumerate() {
                push("species_ba", name, (c + 1).to_string(), *v);
            }
        }
        for (d, v) in self.per_domain_ba.iter().enumerate() {
            push("domain_ba", "all", (d + 1).to_string(), *v);
        }
        rows
    }

    /// CSV with header `metric,stratum,class,value`; undefined values are written as `undefined`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,stratum,class,value\n");
        for (m, s, c, v) in self.rows() {
            let _ = writeln!(out, "{m},{s},{c},{}", v.map(fmt6).unwrap_or_else(|| "undefined".into()));
        }
        out
    }
}

/// Scores species predictions on a test set split into seen and unseen strata.
///
/// `predictions` maps each test clip to a 0-based species index. Classes
/// absent from a stratum follow `policy`; an empty stratum yields `None`.
pub fn seen_unseen_metrics(
    predictions: &BTreeMap<ClipKey, usize>,
    test: &[ClipKey],
    su: &SeenUnseenMap,
    num_species: usize,
    num_domains: usize,
    policy: AbsentClassPolicy,
) -> Result<MetricsReport> {
    let mut all = ConfusionMatrix::zeros(num_species);
    let mut seen = ConfusionMatrix::zeros(num_species);
    let mut unseen = ConfusionMatrix::zeros(num_species);
    let mut domains = vec![ConfusionMatrix::zeros(num_species); num_domains];
    for key in test {
        let p = *predictions
            .get(key)
            .ok_or_else(|| Error::MissingPredictions(key.file_stem()))?;
        let t = key.species.index();
        let d = key.domain.index();
        if t >= num_species || p >= num_species {
            return Err(Error::LabelOutOfRange {
                label: t.max(p),
                classes: num_species,
            });
        }
        if d >= num_domains {
            return Err(Error::LabelOutOfRange {
                label: d,
                classes: num_domains,
            });
        }
        all.counts[t][p] += 1;
        domains[d].counts[t][p] += 1;
        match su.stratum(key.species, key.domain) {
            Stratum::Seen => seen.counts[t][p] += 1,
            Stratum::Unseen => unseen.counts[t][p] += 1,
        }
    }
    let seen = StratumMetrics::from_matrix(&seen, policy);
    let unseen = StratumMetrics::from_matrix(&unseen, policy);
    let dsg = match (seen.balanced_accuracy, unseen.balanced_accuracy) {
        (Some(s), Some(u)) => Some(dsg(s, u)),
        _ => None,
    };
    Ok(MetricsReport {
        overall: StratumMetrics::from_matrix(&all, policy),
        dsg,
        per_domain_ba: domains.iter().map(|m| balanced_accuracy_with(m, policy).ok()).collect(),
        seen,
        unseen,
    })
}

/// Mean and sample standard deviation of one metric over the runs that define it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub runs: usize,
}

/// Sample (n - 1) standard deviation; 0 for a single value.
pub fn mean_std(values: &[f64]) -> Option<MeanStd> {
    let n = values.len();
    if n == 0 {
        return None;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    Some(MeanStd { mean, std, runs: n })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateReport {
    pub runs: usize,
    /// Keyed by `(metric, stratum, class)` as in [`MetricsReport::rows`];
    /// `None` where no run defines the value.
    pub metrics: BTreeMap<(String, String, String), Option<MeanStd>>,
}

impl AggregateReport {
    pub fn get(&self, metric: &str, stratum: &str, class: &str) -> Option<MeanStd> {
        self.metrics
            .get(&(metric.to_string(), stratum.to_string(), class.to_string()))
            .copied()
            .flatten()
    }

    pub fn ba_seen(&self) -> Option<MeanStd> {
        self.get("balanced_accuracy", "seen", "")
    }

    pub fn ba_unseen(&self) -> Option<MeanStd> {
        self.get("balanced_accuracy", "unseen", "")
    }

    pub fn dsg(&self) -> Option<MeanStd> {
        self.get("dsg", "", "")
    }

    /// CSV with header `metric,stratum,class,mean,std,runs`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,stratum,class,mean,std,runs\n");
        for ((m, s, c), v) in &self.metrics {
            match v {
                Some(v) => {
                    let _ = writeln!(out, "{m},{s},{c},{},{},{}", fmt6(v.mean), fmt6(v.std), v.runs);
                }
                None => {
                    let _ = writeln!(out, "{m},{s},{c},undefined,undefined,0");
                }
            }
        }
        out
    }

    /// Parses the output of [`AggregateReport::to_csv`]. Values come back at
    /// the written 6-decimal precision.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some("metric,stratum,class,mean,std,runs") {
            return Err(Error::bad("aggregate report", "unexpected header"));
        }
        let mut metrics = BTreeMap::new();
        let mut runs = 0;
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
            let bad = |why: &str| Error::bad("aggregate report", format!("line {}: {why}", i + 2));
            let f: Vec<&str> = line.split(',').collect();
            let [m, s, c, mean, std, n] = f[..] else {
                return Err(bad("expected 6 fields"));
            };
            let n: usize = n.parse().map_err(|_| bad("bad run count"))?;
            let value = if mean == "undefined" {
                None
            } else {
                let num = |v: &str| v.parse::<f64>().map_err(|_| bad("bad number"));
                Some(MeanStd {
                    mean: num(mean)?,
                    std: num(std)?,
                    runs: n,
                })
            };
            runs = runs.max(n);
            metrics.insert((m.to_string(), s.to_string(), c.to_string()), value);
        }
        Ok(Self { runs, metrics })
    }
}

/// Elementwise mean and sample std across runs with identical class sets.
pub fn aggregate_runs(reports: &[MetricsReport]) -> Result<AggregateReport> {
    let first = reports.first().ok_or(Error::EmptyList)?;
    for r in &reports[1..] {
        if r.seen.evaluated_classes != first.seen.evaluated_classes
            || r.unseen.evaluated_classes != first.unseen.evaluated_classes
            || r.per_domain_ba.len() != first.per_domain_ba.len()
        {
            return Err(Error::Heterogeneous("runs were scored on different class sets".into()));
        }
    }
    let mut values: BTreeMap<(String, String, String), Vec<f64>> = BTreeMap::new();
    for r in reports {
        for (m, s, c, v) in r.rows() {
            let slot = values.entry((m, s, c)).or_default();
            slot.extend(v);
        }
    }
    Ok(AggregateReport {
        runs: reports.len(),
        metrics: values.into_iter().map(|(k, v)| (k, mean_std(&v))).collect(),
    })
}

fn pm(v: Option<MeanStd>) -> String {
    match v {
        Some(v) => format!("{:.4} ± {:.4}", v.mean, v.std),
        None => "undefined".into(),
    }
}

/// Row label used in summaries for a checkpoint kind name.
pub fn checkpoint_label(best: bool) -> &'static str {
    if best {
        "Best-validation"
    } else {
        "Final"
    }
}

/// Seen/unseen summary: one row per checkpoint kind with BA_seen, BA_unseen, DSG.
pub fn cross_domain_table(rows: &[(&str, &AggregateReport)]) -> String {
    let mut out = format!(
        "{:<16} {:<18} {:<18} {:<18}\n",
        "Checkpoint", "BA_seen", "BA_unseen", "DSG"
    );
    for (label, agg) in rows {
        let _ = writeln!(
            out,
            "{:<16} {:<18} {:<18} {:<18}",
            label,
            pm(agg.ba_seen()),
            pm(agg.ba_unseen()),
            pm(agg.dsg())
        );
    }
    out
}

/// Validation/test summary: species accuracy and BA per checkpoint kind.
/// Each entry is `(label, validation aggregate, test aggregate)`.
pub fn split_table(rows: &[(&str, &AggregateReport, &AggregateReport)]) -> String {
    let mut out = format!(
        "{:<16} {:<26} {:<18} {:<18}\n",
        "Checkpoint", "Metric", "Validation", "Test"
    );
    for (label, val, test) in rows {
        for (name, metric) in [
            ("Species accuracy", "accuracy"),
            ("Species balanced accuracy", "balanced_accuracy"),
        ] {
            let _ = writeln!(
                out,
                "{:<16} {:<26} {:<18} {:<18}",
                label,
                name,
                pm(val.get(metric, "all", "")),
                pm(test.get(metric, "all", ""))
            );
        }
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{DomainId, SpeciesId, UnseenPolicy};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::{BTreeSet, HashMap};

    fn matrix(rows: &[&[u64]]) -> ConfusionMatrix {
        ConfusionMatrix {
            counts: rows.iter().map(|r| r.to_vec()).collect(),
        }
    }

    #[test]
    fn confusion_examples() {
        let m = confusion(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
        assert_eq!(m, matrix(&[&[1, 0, 0], &[0, 1, 0], &[0, 0, 1]]));
        assert_eq!(confusion(&[], &[], 3).unwrap(), ConfusionMatrix::zeros(3));
        assert!(matches!(confusion(&[0], &[], 3), Err(Error::LengthMismatch(1, 0))));
        assert!(matches!(confusion(&[0], &[3], 3), Err(Error::LabelOutOfRange { .. })));
    }

    #[test]
    fn confusion_matches_hash_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t: Vec<usize> = (0..1000).map(|_| rng.gen_range(0..9)).collect();
        let p: Vec<usize> = (0..1000).map(|_| rng.gen_range(0..9)).collect();
        let mut oracle: HashMap<(usize, usize), u64> = HashMap::new();
        for (a, b) in t.iter().zip(&p) {
            *oracle.entry((*a, *b)).or_default() += 1;
        }
        let m = confusion(&t, &p, 9).unwrap();
        for a in 0..9 {
            for b in 0..9 {
                assert_eq!(m.counts[a][b], oracle.get(&(a, b)).copied().unwrap_or(0));
            }
        }
    }

    #[test]
    fn balanced_accuracy_examples() {
        let m = matrix(&[&[2, 0], &[1, 1]]);
        assert_eq!(balanced_accuracy(&m).unwrap(), 0.75);
        let perfect = confusion(&[0, 1, 1, 1, 4], &[0, 1, 1, 1, 4], 5).unwrap();
        assert_eq!(balanced_accuracy(&perfect).unwrap(), 1.0);
        assert_eq!(
            balanced_accuracy_with(&perfect, AbsentClassPolicy::ZeroScore).unwrap(),
            3.0 / 5.0
        );
        assert!(matches!(
            balanced_accuracy(&ConfusionMatrix::zeros(3)),
            Err(Error::NoSupport)
        ));
    }

    #[test]
    fn support_scaling_leaves_ba_unchanged() {
        let m = matrix(&[&[3, 1, 0], &[2, 2, 1], &[0, 0, 4]]);
        let mut scaled = m.clone();
        scaled.counts[1].iter_mut().for_each(|v| *v *= 7);
        // 3/4, 2/5, 4/4 in both
        assert_eq!(balanced_accuracy(&m).unwrap(), balanced_accuracy(&scaled).unwrap());
    }

    #[test]
    fn accuracy_equals_ba_when_balanced() {
        let m = matrix(&[&[3, 1], &[2, 2]]);
        assert_eq!(m.accuracy().unwrap(), balanced_accuracy(&m).unwrap());
    }

    #[test]
    fn dsg_examples() {
        assert!((dsg(0.8806, 0.1751) - 0.7055).abs() < 1e-12);
        assert!((dsg(0.8822, 0.1704) - 0.7118).abs() < 1e-12);
        assert_eq!(dsg(0.3, 0.7), dsg(0.7, 0.3));
    }

    fn key(s: u8, d: u8, i: u64) -> ClipKey {
        ClipKey {
            species: SpeciesId::new(s).unwrap(),
            domain: DomainId::new(d).unwrap(),
            clip_index: i,
        }
    }

    #[test]
    fn strata_partition_and_exclusion() {
        // species 1 and 2 seen in domain 1; species 1 unseen in domain 2
        let su = SeenUnseenMap {
            seen_cells: BTreeSet::from([
                (SpeciesId::new(1).unwrap(), DomainId::new(1).unwrap()),
                (SpeciesId::new(2).unwrap(), DomainId::new(1).unwrap()),
            ]),
            policy: UnseenPolicy::Cell,
        };
        let test = vec![key(1, 1, 0), key(1, 1, 1), key(2, 1, 0), key(1, 2, 0), key(1, 2, 1)];
        let preds = BTreeMap::from([
            (key(1, 1, 0), 0),
            (key(1, 1, 1), 0),
            (key(2, 1, 0), 1),
            (key(1, 2, 0), 0),
            (key(1, 2, 1), 1),
        ]);
        let r = seen_unseen_metrics(&preds, &test, &su, 9, 5, AbsentClassPolicy::Exclude).unwrap();
        assert_eq!(r.seen.clips + r.unseen.clips, test.len());
        assert_eq!(r.ba_seen(), Some(1.0));
        assert_eq!(r.ba_unseen(), Some(0.5));
        assert_eq!(r.dsg, Some(0.5));
        assert_eq!(r.unseen.evaluated_classes, vec![0]);
        assert_eq!(r.unseen.per_species[1], None);
        assert_eq!(r.per_domain_ba[0], Some(1.0));
        assert_eq!(r.per_domain_ba[2], None);

        let mut missing = preds.clone();
        missing.remove(&key(2, 1, 0));
        assert!(matches!(
            seen_unseen_metrics(&missing, &test, &su, 9, 5, AbsentClassPolicy::Exclude),
            Err(Error::MissingPredictions(_))
        ));

        // every clip seen: the unseen stratum is undefined, not zero
        let only_seen = &test[..3];
        let r = seen_unseen_metrics(&preds, only_seen, &su, 9, 5, AbsentClassPolicy::Exclude).unwrap();
        assert_eq!(r.ba_unseen(), None);
        assert_eq!(r.dsg, None);
        assert!(r.to_csv().contains("balanced_accuracy,unseen,,undefined"));
    }

    #[test]
    fn random_matrices_match_row_recall_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let c = rng.gen_range(1..=9);
            let mut m = ConfusionMatrix::zeros(c);
            for row in &mut m.counts {
                for v in row.iter_mut() {
                    *v = if rng.gen_bool(0.3) { 0 } else { rng.gen_range(0..50) };
                }
            }
            let mut sum = 0.0;
            let mut present = 0;
            for (i, row) in m.counts.iter().enumerate() {
                let n: u64 = row.iter().sum();
                if n > 0 {
                    sum += row[i] as f64 / n as f64;
                    present += 1;
                }
            }
            match balanced_accuracy(&m) {
                Ok(ba) => assert!((ba - sum / present as f64).abs() < 1e-12),
                Err(Error::NoSupport) => assert_eq!(present, 0),
                Err(e) => panic!("{e}"),
            }
        }
    }

    fn report(seen: f64, unseen: f64) -> MetricsReport {
        let s = StratumMetrics {
            clips: 1,
            accuracy: Some(seen),
            balanced_accuracy: Some(seen),
            per_species: vec![Some(seen)],
            evaluated_classes: vec![0],
        };
        let u = StratumMetrics {
            balanced_accuracy: Some(unseen),
            ..s.clone()
        };
        MetricsReport {
            overall: s.clone(),
            dsg: Some(dsg(seen, unseen)),
            per_domain_ba: vec![Some(seen)],
            seen: s,
            unseen: u,
        }
    }

    #[test]
    fn aggregate_examples() {
        let one = aggregate_runs(&[report(0.5, 0.2)]).unwrap();
        assert!(one.metrics.values().flatten().all(|v| v.std == 0.0));
        let two = aggregate_runs(&[report(0.2, 0.1), report(0.4, 0.1)]).unwrap();
        let s = two.ba_seen().unwrap();
        assert!((s.mean - 0.3).abs() < 1e-15);
        assert!((s.std - 0.02f64.sqrt()).abs() < 1e-15);
        assert!(matches!(aggregate_runs(&[]), Err(Error::EmptyList)));
        let mut odd = report(0.1, 0.1);
        odd.seen.evaluated_classes = vec![0, 1];
        assert!(matches!(
            aggregate_runs(&[report(0.2, 0.1), odd]),
            Err(Error::Heterogeneous(_))
        ));
    }

    #[test]
    fn aggregate_matches_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let vals: Vec<(f64, f64)> = (0..10).map(|_| (rng.gen(), rng.gen())).collect();
        let reports: Vec<_> = vals.iter().map(|(s, u)| report(*s, *u)).collect();
        let agg = aggregate_runs(&reports).unwrap();
        let xs: Vec<f64> = vals.iter().map(|v| v.1).collect();
        let mean = xs.iter().sum::<f64>() / 10.0;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 9.0;
        let got = agg.ba_unseen().unwrap();
        assert!((got.mean - mean).abs() < 1e-12);
        assert!((got.std - var.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn summaries_use_checkpoint_labels() {
        let agg = aggregate_runs(&[report(0.9, 0.2)]).unwrap();
        let t = cross_domain_table(&[(checkpoint_label(true), &agg), (checkpoint_label(false), &agg)]);
        assert!(t.lines().nth(1).unwrap().starts_with("Best-validation"));
        assert!(t.lines().nth(2).unwrap().starts_with("Final"));
        assert!(t.contains("0.9000 ± 0.0000"));
        let s = split_table(&[("Final", &agg, &agg)]);
        assert!(s.contains("Species balanced accuracy"));
    }
}
