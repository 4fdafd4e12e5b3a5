//! Clip catalog: filename metadata, manifests, validation split and the
//! seen/unseen stratification of the test set.
//!
//! Clip files are named `S_<species>_D_<domain>_<index>` with an optional
//! `.wav` extension. Species ids run 1..=9 and domain ids 1..=5.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_SPECIES: u8 = 9;
pub const MAX_DOMAINS: u8 = 5;

/// Species names in their default id order (id 1 first).
pub const DEFAULT_SPECIES_NAMES: [&str; 9] = [
    "Ae.aeg", "Ae.alb", "Cx.qui", "An.gam", "An.ara", "An.dir", "Cx.pip", "An.min", "An.ste",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SpeciesId(u8);

impl SpeciesId {
    pub fn new(id: u8) -> Result<Self> {
        if (1..=MAX_SPECIES).contains(&id) {
            Ok(Self(id))
        } else {
            Err(Error::OutOfRangeId {
                name: id.to_string(),
                kind: "species",
                value: id as u32,
                max: MAX_SPECIES as u32,
            })
        }
    }

    pub fn get(self) -> u8 {
        self.0
    }

    /// Zero-based class index used by the model heads.
    pub fn index(self) -> usize {
        self.0 as usize - 1
    }

    pub fn from_index(index: usize) -> Result<Self> {
        Self::new(u8::try_from(index + 1).unwrap_or(u8::MAX))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DomainId(u8);

impl DomainId {
    pub fn new(id: u8) -> Result<Self> {
        if (1..=MAX_DOMAINS).contains(&id) {
            Ok(Self(id))
        } else {
            Err(Error::OutOfRangeId {
                name: id.to_string(),
                kind: "domain",
                value: id as u32,
                max: MAX_DOMAINS as u32,
            })
        }
    }

    pub fn get(self) -> u8 {
        self.0
    }

    pub fn index(self) -> usize {
        self.0 as usize - 1
    }

    pub fn from_index(index: usize) -> Result<Self> {
        Self::new(u8::try_from(index + 1).unwrap_or(u8::MAX))
    }
}

impl fmt::Display for SpeciesId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "S{}", self.0)
    }
}

impl fmt::Display for DomainId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "D{}", self.0)
    }
}

/// Identity of a clip within a corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ClipKey {
    pub species: SpeciesId,
    pub domain: DomainId,
    pub clip_index: u64,
}

impl ClipKey {
    pub fn cell(&self) -> (SpeciesId, DomainId) {
        (self.species, self.domain)
    }

    /// Canonical file stem, the inverse of [`parse_clip_name`].
    pub fn file_stem(&self) -> String {
        format!("S_{}_D_{}_{}", self.species.get(), self.domain.get(), self.clip_index)
    }
}

impl fmt::Display for ClipKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.file_stem())
    }
}

/// Upper bounds on ids accepted by the parser. Both default to the full range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IdRanges {
    pub species: u8,
    pub domains: u8,
}

impl Default for IdRanges {
    fn default() -> Self {
        Self {
            species: MAX_SPECIES,
            domains: MAX_DOMAINS,
        }
    }
}

/// Editable species-id ↔ name table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpeciesNames(Vec<String>);

impl Default for SpeciesNames {
    fn default() -> Self {
        Self(DEFAULT_SPECIES_NAMES.iter().map(|s| s.to_string()).collect())
    }
}

impl SpeciesNames {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.is_empty() || names.len() > MAX_SPECIES as usize {
            return Err(Error::Config(format!(
                "species name table must have 1..={MAX_SPECIES} entries, got {}",
                names.len()
            )));
        }
        let unique: BTreeSet<_> = names.iter().collect();
        if unique.len() != names.len() {
            return Err(Error::Config("species names must be unique".into()));
        }
        Ok(Self(names))
    }

    pub fn name(&self, id: SpeciesId) -> &str {
        self.0.get(id.index()).map(String::as_str).unwrap_or("?")
    }

    pub fn id(&self, name: &str) -> Option<SpeciesId> {
        self.0
            .iter()
            .position(|n| n == name)
            .and_then(|i| SpeciesId::from_index(i).ok())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn parse_clip_name(name: &str) -> Result<ClipKey> {
    parse_clip_name_with(name, IdRanges::default())
}

/// Parses `S_<int>_D_<int>_<int>[.wav]`, accepting a leading directory.
pub fn parse_clip_name_with(name: &str, ranges: IdRanges) -> Result<ClipKey> {
    let malformed = || Error::MalformedName(name.to_string());
    let file = Path::new(name)
        .file_name()
        .and_then(|f| f.to_str())
        .ok_or_else(malformed)?;
    let stem = match file.rsplit_once('.') {
        Some((stem, ext)) if ext.eq_ignore_ascii_case("wav") => stem,
        Some(_) => return Err(malformed()),
        None => file,
    };
    let parts: Vec<&str> = stem.split('_').collect();
    if parts.len() != 5 || parts[0] != "S" || parts[2] != "D" {
        return Err(malformed());
    }
    let number = |s: &str| -> Result<u64> {
        if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) {
            return Err(malformed());
        }
        s.parse::<u64>().map_err(|_| malformed())
    };
    let species = number(parts[1])?;
    let domain = number(parts[3])?;
    let clip_index = number(parts[4])?;
    let out_of_range = |kind, value: u64, max: u8| Error::OutOfRangeId {
        name: name.to_string(),
        kind,
        value: value.min(u32::MAX as u64) as u32,
        max: max as u32,
    };
    if species < 1 || species > ranges.species.min(MAX_SPECIES) as u64 {
        return Err(out_of_range("species", species, ranges.species));
    }
    if domain < 1 || domain > ranges.domains.min(MAX_DOMAINS) as u64 {
        return Err(out_of_range("domain", domain, ranges.domains));
    }
    Ok(ClipKey {
        species: SpeciesId(species as u8),
        domain: DomainId(domain as u8),
        clip_index,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipRecord {
    /// Path relative to the manifest root.
    pub path: PathBuf,
    pub species: SpeciesId,
    pub domain: DomainId,
    pub clip_index: u64,
    pub duration_s: f64,
    pub num_samples: u64,
}

impl ClipRecord {
    pub fn key(&self) -> ClipKey {
        ClipKey {
            species: self.species,
            domain: self.domain,
            clip_index: self.clip_index,
        }
    }
}

/// Clip counts per (species, domain) cell.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CountTable {
    counts: [[usize; MAX_DOMAINS as usize]; MAX_SPECIES as usize],
}

impl CountTable {
    pub fn get(&self, species: SpeciesId, domain: DomainId) -> usize {
        self.counts[species.index()][domain.index()]
    }

    pub fn add(&mut self, species: SpeciesId, domain: DomainId, n: usize) {
        self.counts[species.index()][domain.index()] += n;
    }

    pub fn species_total(&self, species: SpeciesId) -> usize {
        self.counts[species.index()].iter().sum()
    }

    pub fn domain_total(&self, domain: DomainId) -> usize {
        self.counts.iter().map(|row| row[domain.index()]).sum()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    /// Rows are domains, columns species, matching the released split tables.
    pub fn render(&self, names: &SpeciesNames) -> String {
        let mut out = String::from("Domain");
        let n_species = names.len();
        for s in 0..n_species {
            out.push_str(&format!(",{}", names.0[s]));
        }
        out.push_str(",Total\n");
        for d in 0..MAX_DOMAINS as usize {
            out.push_str(&format!("D{}", d + 1));
            for s in 0..n_species {
                out.push_str(&format!(",{}", self.counts[s][d]));
            }
            out.push_str(&format!(
                ",{}\n",
                (0..n_species).map(|s| self.counts[s][d]).sum::<usize>()
            ));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    records: Vec<ClipRecord>,
}

impl Manifest {
    /// Builds a manifest, sorting records by (species, domain, clip_index).
    pub fn from_records(root: impl Into<PathBuf>, mut records: Vec<ClipRecord>) -> Result<Self> {
        records.sort_by_key(|r| r.key());
        for pair in records.windows(2) {
            if pair[0].key() == pair[1].key() {
                let k = pair[0].key();
                return Err(Error::DuplicateClip {
                    species: k.species.get(),
                    domain: k.domain.get(),
                    index: k.clip_index,
                });
            }
        }
        Ok(Self {
            root: root.into(),
            records,
        })
    }

    pub fn records(&self) -> &[ClipRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn absolute_path(&self, record: &ClipRecord) -> PathBuf {
        self.root.join(&record.path)
    }

    pub fn get(&self, key: &ClipKey) -> Option<&ClipRecord> {
        self.records
            .binary_search_by_key(key, |r| r.key())
            .ok()
            .map(|i| &self.records[i])
    }

    pub fn count_table(&self) -> CountTable {
        let mut table = CountTable::default();
        for r in &self.records {
            table.add(r.species, r.domain, 1);
        }
        table
    }

    /// Sub-manifest of the records whose key satisfies `keep`.
    pub fn filter(&self, mut keep: impl FnMut(&ClipKey) -> bool) -> Manifest {
        Manifest {
            root: self.root.clone(),
            records: self.records.iter().filter(|r| keep(&r.key())).cloned().collect(),
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(Error::csv(path))?;
        w.write_record(["path", "species", "domain", "clip_index", "duration_s", "num_samples"])
            .map_err(Error::csv(path))?;
        for r in &self.records {
            w.write_record([
                r.path.to_string_lossy().as_ref(),
                &r.species.get().to_string(),
                &r.domain.get().to_string(),
                &r.clip_index.to_string(),
                &format!("{:.6}", r.duration_s),
                &r.num_samples.to_string(),
            ])
            .map_err(Error::csv(path))?;
        }
        w.flush().map_err(Error::io("write manifest", path))
    }

    pub fn read_csv(path: &Path, root: impl Into<PathBuf>) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            path: String,
            species: u8,
            domain: u8,
            clip_index: u64,
            duration_s: f64,
            num_samples: u64,
        }
        let mut rdr = csv::Reader::from_path(path).map_err(Error::csv(path))?;
        let headers = rdr.headers().map_err(Error::csv(path))?.clone();
        if headers != vec!["path", "species", "domain", "clip_index", "duration_s", "num_samples"] {
            return Err(Error::bad(
                "manifest",
                format!("{}: unexpected header {:?}", path.display(), headers),
            ));
        }
        let mut records = Vec::new();
        for row in rdr.deserialize::<Row>() {
            let row = row.map_err(Error::csv(path))?;
            records.push(ClipRecord {
                path: PathBuf::from(row.path),
                species: SpeciesId::new(row.species)?,
                domain: DomainId::new(row.domain)?,
                clip_index: row.clip_index,
                duration_s: row.duration_s,
                num_samples: row.num_samples,
            });
        }
        Manifest::from_records(root, records)
    }
}

/// Catalogs every parseable `.wav` file under `root` (recursively).
///
/// Files whose names do not parse are skipped with a warning. Header reads run
/// in parallel; the result is sorted, so ordering does not depend on scheduling.
pub fn scan_corpus(root: &Path) -> Result<Manifest> {
    scan_corpus_with(root, IdRanges::default())
}

pub fn scan_corpus_with(root: &Path, ranges: IdRanges) -> Result<Manifest> {
    if !root.is_dir() {
        return Err(Error::Io {
            stage: "scan",
            path: root.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "corpus root is not a directory"),
        });
    }
    let mut candidates = Vec::new();
    for entry in walkdir::WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::Io {
            stage: "scan",
            path: root.to_path_buf(),
            source: e.into(),
        })?;
        if !entry.file_type().is_file() {
            continue;
        }
        let is_wav = entry
            .path()
            .extension()
            .map(|e| e.eq_ignore_ascii_case("wav"))
            .unwrap_or(false);
        if !is_wav {
            continue;
        }
        let name = entry.file_name().to_string_lossy().into_owned();
        match parse_clip_name_with(&name, ranges) {
            Ok(key) => candidates.push((entry.into_path(), key)),
            Err(e) => warn!("skipping {}: {e}", entry.path().display()),
        }
    }
    let records = candidates
        .into_par_iter()
        .map(|(path, key)| {
            let reader = hound::WavReader::open(&path).map_err(|source| Error::Wav {
                path: path.clone(),
                source,
            })?;
            let spec = reader.spec();
            let num_samples = reader.duration() as u64;
            let rel = path.strip_prefix(root).unwrap_or(&path).to_path_buf();
            Ok(ClipRecord {
                path: rel,
                species: key.species,
                domain: key.domain,
                clip_index: key.clip_index,
                duration_s: num_samples as f64 / spec.sample_rate as f64,
                num_samples,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if records.iter().all(|r| r.num_samples == 0) {
        return Err(Error::EmptyCorpus(root.to_path_buf()));
    }
    let records = records.into_iter().filter(|r| r.num_samples > 0).collect();
    Manifest::from_records(root, records)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Role {
    Train,
    Validation,
    Test,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Train => "train",
            Role::Validation => "validation",
            Role::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Role::Train),
            "validation" => Ok(Role::Validation),
            "test" => Ok(Role::Test),
            other => Err(Error::bad("split", format!("unknown role `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitAssignment {
    pub roles: BTreeMap<ClipKey, Role>,
    pub seed: u64,
    pub val_fraction: f64,
}

impl SplitAssignment {
    pub fn role(&self, key: &ClipKey) -> Option<Role> {
        self.roles.get(key).copied()
    }

    pub fn count(&self, role: Role) -> usize {
        self.roles.values().filter(|r| **r == role).count()
    }

    /// Records of `manifest` assigned to `role`.
    pub fn subset(&self, manifest: &Manifest, role: Role) -> Manifest {
        manifest.filter(|k| self.roles.get(k) == Some(&role))
    }

    pub fn write_csv(&self, manifest: &Manifest, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(Error::csv(path))?;
        w.write_record(["path", "role"]).map_err(Error::csv(path))?;
        for r in manifest.records() {
            let role = self
                .roles
                .get(&r.key())
                .ok_or_else(|| Error::UnknownClip(r.key().to_string()))?;
            w.write_record([r.path.to_string_lossy().as_ref(), role.as_str()])
                .map_err(Error::csv(path))?;
        }
        w.flush().map_err(Error::io("write split", path))
    }
}

/// Reads a `path,role` CSV. Clip identity comes from each path's file name.
pub fn read_roles_csv(path: &Path) -> Result<BTreeMap<ClipKey, Role>> {
    let mut rdr = csv::Reader::from_path(path).map_err(Error::csv(path))?;
    let mut roles = BTreeMap::new();
    for row in rdr.records() {
        let row = row.map_err(Error::csv(path))?;
        let (Some(p), Some(role)) = (row.get(0), row.get(1)) else {
            return Err(Error::bad("split", format!("{}: short row", path.display())));
        };
        roles.insert(parse_clip_name(p)?, Role::parse(role)?);
    }
    Ok(roles)
}

/// Reads a list of test clips: a CSV with a `path` column (other columns ignored).
pub fn read_test_list(path: &Path) -> Result<BTreeSet<ClipKey>> {
    let mut rdr = csv::Reader::from_path(path).map_err(Error::csv(path))?;
    let col = rdr
        .headers()
        .map_err(Error::csv(path))?
        .iter()
        .position(|h| h == "path")
        .ok_or_else(|| Error::bad("test list", format!("{}: no `path` column", path.display())))?;
    let mut keys = BTreeSet::new();
    for row in rdr.records() {
        let row = row.map_err(Error::csv(path))?;
        keys.insert(parse_clip_name(row.get(col).unwrap_or_default())?);
    }
    Ok(keys)
}

pub fn write_test_list(manifest: &Manifest, test: &BTreeSet<ClipKey>, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(Error::csv(path))?;
    w.write_record(["path"]).map_err(Error::csv(path))?;
    for r in manifest.records().iter().filter(|r| test.contains(&r.key())) {
        w.write_record([r.path.to_string_lossy().as_ref()])
            .map_err(Error::csv(path))?;
    }
    w.flush().map_err(Error::io("write test list", path))
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}

/// Species-stratified random validation split of a trainval manifest.
///
/// Each species contributes `round_half_up(fraction * n_species)` validation
/// clips drawn uniformly without replacement; species are visited in id order
/// from a single generator seeded by `seed`.
pub fn stratified_validation_split(trainval: &Manifest, fraction: f64, seed: u64) -> Result<SplitAssignment> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidFraction(fraction));
    }
    if trainval.is_empty() {
        return Err(Error::EmptySplit("trainval"));
    }
    let mut by_species: BTreeMap<SpeciesId, Vec<ClipKey>> = BTreeMap::new();
    for r in trainval.records() {
        by_species.entry(r.species).or_default().push(r.key());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut roles = BTreeMap::new();
    for (species, mut keys) in by_species {
        let n = keys.len();
        let k = round_half_up(fraction * n as f64).min(n);
        if n >= 2 && k == n {
            return Err(Error::DegenerateSplit {
                species: species.get(),
                total: n,
                validation: k,
            });
        }
        // partial Fisher-Yates: the first k slots become the validation draw
        for i in 0..k {
            let j = rng.gen_range(i..n);
            keys.swap(i, j);
        }
        for (i, key) in keys.into_iter().enumerate() {
            roles.insert(key, if i < k { Role::Validation } else { Role::Train });
        }
    }
    Ok(SplitAssignment {
        roles,
        seed,
        val_fraction: fraction,
    })
}

/// Full role assignment: clips in `test` become test, the rest are split
/// into train/validation.
pub fn assign_roles(
    manifest: &Manifest,
    test: &BTreeSet<ClipKey>,
    fraction: f64,
    seed: u64,
) -> Result<SplitAssignment> {
    for key in test {
        if manifest.get(key).is_none() {
            return Err(Error::UnknownClip(key.to_string()));
        }
    }
    let trainval = manifest.filter(|k| !test.contains(k));
    let mut split = stratified_validation_split(&trainval, fraction, seed)?;
    split.roles.extend(test.iter().map(|k| (*k, Role::Test)));
    Ok(split)
}

/// How a test clip is judged unseen.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnseenPolicy {
    /// Unseen iff its (species, domain) cell has no trainval clips.
    #[default]
    Cell,
    /// Unseen iff its domain has no trainval clips at all.
    Domain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stratum {
    Seen,
    Unseen,
}

impl Stratum {
    pub fn as_str(self) -> &'static str {
        match self {
            Stratum::Seen => "seen",
            Stratum::Unseen => "unseen",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeenUnseenMap {
    pub seen_cells: BTreeSet<(SpeciesId, DomainId)>,
    pub policy: UnseenPolicy,
}

impl SeenUnseenMap {
    pub fn stratum(&self, species: SpeciesId, domain: DomainId) -> Stratum {
        let seen = match self.policy {
            UnseenPolicy::Cell => self.seen_cells.contains(&(species, domain)),
            UnseenPolicy::Domain => self.seen_cells.iter().any(|(_, d)| *d == domain),
        };
        if seen {
            Stratum::Seen
        } else {
            Stratum::Unseen
        }
    }

    pub fn label(&self, test: &Manifest) -> Vec<(ClipKey, Stratum)> {
        test.records()
            .iter()
            .map(|r| (r.key(), self.stratum(r.species, r.domain)))
            .collect()
    }
}

pub fn derive_seen_unseen(train_val: &Manifest, test: &Manifest) -> SeenUnseenMap {
    derive_seen_unseen_with(train_val, test, UnseenPolicy::Cell)
}

pub fn derive_seen_unseen_with(train_val: &Manifest, _test: &Manifest, policy: UnseenPolicy) -> SeenUnseenMap {
    SeenUnseenMap {
        seen_cells: train_val.records().iter().map(|r| (r.species, r.domain)).collect(),
        policy,
    }
}

/// Builds an in-memory manifest whose cell counts equal `counts[species][domain]`.
/// Paths follow the canonical naming; durations are nominal.
pub fn manifest_from_counts(counts: &[[usize; MAX_DOMAINS as usize]], first_index: u64) -> Result<Manifest> {
    let mut records = Vec::new();
    for (s, row) in counts.iter().enumerate() {
        for (d, &n) in row.iter().enumerate() {
            let species = SpeciesId::from_index(s)?;
            let domain = DomainId::from_index(d)?;
            for i in 0..n as u64 {
                let key = ClipKey {
                    species,
                    domain,
                    clip_index: first_index + i,
                };
                records.push(ClipRecord {
                    path: PathBuf::from(format!("{}.wav", key.file_stem())),
                    species,
                    domain,
                    clip_index: key.clip_index,
                    duration_s: 1.0,
                    num_samples: 8000,
                });
            }
        }
    }
    Manifest::from_records("", records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn key(s: u8, d: u8, i: u64) -> ClipKey {
        ClipKey {
            species: SpeciesId::new(s).unwrap(),
            domain: DomainId::new(d).unwrap(),
            clip_index: i,
        }
    }

    #[test]
    fn parses_canonical_names() {
        assert_eq!(parse_clip_name("S_3_D_5_000123.wav").unwrap(), key(3, 5, 123));
        assert_eq!(parse_clip_name("S_9_D_1_0.wav").unwrap(), key(9, 1, 0));
        assert_eq!(parse_clip_name("S_1_D_2_7").unwrap(), key(1, 2, 7));
        assert_eq!(parse_clip_name("some/dir/S_1_D_2_7.WAV").unwrap(), key(1, 2, 7));
    }

    #[test]
    fn rejects_bad_names() {
        for bad in [
            "X_3_D_5_1.wav",
            "S_3_X_5_1.wav",
            "S_3_D_5.wav",
            "S_3_D_5_1_2.wav",
            "S_-3_D_5_1",
            "S_3_D_5_1.mp3",
            "S__D_5_1",
            "",
        ] {
            assert!(matches!(parse_clip_name(bad), Err(Error::MalformedName(_))), "{bad}");
        }
        assert!(matches!(
            parse_clip_name("S_10_D_1_0.wav"),
            Err(Error::OutOfRangeId { kind: "species", .. })
        ));
        assert!(matches!(
            parse_clip_name("S_0_D_1_0.wav"),
            Err(Error::OutOfRangeId { kind: "species", .. })
        ));
        assert!(matches!(
            parse_clip_name("S_1_D_6_0.wav"),
            Err(Error::OutOfRangeId { kind: "domain", .. })
        ));
        let narrow = IdRanges { species: 4, domains: 3 };
        assert!(parse_clip_name_with("S_5_D_1_0", narrow).is_err());
        assert!(parse_clip_name_with("S_4_D_3_0", narrow).is_ok());
    }

    proptest! {
        #[test]
        fn parse_inverts_format(s in 1u8..=9, d in 1u8..=5, i in 0u64..10_000_000) {
            let k = key(s, d, i);
            prop_assert_eq!(parse_clip_name(&format!("{}.wav", k.file_stem())).unwrap(), k);
            prop_assert_eq!(parse_clip_name(&k.file_stem()).unwrap(), k);
        }

        #[test]
        fn split_partitions_every_species(counts in proptest::collection::vec(2usize..60, 1..9), frac in 0.05f64..0.45, seed in any::<u64>()) {
            let mut table = vec![[0usize; 5]; counts.len()];
            for (s, &n) in counts.iter().enumerate() { table[s][s % 5] = n; }
            let m = manifest_from_counts(&table, 0).unwrap();
            let split = stratified_validation_split(&m, frac, seed).unwrap();
            prop_assert_eq!(split.roles.len(), m.len());
            for (s, &n) in counts.iter().enumerate() {
                let sp = SpeciesId::from_index(s).unwrap();
                let val = split.roles.iter().filter(|(k, r)| k.species == sp && **r == Role::Validation).count();
                prop_assert_eq!(val, round_half_up(frac * n as f64));
            }
        }

        #[test]
        fn seen_labels_ignore_order(perm_seed in any::<u64>()) {
            let tv = manifest_from_counts(&[[3, 0, 1, 0, 0], [0, 2, 0, 0, 0]], 0).unwrap();
            let test = manifest_from_counts(&[[1, 1, 1, 0, 0], [1, 1, 0, 0, 1]], 100).unwrap();
            let su = derive_seen_unseen(&tv, &test);
            let mut recs = test.records().to_vec();
            let mut rng = ChaCha8Rng::seed_from_u64(perm_seed);
            for i in (1..recs.len()).rev() { recs.swap(i, rng.gen_range(0..=i)); }
            let shuffled = Manifest { root: PathBuf::new(), records: recs };
            let mut a = su.label(&test);
            let mut b = su.label(&shuffled);
            a.sort();
            b.sort();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn split_exact_for_round_counts() {
        let m = manifest_from_counts(&[[100, 0, 0, 0, 0]], 0).unwrap();
        let split = stratified_validation_split(&m, 0.10, 7).unwrap();
        assert_eq!(split.count(Role::Validation), 10);
        assert_eq!(split.count(Role::Train), 90);
        assert_eq!(split, stratified_validation_split(&m, 0.10, 7).unwrap());
        assert_ne!(split.roles, stratified_validation_split(&m, 0.10, 8).unwrap().roles);
    }

    #[test]
    fn split_rejects_degenerate_and_bad_fraction() {
        let m = manifest_from_counts(&[[2, 0, 0, 0, 0]], 0).unwrap();
        assert!(matches!(
            stratified_validation_split(&m, 0.8, 1),
            Err(Error::DegenerateSplit { .. })
        ));
        assert!(matches!(
            stratified_validation_split(&m, 0.0, 1),
            Err(Error::InvalidFraction(_))
        ));
        assert!(matches!(
            stratified_validation_split(&m, 1.0, 1),
            Err(Error::InvalidFraction(_))
        ));
        let single = manifest_from_counts(&[[1, 0, 0, 0, 0]], 0).unwrap();
        assert!(stratified_validation_split(&single, 0.8, 1).is_ok());
    }

    #[test]
    fn duplicate_keys_rejected() {
        let r = ClipRecord {
            path: "S_1_D_1_0.wav".into(),
            species: SpeciesId::new(1).unwrap(),
            domain: DomainId::new(1).unwrap(),
            clip_index: 0,
            duration_s: 1.0,
            num_samples: 8000,
        };
        assert!(matches!(
            Manifest::from_records("", vec![r.clone(), r]),
            Err(Error::DuplicateClip { .. })
        ));
    }

    #[test]
    fn unseen_cells_by_brute_force() {
        let mut tv_counts = [[2usize; 5]; 9];
        tv_counts[4][2] = 0;
        let tv = manifest_from_counts(&tv_counts, 0).unwrap();
        let test = manifest_from_counts(&[[1usize; 5]; 9], 1000).unwrap();
        let su = derive_seen_unseen(&tv, &test);
        // brute force over all 45 cells
        for s in 1..=9u8 {
            for d in 1..=5u8 {
                let present = tv.records().iter().any(|r| r.species.get() == s && r.domain.get() == d);
                let stratum = su.stratum(SpeciesId::new(s).unwrap(), DomainId::new(d).unwrap());
                assert_eq!(stratum == Stratum::Unseen, !present);
            }
        }
        let unseen: Vec<_> = su
            .label(&test)
            .into_iter()
            .filter(|(_, s)| *s == Stratum::Unseen)
            .collect();
        assert_eq!(unseen.len(), 1);
        assert_eq!(
            unseen[0].0.cell(),
            (SpeciesId::new(5).unwrap(), DomainId::new(3).unwrap())
        );

        let all_seen = derive_seen_unseen(&test, &test);
        assert!(all_seen.label(&test).iter().all(|(_, s)| *s == Stratum::Seen));
    }

    #[test]
    fn domain_policy_only_flags_absent_domains() {
        let tv = manifest_from_counts(&[[3, 0, 0, 0, 0], [0, 2, 0, 0, 0]], 0).unwrap();
        let test = manifest_from_counts(&[[0, 1, 1, 0, 0]], 100).unwrap();
        let cell = derive_seen_unseen_with(&tv, &test, UnseenPolicy::Cell);
        let domain = derive_seen_unseen_with(&tv, &test, UnseenPolicy::Domain);
        let s1 = SpeciesId::new(1).unwrap();
        assert_eq!(cell.stratum(s1, DomainId::new(2).unwrap()), Stratum::Unseen);
        assert_eq!(domain.stratum(s1, DomainId::new(2).unwrap()), Stratum::Seen);
        assert_eq!(domain.stratum(s1, DomainId::new(3).unwrap()), Stratum::Unseen);
    }

    #[test]
    fn species_name_table() {
        let names = SpeciesNames::default();
        assert_eq!(names.name(SpeciesId::new(1).unwrap()), "Ae.aeg");
        assert_eq!(names.name(SpeciesId::new(9).unwrap()), "An.ste");
        assert_eq!(names.id("Cx.qui"), Some(SpeciesId::new(3).unwrap()));
        assert!(SpeciesNames::new(vec!["a".into(), "a".into()]).is_err());
    }

    #[test]
    fn manifest_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = manifest_from_counts(&[[2, 1, 0, 0, 0], [0, 0, 0, 0, 3]], 5).unwrap();
        let p = dir.path().join("manifest.csv");
        m.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("path,species,domain,clip_index,duration_s,num_samples\n"));
        let back = Manifest::read_csv(&p, "").unwrap();
        assert_eq!(back, m);

        let test: BTreeSet<_> = [m.records()[0].key()].into();
        let split = assign_roles(&m, &test, 0.25, 3).unwrap();
        let sp = dir.path().join("split.csv");
        split.write_csv(&m, &sp).unwrap();
        assert_eq!(read_roles_csv(&sp).unwrap(), split.roles);
        let tl = dir.path().join("test.csv");
        write_test_list(&m, &test, &tl).unwrap();
        assert_eq!(read_test_list(&tl).unwrap(), test);
    }

    #[test]
    fn scan_skips_strays_and_rejects_empty() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(scan_corpus(dir.path()), Err(Error::EmptyCorpus(_))));
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 8000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(dir.path().join("S_2_D_3_4.wav"), spec).unwrap();
        for _ in 0..4000 {
            w.write_sample(0i16).unwrap();
        }
        w.finalize().unwrap();
        std::fs::write(dir.path().join("notes.txt"), "x").unwrap();
        let m = scan_corpus(dir.path()).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m.records()[0].key(), key(2, 3, 4));
        assert_eq!(m.records()[0].num_samples, 4000);
        assert!((m.records()[0].duration_s - 0.5).abs() < 1e-12);
    }
}
