use std::path::PathBuf;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    // corpus
    #[error("malformed clip name `{0}` (expected S_<species>_D_<domain>_<index>)")]
    MalformedName(String),
    #[error("{kind} id {value} out of range 1..={max} in `{name}`")]
    OutOfRangeId {
        name: String,
        kind: &'static str,
        value: u32,
        max: u32,
    },
    #[error("no valid clips found under {0}")]
    EmptyCorpus(PathBuf),
    #[error("duplicate clip S_{species}_D_{domain}_{index}")]
    DuplicateClip { species: u8, domain: u8, index: u64 },
    #[error("split would leave species {species} with no training clips ({total} clips, {validation} to validation)")]
    DegenerateSplit {
        species: u8,
        total: usize,
        validation: usize,
    },
    #[error("invalid fraction {0}: must lie strictly between 0 and 1")]
    InvalidFraction(f64),
    #[error("clip {0} is not present in the manifest")]
    UnknownClip(String),

    // dsp
    #[error("empty input waveform")]
    EmptyInput,
    #[error("expected sample rate {expected} Hz, got {actual} Hz")]
    WrongSampleRate { expected: u32, actual: u32 },
    #[error("no frames to fit standardization statistics")]
    NoFrames,
    #[error("feature is already standardized")]
    AlreadyStandardized,
    #[error("band count mismatch: expected {expected}, got {actual}")]
    BandMismatch { expected: usize, actual: usize },
    #[error("bad {what} file: {reason}")]
    BadFormat { what: &'static str, reason: String },

    // nn
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    // model
    #[error("parameter count {count} outside the budget window [{min}, {max}]")]
    ParamBudgetViolation { count: usize, min: usize, max: usize },
    #[error("cannot pack an empty batch")]
    EmptyBatch,
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("feature must be standardized before batching")]
    NotStandardized,

    // train
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("loss diverged (non-finite) at epoch {epoch}, batch {batch}")]
    DivergedLoss { epoch: usize, batch: usize },
    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(String),

    // eval
    #[error("label sequences differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("no class has any support")]
    NoSupport,
    #[error("no prediction for clip {0}")]
    MissingPredictions(String),
    #[error("cannot aggregate an empty list of reports")]
    EmptyList,
    #[error("reports are not homogeneous: {0}")]
    Heterogeneous(String),
    #[error("missing evaluation output: {0}")]
    MissingEvaluation(String),

    // pipeline
    #[error("missing {what} at {path}: run `cdmsc {step}` first")]
    MissingStage {
        what: &'static str,
        path: PathBuf,
        step: &'static str,
    },
    #[error("{failed} of {total} training runs failed (seeds {seeds:?})")]
    RunsFailed {
        failed: usize,
        total: usize,
        seeds: Vec<u64>,
    },

    // plumbing
    #[error("config error: {0}")]
    Config(String),
    #[error("{stage}: {path}: {source}")]
    Io {
        stage: &'static str,
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(stage: &'static str, path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { stage, path, source }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>) -> impl FnOnce(csv::Error) -> Error {
        let path = path.into();
        move |source| Error::Csv { path, source }
    }

    /// Wraps the error with a description of where it happened (a clip path, a seed).
    pub fn context(self, context: impl Into<String>) -> Error {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    pub(crate) fn bad(what: &'static str, reason: impl Into<String>) -> Error {
        Error::BadFormat {
            what,
            reason: reason.into(),
        }
    }
}
