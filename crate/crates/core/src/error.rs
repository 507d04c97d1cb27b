use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("layer range {first}-{last} invalid for {n_blocks} blocks")]
    Range {
        first: usize,
        last: usize,
        n_blocks: usize,
    },

    #[error("LoRA rank {rank} must satisfy 1 <= r < min({d_out}, {k_in})")]
    Rank { rank: usize, d_out: usize, k_in: usize },

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("batch norm evaluated before any running statistics were recorded")]
    UninitializedStats,

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error("input too short: {len} samples, need at least {min}")]
    InputLength { len: usize, min: usize },

    #[error("noise signal has zero power")]
    DegenerateNoise,

    #[error("embedding has zero norm")]
    DegenerateEmbedding,

    #[error("cohort is empty")]
    EmptyCohort,

    #[error("score set needs both target and nontarget trials ({targets} targets, {nontargets} nontargets)")]
    SingleClass { targets: usize, nontargets: usize },

    #[error("no embedding for utterance `{0}`")]
    Lookup(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: u64, loss: f64 },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("unsupported audio format in {path}: {reason}")]
    UnsupportedFormat { path: PathBuf, reason: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
