use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("{what}: expected even height and width, got {height}x{width}")]
    OddDimension { what: &'static str, height: usize, width: usize },
    #[error("{what}: {channels} channels not divisible by {divisor}")]
    ChannelDivisibility { what: &'static str, channels: usize, divisor: usize },
    #[error("window size {window} does not divide grid {height}x{width}")]
    WindowDivisibility { window: usize, height: usize, width: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("decoder node {node} needs missing input {missing}")]
    DanglingNode { node: String, missing: String },
    #[error("label value {value} outside [0, {classes})")]
    LabelOutOfRange { value: usize, classes: usize },
    #[error("class count mismatch: {0}")]
    ClassCount(String),
    #[error("loss weight {name} = {value} must be non-negative")]
    NegativeWeight { name: &'static str, value: f64 },
    #[error("diffusion step size {lambda} outside (0, 1/8]")]
    StabilityBound { lambda: f64 },
    #[error("hausdorff distance of an empty point set is undefined")]
    EmptyPointSet,
    #[error("subset of {total} cases at fraction {fraction} is empty")]
    EmptySubset { total: usize, fraction: f64 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: corrupt array file at byte {offset}: {msg}")]
    Format { path: PathBuf, offset: usize, msg: String },
    #[error("{path}: unsupported version {found} (expected {expected})")]
    Version { path: PathBuf, found: u32, expected: u32 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint phase is {found}, expected {expected}")]
    PhaseMismatch { found: String, expected: String },
    #[error("training diverged: loss was not finite for {steps} consecutive steps (epoch {epoch})")]
    Diverged { epoch: usize, steps: usize },
    #[error("{0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Other(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::result::Result<T, std::io::Error> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::Io { path: path.into(), source })
    }
}
