//! Error types, grouped by subsystem.

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Shape, domain, and numeric failures raised by tensor ops.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch on {dim}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        dim: &'static str,
        expected: String,
        got: String,
    },
    #[error("{op}: expected rank {expected}, got shape {got:?}")]
    BadRank {
        op: &'static str,
        expected: &'static str,
        got: Vec<usize>,
    },
    #[error("{op}: non-integral output extent on {dim}: ({size} + 2*{padding} - {kernel}) is not divisible by stride {stride}")]
    NonIntegralOutput {
        op: &'static str,
        dim: &'static str,
        size: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    #[error("{op}: {dim} extent {got} must be even")]
    OddExtent {
        op: &'static str,
        dim: &'static str,
        got: usize,
    },
    #[error("{op}: unsupported configuration: {detail}")]
    Unsupported { op: &'static str, detail: String },
    #[error("{op}: degenerate statistics: {detail}")]
    DegenerateStats { op: &'static str, detail: String },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("backward: loss must be scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("tensor: shape {shape:?} with {len} data elements is inconsistent")]
    BadTensor { shape: Vec<usize>, len: usize },
    #[error("tape: node {node} references a later node {input} (cycle)")]
    Cycle { node: usize, input: usize },
    #[error("tape: unknown tensor id {0}")]
    UnknownId(usize),
}

/// Model and run configuration rejections.
#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config: {field}: {detail}")]
    Invalid { field: &'static str, detail: String },
    #[error("config: failed to parse: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("config: path {path}: {detail}")]
    Path { path: String, detail: String },
}

/// Binary checkpoint encoding and decoding failures.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("checkpoint: bad magic")]
    BadMagic,
    #[error("checkpoint: unsupported format version {0}")]
    BadVersion(u16),
    #[error("checkpoint: truncated stream")]
    Truncated,
    #[error("checkpoint: crc mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("checkpoint: unknown dtype code {0}")]
    BadDType(u8),
    #[error("checkpoint: dtype mismatch for {name}: expected {expected}, got {got}")]
    DTypeMismatch {
        name: String,
        expected: &'static str,
        got: &'static str,
    },
    #[error("checkpoint: {name}: {detail}")]
    ShapeDisagreement { name: String, detail: String },
    #[error("checkpoint: missing tensor {0}")]
    MissingTensor(String),
    #[error("checkpoint: malformed metadata: {0}")]
    BadMeta(String),
    #[error("checkpoint: io: {0}")]
    Io(#[from] std::io::Error),
}

/// Dataset generation and sample decoding failures.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("scene: {0}")]
    SceneInvalid(String),
    #[error("blur: kernel of radius {radius} ({kernel} px) exceeds image extent {extent}")]
    KernelExceedsImage {
        radius: f64,
        kernel: usize,
        extent: usize,
    },
    #[error("png: {0}")]
    Png(String),
    #[error("dataset: missing file {0}")]
    MissingFile(String),
    #[error("dataset: manifest: {0}")]
    Manifest(String),
    #[error("dataset: io: {0}")]
    Io(#[from] std::io::Error),
}

/// Training pipeline misuse.
#[derive(Debug, Error)]
pub enum TrainError {
    #[error("train: level order violation: {0}")]
    LevelOrder(String),
    #[error("train: {0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
}
