use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("empty dataset file {0}")]
    EmptyFile(PathBuf),

    #[error("label column `{0}` not found in header")]
    MissingLabelColumn(String),

    #[error("unparsable cell at row {row}, column `{column}`: `{value}`")]
    BadCell {
        row: usize,
        column: String,
        value: String,
    },

    #[error("label outside {{0,1}} at row {row}: `{value}`")]
    BadLabel { row: usize, value: String },

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("non-finite input value")]
    NonFiniteInput,

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("degenerate meta labels at tau = {tau}: every trust label is {value}")]
    DegenerateMetaLabels { tau: f64, value: u8 },

    #[error("single-class labels: AUC needs both classes present")]
    SingleClass,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("trust label z = 1 on an incorrect base prediction (record {0})")]
    UnsoundTrustLabel(usize),

    #[error("meta feature layout mismatch: meta network expects {expected} inputs, layout yields {actual}")]
    LayoutMismatch { expected: usize, actual: usize },

    #[error("invalid config: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
