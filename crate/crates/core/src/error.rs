use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = FwlsError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FwlsError {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("{what} index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("non-finite value in row {row}{} column `{column}`", row_label(.row_id))]
    NonFinite {
        row: usize,
        row_id: Option<String>,
        column: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("design mapping mismatch: left is L={left_models} M={left_features}, right is L={right_models} M={right_features}")]
    MappingMismatch {
        left_models: usize,
        left_features: usize,
        right_models: usize,
        right_features: usize,
    },

    #[error("system is singular at lambda={lambda}; raise lambda or drop redundant columns")]
    Singular { lambda: f64 },

    #[error("degenerate Sherman-Morrison update (denominator {denominator:e}); re-solve from the Gram state instead")]
    DegenerateUpdate { denominator: f64 },

    #[error("negative residual energy {value:e} exceeds the fp-drift allowance")]
    NegativeResidual { value: f64 },

    #[error("row count mismatch: state holds {expected} rows, stream has {actual}")]
    RowCountMismatch { expected: u64, actual: u64 },

    #[error("row-id fingerprint mismatch (state {expected:#018x}, stream {actual:#018x}); the new column would be paired with the wrong rows")]
    FingerprintMismatch { expected: u64, actual: u64 },

    #[error("not an FWLS state file (bad magic)")]
    BadMagic,

    #[error("unsupported state file version {found} (this build reads version {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },

    #[error("corrupt state file: {0}")]
    CorruptFile(String),

    #[error("training diverged at epoch {epoch}")]
    TrainingDiverged { epoch: usize },

    #[error("unknown meta-feature id {0}")]
    UnknownMetaFeature(u32),

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: String,
        line: u64,
        message: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn row_label(id: &Option<String>) -> String {
    match id {
        Some(id) => format!(" (id `{id}`)"),
        None => String::new(),
    }
}

impl FwlsError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FwlsError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dims(context: &'static str, expected: usize, actual: usize) -> Self {
        FwlsError::DimensionMismatch {
            context,
            expected,
            actual,
        }
    }
}
