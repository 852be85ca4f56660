use std::path::PathBuf;

/// Harness failures, grouped by the exit code they map to.
#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed data at byte {offset}{}: {msg}", record.map(|r| format!(" (record {r})")).unwrap_or_default())]
    Parse {
        offset: u64,
        record: Option<usize>,
        msg: String,
    },
    #[error("data error: {0}")]
    Data(String),
    #[error("bad checkpoint magic {found:?}, expected \"TOFE\"")]
    BadMagic { found: [u8; 4] },
    #[error("checkpoint format version {found} is not supported (this build reads {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("checkpoint tensor {name}: {detail}")]
    Shape { name: String, detail: String },
    #[error("configuration error: {field} is {checkpoint} in the checkpoint but {config} in the config")]
    Mismatch {
        field: &'static str,
        checkpoint: String,
        config: String,
    },
    #[error(transparent)]
    Core(#[from] tofe_core::Error),
}

impl HarnessError {
    /// 1 usage, 2 data or configuration, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Usage(_) => 1,
            HarnessError::Core(e) if e.is_numeric() => 3,
            _ => 2,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<tofe_core::TensorError> for HarnessError {
    fn from(e: tofe_core::TensorError) -> Self {
        HarnessError::Core(e.into())
    }
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;
