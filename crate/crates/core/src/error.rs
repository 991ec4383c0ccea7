use std::path::PathBuf;

/// Errors produced anywhere in the restoration pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("timestep {t} out of range for a schedule of {steps} steps")]
    TimestepOutOfRange { t: usize, steps: usize },
    #[error("singular schedule: alpha_bar[{t}] = {alpha_bar:e} is below the numeric floor")]
    SingularSchedule { t: usize, alpha_bar: f64 },
    #[error("invalid degradation spec `{spec}`: {reason}")]
    InvalidSpec { spec: String, reason: String },
    #[error("non-finite value encountered {0}")]
    NonFinite(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("image error: {0}")]
    Image(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category, used by the command-line front end.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::TimestepOutOfRange { .. } => "timestep",
            Error::SingularSchedule { .. } => "singular-schedule",
            Error::InvalidSpec { .. } => "invalid-spec",
            Error::NonFinite(_) => "non-finite",
            Error::Checkpoint(_) => "checkpoint",
            Error::Image(_) => "image",
            Error::Dataset(_) => "dataset",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Shape(format!($($arg)*))
    };
}

macro_rules! invalid {
    ($($arg:tt)*) => {
        $crate::error::Error::InvalidArgument(format!($($arg)*))
    };
}

pub(crate) use invalid;
pub(crate) use shape_err;
