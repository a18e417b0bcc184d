use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Broad failure classes, each with a fixed process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    NoDominantMode,
    DataQuality,
    Config,
    Numerical,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::NoDominantMode => 2,
            ErrorClass::DataQuality => 3,
            ErrorClass::Config => 4,
            ErrorClass::Numerical => 5,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("rejected sample at record {index}: {reason}")]
    RejectedSample { index: usize, reason: String },

    #[error("data quality: {0}")]
    DataQuality(String),

    #[error("resampling: {0}")]
    Resampling(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("configuration: {0}")]
    Config(String),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("truncation order r = {r} is ill-conditioned (sigma_r / sigma_1 = {ratio:.3e}); choose a smaller r")]
    IllConditionedTruncation { r: usize, ratio: f64 },

    #[error("eigenvalue mu = 0 has no continuous-time counterpart")]
    UndefinedEigenvalue,

    #[error("all plant participations are zero for the selected mode")]
    DegenerateMode,

    #[error(
        "no eigenvalue within 15% of {f_s:.4} Hz (nearest: {nearest}); revisit the truncation order or the bandpass"
    )]
    NoMatchingMode { f_s: f64, nearest: String },

    #[error("mode index {index} out of range for {len} modes")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("eigensolver failed to converge after {0} iterations")]
    NoConvergence(usize),

    #[error("no dominant oscillatory mode above the spectral threshold")]
    NoDominantMode,

    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("toml: {0}")]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::NoDominantMode => ErrorClass::NoDominantMode,
            Error::RejectedSample { .. }
            | Error::DataQuality(_)
            | Error::Resampling(_)
            | Error::InsufficientData(_)
            | Error::Io(_)
            | Error::Csv(_) => ErrorClass::DataQuality,
            Error::Config(_) | Error::Json(_) | Error::Toml(_) => ErrorClass::Config,
            Error::DegenerateData(_)
            | Error::IllConditionedTruncation { .. }
            | Error::UndefinedEigenvalue
            | Error::DegenerateMode
            | Error::NoMatchingMode { .. }
            | Error::IndexOutOfRange { .. }
            | Error::NoConvergence(_) => ErrorClass::Numerical,
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.class().exit_code()
    }
}
