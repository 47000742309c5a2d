use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error(
        "kernel for radius {radius_px:.3} px needs a side of {side} px; at least 3 px are required"
    )]
    KernelTooSmall { radius_px: f64, side: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("mean evoked response of the calibration batch is zero")]
    ZeroMeanResponse,

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("push-pull identity violated at element {index}: {value}")]
    PushPull { index: usize, value: f64 },

    #[error(transparent)]
    Fit(#[from] crate::neurophys::FitError),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}
