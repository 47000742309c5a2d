use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("cannot read {0}: {1}")]
    Read(PathBuf, #[source] std::io::Error),

    #[error("cannot write {0}: {1}")]
    Write(PathBuf, #[source] std::io::Error),

    #[error("invalid config {0}: {1}")]
    Config(PathBuf, #[source] toml::de::Error),

    #[error("invalid configuration: {0}")]
    Invalid(String),

    #[error("cannot decode image {0}: {1}")]
    Image(PathBuf, #[source] image::ImageError),

    #[error(transparent)]
    Model(#[from] earlyvision::Error),
}
