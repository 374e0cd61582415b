//! Crate-wide error type. Variants carry the originating module so CLI
//! failures surface as one machine-parsable line.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("tensor: {0}")]
    Tensor(String),
    #[error("keys: {0}")]
    Keys(String),
    #[error("model: {0}")]
    Model(String),
    #[error("train: {0}")]
    Train(String),
    #[error("ensemble: {0}")]
    Ensemble(String),
    #[error("attack: {0}")]
    Attack(String),
    #[error("data: {0}")]
    Data(String),
    #[error("report: {0}")]
    Report(String),
    #[error("format: {0}")]
    Format(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
