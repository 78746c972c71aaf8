//! Error taxonomy shared across the workspace.

use thiserror::Error;

/// Everything that can go wrong in the library, grouped by contract class.
///
/// `Config` maps to CLI exit code 2, `Numerical` and `Budget` to exit code 3.
#[derive(Debug, Error)]
pub enum SfError {
    /// Bad caller-supplied data (empty corpus, invalid token id, all-zero distribution).
    #[error("input error: {0}")]
    Input(String),

    /// An API precondition was violated (e.g. stepping from a terminal state).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Bad configuration: unknown keys, out-of-range hyperparameters, missing files,
    /// stage-order violations.
    #[error("config error: {0}")]
    Config(String),

    /// A linear solve or optimization failed for numerical reasons.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// An exact enumeration would exceed the node budget.
    #[error("enumeration budget exceeded: {0}")]
    Budget(String),

    /// Every token's probability cap is so low that no valid capped distribution exists.
    /// Decoding falls back to a distribution proportional to the caps.
    #[error("dead end everywhere: {0}")]
    DeadEndEverywhere(String),

    /// Malformed checkpoint or data file.
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SfError>;
