//! Error taxonomy shared across the workspace.

use thiserror::Error;

/// Unified error type for every fallible operation in the crate.
#[derive(Error, Debug)]
pub enum Error {
    /// Array extents do not conform for the requested operation.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A NaN or infinity appeared where only finite values are allowed.
    #[error("non-finite value: {0}")]
    Numeric(String),

    /// An invalid configuration value (caller error, maps to CLI exit 1).
    #[error("config error: {0}")]
    Config(String),

    /// A caller violated an operation's contract.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Container magic/version/layout problems.
    #[error("container format error: {0}")]
    Format(String),

    /// A container file ended before its header said it would.
    #[error("container corrupted: {0}")]
    Corruption(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 1 for usage/config problems,
    /// 2 for numeric or contract failures at runtime.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            _ => 2,
        }
    }
}
