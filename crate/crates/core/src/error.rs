//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by scenario loading, geometry preconditions, and the
/// wire codec.
#[derive(Debug, Error)]
pub enum Error {
    /// A function argument violated a documented precondition.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// Scenario configuration could not be loaded or failed validation.
    #[error("scenario config: {0}")]
    Config(String),

    /// Random placement could not find a collision-free spot.
    #[error("placement failed for vehicle {index} after {retries} retries")]
    Placement { index: usize, retries: u32 },

    /// Two grids or feature maps with incompatible shapes were combined.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Message bytes could not be decoded; `offset` is the byte position of
    /// the first inconsistency.
    #[error("decode error at byte {offset}: {reason}")]
    Decode { offset: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
