//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Text region too small or with non-positive area to be processed.
    #[error("degenerate region: {0}")]
    DegenerateRegion(String),

    /// Quad lies (partly) outside the frame it is rasterized into.
    #[error("quad outside frame: {0}")]
    OutOfFrame(String),

    /// Array shapes do not match an operation's contract.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Invalid configuration value.
    #[error("invalid config: {0}")]
    Config(String),

    /// Index (e.g. a diffusion timestep) out of range.
    #[error("index out of range: {0}")]
    Index(String),

    /// An operation that needs at least one element got none.
    #[error("empty input: {0}")]
    EmptyInput(String),

    /// Malformed or non-finite input data.
    #[error("invalid input: {0}")]
    Input(String),

    /// Training aborted on a non-finite loss value.
    #[error("non-finite loss at step {step}: {value}")]
    NonFiniteLoss { step: usize, value: f64 },

    /// Checkpoint file malformed or inconsistent with the model.
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    /// A recognizer backend failed; filtering treats this as discard.
    #[error("recognizer failed: {0}")]
    Recognizer(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
