//! Error type shared across the crate.

use thiserror::Error;

/// Everything that can go wrong in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("hop {hop} out of range for window length {window_len}")]
    BadHop { hop: usize, window_len: usize },

    #[error("signal of {len} samples is shorter than one window ({window_len})")]
    SignalTooShort { len: usize, window_len: usize },

    #[error("spectrogram was produced with a different transform configuration")]
    ConfigMismatch,

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("{n_mels} mel bands out of range for {n_bins} bins")]
    MelOutOfRange { n_mels: usize, n_bins: usize },

    #[error("expected a 4-channel B-format signal, got {got} channels")]
    ChannelCount { got: usize },

    #[error("invalid scene: {0}")]
    SceneValidation(String),

    #[error("empty frame or bin selection")]
    EmptySelection,

    #[error("matrix is not Hermitian")]
    NotHermitian,

    #[error("unsupported number of simultaneous sources: {n}")]
    TooManySources { n: usize },

    #[error("non-finite loss at step {step}: {value}")]
    NonFiniteLoss { step: usize, value: f64 },

    #[error("loss exceeded 10x its initial value at step {step}; fitting diverged")]
    Diverged { step: usize },

    #[error("refiner parameters have the wrong shape: expected {expected} weights, got {got}")]
    ParamShape { expected: usize, got: usize },
}
