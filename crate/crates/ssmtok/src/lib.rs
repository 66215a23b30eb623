//! Desk-scale state-space token language models.
//!
//! This crate trains and samples small conditional language models over
//! residual-vector-quantized (RVQ) token grids. Four block architectures are
//! provided — Prefix Mamba, Prefix SiMBA, Cross SiMBA, and a Cross Transformer
//! baseline — on top of a minimal f64 reverse-mode autodiff engine and a set
//! of state-space scan primitives (sequential, LTI convolution, selective, and
//! chunked). Generation supports classifier-free guidance, the delay and
//! flatten interleaving patterns, and a two-stage coarse-to-fine pipeline with
//! a pluggable refiner.
//!
//! The crate is examples-first: each major capability has a runnable example
//! under `examples/` (see the README), and a thin `ssmtok` binary exposes the
//! same operations as subcommands (`synth`, `train`, `generate`, `refine`,
//! `pipeline`, `bench`, `eval`, `flops`, `params`).
//!
//! Everything is deterministic by construction: all randomness flows through
//! seeded ChaCha streams derived from a run seed, so repeated runs are
//! bit-identical.

pub mod bench;
pub mod blocks;
pub mod corpus;
pub mod eval;
pub mod manifest;
pub mod model;
pub mod rvq;
pub mod ssm;
pub mod tensor;
pub mod train;
pub mod twostage;

/// Numeric scalar used throughout. 64-bit by default; the `f32` feature
/// switches the whole crate to 32-bit (checkpoints stay 64-bit on disk).
#[cfg(not(feature = "f32"))]
pub type Real = f64;
#[cfg(feature = "f32")]
pub type Real = f32;

pub use tensor::{Tape, Tensor, TensorError};

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("config error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}

/// Derive an independent ChaCha stream from a base seed, a purpose label, and
/// an index. Training, data shuffling, dropout, and sampling each get their
/// own stream so that resuming from a checkpoint reproduces an uninterrupted
/// run exactly.
pub fn stream_rng(seed: u64, purpose: &str, index: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(purpose.as_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest[..32]);
    rand_chacha::ChaCha8Rng::from_seed(key)
}
