//! A small reverse-mode training substrate.
//!
//! Parameters live in a [`ParamStore`] and are addressed by [`ParamId`].
//! Layers hold ids rather than data, so a forward pass borrows the store
//! immutably and a backward pass writes into a separate [`Gradients`]
//! buffer. [`ParamStore::accumulate`] folds a buffer into the per-parameter
//! accumulators that [`AdamState`] consumes.

mod adam;
pub mod checkpoint;
mod gradcheck;
mod layers;
mod loss;
mod lstm;
mod params;

pub use adam::{adam_step, AdamState};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use layers::{relu_backward, relu_forward, Embedding, Linear};
pub use loss::{sigmoid_bce_mean, softmax_cross_entropy};
pub use lstm::{BiLstm, BiLstmTrace, Direction, LstmLayer, LstmTrace, StackedBiLstm, StackedTrace};
pub use params::{Gradients, Init, ParamId, ParamStore, ParamTensor};

use alloc::string::String;

pub type Rng = rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}

/// Global L2 norm at which accumulated gradients are rescaled.
pub const DEFAULT_CLIP_NORM: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NetError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("empty input sequence")]
    EmptySequence,
    #[error("training diverged: non-finite value in {0}")]
    TrainingDiverged(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub(crate) fn check_dim(expected: usize, found: usize) -> Result<(), NetError> {
    if expected == found {
        Ok(())
    } else {
        Err(NetError::DimensionMismatch { expected, found })
    }
}
