//! Low-resolution embedding, the discriminator, and the adversarial objective.

mod adversarial;
mod discriminator;
mod encoder;

pub use adversarial::{adversarial_losses, AdvFormulation, AdvLosses};
pub use discriminator::{Discriminator, DiscriminatorConfig};
pub use encoder::{resize_to, EncoderConfig, LrEncoder};

use crate::autodiff::Var;

/// Encoder features resampled onto the grid of every flow level.
#[derive(Clone)]
pub struct LrEmbedding<T> {
    /// One `(N, C_e, H_l, W_l)` map per flow level, finest first.
    pub levels: Vec<Var<T>>,
    /// 1-based indices of the encoder blocks whose outputs were concatenated.
    pub sources: Vec<usize>,
}

impl<T: crate::Scalar> std::fmt::Debug for LrEmbedding<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LrEmbedding")
            .field("levels", &self.levels)
            .field("sources", &self.sources)
            .finish()
    }
}

impl<T: crate::Scalar> LrEmbedding<T> {
    /// A single-level embedding wrapping an arbitrary tensor.
    pub fn single(level: Var<T>) -> Self {
        Self {
            levels: vec![level],
            sources: Vec::new(),
        }
    }

    pub fn channels(&self) -> usize {
        self.levels.first().map_or(0, |v| v.shape()[1])
    }
}
