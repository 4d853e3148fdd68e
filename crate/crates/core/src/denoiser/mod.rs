//! Noise predictors with per-pixel timestep conditioning.

mod checkpoint;
mod net;
mod oracle;
mod train;

pub use checkpoint::{Checkpoint, TrainingMetadata, CHECKPOINT_FORMAT};
pub use net::{NetConfig, NetParams, TinyCondDenoiser, NULL_TOKEN, PARAM_BLOCKS};
pub use oracle::{oracle_predict, GaussianDataSpec, GaussianOracle};
pub use train::{evaluate_loss, train, TrainConfig, TrainingExample};

use crate::attention::CrossAttentionMaps;
use crate::error::Result;
use crate::latent::LatentState;
use crate::schedule::TimestepField;

/// Output of one denoiser evaluation.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub eps: LatentState,
    /// Cross-attention weights, when the model has cross-attention.
    pub maps: Option<CrossAttentionMaps>,
}

/// An epsilon-predictor accepting one timestep per pixel.
///
/// `tokens = None` requests the unconditional prediction.
pub trait Denoiser: Sync {
    fn predict(&self, x: &LatentState, field: &TimestepField, tokens: Option<&[usize]>)
        -> Result<Prediction>;
}
