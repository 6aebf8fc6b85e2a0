//! The toy text-conditioned denoiser, its noise schedule, training and
//! checkpoints.

mod attention;
pub mod checkpoint;
mod model;
mod prompt;
mod schedule;
pub mod train;

pub use attention::{AttentionMap, AttentionSnapshot, Provenance};
pub use model::{
    grid_embedding, timestep_embedding, BlockWeights, DenoiserModel, ForwardOutput, ModelConfig,
    StemWeights, Weights,
};
pub use prompt::PromptSpec;
pub use schedule::{mix, NoiseSchedule};
pub use train::{train, DataSource, TrainConfig, TrainReport};
