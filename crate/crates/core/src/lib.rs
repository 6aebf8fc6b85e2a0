//! Train-free attention-loss guidance for a toy text-conditioned diffusion model.
//!
//! The crate bundles a small reverse-mode autodiff engine, a pixel-space
//! denoiser with cross-attention, a DDIM sampler with a guidance hook, the
//! guidance losses themselves (subject-neglect loss and box layout energy),
//! a synthetic shapes dataset with a blob detector, and evaluation helpers.

pub mod autodiff;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod guidance;
pub mod imageio;
pub mod sampler;
pub mod scenes;
pub mod vocab;

pub use autodiff::{DType, Element, Gradients, Tape, Tensor, Var};
pub use diffusion::{
    AttentionMap, AttentionSnapshot, DenoiserModel, ModelConfig, NoiseSchedule, PromptSpec,
    TrainConfig,
};
pub use error::{Error, Result};
pub use guidance::{GuidanceConfig, LayoutSpec, Milestone};
pub use sampler::{SampleOutput, SamplerConfig};
pub use scenes::{Detection, Scene};
pub use vocab::{Color, Shape, Token};
