//! Benchmark fixtures shared by the criterion targets.

use attnguide::{DenoiserModel, ModelConfig, PromptSpec, Tensor};

pub fn model() -> DenoiserModel<f32> {
    DenoiserModel::init(ModelConfig::default(), 0).expect("default config is valid")
}

pub fn prompt() -> PromptSpec {
    PromptSpec::parse("red circle and blue square").expect("prompt uses vocabulary words")
}

pub fn latent() -> Tensor<f32> {
    Tensor::from_fn(&[32, 32, 3], |i| {
        ((i * 2654435761) % 1000) as f32 / 500.0 - 1.0
    })
}
