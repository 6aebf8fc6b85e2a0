//! Fully resolved run configurations. Every field has a default, so a config
//! file only needs the fields it changes.

use std::path::PathBuf;

use attnguide::diffusion::TrainConfig;
use attnguide::guidance::LayoutEntry;
use attnguide::{GuidanceConfig, ModelConfig, SamplerConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub t_train: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            t_train: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRun {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    /// Exported dataset directory; fresh random scenes when absent.
    pub dataset: Option<PathBuf>,
    pub out: PathBuf,
    /// Write an intermediate checkpoint every this many steps (0 = never).
    pub checkpoint_every: usize,
}

impl Default for TrainRun {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            model: ModelConfig::default(),
            schedule: ScheduleConfig::default(),
            dataset: None,
            out: PathBuf::from("checkpoint"),
            checkpoint_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleRun {
    pub checkpoint: PathBuf,
    /// Space-separated vocabulary words.
    pub prompt: String,
    /// Subject slots (0-based); the shape words when absent.
    pub subjects: Option<Vec<usize>>,
    pub boxes: Vec<LayoutEntry>,
    /// `false` runs the plain sampler.
    pub guided: bool,
    pub guidance: GuidanceConfig,
    pub sampler: SamplerConfig,
    pub seed: u64,
    pub out: PathBuf,
    pub heatmaps: bool,
}

impl Default for SampleRun {
    fn default() -> Self {
        Self {
            checkpoint: PathBuf::from("checkpoint"),
            prompt: "red circle and blue square".into(),
            subjects: None,
            boxes: Vec::new(),
            guided: true,
            guidance: GuidanceConfig::default(),
            sampler: SamplerConfig::default(),
            seed: 0,
            out: PathBuf::from("sample"),
            heatmaps: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConditionSpec {
    pub name: String,
    /// `None` is the unguided baseline.
    pub guidance: Option<GuidanceConfig>,
    pub use_layout: bool,
    /// Explicit per-condition seeds; must equal the shared list.
    pub seeds: Option<Vec<u64>>,
}

impl Default for ConditionSpec {
    fn default() -> Self {
        Self {
            name: "baseline".into(),
            guidance: None,
            use_layout: false,
            seeds: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalRun {
    pub checkpoint: PathBuf,
    pub conditions: Vec<ConditionSpec>,
    /// Number of paired seeds.
    pub seeds: usize,
    pub master_seed: u64,
    /// Give each case one half-canvas box per subject.
    pub boxes: bool,
    pub permutations: usize,
    pub test_seed: u64,
    pub sampler: SamplerConfig,
    pub out: PathBuf,
    pub save_images: bool,
}

impl Default for EvalRun {
    fn default() -> Self {
        Self {
            checkpoint: PathBuf::from("checkpoint"),
            conditions: vec![
                ConditionSpec::default(),
                ConditionSpec {
                    name: "guided".into(),
                    guidance: Some(GuidanceConfig::default()),
                    use_layout: true,
                    seeds: None,
                },
            ],
            seeds: 50,
            master_seed: 0,
            boxes: true,
            permutations: 10_000,
            test_seed: 0,
            sampler: SamplerConfig::default(),
            out: PathBuf::from("eval"),
            save_images: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExportRun {
    pub out: PathBuf,
    pub count: usize,
    pub shard_size: usize,
    pub seed: u64,
}

impl Default for ExportRun {
    fn default() -> Self {
        Self {
            out: PathBuf::from("dataset"),
            count: 1000,
            shard_size: 256,
            seed: 0,
        }
    }
}
