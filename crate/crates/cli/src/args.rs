use std::path::{Path, PathBuf};

use attnguide::guidance::LayoutEntry;
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

use crate::config::{EvalRun, ExportRun, SampleRun, TrainRun};
use crate::error::{usage, CliResult};

#[derive(Debug, Parser)]
#[command(
    name = "attnguide",
    version,
    about = "Attention-guided sampling on a toy diffusion model"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the denoiser and write a checkpoint.
    Train(TrainArgs),
    /// Draw one sample, with or without guidance.
    Sample(SampleArgs),
    /// Compare conditions over paired seeds.
    Eval(EvalArgs),
    /// Write a synthetic scene dataset to disk.
    ExportDataset(ExportArgs),
    /// Rerun a run manifest and check every output byte.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON config (a run manifest also works).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Optimizer steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Examples per step.
    #[arg(long)]
    pub batch: Option<usize>,
    /// Peak learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// RNG seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Exported dataset to train on instead of fresh random scenes.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    /// JSON config (a run manifest also works).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Vocabulary words, e.g. "red circle and blue square".
    #[arg(long)]
    pub prompt: Option<String>,
    /// Subject slots, 0-based, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub subjects: Option<Vec<usize>>,
    /// `slot:x0,y0,x1,y1` in normalized coordinates; repeatable.
    #[arg(long = "box", value_parser = parse_box)]
    pub boxes: Vec<LayoutEntry>,
    /// Guidance step scale; the step at t is alpha0 * sqrt(1 - abar_t).
    #[arg(long)]
    pub alpha0: Option<f64>,
    /// Guidance runs while the step countdown (T down to 1) is at least this.
    #[arg(long)]
    pub t_end: Option<usize>,
    /// Drop the refinement milestones.
    #[arg(long)]
    pub no_refine: bool,
    /// Plain sampler, no guidance at all.
    #[arg(long)]
    pub no_guidance: bool,
    /// RNG seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// JSON config (a run manifest also works).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Number of paired seeds.
    #[arg(long)]
    pub seeds: Option<usize>,
    /// Seed the per-case seeds are derived from.
    #[arg(long)]
    pub master_seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write every generated image.
    #[arg(long)]
    pub save_images: bool,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// JSON config (a run manifest also works).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of scenes.
    #[arg(long)]
    pub count: Option<usize>,
    /// RNG seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// The `run_manifest.json` to replay.
    pub manifest: PathBuf,
    /// Where the replayed outputs go.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn parse_box(s: &str) -> Result<LayoutEntry, String> {
    let (tok, coords) = s
        .split_once(':')
        .ok_or_else(|| format!("box {s:?} must look like slot:x0,y0,x1,y1"))?;
    let token = tok
        .trim()
        .parse()
        .map_err(|_| format!("bad slot in box {s:?}"))?;
    let v: Vec<f64> = coords
        .split(',')
        .map(|c| c.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| format!("bad coordinates in box {s:?}"))?;
    let bbox: [f64; 4] = v
        .try_into()
        .map_err(|_| format!("box {s:?} needs four coordinates"))?;
    attnguide::guidance::validate_box(&bbox).map_err(|e| e.to_string())?;
    Ok(LayoutEntry { token, bbox })
}

/// Reads a config file, accepting either a bare config or a run manifest.
pub fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    let mut value: serde_json::Value = serde_json::from_str(&text)?;
    if value.get("command").is_some() && value.get("config").is_some() {
        value = value["config"].take();
    }
    Ok(serde_json::from_value(value)?)
}

impl TrainArgs {
    pub fn resolve(&self) -> CliResult<TrainRun> {
        let mut c: TrainRun = load_config(self.config.as_deref())?;
        if let Some(v) = self.steps {
            c.train.steps = v;
        }
        if let Some(v) = self.batch {
            c.train.batch = v;
        }
        if let Some(v) = self.lr {
            c.train.lr = v;
        }
        if let Some(v) = self.seed {
            c.train.seed = v;
        }
        if let Some(v) = &self.dataset {
            c.dataset = Some(v.clone());
        }
        if let Some(v) = &self.out {
            c.out = v.clone();
        }
        Ok(c)
    }
}

impl SampleArgs {
    pub fn resolve(&self) -> CliResult<SampleRun> {
        let mut c: SampleRun = load_config(self.config.as_deref())?;
        if let Some(v) = &self.checkpoint {
            c.checkpoint = v.clone();
        }
        if let Some(v) = &self.prompt {
            c.prompt = v.clone();
        }
        if let Some(v) = &self.subjects {
            c.subjects = Some(v.clone());
        }
        if !self.boxes.is_empty() {
            c.boxes = self.boxes.clone();
        }
        if let Some(v) = self.alpha0 {
            c.guidance.alpha0 = v;
        }
        if let Some(v) = self.t_end {
            c.guidance.t_end = v;
        }
        if self.no_refine {
            c.guidance.milestones.clear();
        }
        if self.no_guidance {
            c.guided = false;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = &self.out {
            c.out = v.clone();
        }
        Ok(c)
    }
}

impl EvalArgs {
    pub fn resolve(&self) -> CliResult<EvalRun> {
        let mut c: EvalRun = load_config(self.config.as_deref())?;
        if let Some(v) = &self.checkpoint {
            c.checkpoint = v.clone();
        }
        if let Some(v) = self.seeds {
            c.seeds = v;
        }
        if let Some(v) = self.master_seed {
            c.master_seed = v;
        }
        if let Some(v) = &self.out {
            c.out = v.clone();
        }
        if self.save_images {
            c.save_images = true;
        }
        Ok(c)
    }
}

impl ExportArgs {
    pub fn resolve(&self) -> CliResult<ExportRun> {
        let mut c: ExportRun = load_config(self.config.as_deref())?;
        if let Some(v) = self.count {
            c.count = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = &self.out {
            c.out = v.clone();
        }
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_syntax() {
        let b = parse_box("4:0.5,0,1,1").unwrap();
        assert_eq!((b.token, b.bbox), (4, [0.5, 0.0, 1.0, 1.0]));
        assert!(parse_box("4:0.5,0,1").is_err());
        assert!(parse_box("0.5,0,1,1").is_err());
        assert!(parse_box("x:0,0,1,1").is_err());
        assert!(parse_box("1:0.8,0,0.2,1").is_err());
        assert!(parse_box("1:0,0,1.5,1").is_err());
    }

    #[test]
    fn configs_load_bare_or_from_manifest() {
        let dir = tempfile::TempDir::new().unwrap();
        let bare = dir.path().join("bare.json");
        std::fs::write(&bare, r#"{"count": 7}"#).unwrap();
        let c: ExportRun = load_config(Some(&bare)).unwrap();
        assert_eq!(c.count, 7);
        let wrapped = dir.path().join("m.json");
        std::fs::write(
            &wrapped,
            r#"{"command": "export-dataset", "config": {"seed": 9}}"#,
        )
        .unwrap();
        let c: ExportRun = load_config(Some(&wrapped)).unwrap();
        assert_eq!((c.seed, c.count), (9, 1000));
        std::fs::write(&bare, r#"{"cuont": 7}"#).unwrap();
        assert!(matches!(
            load_config::<ExportRun>(Some(&bare)),
            Err(crate::CliError::Usage(_))
        ));
    }

    #[test]
    fn flags_override_config() {
        let cli = Cli::try_parse_from([
            "attnguide",
            "sample",
            "--alpha0",
            "0",
            "--no-refine",
            "--box",
            "1:0,0,0.5,1",
        ])
        .unwrap();
        let Command::Sample(a) = cli.command else {
            panic!("parsed {cli:?}")
        };
        let run = a.resolve().unwrap();
        assert_eq!(run.guidance.alpha0, 0.0);
        assert!(run.guidance.milestones.is_empty());
        assert_eq!(run.boxes.len(), 1);
    }
}
