use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use attnguide::autodiff::io::save_tensor;
use attnguide::diffusion::checkpoint::{load_checkpoint, save_checkpoint};
use attnguide::diffusion::{train as train_model, DataSource, TrainReport};
use attnguide::eval::{build_report, make_case, run_conditions, Condition, EvalReport};
use attnguide::guidance::write_trace;
use attnguide::imageio::{write_heatmap, write_image};
use attnguide::sampler::{derive_seed, worker_count, Sampler};
use attnguide::scenes::{export_dataset, load_dataset, DatasetIndex};
use attnguide::{DenoiserModel, LayoutSpec, NoiseSchedule, PromptSpec, Tensor, Token};
use serde::Serialize;

use crate::config::{EvalRun, ExportRun, SampleRun, TrainRun};
use crate::error::{usage, CliResult};
use crate::manifest::{digest_outputs, RunManifest, MANIFEST_NAME};

const VERSION: &str = env!("CARGO_PKG_VERSION");

fn finish(
    command: &str,
    config: &impl Serialize,
    seeds: BTreeMap<String, u64>,
    out: &Path,
) -> CliResult<RunManifest> {
    let mut config = serde_json::to_value(config)?;
    // the output directory is where the run lands, not part of what it computes
    if let Some(obj) = config.as_object_mut() {
        obj.remove("out");
    }
    let manifest = RunManifest {
        command: command.to_string(),
        code_version: VERSION.to_string(),
        config,
        seeds,
        outputs: digest_outputs(out)?,
    };
    manifest.write(out)?;
    Ok(manifest)
}

fn write_lines<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> CliResult<()> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, &item)?;
        buf.push(b'\n');
    }
    fs::write(path, buf)?;
    Ok(())
}

fn load_model(path: &Path) -> CliResult<(DenoiserModel<f32>, NoiseSchedule)> {
    if !path.join("manifest.json").is_file() {
        return Err(usage(format!("no checkpoint at {}", path.display())));
    }
    let (model, manifest) = load_checkpoint::<f32>(path)?;
    Ok((model, manifest.schedule))
}

pub struct TrainOutcome {
    pub report: TrainReport,
    pub manifest: RunManifest,
}

pub fn train(cfg: &TrainRun) -> CliResult<TrainOutcome> {
    let examples = match &cfg.dataset {
        Some(dir) if !dir.join("index.json").is_file() => {
            return Err(usage(format!("dataset not found at {}", dir.display())));
        }
        Some(dir) => Some(load_dataset(dir)?),
        None => None,
    };
    let data = examples
        .as_deref()
        .map_or(DataSource::Synthetic, DataSource::Fixed);
    let schedule = NoiseSchedule::new(
        cfg.schedule.t_train,
        cfg.schedule.beta_start,
        cfg.schedule.beta_end,
    )?;
    let mut model = DenoiserModel::<f32>::init(cfg.model, cfg.train.seed)?;
    fs::create_dir_all(&cfg.out)?;
    let seeds: BTreeMap<String, u64> = [
        ("init".to_string(), cfg.train.seed),
        ("data".to_string(), cfg.train.data_seed),
    ]
    .into();
    let training = serde_json::to_value(&cfg.train)?;
    let report = train_model(&mut model, data, &schedule, &cfg.train, |step, loss, m| {
        if (step + 1) % 100 == 0 {
            log::info!("step {} loss {loss:.5}", step + 1);
        }
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
            let dir = cfg.out.join(format!("step_{:06}", step + 1));
            save_checkpoint(&dir, m, &schedule, training.clone(), seeds.clone())?;
        }
        Ok(())
    })?;
    save_checkpoint(&cfg.out, &model, &schedule, training, seeds.clone())?;
    let mut curve = String::new();
    for l in &report.losses {
        curve.push_str(&format!("{l}\n"));
    }
    fs::write(cfg.out.join("losses.txt"), curve)?;
    let manifest = finish("train", cfg, seeds, &cfg.out)?;
    Ok(TrainOutcome { report, manifest })
}

pub struct SampleOutcome {
    pub guided_steps: usize,
    pub image: Tensor<f32>,
    pub manifest: RunManifest,
}

pub fn sample(cfg: &SampleRun) -> CliResult<SampleOutcome> {
    let mut prompt = PromptSpec::parse(&cfg.prompt)?;
    if let Some(s) = &cfg.subjects {
        prompt = prompt.with_subjects(s.iter().copied())?;
    }
    let layout = if cfg.boxes.is_empty() {
        None
    } else {
        Some(LayoutSpec::new(cfg.boxes.clone(), &prompt)?)
    };
    let (model, schedule) = load_model(&cfg.checkpoint)?;
    let guidance = cfg.guided.then_some(&cfg.guidance);
    let sampler = Sampler::new(
        &model,
        &schedule,
        &prompt,
        layout.as_ref(),
        guidance,
        cfg.sampler.clone(),
    )?;
    let out = sampler.run(cfg.seed)?;

    fs::create_dir_all(&cfg.out)?;
    write_image(&out.image, &cfg.out.join("image.ppm"))?;
    let mut trace = fs::File::create(cfg.out.join("trace.jsonl"))?;
    write_trace(&mut trace, &out.trace)?;
    trace.flush()?;
    write_lines(&cfg.out.join("stats.jsonl"), &out.stats)?;
    if cfg.heatmaps && !out.maps.is_empty() {
        let heat = cfg.out.join("heatmaps");
        let dumps = cfg.out.join("maps");
        fs::create_dir_all(&heat)?;
        fs::create_dir_all(&dumps)?;
        let tokens = prompt.tokens();
        for (step, snap) in &out.maps {
            let t = Tensor::new(vec![snap.grid, snap.grid, snap.slots], snap.values.clone())?;
            save_tensor(&dumps.join(format!("step_{step:02}")), &t)?;
            for (slot, tok) in tokens.iter().enumerate() {
                if *tok == Token::Pad {
                    continue;
                }
                let name = format!("step_{step:02}_slot{slot}_{}.ppm", tok.word());
                write_heatmap(&snap.column(slot), snap.grid, &heat.join(name))?;
            }
        }
    }
    let seeds = [("sample".to_string(), cfg.seed)].into();
    let manifest = finish("sample", cfg, seeds, &cfg.out)?;
    Ok(SampleOutcome {
        guided_steps: out.trace.len(),
        image: out.image,
        manifest,
    })
}

/// Shared seed list for all conditions; explicit per-condition lists must agree.
pub fn resolve_seeds(cfg: &EvalRun) -> CliResult<Vec<u64>> {
    let shared = cfg
        .conditions
        .iter()
        .find_map(|c| c.seeds.clone())
        .unwrap_or_else(|| {
            (0..cfg.seeds as u64)
                .map(|i| derive_seed(cfg.master_seed, i))
                .collect()
        });
    for c in &cfg.conditions {
        if let Some(s) = &c.seeds {
            if *s != shared {
                return Err(usage(format!(
                    "condition {:?} has a different seed list; conditions must be paired",
                    c.name
                )));
            }
        }
    }
    if shared.is_empty() {
        return Err(usage("evaluation needs at least one seed"));
    }
    Ok(shared)
}

pub struct EvalOutcome {
    pub report: EvalReport,
    pub manifest: RunManifest,
}

pub fn eval(cfg: &EvalRun) -> CliResult<EvalOutcome> {
    if cfg.conditions.len() < 2 {
        return Err(usage(
            "evaluation needs a baseline and at least one other condition",
        ));
    }
    let mut names = std::collections::BTreeSet::new();
    for c in &cfg.conditions {
        if !names.insert(&c.name) {
            return Err(usage(format!("duplicate condition name {:?}", c.name)));
        }
        if let Some(g) = &c.guidance {
            g.validate(cfg.sampler.steps)?;
        }
    }
    let seeds = resolve_seeds(cfg)?;
    let (model, schedule) = load_model(&cfg.checkpoint)?;
    let cases = seeds
        .iter()
        .map(|&s| make_case(s, cfg.boxes))
        .collect::<Result<Vec<_>, _>>()?;
    let conditions: Vec<Condition> = cfg
        .conditions
        .iter()
        .map(|c| Condition {
            name: c.name.clone(),
            guidance: c.guidance.clone(),
            use_layout: c.use_layout,
        })
        .collect();
    let runs = run_conditions(
        &model,
        &schedule,
        &conditions,
        &cases,
        &seeds,
        &cfg.sampler,
        worker_count(),
    )?;
    let report = build_report(&runs, &seeds, cfg.permutations, cfg.test_seed)?;

    fs::create_dir_all(&cfg.out)?;
    fs::write(
        cfg.out.join("report.json"),
        serde_json::to_vec_pretty(&report)?,
    )?;
    fs::write(cfg.out.join("report.txt"), report.table())?;
    #[derive(Serialize)]
    struct Row<'a> {
        condition: &'a str,
        seed: u64,
        prompt: String,
        #[serde(flatten)]
        judgement: &'a attnguide::eval::Judgement,
    }
    let mut rows = Vec::new();
    for run in &runs {
        for (i, j) in run.judgements.iter().enumerate() {
            rows.push(Row {
                condition: &run.condition.name,
                seed: seeds[i],
                prompt: cases[i].prompt.text(),
                judgement: j,
            });
        }
    }
    write_lines(&cfg.out.join("judgements.jsonl"), &rows)?;
    if cfg.save_images {
        for run in &runs {
            let dir = cfg.out.join("images").join(&run.condition.name);
            fs::create_dir_all(&dir)?;
            for (i, img) in run.images.iter().enumerate() {
                write_image(img, &dir.join(format!("{i:04}.ppm")))?;
            }
        }
    }
    let seed_map = [
        ("master".to_string(), cfg.master_seed),
        ("test".to_string(), cfg.test_seed),
    ]
    .into();
    let manifest = finish("eval", cfg, seed_map, &cfg.out)?;
    Ok(EvalOutcome { report, manifest })
}

pub fn export(cfg: &ExportRun) -> CliResult<DatasetIndex> {
    let index = export_dataset(&cfg.out, cfg.count, cfg.shard_size, cfg.seed)?;
    finish(
        "export-dataset",
        cfg,
        [("scenes".to_string(), cfg.seed)].into(),
        &cfg.out,
    )?;
    Ok(index)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayOutcome {
    /// Files whose digest differs from, or is missing in, the replay.
    pub mismatched: Vec<String>,
    pub manifest: RunManifest,
}

/// Reruns a manifest's config into `out` and compares output digests.
pub fn replay(manifest_path: &Path, out: PathBuf) -> CliResult<ReplayOutcome> {
    let original = RunManifest::read(manifest_path)?;
    let mut config = original.config.clone();
    if let Some(obj) = config.as_object_mut() {
        obj.insert("out".into(), serde_json::to_value(&out)?);
    }
    let fresh = match original.command.as_str() {
        "train" => train(&serde_json::from_value(config)?)?.manifest,
        "sample" => sample(&serde_json::from_value(config)?)?.manifest,
        "eval" => eval(&serde_json::from_value(config)?)?.manifest,
        "export-dataset" => {
            export(&serde_json::from_value(config)?)?;
            RunManifest::read(&out.join(MANIFEST_NAME))?
        }
        other => return Err(usage(format!("unknown command {other:?} in manifest"))),
    };
    let mut mismatched: Vec<String> = original
        .outputs
        .iter()
        .filter(|(k, v)| fresh.outputs.get(*k) != Some(v))
        .map(|(k, _)| k.clone())
        .collect();
    mismatched.extend(
        fresh
            .outputs
            .keys()
            .filter(|k| !original.outputs.contains_key(*k))
            .cloned(),
    );
    Ok(ReplayOutcome {
        mismatched,
        manifest: fresh,
    })
}
