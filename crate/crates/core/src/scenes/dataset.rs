//! Dataset export: one tensor file per shard plus a JSON index of scenes.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scene::{generate_scene, render, Scene, CANVAS};
use crate::autodiff::io::{load_tensor, save_tensor};
use crate::autodiff::Tensor;
use crate::diffusion::PromptSpec;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub image: Tensor<f32>,
    pub prompt: PromptSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub shard: usize,
    pub offset: usize,
    pub scene: Scene,
    pub prompt: PromptSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub seed: u64,
    pub count: usize,
    pub shard_size: usize,
    pub records: Vec<Record>,
}

fn shard_stem(dir: &Path, shard: usize) -> std::path::PathBuf {
    dir.join(format!("shard_{shard:04}"))
}

pub fn export_dataset(
    dir: &Path,
    count: usize,
    shard_size: usize,
    seed: u64,
) -> Result<DatasetIndex> {
    if count == 0 || shard_size == 0 {
        return Err(Error::param(
            "dataset count and shard size must be positive",
        ));
    }
    fs::create_dir_all(dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(count);
    let pixels = CANVAS * CANVAS * 3;
    let mut buf = Vec::with_capacity(shard_size * pixels);
    let flush = |buf: &mut Vec<f32>, shard: usize| -> Result<()> {
        let n = buf.len() / pixels;
        let t = Tensor::new(vec![n, CANVAS, CANVAS, 3], std::mem::take(buf))?;
        save_tensor(&shard_stem(dir, shard), &t)
    };
    for i in 0..count {
        let (scene, prompt) = generate_scene(&mut rng)?;
        buf.extend_from_slice(render(&scene).data());
        records.push(Record {
            shard: i / shard_size,
            offset: i % shard_size,
            scene,
            prompt,
        });
        if (i + 1) % shard_size == 0 {
            flush(&mut buf, i / shard_size)?;
        }
    }
    if !buf.is_empty() {
        flush(&mut buf, count / shard_size)?;
    }
    let index = DatasetIndex {
        seed,
        count,
        shard_size,
        records,
    };
    fs::write(dir.join("index.json"), serde_json::to_vec_pretty(&index)?)?;
    Ok(index)
}

pub fn load_dataset(dir: &Path) -> Result<Vec<Example>> {
    let index: DatasetIndex = serde_json::from_slice(&fs::read(dir.join("index.json"))?)?;
    let mut shards: Vec<Option<Tensor<f32>>> = Vec::new();
    let pixels = CANVAS * CANVAS * 3;
    let mut out = Vec::with_capacity(index.records.len());
    for rec in &index.records {
        if shards.len() <= rec.shard {
            shards.resize(rec.shard + 1, None);
        }
        if shards[rec.shard].is_none() {
            shards[rec.shard] = Some(load_tensor(&shard_stem(dir, rec.shard))?);
        }
        let shard = shards[rec.shard].as_ref().expect("loaded above");
        let data = shard
            .data()
            .get(rec.offset * pixels..(rec.offset + 1) * pixels)
            .ok_or_else(|| Error::Numeric(format!("record offset {} beyond shard", rec.offset)))?;
        out.push(Example {
            image: Tensor::new(vec![CANVAS, CANVAS, 3], data.to_vec())?,
            prompt: rec.prompt.clone(),
        });
    }
    Ok(out)
}
