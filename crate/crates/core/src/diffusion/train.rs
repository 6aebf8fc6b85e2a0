//! Noise-prediction training with Adam.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::model::DenoiserModel;
use super::prompt::PromptSpec;
use super::schedule::NoiseSchedule;
use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::scenes::{generate_scene, render, Example};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub warmup: usize,
    /// Cosine decay of the learning rate to 10% over the run.
    pub cosine_decay: bool,
    pub grad_clip: Option<f64>,
    /// Weight initialization seed.
    pub seed: u64,
    /// Seed of the data / timestep / noise stream.
    pub data_seed: u64,
    pub target_loss: f64,
    /// Keep an exponential moving average of the weights with this decay and
    /// return it as the trained model. Mid-run checkpoints see raw weights.
    pub ema_decay: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch: 64,
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            warmup: 0,
            cosine_decay: false,
            grad_clip: Some(1.0),
            seed: 0,
            data_seed: 1,
            target_loss: 0.05,
            ema_decay: None,
        }
    }
}

impl TrainConfig {
    fn lr_at(&self, step: usize) -> f64 {
        let warm = if self.warmup > 0 {
            ((step + 1) as f64 / self.warmup as f64).min(1.0)
        } else {
            1.0
        };
        let decay = if self.cosine_decay && self.steps > 1 {
            let p = step as f64 / (self.steps - 1) as f64;
            0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
        } else {
            1.0
        };
        self.lr * warm * decay
    }
}

/// Where training images come from.
#[derive(Debug, Clone, Copy)]
pub enum DataSource<'a> {
    /// Fresh random scenes every step.
    Synthetic,
    Fixed(&'a [Example]),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<f32>,
    /// Mean of the last (up to) 200 step losses.
    pub final_loss: Option<f64>,
    pub below_target: bool,
}

/// Moving average with a trailing window.
pub fn moving_average(xs: &[f32], window: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(xs.len());
    let mut acc = 0.0f64;
    for (i, &x) in xs.iter().enumerate() {
        acc += x as f64;
        if i >= window {
            acc -= xs[i - window] as f64;
        }
        out.push(acc / (i + 1).min(window) as f64);
    }
    out
}

struct Adam {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: i32,
}

/// One batch: noisy images, their noise, timesteps, prompts.
fn draw_batch(
    rng: &mut ChaCha8Rng,
    data: DataSource<'_>,
    sched: &NoiseSchedule,
    batch: usize,
) -> Result<(Tensor<f32>, Tensor<f32>, Vec<usize>, Vec<PromptSpec>)> {
    let mut noisy = Vec::new();
    let mut noise = Vec::new();
    let mut ts = Vec::with_capacity(batch);
    let mut prompts = Vec::with_capacity(batch);
    let mut shape = Vec::new();
    for _ in 0..batch {
        let (image, prompt) = match data {
            DataSource::Synthetic => {
                let (scene, prompt) = generate_scene(rng)?;
                (render(&scene), prompt)
            }
            DataSource::Fixed(examples) => {
                if examples.is_empty() {
                    return Err(Error::param("empty training set"));
                }
                let ex = &examples[rng.random_range(0..examples.len())];
                (ex.image.clone(), ex.prompt.clone())
            }
        };
        let t = rng.random_range(0..sched.t_train);
        let eps = Tensor::from_fn(image.shape(), |_| {
            let z: f64 = StandardNormal.sample(rng);
            z as f32
        });
        shape = image.shape().to_vec();
        noisy.extend_from_slice(sched.forward_diffuse(&image, t, &eps)?.data());
        noise.extend_from_slice(eps.data());
        ts.push(t);
        prompts.push(prompt);
    }
    let mut full = vec![batch];
    full.extend_from_slice(&shape);
    Ok((
        Tensor::new(full.clone(), noisy)?,
        Tensor::new(full, noise)?,
        ts,
        prompts,
    ))
}

/// Minimizes the noise-prediction MSE. `on_step` sees every step's loss and
/// the current weights (for checkpointing and logging).
pub fn train(
    model: &mut DenoiserModel<f32>,
    data: DataSource<'_>,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(usize, f32, &DenoiserModel<f32>) -> Result<()>,
) -> Result<TrainReport> {
    if cfg.batch == 0 {
        return Err(Error::param("batch size must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.data_seed);
    let sizes: Vec<usize> = model
        .weights
        .named()
        .iter()
        .map(|(_, t)| t.numel())
        .collect();
    let mut adam = Adam {
        m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        t: 0,
    };
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut ema = cfg.ema_decay.map(|_| model.weights.clone());

    for step in 0..cfg.steps {
        let (noisy, noise, ts, prompts) = draw_batch(&mut rng, data, sched, cfg.batch)?;
        let tape = Tape::<f32>::new();
        let w = model.bind(&tape, true);
        let refs: Vec<&PromptSpec> = prompts.iter().collect();
        let out = model.forward_batch(&w, tape.constant(noisy), &ts, &refs)?;
        let loss = out.eps.sub(tape.constant(noise))?.square()?.mean();
        let loss_value = loss.item();
        if !loss_value.is_finite() {
            let tail: Vec<_> = losses.iter().rev().take(5).rev().collect();
            return Err(Error::Numeric(format!(
                "training diverged at step {step}: loss {loss_value}, preceding losses {tail:?}"
            )));
        }
        let grads = tape.backward(loss)?;
        let bound = w.named();
        let gvec: Vec<Vec<f32>> = bound
            .iter()
            .map(|(_, v)| {
                grads
                    .get(v)
                    .map(|g| g.data().to_vec())
                    .unwrap_or_else(|| vec![0.0; v.numel()])
            })
            .collect();
        drop(bound);
        drop(w);
        drop(tape);

        let mut clip = 1.0f32;
        if let Some(max_norm) = cfg.grad_clip {
            let norm = gvec
                .iter()
                .flat_map(|g| g.iter())
                .map(|&x| (x as f64) * (x as f64))
                .sum::<f64>()
                .sqrt();
            if norm > max_norm {
                clip = (max_norm / norm) as f32;
            }
        }

        adam.t += 1;
        let lr = cfg.lr_at(step) as f32;
        let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
        let bc1 = 1.0 - b1.powi(adam.t);
        let bc2 = 1.0 - b2.powi(adam.t);
        let eps = cfg.adam_eps as f32;
        for (i, p) in model.weights.iter_mut().into_iter().enumerate() {
            let (m, v, g) = (&mut adam.m[i], &mut adam.v[i], &gvec[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g[j] * clip;
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + eps);
                *w -= lr * update;
            }
        }
        if let (Some(avg), Some(decay)) = (ema.as_mut(), cfg.ema_decay) {
            // short warmup so early weights do not dominate
            let d = decay.min((1 + step) as f64 / (10 + step) as f64) as f32;
            for (a, w) in avg.iter_mut().into_iter().zip(model.weights.iter_mut()) {
                for (x, &y) in a.data_mut().iter_mut().zip(w.data()) {
                    *x = d * *x + (1.0 - d) * y;
                }
            }
        }
        losses.push(loss_value);
        on_step(step, loss_value, model)?;
    }
    if let Some(avg) = ema {
        model.weights = avg;
    }

    let tail = &losses[losses.len().saturating_sub(200)..];
    let final_loss =
        (!tail.is_empty()).then(|| tail.iter().map(|&x| x as f64).sum::<f64>() / tail.len() as f64);
    let below_target = final_loss.is_some_and(|l| l < cfg.target_loss);
    if let Some(l) = final_loss {
        if !below_target {
            log::warn!(
                "final training loss {l:.4} is above the target {}",
                cfg.target_loss
            );
        }
    }
    Ok(TrainReport {
        losses,
        final_loss,
        below_target,
    })
}
