use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::config::{GuidanceConfig, LayoutSpec, Milestone};
use super::loss::{semantic_loss, total_loss};
use crate::autodiff::{Element, Tape, Tensor, Var};
use crate::diffusion::{DenoiserModel, PromptSpec};
use crate::error::{Error, Result};

/// Step size at a timestep with cumulative signal level `alpha_bar`.
pub fn alpha_t(cfg: &GuidanceConfig, alpha_bar: f64) -> f64 {
    cfg.alpha0 * (1.0 - alpha_bar).sqrt()
}

/// Whether sampling step `step` (1 = noisiest) of `total` is guided.
pub fn guidance_active(step: usize, total: usize, cfg: &GuidanceConfig) -> Result<bool> {
    if step < 1 || step > total {
        return Err(Error::param(format!("step {step} outside 1..={total}")));
    }
    Ok(step + cfg.t_end <= total + 1)
}

/// `z - alpha * dloss/dz`, as a fresh tensor.
pub fn latent_update<E: Element>(z: Var<'_, E>, loss: Var<'_, E>, alpha: f64) -> Result<Tensor<E>> {
    let grads = z.tape().backward(loss)?;
    let g = grads
        .get(&z)
        .ok_or_else(|| Error::contract("loss is not connected to the latent"))?;
    g.check_finite("latent gradient")?;
    let zv = z.value();
    if alpha == 0.0 {
        return Ok(zv.clone());
    }
    let a = E::of(alpha);
    let data = zv
        .data()
        .iter()
        .zip(g.data())
        .map(|(&x, &d)| x - a * d)
        .collect();
    Tensor::new(zv.shape().to_vec(), data)
}

/// Loss values observed at one latent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReadout {
    pub total: f64,
    pub semantic: Option<f64>,
    pub layout: Option<f64>,
    /// Smoothed max per subject position.
    pub subject_maxes: BTreeMap<usize, f64>,
    /// In-box attention ratio per layout entry.
    pub box_ratios: Vec<f64>,
}

/// One forward pass and one gradient step on the combined loss.
#[allow(clippy::too_many_arguments)]
pub fn guidance_step<E: Element>(
    model: &DenoiserModel<E>,
    z: &Tensor<E>,
    t: usize,
    prompt: &PromptSpec,
    layout: Option<&LayoutSpec>,
    cfg: &GuidanceConfig,
    alpha: f64,
) -> Result<(Tensor<E>, LossReadout)> {
    let tape = Tape::new();
    let zv = tape.var(z.clone());
    let out = model.forward(&tape, zv, t, prompt)?;
    let loss = total_loss(&out.maps, 0, &prompt.subject_positions, layout, cfg)?;
    let readout = LossReadout {
        total: loss.total.item().as_f64(),
        semantic: loss.semantic.as_ref().map(|s| s.loss.item().as_f64()),
        layout: loss.layout.as_ref().map(|l| l.energy.item().as_f64()),
        subject_maxes: loss
            .semantic
            .as_ref()
            .map(|s| {
                s.subjects
                    .iter()
                    .copied()
                    .zip(s.maxes.iter().copied())
                    .collect()
            })
            .unwrap_or_default(),
        box_ratios: loss
            .layout
            .as_ref()
            .map(|l| l.ratios.clone())
            .unwrap_or_default(),
    };
    Ok((latent_update(zv, loss.total, alpha)?, readout))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineReport {
    pub threshold: f64,
    /// Number of latent updates performed.
    pub iterations: usize,
    pub met: bool,
    /// Subject with the lowest smoothed max when the loop started.
    pub neglected: usize,
    pub start_maxes: BTreeMap<usize, f64>,
    pub end_maxes: BTreeMap<usize, f64>,
}

fn subject_maxes<E: Element>(
    model: &DenoiserModel<E>,
    z: &Tensor<E>,
    t: usize,
    prompt: &PromptSpec,
    cfg: &GuidanceConfig,
) -> Result<BTreeMap<usize, f64>> {
    let tape = Tape::new();
    let out = model.forward(&tape, tape.constant(z.clone()), t, prompt)?;
    let sem = semantic_loss(&out.maps, 0, &prompt.subject_positions, cfg)?;
    Ok(sem.subjects.into_iter().zip(sem.maxes).collect())
}

/// Repeats guidance updates until every subject's smoothed max reaches the
/// milestone threshold or `max_refine_iters` updates have been made.
#[allow(clippy::too_many_arguments)]
pub fn refine_latent<E: Element>(
    model: &DenoiserModel<E>,
    z: &Tensor<E>,
    t: usize,
    prompt: &PromptSpec,
    layout: Option<&LayoutSpec>,
    cfg: &GuidanceConfig,
    milestone: Milestone,
    alpha: f64,
) -> Result<(Tensor<E>, RefineReport)> {
    let mut z = z.clone();
    let start_maxes = subject_maxes(model, &z, t, prompt, cfg)?;
    let neglected = start_maxes
        .iter()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(&k, _)| k)
        .ok_or_else(|| Error::param("refinement needs at least one subject"))?;
    let mut maxes = start_maxes.clone();
    let mut iterations = 0;
    let met = loop {
        if maxes.values().all(|&m| m >= milestone.threshold) {
            break true;
        }
        if iterations == cfg.max_refine_iters {
            break false;
        }
        z = guidance_step(model, &z, t, prompt, layout, cfg, alpha)?.0;
        iterations += 1;
        maxes = subject_maxes(model, &z, t, prompt, cfg)?;
    };
    Ok((
        z,
        RefineReport {
            threshold: milestone.threshold,
            iterations,
            met,
            neglected,
            start_maxes,
            end_maxes: maxes,
        },
    ))
}

/// One record per guided sampling step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub t: usize,
    pub alpha_t: f64,
    pub losses: LossReadout,
    pub refinement: Option<RefineReport>,
}

pub fn write_trace<W: Write>(mut w: W, records: &[TraceRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_trace<R: BufRead>(r: R) -> Result<Vec<TraceRecord>> {
    r.lines()
        .filter(|l| l.as_ref().map_or(true, |s| !s.trim().is_empty()))
        .map(|l| Ok(serde_json::from_str(&l?)?))
        .collect()
}
