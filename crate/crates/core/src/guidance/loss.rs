use std::collections::BTreeSet;

use super::config::{box_to_patches, GuidanceConfig, LayoutSpec};
use crate::autodiff::{Element, Tensor, Var};
use crate::diffusion::AttentionMap;
use crate::error::{Error, Result};

/// Normalized `size x size` Gaussian kernel.
pub fn gaussian_kernel<E: Element>(size: usize, sigma: f64) -> Result<Tensor<E>> {
    if size % 2 == 0 {
        return Err(Error::param(format!("kernel size must be odd, got {size}")));
    }
    if !(sigma > 0.0) {
        return Err(Error::param(format!("sigma must be positive, got {sigma}")));
    }
    let c = (size / 2) as f64;
    let raw: Vec<f64> = (0..size * size)
        .map(|i| {
            let (u, v) = ((i / size) as f64 - c, (i % size) as f64 - c);
            (-(u * u + v * v) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    Tensor::new(
        vec![size, size],
        raw.into_iter().map(|v| E::of(v / total)).collect(),
    )
}

/// Gaussian smoothing of a `[grid, grid]` map with wrap padding.
pub fn smooth_map<'t, E: Element>(
    map: Var<'t, E>,
    sigma: f64,
    kernel_size: usize,
) -> Result<Var<'t, E>> {
    map.conv2d_wrap(&gaussian_kernel(kernel_size, sigma)?)
}

pub struct SemanticLoss<'t, E: Element> {
    /// `max_s (1 - max smooth(A_s))`.
    pub loss: Var<'t, E>,
    pub subjects: Vec<usize>,
    /// Per-subject `L_s`, in `subjects` order.
    pub per_subject: Vec<f64>,
    /// Per-subject smoothed maxes.
    pub maxes: Vec<f64>,
}

/// Subject-neglect loss of one sample of `maps`.
pub fn semantic_loss<'t, E: Element>(
    maps: &AttentionMap<'t, E>,
    sample: usize,
    subjects: &BTreeSet<usize>,
    cfg: &GuidanceConfig,
) -> Result<SemanticLoss<'t, E>> {
    if subjects.is_empty() {
        return Err(Error::param("semantic loss needs at least one subject"));
    }
    let tape = maps.var().tape();
    let mut terms = Vec::with_capacity(subjects.len());
    let mut maxes = Vec::with_capacity(subjects.len());
    for &s in subjects {
        let mut col = maps.column(sample, s)?;
        if cfg.smooth_semantic {
            col = smooth_map(col, cfg.sigma, cfg.kernel_size)?;
        }
        let m = col.reduce_max();
        maxes.push(m.item().as_f64());
        terms.push(m.neg().add_scalar(1.0));
    }
    let per_subject = terms.iter().map(|t| t.item().as_f64()).collect();
    let loss = if terms.len() == 1 {
        terms[0]
    } else {
        tape.concat(&terms)?.reduce_max()
    };
    Ok(SemanticLoss {
        loss,
        subjects: subjects.iter().copied().collect(),
        per_subject,
        maxes,
    })
}

pub struct LayoutEnergy<'t, E: Element> {
    /// Mean of the per-entry energies.
    pub energy: Var<'t, E>,
    pub per_entry: Vec<f64>,
    /// In-box mass fraction `r` per entry.
    pub ratios: Vec<f64>,
}

/// `(1 - r)^2` per layout entry, averaged, where `r` is the fraction of the
/// token's attention mass that lies in its box.
pub fn layout_energy<'t, E: Element>(
    maps: &AttentionMap<'t, E>,
    sample: usize,
    layout: &LayoutSpec,
    cfg: &GuidanceConfig,
) -> Result<LayoutEnergy<'t, E>> {
    if layout.is_empty() {
        return Err(Error::param("layout energy needs at least one box"));
    }
    let tape = maps.var().tape();
    let grid = maps.grid();
    let mut energies = Vec::with_capacity(layout.entries.len());
    let mut ratios = Vec::with_capacity(layout.entries.len());
    for e in &layout.entries {
        let mut col = maps.column(sample, e.token)?;
        if cfg.smooth_layout {
            col = smooth_map(col, cfg.sigma, cfg.kernel_size)?;
        }
        let flat = col.reshape(&[grid * grid])?;
        let total = flat.sum();
        if !(total.item().as_f64() > 0.0) {
            return Err(Error::Numeric(format!(
                "token {} has zero attention mass; layout ratio undefined",
                e.token
            )));
        }
        let patches = box_to_patches(&e.bbox, grid);
        let inside = flat.gather(&patches, &[patches.len()])?.sum();
        let r = inside.div(total)?;
        ratios.push(r.item().as_f64());
        energies.push(r.neg().add_scalar(1.0).square()?);
    }
    let per_entry = energies.iter().map(|v| v.item().as_f64()).collect();
    let energy = if energies.len() == 1 {
        energies[0]
    } else {
        tape.concat(&energies)?.mean()
    };
    Ok(LayoutEnergy {
        energy,
        per_entry,
        ratios,
    })
}

pub struct TotalLoss<'t, E: Element> {
    pub total: Var<'t, E>,
    pub semantic: Option<SemanticLoss<'t, E>>,
    pub layout: Option<LayoutEnergy<'t, E>>,
}

/// `lambda_sem * semantic + lambda_lay * layout`. A term is inactive when its
/// weight is zero or it has nothing to act on; inactive terms are left out.
pub fn total_loss<'t, E: Element>(
    maps: &AttentionMap<'t, E>,
    sample: usize,
    subjects: &BTreeSet<usize>,
    layout: Option<&LayoutSpec>,
    cfg: &GuidanceConfig,
) -> Result<TotalLoss<'t, E>> {
    let semantic = if cfg.lambda_sem > 0.0 && !subjects.is_empty() {
        Some(semantic_loss(maps, sample, subjects, cfg)?)
    } else {
        None
    };
    let layout = match layout {
        Some(l) if cfg.lambda_lay > 0.0 && !l.is_empty() => {
            Some(layout_energy(maps, sample, l, cfg)?)
        }
        _ => None,
    };
    let weighted = |v: Var<'t, E>, w: f64| if w == 1.0 { v } else { v.scale(w) };
    let total = match (&semantic, &layout) {
        (Some(s), Some(l)) => {
            weighted(s.loss, cfg.lambda_sem).add(weighted(l.energy, cfg.lambda_lay))?
        }
        (Some(s), None) => weighted(s.loss, cfg.lambda_sem),
        (None, Some(l)) => weighted(l.energy, cfg.lambda_lay),
        (None, None) => return Err(Error::param("guidance has no active loss term")),
    };
    Ok(TotalLoss {
        total,
        semantic,
        layout,
    })
}
