use serde::{Deserialize, Serialize};

use crate::diffusion::PromptSpec;
use crate::error::{Error, Result};

/// Refinement checkpoint: at sampling step `step`, iterate until every
/// subject's smoothed attention max reaches `threshold`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Milestone {
    pub step: usize,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    /// Base step size; the per-step size is `alpha0 * sqrt(1 - alpha_bar_t)`.
    pub alpha0: f64,
    /// Last sampling timestep (counting down from T) that is still guided.
    pub t_end: usize,
    pub sigma: f64,
    pub kernel_size: usize,
    pub lambda_sem: f64,
    pub lambda_lay: f64,
    pub milestones: Vec<Milestone>,
    pub max_refine_iters: usize,
    /// Whether the subject loss reads the Gaussian-smoothed map.
    pub smooth_semantic: bool,
    /// Whether the layout energy reads the Gaussian-smoothed map.
    pub smooth_layout: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            alpha0: 200.0,
            t_end: 25,
            sigma: 1.0,
            kernel_size: 3,
            lambda_sem: 1.0,
            lambda_lay: 1.0,
            milestones: vec![
                Milestone {
                    step: 1,
                    threshold: 0.10,
                },
                Milestone {
                    step: 10,
                    threshold: 0.30,
                },
                Milestone {
                    step: 20,
                    threshold: 0.50,
                },
            ],
            max_refine_iters: 20,
            smooth_semantic: true,
            smooth_layout: false,
        }
    }
}

impl GuidanceConfig {
    /// Checks the invariants against a sampler with `total_steps` steps.
    pub fn validate(&self, total_steps: usize) -> Result<()> {
        if !(self.alpha0 >= 0.0 && self.alpha0.is_finite()) {
            return Err(Error::param(format!(
                "alpha0 must be finite and >= 0, got {}",
                self.alpha0
            )));
        }
        if self.t_end < 1 || self.t_end > total_steps {
            return Err(Error::param(format!(
                "t_end must lie in 1..={total_steps}, got {}",
                self.t_end
            )));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::param(format!(
                "kernel_size must be odd, got {}",
                self.kernel_size
            )));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::param(format!(
                "sigma must be positive, got {}",
                self.sigma
            )));
        }
        if self.lambda_sem < 0.0 || self.lambda_lay < 0.0 {
            return Err(Error::param("loss weights must be non-negative"));
        }
        let mut prev = 0.0;
        for m in &self.milestones {
            if !(m.threshold > 0.0 && m.threshold < 1.0) {
                return Err(Error::param(format!(
                    "milestone threshold must lie in (0, 1), got {}",
                    m.threshold
                )));
            }
            if m.threshold < prev {
                return Err(Error::param("milestone thresholds must be non-decreasing"));
            }
            if m.step < 1 || m.step > total_steps {
                return Err(Error::param(format!(
                    "milestone step {} outside 1..={total_steps}",
                    m.step
                )));
            }
            prev = m.threshold;
        }
        Ok(())
    }

    pub fn milestone_at(&self, step: usize) -> Option<Milestone> {
        self.milestones.iter().copied().find(|m| m.step == step)
    }
}

/// Normalized box `(x0, y0, x1, y1)`, x to the right, y down.
pub type BBox = [f64; 4];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub token: usize,
    pub bbox: BBox,
}

/// Boxes that selected prompt tokens should concentrate their attention in.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LayoutSpec {
    pub entries: Vec<LayoutEntry>,
}

impl LayoutSpec {
    pub fn new(entries: Vec<LayoutEntry>, prompt: &PromptSpec) -> Result<Self> {
        let spec = Self { entries };
        spec.validate(prompt)?;
        Ok(spec)
    }

    pub fn validate(&self, prompt: &PromptSpec) -> Result<()> {
        for e in &self.entries {
            validate_box(&e.bbox)?;
            if !prompt.subject_positions.contains(&e.token) {
                return Err(Error::param(format!(
                    "box token {} is not a subject position {:?}",
                    e.token, prompt.subject_positions
                )));
            }
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub fn validate_box(b: &BBox) -> Result<()> {
    let [x0, y0, x1, y1] = *b;
    let ok = (0.0..=1.0).contains(&x0)
        && (0.0..=1.0).contains(&y0)
        && (0.0..=1.0).contains(&x1)
        && (0.0..=1.0).contains(&y1)
        && x0 < x1
        && y0 < y1;
    if ok {
        Ok(())
    } else {
        Err(Error::param(format!(
            "box {b:?} must satisfy 0 <= x0 < x1 <= 1 and 0 <= y0 < y1 <= 1"
        )))
    }
}

/// Row-major patch indices (`row * grid + col`) whose centers fall inside the
/// box; the patch nearest the box center if none do.
pub fn box_to_patches(b: &BBox, grid: usize) -> Vec<usize> {
    let [x0, y0, x1, y1] = *b;
    let center = |i: usize| (i as f64 + 0.5) / grid as f64;
    let mut out = Vec::new();
    for row in 0..grid {
        for col in 0..grid {
            let (cx, cy) = (center(col), center(row));
            if x0 <= cx && cx < x1 && y0 <= cy && cy < y1 {
                out.push(row * grid + col);
            }
        }
    }
    if out.is_empty() {
        let (bx, by) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0);
        let nearest = (0..grid * grid)
            .min_by(|&a, &b| {
                let d =
                    |p: usize| (center(p % grid) - bx).powi(2) + (center(p / grid) - by).powi(2);
                d(a).total_cmp(&d(b))
            })
            .expect("grid is non-empty");
        out.push(nearest);
    }
    out
}
