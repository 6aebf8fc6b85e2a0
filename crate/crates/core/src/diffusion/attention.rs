use serde::{Deserialize, Serialize};

use crate::autodiff::{Element, Var};
use crate::error::{Error, Result};

/// Which attention weights were averaged into a map.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub blocks: Vec<usize>,
    pub heads: usize,
    pub smoothed: bool,
}

/// Cross-attention averaged over blocks and heads, `[B, patches, slots]`,
/// still on the tape so losses over it differentiate back to the sample.
#[derive(Clone)]
pub struct AttentionMap<'t, E: Element> {
    var: Var<'t, E>,
    batch: usize,
    grid: usize,
    slots: usize,
    pub provenance: Provenance,
}

impl<'t, E: Element> AttentionMap<'t, E> {
    pub fn new(var: Var<'t, E>, grid: usize, provenance: Provenance) -> Result<Self> {
        let s = var.shape();
        if s.len() != 3 || s[1] != grid * grid {
            return Err(Error::param(format!(
                "attention map must be [B, {}, S], got {s:?}",
                grid * grid
            )));
        }
        Ok(Self {
            var,
            batch: s[0],
            grid,
            slots: s[2],
            provenance,
        })
    }

    pub fn var(&self) -> Var<'t, E> {
        self.var
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    /// Spatial map of one token for one sample, `[grid, grid]`.
    pub fn column(&self, sample: usize, token: usize) -> Result<Var<'t, E>> {
        if sample >= self.batch || token >= self.slots {
            return Err(Error::param(format!(
                "column ({sample}, {token}) outside batch {} x slots {}",
                self.batch, self.slots
            )));
        }
        let cells = self.grid * self.grid;
        let base = sample * cells * self.slots;
        let idx: Vec<usize> = (0..cells).map(|p| base + p * self.slots + token).collect();
        self.var.gather(&idx, &[self.grid, self.grid])
    }

    /// Detached copy of one sample's map.
    pub fn snapshot(&self, sample: usize) -> AttentionSnapshot {
        let cells = self.grid * self.grid;
        let v = self.var.value();
        let values = v.data()[sample * cells * self.slots..][..cells * self.slots]
            .iter()
            .map(|x| x.as_f64() as f32)
            .collect();
        AttentionSnapshot {
            grid: self.grid,
            slots: self.slots,
            values,
            provenance: self.provenance.clone(),
        }
    }
}

/// Detached attention map: `values[patch * slots + token]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionSnapshot {
    pub grid: usize,
    pub slots: usize,
    pub values: Vec<f32>,
    pub provenance: Provenance,
}

impl AttentionSnapshot {
    pub fn column(&self, token: usize) -> Vec<f32> {
        (0..self.grid * self.grid)
            .map(|p| self.values[p * self.slots + token])
            .collect()
    }

    /// Per-patch sums across token slots.
    pub fn row_sums(&self) -> Vec<f32> {
        self.values
            .chunks(self.slots)
            .map(|r| r.iter().sum())
            .collect()
    }
}
