use serde::{Deserialize, Serialize};

use crate::autodiff::{Element, Tensor};
use crate::error::{Error, Result};

/// Linear-beta noise schedule over the training timesteps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub t_train: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    #[serde(skip)]
    betas: Vec<f64>,
    #[serde(skip)]
    alpha_bar: Vec<f64>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::new(1000, 1e-4, 0.02).expect("default schedule is valid")
    }
}

impl NoiseSchedule {
    pub fn new(t_train: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_train < 2 {
            return Err(Error::param(format!("t_train must be >= 2, got {t_train}")));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::param(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let betas: Vec<f64> = (0..t_train)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t_train - 1) as f64)
            .collect();
        let mut alpha_bar = Vec::with_capacity(t_train);
        let mut acc = 1.0;
        for &b in &betas {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        Ok(Self {
            t_train,
            beta_start,
            beta_end,
            betas,
            alpha_bar,
        })
    }

    /// Rebuilds the derived tables after deserialization.
    pub fn rebuild(&self) -> Result<Self> {
        Self::new(self.t_train, self.beta_start, self.beta_end)
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> Vec<f64> {
        self.betas.iter().map(|b| 1.0 - b).collect()
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.t_train {
            Err(Error::param(format!(
                "timestep {t} outside 0..{}",
                self.t_train
            )))
        } else {
            Ok(())
        }
    }

    /// `sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps`.
    pub fn forward_diffuse<E: Element>(
        &self,
        x0: &Tensor<E>,
        t: usize,
        eps: &Tensor<E>,
    ) -> Result<Tensor<E>> {
        self.check_t(t)?;
        mix(x0, eps, self.alpha_bar[t])
    }
}

/// Noise mix at an explicit `abar`, exposed for the boundary cases.
pub fn mix<E: Element>(x0: &Tensor<E>, eps: &Tensor<E>, alpha_bar: f64) -> Result<Tensor<E>> {
    if x0.shape() != eps.shape() {
        return Err(Error::Dimension {
            op: "forward_diffuse",
            lhs: x0.shape().to_vec(),
            rhs: eps.shape().to_vec(),
        });
    }
    let (a, s) = (E::of(alpha_bar.sqrt()), E::of((1.0 - alpha_bar).sqrt()));
    let data = x0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&x, &e)| a * x + s * e)
        .collect();
    Tensor::new(x0.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schedule_endpoints() {
        let s = NoiseSchedule::new(1000, 1e-4, 0.02).unwrap();
        assert!((s.alpha_bar(0) - 0.9999).abs() < 1e-15);
        // direct product oracle
        let mut prod = 1.0f64;
        for i in 0..1000 {
            prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0);
        }
        assert!((s.alpha_bar(999) - prod).abs() < 1e-15);
        assert!(s.alpha_bar(999) < 0.01 && s.alpha_bar(0) > 0.99);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert!(s.betas().windows(2).all(|w| w[1] >= w[0]));
        assert!(s.betas().iter().all(|&b| 0.0 < b && b < 1.0));
    }

    #[test]
    fn invalid_bounds_are_rejected() {
        assert!(NoiseSchedule::new(1, 1e-4, 0.02).is_err());
        assert!(NoiseSchedule::new(10, 0.0, 0.02).is_err());
        assert!(NoiseSchedule::new(10, 0.03, 0.02).is_err());
        assert!(NoiseSchedule::new(10, 1e-4, 1.0).is_err());
    }

    #[test]
    fn forward_diffuse_boundaries() {
        let x0 = Tensor::from_fn(&[2, 2, 3], |i| (i as f64 * 0.37).sin());
        let eps = Tensor::from_fn(&[2, 2, 3], |i| (i as f64 * 1.3).cos());
        assert_eq!(mix(&x0, &eps, 1.0).unwrap(), x0);
        assert_eq!(mix(&x0, &eps, 0.0).unwrap(), eps);

        let s = NoiseSchedule::default();
        let out = s.forward_diffuse(&x0, 500, &eps).unwrap();
        let ab = s.alpha_bar(500);
        for i in 0..x0.numel() {
            let want = ab.sqrt() * x0.data()[i] + (1.0 - ab).sqrt() * eps.data()[i];
            assert!((out.data()[i] - want).abs() < 1e-15);
        }
        assert!(s.forward_diffuse(&x0, 1000, &eps).is_err());
    }
}
