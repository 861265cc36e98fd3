//! Noise schedules: the variance-exploding power-law σ grid and the
//! variance-preserving linear-β ramp.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Variance-exploding schedule
/// `σ_t = (σ_max^{1/ρ} + t/(N−1)·(σ_min^{1/ρ} − σ_max^{1/ρ}))^ρ`
/// for step indices `t = 0 … N−1`; σ decreases from σ_max to σ_min.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VeSchedule {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    pub steps: usize,
}

impl VeSchedule {
    pub fn new(sigma_min: f64, sigma_max: f64, rho: f64, steps: usize) -> Result<Self> {
        if !(sigma_min > 0.0 && sigma_max > sigma_min) {
            return Err(Error::invalid(format!(
                "need 0 < σ_min < σ_max, got {sigma_min} and {sigma_max}"
            )));
        }
        if !(rho > 0.0) {
            return Err(Error::invalid(format!("need ρ > 0, got {rho}")));
        }
        if steps < 2 {
            return Err(Error::invalid(format!("need at least 2 steps, got {steps}")));
        }
        Ok(VeSchedule { sigma_min, sigma_max, rho, steps })
    }

    /// Common toy range: σ ∈ [0.002, 80] with ρ = 7.
    pub fn default_range(steps: usize) -> Result<Self> {
        VeSchedule::new(0.002, 80.0, 7.0, steps)
    }

    pub fn sigma(&self, t: usize) -> Result<f64> {
        if t >= self.steps {
            return Err(Error::invalid(format!(
                "step index {t} out of range 0..{}",
                self.steps
            )));
        }
        let inv = 1.0 / self.rho;
        let lo = self.sigma_min.powf(inv);
        let hi = self.sigma_max.powf(inv);
        let frac = t as f64 / (self.steps - 1) as f64;
        Ok((hi + frac * (lo - hi)).powf(self.rho))
    }

    /// All σ values, σ_max first.
    pub fn sigmas(&self) -> Vec<f64> {
        (0..self.steps).map(|t| self.sigma(t).expect("index in range")).collect()
    }

    /// σ values with a trailing 0, the grid deterministic samplers walk so
    /// the final state sits at zero noise.
    pub fn sigmas_with_zero(&self) -> Vec<f64> {
        let mut s = self.sigmas();
        s.push(0.0);
        s
    }
}

/// Variance-preserving schedule: β ramps linearly over `t = 1 … N` and
/// `α_t = Π_{i≤t} (1 − β_i)` decreases strictly. Accessors are 1-based to
/// match the usual diffusion-step convention.
#[derive(Clone, Debug, PartialEq)]
pub struct VpSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
}

impl VpSchedule {
    pub fn linear(beta_start: f64, beta_end: f64, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("need at least 1 step"));
        }
        if !(beta_start > 0.0 && beta_end > beta_start && beta_end < 1.0) {
            return Err(Error::invalid(format!(
                "need 0 < β_start < β_end < 1, got {beta_start} and {beta_end}"
            )));
        }
        let mut betas = Vec::with_capacity(steps);
        let mut alphas = Vec::with_capacity(steps);
        let mut alpha = 1.0;
        for i in 0..steps {
            let frac = if steps > 1 { i as f64 / (steps - 1) as f64 } else { 0.0 };
            let beta = beta_start + frac * (beta_end - beta_start);
            alpha *= 1.0 - beta;
            betas.push(beta);
            alphas.push(alpha);
        }
        Ok(VpSchedule { betas, alphas })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// β_t for `t ∈ 1..=N`.
    pub fn beta(&self, t: usize) -> f64 {
        assert!((1..=self.steps()).contains(&t), "β index {t} out of range");
        self.betas[t - 1]
    }

    /// α_t = Π_{i≤t}(1−β_i) for `t ∈ 1..=N`.
    pub fn alpha(&self, t: usize) -> f64 {
        assert!((1..=self.steps()).contains(&t), "α index {t} out of range");
        self.alphas[t - 1]
    }

    /// Conditioning value for step `t`: the index normalized to (0, 1].
    pub fn t_norm(&self, t: usize) -> f64 {
        assert!((1..=self.steps()).contains(&t), "step index {t} out of range");
        t as f64 / self.steps() as f64
    }
}
