//! Terminal-step degeneracy probes. At the lowest-SNR end of each chain the
//! regression target a net was trained on stops depending on which data
//! sample it was paired with, so the learned prediction should collapse to a
//! closed form of the input alone. Each probe measures the mean relative
//! deviation from that form over a batch of states.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::sampler::{NoisePredictor, ScoreModel, VelocityModel};

use super::report::MetricRow;
use super::{dist, norm};

/// Result of one degeneracy probe: which terminal point it examined, the
/// mean of ‖prediction − closed form‖ / ‖closed form‖, and how many states
/// entered the mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollapseReport {
    probe: String,
    mean_relative_deviation: f64,
    samples: usize,
}

impl CollapseReport {
    pub fn probe(&self) -> &str {
        &self.probe
    }

    pub fn mean_relative_deviation(&self) -> f64 {
        self.mean_relative_deviation
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn rows(&self) -> Vec<MetricRow> {
        vec![MetricRow {
            metric: "collapse_deviation".into(),
            method: self.probe.clone(),
            d: None,
            n: Some(self.samples),
            value: self.mean_relative_deviation,
            stderr: None,
        }]
    }
}

fn check_batch(x: &Tensor, what: &str) -> Result<()> {
    if x.rows() == 0 || x.cols() == 0 {
        return Err(Error::invalid(format!("{what} batch is empty")));
    }
    if !x.is_finite() {
        return Err(Error::invalid(format!("{what} batch has non-finite entries")));
    }
    Ok(())
}

/// Mean over rows of ‖pred − target‖/‖target‖; a zero-norm target row makes
/// the relative deviation undefined and is rejected.
fn relative_deviation(probe: &str, pred: &Tensor, target: &Tensor) -> Result<CollapseReport> {
    if !pred.same_shape(target) {
        return Err(Error::shape(format!(
            "{probe}: prediction {}×{} against target {}×{}",
            pred.rows(),
            pred.cols(),
            target.rows(),
            target.cols()
        )));
    }
    let mut acc = 0.0;
    for i in 0..pred.rows() {
        let t = norm(target.row(i));
        if t == 0.0 {
            return Err(Error::invalid(format!(
                "{probe}: state {i} has a zero collapse target, relative deviation undefined"
            )));
        }
        acc += dist(pred.row(i), target.row(i)) / t;
    }
    Ok(CollapseReport {
        probe: probe.into(),
        mean_relative_deviation: acc / pred.rows() as f64,
        samples: pred.rows(),
    })
}

/// At the largest noise scale a score net no longer sees the data, only the
/// σ-widened blur around the data mean: prediction should equal
/// `(μ_q − x)/σ_N²`. Evaluates the model at `sigma_terminal` on `states`.
pub fn collapse_probe_ncsn(
    model: &impl ScoreModel,
    states: &Tensor,
    sigma_terminal: f64,
    mu_q: &[f64],
) -> Result<CollapseReport> {
    check_batch(states, "score probe")?;
    if !(sigma_terminal > 0.0) || !sigma_terminal.is_finite() {
        return Err(Error::invalid(format!(
            "terminal noise scale must be positive and finite, got {sigma_terminal}"
        )));
    }
    if mu_q.len() != states.cols() {
        return Err(Error::shape(format!(
            "data mean has dimension {}, states have {}",
            mu_q.len(),
            states.cols()
        )));
    }
    let pred = model.score(states, sigma_terminal)?;
    let inv = 1.0 / (sigma_terminal * sigma_terminal);
    let mut target = Tensor::zeros(states.rows(), states.cols());
    for i in 0..states.rows() {
        for (j, slot) in target.row_mut(i).iter_mut().enumerate() {
            *slot = (mu_q[j] - states.get(i, j)) * inv;
        }
    }
    relative_deviation("NCSN-sigma_N", &pred, &target)
}

/// At the last step of the variance-preserving chain the surviving signal is
/// negligible, so the noise prediction should collapse to `−x` (the state is
/// the noise). `t_norm` is the normalized step, 1 at the terminal step.
pub fn collapse_probe_ddpm(
    model: &impl NoisePredictor,
    states: &Tensor,
    t_norm: f64,
) -> Result<CollapseReport> {
    check_batch(states, "noise probe")?;
    if !(t_norm > 0.0 && t_norm <= 1.0) {
        return Err(Error::invalid(format!(
            "normalized step must lie in (0, 1], got {t_norm}"
        )));
    }
    let pred = model.noise_hat(states, t_norm)?;
    let target = states.map(|v| -v);
    relative_deviation("DDPM-t_N", &pred, &target)
}

/// At `t = 0` a velocity net trained under random pairing regresses against
/// every target sample at once, so its prediction should collapse to
/// `μ₁ − x₀`, pointing at the target mean.
pub fn collapse_probe_cfm(
    model: &impl VelocityModel,
    source: &Tensor,
    mu_1: &[f64],
) -> Result<CollapseReport> {
    check_batch(source, "velocity probe")?;
    if mu_1.len() != source.cols() {
        return Err(Error::shape(format!(
            "target mean has dimension {}, source has {}",
            mu_1.len(),
            source.cols()
        )));
    }
    let pred = model.velocity(source, 0.0)?;
    let mut target = Tensor::zeros(source.rows(), source.cols());
    for i in 0..source.rows() {
        for (j, slot) in target.row_mut(i).iter_mut().enumerate() {
            *slot = mu_1[j] - source.get(i, j);
        }
    }
    relative_deviation("CFM-t0", &pred, &target)
}
