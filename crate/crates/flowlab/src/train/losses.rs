//! Loss builders. Each loss exists twice: as a differentiable graph and as a
//! plain evaluation sharing the same arithmetic, so values can be compared
//! bit for bit. Predictions go through [`NetModel`] interfaces, which is what
//! the samplers later evaluate, so training and inference always see the same
//! parameterisation.

use crate::error::{Error, Result};
use crate::nn::{Graph, GraphNet, Mlp, NodeId, Tensor};
use crate::pairing::ot_pair;
use crate::sampler::NetModel;
use crate::sched::VpSchedule;
use crate::train::config::LossNorm;

/// A loss node together with the graph and parameter bindings behind it.
pub struct LossGraph {
    pub graph: Graph,
    pub net: GraphNet,
    pub loss: NodeId,
}

impl LossGraph {
    pub fn value(&self) -> f64 {
        self.graph.value(self.loss).scalar_value()
    }

    pub fn backward(&mut self) -> Result<()> {
        self.graph.backward(self.loss)
    }

    /// Parameter gradients in [`Mlp::params`] order.
    pub fn grads(&self, mlp: &Mlp) -> Vec<Tensor> {
        mlp.collect_grads(&self.graph, &self.net)
    }
}

/// Regression data shared by the graph and pure loss routes: model inputs,
/// one conditioning value per row, targets, optional per-row weights, and an
/// optional per-row scale applied to the model output before the residual.
struct Prepared {
    x: Tensor,
    conds: Vec<f64>,
    target: Tensor,
    weights: Option<Vec<f64>>,
    out_scales: Option<Vec<f64>>,
}

fn expect_dims(model: &NetModel, d: usize, what: &str) -> Result<()> {
    if model.dim() != d {
        return Err(Error::shape(format!(
            "{what} got a {d}-wide batch for a {}-wide model",
            model.dim()
        )));
    }
    Ok(())
}

fn graph_loss<F>(model: &NetModel, prep: &Prepared, pred_of: F) -> Result<LossGraph>
where
    F: FnOnce(&NetModel, &mut Graph, &GraphNet, &Tensor, &[f64]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let bound = model.net().bind(&mut g);
    let mut pred = pred_of(model, &mut g, &bound, &prep.x, &prep.conds)?;
    if let Some(scales) = &prep.out_scales {
        pred = g.row_scale(pred, scales);
    }
    let tgt = g.input(prep.target.clone());
    let r = g.sub(pred, tgt);
    let loss = g.mean_row_sum_sq(r, prep.weights.as_deref());
    Ok(LossGraph { graph: g, net: bound, loss })
}

fn pure_loss(prep: &Prepared, mut pred: Tensor) -> f64 {
    if let Some(scales) = &prep.out_scales {
        for (i, &c) in scales.iter().enumerate() {
            for v in pred.row_mut(i) {
                *v *= c;
            }
        }
    }
    let n = pred.rows();
    let mut acc = 0.0;
    for i in 0..n {
        let w = prep.weights.as_ref().map_or(1.0, |w| w[i]);
        let row_sq: f64 = pred
            .row(i)
            .iter()
            .zip(prep.target.row(i))
            .map(|(p, t)| {
                let r = p - t;
                r * r
            })
            .sum();
        acc += w * row_sq;
    }
    acc / n as f64
}

fn prepare_dsm(x1: &Tensor, sigmas: &[f64], noise: &Tensor) -> Result<Prepared> {
    if !x1.same_shape(noise) {
        return Err(Error::shape("noise must match the target batch shape"));
    }
    if sigmas.len() != x1.rows() {
        return Err(Error::shape("one noise level per batch row"));
    }
    if sigmas.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::invalid("noise levels must be positive"));
    }
    let mut x = x1.clone();
    let mut target = Tensor::zeros(x1.rows(), x1.cols());
    for i in 0..x1.rows() {
        let s = sigmas[i];
        let inv = -1.0 / s;
        let xr = x.row_mut(i);
        for (j, v) in xr.iter_mut().enumerate() {
            *v += s * noise.get(i, j);
        }
        for (j, t) in target.row_mut(i).iter_mut().enumerate() {
            *t = inv * noise.get(i, j);
        }
    }
    let weights = sigmas.iter().map(|s| s * s).collect();
    Ok(Prepared {
        x,
        conds: sigmas.to_vec(),
        target,
        weights: Some(weights),
        out_scales: None,
    })
}

/// Denoising score matching: the score interface sees `x1 + sigma * eps` at
/// level `sigma` and regresses the conditional score `-eps / sigma`, weighted
/// by `sigma^2`.
pub fn dsm_loss(model: &NetModel, x1: &Tensor, sigmas: &[f64], noise: &Tensor) -> Result<LossGraph> {
    expect_dims(model, x1.cols(), "score matching")?;
    let prep = prepare_dsm(x1, sigmas, noise)?;
    graph_loss(model, &prep, |m, g, b, x, c| m.score_in_graph(g, b, x, c))
}

pub fn dsm_loss_value(model: &NetModel, x1: &Tensor, sigmas: &[f64], noise: &Tensor) -> Result<f64> {
    expect_dims(model, x1.cols(), "score matching")?;
    let prep = prepare_dsm(x1, sigmas, noise)?;
    let pred = model.score_per_row(&prep.x, &prep.conds)?;
    Ok(pure_loss(&prep, pred))
}

fn prepare_ddpm(vp: &VpSchedule, x1: &Tensor, ts: &[usize], noise: &Tensor) -> Result<Prepared> {
    if !x1.same_shape(noise) {
        return Err(Error::shape("noise must match the target batch shape"));
    }
    if ts.len() != x1.rows() {
        return Err(Error::shape("one timestep per batch row"));
    }
    for &t in ts {
        if t == 0 || t > vp.steps() {
            return Err(Error::invalid(format!(
                "timestep {t} outside 1..={}",
                vp.steps()
            )));
        }
    }
    let mut x = Tensor::zeros(x1.rows(), x1.cols());
    let mut target = Tensor::zeros(x1.rows(), x1.cols());
    let mut conds = Vec::with_capacity(ts.len());
    let mut weights = Vec::with_capacity(ts.len());
    let mut out_scales = Vec::with_capacity(ts.len());
    for i in 0..x1.rows() {
        let a = vp.alpha(ts[i]);
        let (root_a, var) = (a.sqrt(), 1.0 - a);
        let root_var = var.sqrt();
        let inv = -1.0 / root_var;
        for j in 0..x1.cols() {
            x.set(i, j, root_a * x1.get(i, j) + root_var * noise.get(i, j));
            target.set(i, j, inv * noise.get(i, j));
        }
        conds.push(vp.t_norm(ts[i]));
        weights.push(var);
        out_scales.push(inv);
    }
    Ok(Prepared {
        x,
        conds,
        target,
        weights: Some(weights),
        out_scales: Some(out_scales),
    })
}

/// Discrete-time denoising: the noise net sees `sqrt(a_t) x1 + sqrt(1-a_t) eps`
/// at normalised time `t/N`; its implied score `-net / sqrt(1-a_t)` regresses
/// the Gaussian score `-eps / sqrt(1-a_t)`, weighted by `1-a_t`.
pub fn ddpm_loss(
    model: &NetModel,
    vp: &VpSchedule,
    x1: &Tensor,
    ts: &[usize],
    noise: &Tensor,
) -> Result<LossGraph> {
    expect_dims(model, x1.cols(), "discrete denoising")?;
    let prep = prepare_ddpm(vp, x1, ts, noise)?;
    graph_loss(model, &prep, |m, g, b, x, c| m.noise_in_graph(g, b, x, c))
}

pub fn ddpm_loss_value(
    model: &NetModel,
    vp: &VpSchedule,
    x1: &Tensor,
    ts: &[usize],
    noise: &Tensor,
) -> Result<f64> {
    expect_dims(model, x1.cols(), "discrete denoising")?;
    let prep = prepare_ddpm(vp, x1, ts, noise)?;
    let pred = model.noise_per_row(&prep.x, &prep.conds)?;
    Ok(pure_loss(&prep, pred))
}

fn prepare_cfm(x0: &Tensor, x1: &Tensor, ts: &[f64]) -> Result<Prepared> {
    if !x0.same_shape(x1) {
        return Err(Error::shape("flow endpoints must share a shape"));
    }
    if ts.len() != x0.rows() {
        return Err(Error::shape("one time per batch row"));
    }
    if ts.iter().any(|&t| !(0.0..=1.0).contains(&t)) {
        return Err(Error::invalid("flow times must lie in [0, 1]"));
    }
    let mut x = Tensor::zeros(x0.rows(), x0.cols());
    let mut target = Tensor::zeros(x0.rows(), x0.cols());
    for i in 0..x0.rows() {
        let t = ts[i];
        for j in 0..x0.cols() {
            let (a, b) = (x0.get(i, j), x1.get(i, j));
            x.set(i, j, t * b + (1.0 - t) * a);
            target.set(i, j, b - a);
        }
    }
    Ok(Prepared {
        x,
        conds: ts.to_vec(),
        target,
        weights: None,
        out_scales: None,
    })
}

/// Flow matching: the velocity net sees the interpolation `t x1 + (1-t) x0`
/// at time `t` and regresses the straight-line velocity `x1 - x0`.
pub fn cfm_loss(model: &NetModel, x0: &Tensor, x1: &Tensor, ts: &[f64]) -> Result<LossGraph> {
    expect_dims(model, x0.cols(), "flow matching")?;
    let prep = prepare_cfm(x0, x1, ts)?;
    graph_loss(model, &prep, |m, g, b, x, c| m.velocity_in_graph(g, b, x, c))
}

pub fn cfm_loss_value(model: &NetModel, x0: &Tensor, x1: &Tensor, ts: &[f64]) -> Result<f64> {
    expect_dims(model, x0.cols(), "flow matching")?;
    let prep = prepare_cfm(x0, x1, ts)?;
    let pred = model.velocity_per_row(&prep.x, &prep.conds)?;
    Ok(pure_loss(&prep, pred))
}

/// Flow matching over the batch-optimal coupling: targets are re-paired by an
/// exact assignment before the flow-matching residual is taken.
pub fn bot_cfm_loss(model: &NetModel, src: &Tensor, tgt: &Tensor, ts: &[f64]) -> Result<LossGraph> {
    let (perm, _) = ot_pair(src, tgt)?;
    cfm_loss(model, src, &perm.apply_rows(tgt)?, ts)
}

pub fn bot_cfm_loss_value(model: &NetModel, src: &Tensor, tgt: &Tensor, ts: &[f64]) -> Result<f64> {
    let (perm, _) = ot_pair(src, tgt)?;
    cfm_loss_value(model, src, &perm.apply_rows(tgt)?, ts)
}

fn prepare_lines(x0: &Tensor, x1: &Tensor, sigmas: &[f64]) -> Result<Prepared> {
    if !x0.same_shape(x1) {
        return Err(Error::shape("pair halves must share a shape"));
    }
    if sigmas.len() != x0.rows() {
        return Err(Error::shape("one noise level per batch row"));
    }
    if sigmas.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::invalid("noise levels must be positive"));
    }
    let mut x = x1.clone();
    for i in 0..x0.rows() {
        let s = sigmas[i];
        for (v, a) in x.row_mut(i).iter_mut().zip(x0.row(i)) {
            *v += s * a;
        }
    }
    Ok(Prepared {
        x,
        conds: sigmas.to_vec(),
        target: x1.clone(),
        weights: None,
        out_scales: None,
    })
}

/// Endpoint regression along noise lines: the endpoint interface sees
/// `x1 + sigma * x0` for a coupled pair and regresses `x1` itself.
pub fn lines_loss(
    model: &NetModel,
    x0: &Tensor,
    x1: &Tensor,
    sigmas: &[f64],
    norm: LossNorm,
) -> Result<LossGraph> {
    expect_dims(model, x0.cols(), "endpoint regression")?;
    match norm {
        LossNorm::L2 => {
            let prep = prepare_lines(x0, x1, sigmas)?;
            graph_loss(model, &prep, |m, g, b, x, c| m.endpoint_in_graph(g, b, x, c))
        }
    }
}

pub fn lines_loss_value(
    model: &NetModel,
    x0: &Tensor,
    x1: &Tensor,
    sigmas: &[f64],
    norm: LossNorm,
) -> Result<f64> {
    expect_dims(model, x0.cols(), "endpoint regression")?;
    match norm {
        LossNorm::L2 => {
            let prep = prepare_lines(x0, x1, sigmas)?;
            let pred = model.endpoint_per_row(&prep.x, &prep.conds)?;
            Ok(pure_loss(&prep, pred))
        }
    }
}
