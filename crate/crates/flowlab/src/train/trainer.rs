//! The training loop: batch drawing, loss dispatch, optimisation, curves.

use std::io::Write;
use std::path::Path;

use crate::dist::{sample_mixture, MixtureSpec, Rng};
use crate::error::{Error, Result};
use crate::nn::{AdamConfig, Graph, Mlp, OptState, Tensor};
use crate::pairing::PairDataset;
use crate::sampler::{ModelKind, NetModel};
use crate::sched::{VeSchedule, VpSchedule};
use crate::train::config::{Method, TrainConfig};
use crate::train::losses::{
    bot_cfm_loss, cfm_loss, ddpm_loss, dsm_loss, lines_loss, LossGraph,
};

/// Stream labels for the trainer's random draws, fixed so a seed fully
/// determines a run.
const DATA_STREAM: u64 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub iter: u64,
    pub loss: f64,
    pub disc_loss: Option<f64>,
    pub lambda: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: NetModel,
    pub curve: Vec<CurvePoint>,
}

/// The model interface each method trains through.
pub fn required_kind(method: Method) -> ModelKind {
    match method {
        Method::Dsm => ModelKind::Score,
        Method::Ddpm => ModelKind::Noise,
        Method::Cfm | Method::BotCfm => ModelKind::Velocity,
        Method::Lmm => ModelKind::Endpoint,
    }
}

/// Writes `iter,loss[,disc_loss,lambda_adapt]` rows. The adversarial columns
/// appear when any point carries them.
pub fn write_curve_csv(path: impl AsRef<Path>, curve: &[CurvePoint]) -> Result<()> {
    let adversarial = curve.iter().any(|p| p.disc_loss.is_some());
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    if adversarial {
        writeln!(out, "iter,loss,disc_loss,lambda_adapt")?;
        for p in curve {
            writeln!(
                out,
                "{},{},{},{}",
                p.iter,
                p.loss,
                p.disc_loss.unwrap_or(f64::NAN),
                p.lambda.unwrap_or(f64::NAN)
            )?;
        }
    } else {
        writeln!(out, "iter,loss")?;
        for p in curve {
            writeln!(out, "{},{}", p.iter, p.loss)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Where training examples come from.
pub enum DataSource<'a> {
    /// Fresh target draws every batch; sources (where needed) are fresh unit
    /// normals, so flow methods see the independent coupling.
    Mixture(&'a MixtureSpec),
    /// Coupled records sampled with replacement.
    Pairs(&'a PairDataset),
    /// Fixed coupled arrays sampled with replacement (row `i` of `x0` belongs
    /// to row `i` of `x1`).
    Coupled { x0: &'a Tensor, x1: &'a Tensor },
}

impl DataSource<'_> {
    pub fn dim(&self) -> usize {
        match self {
            DataSource::Mixture(spec) => spec.dim,
            DataSource::Pairs(ds) => ds.dim(),
            DataSource::Coupled { x0, .. } => x0.cols(),
        }
    }

    fn validate(&self) -> Result<()> {
        if let DataSource::Coupled { x0, x1 } = self {
            if !x0.same_shape(x1) {
                return Err(Error::shape("coupled arrays must share a shape"));
            }
            if x0.rows() == 0 {
                return Err(Error::invalid("coupled arrays cannot be empty"));
            }
        }
        if let DataSource::Pairs(ds) = self {
            if ds.is_empty() {
                return Err(Error::invalid("pair dataset cannot be empty"));
            }
        }
        Ok(())
    }

    /// Coupled batch `(x0, x1)`. The mixture source draws `x1` first, then
    /// `x0`, so the draw order is part of the determinism contract.
    fn draw_coupled(&self, n: usize, rng: &mut Rng) -> Result<(Tensor, Tensor)> {
        match self {
            DataSource::Mixture(spec) => {
                let x1 = sample_mixture(spec, n, rng);
                let mut x0 = Tensor::zeros(n, spec.dim);
                rng.fill_standard_normal(x0.data_mut());
                Ok((x0, x1))
            }
            DataSource::Pairs(ds) => {
                let indices: Vec<usize> = (0..n).map(|_| rng.index(ds.len())).collect();
                ds.gather(&indices)
            }
            DataSource::Coupled { x0, x1 } => {
                let rows = x0.rows();
                let mut a = Tensor::zeros(n, x0.cols());
                let mut b = Tensor::zeros(n, x0.cols());
                for r in 0..n {
                    let i = rng.index(rows);
                    a.row_mut(r).copy_from_slice(x0.row(i));
                    b.row_mut(r).copy_from_slice(x1.row(i));
                }
                Ok((a, b))
            }
        }
    }

    /// Target-only batch for denoising methods.
    fn draw_targets(&self, n: usize, rng: &mut Rng) -> Result<Tensor> {
        match self {
            DataSource::Mixture(spec) => Ok(sample_mixture(spec, n, rng)),
            DataSource::Pairs(ds) => {
                let indices: Vec<usize> = (0..n).map(|_| rng.index(ds.len())).collect();
                Ok(ds.gather(&indices)?.1)
            }
            DataSource::Coupled { x0, x1 } => {
                let rows = x0.rows();
                let mut b = Tensor::zeros(n, x1.cols());
                for r in 0..n {
                    b.row_mut(r).copy_from_slice(x1.row(rng.index(rows)));
                }
                Ok(b)
            }
        }
    }
}

/// Schedules the method may need: the noise ladder for score/endpoint methods
/// and the discrete-time ladder for DDPM-form training.
#[derive(Clone, Copy, Default)]
pub struct Schedules<'a> {
    pub ve: Option<&'a VeSchedule>,
    pub vp: Option<&'a VpSchedule>,
}

fn need_ve<'a>(s: &Schedules<'a>, what: &str) -> Result<&'a VeSchedule> {
    s.ve.ok_or_else(|| Error::invalid(format!("{what} needs a noise schedule")))
}

fn need_vp<'a>(s: &Schedules<'a>, what: &str) -> Result<&'a VpSchedule> {
    s.vp.ok_or_else(|| Error::invalid(format!("{what} needs a discrete-time schedule")))
}

fn fresh_noise(n: usize, d: usize, rng: &mut Rng) -> Tensor {
    let mut t = Tensor::zeros(n, d);
    rng.fill_standard_normal(t.data_mut());
    t
}

/// Builds this iteration's loss graph. Draw order per method is fixed:
/// targets (and coupled sources), then times or noise levels, then noise.
fn build_iteration_loss(
    model: &NetModel,
    cfg: &TrainConfig,
    data: &DataSource,
    scheds: &Schedules,
    rng: &mut Rng,
) -> Result<LossGraph> {
    let n = cfg.batch;
    let d = data.dim();
    match cfg.method {
        Method::Dsm => {
            let ve = need_ve(scheds, "score matching")?;
            let x1 = data.draw_targets(n, rng)?;
            let sigmas = cfg.sigma_law.draw_many(n, ve, rng);
            let noise = fresh_noise(n, d, rng);
            dsm_loss(model, &x1, &sigmas, &noise)
        }
        Method::Ddpm => {
            let vp = need_vp(scheds, "discrete denoising")?;
            let x1 = data.draw_targets(n, rng)?;
            let ts: Vec<usize> = (0..n).map(|_| 1 + rng.index(vp.steps())).collect();
            let noise = fresh_noise(n, d, rng);
            ddpm_loss(model, vp, &x1, &ts, &noise)
        }
        Method::Cfm => {
            let (x0, x1) = data.draw_coupled(n, rng)?;
            let ts: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
            cfm_loss(model, &x0, &x1, &ts)
        }
        Method::BotCfm => {
            let (x0, x1) = data.draw_coupled(n, rng)?;
            let ts: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
            bot_cfm_loss(model, &x0, &x1, &ts)
        }
        Method::Lmm => {
            let ve = need_ve(scheds, "endpoint regression")?;
            if !matches!(data, DataSource::Pairs(_)) {
                return Err(Error::invalid(
                    "endpoint regression trains on a cached pair dataset",
                ));
            }
            let (x0, x1) = data.draw_coupled(n, rng)?;
            let sigmas = cfg.sigma_law.draw_many(n, ve, rng);
            lines_loss(model, &x0, &x1, &sigmas, cfg.norm)
        }
    }
}

/// One optimiser step from an already-built loss graph. Returns the loss
/// value; a non-finite loss or gradient surfaces as a divergence error with
/// `snapshot` attached.
pub(crate) fn step_net(
    net: &mut Mlp,
    opt: &mut OptState,
    lg: &mut LossGraph,
    iter: u64,
    snapshot: &Mlp,
) -> Result<f64> {
    let value = lg.value();
    if !value.is_finite() {
        return Err(diverged(iter, format!("loss became {value}"), snapshot));
    }
    lg.backward()?;
    let grads = lg.grads(net);
    let mut params = net.params_mut();
    match opt.apply(&mut params, &grads) {
        Ok(()) => Ok(value),
        Err(Error::TrainingDiverged { detail, .. }) => Err(diverged(iter, detail, snapshot)),
        Err(e) => Err(e),
    }
}

fn diverged(iter: u64, detail: String, snapshot: &Mlp) -> Error {
    Error::TrainingDiverged {
        iteration: iter,
        detail,
        last_good: Some(Box::new(snapshot.clone())),
    }
}

/// Trains the model's net by stochastic gradient descent on the configured
/// method, which must match the model's interface kind. Deterministic in
/// `(initial model, config)`: the seed fixes every draw. On divergence the
/// error carries the last net snapshot taken at a curve point.
pub fn train(
    model: NetModel,
    cfg: &TrainConfig,
    data: &DataSource,
    scheds: &Schedules,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.adversarial {
        return Err(Error::invalid(
            "adversarial fine-tuning has its own entry point",
        ));
    }
    let want = required_kind(cfg.method);
    if model.kind() != want {
        return Err(Error::invalid(format!(
            "{:?} training drives a {want:?} model, got {:?}",
            cfg.method,
            model.kind()
        )));
    }
    data.validate()?;
    if model.dim() != data.dim() {
        return Err(Error::shape(format!(
            "model takes {} axes but data has {}",
            model.dim(),
            data.dim()
        )));
    }

    let mut model = model;
    let mut rng = Rng::seed_from(cfg.seed).stream(DATA_STREAM);
    let mut opt = OptState::new(AdamConfig::with_learning_rate(cfg.lr), &model.net().params());
    let mut curve = Vec::new();
    let mut snapshot = model.net().clone();

    for iter in 1..=cfg.iters as u64 {
        let mut lg = build_iteration_loss(&model, cfg, data, scheds, &mut rng)?;
        let value = step_net(model.net_mut(), &mut opt, &mut lg, iter, &snapshot)?;
        if iter % cfg.curve_every as u64 == 0 || iter == cfg.iters as u64 {
            curve.push(CurvePoint { iter, loss: value, disc_loss: None, lambda: None });
            snapshot = model.net().clone();
        }
    }
    Ok(TrainOutcome { model, curve })
}

/// Deterministic full-batch probe: fits the net to fixed targets under the
/// same graph/optimiser path the trainer uses, and returns the loss at every
/// iteration. Useful as an optimisation sanity check.
pub fn regression_probe(
    net: Mlp,
    x: &Tensor,
    y: &Tensor,
    iters: usize,
    lr: f64,
) -> Result<(Mlp, Vec<f64>)> {
    if x.rows() != y.rows() {
        return Err(Error::shape("inputs and targets need matching rows"));
    }
    let mut net = net;
    let conds = vec![1.0; x.rows()];
    let mut opt = OptState::new(AdamConfig::with_learning_rate(lr), &net.params());
    let mut losses = Vec::with_capacity(iters);
    for iter in 1..=iters as u64 {
        let embedded = net.input_with_cond(x, &conds)?;
        let mut g = Graph::new();
        let gnet = net.bind(&mut g);
        let inp = g.input(embedded);
        let pred = net.forward_in_graph(&mut g, &gnet, inp);
        let tgt = g.input(y.clone());
        let r = g.sub(pred, tgt);
        let loss = g.mean_row_sum_sq(r, None);
        let mut lg = LossGraph { graph: g, net: gnet, loss };
        let snapshot = net.clone();
        let value = step_net(&mut net, &mut opt, &mut lg, iter, &snapshot)?;
        losses.push(value);
    }
    Ok((net, losses))
}
