//! Flow rectification: retrain a velocity net on couplings generated by the
//! previous round's flow, straightening trajectories round over round.

use crate::dist::{sample_mixture, MixtureSpec, Rng};
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::sampler::{euler_flow_reverse, euler_flow_sample, ModelKind, NetModel};
use crate::train::config::{Method, TrainConfig};
use crate::train::trainer::{train, CurvePoint, DataSource, Schedules, TrainOutcome};

const REGEN_STREAM: u64 = 3;

#[derive(Debug, Clone)]
pub struct RectflowOutcome {
    pub model: NetModel,
    /// Source side of the coupling this round trained on (or, in the first
    /// round, a representative draw of the independent coupling).
    pub x0: Tensor,
    /// Target side, aligned row by row with `x0`.
    pub x1: Tensor,
    pub curve: Vec<CurvePoint>,
}

fn stack(a: &Tensor, b: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(a.rows() + b.rows(), a.cols());
    for i in 0..a.rows() {
        out.row_mut(i).copy_from_slice(a.row(i));
    }
    for i in 0..b.rows() {
        out.row_mut(a.rows() + i).copy_from_slice(b.row(i));
    }
    out
}

/// One rectification round. Without a previous model this is plain
/// flow-matching training on the independent coupling. With one, fresh
/// sources are pushed forward and fresh targets pulled back through the
/// previous flow (an even split), and training runs on those coupled pairs.
///
/// The returned coupled arrays are drawn from a stream disjoint from the
/// trainer's, so the first round's model is bit-identical to plain
/// flow-matching training under the same config.
pub fn rectflow_iterate(
    prev: Option<&NetModel>,
    init: NetModel,
    target: &MixtureSpec,
    cfg: &TrainConfig,
    pairs_count: usize,
    flow_steps: usize,
) -> Result<RectflowOutcome> {
    if cfg.method != Method::Cfm {
        return Err(Error::invalid("rectification retrains the flow-matching objective"));
    }
    if pairs_count < 2 {
        return Err(Error::invalid("need at least two coupled pairs per round"));
    }
    if flow_steps == 0 {
        return Err(Error::invalid("flow integration needs at least one step"));
    }
    if let Some(p) = prev {
        if p.kind() != ModelKind::Velocity {
            return Err(Error::invalid("the previous round must expose a velocity model"));
        }
    }
    let d = target.dim;
    let mut rng = Rng::seed_from(cfg.seed).stream(REGEN_STREAM);

    let (x0, x1, outcome): (Tensor, Tensor, TrainOutcome) = match prev {
        None => {
            let mut z0 = Tensor::zeros(pairs_count, d);
            rng.fill_standard_normal(z0.data_mut());
            let z1 = sample_mixture(target, pairs_count, &mut rng);
            let outcome = train(init, cfg, &DataSource::Mixture(target), &Schedules::default())?;
            (z0, z1, outcome)
        }
        Some(model) => {
            let n_fwd = pairs_count / 2;
            let n_rev = pairs_count - n_fwd;

            let mut z0 = Tensor::zeros(n_fwd, d);
            rng.fill_standard_normal(z0.data_mut());
            let fwd = euler_flow_sample(model, flow_steps, &z0, false)?;

            let z1 = sample_mixture(target, n_rev, &mut rng);
            let rev = euler_flow_reverse(model, flow_steps, &z1, false)?;

            let x0 = stack(&z0, &rev.x_final);
            let x1 = stack(&fwd.x_final, &z1);
            let outcome = train(
                init,
                cfg,
                &DataSource::Coupled { x0: &x0, x1: &x1 },
                &Schedules::default(),
            )?;
            (x0, x1, outcome)
        }
    };
    Ok(RectflowOutcome { model: outcome.model, x0, x1, curve: outcome.curve })
}
