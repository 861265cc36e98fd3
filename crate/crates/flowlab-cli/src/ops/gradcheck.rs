//! Finite-difference audits of every training gradient: each loss's autodiff
//! gradient is compared against a central-difference estimate on randomly
//! sized models and batches.

use flowlab::dist::Rng;
use flowlab::metrics::to_json_pretty;
use flowlab::nn::gradcheck::{finite_difference, max_rel_error};
use flowlab::nn::{Activation, Conditioning, Mlp, Tensor};
use flowlab::sampler::{ModelKind, NetModel};
use flowlab::sched::VpSchedule;
use flowlab::train::{
    bot_cfm_loss, bot_cfm_loss_value, cfm_loss, cfm_loss_value, disc_loss, disc_loss_value,
    dsm_loss, dsm_loss_value, ddpm_loss, ddpm_loss_value, generator_adversarial_loss,
    generator_adversarial_value, lines_loss, lines_loss_value, LossNorm,
};
use flowlab::{Error, Result};

use crate::manifest::RunManifest;
use crate::ops::{seed_for, RunContext};
use serde::{Deserialize, Serialize};

const TOLERANCE: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;
const REL_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckRow {
    pub loss: String,
    pub trials: usize,
    /// Worst relative disagreement seen over all trials.
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub tolerance: f64,
    pub rows: Vec<GradcheckRow>,
}

struct Trial {
    dim: usize,
    x0: Tensor,
    x1: Tensor,
    noise: Tensor,
    sigmas: Vec<f64>,
    ts: Vec<f64>,
    tis: Vec<usize>,
    non_saturating: bool,
}

fn random_batch(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    let mut t = Tensor::zeros(rows, cols);
    rng.fill_standard_normal(t.data_mut());
    t
}

fn random_model(rng: &mut Rng, dim: usize, kind: ModelKind) -> Result<NetModel> {
    let hidden = [5 + rng.index(8)];
    let embed = if rng.uniform() < 0.5 { 4 } else { 6 };
    let mlp = Mlp::new(
        dim,
        &hidden,
        dim,
        Activation::Silu,
        kind.expected_conditioning(),
        embed,
        rng,
    )?;
    NetModel::new(mlp, kind, 1.0 + rng.uniform())
}

fn random_critic(rng: &mut Rng, dim: usize) -> Result<Mlp> {
    let hidden = [5 + rng.index(8)];
    Mlp::new(dim, &hidden, 1, Activation::Silu, Conditioning::Unconditioned, 0, rng)
}

/// Worst FD disagreement for one loss over all trials. `build` must leave the
/// model untouched; a scratch clone absorbs the FD perturbations.
fn audit(
    trials: &[Trial],
    rng: &mut Rng,
    kind: ModelKind,
    mut grads: impl FnMut(&NetModel, &Trial) -> Result<Vec<Tensor>>,
    mut value: impl FnMut(&NetModel, &Trial) -> Result<f64>,
) -> Result<f64> {
    let mut worst = 0.0f64;
    for trial in trials {
        let model = random_model(rng, trial.dim, kind)?;
        let analytic = grads(&model, trial)?;
        let params: Vec<Tensor> = model.net().params().into_iter().cloned().collect();
        let mut scratch = model.clone();
        let mut failure = None;
        let numeric = finite_difference(
            &params,
            |p| {
                let r = scratch
                    .net_mut()
                    .set_params(p)
                    .and_then(|_| value(&scratch, trial));
                match r {
                    Ok(v) => v,
                    Err(e) => {
                        failure.get_or_insert(e);
                        f64::NAN
                    }
                }
            },
            FD_STEP,
        );
        if let Some(e) = failure {
            return Err(e);
        }
        worst = worst.max(max_rel_error(&analytic, &numeric, REL_FLOOR));
    }
    Ok(worst)
}

/// Runs every audit at `trials` random configurations and fails if any loss
/// disagrees with its finite-difference gradient beyond the tolerance.
pub fn run_checks(seed: u64, trials: usize) -> Result<GradcheckReport> {
    let mut rng = Rng::seed_from(seed_for(seed, "gradcheck"));
    let vp = VpSchedule::linear(1e-4, 0.02, 10)?;

    let mut cases = Vec::with_capacity(trials);
    for i in 0..trials {
        let dim = 2 + rng.index(4);
        let batch = 3 + rng.index(6);
        cases.push(Trial {
            dim,
            x0: random_batch(&mut rng, batch, dim),
            x1: random_batch(&mut rng, batch, dim),
            noise: random_batch(&mut rng, batch, dim),
            sigmas: (0..batch).map(|_| rng.uniform_in(0.05, 3.0)).collect(),
            ts: (0..batch).map(|_| rng.uniform()).collect(),
            tis: (0..batch).map(|_| 1 + rng.index(vp.steps())).collect(),
            non_saturating: i % 2 == 0,
        });
    }

    let mut rows = Vec::new();
    let mut push = |loss: &str, worst: f64| {
        rows.push(GradcheckRow { loss: loss.into(), trials, max_rel_error: worst });
    };

    push(
        "dsm",
        audit(
            &cases,
            &mut rng,
            ModelKind::Score,
            |m, t| {
                let mut lg = dsm_loss(m, &t.x1, &t.sigmas, &t.noise)?;
                lg.backward()?;
                Ok(lg.grads(m.net()))
            },
            |m, t| dsm_loss_value(m, &t.x1, &t.sigmas, &t.noise),
        )?,
    );
    push(
        "ddpm",
        audit(
            &cases,
            &mut rng,
            ModelKind::Noise,
            |m, t| {
                let mut lg = ddpm_loss(m, &vp, &t.x1, &t.tis, &t.noise)?;
                lg.backward()?;
                Ok(lg.grads(m.net()))
            },
            |m, t| ddpm_loss_value(m, &vp, &t.x1, &t.tis, &t.noise),
        )?,
    );
    push(
        "cfm",
        audit(
            &cases,
            &mut rng,
            ModelKind::Velocity,
            |m, t| {
                let mut lg = cfm_loss(m, &t.x0, &t.x1, &t.ts)?;
                lg.backward()?;
                Ok(lg.grads(m.net()))
            },
            |m, t| cfm_loss_value(m, &t.x0, &t.x1, &t.ts),
        )?,
    );
    push(
        "botcfm",
        audit(
            &cases,
            &mut rng,
            ModelKind::Velocity,
            |m, t| {
                let mut lg = bot_cfm_loss(m, &t.x0, &t.x1, &t.ts)?;
                lg.backward()?;
                Ok(lg.grads(m.net()))
            },
            |m, t| bot_cfm_loss_value(m, &t.x0, &t.x1, &t.ts),
        )?,
    );
    push(
        "lines",
        audit(
            &cases,
            &mut rng,
            ModelKind::Endpoint,
            |m, t| {
                let mut lg = lines_loss(m, &t.x0, &t.x1, &t.sigmas, LossNorm::L2)?;
                lg.backward()?;
                Ok(lg.grads(m.net()))
            },
            |m, t| lines_loss_value(m, &t.x0, &t.x1, &t.sigmas, LossNorm::L2),
        )?,
    );

    // Generator-side adversarial term: same audit with a frozen random critic
    // alongside each generator.
    {
        let mut worst = 0.0f64;
        for trial in &cases {
            let gen = random_model(&mut rng, trial.dim, ModelKind::Endpoint)?;
            let disc = random_critic(&mut rng, trial.dim)?;
            let mut lg = generator_adversarial_loss(
                &gen,
                &disc,
                &trial.x0,
                &trial.x1,
                &trial.sigmas,
                trial.non_saturating,
            )?;
            lg.backward()?;
            let analytic = lg.grads(gen.net());
            let params: Vec<Tensor> = gen.net().params().into_iter().cloned().collect();
            let mut scratch = gen.clone();
            let numeric = finite_difference(
                &params,
                |p| {
                    scratch.net_mut().set_params(p).expect("shapes are unchanged");
                    generator_adversarial_value(
                        &scratch,
                        &disc,
                        &trial.x0,
                        &trial.x1,
                        &trial.sigmas,
                        trial.non_saturating,
                    )
                    .expect("inputs were accepted analytically")
                },
                FD_STEP,
            );
            worst = worst.max(max_rel_error(&analytic, &numeric, REL_FLOOR));
        }
        push("generator_adversarial", worst);
    }

    // Critic objective: the update graph descends the negated objective, so
    // the FD reference is the negated plain value.
    {
        let mut worst = 0.0f64;
        for trial in &cases {
            let disc = random_critic(&mut rng, trial.dim)?;
            let fake = &trial.x0;
            let real = &trial.x1;
            let mut step = disc_loss(&disc, fake, real)?;
            step.graph.backward(step.descend)?;
            let analytic = disc.collect_grads(&step.graph, &step.net);
            let params: Vec<Tensor> = disc.params().into_iter().cloned().collect();
            let mut scratch = disc.clone();
            let numeric = finite_difference(
                &params,
                |p| {
                    scratch.set_params(p).expect("shapes are unchanged");
                    -disc_loss_value(&scratch, fake, real).expect("inputs were accepted")
                },
                FD_STEP,
            );
            worst = worst.max(max_rel_error(&analytic, &numeric, REL_FLOOR));
        }
        push("critic", worst);
    }

    let report = GradcheckReport { seed, tolerance: TOLERANCE, rows };
    if let Some(bad) = report.rows.iter().find(|r| !(r.max_rel_error < TOLERANCE)) {
        return Err(Error::invalid(format!(
            "{} gradient disagrees with finite differences: {:.3e} (tolerance {:.0e})",
            bad.loss, bad.max_rel_error, TOLERANCE
        )));
    }
    Ok(report)
}

pub fn run(ctx: &RunContext, manifest: &mut RunManifest) -> Result<GradcheckReport> {
    let trials = if ctx.smoke { 3 } else { 10 };
    let report = match run_checks(ctx.seed, trials) {
        Ok(r) => r,
        Err(e) => {
            manifest.stage_failed("gradcheck", e.to_string());
            return Err(e);
        }
    };
    std::fs::write(ctx.out_dir.join("gradcheck.json"), to_json_pretty(&report)?)?;
    manifest.record_artifact(&ctx.out_dir, "gradcheck:json", "gradcheck.json")?;
    manifest.stage_completed("gradcheck", format!("{} losses audited", report.rows.len()));
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_losses_agree_with_finite_differences() {
        let report = run_checks(11, 2).unwrap();
        assert_eq!(report.rows.len(), 7);
        for row in &report.rows {
            assert!(row.max_rel_error < TOLERANCE, "{}: {}", row.loss, row.max_rel_error);
        }
    }

    #[test]
    fn reports_are_reproducible_for_a_seed() {
        let a = run_checks(3, 1).unwrap();
        let b = run_checks(3, 1).unwrap();
        assert_eq!(a, b);
    }
}
