//! Adversarial fine-tuning of an endpoint model against a small critic, with
//! the endpoint-regression term kept in the objective at a fixed weight and
//! the adversarial term scaled adaptively.

use crate::dist::Rng;
use crate::error::{Error, Result};
use crate::nn::{sigmoid, AdamConfig, Conditioning, Graph, GraphNet, Mlp, NodeId, OptState, Tensor};
use crate::pairing::PairDataset;
use crate::sampler::{ModelKind, NetModel};
use crate::sched::VeSchedule;
use crate::train::config::{Method, TrainConfig};
use crate::train::losses::{lines_loss, LossGraph};
use crate::train::trainer::CurvePoint;

/// Critic outputs are squashed into `(0, 1)` and clamped to this band before
/// any logarithm, so the losses stay finite for a saturated critic.
pub const DISC_CLAMP: (f64, f64) = (1e-7, 1.0 - 1e-7);

/// Clamp bounds for the adaptive weight on the adversarial term.
pub const LAMBDA_MIN: f64 = 1e-4;
pub const LAMBDA_MAX: f64 = 1e4;

const ADV_STREAM: u64 = 2;

/// Critic update graph. `objective` is the quantity the critic ascends,
/// `E[ln(1 - D(fake))] + E[ln D(real)]`; `descend` is its negation so the
/// shared minimising optimiser applies directly.
pub struct DiscStep {
    pub graph: Graph,
    pub net: GraphNet,
    pub objective: NodeId,
    pub descend: NodeId,
}

impl DiscStep {
    pub fn objective_value(&self) -> f64 {
        self.graph.value(self.objective).scalar_value()
    }
}

fn check_disc(disc: &Mlp, d: usize) -> Result<()> {
    if disc.conditioning() != Conditioning::Unconditioned {
        return Err(Error::invalid("the critic takes raw states, unconditioned"));
    }
    if disc.data_width() != d || disc.out_width() != 1 {
        return Err(Error::shape(format!(
            "critic must map {d} axes to one logit, got {}->{}",
            disc.data_width(),
            disc.out_width()
        )));
    }
    Ok(())
}

fn squashed(g: &mut Graph, logit: NodeId) -> NodeId {
    let p = g.sigmoid(logit);
    g.clamp(p, DISC_CLAMP.0, DISC_CLAMP.1)
}

/// Line states `x1 + sigma * x0`, the endpoint model's inputs.
fn line_states(x0: &Tensor, x1: &Tensor, sigmas: &[f64]) -> Tensor {
    let mut x = x1.clone();
    for i in 0..x0.rows() {
        let s = sigmas[i];
        for (v, a) in x.row_mut(i).iter_mut().zip(x0.row(i)) {
            *v += s * a;
        }
    }
    x
}

/// Builds the critic objective on a fake batch (generator outputs) and a real
/// batch (reference samples). Batch sizes may differ; each side is averaged
/// on its own.
pub fn disc_loss(disc: &Mlp, fake: &Tensor, real: &Tensor) -> Result<DiscStep> {
    check_disc(disc, fake.cols())?;
    if real.cols() != fake.cols() {
        return Err(Error::shape("fake and real batches must share a dimension"));
    }
    if fake.rows() == 0 || real.rows() == 0 {
        return Err(Error::invalid("critic batches cannot be empty"));
    }
    let mut g = Graph::new();
    let net = disc.bind(&mut g);

    let fake_in = g.input(fake.clone());
    let fake_logit = disc.forward_in_graph(&mut g, &net, fake_in);
    let fake_p = squashed(&mut g, fake_logit);
    let one_minus = g.affine(fake_p, -1.0, 1.0);
    let ln_fake = g.ln(one_minus);
    let term_fake = g.mean_all(ln_fake);

    let real_in = g.input(real.clone());
    let real_logit = disc.forward_in_graph(&mut g, &net, real_in);
    let real_p = squashed(&mut g, real_logit);
    let ln_real = g.ln(real_p);
    let term_real = g.mean_all(ln_real);

    let objective = g.add(term_fake, term_real);
    let descend = g.scale(objective, -1.0);
    Ok(DiscStep { graph: g, net, objective, descend })
}

/// Plain evaluation of the critic objective, same arithmetic as the graph.
pub fn disc_loss_value(disc: &Mlp, fake: &Tensor, real: &Tensor) -> Result<f64> {
    check_disc(disc, fake.cols())?;
    let term = |batch: &Tensor, flip: bool| -> Result<f64> {
        let logits = disc.forward_per_row(batch, &[])?;
        let sum: f64 = logits
            .data()
            .iter()
            .map(|&z| {
                let p = sigmoid(z).clamp(DISC_CLAMP.0, DISC_CLAMP.1);
                if flip {
                    (-p + 1.0).ln()
                } else {
                    p.ln()
                }
            })
            .sum();
        Ok(sum / logits.len() as f64)
    };
    Ok(term(fake, true)? + term(real, false)?)
}

/// Generator-side adversarial term on line inputs `x1 + sigma * x0`: the
/// literal `E[ln(1 - D(G(...)))]` to minimise, or `-E[ln D(G(...))]` when
/// `non_saturating` is set. The critic is frozen inside this graph.
pub fn generator_adversarial_loss(
    gen: &NetModel,
    disc: &Mlp,
    x0: &Tensor,
    x1: &Tensor,
    sigmas: &[f64],
    non_saturating: bool,
) -> Result<LossGraph> {
    check_disc(disc, gen.dim())?;
    if !x0.same_shape(x1) || sigmas.len() != x0.rows() {
        return Err(Error::shape("pair halves and noise levels must line up"));
    }
    let x = line_states(x0, x1, sigmas);

    let mut g = Graph::new();
    let gnet = gen.net().bind(&mut g);
    let frozen = disc.bind_frozen(&mut g);
    let fake = gen.endpoint_in_graph(&mut g, &gnet, &x, sigmas)?;
    let logit = disc.forward_in_graph(&mut g, &frozen, fake);
    let p = squashed(&mut g, logit);
    let loss = if non_saturating {
        let ln_p = g.ln(p);
        let mean = g.mean_all(ln_p);
        g.scale(mean, -1.0)
    } else {
        let one_minus = g.affine(p, -1.0, 1.0);
        let ln_q = g.ln(one_minus);
        g.mean_all(ln_q)
    };
    Ok(LossGraph { graph: g, net: gnet, loss })
}

/// Plain evaluation of [`generator_adversarial_loss`].
pub fn generator_adversarial_value(
    gen: &NetModel,
    disc: &Mlp,
    x0: &Tensor,
    x1: &Tensor,
    sigmas: &[f64],
    non_saturating: bool,
) -> Result<f64> {
    let x = line_states(x0, x1, sigmas);
    let fake = gen.endpoint_per_row(&x, sigmas)?;
    let logits = disc.forward_per_row(&fake, &[])?;
    let sum: f64 = logits
        .data()
        .iter()
        .map(|&z| {
            let p = sigmoid(z).clamp(DISC_CLAMP.0, DISC_CLAMP.1);
            if non_saturating {
                p.ln()
            } else {
                (-p + 1.0).ln()
            }
        })
        .sum();
    let mean = sum / logits.len() as f64;
    Ok(if non_saturating { -mean } else { mean })
}

/// Ratio of last-layer gradient norms, `|grad of the regression term| /
/// |grad of the adversarial term|`, clamped to `[1e-4, 1e4]`. A zero
/// denominator returns the ceiling and flags a warning.
pub fn adaptive_weight(grad_lines_last: &Tensor, grad_adv_last: &Tensor) -> (f64, bool) {
    let num = grad_lines_last.sum_sq().sqrt();
    let den = grad_adv_last.sum_sq().sqrt();
    if den == 0.0 {
        return (LAMBDA_MAX, true);
    }
    ((num / den).clamp(LAMBDA_MIN, LAMBDA_MAX), false)
}

#[derive(Debug, Clone)]
pub struct AdvOutcome {
    pub model: NetModel,
    pub disc: Mlp,
    pub curve: Vec<CurvePoint>,
    /// Adaptive weight at every iteration, in order.
    pub lambda_history: Vec<f64>,
    /// Iterations where the adaptive-weight denominator was exactly zero.
    pub lambda_zero_warnings: u64,
}

/// Alternating fine-tuning: each iteration takes one generator step on
/// `lambda_lines * lines + lambda_adapt * adversarial`, then one critic step
/// on the refreshed fakes. Real samples for the critic are the pair targets.
pub fn adversarial_finetune(
    model: NetModel,
    disc: Mlp,
    pairs: &PairDataset,
    sched: &VeSchedule,
    cfg: &TrainConfig,
) -> Result<AdvOutcome> {
    cfg.validate()?;
    if !cfg.adversarial {
        return Err(Error::invalid("config does not enable adversarial fine-tuning"));
    }
    if cfg.method != Method::Lmm {
        return Err(Error::invalid("adversarial fine-tuning applies to endpoint models"));
    }
    if model.kind() != ModelKind::Endpoint {
        return Err(Error::invalid("adversarial fine-tuning needs an endpoint model"));
    }
    if pairs.is_empty() {
        return Err(Error::invalid("pair dataset cannot be empty"));
    }
    if model.dim() != pairs.dim() {
        return Err(Error::shape("model and pair dataset disagree on dimension"));
    }
    check_disc(&disc, pairs.dim())?;

    let mut model = model;
    let mut disc = disc;
    let mut rng = Rng::seed_from(cfg.seed).stream(ADV_STREAM);
    let mut opt_g = OptState::new(AdamConfig::with_learning_rate(cfg.lr), &model.net().params());
    let mut opt_d = OptState::new(AdamConfig::with_learning_rate(cfg.disc_lr), &disc.params());
    let last_w = model.net().last_weight_param_index();

    let mut curve = Vec::new();
    let mut lambda_history = Vec::with_capacity(cfg.iters);
    let mut warnings = 0u64;
    let mut snapshot = model.net().clone();

    for iter in 1..=cfg.iters as u64 {
        let indices: Vec<usize> = (0..cfg.batch).map(|_| rng.index(pairs.len())).collect();
        let (x0, x1) = pairs.gather(&indices)?;
        let sigmas = cfg.sigma_law.draw_many(cfg.batch, sched, &mut rng);

        let mut lg_lines = lines_loss(&model, &x0, &x1, &sigmas, cfg.norm)?;
        let lines_value = lg_lines.value();
        if !lines_value.is_finite() {
            return Err(diverged(iter, format!("regression loss became {lines_value}"), &snapshot));
        }
        lg_lines.backward()?;
        let g_lines = lg_lines.grads(model.net());

        let mut lg_adv =
            generator_adversarial_loss(&model, &disc, &x0, &x1, &sigmas, cfg.non_saturating)?;
        lg_adv.backward()?;
        let g_adv = lg_adv.grads(model.net());

        let (lambda, warned) = adaptive_weight(&g_lines[last_w], &g_adv[last_w]);
        if warned {
            warnings += 1;
        }
        lambda_history.push(lambda);

        let combined: Vec<Tensor> = g_lines
            .iter()
            .zip(&g_adv)
            .map(|(gl, ga)| {
                let mut c = gl.map(|v| v * cfg.lambda_lines);
                c.add_assign_scaled(ga, lambda);
                c
            })
            .collect();
        {
            let mut params = model.net_mut().params_mut();
            if let Err(e) = opt_g.apply(&mut params, &combined) {
                return Err(rewrap(e, iter, &snapshot));
            }
        }

        // Critic step on the updated generator's outputs.
        let x = line_states(&x0, &x1, &sigmas);
        let fake = model.endpoint_per_row(&x, &sigmas)?;
        let mut dstep = disc_loss(&disc, &fake, &x1)?;
        let disc_value = dstep.objective_value();
        if !disc_value.is_finite() {
            return Err(diverged(iter, format!("critic objective became {disc_value}"), &snapshot));
        }
        dstep.graph.backward(dstep.descend)?;
        let d_grads = disc.collect_grads(&dstep.graph, &dstep.net);
        {
            let mut params = disc.params_mut();
            if let Err(e) = opt_d.apply(&mut params, &d_grads) {
                return Err(rewrap(e, iter, &snapshot));
            }
        }

        if iter % cfg.curve_every as u64 == 0 || iter == cfg.iters as u64 {
            curve.push(CurvePoint {
                iter,
                loss: lines_value,
                disc_loss: Some(disc_value),
                lambda: Some(lambda),
            });
            snapshot = model.net().clone();
        }
    }

    Ok(AdvOutcome { model, disc, curve, lambda_history, lambda_zero_warnings: warnings })
}

fn diverged(iter: u64, detail: String, snapshot: &Mlp) -> Error {
    Error::TrainingDiverged {
        iteration: iter,
        detail,
        last_good: Some(Box::new(snapshot.clone())),
    }
}

fn rewrap(e: Error, iter: u64, snapshot: &Mlp) -> Error {
    match e {
        Error::TrainingDiverged { detail, .. } => diverged(iter, detail, snapshot),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{finite_difference, max_rel_error};
    use crate::nn::Activation;

    fn disc_net(d: usize, hidden: &[usize], seed: u64) -> Mlp {
        let mut rng = Rng::seed_from(seed);
        Mlp::new(d, hidden, 1, Activation::Silu, Conditioning::Unconditioned, 0, &mut rng)
            .unwrap()
    }

    fn gen_model(d: usize, hidden: &[usize], seed: u64) -> NetModel {
        let mut rng = Rng::seed_from(seed);
        let net =
            Mlp::new(d, hidden, d, Activation::Silu, Conditioning::LogSigma, 4, &mut rng).unwrap();
        NetModel::new(net, ModelKind::Endpoint, 1.0).unwrap()
    }

    fn random_batch(rng: &mut Rng, n: usize, d: usize) -> Tensor {
        let mut t = Tensor::zeros(n, d);
        rng.fill_standard_normal(t.data_mut());
        t
    }

    #[test]
    fn indifferent_critic_scores_two_ln_half() {
        // Zero parameters squash every logit to exactly 1/2.
        let mut disc = disc_net(2, &[8], 1);
        for p in disc.params_mut() {
            for v in p.data_mut() {
                *v = 0.0;
            }
        }
        let mut rng = Rng::seed_from(2);
        let fake = random_batch(&mut rng, 4, 2);
        let real = random_batch(&mut rng, 4, 2);
        let step = disc_loss(&disc, &fake, &real).unwrap();
        assert_eq!(step.objective_value(), 2.0 * 0.5f64.ln());
        assert_eq!(
            disc_loss_value(&disc, &fake, &real).unwrap(),
            2.0 * 0.5f64.ln()
        );
    }

    #[test]
    fn confident_correct_critic_scores_near_zero() {
        // A linear critic with a large weight separates the batches almost
        // perfectly; the clamp keeps the objective finite and near zero.
        let mut disc = disc_net(1, &[], 3);
        disc.params_mut()[0].data_mut()[0] = 5.0;
        let fake = Tensor::from_rows(&[vec![-10.0], vec![-12.0]]);
        let real = Tensor::from_rows(&[vec![10.0], vec![12.0]]);
        let step = disc_loss(&disc, &fake, &real).unwrap();
        let v = step.objective_value();
        assert!(v.is_finite());
        assert!(v.abs() < 1e-6, "objective {v}");
    }

    #[test]
    fn graph_and_pure_critic_values_agree_bitwise() {
        let mut rng = Rng::seed_from(4);
        let disc = disc_net(3, &[8], 5);
        let fake = random_batch(&mut rng, 5, 3);
        let real = random_batch(&mut rng, 7, 3);
        let step = disc_loss(&disc, &fake, &real).unwrap();
        assert_eq!(
            step.objective_value(),
            disc_loss_value(&disc, &fake, &real).unwrap()
        );
    }

    #[test]
    fn graph_and_pure_generator_terms_agree_bitwise() {
        let mut rng = Rng::seed_from(6);
        let gen = gen_model(2, &[8], 7);
        let disc = disc_net(2, &[8], 8);
        let x0 = random_batch(&mut rng, 4, 2);
        let x1 = random_batch(&mut rng, 4, 2);
        let sigmas = vec![0.3, 1.0, 2.5, 0.7];
        for ns in [false, true] {
            let lg = generator_adversarial_loss(&gen, &disc, &x0, &x1, &sigmas, ns).unwrap();
            assert_eq!(
                lg.value(),
                generator_adversarial_value(&gen, &disc, &x0, &x1, &sigmas, ns).unwrap()
            );
        }
    }

    #[test]
    fn critic_gradients_pass_finite_difference_checks() {
        let mut rng = Rng::seed_from(9);
        for trial in 0..10 {
            let disc = disc_net(2, &[6], 20 + trial);
            let fake = random_batch(&mut rng, 3, 2);
            let real = random_batch(&mut rng, 4, 2);
            let mut step = disc_loss(&disc, &fake, &real).unwrap();
            step.graph.backward(step.descend).unwrap();
            let analytic = disc.collect_grads(&step.graph, &step.net);

            let params: Vec<Tensor> = disc.params().into_iter().cloned().collect();
            let mut scratch = disc.clone();
            let numeric = finite_difference(
                &params,
                |p| {
                    scratch.set_params(p).unwrap();
                    -disc_loss_value(&scratch, &fake, &real).unwrap()
                },
                1e-5,
            );
            let err = max_rel_error(&analytic, &numeric, 1e-4);
            assert!(err < 1e-4, "trial {trial}: max rel error {err}");
        }
    }

    #[test]
    fn generator_gradients_pass_finite_difference_checks() {
        let mut rng = Rng::seed_from(10);
        for trial in 0..10 {
            let gen = gen_model(2, &[6], 40 + trial);
            let disc = disc_net(2, &[6], 60 + trial);
            let x0 = random_batch(&mut rng, 3, 2);
            let x1 = random_batch(&mut rng, 3, 2);
            let sigmas = vec![0.5, 1.5, 3.0];
            let ns = trial % 2 == 1;
            let mut lg =
                generator_adversarial_loss(&gen, &disc, &x0, &x1, &sigmas, ns).unwrap();
            lg.backward().unwrap();
            let analytic = lg.grads(gen.net());

            let params: Vec<Tensor> = gen.net().params().into_iter().cloned().collect();
            let mut scratch = gen.clone();
            let numeric = finite_difference(
                &params,
                |p| {
                    scratch.net_mut().set_params(p).unwrap();
                    generator_adversarial_value(&scratch, &disc, &x0, &x1, &sigmas, ns).unwrap()
                },
                1e-5,
            );
            let err = max_rel_error(&analytic, &numeric, 1e-4);
            assert!(err < 1e-4, "trial {trial}: max rel error {err}");
        }
    }

    #[test]
    fn adaptive_weight_is_the_clamped_norm_ratio() {
        let a = Tensor::from_rows(&[vec![2.0, 0.0]]);
        let b = Tensor::from_rows(&[vec![0.0, 4.0]]);
        assert_eq!(adaptive_weight(&a, &b), (0.5, false));
        assert_eq!(adaptive_weight(&a, &a), (1.0, false));

        let zero = Tensor::zeros(1, 2);
        assert_eq!(adaptive_weight(&a, &zero), (LAMBDA_MAX, true));

        let huge = Tensor::from_rows(&[vec![1e9, 0.0]]);
        let tiny = Tensor::from_rows(&[vec![1e-9, 0.0]]);
        assert_eq!(adaptive_weight(&huge, &tiny), (LAMBDA_MAX, false));
        assert_eq!(adaptive_weight(&tiny, &huge), (LAMBDA_MIN, false));
    }

    #[test]
    fn generator_step_raises_critic_score_on_fakes() {
        // Frozen linear critic preferring large first coordinates: one
        // adversarial step must push the fakes that way.
        let mut disc = disc_net(2, &[], 11);
        {
            let mut ps = disc.params_mut();
            ps[0].data_mut().copy_from_slice(&[1.0, 0.0]);
        }
        let gen = gen_model(2, &[8], 12);
        let mut rng = Rng::seed_from(13);
        let x0 = random_batch(&mut rng, 16, 2);
        let x1 = random_batch(&mut rng, 16, 2);
        let sigmas: Vec<f64> = (0..16).map(|_| rng.uniform_in(0.1, 2.0)).collect();

        let mean_score = |model: &NetModel| {
            let x = line_states(&x0, &x1, &sigmas);
            let fake = model.endpoint_per_row(&x, &sigmas).unwrap();
            let logits = disc.forward_per_row(&fake, &[]).unwrap();
            logits.data().iter().map(|&z| sigmoid(z)).sum::<f64>() / 16.0
        };

        let before = mean_score(&gen);
        let mut gen = gen;
        let mut lg = generator_adversarial_loss(&gen, &disc, &x0, &x1, &sigmas, false).unwrap();
        lg.backward().unwrap();
        let grads = lg.grads(gen.net());
        let mut opt = OptState::new(AdamConfig::with_learning_rate(1e-2), &gen.net().params());
        opt.apply(&mut gen.net_mut().params_mut(), &grads).unwrap();
        let after = mean_score(&gen);
        assert!(after > before, "critic score went {before} -> {after}");
    }

    #[test]
    fn finetune_runs_and_records_lambda() {
        let mut rng = Rng::seed_from(14);
        let d = 2;
        let m = 64;
        let x0 = random_batch(&mut rng, m, d);
        let x1 = x0.map(|v| 0.5 * v + 0.2);
        let pairs = PairDataset::new(x0, x1, "synthetic", 0).unwrap();
        let sched = VeSchedule::default_range(8).unwrap();

        let gen = gen_model(d, &[16], 15);
        let disc = disc_net(d, &[16], 16);
        let mut cfg = TrainConfig::new(Method::Lmm, 8, 30, 1e-3, 17);
        cfg.adversarial = true;
        cfg.disc_lr = 1e-3;
        cfg.curve_every = 10;
        let out = adversarial_finetune(gen, disc, &pairs, &sched, &cfg).unwrap();
        assert_eq!(out.lambda_history.len(), 30);
        assert_eq!(out.curve.len(), 3);
        assert!(out.curve.iter().all(|p| p.disc_loss.is_some() && p.lambda.is_some()));
        assert!(out.model.net().params().iter().all(|p| p.is_finite()));
        assert!(out.disc.params().iter().all(|p| p.is_finite()));
        assert!(out
            .lambda_history
            .iter()
            .all(|&l| (LAMBDA_MIN..=LAMBDA_MAX).contains(&l)));
    }

    #[test]
    fn finetune_requires_the_adversarial_config() {
        let pairs = {
            let mut rng = Rng::seed_from(18);
            let x0 = random_batch(&mut rng, 8, 2);
            let x1 = random_batch(&mut rng, 8, 2);
            PairDataset::new(x0, x1, "synthetic", 0).unwrap()
        };
        let sched = VeSchedule::default_range(8).unwrap();
        let cfg = TrainConfig::new(Method::Lmm, 4, 5, 1e-3, 0);
        let gen = gen_model(2, &[8], 19);
        let disc = disc_net(2, &[8], 20);
        assert!(adversarial_finetune(gen, disc, &pairs, &sched, &cfg).is_err());
    }
}
