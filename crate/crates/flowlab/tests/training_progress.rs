//! Longer training runs that are too slow for the unit suites: endpoint
//! regression on teacher pairs must actually converge, and the adversarial
//! loop must stay finite and inside its weight clamp over a sustained run.

use flowlab::dist::{MixtureSpec, Rng};
use flowlab::nn::{Activation, Conditioning, Mlp};
use flowlab::pairing::generate_pairs;
use flowlab::sampler::{AnalyticScore, ModelKind, NetModel};
use flowlab::sched::VeSchedule;
use flowlab::train::{
    adversarial_finetune, lines_loss_value, train, DataSource, LossNorm, Method, Schedules,
    SigmaLaw, TrainConfig, LAMBDA_MAX, LAMBDA_MIN,
};

fn toy() -> (MixtureSpec, VeSchedule) {
    let spec = MixtureSpec::opposed_pair(8, 1.0, 0.1, 1.0).unwrap();
    let sched = VeSchedule::default_range(24).unwrap();
    (spec, sched)
}

fn endpoint_model(d: usize, hidden: &[usize], seed: u64) -> NetModel {
    let mut rng = Rng::seed_from(seed);
    let net =
        Mlp::new(d, hidden, d, Activation::Silu, Conditioning::LogSigma, 8, &mut rng).unwrap();
    NetModel::new(net, ModelKind::Endpoint, 1.0).unwrap()
}

fn log_uniform_sigmas(n: usize, sched: &VeSchedule, rng: &mut Rng) -> Vec<f64> {
    let (lo, hi) = (sched.sigma_min.ln(), sched.sigma_max.ln());
    (0..n).map(|_| rng.uniform_in(lo, hi).exp()).collect()
}

#[test]
fn endpoint_training_on_teacher_pairs_converges() {
    let (spec, sched) = toy();
    let pairs = generate_pairs(&AnalyticScore(spec), &sched, 4096, 8, "analytic", 5).unwrap();
    let (train_half, eval_half) = pairs.split_at(3584).unwrap();

    // Fixed evaluation batch: the same held-out pairs and σ draws before and
    // after training, so the two losses are directly comparable.
    let mut rng = Rng::seed_from(314);
    let sigmas = log_uniform_sigmas(eval_half.len(), &sched, &mut rng);
    let eval = |model: &NetModel| {
        lines_loss_value(model, eval_half.x0(), eval_half.x1(), &sigmas, LossNorm::L2).unwrap()
    };

    let mut out = flowlab::train::TrainOutcome {
        model: endpoint_model(8, &[64, 64], 21),
        curve: Vec::new(),
    };
    let before = eval(&out.model);
    for (phase, (iters, lr)) in [(4000usize, 2e-3), (1500, 2e-4)].into_iter().enumerate() {
        let mut cfg = TrainConfig::new(Method::Lmm, 128, iters, lr, 100 + phase as u64);
        cfg.sigma_law = SigmaLaw::LogUniform;
        out = train(
            out.model,
            &cfg,
            &DataSource::Pairs(&train_half),
            &Schedules { ve: Some(&sched), vp: None },
        )
        .unwrap();
    }
    let after = eval(&out.model);
    assert!(
        after < 0.05 * before,
        "loss only fell from {before} to {after}; need a 20x drop"
    );
}

#[test]
fn adversarial_loop_stays_finite_and_clamped_over_a_long_run() {
    let (spec, sched) = toy();
    let pairs = generate_pairs(&AnalyticScore(spec), &sched, 2048, 8, "analytic", 6).unwrap();

    let model = endpoint_model(8, &[48, 48], 33);
    let mut rng = Rng::seed_from(34);
    let disc = Mlp::new(
        8,
        &[32, 32, 32],
        1,
        Activation::Silu,
        Conditioning::Unconditioned,
        0,
        &mut rng,
    )
    .unwrap();

    let mut cfg = TrainConfig::new(Method::Lmm, 64, 1000, 1e-3, 55);
    cfg.sigma_law = SigmaLaw::LogUniform;
    cfg.adversarial = true;
    cfg.disc_lr = 1e-3;
    let out = adversarial_finetune(model, disc, &pairs, &sched, &cfg).unwrap();

    assert_eq!(out.lambda_history.len(), 1000);
    assert!(out
        .lambda_history
        .iter()
        .all(|l| l.is_finite() && (LAMBDA_MIN..=LAMBDA_MAX).contains(l)));
    assert!(out.curve.iter().all(|p| {
        p.loss.is_finite() && p.disc_loss.is_none_or(f64::is_finite)
    }));
    for p in out.model.net().params() {
        assert!(p.is_finite(), "generator parameters left the finite range");
    }
    for p in out.disc.params() {
        assert!(p.is_finite(), "critic parameters left the finite range");
    }

    // The combined objective's regression part is still evaluable and finite.
    let mut rng = Rng::seed_from(77);
    let sigmas = log_uniform_sigmas(pairs.len().min(256), &sched, &mut rng);
    let probe: Vec<usize> = (0..sigmas.len()).collect();
    let (x0, x1) = pairs.gather(&probe).unwrap();
    let lines = lines_loss_value(&out.model, &x0, &x1, &sigmas, LossNorm::L2).unwrap();
    assert!(lines.is_finite(), "regression loss after fine-tuning: {lines}");
}
