//! The samplers: Heun probability-flow, Euler flow (both directions), the
//! few-step stochastic endpoint sampler, the constant-speed line stepper,
//! and ancestral reverse diffusion.

use crate::dist::Rng;
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::sampler::model::{EndpointModel, NoisePredictor, ScoreModel, VelocityModel};
use crate::sched::{VeSchedule, VpSchedule};

/// Output of a batch sampling run.
pub struct SampleRun {
    pub x_final: Tensor,
    /// Per-step batch states (initial state included) when recording.
    pub snapshots: Option<Vec<Tensor>>,
    /// Model evaluations per sample.
    pub nfe: usize,
}

struct Recorder {
    snapshots: Option<Vec<Tensor>>,
}

impl Recorder {
    fn new(record: bool, x_init: &Tensor) -> Self {
        Recorder { snapshots: record.then(|| vec![x_init.clone()]) }
    }

    fn push(&mut self, x: &Tensor) {
        if let Some(s) = &mut self.snapshots {
            s.push(x.clone());
        }
    }
}

fn check_finite(x: &Tensor, step: usize, what: &str) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::IntegrationDiverged { step, detail: format!("non-finite state in {what}") })
    }
}

/// Deterministic second-order Heun integration of `dx/dσ = −σ·score(x, σ)`
/// down the schedule's σ grid with a trailing zero. The final σ → 0 step is
/// first-order (no correction), so NFE = 2N − 1.
pub fn heun_sample(
    model: &impl ScoreModel,
    schedule: &VeSchedule,
    x_init: &Tensor,
    record: bool,
) -> Result<SampleRun> {
    let sigmas = schedule.sigmas_with_zero();
    let mut x = x_init.clone();
    check_finite(&x, 0, "heun init")?;
    let mut rec = Recorder::new(record, &x);
    let mut nfe = 0;

    let deriv = |x: &Tensor, sigma: f64| -> Result<Tensor> {
        let mut d = model.score(x, sigma)?;
        for v in d.data_mut() {
            *v *= -sigma;
        }
        Ok(d)
    };

    for i in 0..sigmas.len() - 1 {
        let (sigma, sigma_next) = (sigmas[i], sigmas[i + 1]);
        let h = sigma_next - sigma;
        let d = deriv(&x, sigma)?;
        nfe += 1;
        let mut x_next = x.clone();
        x_next.add_assign_scaled(&d, h);
        if sigma_next > 0.0 {
            let d_next = deriv(&x_next, sigma_next)?;
            nfe += 1;
            x_next = x.clone();
            x_next.add_assign_scaled(&d, 0.5 * h);
            x_next.add_assign_scaled(&d_next, 0.5 * h);
        }
        check_finite(&x_next, i, "heun step")?;
        x = x_next;
        rec.push(&x);
    }
    Ok(SampleRun { x_final: x, snapshots: rec.snapshots, nfe })
}

/// Forward Euler for the flow ODE: `x_{k+1} = x_k + (1/K)·N(x_k, k/K)`.
pub fn euler_flow_sample(
    model: &impl VelocityModel,
    steps: usize,
    x_init: &Tensor,
    record: bool,
) -> Result<SampleRun> {
    if steps == 0 {
        return Err(Error::invalid("need at least 1 Euler step"));
    }
    let h = 1.0 / steps as f64;
    let mut x = x_init.clone();
    check_finite(&x, 0, "euler init")?;
    let mut rec = Recorder::new(record, &x);
    for k in 0..steps {
        let t = k as f64 / steps as f64;
        let v = model.velocity(&x, t)?;
        x.add_assign_scaled(&v, h);
        check_finite(&x, k, "euler step")?;
        rec.push(&x);
    }
    Ok(SampleRun { x_final: x, snapshots: rec.snapshots, nfe: steps })
}

/// Euler integration of the negated field from t = 1 down to 0, mapping data
/// back toward the source: `x ← x − (1/K)·N(x, k/K)` for k = K … 1.
pub fn euler_flow_reverse(
    model: &impl VelocityModel,
    steps: usize,
    x_init: &Tensor,
    record: bool,
) -> Result<SampleRun> {
    if steps == 0 {
        return Err(Error::invalid("need at least 1 Euler step"));
    }
    let h = 1.0 / steps as f64;
    let mut x = x_init.clone();
    check_finite(&x, 0, "reverse euler init")?;
    let mut rec = Recorder::new(record, &x);
    for k in (1..=steps).rev() {
        let t = k as f64 / steps as f64;
        let v = model.velocity(&x, t)?;
        x.add_assign_scaled(&v, -h);
        check_finite(&x, k, "reverse euler step")?;
        rec.push(&x);
    }
    Ok(SampleRun { x_final: x, snapshots: rec.snapshots, nfe: steps })
}

/// Few-step stochastic endpoint sampler over the schedule subset `indices`
/// (strictly increasing step indices, so σ strictly decreases):
/// `x ← N(x, σ_{S_j})`, then `x += σ_{S_{j+1}}·η` between evaluations. No
/// noise is added after the final evaluation; NFE = |S|.
pub fn lmm_sample(
    model: &impl EndpointModel,
    schedule: &VeSchedule,
    indices: &[usize],
    x_init: &Tensor,
    rng: &mut Rng,
    record: bool,
) -> Result<SampleRun> {
    if indices.is_empty() {
        return Err(Error::invalid("step subset must be nonempty"));
    }
    if indices.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("step indices must strictly increase"));
    }
    let mut x = x_init.clone();
    check_finite(&x, 0, "lmm init")?;
    let mut rec = Recorder::new(record, &x);
    for (j, &idx) in indices.iter().enumerate() {
        let sigma = schedule.sigma(idx)?;
        x = model.endpoint(&x, sigma)?;
        if let Some(&next_idx) = indices.get(j + 1) {
            let sigma_next = schedule.sigma(next_idx)?;
            for v in x.data_mut() {
                *v += sigma_next * rng.standard_normal();
            }
        }
        check_finite(&x, j, "lmm stage")?;
        rec.push(&x);
    }
    Ok(SampleRun { x_final: x, snapshots: rec.snapshots, nfe: indices.len() })
}

/// Constant-speed step along the model's line: with `v = N(x, σ) − x`,
/// returns `x + ((σ − σ')/σ)·v`. At σ' = 0 this is exactly `N(x, σ)`.
pub fn line_step(
    model: &impl EndpointModel,
    x: &Tensor,
    sigma: f64,
    sigma_next: f64,
) -> Result<Tensor> {
    if !(sigma > 0.0) {
        return Err(Error::invalid(format!("line_step needs σ > 0, got {sigma}")));
    }
    if !(0.0..=sigma).contains(&sigma_next) {
        return Err(Error::invalid(format!(
            "line_step needs 0 ≤ σ' ≤ σ, got σ' = {sigma_next}, σ = {sigma}"
        )));
    }
    let x_hat = model.endpoint(x, sigma)?;
    if sigma_next == 0.0 {
        return Ok(x_hat);
    }
    let frac = (sigma - sigma_next) / sigma;
    let mut out = x.clone();
    let mut v = x_hat;
    v.add_assign_scaled(x, -1.0);
    out.add_assign_scaled(&v, frac);
    Ok(out)
}

/// Deterministic descent of the schedule's full ladder with [`line_step`],
/// one model evaluation per level and no noise re-injection. The trailing
/// σ = 0 step makes the final state exactly the last endpoint prediction.
/// For a model that is exact on a line the recorded path is that line.
pub fn line_path_sample(
    model: &impl EndpointModel,
    schedule: &VeSchedule,
    x_init: &Tensor,
    record: bool,
) -> Result<SampleRun> {
    let sigmas = schedule.sigmas_with_zero();
    let mut x = x_init.clone();
    check_finite(&x, 0, "line path init")?;
    let mut rec = Recorder::new(record, &x);
    let mut nfe = 0;
    for w in sigmas.windows(2) {
        x = line_step(model, &x, w[0], w[1])?;
        nfe += 1;
        check_finite(&x, nfe, "line path step")?;
        rec.push(&x);
    }
    Ok(SampleRun { x_final: x, snapshots: rec.snapshots, nfe })
}

/// Ancestral reverse diffusion for a variance-preserving chain:
/// `x^{t−1} ∼ N((x^t + β_t·N_θ(x^t, t))/√(1−β_t), β_t I)` for t = N … 1,
/// where `N_θ(x, t) = −n̂(x, t/N)/√(1−α_t)`. The final step draws no noise.
pub fn ddpm_reverse_sample(
    model: &impl NoisePredictor,
    schedule: &VpSchedule,
    x_init: &Tensor,
    rng: &mut Rng,
) -> Result<Tensor> {
    let mut x = x_init.clone();
    check_finite(&x, 0, "reverse diffusion init")?;
    for t in (1..=schedule.steps()).rev() {
        let n_hat = model.noise_hat(&x, schedule.t_norm(t))?;
        let beta = schedule.beta(t);
        let alpha = schedule.alpha(t);
        let pred_scale = -1.0 / (1.0 - alpha).sqrt();
        let mean_scale = 1.0 / (1.0 - beta).sqrt();
        for (xv, &nv) in x.data_mut().iter_mut().zip(n_hat.data()) {
            *xv = (*xv + beta * (pred_scale * nv)) * mean_scale;
        }
        if t > 1 {
            let noise_scale = beta.sqrt();
            for v in x.data_mut() {
                *v += noise_scale * rng.standard_normal();
            }
        }
        check_finite(&x, t, "reverse diffusion step")?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::{gaussian_flow_endpoint, noisy_log_density, MixtureSpec};
    use crate::sampler::model::{AnalyticScore, EndpointFn, ScoreFn, VelocityFn};

    pub struct NoiseFn<F>(pub F);

    impl<F: Fn(&Tensor, f64) -> Tensor> NoisePredictor for NoiseFn<F> {
        fn noise_hat(&self, x: &Tensor, t_norm: f64) -> Result<Tensor> {
            Ok((self.0)(x, t_norm))
        }
    }

    fn max_abs_diff(a: &Tensor, b: &[f64]) -> f64 {
        a.data()
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn heun_zero_score_is_stationary() {
        let model = ScoreFn(|x: &Tensor, _s: f64| Tensor::zeros(x.rows(), x.cols()));
        let sched = VeSchedule::default_range(18).unwrap();
        let x0 = Tensor::from_vec(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.0, -1.0]).unwrap();
        let run = heun_sample(&model, &sched, &x0, false).unwrap();
        assert_eq!(run.x_final.data(), x0.data());
        assert_eq!(run.nfe, 35);
    }

    #[test]
    fn heun_matches_gaussian_closed_form_at_second_order() {
        let spec = MixtureSpec::single(vec![1.0, 0.0], vec![1.0, 1.0]).unwrap();
        let model = AnalyticScore(spec.clone());
        let x0 = Tensor::from_vec(2, 2, vec![11.0, 5.0, -7.0, 2.5]).unwrap();

        let endpoint_err = |steps: usize| -> f64 {
            let sched = VeSchedule::default_range(steps).unwrap();
            let run = heun_sample(&model, &sched, &x0, false).unwrap();
            let mut worst = 0.0f64;
            for i in 0..x0.rows() {
                // Closed form down to σ_min; the trailing σ_min → 0 hop is
                // shared by both resolutions and does not affect the ratio,
                // but include it for a fair endpoint comparison.
                let exact =
                    gaussian_flow_endpoint(x0.row(i), 80.0, 0.0, &spec).unwrap();
                worst = worst.max(max_abs_diff_row(run.x_final.row(i), &exact));
            }
            worst
        };

        let coarse = endpoint_err(24);
        let fine = endpoint_err(48);
        assert!(coarse < 0.05, "coarse error {coarse}");
        let ratio = coarse / fine;
        assert!((3.0..=4.5).contains(&ratio), "order ratio {ratio}");
    }

    fn max_abs_diff_row(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn heun_toy_endpoints_commit_to_one_component() {
        let spec = MixtureSpec::opposed_pair(128, 1.0, 0.1, 1.0).unwrap();
        let model = AnalyticScore(spec.clone());
        let sched = VeSchedule::default_range(18).unwrap();
        let mut rng = Rng::seed_from(2718);
        let mut x0 = Tensor::zeros(64, 128);
        rng.fill_standard_normal(x0.data_mut());
        for v in x0.data_mut() {
            *v *= 80.0;
        }
        let run = heun_sample(&model, &sched, &x0, false).unwrap();
        for i in 0..64 {
            let x = run.x_final.row(i);
            // Posterior over components at σ = 0.
            let mut best_resp = 0.0f64;
            let mut best_k = 0;
            let full = noisy_log_density(&spec, x, 0.0);
            for (k, c) in spec.components.iter().enumerate() {
                let single =
                    MixtureSpec::single(c.mean.clone(), c.stds.clone()).unwrap();
                let lk = c.weight.ln() + noisy_log_density(&single, x, 0.0);
                let resp = (lk - full).exp();
                if resp > best_resp {
                    best_resp = resp;
                    best_k = k;
                }
            }
            assert!(best_resp > 0.99, "row {i}: posterior {best_resp}");
            let c = &spec.components[best_k];
            let z_rms: f64 = (x
                .iter()
                .zip(&c.mean)
                .zip(&c.stds)
                .map(|((&xv, &m), &s)| ((xv - m) / s).powi(2))
                .sum::<f64>()
                / 128.0)
                .sqrt();
            assert!(z_rms < 4.0, "row {i}: rms deviation {z_rms} stds");
        }
    }

    #[test]
    fn euler_constant_field_is_exact() {
        let v = [0.5, -1.25];
        let model = VelocityFn(move |x: &Tensor, _t: f64| {
            let mut out = Tensor::zeros(x.rows(), x.cols());
            for i in 0..x.rows() {
                out.row_mut(i).copy_from_slice(&v);
            }
            out
        });
        let x0 = Tensor::row_vector(&[1.0, 2.0]);
        for steps in [1usize, 2, 4, 8, 64] {
            let run = euler_flow_sample(&model, steps, &x0, false).unwrap();
            assert_eq!(run.x_final.data(), &[1.5, 0.75], "K = {steps}");
            assert_eq!(run.nfe, steps);
        }
    }

    #[test]
    fn euler_linear_field_matches_closed_form() {
        let model = VelocityFn(|x: &Tensor, _t: f64| x.map(|v| -v));
        let x0 = Tensor::row_vector(&[2.0]);
        for steps in [4usize, 16, 256] {
            let run = euler_flow_sample(&model, steps, &x0, false).unwrap();
            let expect = 2.0 * (1.0 - 1.0 / steps as f64).powi(steps as i32);
            assert!((run.x_final.scalar_value() - expect).abs() < 1e-12);
        }
        let run = euler_flow_sample(&model, 4096, &x0, false).unwrap();
        let limit = 2.0 * (-1.0f64).exp();
        assert!((run.x_final.scalar_value() - limit).abs() < 1e-3);
    }

    #[test]
    fn euler_single_step_is_one_eval_plus_add() {
        let model = VelocityFn(|x: &Tensor, t: f64| x.map(|v| v * v + t));
        let x0 = Tensor::row_vector(&[1.5, -0.5]);
        let run = euler_flow_sample(&model, 1, &x0, false).unwrap();
        let v = model.velocity(&x0, 0.0).unwrap();
        let mut expect = x0.clone();
        expect.add_assign_scaled(&v, 1.0);
        assert_eq!(run.x_final.data(), expect.data());
    }

    #[test]
    fn reverse_undoes_constant_field_exactly() {
        let model = VelocityFn(|x: &Tensor, _t: f64| Tensor::filled(x.rows(), x.cols(), 0.75));
        let x0 = Tensor::row_vector(&[1.0, -2.0]);
        let fwd = euler_flow_sample(&model, 8, &x0, false).unwrap();
        let back = euler_flow_reverse(&model, 8, &fwd.x_final, false).unwrap();
        assert_eq!(back.x_final.data(), x0.data());
    }

    #[test]
    fn reverse_round_trip_error_shrinks_with_steps() {
        let model = VelocityFn(|x: &Tensor, _t: f64| x.map(|v| -v));
        let x0 = Tensor::row_vector(&[3.0]);
        let round_trip_err = |steps: usize| -> f64 {
            let fwd = euler_flow_sample(&model, steps, &x0, false).unwrap();
            let back = euler_flow_reverse(&model, steps, &fwd.x_final, false).unwrap();
            (back.x_final.scalar_value() - 3.0).abs()
        };
        let coarse = round_trip_err(16);
        let fine = round_trip_err(64);
        assert!(fine < coarse, "round-trip error did not shrink: {coarse} -> {fine}");
    }

    #[test]
    fn lmm_single_stage_is_deterministic_eval() {
        let model = EndpointFn(|x: &Tensor, s: f64| x.map(|v| v / s));
        let sched = VeSchedule::default_range(18).unwrap();
        let x0 = Tensor::row_vector(&[8.0, -16.0]);
        let mut rng_a = Rng::seed_from(1);
        let mut rng_b = Rng::seed_from(999);
        let a = lmm_sample(&model, &sched, &[0], &x0, &mut rng_a, false).unwrap();
        let b = lmm_sample(&model, &sched, &[0], &x0, &mut rng_b, false).unwrap();
        let direct = model.endpoint(&x0, 80.0).unwrap();
        assert_eq!(a.x_final.data(), direct.data());
        assert_eq!(b.x_final.data(), direct.data());
        assert_eq!(a.nfe, 1);
    }

    #[test]
    fn lmm_fixed_endpoint_oracle_always_lands_on_it() {
        let target = [3.0, -2.0];
        let model = EndpointFn(move |x: &Tensor, _s: f64| {
            let mut out = Tensor::zeros(x.rows(), x.cols());
            for i in 0..x.rows() {
                out.row_mut(i).copy_from_slice(&target);
            }
            out
        });
        let sched = VeSchedule::default_range(18).unwrap();
        let x0 = Tensor::row_vector(&[50.0, 70.0]);
        let mut rng = Rng::seed_from(7);
        for indices in [vec![0], vec![0, 9], vec![0, 5, 9, 17], vec![3, 11]] {
            let run = lmm_sample(&model, &sched, &indices, &x0, &mut rng, false).unwrap();
            assert_eq!(run.x_final.data(), &target);
            assert_eq!(run.nfe, indices.len());
        }
    }

    #[test]
    fn lmm_intermediate_state_has_documented_law() {
        // Two stages (0, 1): after the first evaluation the state is
        // x₁ + σ₁·η with η standard normal.
        let target = [3.0, -2.0];
        let model = EndpointFn(move |x: &Tensor, _s: f64| {
            let mut out = Tensor::zeros(x.rows(), x.cols());
            for i in 0..x.rows() {
                out.row_mut(i).copy_from_slice(&target);
            }
            out
        });
        let sched = VeSchedule::default_range(18).unwrap();
        let sigma1 = sched.sigma(1).unwrap();
        let x0 = Tensor::row_vector(&[10.0, 20.0]);
        let mut rng = Rng::seed_from(12);
        let runs = 10_000;
        let mut sum = [0.0f64; 2];
        let mut sum_sq = [0.0f64; 2];
        for _ in 0..runs {
            let run = lmm_sample(&model, &sched, &[0, 1], &x0, &mut rng, true).unwrap();
            let snaps = run.snapshots.unwrap();
            assert_eq!(snaps.len(), 3);
            let mid = &snaps[1];
            for j in 0..2 {
                let v = mid.get(0, j);
                sum[j] += v;
                sum_sq[j] += v * v;
            }
        }
        for j in 0..2 {
            let mean = sum[j] / runs as f64;
            let var = sum_sq[j] / runs as f64 - mean * mean;
            let mean_se = sigma1 / (runs as f64).sqrt();
            assert!((mean - target[j]).abs() < 4.0 * mean_se, "axis {j} mean {mean}");
            assert!(
                (var.sqrt() - sigma1).abs() < 0.03 * sigma1,
                "axis {j} std {} vs {sigma1}",
                var.sqrt()
            );
        }
    }

    #[test]
    fn line_step_exact_line_oracle_algebra() {
        let x1 = [1.0, -0.5];
        let model = EndpointFn(move |x: &Tensor, _s: f64| {
            let mut out = Tensor::zeros(x.rows(), x.cols());
            for i in 0..x.rows() {
                out.row_mut(i).copy_from_slice(&x1);
            }
            out
        });
        let x0 = [0.3, 0.9];
        let sigma = 5.0;
        let state = Tensor::row_vector(&[x1[0] + sigma * x0[0], x1[1] + sigma * x0[1]]);
        for sigma_next in [4.0, 2.5, 1.0, 0.1] {
            let out = line_step(&model, &state, sigma, sigma_next).unwrap();
            let expect = [x1[0] + sigma_next * x0[0], x1[1] + sigma_next * x0[1]];
            assert!(max_abs_diff(&out, &expect) < 1e-12, "σ' = {sigma_next}");
        }
        // σ' = σ is the identity; σ' = 0 is exactly the evaluation.
        let same = line_step(&model, &state, sigma, sigma).unwrap();
        assert_eq!(same.data(), state.data());
        let zero = line_step(&model, &state, sigma, 0.0).unwrap();
        assert_eq!(zero.data(), &x1);
    }

    #[test]
    fn line_step_transitivity() {
        let x1 = [2.0, 1.0, -3.0];
        let model = EndpointFn(move |x: &Tensor, _s: f64| {
            let mut out = Tensor::zeros(x.rows(), x.cols());
            for i in 0..x.rows() {
                out.row_mut(i).copy_from_slice(&x1);
            }
            out
        });
        let x0 = [1.0, -1.0, 0.5];
        let sigma = 8.0;
        let state = Tensor::row_vector(&[
            x1[0] + sigma * x0[0],
            x1[1] + sigma * x0[1],
            x1[2] + sigma * x0[2],
        ]);
        let direct = line_step(&model, &state, sigma, 1.5).unwrap();
        let mid = line_step(&model, &state, sigma, 4.0).unwrap();
        let via = line_step(&model, &mid, 4.0, 1.5).unwrap();
        for (a, b) in direct.data().iter().zip(via.data()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn line_step_rejects_bad_sigmas() {
        let model = EndpointFn(|x: &Tensor, _s: f64| x.clone());
        let x = Tensor::row_vector(&[1.0]);
        assert!(line_step(&model, &x, 0.0, 0.0).is_err());
        assert!(line_step(&model, &x, -1.0, 0.0).is_err());
        assert!(line_step(&model, &x, 1.0, 2.0).is_err());
        assert!(line_step(&model, &x, 1.0, -0.1).is_err());
    }

    #[test]
    fn line_path_descends_an_exact_line_without_leaving_it() {
        let x1 = [1.0, -0.5, 2.0];
        let x0 = [0.4, -1.1, 0.7];
        // Inverts the line state: N(x₁ + σ·x₀, σ) = x₁ for this one line.
        let model = EndpointFn(move |x: &Tensor, s: f64| {
            let mut out = x.clone();
            for (o, &u) in out.data_mut().iter_mut().zip(x0.iter().cycle()) {
                *o -= s * u;
            }
            out
        });
        let sched = VeSchedule::new(0.01, 10.0, 7.0, 12).unwrap();
        let init = Tensor::row_vector(&[
            x1[0] + 10.0 * x0[0],
            x1[1] + 10.0 * x0[1],
            x1[2] + 10.0 * x0[2],
        ]);
        let run = line_path_sample(&model, &sched, &init, true).unwrap();
        assert_eq!(run.nfe, 12);
        let snaps = run.snapshots.as_ref().unwrap();
        assert_eq!(snaps.len(), 13);
        for (snap, &sigma) in snaps.iter().zip(&sched.sigmas_with_zero()) {
            for (j, &v) in snap.data().iter().enumerate() {
                let expect = x1[j] + sigma * x0[j];
                assert!((v - expect).abs() < 1e-10, "σ = {sigma}, axis {j}");
            }
        }
        assert!(max_abs_diff(&run.x_final, &x1) < 1e-10);
    }

    #[test]
    fn line_path_constant_endpoint_lands_exactly() {
        let model = EndpointFn(|x: &Tensor, _s: f64| {
            Tensor::filled(x.rows(), x.cols(), 3.5)
        });
        let sched = VeSchedule::default_range(6).unwrap();
        let init = Tensor::from_vec(2, 2, vec![80.0, -160.0, 40.0, 0.0]).unwrap();
        let run = line_path_sample(&model, &sched, &init, false).unwrap();
        assert!(run.snapshots.is_none());
        assert_eq!(run.x_final.data(), &[3.5, 3.5, 3.5, 3.5]);
        assert_eq!(run.nfe, 6);
    }

    #[test]
    fn reverse_diffusion_zero_net_single_step_scaling() {
        let model = NoiseFn(|x: &Tensor, _t: f64| Tensor::zeros(x.rows(), x.cols()));
        let sched = VpSchedule::linear(0.1, 0.2, 1).unwrap();
        let x0 = Tensor::row_vector(&[2.0, -4.0]);
        let mut rng = Rng::seed_from(3);
        let out = ddpm_reverse_sample(&model, &sched, &x0, &mut rng).unwrap();
        let scale = 1.0 / (1.0f64 - 0.1).sqrt();
        assert_eq!(out.data(), &[2.0 * scale, -4.0 * scale]);
    }

    #[test]
    fn reverse_diffusion_tiny_beta_is_near_identity() {
        let model = NoiseFn(|x: &Tensor, _t: f64| Tensor::zeros(x.rows(), x.cols()));
        let sched = VpSchedule::linear(1e-12, 2e-12, 1).unwrap();
        let x0 = Tensor::row_vector(&[5.0]);
        let mut rng = Rng::seed_from(4);
        let out = ddpm_reverse_sample(&model, &sched, &x0, &mut rng).unwrap();
        assert!((out.scalar_value() - 5.0).abs() < 1e-9);
    }

    #[test]
    fn divergence_is_reported_with_step() {
        let model = ScoreFn(|x: &Tensor, _s: f64| Tensor::filled(x.rows(), x.cols(), f64::NAN));
        let sched = VeSchedule::default_range(8).unwrap();
        let x0 = Tensor::row_vector(&[1.0]);
        let err = heun_sample(&model, &sched, &x0, false);
        assert!(matches!(err, Err(Error::IntegrationDiverged { step: 0, .. })));
    }

    #[test]
    fn lmm_validates_index_subsets() {
        let model = EndpointFn(|x: &Tensor, _s: f64| x.clone());
        let sched = VeSchedule::default_range(18).unwrap();
        let x0 = Tensor::row_vector(&[1.0]);
        let mut rng = Rng::seed_from(5);
        assert!(lmm_sample(&model, &sched, &[], &x0, &mut rng, false).is_err());
        assert!(lmm_sample(&model, &sched, &[3, 3], &x0, &mut rng, false).is_err());
        assert!(lmm_sample(&model, &sched, &[5, 2], &x0, &mut rng, false).is_err());
        assert!(lmm_sample(&model, &sched, &[0, 99], &x0, &mut rng, false).is_err());
    }
}
