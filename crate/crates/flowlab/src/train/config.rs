//! Training configuration: method tags, noise-level sampling laws, norms.

use crate::dist::Rng;
use crate::error::{Error, Result};
use crate::sched::VeSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Denoising score matching on a variance-exploding ladder.
    Dsm,
    /// Discrete-time denoising (variance-preserving ladder).
    Ddpm,
    /// Conditional flow matching with independent pairing.
    Cfm,
    /// Flow matching on batch-optimal pairs.
    BotCfm,
    /// Endpoint regression along noise lines from a cached pair set.
    Lmm,
}

impl Method {
    pub fn tag(&self) -> &'static str {
        match self {
            Method::Dsm => "dsm",
            Method::Ddpm => "ddpm",
            Method::Cfm => "cfm",
            Method::BotCfm => "bot-cfm",
            Method::Lmm => "lmm",
        }
    }
}

/// Batch-mean of per-row sums of squared differences. Single variant today;
/// the tag exists so configs can name the norm and future feature-space norms
/// can slot in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossNorm {
    #[default]
    L2,
}

/// How noise levels are drawn during training.
#[derive(Debug, Clone, PartialEq)]
pub enum SigmaLaw {
    /// `exp(U(ln sigma_min, ln sigma_max))` over the schedule's range.
    LogUniform,
    /// Uniform over the schedule's discrete levels.
    ScheduleUniform,
    /// Uniform over the given schedule indices only. Build via [`sot_filter`]
    /// so the indices are validated against the schedule.
    StepSet(Vec<usize>),
}

impl SigmaLaw {
    /// One noise level. `StepSet` and `ScheduleUniform` index the schedule's
    /// ladder; `LogUniform` uses only its range.
    pub fn draw(&self, sched: &VeSchedule, rng: &mut Rng) -> f64 {
        match self {
            SigmaLaw::LogUniform => {
                rng.uniform_in(sched.sigma_min.ln(), sched.sigma_max.ln()).exp()
            }
            SigmaLaw::ScheduleUniform => {
                let sigmas = sched.sigmas();
                sigmas[rng.index(sigmas.len())]
            }
            SigmaLaw::StepSet(steps) => {
                let sigmas = sched.sigmas();
                sigmas[steps[rng.index(steps.len())]]
            }
        }
    }

    pub fn draw_many(&self, n: usize, sched: &VeSchedule, rng: &mut Rng) -> Vec<f64> {
        (0..n).map(|_| self.draw(sched, rng)).collect()
    }
}

/// Restricts training noise levels to the steps actually visited at inference
/// time. The set must be nonempty and lie inside the schedule.
pub fn sot_filter(steps: &[usize], sched: &VeSchedule) -> Result<SigmaLaw> {
    if steps.is_empty() {
        return Err(Error::invalid("inference step set cannot be empty"));
    }
    for &t in steps {
        if t >= sched.steps {
            return Err(Error::invalid(format!(
                "step {t} outside schedule of {} levels",
                sched.steps
            )));
        }
    }
    Ok(SigmaLaw::StepSet(steps.to_vec()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub method: Method,
    pub batch: usize,
    pub iters: usize,
    pub lr: f64,
    pub sigma_law: SigmaLaw,
    pub norm: LossNorm,
    /// Weight on the endpoint-regression term when adversarial fine-tuning is
    /// on; unused otherwise.
    pub lambda_lines: f64,
    pub adversarial: bool,
    pub disc_lr: f64,
    /// Generator term uses `-E[ln D(fake)]` instead of the literal
    /// `E[ln(1 - D(fake))]` when set. Off by default.
    pub non_saturating: bool,
    /// Loss-curve sampling stride in iterations; also the stride at which the
    /// last-good snapshot for divergence reporting is refreshed.
    pub curve_every: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(method: Method, batch: usize, iters: usize, lr: f64, seed: u64) -> Self {
        TrainConfig {
            method,
            batch,
            iters,
            lr,
            sigma_law: match method {
                Method::Lmm => SigmaLaw::LogUniform,
                _ => SigmaLaw::ScheduleUniform,
            },
            norm: LossNorm::L2,
            lambda_lines: 0.5,
            adversarial: false,
            disc_lr: 1e-4,
            non_saturating: false,
            curve_every: 10,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if self.curve_every == 0 {
            return Err(Error::invalid("curve stride must be positive"));
        }
        if let SigmaLaw::StepSet(steps) = &self.sigma_law {
            if steps.is_empty() {
                return Err(Error::invalid("inference step set cannot be empty"));
            }
        }
        if self.adversarial {
            if !(self.lambda_lines > 0.0) {
                return Err(Error::invalid(
                    "adversarial fine-tuning needs lambda_lines > 0",
                ));
            }
            if !(self.disc_lr > 0.0) {
                return Err(Error::invalid("discriminator learning rate must be positive"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sot_filter_validates_the_step_set() {
        let sched = VeSchedule::default_range(10).unwrap();
        assert!(matches!(
            sot_filter(&[], &sched),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            sot_filter(&[10], &sched),
            Err(Error::InvalidArgument(_))
        ));
        assert!(sot_filter(&[0, 9], &sched).is_ok());
    }

    #[test]
    fn singleton_step_set_always_draws_that_level() {
        let sched = VeSchedule::default_range(10).unwrap();
        let law = sot_filter(&[0], &sched).unwrap();
        let mut rng = Rng::seed_from(1);
        for _ in 0..100 {
            assert_eq!(law.draw(&sched, &mut rng), sched.sigma_max);
        }
    }

    #[test]
    fn full_step_set_matches_schedule_uniform_support() {
        let sched = VeSchedule::default_range(6).unwrap();
        let all: Vec<usize> = (0..6).collect();
        let law = sot_filter(&all, &sched).unwrap();
        let sigmas = sched.sigmas();
        let mut rng = Rng::seed_from(2);
        for _ in 0..200 {
            let s = law.draw(&sched, &mut rng);
            assert!(sigmas.contains(&s));
        }
    }

    #[test]
    fn two_level_set_draws_near_evenly() {
        let sched = VeSchedule::default_range(10).unwrap();
        let law = sot_filter(&[0, 1], &sched).unwrap();
        let sigmas = sched.sigmas();
        let mut rng = Rng::seed_from(3);
        let n = 10_000;
        let hits_first = (0..n)
            .filter(|_| law.draw(&sched, &mut rng) == sigmas[0])
            .count();
        let freq = hits_first as f64 / n as f64;
        assert!((freq - 0.5).abs() < 0.02, "frequency {freq}");
    }

    #[test]
    fn log_uniform_stays_in_range_and_spreads() {
        let sched = VeSchedule::default_range(18).unwrap();
        let mut rng = Rng::seed_from(4);
        let draws = SigmaLaw::LogUniform.draw_many(2000, &sched, &mut rng);
        assert!(draws
            .iter()
            .all(|&s| (sched.sigma_min..=sched.sigma_max).contains(&s)));
        // Log-uniform puts half the mass below the geometric midpoint.
        let mid = (sched.sigma_min * sched.sigma_max).sqrt();
        let below = draws.iter().filter(|&&s| s < mid).count() as f64 / 2000.0;
        assert!((below - 0.5).abs() < 0.05, "below-mid mass {below}");
    }

    #[test]
    fn config_validation_catches_bad_fields() {
        let mut cfg = TrainConfig::new(Method::Lmm, 16, 100, 1e-3, 0);
        assert!(cfg.validate().is_ok());
        cfg.batch = 0;
        assert!(cfg.validate().is_err());
        cfg.batch = 16;
        cfg.lr = 0.0;
        assert!(cfg.validate().is_err());
        cfg.lr = 1e-3;
        cfg.adversarial = true;
        cfg.lambda_lines = 0.0;
        assert!(cfg.validate().is_err());
        cfg.lambda_lines = 0.5;
        assert!(cfg.validate().is_ok());
        cfg.sigma_law = SigmaLaw::StepSet(vec![]);
        assert!(cfg.validate().is_err());
    }
}
