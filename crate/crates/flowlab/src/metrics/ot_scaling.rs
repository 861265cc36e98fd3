//! Batch-size scaling of in-batch alignment for isotropic Gaussian vectors.
//!
//! One trial draws a source vector and `n` independent candidates, all
//! standard normal in dimension `d`, and records the best normalized dot
//! product `maxᵢ ⟨x₁ⁱ, x₀⟩/d`. Its expectation is bounded by
//! `√(2 ln n / d)`, so pushing the best in-batch match towards a fixed
//! alignment level needs batches exponential in the dimension.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dist::Rng;
use crate::error::{Error, Result};

use super::report::MetricRow;

/// Trials per worker unit; fixed so results are independent of thread count.
const CHUNK: usize = 256;

/// One grid cell of the study. `bound` is `√(2 ln n / d)`, zero only for
/// `n = 1`; `var_dot` estimates Var(⟨x, y⟩/d) from all `dots` individual
/// products seen in the cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OtCell {
    pub d: usize,
    pub n: usize,
    pub mean_max_dot: f64,
    pub stderr: f64,
    pub bound: f64,
    pub var_dot: f64,
    pub dots: usize,
}

/// Monte-Carlo grid over dimensions and batch sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OtScalingReport {
    cells: Vec<OtCell>,
    trials: usize,
}

impl OtScalingReport {
    pub fn cells(&self) -> &[OtCell] {
        &self.cells
    }

    pub fn trials(&self) -> usize {
        self.trials
    }

    pub fn cell(&self, d: usize, n: usize) -> Option<&OtCell> {
        self.cells.iter().find(|c| c.d == d && c.n == n)
    }

    /// Flat export: a mean row with its standard error, plus the closed-form
    /// bound and the dot-variance estimate per cell. The method column is
    /// empty; the study involves no trained model.
    pub fn rows(&self) -> Vec<MetricRow> {
        let mut rows = Vec::with_capacity(3 * self.cells.len());
        for c in &self.cells {
            rows.push(MetricRow {
                metric: "ot_max_dot".into(),
                method: String::new(),
                d: Some(c.d),
                n: Some(c.n),
                value: c.mean_max_dot,
                stderr: Some(c.stderr),
            });
            rows.push(MetricRow {
                metric: "ot_bound".into(),
                method: String::new(),
                d: Some(c.d),
                n: Some(c.n),
                value: c.bound,
                stderr: None,
            });
            rows.push(MetricRow {
                metric: "ot_dot_var".into(),
                method: String::new(),
                d: Some(c.d),
                n: Some(c.n),
                value: c.var_dot,
                stderr: None,
            });
        }
        rows
    }
}

#[derive(Clone, Copy, Default)]
struct Sums {
    max_sum: f64,
    max_sq: f64,
    trials: usize,
    dot_sum: f64,
    dot_sq: f64,
    dots: usize,
}

fn run_chunk(d: usize, n: usize, trials: usize, rng: &mut Rng) -> Sums {
    let mut s = Sums::default();
    let mut x0 = vec![0.0; d];
    let mut cand = vec![0.0; d];
    let inv_d = 1.0 / d as f64;
    for _ in 0..trials {
        rng.fill_standard_normal(&mut x0);
        let mut best = f64::NEG_INFINITY;
        for _ in 0..n {
            rng.fill_standard_normal(&mut cand);
            let dot: f64 = cand.iter().zip(&x0).map(|(a, b)| a * b).sum::<f64>() * inv_d;
            s.dot_sum += dot;
            s.dot_sq += dot * dot;
            best = best.max(dot);
        }
        s.max_sum += best;
        s.max_sq += best * best;
    }
    s.trials = trials;
    s.dots = trials * n;
    s
}

/// Runs the full (d, n) grid with `trials` Monte-Carlo trials per cell.
/// Trials are split over fixed-size worker chunks with their own labelled
/// streams of `rng`, and chunk sums are reduced in index order, so the
/// result is a pure function of the arguments.
pub fn ot_scaling_study(
    ds: &[usize],
    ns: &[usize],
    trials: usize,
    rng: &Rng,
) -> Result<OtScalingReport> {
    if trials < 100 {
        return Err(Error::invalid(format!(
            "the study needs at least 100 trials per cell, got {trials}"
        )));
    }
    if ds.is_empty() || ns.is_empty() {
        return Err(Error::invalid("dimension and batch-size lists must be non-empty"));
    }
    if ds.iter().any(|&d| d == 0) || ns.iter().any(|&n| n == 0) {
        return Err(Error::invalid("dimensions and batch sizes must be positive"));
    }

    let grid: Vec<(usize, usize)> = ds
        .iter()
        .flat_map(|&d| ns.iter().map(move |&n| (d, n)))
        .collect();
    let chunk_count = trials.div_ceil(CHUNK);

    let cells: Vec<OtCell> = grid
        .iter()
        .enumerate()
        .map(|(cell_idx, &(d, n))| {
            let cell_rng = rng.stream(cell_idx as u64);
            let partials: Vec<Sums> = (0..chunk_count)
                .into_par_iter()
                .map(|chunk| {
                    let mut r = cell_rng.stream(chunk as u64);
                    let lo = chunk * CHUNK;
                    let hi = ((chunk + 1) * CHUNK).min(trials);
                    run_chunk(d, n, hi - lo, &mut r)
                })
                .collect();
            let mut total = Sums::default();
            for p in partials {
                total.max_sum += p.max_sum;
                total.max_sq += p.max_sq;
                total.trials += p.trials;
                total.dot_sum += p.dot_sum;
                total.dot_sq += p.dot_sq;
                total.dots += p.dots;
            }
            let t = total.trials as f64;
            let mean = total.max_sum / t;
            let var_max = (total.max_sq - t * mean * mean) / (t - 1.0);
            let k = total.dots as f64;
            let dot_mean = total.dot_sum / k;
            let var_dot = if total.dots > 1 {
                (total.dot_sq - k * dot_mean * dot_mean) / (k - 1.0)
            } else {
                0.0
            };
            OtCell {
                d,
                n,
                mean_max_dot: mean,
                stderr: (var_max.max(0.0) / t).sqrt(),
                bound: (2.0 * (n as f64).ln() / d as f64).sqrt(),
                var_dot,
                dots: total.dots,
            }
        })
        .collect();

    for c in &cells {
        if !(c.stderr > 0.0) {
            return Err(Error::invalid(format!(
                "degenerate cell d={} n={}: zero standard error",
                c.d, c.n
            )));
        }
    }
    Ok(OtScalingReport { cells, trials })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_candidate_is_unbiased_and_dot_variance_is_one_over_d() {
        let rng = Rng::seed_from(41);
        let rep = ot_scaling_study(&[128], &[1], 100_000, &rng).unwrap();
        let c = rep.cell(128, 1).unwrap();
        assert_eq!(c.dots, 100_000);
        assert_eq!(c.bound, 0.0);
        assert!(
            c.mean_max_dot.abs() <= 3.0 * c.stderr,
            "mean {} vs 3·se {}",
            c.mean_max_dot,
            3.0 * c.stderr
        );
        let rel = (c.var_dot * 128.0 - 1.0).abs();
        assert!(rel <= 0.10, "Var·d off by {rel}");
    }

    #[test]
    fn best_match_stays_below_the_closed_form_bound() {
        let rng = Rng::seed_from(42);
        let rep = ot_scaling_study(&[128], &[256], 600, &rng).unwrap();
        let c = rep.cell(128, 256).unwrap();
        // √(2 ln 256 / 128), digits pinned from an independent evaluation.
        assert!((c.bound - 0.294_352_505_628_868_67).abs() < 1e-12, "bound {}", c.bound);
        assert!(c.mean_max_dot <= c.bound, "mean {} above bound {}", c.mean_max_dot, c.bound);
        // The mean is well inside (0, bound): a sanity corridor, not a bound.
        assert!(c.mean_max_dot > 0.15 && c.mean_max_dot < 0.28, "mean {}", c.mean_max_dot);
    }

    #[test]
    fn alignment_grows_with_batch_and_shrinks_with_dimension() {
        let rng = Rng::seed_from(43);
        let (ds, ns) = ([16usize, 64], [2usize, 16, 64]);
        let rep = ot_scaling_study(&ds, &ns, 500, &rng).unwrap();
        for &d in &ds {
            for w in ns.windows(2) {
                let a = rep.cell(d, w[0]).unwrap();
                let b = rep.cell(d, w[1]).unwrap();
                let slack = 3.0 * (a.stderr * a.stderr + b.stderr * b.stderr).sqrt();
                assert!(
                    b.mean_max_dot >= a.mean_max_dot - slack,
                    "d={d}: n={} mean {} vs n={} mean {}",
                    w[0],
                    a.mean_max_dot,
                    w[1],
                    b.mean_max_dot
                );
            }
        }
        for &n in &ns {
            let hi = rep.cell(16, n).unwrap();
            let lo = rep.cell(64, n).unwrap();
            let slack = 3.0 * (hi.stderr * hi.stderr + lo.stderr * lo.stderr).sqrt();
            assert!(
                lo.mean_max_dot <= hi.mean_max_dot + slack,
                "n={n}: d=16 mean {} vs d=64 mean {}",
                hi.mean_max_dot,
                lo.mean_max_dot
            );
        }
        for c in rep.cells() {
            assert!(c.stderr > 0.0);
            assert!(c.bound > 0.0, "bound must be positive for n ≥ 2");
            assert!(
                c.mean_max_dot <= c.bound,
                "d={} n={}: mean {} above bound {}",
                c.d,
                c.n,
                c.mean_max_dot,
                c.bound
            );
        }
    }

    #[test]
    fn argument_validation() {
        let rng = Rng::seed_from(1);
        assert!(ot_scaling_study(&[2], &[2], 99, &rng).is_err());
        assert!(ot_scaling_study(&[], &[2], 100, &rng).is_err());
        assert!(ot_scaling_study(&[2], &[], 100, &rng).is_err());
        assert!(ot_scaling_study(&[0], &[2], 100, &rng).is_err());
        assert!(ot_scaling_study(&[2], &[0], 100, &rng).is_err());
        assert!(ot_scaling_study(&[2], &[2], 100, &rng).is_ok());
    }

    #[test]
    fn study_is_deterministic_for_a_fixed_stream() {
        let rng = Rng::seed_from(7);
        let a = ot_scaling_study(&[8, 16], &[2, 4], 300, &rng).unwrap();
        let b = ot_scaling_study(&[8, 16], &[2, 4], 300, &rng).unwrap();
        assert_eq!(a, b);
        for (x, y) in a.cells().iter().zip(b.cells()) {
            assert_eq!(x.mean_max_dot.to_bits(), y.mean_max_dot.to_bits());
            assert_eq!(x.var_dot.to_bits(), y.var_dot.to_bits());
        }
        let rows = a.rows();
        assert_eq!(rows.len(), 3 * a.cells().len());
        assert_eq!(rows[0].metric, "ot_max_dot");
        assert_eq!(rows[1].metric, "ot_bound");
        assert_eq!(rows[2].metric, "ot_dot_var");
    }
}
