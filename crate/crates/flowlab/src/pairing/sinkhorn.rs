//! Entropy-regularised pairing via log-domain Sinkhorn iterations.

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::pairing::hungarian::{squared_cost_matrix, Permutation};

#[derive(Debug, Clone)]
pub struct SinkhornOptions {
    /// Regularisation strength. `None` selects `0.05 *` the median pairwise
    /// cost of the instance.
    pub epsilon: Option<f64>,
    pub max_iters: usize,
    /// Marginal tolerance: iteration stops once every row and column of the
    /// plan sums to `1` within this bound.
    pub tol: f64,
}

impl Default for SinkhornOptions {
    fn default() -> Self {
        SinkhornOptions { epsilon: None, max_iters: 5000, tol: 1e-6 }
    }
}

#[derive(Debug, Clone)]
pub struct SinkhornResult {
    /// `n x n` transport plan with nonnegative entries; rows and columns each
    /// sum to `1` up to `residual`.
    pub plan: Tensor,
    /// Row-argmax hardening of the plan into a bijection. Conflicts resolve
    /// greedily in row order: each row takes its best still-free column.
    pub permutation: Permutation,
    /// Regularisation actually used (resolved from the median-cost default
    /// when the caller left it unset).
    pub epsilon: f64,
    pub converged: bool,
    /// Worst absolute deviation of any row or column sum from `1`.
    pub residual: f64,
    pub iterations: usize,
}

fn log_sum_exp(terms: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = terms.clone().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = terms.map(|t| (t - max).exp()).sum();
    max + sum.ln()
}

fn median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted[sorted.len() / 2]
}

/// Entropic pairing of `src` rows to `tgt` rows under squared Euclidean cost.
/// Non-convergence within `max_iters` is not an error: the result carries
/// `converged = false` plus the final residual so callers can decide.
pub fn sinkhorn_pair(src: &Tensor, tgt: &Tensor, opts: &SinkhornOptions) -> Result<SinkhornResult> {
    if src.rows() != tgt.rows() || src.cols() != tgt.cols() {
        return Err(Error::shape(format!(
            "pairing needs equal shapes, got {}x{} vs {}x{}",
            src.rows(),
            src.cols(),
            tgt.rows(),
            tgt.cols()
        )));
    }
    let n = src.rows();
    if n == 0 {
        return Err(Error::invalid("sinkhorn needs at least one row"));
    }
    let cost = squared_cost_matrix(src, tgt)?;
    let epsilon = match opts.epsilon {
        Some(e) => e,
        None => 0.05 * median(cost.data()),
    };
    if !(epsilon > 0.0) {
        return Err(Error::invalid(format!(
            "sinkhorn regularisation must be positive, got {epsilon}"
        )));
    }

    // Dual potentials of the entropic problem, kept in log domain so small
    // epsilon stays stable. Row updates make row sums exact; column updates
    // make column sums exact; at the fixed point both hold.
    let mut f = vec![0.0f64; n];
    let mut g = vec![0.0f64; n];
    let mut iterations = 0usize;
    let mut residual = f64::INFINITY;
    let mut converged = false;

    while iterations < opts.max_iters {
        iterations += 1;
        for i in 0..n {
            let row = cost.row(i);
            let lse = log_sum_exp((0..n).map(|j| (g[j] - row[j]) / epsilon));
            f[i] = -epsilon * lse;
        }
        for j in 0..n {
            let lse = log_sum_exp((0..n).map(|i| (f[i] - cost.get(i, j)) / epsilon));
            g[j] = -epsilon * lse;
        }
        residual = marginal_residual(&cost, &f, &g, epsilon);
        if residual <= opts.tol {
            converged = true;
            break;
        }
    }

    let mut plan = Tensor::zeros(n, n);
    for i in 0..n {
        let row = plan.row_mut(i);
        let crow = cost.row(i);
        for j in 0..n {
            row[j] = ((f[i] + g[j] - crow[j]) / epsilon).exp();
        }
    }
    if !plan.is_finite() {
        return Err(Error::invalid(
            "sinkhorn plan became non-finite; regularisation too small for this instance",
        ));
    }

    let permutation = harden_by_row_argmax(&plan)?;
    Ok(SinkhornResult { plan, permutation, epsilon, converged, residual, iterations })
}

fn marginal_residual(cost: &Tensor, f: &[f64], g: &[f64], epsilon: f64) -> f64 {
    let n = f.len();
    let mut col_sums = vec![0.0f64; n];
    let mut worst = 0.0f64;
    for i in 0..n {
        let row = cost.row(i);
        let mut row_sum = 0.0;
        for j in 0..n {
            let p = ((f[i] + g[j] - row[j]) / epsilon).exp();
            row_sum += p;
            col_sums[j] += p;
        }
        worst = worst.max((row_sum - 1.0).abs());
    }
    for s in col_sums {
        worst = worst.max((s - 1.0).abs());
    }
    worst
}

/// Rounds a plan to a bijection: rows in index order each take their highest
/// mass column among those still free, ties to the lowest column index.
fn harden_by_row_argmax(plan: &Tensor) -> Result<Permutation> {
    let n = plan.rows();
    let mut taken = vec![false; n];
    let mut map = vec![0usize; n];
    for i in 0..n {
        let row = plan.row(i);
        let mut best = usize::MAX;
        let mut best_mass = f64::NEG_INFINITY;
        for j in 0..n {
            if !taken[j] && row[j] > best_mass {
                best_mass = row[j];
                best = j;
            }
        }
        taken[best] = true;
        map[i] = best;
    }
    Permutation::new(map)
}
