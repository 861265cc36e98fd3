//! Two-sample energy statistic: `2·E‖a−b‖ − E‖a−a'‖ − E‖b−b'‖` over all
//! sample pairs (diagonal included), which is the energy distance between
//! the two empirical measures. Zero for identical samples, `2L` for point
//! masses at distance `L`, and non-negative up to rounding.

use rayon::prelude::*;

use crate::dist::Rng;
use crate::error::{Error, Result};
use crate::nn::Tensor;

use super::dist;

fn check_sample(x: &Tensor, what: &str) -> Result<()> {
    if x.rows() < 2 {
        return Err(Error::invalid(format!(
            "{what} needs at least 2 rows, got {}",
            x.rows()
        )));
    }
    if x.cols() == 0 {
        return Err(Error::invalid(format!("{what} has zero-dimensional rows")));
    }
    if !x.is_finite() {
        return Err(Error::invalid(format!("{what} has non-finite entries")));
    }
    Ok(())
}

/// Total order on tensors (shape, then data bits) used to canonicalize the
/// argument order, which makes the statistic exactly symmetric in floats.
fn first_is_le(a: &Tensor, b: &Tensor) -> bool {
    match (a.rows(), a.cols()).cmp(&(b.rows(), b.cols())) {
        std::cmp::Ordering::Less => return true,
        std::cmp::Ordering::Greater => return false,
        std::cmp::Ordering::Equal => {}
    }
    for (x, y) in a.data().iter().zip(b.data()) {
        match x.total_cmp(y) {
            std::cmp::Ordering::Less => return true,
            std::cmp::Ordering::Greater => return false,
            std::cmp::Ordering::Equal => {}
        }
    }
    true
}

/// Σᵢⱼ ‖aᵢ − bⱼ‖ over the full index grid. Rows are reduced in index order
/// after a parallel map, so the value is independent of thread count.
fn pair_sum(a: &Tensor, b: &Tensor) -> f64 {
    (0..a.rows())
        .into_par_iter()
        .map(|i| {
            let ra = a.row(i);
            let mut acc = 0.0;
            for j in 0..b.rows() {
                acc += dist(ra, b.row(j));
            }
            acc
        })
        .collect::<Vec<f64>>()
        .into_iter()
        .sum()
}

/// Energy statistic between two samples with at least 2 rows each.
/// Symmetric bitwise: `energy_distance(a, b)` and `energy_distance(b, a)`
/// return identical floats.
pub fn energy_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_sample(a, "first sample")?;
    check_sample(b, "second sample")?;
    if a.cols() != b.cols() {
        return Err(Error::shape(format!(
            "samples live in different dimensions: {} vs {}",
            a.cols(),
            b.cols()
        )));
    }
    let (p, q) = if first_is_le(a, b) { (a, b) } else { (b, a) };
    let n = p.rows() as f64;
    let m = q.rows() as f64;
    let cross = pair_sum(p, q) / (n * m);
    let within_p = pair_sum(p, p) / (n * n);
    let within_q = pair_sum(q, q) / (m * m);
    Ok(2.0 * cross - within_p - within_q)
}

/// Null distribution of the statistic under "both samples come from one
/// distribution": pools the rows, re-splits them at random `permutations`
/// times preserving the two sample sizes, and scores each split. Returned
/// in draw order; deterministic for a fixed `rng` state.
pub fn energy_distance_permutation_null(
    a: &Tensor,
    b: &Tensor,
    permutations: usize,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    check_sample(a, "first sample")?;
    check_sample(b, "second sample")?;
    if a.cols() != b.cols() {
        return Err(Error::shape("pooled samples must share a dimension"));
    }
    if permutations == 0 {
        return Err(Error::invalid("need at least one permutation"));
    }
    let (n, m, d) = (a.rows(), b.rows(), a.cols());
    let mut pooled = Vec::with_capacity(n + m);
    for i in 0..n {
        pooled.push(a.row(i).to_vec());
    }
    for i in 0..m {
        pooled.push(b.row(i).to_vec());
    }

    let base = rng.next_child();
    let mut out = Vec::with_capacity(permutations);
    for perm in 0..permutations {
        let mut r = base.stream(perm as u64);
        let mut idx: Vec<usize> = (0..n + m).collect();
        r.shuffle(&mut idx);
        let mut left = Tensor::zeros(n, d);
        for (row, &k) in idx[..n].iter().enumerate() {
            left.row_mut(row).copy_from_slice(&pooled[k]);
        }
        let mut right = Tensor::zeros(m, d);
        for (row, &k) in idx[n..].iter().enumerate() {
            right.row_mut(row).copy_from_slice(&pooled[k]);
        }
        out.push(energy_distance(&left, &right)?);
    }
    Ok(out)
}

/// Nearest-rank quantile: the smallest element with at least `q` of the
/// sample at or below it (`q = 0` gives the minimum).
pub fn quantile(xs: &[f64], q: f64) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::invalid("quantile of an empty sample"));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::invalid(format!("quantile level must lie in [0, 1], got {q}")));
    }
    if xs.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("quantile of a sample with non-finite entries"));
    }
    let mut sorted = xs.to_vec();
    sorted.sort_by(|x, y| x.total_cmp(y));
    let rank = (q * sorted.len() as f64).ceil() as usize;
    Ok(sorted[rank.saturating_sub(1)])
}
