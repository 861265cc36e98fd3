//! Exact minimum-cost assignment under squared Euclidean cost.

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Largest batch accepted by [`ot_pair`]. The solver is cubic in the batch
/// size, so exact assignment is kept to mini-batch scale.
pub const OT_PAIR_CAP: usize = 512;

/// A bijection on `{0, .., n-1}`, stored as `map[i] = image of i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation {
    map: Vec<usize>,
}

impl Permutation {
    /// Validates that `map` is a bijection on `{0, .., map.len()-1}`.
    pub fn new(map: Vec<usize>) -> Result<Self> {
        let n = map.len();
        let mut seen = vec![false; n];
        for &j in &map {
            if j >= n {
                return Err(Error::invalid(format!(
                    "permutation entry {j} out of range for size {n}"
                )));
            }
            if seen[j] {
                return Err(Error::invalid(format!("permutation repeats target {j}")));
            }
            seen[j] = true;
        }
        Ok(Self { map })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            map: (0..n).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Image of source index `i`.
    pub fn target_of(&self, i: usize) -> usize {
        self.map[i]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.map
    }

    /// Rows of `t`, reordered so row `i` of the result is `t[map[i]]`.
    pub fn apply_rows(&self, t: &Tensor) -> Result<Tensor> {
        if t.rows() != self.map.len() {
            return Err(Error::shape(format!(
                "permutation of size {} applied to {} rows",
                self.map.len(),
                t.rows()
            )));
        }
        let mut out = Tensor::zeros(t.rows(), t.cols());
        for (i, &j) in self.map.iter().enumerate() {
            out.row_mut(i).copy_from_slice(t.row(j));
        }
        Ok(out)
    }
}

/// Pairwise squared Euclidean costs, `cost[i][j] = ||src_i - tgt_j||^2`.
pub fn squared_cost_matrix(src: &Tensor, tgt: &Tensor) -> Result<Tensor> {
    if src.cols() != tgt.cols() {
        return Err(Error::shape(format!(
            "cost matrix needs matching dims, got {} vs {}",
            src.cols(),
            tgt.cols()
        )));
    }
    let n = src.rows();
    let m = tgt.rows();
    let mut cost = Tensor::zeros(n, m);
    for i in 0..n {
        let a = src.row(i);
        let row = cost.row_mut(i);
        for (j, slot) in row.iter_mut().enumerate() {
            let b = tgt.row(j);
            let mut acc = 0.0;
            for k in 0..a.len() {
                let d = a[k] - b[k];
                acc += d * d;
            }
            *slot = acc;
        }
    }
    Ok(cost)
}

/// Minimum-cost perfect matching on a square cost matrix by shortest
/// augmenting paths with dual potentials. Runs in `O(n^3)`. Ties are broken
/// deterministically: column scans go in index order and only a strictly
/// smaller value displaces the incumbent, so the lowest-index option wins.
pub fn solve_assignment(cost: &Tensor) -> Result<(Permutation, f64)> {
    if cost.rows() != cost.cols() {
        return Err(Error::shape(format!(
            "assignment needs a square cost matrix, got {}x{}",
            cost.rows(),
            cost.cols()
        )));
    }
    let n = cost.rows();
    if n == 0 {
        return Ok((Permutation::identity(0), 0.0));
    }
    for i in 0..n {
        for &c in cost.row(i) {
            if !c.is_finite() {
                return Err(Error::invalid("assignment cost matrix has non-finite entry"));
            }
        }
    }

    // 1-based internals; index 0 is the sentinel column.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut matched_row = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];

    for i in 1..=n {
        matched_row[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            let row = cost.row(i0 - 1);
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = row[j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut map = vec![0usize; n];
    for j in 1..=n {
        map[matched_row[j] - 1] = j - 1;
    }
    let perm = Permutation::new(map)?;
    let mut total = 0.0;
    for i in 0..n {
        total += cost.row(i)[perm.target_of(i)];
    }
    Ok((perm, total))
}

/// Optimal pairing of `src` rows to `tgt` rows under squared Euclidean cost.
/// Returns the permutation sending source index to target index and the total
/// transport cost. Both inputs must be `n x d` with `n <=` [`OT_PAIR_CAP`].
pub fn ot_pair(src: &Tensor, tgt: &Tensor) -> Result<(Permutation, f64)> {
    ot_pair_capped(src, tgt, OT_PAIR_CAP)
}

/// [`ot_pair`] with an explicit batch-size cap.
pub fn ot_pair_capped(src: &Tensor, tgt: &Tensor, cap: usize) -> Result<(Permutation, f64)> {
    if src.rows() != tgt.rows() || src.cols() != tgt.cols() {
        return Err(Error::shape(format!(
            "pairing needs equal shapes, got {}x{} vs {}x{}",
            src.rows(),
            src.cols(),
            tgt.rows(),
            tgt.cols()
        )));
    }
    if src.rows() > cap {
        return Err(Error::invalid(format!(
            "exact pairing capped at {cap} rows, got {}",
            src.rows()
        )));
    }
    let cost = squared_cost_matrix(src, tgt)?;
    solve_assignment(&cost)
}
