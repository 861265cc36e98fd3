//! Dense row-major matrices of `f64`.
//!
//! Every value that flows through the autodiff graph is a matrix. Vectors are
//! stored as single-row or single-column matrices and scalars as `1 x 1`.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Work threshold (in `rows * inner * cols` terms) below which matrix products
/// stay on one thread. Parallel products split by output row, so results are
/// bit-identical for any thread count.
const PAR_CELLS: usize = 1 << 16;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Tensor { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{} values cannot fill a {rows} x {cols} matrix",
                data.len()
            )));
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { rows: 1, cols: 1, data: vec![value] }
    }

    /// Builds a matrix from equal-length rows. Panics on ragged input; meant
    /// for literals in tests and small fixtures.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Tensor { rows: rows.len(), cols, data }
    }

    /// Single-row matrix holding `values`.
    pub fn row_vector(values: &[f64]) -> Self {
        Tensor { rows: 1, cols: values.len(), data: values.to_vec() }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        assert!(i < self.rows && j < self.cols, "index ({i}, {j}) out of bounds");
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        assert!(i < self.rows && j < self.cols, "index ({i}, {j}) out of bounds");
        self.data[i * self.cols + j] = value;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        assert!(i < self.rows, "row {i} out of bounds");
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        assert!(i < self.rows, "row {i} out of bounds");
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Extracts the only element of a `1 x 1` matrix.
    pub fn scalar_value(&self) -> f64 {
        assert!(self.len() == 1, "scalar_value on a {} x {} matrix", self.rows, self.cols);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// `self += scale * other`; shapes must match.
    pub fn add_assign_scaled(&mut self, other: &Tensor, scale: f64) {
        assert!(self.same_shape(other), "add_assign_scaled shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }
}

fn par_worthwhile(cells: usize) -> bool {
    cells >= PAR_CELLS && rayon::current_num_threads() > 1
}

/// `a * b` for `a: n x k`, `b: k x m`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.rows, "matmul inner dimensions {} vs {}", a.cols, b.rows);
    let (n, k, m) = (a.rows, a.cols, b.cols);
    let mut out = Tensor::zeros(n, m);
    let kernel = |i: usize, out_row: &mut [f64]| {
        let a_row = a.row(i);
        for (p, &aip) in a_row.iter().enumerate().take(k) {
            if aip == 0.0 {
                continue;
            }
            let b_row = b.row(p);
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    };
    if par_worthwhile(n * k * m) {
        out.data
            .par_chunks_mut(m)
            .enumerate()
            .for_each(|(i, out_row)| kernel(i, out_row));
    } else {
        for (i, out_row) in out.data.chunks_mut(m).enumerate() {
            kernel(i, out_row);
        }
    }
    out
}

/// `a * b^T` for `a: n x c`, `b: m x c`, without materialising the transpose.
pub fn matmul_abt(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.cols, "matmul_abt shared dimension {} vs {}", a.cols, b.cols);
    let (n, c, m) = (a.rows, a.cols, b.rows);
    let mut out = Tensor::zeros(n, m);
    let kernel = |i: usize, out_row: &mut [f64]| {
        let a_row = a.row(i);
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = b.row(j);
            let mut acc = 0.0;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            *o = acc;
        }
    };
    if par_worthwhile(n * c * m) {
        out.data
            .par_chunks_mut(m)
            .enumerate()
            .for_each(|(i, out_row)| kernel(i, out_row));
    } else {
        for (i, out_row) in out.data.chunks_mut(m).enumerate() {
            kernel(i, out_row);
        }
    }
    out
}

/// `a^T * b` for `a: n x k`, `b: n x m`, without materialising the transpose.
pub fn matmul_atb(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.rows, b.rows, "matmul_atb shared dimension {} vs {}", a.rows, b.rows);
    let (n, k, m) = (a.rows, a.cols, b.cols);
    let mut out = Tensor::zeros(k, m);
    let kernel = |p: usize, out_row: &mut [f64]| {
        for i in 0..n {
            let aip = a.data[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = b.row(i);
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    };
    if par_worthwhile(n * k * m) {
        out.data
            .par_chunks_mut(m)
            .enumerate()
            .for_each(|(p, out_row)| kernel(p, out_row));
    } else {
        for (p, out_row) in out.data.chunks_mut(m).enumerate() {
            kernel(p, out_row);
        }
    }
    out
}
