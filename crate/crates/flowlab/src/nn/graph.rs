//! Define-by-run reverse-mode autodiff over [`Tensor`] values.
//!
//! Nodes are appended in evaluation order, so parent indices are always
//! smaller than child indices and the backward sweep is a single reverse
//! scan. Values are computed eagerly when a node is built; `backward` fills
//! per-node gradient accumulators.

use crate::error::{Error, Result};
use crate::nn::tensor::{matmul, matmul_abt, matmul_atb, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op {
    /// External value: a constant input or a trainable parameter.
    Leaf,
    /// `lhs * rhs` matrix product.
    MatMul { lhs: NodeId, rhs: NodeId },
    /// Adds a `1 x m` bias row to every row of an `n x m` matrix.
    AddBias { x: NodeId, bias: NodeId },
    Add { lhs: NodeId, rhs: NodeId },
    Sub { lhs: NodeId, rhs: NodeId },
    /// Elementwise product.
    Mul { lhs: NodeId, rhs: NodeId },
    /// `scale * x + shift` elementwise; only `scale` matters for gradients.
    Affine { x: NodeId, scale: f64 },
    /// Multiplies row i by the constant `scales[i]`.
    RowScale { x: NodeId, scales: Vec<f64> },
    Silu { x: NodeId },
    Sigmoid { x: NodeId },
    Ln { x: NodeId },
    Clamp { x: NodeId, lo: f64, hi: f64 },
    /// `(1/n) Σ_i w_i Σ_j x_ij²` over an `n x m` input; scalar output.
    MeanRowSumSq { x: NodeId, row_weights: Option<Vec<f64>> },
    /// Mean of all entries; scalar output.
    MeanAll { x: NodeId },
}

struct Node {
    op: Op,
    value: Tensor,
    grad: Option<Tensor>,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts a constant leaf; no gradient is accumulated for it.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    /// Inserts a trainable leaf; `backward` fills its gradient.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    /// Gradient of `id`, with absent gradients read as all-zero.
    pub fn grad_or_zeros(&self, id: NodeId) -> Tensor {
        let node = &self.nodes[id.0];
        match &node.grad {
            Some(g) => g.clone(),
            None => Tensor::zeros(node.value.rows(), node.value.cols()),
        }
    }

    pub fn matmul(&mut self, lhs: NodeId, rhs: NodeId) -> NodeId {
        let value = matmul(self.value(lhs), self.value(rhs));
        let needs = self.needs(lhs) || self.needs(rhs);
        self.push(Op::MatMul { lhs, rhs }, value, needs)
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let xv = self.value(x);
        let bv = self.value(bias);
        assert_eq!(bv.rows(), 1, "bias must be a single row");
        assert_eq!(xv.cols(), bv.cols(), "bias width {} vs input width {}", bv.cols(), xv.cols());
        let mut value = xv.clone();
        let bias_row: Vec<f64> = bv.data().to_vec();
        for i in 0..value.rows() {
            for (o, b) in value.row_mut(i).iter_mut().zip(&bias_row) {
                *o += b;
            }
        }
        let needs = self.needs(x) || self.needs(bias);
        self.push(Op::AddBias { x, bias }, value, needs)
    }

    pub fn add(&mut self, lhs: NodeId, rhs: NodeId) -> NodeId {
        let value = self.zip_values(lhs, rhs, |a, b| a + b);
        let needs = self.needs(lhs) || self.needs(rhs);
        self.push(Op::Add { lhs, rhs }, value, needs)
    }

    pub fn sub(&mut self, lhs: NodeId, rhs: NodeId) -> NodeId {
        let value = self.zip_values(lhs, rhs, |a, b| a - b);
        let needs = self.needs(lhs) || self.needs(rhs);
        self.push(Op::Sub { lhs, rhs }, value, needs)
    }

    pub fn mul(&mut self, lhs: NodeId, rhs: NodeId) -> NodeId {
        let value = self.zip_values(lhs, rhs, |a, b| a * b);
        let needs = self.needs(lhs) || self.needs(rhs);
        self.push(Op::Mul { lhs, rhs }, value, needs)
    }

    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> NodeId {
        let value = self.value(x).map(|v| scale * v + shift);
        let needs = self.needs(x);
        self.push(Op::Affine { x, scale }, value, needs)
    }

    pub fn scale(&mut self, x: NodeId, scale: f64) -> NodeId {
        self.affine(x, scale, 0.0)
    }

    pub fn row_scale(&mut self, x: NodeId, scales: &[f64]) -> NodeId {
        let xv = self.value(x);
        assert_eq!(scales.len(), xv.rows(), "one scale per row");
        let mut value = xv.clone();
        for (i, &s) in scales.iter().enumerate() {
            for v in value.row_mut(i) {
                *v *= s;
            }
        }
        let needs = self.needs(x);
        self.push(Op::RowScale { x, scales: scales.to_vec() }, value, needs)
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| v * sigmoid(v));
        let needs = self.needs(x);
        self.push(Op::Silu { x }, value, needs)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(sigmoid);
        let needs = self.needs(x);
        self.push(Op::Sigmoid { x }, value, needs)
    }

    /// Natural log; caller must keep inputs positive (see `clamp`).
    pub fn ln(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(f64::ln);
        let needs = self.needs(x);
        self.push(Op::Ln { x }, value, needs)
    }

    /// Clamps into `[lo, hi]`; gradient passes only strictly inside the range.
    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        assert!(lo < hi, "clamp bounds out of order");
        let value = self.value(x).map(|v| v.clamp(lo, hi));
        let needs = self.needs(x);
        self.push(Op::Clamp { x, lo, hi }, value, needs)
    }

    /// Mean over rows of the weighted squared row norms:
    /// `(1/n) Σ_i w_i ‖x_i‖²`, the shape shared by all training losses.
    pub fn mean_row_sum_sq(&mut self, x: NodeId, row_weights: Option<&[f64]>) -> NodeId {
        let xv = self.value(x);
        if let Some(w) = row_weights {
            assert_eq!(w.len(), xv.rows(), "one weight per row");
        }
        let n = xv.rows() as f64;
        let mut acc = 0.0;
        for i in 0..xv.rows() {
            let w = row_weights.map_or(1.0, |w| w[i]);
            let row_sq: f64 = xv.row(i).iter().map(|v| v * v).sum();
            acc += w * row_sq;
        }
        let value = Tensor::scalar(acc / n);
        let needs = self.needs(x);
        self.push(
            Op::MeanRowSumSq { x, row_weights: row_weights.map(|w| w.to_vec()) },
            value,
            needs,
        )
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let mean = xv.data().iter().sum::<f64>() / xv.len() as f64;
        let value = Tensor::scalar(mean);
        let needs = self.needs(x);
        self.push(Op::MeanAll { x }, value, needs)
    }

    /// Accumulates `∂loss/∂node` for every node `loss` depends on. May be
    /// called repeatedly on one graph; each call resets all gradients first.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let idx = loss.0;
        if idx >= self.nodes.len() {
            return Err(Error::invalid(format!("node {idx} not in graph")));
        }
        if self.nodes[idx].value.len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got {} x {}",
                self.nodes[idx].value.rows(),
                self.nodes[idx].value.cols()
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[idx].grad = Some(Tensor::scalar(1.0));

        for i in (0..=idx).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let grad_out = self.nodes[i].grad.take().expect("grad present");
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::MatMul { lhs, rhs } => {
                    if self.needs(lhs) {
                        let delta = matmul_abt(&grad_out, self.value(rhs));
                        self.accumulate(lhs, delta);
                    }
                    if self.needs(rhs) {
                        let delta = matmul_atb(self.value(lhs), &grad_out);
                        self.accumulate(rhs, delta);
                    }
                }
                Op::AddBias { x, bias } => {
                    if self.needs(x) {
                        self.accumulate(x, grad_out.clone());
                    }
                    if self.needs(bias) {
                        let mut delta = Tensor::zeros(1, grad_out.cols());
                        for r in 0..grad_out.rows() {
                            for (d, g) in delta.row_mut(0).iter_mut().zip(grad_out.row(r)) {
                                *d += g;
                            }
                        }
                        self.accumulate(bias, delta);
                    }
                }
                Op::Add { lhs, rhs } => {
                    if self.needs(lhs) {
                        self.accumulate(lhs, grad_out.clone());
                    }
                    if self.needs(rhs) {
                        self.accumulate(rhs, grad_out.clone());
                    }
                }
                Op::Sub { lhs, rhs } => {
                    if self.needs(lhs) {
                        self.accumulate(lhs, grad_out.clone());
                    }
                    if self.needs(rhs) {
                        self.accumulate(rhs, grad_out.map(|g| -g));
                    }
                }
                Op::Mul { lhs, rhs } => {
                    if self.needs(lhs) {
                        let delta = zip_tensors(&grad_out, self.value(rhs), |g, v| g * v);
                        self.accumulate(lhs, delta);
                    }
                    if self.needs(rhs) {
                        let delta = zip_tensors(&grad_out, self.value(lhs), |g, v| g * v);
                        self.accumulate(rhs, delta);
                    }
                }
                Op::Affine { x, scale } => {
                    if self.needs(x) {
                        self.accumulate(x, grad_out.map(|g| scale * g));
                    }
                }
                Op::RowScale { x, scales } => {
                    if self.needs(x) {
                        let mut delta = grad_out.clone();
                        for (i, &s) in scales.iter().enumerate() {
                            for v in delta.row_mut(i) {
                                *v *= s;
                            }
                        }
                        self.accumulate(x, delta);
                    }
                }
                Op::Silu { x } => {
                    if self.needs(x) {
                        // d/dv [v·σ(v)] = σ(v)·(1 + v·(1 − σ(v)))
                        let delta = zip_tensors(&grad_out, self.value(x), |g, v| {
                            let s = sigmoid(v);
                            g * s * (1.0 + v * (1.0 - s))
                        });
                        self.accumulate(x, delta);
                    }
                }
                Op::Sigmoid { x } => {
                    if self.needs(x) {
                        // Uses the cached output s: ds/dv = s(1 − s).
                        let out = self.nodes[i].value.clone();
                        let delta = zip_tensors(&grad_out, &out, |g, s| g * s * (1.0 - s));
                        self.accumulate(x, delta);
                    }
                }
                Op::Ln { x } => {
                    if self.needs(x) {
                        let delta = zip_tensors(&grad_out, self.value(x), |g, v| g / v);
                        self.accumulate(x, delta);
                    }
                }
                Op::Clamp { x, lo, hi } => {
                    if self.needs(x) {
                        let delta = zip_tensors(&grad_out, self.value(x), |g, v| {
                            if v > lo && v < hi {
                                g
                            } else {
                                0.0
                            }
                        });
                        self.accumulate(x, delta);
                    }
                }
                Op::MeanRowSumSq { x, row_weights } => {
                    if self.needs(x) {
                        let g = grad_out.scalar_value();
                        let xv = self.value(x);
                        let n = xv.rows() as f64;
                        let mut delta = xv.clone();
                        for i in 0..delta.rows() {
                            let w = row_weights.as_ref().map_or(1.0, |w| w[i]);
                            let c = 2.0 * g * w / n;
                            for v in delta.row_mut(i) {
                                *v *= c;
                            }
                        }
                        self.accumulate(x, delta);
                    }
                }
                Op::MeanAll { x } => {
                    if self.needs(x) {
                        let xv = self.value(x);
                        let c = grad_out.scalar_value() / xv.len() as f64;
                        let delta = Tensor::filled(xv.rows(), xv.cols(), c);
                        self.accumulate(x, delta);
                    }
                }
            }
            self.nodes[i].grad = Some(grad_out);
        }
        Ok(())
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value, grad: None, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn zip_values(&self, lhs: NodeId, rhs: NodeId, f: impl Fn(f64, f64) -> f64) -> Tensor {
        zip_tensors(self.value(lhs), self.value(rhs), f)
    }

    fn accumulate(&mut self, id: NodeId, delta: Tensor) {
        let slot = &mut self.nodes[id.0].grad;
        match slot {
            Some(g) => g.add_assign_scaled(&delta, 1.0),
            None => *slot = Some(delta),
        }
    }
}

fn zip_tensors(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    assert!(a.same_shape(b), "elementwise op on {}x{} vs {}x{}", a.rows(), a.cols(), b.rows(), b.cols());
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.rows(), a.cols(), data).expect("shapes already checked")
}

/// Numerically stable logistic function.
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
