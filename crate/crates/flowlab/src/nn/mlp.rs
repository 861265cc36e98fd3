//! Conditioned multilayer perceptrons.
//!
//! The conditioning scalar (a noise scale σ or a time t) enters as K
//! sinusoidal features concatenated to the data input; K is fixed per model.
//! Hidden layers share one activation, the output layer is always linear.

use crate::dist::Rng;
use crate::error::{Error, Result};
use crate::nn::graph::{Graph, NodeId};
use crate::nn::tensor::{matmul, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Silu,
    /// No hidden nonlinearity; the whole net is affine.
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Conditioning {
    /// Embeds ln σ; the conditioning value must be positive.
    LogSigma,
    /// Embeds t directly, expected in O(1) range.
    Time,
    /// No conditioning input (used by the discriminator).
    Unconditioned,
}

/// Frequency range for the sinusoidal features, geometric spacing.
fn freq_bounds(conditioning: Conditioning) -> (f64, f64) {
    match conditioning {
        // ln σ spans roughly [-6.2, 4.4] for σ ∈ [0.002, 80].
        Conditioning::LogSigma => (0.25, 8.0),
        // t spans [0, 1].
        Conditioning::Time => (1.0, 100.0),
        Conditioning::Unconditioned => (1.0, 1.0),
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    /// Layer weights, `in x out` each; `weights[0]` consumes data + embedding.
    weights: Vec<Tensor>,
    /// One `1 x out` bias row per layer.
    biases: Vec<Tensor>,
    activation: Activation,
    conditioning: Conditioning,
    embed_width: usize,
}

/// Node ids of one network's parameters inside a [`Graph`].
pub struct GraphNet {
    pub weights: Vec<NodeId>,
    pub biases: Vec<NodeId>,
}

impl Mlp {
    /// Fresh net with uniform `±1/√fan_in` weights and zero biases. `hidden`
    /// lists hidden-layer widths; it may be empty for an affine net.
    pub fn new(
        data_width: usize,
        hidden: &[usize],
        out_width: usize,
        activation: Activation,
        conditioning: Conditioning,
        embed_width: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if data_width == 0 || out_width == 0 || hidden.iter().any(|&w| w == 0) {
            return Err(Error::invalid("layer widths must be positive"));
        }
        match conditioning {
            Conditioning::Unconditioned => {
                if embed_width != 0 {
                    return Err(Error::invalid("unconditioned net cannot take an embedding"));
                }
            }
            _ => {
                if embed_width == 0 || embed_width % 2 != 0 {
                    return Err(Error::invalid("embedding width must be positive and even"));
                }
            }
        }
        let mut widths = vec![data_width + embed_width];
        widths.extend_from_slice(hidden);
        widths.push(out_width);

        let mut weights = Vec::with_capacity(widths.len() - 1);
        let mut biases = Vec::with_capacity(widths.len() - 1);
        for layer in 0..widths.len() - 1 {
            let (fan_in, fan_out) = (widths[layer], widths[layer + 1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let mut w = Tensor::zeros(fan_in, fan_out);
            for v in w.data_mut() {
                *v = rng.uniform_in(-bound, bound);
            }
            weights.push(w);
            biases.push(Tensor::zeros(1, fan_out));
        }
        Ok(Mlp { weights, biases, activation, conditioning, embed_width })
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn conditioning(&self) -> Conditioning {
        self.conditioning
    }

    pub fn embed_width(&self) -> usize {
        self.embed_width
    }

    /// Width of the data part of the input (embedding excluded).
    pub fn data_width(&self) -> usize {
        self.weights[0].rows() - self.embed_width
    }

    pub fn out_width(&self) -> usize {
        self.weights.last().expect("at least one layer").cols()
    }

    /// Full layer widths, embedding included in the first entry.
    pub fn widths(&self) -> Vec<usize> {
        let mut w: Vec<usize> = self.weights.iter().map(|t| t.rows()).collect();
        w.push(self.out_width());
        w
    }

    pub fn layer_count(&self) -> usize {
        self.weights.len()
    }

    /// Parameters in the fixed order `W₀, b₀, W₁, b₁, …`.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.push(w);
            out.push(b);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            out.push(w);
            out.push(b);
        }
        out
    }

    /// Position of the final weight matrix in [`Mlp::params`] order.
    pub fn last_weight_param_index(&self) -> usize {
        2 * (self.weights.len() - 1)
    }

    /// Overwrites all parameters; shapes must match the current ones.
    pub fn set_params(&mut self, values: &[Tensor]) -> Result<()> {
        if values.len() != 2 * self.weights.len() {
            return Err(Error::invalid(format!(
                "expected {} parameter tensors, got {}",
                2 * self.weights.len(),
                values.len()
            )));
        }
        for (slot, value) in self.params_mut().into_iter().zip(values) {
            if !slot.same_shape(value) {
                return Err(Error::shape("parameter tensor shape changed"));
            }
            *slot = value.clone();
        }
        Ok(())
    }

    /// Sinusoidal features of the conditioning value.
    fn embed(&self, cond: f64) -> Result<Vec<f64>> {
        let u = match self.conditioning {
            Conditioning::Unconditioned => return Ok(Vec::new()),
            Conditioning::LogSigma => {
                if !(cond > 0.0) {
                    return Err(Error::invalid(format!(
                        "σ-conditioned net needs cond > 0, got {cond}"
                    )));
                }
                cond.ln()
            }
            Conditioning::Time => {
                if !cond.is_finite() {
                    return Err(Error::invalid("conditioning value must be finite"));
                }
                cond
            }
        };
        let half = self.embed_width / 2;
        let (lo, hi) = freq_bounds(self.conditioning);
        let mut features = Vec::with_capacity(self.embed_width);
        for j in 0..half {
            let t = if half > 1 { j as f64 / (half - 1) as f64 } else { 0.0 };
            let freq = lo * (hi / lo).powf(t);
            features.push((freq * u).sin());
            features.push((freq * u).cos());
        }
        Ok(features)
    }

    /// Builds the `n x (data + embed)` matrix fed to the first layer, with one
    /// conditioning value per row.
    pub fn input_with_cond(&self, x: &Tensor, cond: &[f64]) -> Result<Tensor> {
        if x.cols() != self.data_width() {
            return Err(Error::shape(format!(
                "input has {} axes, net takes {}",
                x.cols(),
                self.data_width()
            )));
        }
        if self.conditioning != Conditioning::Unconditioned && cond.len() != x.rows() {
            return Err(Error::shape(format!(
                "{} conditioning values for {} rows",
                cond.len(),
                x.rows()
            )));
        }
        if self.conditioning == Conditioning::Unconditioned {
            return Ok(x.clone());
        }
        let d = self.data_width();
        let mut out = Tensor::zeros(x.rows(), d + self.embed_width);
        for i in 0..x.rows() {
            let features = self.embed(cond[i])?;
            let row = out.row_mut(i);
            row[..d].copy_from_slice(x.row(i));
            row[d..].copy_from_slice(&features);
        }
        Ok(out)
    }

    /// Evaluates the net on a batch sharing one conditioning value.
    pub fn forward(&self, x: &Tensor, cond: f64) -> Result<Tensor> {
        let conds = vec![cond; x.rows()];
        self.forward_per_row(x, &conds)
    }

    /// Evaluates the net with one conditioning value per row.
    pub fn forward_per_row(&self, x: &Tensor, cond: &[f64]) -> Result<Tensor> {
        let mut h = self.input_with_cond(x, cond)?;
        let last = self.weights.len() - 1;
        for (layer, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = matmul(&h, w);
            for i in 0..z.rows() {
                for (v, bias) in z.row_mut(i).iter_mut().zip(b.data()) {
                    *v += bias;
                }
            }
            if layer < last && self.activation == Activation::Silu {
                for v in z.data_mut() {
                    *v *= crate::nn::graph::sigmoid(*v);
                }
            }
            h = z;
        }
        Ok(h)
    }

    /// Registers all parameters as gradient targets in `g`.
    pub fn bind(&self, g: &mut Graph) -> GraphNet {
        let weights = self.weights.iter().map(|w| g.param(w.clone())).collect();
        let biases = self.biases.iter().map(|b| g.param(b.clone())).collect();
        GraphNet { weights, biases }
    }

    /// Registers all parameters as constants in `g`: the net can be applied
    /// inside the graph but receives no gradients (a frozen critic).
    pub fn bind_frozen(&self, g: &mut Graph) -> GraphNet {
        let weights = self.weights.iter().map(|w| g.input(w.clone())).collect();
        let biases = self.biases.iter().map(|b| g.input(b.clone())).collect();
        GraphNet { weights, biases }
    }

    /// Forward pass inside `g`. `input` must already hold the embedded input
    /// matrix (see [`Mlp::input_with_cond`]).
    pub fn forward_in_graph(&self, g: &mut Graph, net: &GraphNet, input: NodeId) -> NodeId {
        let last = net.weights.len() - 1;
        let mut h = input;
        for layer in 0..net.weights.len() {
            let z = g.matmul(h, net.weights[layer]);
            let z = g.add_bias(z, net.biases[layer]);
            h = if layer < last && self.activation == Activation::Silu {
                g.silu(z)
            } else {
                z
            };
        }
        h
    }

    /// Gradients of all bound parameters after a `backward` call, in
    /// [`Mlp::params`] order. Parameters the loss never touched read as zero.
    pub fn collect_grads(&self, g: &Graph, net: &GraphNet) -> Vec<Tensor> {
        let mut grads = Vec::with_capacity(2 * net.weights.len());
        for (w, b) in net.weights.iter().zip(&net.biases) {
            grads.push(g.grad_or_zeros(*w));
            grads.push(g.grad_or_zeros(*b));
        }
        grads
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_net(rng: &mut Rng) -> Mlp {
        Mlp::new(3, &[5, 4], 2, Activation::Silu, Conditioning::LogSigma, 4, rng).unwrap()
    }

    #[test]
    fn zero_weight_network_outputs_last_bias() {
        let mut rng = Rng::seed_from(1);
        let mut net = small_net(&mut rng);
        let n_params = net.params().len();
        let zeroed: Vec<Tensor> = net
            .params()
            .iter()
            .map(|p| Tensor::zeros(p.rows(), p.cols()))
            .collect();
        assert_eq!(zeroed.len(), n_params);
        net.set_params(&zeroed).unwrap();
        let mut values = zeroed;
        *values.last_mut().unwrap() = Tensor::row_vector(&[0.7, -0.3]);
        net.set_params(&values).unwrap();
        let x = Tensor::from_vec(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.0, 4.0]).unwrap();
        let y = net.forward(&x, 0.5).unwrap();
        assert_eq!(y.row(0), &[0.7, -0.3]);
        assert_eq!(y.row(1), &[0.7, -0.3]);
    }

    #[test]
    fn identity_linear_layer_passes_input_through() {
        let mut rng = Rng::seed_from(2);
        let mut net =
            Mlp::new(2, &[], 2, Activation::Linear, Conditioning::Unconditioned, 0, &mut rng)
                .unwrap();
        let eye = Tensor::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        net.set_params(&[eye, Tensor::zeros(1, 2)]).unwrap();
        let x = Tensor::row_vector(&[1.0, 2.0]);
        let y = net.forward(&x, 0.0).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0]);
    }

    #[test]
    fn forward_matches_straight_line_reimplementation() {
        let mut rng = Rng::seed_from(3);
        let net = Mlp::new(3, &[4], 2, Activation::Silu, Conditioning::LogSigma, 4, &mut rng)
            .unwrap();
        let x = Tensor::row_vector(&[0.3, -1.2, 0.8]);
        let sigma = 1.7;
        let got = net.forward(&x, sigma).unwrap();

        // Same arithmetic, written out by hand.
        let u: f64 = sigma.ln();
        let mut input = vec![0.3, -1.2, 0.8];
        let (lo, hi): (f64, f64) = (0.25, 8.0);
        for j in 0..2 {
            let freq = lo * (hi / lo).powf(j as f64 / 1.0);
            input.push((freq * u).sin());
            input.push((freq * u).cos());
        }
        let params = net.params();
        let (w0, b0, w1, b1) = (params[0], params[1], params[2], params[3]);
        let mut h = vec![0.0; 4];
        for (j, hj) in h.iter_mut().enumerate() {
            let mut acc = b0.get(0, j);
            for (p, &iv) in input.iter().enumerate() {
                acc += iv * w0.get(p, j);
            }
            let s = 1.0 / (1.0 + (-acc).exp());
            *hj = acc * s;
        }
        let mut y = vec![0.0; 2];
        for (j, yj) in y.iter_mut().enumerate() {
            let mut acc = b1.get(0, j);
            for (p, &hv) in h.iter().enumerate() {
                acc += hv * w1.get(p, j);
            }
            *yj = acc;
        }
        for (a, b) in got.data().iter().zip(&y) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let mut rng_a = Rng::seed_from(11);
        let mut rng_b = Rng::seed_from(11);
        let net_a = small_net(&mut rng_a);
        let net_b = small_net(&mut rng_b);
        let x = Tensor::from_vec(4, 3, (0..12).map(|i| i as f64 * 0.37 - 2.0).collect()).unwrap();
        let ya = net_a.forward(&x, 2.5).unwrap();
        let yb = net_b.forward(&x, 2.5).unwrap();
        assert_eq!(ya.data(), yb.data());
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut rng = Rng::seed_from(4);
        let net = small_net(&mut rng);
        let x = Tensor::row_vector(&[1.0, 2.0]);
        assert!(matches!(net.forward(&x, 1.0), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn sigma_conditioning_requires_positive_cond() {
        let mut rng = Rng::seed_from(5);
        let net = small_net(&mut rng);
        let x = Tensor::row_vector(&[1.0, 2.0, 3.0]);
        assert!(net.forward(&x, 0.0).is_err());
        assert!(net.forward(&x, -1.0).is_err());
    }

    #[test]
    fn graph_forward_matches_pure_forward() {
        let mut rng = Rng::seed_from(6);
        let net = small_net(&mut rng);
        let x = Tensor::from_vec(3, 3, (0..9).map(|i| (i as f64).sin()).collect()).unwrap();
        let conds = [0.5, 2.0, 10.0];
        let pure = net.forward_per_row(&x, &conds).unwrap();

        let mut g = Graph::new();
        let bound = net.bind(&mut g);
        let input = net.input_with_cond(&x, &conds).unwrap();
        let input = g.input(input);
        let out = net.forward_in_graph(&mut g, &bound, input);
        assert_eq!(g.value(out).data(), pure.data());
    }

    #[test]
    fn unconditioned_net_ignores_cond_values() {
        let mut rng = Rng::seed_from(7);
        let net =
            Mlp::new(3, &[4], 1, Activation::Silu, Conditioning::Unconditioned, 0, &mut rng)
                .unwrap();
        let x = Tensor::row_vector(&[0.1, 0.2, 0.3]);
        let a = net.forward(&x, 1.0).unwrap();
        let b = net.forward(&x, 77.0).unwrap();
        assert_eq!(a.data(), b.data());
    }
}
