//! Model wrappers presenting trained nets (or analytic oracles) behind the
//! three sampling interfaces: score, endpoint, velocity.
//!
//! Net-backed score and endpoint models precondition their inner network so
//! it always sees inputs of order one across the whole σ range: inputs are
//! scaled by `1/√(σ² + s̄²)` (s̄ = reference data scale) before the net runs,
//! and the score interface divides the output by σ so the inner net works at
//! unit scale too. The wrapper's observable behavior is still exactly
//! score(x, σ) or endpoint(x, σ); the scaling is internal, and a zero-weight
//! net is the zero model under every interface.

use std::path::Path;

use crate::dist::{noisy_score, MixtureSpec};
use crate::error::{Error, Result};
use crate::nn::checkpoint::{load_mlp, save_mlp};
use crate::nn::{Conditioning, Graph, GraphNet, Mlp, NodeId, Tensor};

/// What a trained network predicts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    /// Score of the σ-noised density, σ-conditioned.
    Score,
    /// Clean endpoint x₁ from a line state x₁ + σ·x₀, σ-conditioned.
    Endpoint,
    /// Flow velocity, t-conditioned with t ∈ [0, 1].
    Velocity,
    /// Scaled noise for the variance-preserving chain, t-conditioned.
    Noise,
}

impl ModelKind {
    pub fn tag(self) -> u8 {
        match self {
            ModelKind::Score => 0,
            ModelKind::Endpoint => 1,
            ModelKind::Velocity => 2,
            ModelKind::Noise => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(ModelKind::Score),
            1 => Ok(ModelKind::Endpoint),
            2 => Ok(ModelKind::Velocity),
            3 => Ok(ModelKind::Noise),
            t => Err(Error::invalid(format!("unknown model kind tag {t}"))),
        }
    }

    /// The conditioning a net must carry to serve this kind.
    pub fn expected_conditioning(self) -> Conditioning {
        match self {
            ModelKind::Score | ModelKind::Endpoint => Conditioning::LogSigma,
            ModelKind::Velocity | ModelKind::Noise => Conditioning::Time,
        }
    }
}

/// Evaluates score(x, σ) on a batch of rows.
pub trait ScoreModel {
    fn score(&self, x: &Tensor, sigma: f64) -> Result<Tensor>;
}

/// Evaluates the clean-endpoint prediction on a batch of rows.
pub trait EndpointModel {
    fn endpoint(&self, x: &Tensor, sigma: f64) -> Result<Tensor>;
}

/// Evaluates the flow velocity on a batch of rows.
pub trait VelocityModel {
    fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor>;
}

/// Evaluates the raw noise prediction of a variance-preserving model.
pub trait NoisePredictor {
    fn noise_hat(&self, x: &Tensor, t_norm: f64) -> Result<Tensor>;
}

/// Exact score oracle for a known mixture.
pub struct AnalyticScore(pub MixtureSpec);

impl ScoreModel for AnalyticScore {
    fn score(&self, x: &Tensor, sigma: f64) -> Result<Tensor> {
        let mut out = Tensor::zeros(x.rows(), x.cols());
        for i in 0..x.rows() {
            let s = noisy_score(&self.0, x.row(i), sigma);
            out.row_mut(i).copy_from_slice(&s);
        }
        Ok(out)
    }
}

/// Closure-backed oracles for tests.
pub struct ScoreFn<F>(pub F);
pub struct EndpointFn<F>(pub F);
pub struct VelocityFn<F>(pub F);
pub struct NoiseFn<F>(pub F);

impl<F: Fn(&Tensor, f64) -> Tensor> ScoreModel for ScoreFn<F> {
    fn score(&self, x: &Tensor, sigma: f64) -> Result<Tensor> {
        Ok((self.0)(x, sigma))
    }
}

impl<F: Fn(&Tensor, f64) -> Tensor> EndpointModel for EndpointFn<F> {
    fn endpoint(&self, x: &Tensor, sigma: f64) -> Result<Tensor> {
        Ok((self.0)(x, sigma))
    }
}

impl<F: Fn(&Tensor, f64) -> Tensor> VelocityModel for VelocityFn<F> {
    fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        Ok((self.0)(x, t))
    }
}

impl<F: Fn(&Tensor, f64) -> Tensor> NoisePredictor for NoiseFn<F> {
    fn noise_hat(&self, x: &Tensor, t_norm: f64) -> Result<Tensor> {
        Ok((self.0)(x, t_norm))
    }
}

/// A trained network plus its interface tag and preconditioning scale.
#[derive(Clone, Debug)]
pub struct NetModel {
    net: Mlp,
    kind: ModelKind,
    /// Reference data scale s̄ used by the input/output preconditioning.
    sigma_data: f64,
}

impl NetModel {
    pub fn new(net: Mlp, kind: ModelKind, sigma_data: f64) -> Result<Self> {
        if net.conditioning() != kind.expected_conditioning() {
            return Err(Error::invalid(format!(
                "{kind:?} model needs {:?} conditioning, net has {:?}",
                kind.expected_conditioning(),
                net.conditioning()
            )));
        }
        if net.data_width() != net.out_width() {
            return Err(Error::invalid("model nets map d-vectors to d-vectors"));
        }
        if !(sigma_data > 0.0) {
            return Err(Error::invalid(format!("reference scale must be positive, got {sigma_data}")));
        }
        Ok(NetModel { net, kind, sigma_data })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn sigma_data(&self) -> f64 {
        self.sigma_data
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn dim(&self) -> usize {
        self.net.data_width()
    }

    fn expect_kind(&self, kind: ModelKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Unsupported(format!(
                "model predicts {:?}, {kind:?} interface requested",
                self.kind
            )));
        }
        Ok(())
    }

    /// Input scale `1/√(σ² + s̄²)`.
    fn c_in(&self, sigma: f64) -> f64 {
        1.0 / (sigma * sigma + self.sigma_data * self.sigma_data).sqrt()
    }

    /// Raw inner-net output on preconditioned input, per-row conditioning.
    fn raw_per_row(&self, x: &Tensor, conds: &[f64], c_ins: &[f64]) -> Result<Tensor> {
        let mut scaled = x.clone();
        for (i, &c) in c_ins.iter().enumerate() {
            for v in scaled.row_mut(i) {
                *v *= c;
            }
        }
        self.net.forward_per_row(&scaled, conds)
    }

    /// Score interface: `−n̂(c_in·x, σ)/σ` where n̂ is the inner net.
    pub fn score_per_row(&self, x: &Tensor, sigmas: &[f64]) -> Result<Tensor> {
        self.expect_kind(ModelKind::Score)?;
        if sigmas.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::invalid("score interface needs σ > 0"));
        }
        let c_ins: Vec<f64> = sigmas.iter().map(|&s| self.c_in(s)).collect();
        let mut out = self.raw_per_row(x, sigmas, &c_ins)?;
        for (i, &s) in sigmas.iter().enumerate() {
            let c = -1.0 / s;
            for v in out.row_mut(i) {
                *v *= c;
            }
        }
        Ok(out)
    }

    /// Endpoint interface: `n̂(c_in·x, σ)`.
    pub fn endpoint_per_row(&self, x: &Tensor, sigmas: &[f64]) -> Result<Tensor> {
        self.expect_kind(ModelKind::Endpoint)?;
        if sigmas.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::invalid("endpoint interface needs σ > 0"));
        }
        let c_ins: Vec<f64> = sigmas.iter().map(|&s| self.c_in(s)).collect();
        self.raw_per_row(x, sigmas, &c_ins)
    }

    /// Builds the score interface inside an autodiff graph for a constant
    /// batch `x`, sharing the arithmetic of [`NetModel::score_per_row`].
    /// Gradients flow to the bound parameters only.
    pub fn score_in_graph(
        &self,
        g: &mut Graph,
        bound: &GraphNet,
        x: &Tensor,
        sigmas: &[f64],
    ) -> Result<NodeId> {
        self.expect_kind(ModelKind::Score)?;
        let raw = self.preconditioned_forward(g, bound, x, sigmas)?;
        let neg_inv: Vec<f64> = sigmas.iter().map(|&s| -1.0 / s).collect();
        Ok(g.row_scale(raw, &neg_inv))
    }

    /// Endpoint interface inside an autodiff graph for a constant batch.
    pub fn endpoint_in_graph(
        &self,
        g: &mut Graph,
        bound: &GraphNet,
        x: &Tensor,
        sigmas: &[f64],
    ) -> Result<NodeId> {
        self.expect_kind(ModelKind::Endpoint)?;
        self.preconditioned_forward(g, bound, x, sigmas)
    }

    /// Velocity interface inside an autodiff graph for a constant batch.
    pub fn velocity_in_graph(
        &self,
        g: &mut Graph,
        bound: &GraphNet,
        x: &Tensor,
        ts: &[f64],
    ) -> Result<NodeId> {
        self.expect_kind(ModelKind::Velocity)?;
        let input = g.input(self.net.input_with_cond(x, ts)?);
        Ok(self.net.forward_in_graph(g, bound, input))
    }

    /// Raw noise prediction inside an autodiff graph for a constant batch.
    pub fn noise_in_graph(
        &self,
        g: &mut Graph,
        bound: &GraphNet,
        x: &Tensor,
        t_norms: &[f64],
    ) -> Result<NodeId> {
        self.expect_kind(ModelKind::Noise)?;
        let input = g.input(self.net.input_with_cond(x, t_norms)?);
        Ok(self.net.forward_in_graph(g, bound, input))
    }

    /// Shared graph path for σ-conditioned kinds: embeds `c_in·x` as a
    /// constant leaf and runs the bound net on it.
    fn preconditioned_forward(
        &self,
        g: &mut Graph,
        bound: &GraphNet,
        x: &Tensor,
        sigmas: &[f64],
    ) -> Result<NodeId> {
        if sigmas.len() != x.rows() {
            return Err(Error::shape(format!(
                "{} σ values for {} rows",
                sigmas.len(),
                x.rows()
            )));
        }
        if sigmas.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::invalid("σ-conditioned interfaces need σ > 0"));
        }
        let mut scaled = x.clone();
        for (i, &s) in sigmas.iter().enumerate() {
            let c = self.c_in(s);
            for v in scaled.row_mut(i) {
                *v *= c;
            }
        }
        let input = g.input(self.net.input_with_cond(&scaled, sigmas)?);
        Ok(self.net.forward_in_graph(g, bound, input))
    }

    /// Velocity interface: raw net evaluation, t-conditioned.
    pub fn velocity_eval(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        self.expect_kind(ModelKind::Velocity)?;
        self.net.forward(x, t)
    }

    /// Velocity interface with one time per row.
    pub fn velocity_per_row(&self, x: &Tensor, ts: &[f64]) -> Result<Tensor> {
        self.expect_kind(ModelKind::Velocity)?;
        self.net.forward_per_row(x, ts)
    }

    /// Raw noise prediction for the variance-preserving chain.
    pub fn noise_eval(&self, x: &Tensor, t_norm: f64) -> Result<Tensor> {
        self.expect_kind(ModelKind::Noise)?;
        self.net.forward(x, t_norm)
    }

    /// Raw noise prediction with one normalised time per row.
    pub fn noise_per_row(&self, x: &Tensor, t_norms: &[f64]) -> Result<Tensor> {
        self.expect_kind(ModelKind::Noise)?;
        self.net.forward_per_row(x, t_norms)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_mlp(path, &self.net, self.kind.tag(), self.sigma_data)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (net, tag, sigma_data) = load_mlp(path)?;
        let kind = ModelKind::from_tag(tag)
            .map_err(|_| Error::Format {
                path: path.display().to_string(),
                detail: format!("unknown model kind tag {tag}"),
            })?;
        NetModel::new(net, kind, sigma_data).map_err(|e| Error::Format {
            path: path.display().to_string(),
            detail: format!("stored model inconsistent: {e}"),
        })
    }
}

impl ScoreModel for NetModel {
    fn score(&self, x: &Tensor, sigma: f64) -> Result<Tensor> {
        let sigmas = vec![sigma; x.rows()];
        self.score_per_row(x, &sigmas)
    }
}

impl EndpointModel for NetModel {
    fn endpoint(&self, x: &Tensor, sigma: f64) -> Result<Tensor> {
        let sigmas = vec![sigma; x.rows()];
        self.endpoint_per_row(x, &sigmas)
    }
}

impl VelocityModel for NetModel {
    fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        self.velocity_eval(x, t)
    }
}

impl NoisePredictor for NetModel {
    fn noise_hat(&self, x: &Tensor, t_norm: f64) -> Result<Tensor> {
        self.noise_eval(x, t_norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::Rng;
    use crate::nn::{Activation, Conditioning, Graph};

    fn model(kind: ModelKind, sigma_data: f64, seed: u64) -> NetModel {
        let mut rng = Rng::seed_from(seed);
        let net = Mlp::new(3, &[8], 3, Activation::Silu, kind.expected_conditioning(), 4, &mut rng)
            .unwrap();
        NetModel::new(net, kind, sigma_data).unwrap()
    }

    fn zeroed(mut m: NetModel) -> NetModel {
        for p in m.net_mut().params_mut() {
            for v in p.data_mut() {
                *v = 0.0;
            }
        }
        m
    }

    fn batch(seed: u64, n: usize) -> Tensor {
        let mut rng = Rng::seed_from(seed);
        let mut t = Tensor::zeros(n, 3);
        rng.fill_standard_normal(t.data_mut());
        t
    }

    #[test]
    fn zero_weights_give_the_zero_model_under_every_interface() {
        let x = batch(1, 4);
        let sigmas = [0.05, 1.0, 7.0, 80.0];
        let score = zeroed(model(ModelKind::Score, 1.0, 2));
        let end = zeroed(model(ModelKind::Endpoint, 1.0, 3));
        let vel = zeroed(model(ModelKind::Velocity, 1.0, 4));
        let noise = zeroed(model(ModelKind::Noise, 1.0, 5));
        for out in [
            score.score_per_row(&x, &sigmas).unwrap(),
            end.endpoint_per_row(&x, &sigmas).unwrap(),
            vel.velocity_per_row(&x, &[0.0, 0.3, 0.7, 1.0]).unwrap(),
            noise.noise_per_row(&x, &[0.1, 0.3, 0.7, 1.0]).unwrap(),
        ] {
            assert!(out.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn graph_and_per_row_interfaces_agree_bitwise() {
        let x = batch(6, 5);
        let sigmas = [0.05, 0.4, 1.0, 11.0, 80.0];
        let ts = [0.0, 0.2, 0.5, 0.8, 1.0];
        let t_norms = [0.1, 0.2, 0.5, 0.8, 1.0];

        let m = model(ModelKind::Score, 0.8, 7);
        let pure = m.score_per_row(&x, &sigmas).unwrap();
        let mut g = Graph::new();
        let bound = m.net().bind(&mut g);
        let node = m.score_in_graph(&mut g, &bound, &x, &sigmas).unwrap();
        assert_eq!(g.value(node).data(), pure.data());

        let m = model(ModelKind::Endpoint, 1.3, 8);
        let pure = m.endpoint_per_row(&x, &sigmas).unwrap();
        let mut g = Graph::new();
        let bound = m.net().bind(&mut g);
        let node = m.endpoint_in_graph(&mut g, &bound, &x, &sigmas).unwrap();
        assert_eq!(g.value(node).data(), pure.data());

        let m = model(ModelKind::Velocity, 1.0, 9);
        let pure = m.velocity_per_row(&x, &ts).unwrap();
        let mut g = Graph::new();
        let bound = m.net().bind(&mut g);
        let node = m.velocity_in_graph(&mut g, &bound, &x, &ts).unwrap();
        assert_eq!(g.value(node).data(), pure.data());

        let m = model(ModelKind::Noise, 1.0, 10);
        let pure = m.noise_per_row(&x, &t_norms).unwrap();
        let mut g = Graph::new();
        let bound = m.net().bind(&mut g);
        let node = m.noise_in_graph(&mut g, &bound, &x, &t_norms).unwrap();
        assert_eq!(g.value(node).data(), pure.data());
    }

    #[test]
    fn score_is_scaled_net_output_on_scaled_input() {
        // One row, hand-applied preconditioning against the interface.
        let m = model(ModelKind::Score, 2.0, 11);
        let x = batch(12, 1);
        let sigma = 3.0;
        let c_in = 1.0 / (sigma * sigma + 4.0f64).sqrt();
        let scaled = x.map(|v| v * c_in);
        let raw = m.net().forward_per_row(&scaled, &[sigma]).unwrap();
        let want = raw.map(|v| v * (-1.0 / sigma));
        let got = m.score_per_row(&x, &[sigma]).unwrap();
        assert_eq!(got.data(), want.data());
    }

    #[test]
    fn interfaces_are_gated_by_kind() {
        let m = model(ModelKind::Score, 1.0, 13);
        let x = batch(14, 2);
        assert!(m.score_per_row(&x, &[1.0, 2.0]).is_ok());
        assert!(m.endpoint_per_row(&x, &[1.0, 2.0]).is_err());
        assert!(m.velocity_per_row(&x, &[0.5, 0.5]).is_err());
        assert!(m.noise_per_row(&x, &[0.5, 0.5]).is_err());
        assert!(m.score_per_row(&x, &[1.0, 0.0]).is_err());
        assert!(m.score_per_row(&x, &[1.0]).is_err());
    }

    #[test]
    fn construction_rejects_mismatched_conditioning_and_bad_scale() {
        let mut rng = Rng::seed_from(15);
        let t_net =
            Mlp::new(3, &[8], 3, Activation::Silu, Conditioning::Time, 4, &mut rng).unwrap();
        assert!(NetModel::new(t_net.clone(), ModelKind::Score, 1.0).is_err());
        assert!(NetModel::new(t_net.clone(), ModelKind::Velocity, 0.0).is_err());
        assert!(NetModel::new(t_net, ModelKind::Velocity, 1.0).is_ok());
    }

    #[test]
    fn save_and_load_round_trip_preserves_kind_and_scale() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.fcpt");
        let m = model(ModelKind::Endpoint, 0.75, 16);
        m.save(&path).unwrap();
        let back = NetModel::load(&path).unwrap();
        assert_eq!(back.kind(), ModelKind::Endpoint);
        assert_eq!(back.sigma_data(), 0.75);
        let x = batch(17, 3);
        let sigmas = [0.3, 1.0, 9.0];
        assert_eq!(
            back.endpoint_per_row(&x, &sigmas).unwrap().data(),
            m.endpoint_per_row(&x, &sigmas).unwrap().data()
        );
    }
}
