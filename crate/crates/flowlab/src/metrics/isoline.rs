//! Endpoint iso-line error. An ideal endpoint predictor maps every state
//! `x₁ + σ·x₀` on a source→target line back to the same clean target `x₁`,
//! for every noise scale σ: the line is an iso-contour of the predictor.
//! The probe reports the worst relative endpoint error over a pair set and
//! a σ grid.

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::sampler::EndpointModel;

use super::{dist, norm};

/// Max over pairs and σ of ‖model(x₁+σx₀, σ) − x₁‖ / ‖x₁‖. The pairs should
/// be held out from the model's training set for the number to mean
/// generalization rather than recall.
pub fn isoline_probe(
    model: &impl EndpointModel,
    x0: &Tensor,
    x1: &Tensor,
    sigmas: &[f64],
) -> Result<f64> {
    if !x0.same_shape(x1) {
        return Err(Error::shape(format!(
            "source {}×{} against target {}×{}",
            x0.rows(),
            x0.cols(),
            x1.rows(),
            x1.cols()
        )));
    }
    if x0.rows() == 0 || x0.cols() == 0 {
        return Err(Error::invalid("no pairs to probe"));
    }
    if !x0.is_finite() || !x1.is_finite() {
        return Err(Error::invalid("pairs have non-finite entries"));
    }
    if sigmas.is_empty() {
        return Err(Error::invalid("empty σ grid"));
    }
    if sigmas.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::invalid("σ grid entries must be positive and finite"));
    }
    let norms: Vec<f64> = (0..x1.rows()).map(|i| norm(x1.row(i))).collect();
    if let Some(i) = norms.iter().position(|&n| n == 0.0) {
        return Err(Error::invalid(format!(
            "pair {i} has a zero target, relative error undefined"
        )));
    }

    let mut worst = 0.0f64;
    for &sigma in sigmas {
        let mut states = x1.clone();
        states.add_assign_scaled(x0, sigma);
        let pred = model.endpoint(&states, sigma)?;
        if !pred.same_shape(x1) {
            return Err(Error::shape("model changed the batch shape"));
        }
        for i in 0..x1.rows() {
            worst = worst.max(dist(pred.row(i), x1.row(i)) / norms[i]);
        }
    }
    Ok(worst)
}
