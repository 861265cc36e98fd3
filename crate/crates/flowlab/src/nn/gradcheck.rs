//! Central finite-difference gradients for validating the autodiff tape.

use crate::nn::tensor::Tensor;

/// Central finite-difference gradient of `f` with respect to every entry of
/// every tensor in `params`, at perturbation `h`.
pub fn finite_difference<F>(params: &[Tensor], mut f: F, h: f64) -> Vec<Tensor>
where
    F: FnMut(&[Tensor]) -> f64,
{
    let mut work: Vec<Tensor> = params.to_vec();
    let mut grads: Vec<Tensor> = params
        .iter()
        .map(|p| Tensor::zeros(p.rows(), p.cols()))
        .collect();
    for ti in 0..params.len() {
        for idx in 0..params[ti].len() {
            let orig = work[ti].data()[idx];
            work[ti].data_mut()[idx] = orig + h;
            let up = f(&work);
            work[ti].data_mut()[idx] = orig - h;
            let down = f(&work);
            work[ti].data_mut()[idx] = orig;
            grads[ti].data_mut()[idx] = (up - down) / (2.0 * h);
        }
    }
    grads
}

/// Worst relative disagreement between two gradient sets. Each entry pair is
/// compared as `|a − n| / max(|a|, |n|, floor)`; the floor keeps noise in
/// near-zero entries from dominating.
pub fn max_rel_error(analytic: &[Tensor], numeric: &[Tensor], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient set sizes differ");
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(numeric) {
        assert!(a.same_shape(n), "gradient shapes differ");
        for (&av, &nv) in a.data().iter().zip(n.data()) {
            let rel = (av - nv).abs() / av.abs().max(nv.abs()).max(floor);
            worst = worst.max(rel);
        }
    }
    worst
}
