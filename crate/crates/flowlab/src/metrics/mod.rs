//! Quantitative probes over trained models and sampled trajectories:
//! trajectory straightness, terminal-step degeneracy checks, the
//! batch-size scaling study for in-batch optimal pairing, a two-sample
//! energy statistic, and the endpoint iso-line error.
//!
//! Every metric is a pure function of its inputs. Monte-Carlo studies split
//! their trials over labelled [`crate::dist::Rng`] streams and reduce
//! partial sums in index order, so results do not depend on thread count.

mod collapse;
mod energy;
mod isoline;
mod ot_scaling;
mod report;
mod straightness;

pub use collapse::{
    collapse_probe_cfm, collapse_probe_ddpm, collapse_probe_ncsn, CollapseReport,
};
pub use energy::{energy_distance, energy_distance_permutation_null, quantile};
pub use isoline::isoline_probe;
pub use ot_scaling::{ot_scaling_study, OtCell, OtScalingReport};
pub use report::{to_json_pretty, write_metric_csv, MetricRow};
pub use straightness::{path_straightness, straightness, StraightnessReport};

/// Mean and sample standard deviation (`n−1` denominator; 0 when `n < 2`).
pub(crate) fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let ss = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>();
    (mean, (ss / (n - 1) as f64).sqrt())
}

/// Euclidean norm of a slice.
pub(crate) fn norm(xs: &[f64]) -> f64 {
    xs.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Euclidean distance between two equal-length slices.
pub(crate) fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}
