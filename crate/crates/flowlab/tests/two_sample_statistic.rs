//! Null-calibration oracle for the energy statistic at realistic sample
//! sizes: two samples from the same 8-dimensional normal must not look
//! different, i.e. the observed statistic stays below the 95th percentile
//! of the permutation null.

use flowlab::dist::Rng;
use flowlab::metrics::{energy_distance, energy_distance_permutation_null, quantile};
use flowlab::nn::Tensor;

#[test]
fn matched_normal_samples_pass_the_permutation_test() {
    let (n, d) = (2000, 8);
    let mut rng = Rng::seed_from(271);
    let mut a = Tensor::zeros(n, d);
    let mut b = Tensor::zeros(n, d);
    rng.fill_standard_normal(a.data_mut());
    rng.fill_standard_normal(b.data_mut());

    let observed = energy_distance(&a, &b).unwrap();
    let null = energy_distance_permutation_null(&a, &b, 99, &mut rng).unwrap();
    let cut = quantile(&null, 0.95).unwrap();
    assert!(
        observed < cut,
        "observed {observed} at or above the 95th percentile {cut}"
    );
    // The statistic concentrates near zero at this sample size; both the
    // observation and the cut must sit well under the point-mass scale.
    assert!(observed.abs() < 0.05, "observed {observed}");
    assert!(cut > 0.0 && cut < 0.05, "cut {cut}");
}
