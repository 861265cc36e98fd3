//! Straightness of a sampled trajectory: the accumulated deviation of its
//! piecewise velocity from the constant velocity of the straight segment
//! between its endpoints. Zero exactly when every recorded increment moves
//! along that segment at uniform speed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler::Trajectory;

use super::mean_std;
use super::report::MetricRow;

/// Straightness of a path given explicit times: Σₖ Δtₖ·‖(xₖ₊₁−xₖ)/Δtₖ − Δ‖
/// with Δ = x_end − x_start. Times must be strictly increasing.
pub fn path_straightness(ts: &[f64], states: &[Vec<f64>]) -> Result<f64> {
    if ts.len() != states.len() {
        return Err(Error::shape(format!(
            "{} times for {} states",
            ts.len(),
            states.len()
        )));
    }
    if states.len() < 2 {
        return Err(Error::invalid("straightness needs at least 2 states"));
    }
    let dim = states[0].len();
    if dim == 0 || states.iter().any(|s| s.len() != dim) {
        return Err(Error::shape("states must share one positive dimension"));
    }
    if ts.iter().any(|t| !t.is_finite()) {
        return Err(Error::invalid("non-finite time value"));
    }
    for w in ts.windows(2) {
        if w[1] <= w[0] {
            return Err(Error::invalid(format!(
                "times must be strictly increasing, got {} then {}",
                w[0], w[1]
            )));
        }
    }
    let first = &states[0];
    let last = &states[states.len() - 1];
    let delta: Vec<f64> = last.iter().zip(first).map(|(b, a)| b - a).collect();
    let mut total = 0.0;
    for k in 0..states.len() - 1 {
        let dt = ts[k + 1] - ts[k];
        let mut sq = 0.0;
        for j in 0..dim {
            let v = (states[k + 1][j] - states[k][j]) / dt - delta[j];
            sq += v * v;
        }
        total += dt * sq.sqrt();
    }
    Ok(total)
}

/// Straightness of a recorded trajectory under its uniform time grid.
pub fn straightness(traj: &Trajectory) -> f64 {
    let ts: Vec<f64> = (0..traj.len()).map(|k| traj.progress(k)).collect();
    path_straightness(&ts, traj.states())
        .expect("a well-formed trajectory is always a valid path")
}

/// Straightness summary for a batch of trajectories sampled by one method:
/// per-trajectory scores, their mean and sample standard deviation, and a
/// normalized variant where each score is divided by that trajectory's
/// endpoint displacement ‖x_end − x_start‖.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StraightnessReport {
    method: String,
    raw: Vec<f64>,
    normalized: Vec<f64>,
    raw_mean: f64,
    raw_std: f64,
    normalized_mean: f64,
    normalized_std: f64,
}

impl StraightnessReport {
    /// Scores every trajectory. Rejects an empty batch and any trajectory
    /// with coincident endpoints, for which the normalized score is
    /// undefined.
    pub fn from_trajectories(method: impl Into<String>, trajs: &[Trajectory]) -> Result<Self> {
        Self::score_each(method, trajs, |traj| Ok(straightness(traj)))
    }

    /// Scores every trajectory on one shared, possibly non-uniform time grid,
    /// e.g. a noise ladder mapped onto [0, 1]. The grid must fit the paths.
    pub fn from_paths(
        method: impl Into<String>,
        ts: &[f64],
        trajs: &[Trajectory],
    ) -> Result<Self> {
        Self::score_each(method, trajs, |traj| path_straightness(ts, traj.states()))
    }

    fn score_each(
        method: impl Into<String>,
        trajs: &[Trajectory],
        score: impl Fn(&Trajectory) -> Result<f64>,
    ) -> Result<Self> {
        if trajs.is_empty() {
            return Err(Error::invalid("no trajectories to score"));
        }
        let mut raw = Vec::with_capacity(trajs.len());
        let mut normalized = Vec::with_capacity(trajs.len());
        for (i, traj) in trajs.iter().enumerate() {
            let s = score(traj)?;
            let span = super::dist(traj.last(), traj.first());
            if span == 0.0 {
                return Err(Error::invalid(format!(
                    "trajectory {i} has coincident endpoints; normalized straightness undefined"
                )));
            }
            raw.push(s);
            normalized.push(s / span);
        }
        let (raw_mean, raw_std) = mean_std(&raw);
        let (normalized_mean, normalized_std) = mean_std(&normalized);
        Ok(StraightnessReport {
            method: method.into(),
            raw,
            normalized,
            raw_mean,
            raw_std,
            normalized_mean,
            normalized_std,
        })
    }

    pub fn method(&self) -> &str {
        &self.method
    }

    pub fn raw(&self) -> &[f64] {
        &self.raw
    }

    pub fn normalized(&self) -> &[f64] {
        &self.normalized
    }

    pub fn count(&self) -> usize {
        self.raw.len()
    }

    pub fn mean(&self) -> f64 {
        self.raw_mean
    }

    pub fn std(&self) -> f64 {
        self.raw_std
    }

    pub fn normalized_mean(&self) -> f64 {
        self.normalized_mean
    }

    pub fn normalized_std(&self) -> f64 {
        self.normalized_std
    }

    /// Flat export rows; `stderr` carries the standard error of each mean.
    pub fn rows(&self) -> Vec<MetricRow> {
        let se = |std: f64| std / (self.raw.len() as f64).sqrt();
        vec![
            MetricRow {
                metric: "straightness".into(),
                method: self.method.clone(),
                d: None,
                n: Some(self.raw.len()),
                value: self.raw_mean,
                stderr: Some(se(self.raw_std)),
            },
            MetricRow {
                metric: "straightness_normalized".into(),
                method: self.method.clone(),
                d: None,
                n: Some(self.raw.len()),
                value: self.normalized_mean,
                stderr: Some(se(self.normalized_std)),
            },
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::collection::vec as pvec;
    use proptest::{prop_assert, proptest};

    fn line_states(x0: &[f64], delta: &[f64], k: usize) -> Vec<Vec<f64>> {
        (0..k)
            .map(|i| {
                let t = i as f64 / (k - 1) as f64;
                x0.iter().zip(delta).map(|(a, d)| a + t * d).collect()
            })
            .collect()
    }

    fn traj(states: Vec<Vec<f64>>) -> Trajectory {
        Trajectory::from_states("probe", 0, 0, states).unwrap()
    }

    #[test]
    fn exact_uniform_line_scores_zero_for_any_length() {
        let x0 = [1.5, -2.0, 0.25, 7.0, -0.125];
        let delta = [2.0, 3.5, -1.0, 0.5, 4.0];
        for k in [2usize, 3, 7, 50] {
            let t = traj(line_states(&x0, &delta, k));
            let s = straightness(&t);
            assert!(s <= 1e-12, "K={k} gave {s}");
        }
    }

    #[test]
    fn semicircle_matches_independent_quadrature() {
        // Unit semicircle from (1,0) to (−1,0), uniform angle: the arc
        // velocity is analytic, so the straightness integral can be checked
        // against Simpson quadrature of ‖ẋ(t) − (x₁−x₀)‖ computed without
        // any finite differences.
        let k = 1000;
        let states: Vec<Vec<f64>> = (0..k)
            .map(|i| {
                let t = i as f64 / (k - 1) as f64;
                vec![(std::f64::consts::PI * t).cos(), (std::f64::consts::PI * t).sin()]
            })
            .collect();
        let s = straightness(&traj(states));

        let integrand = |t: f64| {
            let vx = -std::f64::consts::PI * (std::f64::consts::PI * t).sin() + 2.0;
            let vy = std::f64::consts::PI * (std::f64::consts::PI * t).cos();
            vx.hypot(vy)
        };
        let n = 1 << 16;
        let h = 1.0 / n as f64;
        let mut acc = integrand(0.0) + integrand(1.0);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * integrand(i as f64 * h);
        }
        let quad = acc * h / 3.0;

        // The quadrature value itself is pinned so both routes cannot drift
        // together unnoticed.
        assert!((quad - 2.2808907919113595).abs() < 1e-9, "quadrature {quad}");
        assert!((s - quad).abs() <= 1e-3, "discrete {s} vs quadrature {quad}");
    }

    #[test]
    fn bad_time_grids_are_rejected() {
        let states = vec![vec![0.0], vec![1.0], vec![2.0]];
        assert!(path_straightness(&[0.0, 0.5, 0.5], &states).is_err());
        assert!(path_straightness(&[0.0, 0.6, 0.4], &states).is_err());
        assert!(path_straightness(&[0.0, 0.5], &states).is_err());
        assert!(path_straightness(&[0.0, f64::NAN, 1.0], &states).is_err());
        assert!(path_straightness(&[0.0], &[vec![1.0]]).is_err());
        let ragged = vec![vec![0.0, 1.0], vec![1.0]];
        assert!(path_straightness(&[0.0, 1.0], &ragged).is_err());
    }

    #[test]
    fn report_summarises_and_rejects_coincident_endpoints() {
        let a = traj(line_states(&[0.0, 0.0], &[1.0, 0.0], 3));
        // A dog-leg: out along x then back up y, far from straight.
        let b = traj(vec![vec![0.0, 0.0], vec![2.0, 0.0], vec![1.0, 1.0]]);
        let rep = StraightnessReport::from_trajectories("demo", &[a.clone(), b]).unwrap();
        assert_eq!(rep.count(), 2);
        assert_eq!(rep.method(), "demo");
        assert!(rep.raw().iter().all(|&s| s >= 0.0));
        assert!(rep.normalized().iter().all(|&s| s >= 0.0));
        let (m, s) = mean_std(rep.raw());
        assert_eq!((rep.mean(), rep.std()), (m, s));
        let rows = rep.rows();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].metric, "straightness");
        assert_eq!(rows[1].metric, "straightness_normalized");
        assert_eq!(rows[0].n, Some(2));

        let json = super::super::to_json_pretty(&rep).unwrap();
        let back: StraightnessReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, rep);

        let loop_back = traj(vec![vec![0.0], vec![1.0], vec![0.0]]);
        assert!(StraightnessReport::from_trajectories("demo", &[a, loop_back]).is_err());
    }

    #[test]
    fn shared_grid_report_scores_ladder_paths() {
        // States linear in the grid parameter: a noise ladder descended at
        // constant velocity per unit σ. Straight under the matching grid.
        let sigmas = [10.0, 6.0, 3.0, 1.0, 0.2, 0.0];
        let ts: Vec<f64> = sigmas.iter().map(|s| (10.0 - s) / 10.0).collect();
        let x1 = [1.0, -2.0];
        let u = [0.5, 0.25];
        let states: Vec<Vec<f64>> = sigmas
            .iter()
            .map(|&s| vec![x1[0] + s * u[0], x1[1] + s * u[1]])
            .collect();
        let t = traj(states);
        let rep = StraightnessReport::from_paths("ladder", &ts, &[t.clone()]).unwrap();
        assert!(rep.mean() <= 1e-12, "straight ladder path scored {}", rep.mean());

        // Same states on a uniform grid are *not* straight: the σ spacing is
        // uneven, so index-uniform velocities vary.
        let uni = StraightnessReport::from_trajectories("ladder", &[t.clone()]).unwrap();
        assert!(uni.mean() > 0.1, "uniform-grid score {}", uni.mean());

        // With a uniform grid the two constructors agree bitwise.
        let k = t.len();
        let ts_uni: Vec<f64> = (0..k).map(|i| i as f64 / (k - 1) as f64).collect();
        let via_paths = StraightnessReport::from_paths("ladder", &ts_uni, &[t.clone()]).unwrap();
        assert_eq!(via_paths, uni);

        // Grid and paths must line up.
        assert!(StraightnessReport::from_paths("ladder", &ts[..4], &[t]).is_err());
    }

    proptest! {
        #[test]
        fn inserting_a_collinear_point_keeps_a_straight_path_straight(
            x0 in pvec(-5.0f64..5.0, 1..4),
            dirs in pvec(-4.0f64..4.0, 1..4),
            k in 2usize..8,
            seg in 0usize..7,
            frac in 0.05f64..0.95,
        ) {
            let d = x0.len().min(dirs.len());
            let x0 = &x0[..d];
            let delta = &dirs[..d];
            let mut ts: Vec<f64> = (0..k).map(|i| i as f64 / (k - 1) as f64).collect();
            let mut states = line_states(x0, delta, k);
            let before = path_straightness(&ts, &states).unwrap();

            let seg = seg % (k - 1);
            let t_new = ts[seg] + frac * (ts[seg + 1] - ts[seg]);
            let point: Vec<f64> =
                x0.iter().zip(delta).map(|(a, dx)| a + t_new * dx).collect();
            ts.insert(seg + 1, t_new);
            states.insert(seg + 1, point);
            let after = path_straightness(&ts, &states).unwrap();

            prop_assert!(before <= 1e-12, "line scored {before}");
            prop_assert!(after <= 1e-12, "line with extra point scored {after}");
        }

        #[test]
        fn straightness_is_homogeneous_of_degree_one(
            flat in pvec(-10.0f64..10.0, 4..24),
            d in 1usize..4,
            c in 0.125f64..8.0,
        ) {
            let k = flat.len() / d;
            if k >= 2 {
                let states: Vec<Vec<f64>> =
                    flat.chunks(d).take(k).map(|x| x.to_vec()).collect();
                let scaled: Vec<Vec<f64>> = states
                    .iter()
                    .map(|s| s.iter().map(|v| c * v).collect())
                    .collect();
                let s = straightness(&traj(states));
                let sc = straightness(&traj(scaled));
                prop_assert!(
                    (sc - c * s).abs() <= 1e-9 * (1.0 + sc.abs()),
                    "S(cX)={sc} c·S(X)={}",
                    c * s
                );
            }
        }

        #[test]
        fn normalized_straightness_is_scale_invariant(
            flat in pvec(-10.0f64..10.0, 4..24),
            d in 1usize..4,
            c in 0.125f64..8.0,
        ) {
            let k = flat.len() / d;
            if k >= 2 {
                let states: Vec<Vec<f64>> =
                    flat.chunks(d).take(k).map(|x| x.to_vec()).collect();
                let span = super::super::dist(&states[k - 1], &states[0]);
                if span > 1e-3 {
                    let scaled: Vec<Vec<f64>> = states
                        .iter()
                        .map(|s| s.iter().map(|v| c * v).collect())
                        .collect();
                    let a = StraightnessReport::from_trajectories("p", &[traj(states)])
                        .unwrap();
                    let b = StraightnessReport::from_trajectories("p", &[traj(scaled)])
                        .unwrap();
                    let (na, nb) = (a.normalized()[0], b.normalized()[0]);
                    prop_assert!(
                        (na - nb).abs() <= 1e-9 * (1.0 + na.abs()),
                        "normalized {na} vs {nb}"
                    );
                }
            }
        }
    }

    #[test]
    fn rows_publish_standard_error_of_the_mean() {
        let a = traj(vec![vec![0.0, 0.0], vec![2.0, 0.0], vec![1.0, 1.0]]);
        let b = traj(vec![vec![0.0, 0.0], vec![0.5, 0.5], vec![1.0, 3.0]]);
        let rep = StraightnessReport::from_trajectories("x", &[a, b]).unwrap();
        let rows = rep.rows();
        assert!((rows[0].stderr.unwrap() - rep.std() / 2.0f64.sqrt()).abs() < 1e-15);
    }
}
