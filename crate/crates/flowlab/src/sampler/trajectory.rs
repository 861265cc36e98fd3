//! Recorded sampling trajectories and their CSV dump format.

use std::io::Write;

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// One sampling path: states with progress values `t_k = k/(K−1)` spread
/// uniformly over the recorded steps, plus method/seed/NFE metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    method: String,
    seed: u64,
    nfe: usize,
    states: Vec<Vec<f64>>,
}

impl Trajectory {
    /// Builds a trajectory from raw states in visit order; progress values
    /// are assigned as `k/(K−1)`.
    pub fn from_states(
        method: impl Into<String>,
        seed: u64,
        nfe: usize,
        states: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if states.len() < 2 {
            return Err(Error::invalid(format!(
                "trajectory needs at least 2 states, got {}",
                states.len()
            )));
        }
        let dim = states[0].len();
        if dim == 0 || states.iter().any(|s| s.len() != dim) {
            return Err(Error::shape("trajectory states must share one positive dimension"));
        }
        Ok(Trajectory { method: method.into(), seed, nfe, states })
    }

    pub fn method(&self) -> &str {
        &self.method
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn nfe(&self) -> usize {
        self.nfe
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.states[0].len()
    }

    /// Progress of recorded state `k`, uniform in step index.
    pub fn progress(&self, k: usize) -> f64 {
        k as f64 / (self.states.len() - 1) as f64
    }

    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k]
    }

    pub fn first(&self) -> &[f64] {
        self.state(0)
    }

    pub fn last(&self) -> &[f64] {
        self.state(self.states.len() - 1)
    }

    pub fn states(&self) -> &[Vec<f64>] {
        &self.states
    }
}

/// Per-sample trajectories out of per-step batch snapshots: row `i` of every
/// snapshot becomes state sequence `i`.
pub fn trajectories_from_snapshots(
    method: &str,
    seed: u64,
    nfe: usize,
    snapshots: &[Tensor],
) -> Result<Vec<Trajectory>> {
    if snapshots.len() < 2 {
        return Err(Error::invalid("need at least 2 snapshots"));
    }
    let rows = snapshots[0].rows();
    if snapshots.iter().any(|s| s.rows() != rows || s.cols() != snapshots[0].cols()) {
        return Err(Error::shape("snapshots must share one shape"));
    }
    (0..rows)
        .map(|i| {
            let states = snapshots.iter().map(|s| s.row(i).to_vec()).collect();
            Trajectory::from_states(method, seed, nfe, states)
        })
        .collect()
}

/// Writes trajectories as CSV with header `method,seed,k,t,dim0..dimD-1`.
pub fn write_trajectories_csv(trajectories: &[Trajectory], out: &mut impl Write) -> Result<()> {
    let dim = match trajectories.first() {
        Some(t) => t.dim(),
        None => return Err(Error::invalid("no trajectories to write")),
    };
    if trajectories.iter().any(|t| t.dim() != dim) {
        return Err(Error::shape("trajectories must share one dimension"));
    }
    write!(out, "method,seed,k,t")?;
    for j in 0..dim {
        write!(out, ",dim{j}")?;
    }
    writeln!(out)?;
    for traj in trajectories {
        for k in 0..traj.len() {
            write!(out, "{},{},{k},{}", traj.method(), traj.seed(), traj.progress(k))?;
            for v in traj.state(k) {
                write!(out, ",{v}")?;
            }
            writeln!(out)?;
        }
    }
    Ok(())
}
