//! Sampling: deterministic Heun probability-flow integration, Euler flow
//! integration, the few-step stochastic endpoint sampler, the constant-speed
//! line stepper, and ancestral reverse diffusion.

mod integrators;
mod model;
mod trajectory;

pub use integrators::{
    ddpm_reverse_sample, euler_flow_reverse, euler_flow_sample, heun_sample, line_path_sample,
    line_step, lmm_sample,
};
pub use model::{
    AnalyticScore, EndpointFn, EndpointModel, ModelKind, NetModel, NoiseFn, NoisePredictor,
    ScoreFn, ScoreModel, VelocityFn, VelocityModel,
};
pub use trajectory::{trajectories_from_snapshots, write_trajectories_csv, Trajectory};
