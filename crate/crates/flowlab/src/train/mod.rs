//! Training losses, the optimisation loop, adversarial fine-tuning, and flow
//! rectification.

pub mod adversarial;
pub mod config;
pub mod losses;
pub mod rectflow;
pub mod trainer;

pub use adversarial::{
    adaptive_weight, adversarial_finetune, disc_loss, disc_loss_value,
    generator_adversarial_loss, generator_adversarial_value, AdvOutcome, DiscStep, DISC_CLAMP,
    LAMBDA_MAX, LAMBDA_MIN,
};
pub use config::{sot_filter, LossNorm, Method, SigmaLaw, TrainConfig};
pub use losses::{
    bot_cfm_loss, bot_cfm_loss_value, cfm_loss, cfm_loss_value, ddpm_loss, ddpm_loss_value,
    dsm_loss, dsm_loss_value, lines_loss, lines_loss_value, LossGraph,
};
pub use rectflow::{rectflow_iterate, RectflowOutcome};
pub use trainer::{
    regression_probe, required_kind, train, write_curve_csv, CurvePoint, DataSource, Schedules,
    TrainOutcome,
};
