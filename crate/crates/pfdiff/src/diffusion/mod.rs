//! The diffusion model proper: forward process, noise schedules, the
//! physics-informed training objective, and the reverse sampler.
//!
//! All diffusion states live in model scale [−1, 1]; physics quantities
//! (imbalance residuals, the γ budget) live in per-unit physical scale, and
//! the normalization box is the bridge between the two. Training uses the
//! strictly affine bridge so gradients survive; sampling uses the snapping
//! bridge so emitted samples satisfy their box constraints exactly.

pub mod bound;
pub mod forward;
pub mod sampler;
pub mod schedule;
pub mod train;

pub use bound::{ImbalanceBound, GAMMA_TERMINAL_14, GAMMA_TERMINAL_30};
pub use forward::{forward_sample, forward_with_alpha_bar};
pub use sampler::{posterior_mean, reverse_step, sample, ReverseTrace, SamplerOutput, TraceRow};
pub use schedule::{
    default_schedule, linear_beta_schedule, NoiseSchedule, ScheduleProvenance, ALPHA_BAR_FIRST_MIN,
    ALPHA_BAR_LAST_MAX, DEFAULT_BETA_1, DEFAULT_BETA_T, DEFAULT_T_STEPS,
};
pub use train::{
    combined_loss_grad, physics_hinge, DdpmCheckpoint, DdpmTrainer, HingeAttach, LossBreakdown,
    PhysicsContext, TrainLogRow, TrainingConfig,
};
