//! Physically consistent synthetic power flow data.
//!
//! The crate builds AC power flow datasets and trains a denoising diffusion
//! model over them whose noise schedule is *learned* so that the power
//! imbalance of the forward process grows linearly in t, and whose training
//! loss carries a hinge penalty on the imbalance of intermediate states.
//! Generated samples are clamped into per-dimension feasibility boxes, so
//! box constraints hold by construction and the power-balance residual of
//! the output is small.
//!
//! Pipeline stages, mirrored by the `pfdiff` CLI:
//!
//! 1. [`pf::generate_dataset`] — merit-order dispatch + Newton–Raphson
//!    solves manufacture a feasible dataset.
//! 2. [`learner::train_schedule`] — fit the schedule network so the forward
//!    imbalance curve tracks the linear budget γ_t = t·γ_T/T.
//! 3. [`diffusion::train`] — train the denoiser with the combined
//!    DDPM + physics-hinge objective.
//! 4. [`diffusion::sample`] — reverse diffusion to synthetic samples, with a
//!    per-step imbalance trace.
//! 5. [`metrics`] — feasibility, fidelity, and linearity reports.

pub mod config;
pub mod diffusion;
pub mod error;
pub mod grid;
pub mod learner;
pub mod metrics;
pub mod nn;
pub mod pf;
pub mod rng;

pub use error::{Error, Result};
