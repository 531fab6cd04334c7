//! The reverse (denoising) process and the physical-imbalance trace it
//! leaves behind.
//!
//! One reverse step is x_{t−1} = (x_t − (1−α_t)/√(1−ᾱ_t)·ε̂)/√α_t + σ_t·z
//! with σ_t = √β_t, z ~ N(0, I) for t > 1 and z = 0 at the final step. The
//! full sampler starts chains at pure noise, walks t = T..1, clamps the
//! terminal state into the model box [−1, 1] (so the box constraints hold by
//! construction after denormalization), and records the mean power imbalance
//! of the chain states at every step.
//!
//! Chains are advanced together as one matrix per step — with a shared
//! model and a single sequential noise stream this is both deterministic
//! and the fastest layout for dense layers. (Chains are independent, so a
//! parallel variant would split the stream per chain; nothing in the math
//! couples them.)

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffusion::bound::ImbalanceBound;
use crate::diffusion::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::grid::bounds::NormalizationBounds;
use crate::grid::layout::SampleLayout;
use crate::grid::ybus::AdmittanceMatrix;
use crate::nn::DenoiserModel;
use crate::pf::residual::residual_imbalance;

/// Posterior mean of x_{t−1} given x_t and the model's noise estimate: the
/// reverse update with the stochastic term removed. This is also the state
/// the training-time physics penalty is evaluated on.
pub fn posterior_mean(
    xt: &[f64],
    eps_hat: &[f64],
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    if xt.len() != eps_hat.len() {
        return Err(Error::DimensionMismatch {
            expected: xt.len(),
            got: eps_hat.len(),
            context: "posterior_mean".into(),
        });
    }
    if t < 1 || t > schedule.t_steps {
        return Err(Error::InvalidConfig(format!(
            "t = {t} outside [1, {}]",
            schedule.t_steps
        )));
    }
    let alpha = schedule.alpha_t(t);
    let coef = (1.0 - alpha) / (1.0 - schedule.alpha_bar_t(t)).sqrt();
    let inv_sqrt_alpha = 1.0 / alpha.sqrt();
    Ok(xt
        .iter()
        .zip(eps_hat)
        .map(|(&x, &e)| inv_sqrt_alpha * (x - coef * e))
        .collect())
}

/// One reverse step. `z` is the standard-normal draw scaled by σ_t; pass
/// `None` for the deterministic final step (t = 1) or wherever the mean
/// path is wanted.
pub fn reverse_step(
    xt: &[f64],
    eps_hat: &[f64],
    t: usize,
    schedule: &NoiseSchedule,
    z: Option<&[f64]>,
) -> Result<Vec<f64>> {
    let mut out = posterior_mean(xt, eps_hat, t, schedule)?;
    if let Some(z) = z {
        if z.len() != out.len() {
            return Err(Error::DimensionMismatch {
                expected: out.len(),
                got: z.len(),
                context: "reverse_step noise".into(),
            });
        }
        let sigma = schedule.sigma_t(t);
        for (o, &n) in out.iter_mut().zip(z) {
            *o += sigma * n;
        }
    }
    Ok(out)
}

/// One row of the reverse-process diagnostic: the mean (over chains) power
/// imbalance of the states x_t, next to the linear budget γ_t.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: usize,
    pub gamma: f64,
    pub mean_imbalance: f64,
}

/// Imbalance trace over the whole reverse pass, ascending t = 0..=T
/// (T + 1 rows). Row T is the initial noise, row 0 the emitted samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReverseTrace {
    pub rows: Vec<TraceRow>,
}

/// Everything one sampling run produces.
#[derive(Debug, Clone)]
pub struct SamplerOutput {
    /// Final states in model scale, clamped into [−1, 1].
    pub model_rows: Array2<f64>,
    /// The same rows in unit scale [0, 1] (the dataset interchange scale).
    pub unit_rows: Vec<Vec<f64>>,
    /// The same rows in physical units, inside the feasibility box.
    pub physical_rows: Vec<Vec<f64>>,
    pub trace: ReverseTrace,
}

fn mean_imbalance_of(
    x: &Array2<f64>,
    bounds: &NormalizationBounds,
    layout: &SampleLayout,
    y: &AdmittanceMatrix,
) -> Result<f64> {
    let n = x.nrows();
    let mut acc = 0.0;
    for i in 0..n {
        let row: Vec<f64> = x.row(i).to_vec();
        let phys = bounds.physical_from_model(&row)?;
        acc += residual_imbalance(&phys, layout, y)?.mean;
    }
    Ok(acc / n as f64)
}

/// Run `n` reverse chains from pure noise to samples.
///
/// Chains start at x_T ~ N(0, I), step down to t = 0, and the terminal
/// state is clamped into [−1, 1] before denormalization — the per-dimension
/// box constraints therefore hold by construction, while the power-balance
/// quality is reported (trace row 0), not enforced.
pub fn sample(
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    bound: &ImbalanceBound,
    n: usize,
    layout: &SampleLayout,
    bounds: &NormalizationBounds,
    y: &AdmittanceMatrix,
    rng: &mut ChaCha8Rng,
) -> Result<SamplerOutput> {
    if n == 0 {
        return Err(Error::InvalidConfig("cannot sample zero chains".into()));
    }
    let dim = layout.dim();
    if model.config.dim != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: model.config.dim,
            context: "sampler model width".into(),
        });
    }
    if bounds.dim() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: bounds.dim(),
            context: "sampler bounds width".into(),
        });
    }
    if bound.t_steps != schedule.t_steps {
        return Err(Error::InvalidConfig(format!(
            "imbalance bound covers {} steps but the schedule has {}",
            bound.t_steps, schedule.t_steps
        )));
    }
    let t_steps = schedule.t_steps;

    let mut x = Array2::zeros((n, dim));
    for i in 0..n {
        for j in 0..dim {
            x[[i, j]] = rng.sample::<f64, _>(StandardNormal);
        }
    }

    // Descending rows first (the order the chain visits states); reversed at
    // the end so consumers see ascending t.
    let mut rows_desc: Vec<TraceRow> = Vec::with_capacity(t_steps + 1);
    rows_desc.push(TraceRow {
        t: t_steps,
        gamma: bound.gamma(t_steps),
        mean_imbalance: mean_imbalance_of(&x, bounds, layout, y)?,
    });

    let mut ts = vec![0usize; n];
    for t in (1..=t_steps).rev() {
        ts.iter_mut().for_each(|s| *s = t);
        let eps_hat = model.forward(&x, &ts);
        let alpha = schedule.alpha_t(t);
        let coef = (1.0 - alpha) / (1.0 - schedule.alpha_bar_t(t)).sqrt();
        let inv_sqrt_alpha = 1.0 / alpha.sqrt();
        let sigma = schedule.sigma_t(t);
        for i in 0..n {
            for j in 0..dim {
                let mu = inv_sqrt_alpha * (x[[i, j]] - coef * eps_hat[[i, j]]);
                x[[i, j]] = if t > 1 {
                    mu + sigma * rng.sample::<f64, _>(StandardNormal)
                } else {
                    mu
                };
            }
        }
        if t > 1 {
            rows_desc.push(TraceRow {
                t: t - 1,
                gamma: bound.gamma(t - 1),
                mean_imbalance: mean_imbalance_of(&x, bounds, layout, y)?,
            });
        }
    }

    // Terminal clamp into the model box; record the imbalance of what is
    // actually emitted.
    x.mapv_inplace(|v| v.clamp(-1.0, 1.0));
    rows_desc.push(TraceRow {
        t: 0,
        gamma: 0.0,
        mean_imbalance: mean_imbalance_of(&x, bounds, layout, y)?,
    });
    rows_desc.reverse();

    let mut unit_rows = Vec::with_capacity(n);
    let mut physical_rows = Vec::with_capacity(n);
    for i in 0..n {
        let row: Vec<f64> = x.row(i).to_vec();
        unit_rows.push(NormalizationBounds::from_model(&row));
        physical_rows.push(bounds.physical_from_model(&row)?);
    }

    Ok(SamplerOutput {
        model_rows: x,
        unit_rows,
        physical_rows,
        trace: ReverseTrace { rows: rows_desc },
    })
}
