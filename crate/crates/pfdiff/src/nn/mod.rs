//! Hand-rolled neural nets: dense layers, reverse-mode gradients, Adam.
//!
//! Two models live here. [`DenoiserModel`] is the noise predictor of the
//! diffusion model: a dense encoder–decoder over flat samples with additive
//! skip connections, a sinusoidal time embedding injected into every hidden
//! layer, and an optional self-attention block at the bottleneck.
//! [`ScheduleNet`] maps a clean sample to per-step retention factors whose
//! running product is the cumulative schedule ᾱ_t; the product-of-sigmoids
//! parameterization keeps ᾱ strictly decreasing inside (0,1) with no
//! constrained optimization.
//!
//! # Parameter convention
//!
//! Every trainable tensor is an `Array2<f64>`; biases are `1×n` rows. Each
//! model exposes `params`/`params_mut` in a fixed documented order, and its
//! gradient struct exposes `flat()` in the *same* order, so the optimizer
//! and checkpoint code never guess at shapes. All forward/backward passes
//! are plain `f64` loops and single-threaded matrix products, hence
//! bit-reproducible for fixed inputs and evaluation order.

mod adam;
mod attention;
mod denoiser;
mod embed;
mod linear;
mod schedule_net;

pub use adam::Adam;
pub use attention::TokenAttention;
pub use denoiser::{DenoiserCache, DenoiserConfig, DenoiserGrads, DenoiserModel};
pub use embed::time_embedding;
pub use linear::{Linear, LinearGrad};
pub use schedule_net::{ScheduleGrads, ScheduleNet};

use ndarray::Array2;

/// Logistic sigmoid, numerically stable on both tails.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// SiLU activation x·σ(x) (smooth, so finite-difference gradient checks
/// are clean everywhere).
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

/// d/dx SiLU = σ(x)·(1 + x·(1 − σ(x))).
pub fn silu_prime(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Apply SiLU elementwise.
pub(crate) fn silu_map(z: &Array2<f64>) -> Array2<f64> {
    z.mapv(silu)
}

/// Add a single-coordinate perturbation to one parameter tensor of a model.
/// `param` indexes the model's documented parameter order, `index` is the
/// row-major flat offset inside that tensor. Used by finite-difference
/// gradient checks.
pub fn nudge(mut params: Vec<&mut Array2<f64>>, param: usize, index: usize, delta: f64) {
    let p = &mut params[param];
    let cols = p.ncols();
    p[[index / cols, index % cols]] += delta;
}

/// Total number of scalar parameters across a parameter list.
pub fn param_count(params: &[&Array2<f64>]) -> usize {
    params.iter().map(|p| p.len()).sum()
}
