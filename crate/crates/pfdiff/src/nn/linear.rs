//! Dense layer with explicit backward pass.

use ndarray::{Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Fully connected layer `y = x·W + b` over row-major batches.
///
/// `w` is `(fan_in, fan_out)`; `b` is a `1×fan_out` row broadcast over the
/// batch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array2<f64>,
}

/// Gradient accumulator shaped like [`Linear`].
#[derive(Debug, Clone)]
pub struct LinearGrad {
    pub w: Array2<f64>,
    pub b: Array2<f64>,
}

impl Linear {
    /// Scaled-uniform fan-in initialization: W ~ U(±1/√fan_in), b = 0.
    pub fn new<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Self {
        let limit = (1.0 / fan_in as f64).sqrt();
        let w = Array2::from_shape_fn((fan_in, fan_out), |_| rng.gen_range(-limit..limit));
        Linear {
            w,
            b: Array2::zeros((1, fan_out)),
        }
    }

    /// All-zero layer (used for the denoiser output so an untrained model
    /// predicts zero noise).
    pub fn zeroed(fan_in: usize, fan_out: usize) -> Self {
        Linear {
            w: Array2::zeros((fan_in, fan_out)),
            b: Array2::zeros((1, fan_out)),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.w.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.w.ncols()
    }

    /// `x: (B, fan_in)` → `(B, fan_out)`.
    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }

    /// Reverse-mode step. `x` is the forward input, `gy` the loss gradient
    /// at the output. Accumulates into `grad` and returns the gradient at
    /// the input.
    pub fn backward(&self, x: &Array2<f64>, gy: &Array2<f64>, grad: &mut LinearGrad) -> Array2<f64> {
        grad.w += &x.t().dot(gy);
        grad.b += &gy.sum_axis(Axis(0)).insert_axis(Axis(0));
        gy.dot(&self.w.t())
    }

    pub fn zero_grad(&self) -> LinearGrad {
        LinearGrad {
            w: Array2::zeros(self.w.raw_dim()),
            b: Array2::zeros(self.b.raw_dim()),
        }
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }
}
