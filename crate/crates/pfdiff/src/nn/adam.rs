//! Adaptive-moment optimizer with bias correction.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Adam over a fixed, ordered parameter list. Moment accumulators are
/// allocated from the parameter shapes at construction and must be fed
/// gradients in the same order on every step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_count: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(lr: f64, params: &[&Array2<f64>]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            m: params.iter().map(|p| Array2::zeros(p.raw_dim())).collect(),
            v: params.iter().map(|p| Array2::zeros(p.raw_dim())).collect(),
        }
    }

    /// One update. Errors on non-finite gradients (training halts rather
    /// than poisoning the parameters).
    pub fn step(&mut self, mut params: Vec<&mut Array2<f64>>, grads: &[&Array2<f64>]) -> Result<()> {
        assert_eq!(params.len(), self.m.len(), "parameter list shape changed");
        assert_eq!(grads.len(), self.m.len(), "gradient list shape changed");
        for g in grads {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("gradient in optimizer step".into()));
            }
        }
        self.step_count += 1;
        let t = self.step_count as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            assert_eq!(p.raw_dim(), g.raw_dim(), "parameter/gradient shape mismatch");
            m.zip_mut_with(g, |mi, &gi| *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi);
            v.zip_mut_with(g, |vi, &gi| *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi);
            ndarray::Zip::from(&mut **p)
                .and(&*m)
                .and(&*v)
                .for_each(|pi, &mi, &vi| {
                    let m_hat = mi / bc1;
                    let v_hat = vi / bc2;
                    *pi -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                });
        }
        Ok(())
    }
}
