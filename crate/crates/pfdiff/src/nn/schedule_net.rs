//! Schedule network: clean samples → cumulative retention factors ᾱ.

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::linear::{Linear, LinearGrad};
use crate::nn::{sigmoid, silu_map, silu_prime};

/// Feedforward net `dim → 512 → 256 → T` whose outputs are per-step logits
/// a_τ; the model-implied schedule is ᾱ_t = Π_{τ≤t} σ(a_τ), which is
/// strictly decreasing inside (0,1) by construction.
///
/// The output layer starts with zero weights and biases set to the logits
/// of a reference schedule's per-step retention factors, so an untrained
/// net reproduces that baseline exactly for every input.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScheduleNet {
    pub l1: Linear,
    pub l2: Linear,
    pub out: Linear,
}

/// Forward intermediates for one batch.
pub struct ScheduleCache {
    x: Array2<f64>,
    z1: Array2<f64>,
    a1: Array2<f64>,
    z2: Array2<f64>,
    a2: Array2<f64>,
    /// σ(logits): per-step retention factors, (B, T).
    pub s: Array2<f64>,
    /// Cumulative products along each row, (B, T).
    pub alpha_bar: Array2<f64>,
}

/// Gradients shaped like [`ScheduleNet`], same parameter order.
pub struct ScheduleGrads {
    pub l1: LinearGrad,
    pub l2: LinearGrad,
    pub out: LinearGrad,
}

impl ScheduleNet {
    pub const HIDDEN: [usize; 2] = [512, 256];

    pub fn new<R: Rng + ?Sized>(rng: &mut R, dim: usize, t_steps: usize) -> Result<Self> {
        if dim == 0 || t_steps == 0 {
            return Err(Error::InvalidConfig("schedule net needs dim ≥ 1 and T ≥ 1".into()));
        }
        Ok(ScheduleNet {
            l1: Linear::new(rng, dim, Self::HIDDEN[0]),
            l2: Linear::new(rng, Self::HIDDEN[0], Self::HIDDEN[1]),
            out: Linear::zeroed(Self::HIDDEN[1], t_steps),
        })
    }

    pub fn dim(&self) -> usize {
        self.l1.fan_in()
    }

    pub fn t_steps(&self) -> usize {
        self.out.fan_out()
    }

    /// Seed the output biases with the logits of a baseline per-step α
    /// sequence so the initial schedule matches it input-independently.
    pub fn set_baseline(&mut self, alphas: &[f64]) -> Result<()> {
        if alphas.len() != self.t_steps() {
            return Err(Error::DimensionMismatch {
                expected: self.t_steps(),
                got: alphas.len(),
                context: "baseline per-step alphas".into(),
            });
        }
        for (j, &a) in alphas.iter().enumerate() {
            if !(0.0 < a && a < 1.0) {
                return Err(Error::InvalidSchedule(format!(
                    "baseline alpha at step {} is {a}, outside (0,1)",
                    j + 1
                )));
            }
            self.out.b[[0, j]] = (a / (1.0 - a)).ln();
        }
        Ok(())
    }

    /// Per-sample schedules for a batch of normalized clean samples.
    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        self.forward_cached(x).alpha_bar.clone()
    }

    pub fn forward_cached(&self, x: &Array2<f64>) -> ScheduleCache {
        assert_eq!(x.ncols(), self.dim(), "schedule net input width mismatch");
        let z1 = self.l1.forward(x);
        let a1 = silu_map(&z1);
        let z2 = self.l2.forward(&a1);
        let a2 = silu_map(&z2);
        let logits = self.out.forward(&a2);
        let s = logits.mapv(sigmoid);
        let mut alpha_bar = s.clone();
        for mut row in alpha_bar.rows_mut() {
            let mut acc = 1.0;
            for v in row.iter_mut() {
                acc *= *v;
                *v = acc;
            }
        }
        ScheduleCache {
            x: x.clone(),
            z1,
            a1,
            z2,
            a2,
            s,
            alpha_bar,
        }
    }

    /// Mean schedule over a batch: ᾱ_t averaged across rows.
    pub fn mean_schedule(&self, x: &Array2<f64>) -> Array1<f64> {
        let ab = self.forward(x);
        let b = ab.nrows() as f64;
        let mut mean = Array1::zeros(ab.ncols());
        for row in ab.rows() {
            mean += &row;
        }
        mean / b
    }

    /// Reverse-mode pass from a gradient w.r.t. ᾱ (shape (B, T)).
    ///
    /// With ᾱ_t = Π_{τ≤t} s_τ, the logit gradient is
    /// g_{a_τ} = (1 − s_τ)·Σ_{t≥τ} g_{ᾱ_t}·ᾱ_t — a suffix sum, no division,
    /// so it is stable even when some s_τ are tiny.
    pub fn backward(&self, cache: &ScheduleCache, g_alpha_bar: &Array2<f64>) -> (ScheduleGrads, Array2<f64>) {
        let (b, t) = (g_alpha_bar.nrows(), g_alpha_bar.ncols());
        assert_eq!(cache.alpha_bar.shape(), g_alpha_bar.shape());
        let mut g_logits = Array2::zeros((b, t));
        for r in 0..b {
            let mut suffix = 0.0;
            for j in (0..t).rev() {
                suffix += g_alpha_bar[[r, j]] * cache.alpha_bar[[r, j]];
                g_logits[[r, j]] = (1.0 - cache.s[[r, j]]) * suffix;
            }
        }
        let mut grads = self.zero_grads();
        let g_a2 = self.out.backward(&cache.a2, &g_logits, &mut grads.out);
        let g_z2 = &g_a2 * &cache.z2.mapv(silu_prime);
        let g_a1 = self.l2.backward(&cache.a1, &g_z2, &mut grads.l2);
        let g_z1 = &g_a1 * &cache.z1.mapv(silu_prime);
        let gx = self.l1.backward(&cache.x, &g_z1, &mut grads.l1);
        (grads, gx)
    }

    pub fn zero_grads(&self) -> ScheduleGrads {
        ScheduleGrads {
            l1: self.l1.zero_grad(),
            l2: self.l2.zero_grad(),
            out: self.out.zero_grad(),
        }
    }

    /// Parameter order: l1.w, l1.b, l2.w, l2.b, out.w, out.b.
    pub fn params(&self) -> Vec<&Array2<f64>> {
        vec![&self.l1.w, &self.l1.b, &self.l2.w, &self.l2.b, &self.out.w, &self.out.b]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        vec![
            &mut self.l1.w,
            &mut self.l1.b,
            &mut self.l2.w,
            &mut self.l2.b,
            &mut self.out.w,
            &mut self.out.b,
        ]
    }

    pub fn param_count(&self) -> usize {
        crate::nn::param_count(&self.params())
    }
}

impl ScheduleGrads {
    /// Same order as [`ScheduleNet::params`].
    pub fn flat(&self) -> Vec<&Array2<f64>> {
        vec![&self.l1.w, &self.l1.b, &self.l2.w, &self.l2.b, &self.out.w, &self.out.b]
    }
}
