//! Noise schedules: the β/α/ᾱ/σ bookkeeping of the forward process.
//!
//! Two provenances exist. `Linear` ramps β from β_1 to β_T; `Learned` wraps
//! an ᾱ curve produced by the schedule learner. Either way the derived
//! quantities obey α_t = 1 − β_t, ᾱ_t = Π_{τ≤t} α_τ, and σ_t² = β_t (the
//! reverse process uses the per-step variance β_t, not the ᾱ-dependent
//! posterior variance).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default step count for both bundled grids.
pub const DEFAULT_T_STEPS: usize = 200;

/// Baseline linear-β endpoints at the default step count. The terminal
/// endpoint is scaled so that ᾱ_T ≈ 5.4e−5 < 1e−4 at T = 200 — the binding
/// requirement is that x_T is almost exactly standard normal, which the
/// classic (1e−4, 0.02) ramp only achieves over 1000 steps.
pub const DEFAULT_BETA_1: f64 = 1e-4;
pub const DEFAULT_BETA_T: f64 = 0.095;

/// Endpoint tolerances for [`NoiseSchedule::validate_endpoints`]: a usable
/// schedule starts almost noise-free and ends almost pure noise.
pub const ALPHA_BAR_FIRST_MIN: f64 = 0.95;
pub const ALPHA_BAR_LAST_MAX: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleProvenance {
    Linear,
    Learned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub t_steps: usize,
    /// β_1..β_T (index 0 holds t = 1).
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub sigma: Vec<f64>,
    pub provenance: ScheduleProvenance,
}

impl NoiseSchedule {
    /// Build from per-step β values, deriving α, ᾱ, σ.
    pub fn from_betas(beta: Vec<f64>, provenance: ScheduleProvenance) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::InvalidSchedule("need at least one step".into()));
        }
        for (i, &b) in beta.iter().enumerate() {
            if !b.is_finite() || b <= 0.0 || b >= 1.0 {
                return Err(Error::InvalidSchedule(format!(
                    "beta_{} = {b} outside (0, 1)",
                    i + 1
                )));
            }
        }
        let t_steps = beta.len();
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(t_steps);
        let mut prod = 1.0;
        for &a in &alpha {
            prod *= a;
            alpha_bar.push(prod);
        }
        let sigma: Vec<f64> = beta.iter().map(|b| b.sqrt()).collect();
        Ok(NoiseSchedule {
            t_steps,
            beta,
            alpha,
            alpha_bar,
            sigma,
            provenance,
        })
    }

    /// Linear β ramp from β_1 to β_T inclusive.
    pub fn linear(t_steps: usize, beta_1: f64, beta_t: f64) -> Result<Self> {
        if !(beta_1.is_finite() && beta_t.is_finite()) || beta_1 <= 0.0 || beta_t >= 1.0 {
            return Err(Error::InvalidSchedule(format!(
                "beta range ({beta_1}, {beta_t}) must satisfy 0 < beta_1 <= beta_T < 1"
            )));
        }
        if beta_1 > beta_t {
            return Err(Error::InvalidSchedule(format!(
                "beta_1 = {beta_1} exceeds beta_T = {beta_t}"
            )));
        }
        if t_steps == 0 {
            return Err(Error::InvalidSchedule("need at least one step".into()));
        }
        if t_steps == 1 {
            if beta_1 != beta_t {
                return Err(Error::InvalidSchedule(
                    "a single-step ramp needs beta_1 = beta_T".into(),
                ));
            }
            return Self::from_betas(vec![beta_1], ScheduleProvenance::Linear);
        }
        let step = (beta_t - beta_1) / (t_steps - 1) as f64;
        let beta: Vec<f64> = (0..t_steps).map(|i| beta_1 + step * i as f64).collect();
        Self::from_betas(beta, ScheduleProvenance::Linear)
    }

    /// Recover a schedule from an ᾱ curve (ᾱ_1..ᾱ_T) via β_t = 1 − ᾱ_t/ᾱ_{t−1}
    /// with ᾱ_0 = 1. Errors name the first step whose implied β leaves (0, 1),
    /// i.e. where the curve stops decreasing or leaves (0, 1) itself.
    ///
    /// The given ᾱ values are kept verbatim; only β, α, σ are derived. (A
    /// round trip through β would perturb last bits.)
    pub fn from_alpha_bar(alpha_bar: &[f64], provenance: ScheduleProvenance) -> Result<Self> {
        if alpha_bar.is_empty() {
            return Err(Error::InvalidSchedule("need at least one step".into()));
        }
        let mut beta = Vec::with_capacity(alpha_bar.len());
        let mut prev = 1.0;
        for (i, &ab) in alpha_bar.iter().enumerate() {
            let t = i + 1;
            if !ab.is_finite() || ab <= 0.0 || ab >= 1.0 {
                return Err(Error::InvalidSchedule(format!(
                    "alpha_bar_{t} = {ab} outside (0, 1)"
                )));
            }
            let b = 1.0 - ab / prev;
            if !b.is_finite() || b <= 0.0 || b >= 1.0 {
                return Err(Error::InvalidSchedule(format!(
                    "implied beta_{t} = {b} outside (0, 1): alpha_bar must strictly decrease"
                )));
            }
            beta.push(b);
            prev = ab;
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let sigma: Vec<f64> = beta.iter().map(|b| b.sqrt()).collect();
        Ok(NoiseSchedule {
            t_steps: alpha_bar.len(),
            beta,
            alpha,
            alpha_bar: alpha_bar.to_vec(),
            sigma,
            provenance,
        })
    }

    /// β_t for t ∈ [1, T].
    pub fn beta_t(&self, t: usize) -> f64 {
        assert!(t >= 1 && t <= self.t_steps, "t = {t} outside [1, {}]", self.t_steps);
        self.beta[t - 1]
    }

    /// α_t for t ∈ [1, T].
    pub fn alpha_t(&self, t: usize) -> f64 {
        assert!(t >= 1 && t <= self.t_steps, "t = {t} outside [1, {}]", self.t_steps);
        self.alpha[t - 1]
    }

    /// ᾱ_t for t ∈ [0, T], with the empty-product convention ᾱ_0 = 1.
    pub fn alpha_bar_t(&self, t: usize) -> f64 {
        assert!(t <= self.t_steps, "t = {t} outside [0, {}]", self.t_steps);
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    /// σ_t = √β_t for t ∈ [1, T].
    pub fn sigma_t(&self, t: usize) -> f64 {
        assert!(t >= 1 && t <= self.t_steps, "t = {t} outside [1, {}]", self.t_steps);
        self.sigma[t - 1]
    }

    /// Check the endpoint behavior expected of a production schedule: the
    /// first step keeps the data nearly intact (ᾱ_1 ≥ `first_min`) and the
    /// last step is nearly pure noise (ᾱ_T ≤ `last_max`). Kept out of the
    /// constructors: short diagnostic schedules (e.g. T = 1) are legitimate
    /// objects, they just are not fit for generation.
    pub fn validate_endpoints(&self, first_min: f64, last_max: f64) -> Result<()> {
        let first = self.alpha_bar_t(1);
        if first < first_min {
            return Err(Error::InvalidSchedule(format!(
                "alpha_bar_1 = {first:.6} below {first_min} — too much noise in the first step"
            )));
        }
        let last = self.alpha_bar_t(self.t_steps);
        if last > last_max {
            return Err(Error::InvalidSchedule(format!(
                "alpha_bar_T = {last:.3e} above {last_max:.1e} — x_T is not close enough to N(0, I)"
            )));
        }
        Ok(())
    }

    /// Re-derive every invariant on a deserialized schedule: lengths agree,
    /// β ∈ (0, 1), α = 1 − β, ᾱ is the running product (to rounding), and
    /// σ² = β. Loaders call this so a hand-edited file cannot smuggle an
    /// inconsistent schedule into training.
    pub fn check_consistency(&self) -> Result<()> {
        let t = self.t_steps;
        if t == 0
            || self.beta.len() != t
            || self.alpha.len() != t
            || self.alpha_bar.len() != t
            || self.sigma.len() != t
        {
            return Err(Error::InvalidSchedule(format!(
                "length mismatch: t_steps = {t}, beta/alpha/alpha_bar/sigma have {}/{}/{}/{}",
                self.beta.len(),
                self.alpha.len(),
                self.alpha_bar.len(),
                self.sigma.len()
            )));
        }
        let mut prod = 1.0;
        for i in 0..t {
            let (b, a, ab, s) = (self.beta[i], self.alpha[i], self.alpha_bar[i], self.sigma[i]);
            if !b.is_finite() || b <= 0.0 || b >= 1.0 {
                return Err(Error::InvalidSchedule(format!(
                    "beta_{} = {b} outside (0, 1)",
                    i + 1
                )));
            }
            if a != 1.0 - b {
                return Err(Error::InvalidSchedule(format!(
                    "alpha_{} = {a} is not 1 - beta",
                    i + 1
                )));
            }
            prod *= a;
            // The stored curve may come from a learned source rather than the
            // product of stored alphas; accept slack proportional to scale.
            if (ab - prod).abs() > 1e-9 * prod.max(1e-30) {
                return Err(Error::InvalidSchedule(format!(
                    "alpha_bar_{} = {ab} inconsistent with running product {prod}",
                    i + 1
                )));
            }
            prod = ab;
            if (s * s - b).abs() > 1e-12 * b {
                return Err(Error::InvalidSchedule(format!(
                    "sigma_{}^2 = {} is not beta = {b}",
                    i + 1,
                    s * s
                )));
            }
        }
        Ok(())
    }
}

/// Free-function spelling of [`NoiseSchedule::linear`], the conventional name
/// for the ramp.
pub fn linear_beta_schedule(t_steps: usize, beta_1: f64, beta_t: f64) -> Result<NoiseSchedule> {
    NoiseSchedule::linear(t_steps, beta_1, beta_t)
}

/// The default baseline schedule: linear β over [`DEFAULT_T_STEPS`] steps.
pub fn default_schedule() -> NoiseSchedule {
    NoiseSchedule::linear(DEFAULT_T_STEPS, DEFAULT_BETA_1, DEFAULT_BETA_T)
        .expect("default endpoints are valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classic_thousand_step_endpoints() {
        // The reference ramp of the original DDPM recipe: over 1000 steps
        // from 1e-4 to 0.02, the first step keeps 0.9999 of the signal and
        // the terminal step retains about 4e-5 of it.
        let s = linear_beta_schedule(1000, 1e-4, 0.02).unwrap();
        assert!((s.alpha_bar_t(1) - 0.9999).abs() < 1e-6);
        assert!((s.alpha_bar_t(1000) - 4e-5).abs() < 1e-5);
        s.validate_endpoints(ALPHA_BAR_FIRST_MIN, ALPHA_BAR_LAST_MAX)
            .unwrap();
    }

    #[test]
    fn default_schedule_is_nearly_normal_at_terminal() {
        let s = default_schedule();
        assert_eq!(s.t_steps, DEFAULT_T_STEPS);
        assert!(s.alpha_bar_t(DEFAULT_T_STEPS) < 1e-4, "terminal alpha_bar too large");
        s.validate_endpoints(ALPHA_BAR_FIRST_MIN, ALPHA_BAR_LAST_MAX)
            .unwrap();
    }

    #[test]
    fn single_step_reduces_to_one_factor() {
        let s = NoiseSchedule::linear(1, 0.3, 0.3).unwrap();
        assert_eq!(s.alpha_bar_t(1), 1.0 - 0.3);
        assert_eq!(s.alpha_bar_t(0), 1.0);
        assert!(NoiseSchedule::linear(1, 0.1, 0.3).is_err());
    }

    #[test]
    fn alpha_bar_strictly_decreases() {
        let s = default_schedule();
        for t in 1..s.t_steps {
            assert!(s.alpha_bar_t(t + 1) < s.alpha_bar_t(t), "t = {t}");
        }
        assert!(s.alpha_bar_t(1) < 1.0 && s.alpha_bar_t(s.t_steps) > 0.0);
    }

    #[test]
    fn sigma_squared_is_beta() {
        let s = default_schedule();
        for t in 1..=s.t_steps {
            let d = s.sigma_t(t).powi(2) - s.beta_t(t);
            assert!(d.abs() <= 1e-15 * s.beta_t(t), "t = {t}");
        }
    }

    #[test]
    fn rejects_invalid_ranges() {
        assert!(NoiseSchedule::linear(10, 0.0, 0.5).is_err());
        assert!(NoiseSchedule::linear(10, -0.1, 0.5).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 1.0).is_err());
        assert!(NoiseSchedule::linear(10, 0.5, 0.1).is_err());
        assert!(NoiseSchedule::linear(0, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::from_betas(vec![0.1, f64::NAN], ScheduleProvenance::Linear).is_err());
    }

    #[test]
    fn alpha_bar_roundtrip_preserves_curve() {
        let s = default_schedule();
        let r = NoiseSchedule::from_alpha_bar(&s.alpha_bar, ScheduleProvenance::Learned).unwrap();
        // The curve itself is verbatim; betas agree to rounding.
        assert_eq!(r.alpha_bar, s.alpha_bar);
        for t in 1..=s.t_steps {
            assert!((r.beta_t(t) - s.beta_t(t)).abs() < 1e-12, "t = {t}");
        }
        r.check_consistency().unwrap();
    }

    #[test]
    fn from_alpha_bar_names_offending_step() {
        // Increase at t = 3 → implied beta_3 <= 0.
        let err = NoiseSchedule::from_alpha_bar(&[0.9, 0.5, 0.6], ScheduleProvenance::Learned)
            .unwrap_err();
        assert!(err.to_string().contains("beta_3"), "{err}");
        let err =
            NoiseSchedule::from_alpha_bar(&[0.9, 1.2, 0.1], ScheduleProvenance::Learned).unwrap_err();
        assert!(err.to_string().contains("alpha_bar_2"), "{err}");
    }

    #[test]
    fn endpoint_validation_flags_weak_schedules() {
        // A short gentle ramp is a valid object but fails endpoint checks.
        let s = NoiseSchedule::linear(10, 1e-4, 2e-3).unwrap();
        let err = s
            .validate_endpoints(ALPHA_BAR_FIRST_MIN, ALPHA_BAR_LAST_MAX)
            .unwrap_err();
        assert!(err.to_string().contains("alpha_bar_T"), "{err}");
        // Huge first step fails the other side.
        let s = NoiseSchedule::from_betas(vec![0.5, 0.9, 0.99], ScheduleProvenance::Linear).unwrap();
        let err = s.validate_endpoints(0.95, 1.0).unwrap_err();
        assert!(err.to_string().contains("alpha_bar_1"), "{err}");
    }

    #[test]
    fn consistency_check_catches_tampering() {
        let mut s = default_schedule();
        s.check_consistency().unwrap();
        s.alpha[3] = 0.5;
        assert!(s.check_consistency().is_err());
        let mut s = default_schedule();
        s.sigma[0] = 0.2;
        assert!(s.check_consistency().is_err());
        let mut s = default_schedule();
        s.alpha_bar[10] *= 1.1;
        assert!(s.check_consistency().is_err());
    }

    #[test]
    fn serialization_roundtrip_is_exact() {
        let s = default_schedule();
        let json = serde_json::to_string(&s).unwrap();
        let back: NoiseSchedule = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
        back.check_consistency().unwrap();
    }
}
