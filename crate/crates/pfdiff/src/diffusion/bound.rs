//! The linear per-step imbalance budget γ_t = (t/T)·γ_T.
//!
//! γ_T is the empirical mean power imbalance of pure standard-normal noise
//! mapped into physical units; the budget spreads it uniformly across the
//! forward process so each step may add at most its share. The schedule
//! learner fits ᾱ to this line, and the physics hinge in denoiser training
//! penalizes intermediate states that overdraw it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Terminal noise imbalance measured for the bundled 14-bus grid, p.u.
pub const GAMMA_TERMINAL_14: f64 = 2.75;
/// Terminal noise imbalance measured for the bundled 30-bus grid, p.u.
pub const GAMMA_TERMINAL_30: f64 = 2.87;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceBound {
    pub t_steps: usize,
    pub gamma_terminal: f64,
}

impl ImbalanceBound {
    pub fn new(t_steps: usize, gamma_terminal: f64) -> Result<Self> {
        if t_steps == 0 {
            return Err(Error::InvalidConfig("imbalance bound needs t_steps >= 1".into()));
        }
        if !gamma_terminal.is_finite() || gamma_terminal <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "gamma_terminal = {gamma_terminal} must be a positive finite p.u. level"
            )));
        }
        Ok(ImbalanceBound {
            t_steps,
            gamma_terminal,
        })
    }

    /// The terminal level for a bundled case name, if it is one we ship.
    pub fn gamma_terminal_for(case_name: &str) -> Option<f64> {
        match case_name {
            "case14" | "ieee14" | "14" => Some(GAMMA_TERMINAL_14),
            "case30" | "ieee30" | "30" => Some(GAMMA_TERMINAL_30),
            _ => None,
        }
    }

    /// γ_t for t ∈ [0, T]. Evaluated as (t/T)·γ_T so both endpoints are
    /// exact: t = 0 gives 0.0 and t = T gives γ_T bit-for-bit (T/T divides
    /// to exactly 1.0 regardless of the values involved).
    pub fn gamma(&self, t: usize) -> f64 {
        assert!(t <= self.t_steps, "t = {t} outside [0, {}]", self.t_steps);
        t as f64 / self.t_steps as f64 * self.gamma_terminal
    }

    /// The whole budget line, t = 0..=T (T + 1 values).
    pub fn gammas(&self) -> Vec<f64> {
        (0..=self.t_steps).map(|t| self.gamma(t)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_are_exact() {
        for &(t_steps, gt) in &[(200usize, GAMMA_TERMINAL_14), (200, GAMMA_TERMINAL_30), (7, 0.123)] {
            let b = ImbalanceBound::new(t_steps, gt).unwrap();
            assert_eq!(b.gamma(0), 0.0);
            assert_eq!(b.gamma(t_steps), gt);
        }
    }

    #[test]
    fn midpoint_value() {
        let b = ImbalanceBound::new(200, GAMMA_TERMINAL_14).unwrap();
        assert_eq!(b.gamma(100), 1.375);
    }

    #[test]
    fn line_is_exactly_linear() {
        let b = ImbalanceBound::new(200, GAMMA_TERMINAL_30).unwrap();
        let g = b.gammas();
        assert_eq!(g.len(), 201);
        for t in 0..=200usize {
            let expect = t as f64 / 200.0 * GAMMA_TERMINAL_30;
            assert_eq!(g[t], expect, "t = {t}");
            assert!(g[t] >= 0.0);
        }
        for t in 1..=200usize {
            assert!(g[t] > g[t - 1]);
        }
    }

    #[test]
    fn bundled_case_lookup() {
        assert_eq!(ImbalanceBound::gamma_terminal_for("case14"), Some(2.75));
        assert_eq!(ImbalanceBound::gamma_terminal_for("ieee30"), Some(2.87));
        assert_eq!(ImbalanceBound::gamma_terminal_for("case118"), None);
    }

    #[test]
    fn rejects_degenerate_parameters() {
        assert!(ImbalanceBound::new(0, 1.0).is_err());
        assert!(ImbalanceBound::new(10, 0.0).is_err());
        assert!(ImbalanceBound::new(10, -2.0).is_err());
        assert!(ImbalanceBound::new(10, f64::NAN).is_err());
    }
}
