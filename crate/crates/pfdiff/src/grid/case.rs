use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default phase-angle box when the case file carries no angle limits.
/// IEEE case files never do; ±π/6 is an operationally plausible symmetric
/// range and is recorded in every dataset sidecar.
pub const DEFAULT_ANGLE_LIMIT: f64 = std::f64::consts::PI / 6.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BusKind {
    /// Reference bus: angle fixed at zero, absorbs the system mismatch.
    Slack,
    /// PQ bus: demand fixed, voltage solved.
    Load,
    /// PV bus: active injection and |V| setpoint fixed, angle and Q solved.
    Generator,
}

/// One network node. All quantities per-unit on the case base; angles in
/// radians.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Bus {
    /// External id as it appears in the case file (1-based, not necessarily
    /// contiguous).
    pub id: usize,
    pub kind: BusKind,
    /// Nominal active / reactive demand (p.u.).
    pub p_demand: f64,
    pub q_demand: f64,
    /// Shunt conductance / susceptance (p.u. injected at |V| = 1).
    pub gs: f64,
    pub bs: f64,
    pub vm_min: f64,
    pub vm_max: f64,
    pub va_min: f64,
    pub va_max: f64,
}

/// One generating unit with its box limits and quadratic cost
/// c2·P² + c1·P + c0 (P in p.u., cost in $/h).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Generator {
    pub bus: usize,
    pub p_min: f64,
    pub p_max: f64,
    pub q_min: f64,
    pub q_max: f64,
    /// Case-file dispatch and voltage setpoint of the unperturbed operating
    /// point; used for nominal-case solves, not by the sampler.
    #[serde(default)]
    pub p_nominal: f64,
    #[serde(default = "default_v_nominal")]
    pub v_nominal: f64,
    pub cost_c2: f64,
    pub cost_c1: f64,
    pub cost_c0: f64,
}

fn default_v_nominal() -> f64 {
    1.0
}

/// One branch (line or transformer) in the standard π model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Branch {
    pub from: usize,
    pub to: usize,
    /// Series impedance r + jx (p.u.).
    pub r: f64,
    pub x: f64,
    /// Total line-charging susceptance (p.u.); half at each end.
    pub b_charge: f64,
    /// Off-nominal tap ratio at the from side; 1.0 for plain lines.
    pub tap: f64,
    /// Phase shift (rad).
    pub shift: f64,
    /// Apparent-power rating (p.u.); `None` when the case declares no limit.
    pub s_max: Option<f64>,
}

/// Static grid description: everything the pipeline needs to build Y,
/// solve power flows, and check the box constraints.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkCase {
    pub name: String,
    pub base_mva: f64,
    pub buses: Vec<Bus>,
    pub generators: Vec<Generator>,
    pub branches: Vec<Branch>,
}

impl NetworkCase {
    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    /// Position of a bus id in `buses`, if present.
    pub fn bus_index(&self, id: usize) -> Option<usize> {
        self.buses.iter().position(|b| b.id == id)
    }

    pub fn slack_index(&self) -> usize {
        self.buses
            .iter()
            .position(|b| b.kind == BusKind::Slack)
            .expect("validated case has a slack bus")
    }

    /// Bus indices carrying nonzero nominal demand, in bus order. These are
    /// the buses that get P_D/Q_D dimensions in the sample layout.
    pub fn demand_bus_indices(&self) -> Vec<usize> {
        self.buses
            .iter()
            .enumerate()
            .filter(|(_, b)| b.p_demand != 0.0 || b.q_demand != 0.0)
            .map(|(i, _)| i)
            .collect()
    }

    /// Generator positions keyed by bus index.
    pub fn generator_at_bus(&self, bus_index: usize) -> Option<usize> {
        let id = self.buses[bus_index].id;
        self.generators.iter().position(|g| g.bus == id)
    }

    /// Check the structural invariants; every parser calls this before
    /// returning a case.
    pub fn validate(&self) -> Result<()> {
        if self.base_mva <= 0.0 {
            return Err(Error::CaseSemantic(format!(
                "base MVA must be positive, got {}",
                self.base_mva
            )));
        }
        let slack_count = self
            .buses
            .iter()
            .filter(|b| b.kind == BusKind::Slack)
            .count();
        if slack_count != 1 {
            return Err(Error::CaseSemantic(format!(
                "expected exactly one slack bus, found {slack_count}"
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for bus in &self.buses {
            if !seen.insert(bus.id) {
                return Err(Error::CaseSemantic(format!("duplicate bus id {}", bus.id)));
            }
            for (lo, hi, what) in [
                (bus.vm_min, bus.vm_max, "voltage magnitude"),
                (bus.va_min, bus.va_max, "voltage angle"),
            ] {
                if lo > hi {
                    return Err(Error::CaseSemantic(format!(
                        "bus {}: inverted {what} bounds [{lo}, {hi}]",
                        bus.id
                    )));
                }
            }
        }
        for gen in &self.generators {
            if self.bus_index(gen.bus).is_none() {
                return Err(Error::CaseSemantic(format!(
                    "generator references unknown bus {}",
                    gen.bus
                )));
            }
            if gen.p_min > gen.p_max || gen.q_min > gen.q_max {
                return Err(Error::CaseSemantic(format!(
                    "generator at bus {}: inverted limits",
                    gen.bus
                )));
            }
        }
        for (k, br) in self.branches.iter().enumerate() {
            if self.bus_index(br.from).is_none() || self.bus_index(br.to).is_none() {
                return Err(Error::CaseSemantic(format!(
                    "branch {} has dangling endpoint {} - {}",
                    k, br.from, br.to
                )));
            }
            if br.r == 0.0 && br.x == 0.0 {
                return Err(Error::CaseSemantic(format!(
                    "branch {} ({} - {}): series impedance is zero",
                    k, br.from, br.to
                )));
            }
            if br.tap <= 0.0 {
                return Err(Error::CaseSemantic(format!(
                    "branch {} ({} - {}): tap ratio must be positive",
                    k, br.from, br.to
                )));
            }
        }
        Ok(())
    }
}
