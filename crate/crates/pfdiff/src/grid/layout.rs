use serde::{Deserialize, Serialize};

use super::case::NetworkCase;

/// Which physical quantity a flat dimension carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantity {
    ActiveDemand,
    ReactiveDemand,
    VoltageMagnitude,
    VoltageAngle,
    ActiveGeneration,
    ReactiveGeneration,
}

/// Fixed flattening of a power flow state into one vector:
/// P_D block, Q_D block, |V| block, φ block, P_G block, Q_G block.
///
/// Demand blocks cover only buses with nonzero nominal demand; voltage
/// blocks cover every bus; generation blocks follow the case's generator
/// order. For IEEE 14-bus this gives D = 11+11+14+14+5+5 = 60, for IEEE
/// 30-bus D = 20+20+30+30+6+6 = 112.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleLayout {
    /// Bus indices (positions in `case.buses`) carrying demand dimensions.
    pub demand_buses: Vec<usize>,
    /// Bus index of each generator, generator order.
    pub generator_buses: Vec<usize>,
    pub n_buses: usize,
}

impl SampleLayout {
    pub fn new(case: &NetworkCase) -> Self {
        SampleLayout {
            demand_buses: case.demand_bus_indices(),
            generator_buses: case
                .generators
                .iter()
                .map(|g| case.bus_index(g.bus).expect("validated case"))
                .collect(),
            n_buses: case.n_buses(),
        }
    }

    pub fn n_demand(&self) -> usize {
        self.demand_buses.len()
    }

    pub fn n_generators(&self) -> usize {
        self.generator_buses.len()
    }

    /// Total flat dimension D.
    pub fn dim(&self) -> usize {
        2 * self.n_demand() + 2 * self.n_buses + 2 * self.n_generators()
    }

    /// Block offsets in flat order.
    pub fn offset(&self, q: Quantity) -> usize {
        let nd = self.n_demand();
        let nb = self.n_buses;
        match q {
            Quantity::ActiveDemand => 0,
            Quantity::ReactiveDemand => nd,
            Quantity::VoltageMagnitude => 2 * nd,
            Quantity::VoltageAngle => 2 * nd + nb,
            Quantity::ActiveGeneration => 2 * nd + 2 * nb,
            Quantity::ReactiveGeneration => 2 * nd + 2 * nb + self.n_generators(),
        }
    }

    /// Flat index of (quantity, position-within-block).
    pub fn index(&self, q: Quantity, pos: usize) -> usize {
        self.offset(q) + pos
    }

    /// (quantity, position-within-block) of a flat index.
    pub fn describe(&self, flat: usize) -> (Quantity, usize) {
        use Quantity::*;
        let nd = self.n_demand();
        let nb = self.n_buses;
        let ng = self.n_generators();
        let mut rest = flat;
        for (q, len) in [
            (ActiveDemand, nd),
            (ReactiveDemand, nd),
            (VoltageMagnitude, nb),
            (VoltageAngle, nb),
            (ActiveGeneration, ng),
            (ReactiveGeneration, ng),
        ] {
            if rest < len {
                return (q, rest);
            }
            rest -= len;
        }
        panic!("flat index {flat} out of range for D={}", self.dim());
    }

    /// Human-readable name for a flat dimension, e.g. `pd_bus4`, `vm_bus1`,
    /// `qg_gen2`. Used for CSV headers and per-dimension reports.
    pub fn dim_name(&self, flat: usize) -> String {
        use Quantity::*;
        let (q, pos) = self.describe(flat);
        match q {
            ActiveDemand => format!("pd_bus{}", self.demand_buses[pos] + 1),
            ReactiveDemand => format!("qd_bus{}", self.demand_buses[pos] + 1),
            VoltageMagnitude => format!("vm_bus{}", pos + 1),
            VoltageAngle => format!("va_bus{}", pos + 1),
            ActiveGeneration => format!("pg_gen{}", pos + 1),
            ReactiveGeneration => format!("qg_gen{}", pos + 1),
        }
    }

    /// Per-bus net complex injection declared by a physical sample:
    /// (P_G − P_D, Q_G − Q_D) with zeros where a bus has no generator/load.
    pub fn injections(&self, sample: &[f64]) -> Vec<(f64, f64)> {
        let mut inj = vec![(0.0, 0.0); self.n_buses];
        for (pos, &bus) in self.demand_buses.iter().enumerate() {
            inj[bus].0 -= sample[self.index(Quantity::ActiveDemand, pos)];
            inj[bus].1 -= sample[self.index(Quantity::ReactiveDemand, pos)];
        }
        for (pos, &bus) in self.generator_buses.iter().enumerate() {
            inj[bus].0 += sample[self.index(Quantity::ActiveGeneration, pos)];
            inj[bus].1 += sample[self.index(Quantity::ReactiveGeneration, pos)];
        }
        inj
    }

    /// Voltage magnitude/angle slices of a physical sample.
    pub fn voltages<'a>(&self, sample: &'a [f64]) -> (&'a [f64], &'a [f64]) {
        let vm0 = self.offset(Quantity::VoltageMagnitude);
        let va0 = self.offset(Quantity::VoltageAngle);
        (
            &sample[vm0..vm0 + self.n_buses],
            &sample[va0..va0 + self.n_buses],
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::cases;

    #[test]
    fn ieee14_dimension_is_60() {
        let case = cases::ieee14();
        let layout = SampleLayout::new(&case);
        assert_eq!(layout.n_demand(), 11);
        assert_eq!(layout.dim(), 60);
    }

    #[test]
    fn ieee30_dimension_is_112() {
        let case = cases::ieee30();
        let layout = SampleLayout::new(&case);
        assert_eq!(layout.n_demand(), 20);
        assert_eq!(layout.dim(), 112);
    }

    #[test]
    fn describe_inverts_index() {
        let case = cases::ieee14();
        let layout = SampleLayout::new(&case);
        for flat in 0..layout.dim() {
            let (q, pos) = layout.describe(flat);
            assert_eq!(layout.index(q, pos), flat);
        }
    }
}
