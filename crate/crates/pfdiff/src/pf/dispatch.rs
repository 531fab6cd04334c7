//! Randomized operating scenarios and economic merit-order dispatch.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::NetworkCase;
use crate::pf::newton::Setpoints;
use crate::rng;

/// Uniform perturbation ranges for scenario sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbRanges {
    /// Per-load demand multiplier range.
    pub load: (f64, f64),
    /// Per-generator marginal-cost multiplier range.
    pub cost: (f64, f64),
    /// Voltage-setpoint band, intersected with case bus limits.
    pub voltage: (f64, f64),
}

impl Default for PerturbRanges {
    fn default() -> Self {
        PerturbRanges {
            load: (0.8, 1.2),
            cost: (0.5, 1.5),
            voltage: (0.95, 1.05),
        }
    }
}

impl PerturbRanges {
    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [
            ("load", self.load),
            ("cost", self.cost),
            ("voltage", self.voltage),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi && lo > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "perturbation range `{name}` must satisfy 0 < lo <= hi, got [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }
}

/// One randomized operating scenario: demand and cost multipliers plus a
/// seed from which the dispatcher derives voltage setpoints.
#[derive(Debug, Clone)]
pub struct DispatchScenario {
    /// Active-demand multiplier per bus (unused entries for zero-demand buses).
    pub load_p_mult: Vec<f64>,
    /// Reactive-demand multiplier per bus.
    pub load_q_mult: Vec<f64>,
    /// Marginal-cost multiplier per generator.
    pub cost_mult: Vec<f64>,
    /// Voltage band for generator setpoints.
    pub voltage_range: (f64, f64),
    /// Seed for the in-dispatch voltage draws.
    pub seed: u64,
}

fn uniform_in<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.gen::<f64>()
}

/// Draw a scenario: i.i.d. uniform multipliers, deterministic under the rng.
pub fn sample_dispatch(
    case: &NetworkCase,
    rng: &mut impl Rng,
    ranges: &PerturbRanges,
) -> DispatchScenario {
    let n = case.n_buses();
    let load_p_mult: Vec<f64> = (0..n).map(|_| uniform_in(rng, ranges.load)).collect();
    let load_q_mult: Vec<f64> = (0..n).map(|_| uniform_in(rng, ranges.load)).collect();
    let cost_mult: Vec<f64> = (0..case.generators.len())
        .map(|_| uniform_in(rng, ranges.cost))
        .collect();
    DispatchScenario {
        load_p_mult,
        load_q_mult,
        cost_mult,
        voltage_range: ranges.voltage,
        seed: rng.gen(),
    }
}

/// Perturbed marginal cost of generator `g` at output `p`.
fn marginal_cost(case: &NetworkCase, scenario: &DispatchScenario, g: usize, p: f64) -> f64 {
    let gen = &case.generators[g];
    scenario.cost_mult[g] * (2.0 * gen.cost_c2 * p + gen.cost_c1)
}

/// Output of generator `g` if the system marginal price is `lambda`.
fn output_at_price(case: &NetworkCase, scenario: &DispatchScenario, g: usize, lambda: f64) -> f64 {
    let gen = &case.generators[g];
    let m = scenario.cost_mult[g];
    if gen.cost_c2 > 0.0 {
        let p = (lambda / m - gen.cost_c1) / (2.0 * gen.cost_c2);
        p.clamp(gen.p_min, gen.p_max)
    } else if lambda >= m * gen.cost_c1 {
        gen.p_max
    } else {
        gen.p_min
    }
}

/// Merit-order dispatch to cover `total_demand` plus a loss cushion.
///
/// An equal-marginal-price point is found by bisection; any residual gap
/// from flat-cost (step-function) units is closed in ascending order of
/// marginal cost at the current loading, within [C1] limits. Voltage
/// setpoints are drawn uniformly in the scenario band intersected with the
/// case bus limits, from the scenario's own RNG stream.
pub fn dispatch_from_costs(
    case: &NetworkCase,
    scenario: &DispatchScenario,
    total_demand: f64,
    loss_estimate: f64,
) -> Result<Setpoints> {
    let ng = case.generators.len();
    if scenario.cost_mult.len() != ng {
        return Err(Error::DimensionMismatch {
            expected: ng,
            got: scenario.cost_mult.len(),
            context: "cost multipliers".into(),
        });
    }
    let p_min: f64 = case.generators.iter().map(|g| g.p_min).sum();
    let p_max: f64 = case.generators.iter().map(|g| g.p_max).sum();
    if total_demand > p_max + 1e-12 {
        return Err(Error::InfeasibleDispatch(format!(
            "demand {total_demand:.4} p.u. exceeds aggregate capacity {p_max:.4} p.u."
        )));
    }
    // The loss cushion itself may clip at the ceiling; only raw demand
    // beyond capacity is an error.
    let target = (total_demand * (1.0 + loss_estimate)).min(p_max);

    let mut pg: Vec<f64>;
    if target <= p_min {
        // Below aggregate minimum: everything at its floor; the slack
        // machine will absorb the (negative) remainder at solve time.
        pg = case.generators.iter().map(|g| g.p_min).collect();
    } else {
        // Bracket the marginal price, then bisect Σ p_i(λ) = target.
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for g in 0..ng {
            let gen = &case.generators[g];
            lo = lo.min(marginal_cost(case, scenario, g, gen.p_min));
            hi = hi.max(marginal_cost(case, scenario, g, gen.p_max));
        }
        let (mut lo, mut hi) = (lo - 1.0, hi + 1.0);
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            let total: f64 = (0..ng)
                .map(|g| output_at_price(case, scenario, g, mid))
                .sum();
            if total < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        pg = (0..ng)
            .map(|g| output_at_price(case, scenario, g, hi))
            .collect();

        // Close the remaining gap in merit order (cheapest adjustment first
        // when short, most expensive backed off first when long).
        let mut gap = target - pg.iter().sum::<f64>();
        if gap.abs() > 1e-12 {
            let mut order: Vec<usize> = (0..ng).collect();
            order.sort_by(|&a, &b| {
                let ca = marginal_cost(case, scenario, a, pg[a]);
                let cb = marginal_cost(case, scenario, b, pg[b]);
                ca.partial_cmp(&cb).unwrap()
            });
            if gap < 0.0 {
                order.reverse();
            }
            for &g in &order {
                if gap.abs() <= 1e-12 {
                    break;
                }
                let gen = &case.generators[g];
                let head = if gap > 0.0 {
                    (gen.p_max - pg[g]).min(gap)
                } else {
                    (gen.p_min - pg[g]).max(gap)
                };
                pg[g] += head;
                gap -= head;
            }
        }
    }

    // Voltage setpoints from the scenario's dedicated stream.
    let mut vrng = rng::stream(scenario.seed, "dispatch/vg");
    let vg = case
        .generators
        .iter()
        .map(|g| {
            let bus = &case.buses[case.bus_index(g.bus).unwrap()];
            let lo = scenario.voltage_range.0.max(bus.vm_min);
            let hi = scenario.voltage_range.1.min(bus.vm_max);
            if hi <= lo {
                0.5 * (bus.vm_min + bus.vm_max)
            } else {
                lo + (hi - lo) * vrng.gen::<f64>()
            }
        })
        .collect();

    Ok(Setpoints { pg, vg })
}
