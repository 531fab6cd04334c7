//! Branch apparent-power flows and the line-rating check [C6].

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::grid::{AdmittanceMatrix, NetworkCase, SampleLayout};

#[derive(Debug, Clone)]
pub struct BranchFlow {
    /// |V_f (V_f* − V_t*) Y_ft*| at the from side (p.u.).
    pub flow: f64,
    /// Rating, `None` when the branch is unlimited.
    pub s_max: Option<f64>,
    pub within_limit: bool,
}

#[derive(Debug, Clone)]
pub struct LineFlowReport {
    pub branches: Vec<BranchFlow>,
    /// Largest excess over a rating; 0 when all branches are within limits.
    pub worst_excess: f64,
}

impl LineFlowReport {
    pub fn all_within(&self) -> bool {
        self.branches.iter().all(|b| b.within_limit)
    }
}

/// Apparent-flow magnitudes per branch, compared against each rating.
/// The flow is evaluated through the bus-admittance off-diagonal, i.e. the
/// series current seen at the from terminal.
pub fn line_flow_check(
    sample: &[f64],
    y: &AdmittanceMatrix,
    case: &NetworkCase,
    layout: &SampleLayout,
) -> Result<LineFlowReport> {
    if sample.len() != layout.dim() {
        return Err(Error::DimensionMismatch {
            expected: layout.dim(),
            got: sample.len(),
            context: "line flow sample".into(),
        });
    }
    let (vm, va) = layout.voltages(sample);
    let v: Vec<Complex64> = vm
        .iter()
        .zip(va)
        .map(|(&m, &a)| Complex64::from_polar(m, a))
        .collect();
    let mut branches = Vec::with_capacity(case.branches.len());
    let mut worst = 0.0f64;
    for br in &case.branches {
        let f = case
            .bus_index(br.from)
            .ok_or_else(|| Error::CaseSemantic(format!("unknown bus {}", br.from)))?;
        let t = case
            .bus_index(br.to)
            .ok_or_else(|| Error::CaseSemantic(format!("unknown bus {}", br.to)))?;
        let flow = (v[f] * (v[f] - v[t]).conj() * y.matrix[(f, t)].conj()).norm();
        let within = match br.s_max {
            Some(limit) => {
                let excess = flow - limit;
                if excess > worst {
                    worst = excess;
                }
                excess <= 0.0
            }
            None => true,
        };
        branches.push(BranchFlow {
            flow,
            s_max: br.s_max,
            within_limit: within,
        });
    }
    Ok(LineFlowReport {
        branches,
        worst_excess: worst.max(0.0),
    })
}
