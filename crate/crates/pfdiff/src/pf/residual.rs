//! Power-balance residual: the mean magnitude of per-bus complex power
//! mismatch, and its analytic gradient with respect to the sample vector.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::grid::{AdmittanceMatrix, Quantity, SampleLayout};

/// Per-bus mismatch magnitudes and their mean R.
#[derive(Debug, Clone)]
pub struct ImbalanceResult {
    pub per_bus: Vec<f64>,
    pub mean: f64,
}

fn check(sample: &[f64], layout: &SampleLayout, y: &AdmittanceMatrix) -> Result<()> {
    if sample.len() != layout.dim() {
        return Err(Error::DimensionMismatch {
            expected: layout.dim(),
            got: sample.len(),
            context: "residual sample".into(),
        });
    }
    if y.n() != layout.n_buses {
        return Err(Error::DimensionMismatch {
            expected: layout.n_buses,
            got: y.n(),
            context: "residual admittance".into(),
        });
    }
    Ok(())
}

/// Complex voltages and computed injections S_i = V_i·(Y V)_i* for a
/// physical sample.
fn bus_state(
    sample: &[f64],
    layout: &SampleLayout,
    y: &AdmittanceMatrix,
) -> (Vec<Complex64>, Vec<Complex64>) {
    let (vm, va) = layout.voltages(sample);
    let v: Vec<Complex64> = vm
        .iter()
        .zip(va)
        .map(|(&m, &a)| Complex64::from_polar(m, a))
        .collect();
    let i = y.mul_vec(&v);
    let s: Vec<Complex64> = v.iter().zip(&i).map(|(vi, ii)| vi * ii.conj()).collect();
    (v, s)
}

/// Mean imbalance R(x) of a sample in physical units: per bus i,
/// |(P_Gi − P_Di) + j(Q_Gi − Q_Di) − V_i Σ_j V_j* Y_ij*|, averaged over
/// buses. Buses without generator or load contribute zero to the respective
/// injection.
pub fn residual_imbalance(
    sample: &[f64],
    layout: &SampleLayout,
    y: &AdmittanceMatrix,
) -> Result<ImbalanceResult> {
    check(sample, layout, y)?;
    let (_, s) = bus_state(sample, layout, y);
    let inj = layout.injections(sample);
    let per_bus: Vec<f64> = inj
        .iter()
        .zip(&s)
        .map(|(&(p, q), si)| (Complex64::new(p, q) - si).norm())
        .collect();
    let mean = per_bus.iter().sum::<f64>() / per_bus.len() as f64;
    Ok(ImbalanceResult { per_bus, mean })
}

/// R(x) together with its gradient dR/dx over the flat sample layout.
///
/// Writing m_i for the complex mismatch and u_i = m_i/|m_i|, the injection
/// dimensions differentiate directly (d|m|/dP_G = Re u, etc.), while the
/// voltage dimensions go through the injection sensitivities
///
///   dS_i/dθ_k  = j·(δ_ik S_i − V_i (Y_ik V_k)*)
///   dS_i/d|V|_k = δ_ik S_i/|V_i| + V_i (Y_ik V_k)*/|V_k|
///
/// — the same expressions the Newton–Raphson Jacobian is built from.
pub fn residual_gradient(
    sample: &[f64],
    layout: &SampleLayout,
    y: &AdmittanceMatrix,
) -> Result<(ImbalanceResult, Vec<f64>)> {
    check(sample, layout, y)?;
    let n = layout.n_buses;
    let (v, s) = bus_state(sample, layout, y);
    let inj = layout.injections(sample);
    let m: Vec<Complex64> = inj
        .iter()
        .zip(&s)
        .map(|(&(p, q), si)| Complex64::new(p, q) - si)
        .collect();
    let per_bus: Vec<f64> = m.iter().map(|mi| mi.norm()).collect();
    let mean = per_bus.iter().sum::<f64>() / n as f64;

    // Unit phasors of the mismatch; zero where the mismatch vanishes (the
    // hinge there is flat anyway).
    let u: Vec<Complex64> = m
        .iter()
        .zip(&per_bus)
        .map(|(mi, &a)| if a > 0.0 { mi / a } else { Complex64::ZERO })
        .collect();

    let inv_n = 1.0 / n as f64;
    let mut grad = vec![0.0; layout.dim()];

    for (pos, &bus) in layout.demand_buses.iter().enumerate() {
        grad[layout.index(Quantity::ActiveDemand, pos)] = -u[bus].re * inv_n;
        grad[layout.index(Quantity::ReactiveDemand, pos)] = -u[bus].im * inv_n;
    }
    for (pos, &bus) in layout.generator_buses.iter().enumerate() {
        // += : several generators on one bus would share the same bus term.
        grad[layout.index(Quantity::ActiveGeneration, pos)] += u[bus].re * inv_n;
        grad[layout.index(Quantity::ReactiveGeneration, pos)] += u[bus].im * inv_n;
    }

    let (vm, _) = layout.voltages(sample);
    let vm_off = layout.offset(Quantity::VoltageMagnitude);
    let va_off = layout.offset(Quantity::VoltageAngle);
    let jc = Complex64::new(0.0, 1.0);
    for k in 0..n {
        let mut g_theta = 0.0;
        let mut g_vm = 0.0;
        for i in 0..n {
            let coupling = v[i] * (y.matrix[(i, k)] * v[k]).conj();
            let mut ds_dtheta = -jc * coupling;
            let mut ds_dvm = coupling / vm[k];
            if i == k {
                ds_dtheta += jc * s[i];
                ds_dvm += s[i] / vm[i];
            }
            // d|m_i| = Re(u_i* · dm_i) and dm_i = −dS_i for voltage vars.
            g_theta -= (u[i].conj() * ds_dtheta).re;
            g_vm -= (u[i].conj() * ds_dvm).re;
        }
        grad[va_off + k] = g_theta * inv_n;
        grad[vm_off + k] = g_vm * inv_n;
    }

    Ok((ImbalanceResult { per_bus, mean }, grad))
}
