//! Polar Newton–Raphson AC power flow with PV→PQ switching.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::grid::{AdmittanceMatrix, BusKind, NetworkCase, Quantity, SampleLayout};

/// Full per-bus demand vectors (p.u.).
#[derive(Debug, Clone)]
pub struct Demands {
    pub pd: Vec<f64>,
    pub qd: Vec<f64>,
}

impl Demands {
    pub fn zero(n: usize) -> Self {
        Demands {
            pd: vec![0.0; n],
            qd: vec![0.0; n],
        }
    }

    /// Nominal case demands.
    pub fn nominal(case: &NetworkCase) -> Self {
        Demands {
            pd: case.buses.iter().map(|b| b.p_demand).collect(),
            qd: case.buses.iter().map(|b| b.q_demand).collect(),
        }
    }

    pub fn total_active(&self) -> f64 {
        self.pd.iter().sum()
    }
}

/// Per-generator setpoints: active power (ignored for the slack machine)
/// and voltage magnitude.
#[derive(Debug, Clone)]
pub struct Setpoints {
    pub pg: Vec<f64>,
    pub vg: Vec<f64>,
}

impl Setpoints {
    /// Case-file setpoints of the unperturbed operating point.
    pub fn nominal(case: &NetworkCase) -> Self {
        Setpoints {
            pg: case.generators.iter().map(|g| g.p_nominal).collect(),
            vg: case.generators.iter().map(|g| g.v_nominal).collect(),
        }
    }

    /// Zero dispatch, unit voltage everywhere.
    pub fn flat(case: &NetworkCase) -> Self {
        Setpoints {
            pg: vec![0.0; case.generators.len()],
            vg: vec![1.0; case.generators.len()],
        }
    }
}

#[derive(Debug, Clone)]
pub struct SolveOptions {
    /// Mismatch infinity-norm tolerance (p.u.).
    pub tol: f64,
    pub max_iter: usize,
    /// Warm start (vm, va); flat start when `None`.
    pub init: Option<(Vec<f64>, Vec<f64>)>,
    /// Enforce generator reactive limits by switching PV buses to PQ.
    pub enforce_q_limits: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            tol: 1e-8,
            max_iter: 30,
            init: None,
            enforce_q_limits: true,
        }
    }
}

/// A converged power flow state.
#[derive(Debug, Clone)]
pub struct SolvedFlow {
    pub vm: Vec<f64>,
    pub va: Vec<f64>,
    /// Net computed complex injection per bus, S = V (Y V)*.
    pub p_inj: Vec<f64>,
    pub q_inj: Vec<f64>,
    pub iterations: usize,
    pub max_mismatch: f64,
    /// Buses demoted from PV to PQ by reactive-limit enforcement.
    pub switched_to_pq: Vec<usize>,
    /// Reactive generation pinned at a limit for demoted buses. The solved
    /// injection matches it only to solver tolerance; samples record the
    /// exact pinned value and leave the epsilon to the balance residual.
    pub q_pinned_bus: Vec<Option<f64>>,
}

impl SolvedFlow {
    /// Per-generator reactive output: the solved bus reactive injection plus
    /// local demand (or the exact pinned limit for demoted buses), split
    /// evenly among co-located units.
    pub fn generator_q(&self, case: &NetworkCase, demands: &Demands) -> Vec<f64> {
        let mut share = vec![0usize; case.n_buses()];
        for g in &case.generators {
            share[case.bus_index(g.bus).unwrap()] += 1;
        }
        case.generators
            .iter()
            .map(|g| {
                let b = case.bus_index(g.bus).unwrap();
                let total = match self.q_pinned_bus[b] {
                    Some(q) => q,
                    None => self.q_inj[b] + demands.qd[b],
                };
                total / share[b] as f64
            })
            .collect()
    }

    /// Per-generator active output: dispatched values, except the slack
    /// machine which absorbs the system mismatch.
    pub fn generator_p(
        &self,
        case: &NetworkCase,
        demands: &Demands,
        setpoints: &Setpoints,
    ) -> Vec<f64> {
        let slack = case.slack_index();
        let mut share = vec![0usize; case.n_buses()];
        for g in &case.generators {
            share[case.bus_index(g.bus).unwrap()] += 1;
        }
        case.generators
            .iter()
            .zip(&setpoints.pg)
            .map(|(g, &pg)| {
                let b = case.bus_index(g.bus).unwrap();
                if b == slack {
                    (self.p_inj[b] + demands.pd[b]) / share[b] as f64
                } else {
                    pg
                }
            })
            .collect()
    }

    /// Flatten into the 6-block sample layout.
    pub fn sample(
        &self,
        case: &NetworkCase,
        layout: &SampleLayout,
        demands: &Demands,
        setpoints: &Setpoints,
    ) -> Vec<f64> {
        let mut x = vec![0.0; layout.dim()];
        for (pos, &bus) in layout.demand_buses.iter().enumerate() {
            x[layout.index(Quantity::ActiveDemand, pos)] = demands.pd[bus];
            x[layout.index(Quantity::ReactiveDemand, pos)] = demands.qd[bus];
        }
        let vm0 = layout.offset(Quantity::VoltageMagnitude);
        let va0 = layout.offset(Quantity::VoltageAngle);
        x[vm0..vm0 + layout.n_buses].copy_from_slice(&self.vm);
        x[va0..va0 + layout.n_buses].copy_from_slice(&self.va);
        let pg = self.generator_p(case, demands, setpoints);
        let qg = self.generator_q(case, demands);
        for pos in 0..layout.n_generators() {
            x[layout.index(Quantity::ActiveGeneration, pos)] = pg[pos];
            x[layout.index(Quantity::ReactiveGeneration, pos)] = qg[pos];
        }
        x
    }
}

/// Injection sensitivities at a voltage state, the elements every Jacobian
/// row is assembled from:
///
///   dS_i/dθ_k  = j(δ_ik S_i − V_i (Y_ik V_k)*)
///   dS_i/d|V|_k = δ_ik S_i/|V_i| + V_i (Y_ik V_k)*/|V_k|
pub(crate) fn injection_sensitivity(
    v: &[Complex64],
    vm: &[f64],
    s: &[Complex64],
    y: &AdmittanceMatrix,
    i: usize,
    k: usize,
) -> (Complex64, Complex64) {
    let jc = Complex64::new(0.0, 1.0);
    let coupling = v[i] * (y.matrix[(i, k)] * v[k]).conj();
    let mut dth = -jc * coupling;
    let mut dvm = coupling / vm[k];
    if i == k {
        dth += jc * s[i];
        dvm += s[i] / vm[i];
    }
    (dth, dvm)
}

/// Aggregate reactive limits per bus (summed over co-located units).
fn bus_q_limits(case: &NetworkCase) -> (Vec<f64>, Vec<f64>) {
    let n = case.n_buses();
    let mut qmin = vec![f64::INFINITY; n];
    let mut qmax = vec![f64::NEG_INFINITY; n];
    for g in &case.generators {
        let b = case.bus_index(g.bus).unwrap();
        if qmin[b].is_infinite() {
            qmin[b] = 0.0;
            qmax[b] = 0.0;
        }
        qmin[b] += g.q_min;
        qmax[b] += g.q_max;
    }
    (qmin, qmax)
}

/// Solve the power flow equations for given demands and setpoints.
///
/// PV buses hold |V| at their setpoint and P at the dispatched value; PQ
/// buses hold P and Q at the (negated) demand; the slack bus holds |V| and
/// angle 0 and absorbs the residual. With `enforce_q_limits`, a PV bus whose
/// solved reactive output leaves its box is re-solved as a PQ bus with Q
/// pinned at the violated limit.
pub fn solve_newton_raphson(
    case: &NetworkCase,
    y: &AdmittanceMatrix,
    demands: &Demands,
    setpoints: &Setpoints,
    opts: &SolveOptions,
) -> Result<SolvedFlow> {
    let n = case.n_buses();
    if demands.pd.len() != n || demands.qd.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: demands.pd.len(),
            context: "demand vectors".into(),
        });
    }
    if setpoints.pg.len() != case.generators.len() {
        return Err(Error::DimensionMismatch {
            expected: case.generators.len(),
            got: setpoints.pg.len(),
            context: "generator setpoints".into(),
        });
    }
    let slack = case.slack_index();

    // Scheduled injections and the initial PV set.
    let mut p_sch: Vec<f64> = demands.pd.iter().map(|&d| -d).collect();
    let mut vm_set = vec![None::<f64>; n];
    let mut pv: Vec<usize> = Vec::new();
    for (g, gen) in case.generators.iter().enumerate() {
        let b = case.bus_index(gen.bus).unwrap();
        if b != slack {
            p_sch[b] += setpoints.pg[g];
            if !pv.contains(&b) && case.buses[b].kind != BusKind::Load {
                pv.push(b);
            }
        }
        vm_set[b] = Some(setpoints.vg[g]);
    }

    let (qmin_bus, qmax_bus) = bus_q_limits(case);

    let mut vm: Vec<f64> = (0..n)
        .map(|b| vm_set[b].unwrap_or(1.0))
        .collect();
    let mut va = vec![0.0; n];
    if let Some((ivm, iva)) = &opts.init {
        vm.copy_from_slice(ivm);
        va.copy_from_slice(iva);
        // Regulated magnitudes still start at their setpoints.
        for b in 0..n {
            if let Some(set) = vm_set[b] {
                if b == slack || pv.contains(&b) {
                    vm[b] = set;
                }
            }
        }
    }

    // Q pinned at a limit for buses demoted to PQ.
    let mut q_fixed: Vec<Option<f64>> = vec![None; n];
    let mut switched: Vec<usize> = Vec::new();
    let mut total_iter = 0usize;

    // Outer loop: re-solve after each round of PV→PQ demotions; the PV set
    // only shrinks, so this terminates.
    for _round in 0..=pv.len() {
        let pq: Vec<usize> = (0..n)
            .filter(|&b| b != slack && !pv.contains(&b))
            .collect();
        let q_sch: Vec<f64> = (0..n)
            .map(|b| match q_fixed[b] {
                Some(q) => q - demands.qd[b],
                None => -demands.qd[b],
            })
            .collect();
        let nons: Vec<usize> = (0..n).filter(|&b| b != slack).collect();

        let mut converged = false;
        let mut last_mismatch = f64::INFINITY;
        for _ in 0..=opts.max_iter {
            let v: Vec<Complex64> = vm
                .iter()
                .zip(&va)
                .map(|(&m, &a)| Complex64::from_polar(m, a))
                .collect();
            let i_bus = y.mul_vec(&v);
            let s: Vec<Complex64> = v.iter().zip(&i_bus).map(|(vi, ii)| vi * ii.conj()).collect();

            let mut mis = DVector::zeros(nons.len() + pq.len());
            for (r, &b) in nons.iter().enumerate() {
                mis[r] = p_sch[b] - s[b].re;
            }
            for (r, &b) in pq.iter().enumerate() {
                mis[nons.len() + r] = q_sch[b] - s[b].im;
            }
            last_mismatch = mis.amax();
            if !last_mismatch.is_finite() {
                return Err(Error::Diverged {
                    iterations: total_iter,
                    mismatch: last_mismatch,
                });
            }
            if last_mismatch <= opts.tol {
                converged = true;
                break;
            }
            if total_iter >= opts.max_iter {
                break;
            }

            // Polar Jacobian from the complex injection sensitivities.
            let mut jac = DMatrix::zeros(nons.len() + pq.len(), nons.len() + pq.len());
            let d_s = |i: usize, k: usize| injection_sensitivity(&v, &vm, &s, y, i, k);
            for (r, &bi) in nons.iter().enumerate() {
                for (c, &bk) in nons.iter().enumerate() {
                    jac[(r, c)] = d_s(bi, bk).0.re;
                }
                for (c, &bk) in pq.iter().enumerate() {
                    jac[(r, nons.len() + c)] = d_s(bi, bk).1.re;
                }
            }
            for (r, &bi) in pq.iter().enumerate() {
                for (c, &bk) in nons.iter().enumerate() {
                    jac[(nons.len() + r, c)] = d_s(bi, bk).0.im;
                }
                for (c, &bk) in pq.iter().enumerate() {
                    jac[(nons.len() + r, nons.len() + c)] = d_s(bi, bk).1.im;
                }
            }

            let dx = jac
                .lu()
                .solve(&mis)
                .ok_or(Error::SingularJacobian)?;
            if !dx.iter().all(|x| x.is_finite()) {
                return Err(Error::Diverged {
                    iterations: total_iter,
                    mismatch: last_mismatch,
                });
            }
            for (r, &b) in nons.iter().enumerate() {
                va[b] += dx[r];
            }
            for (r, &b) in pq.iter().enumerate() {
                vm[b] += dx[nons.len() + r];
            }
            total_iter += 1;
        }
        if !converged {
            return Err(Error::Diverged {
                iterations: total_iter,
                mismatch: last_mismatch,
            });
        }

        // Reactive-limit check at the remaining PV buses.
        let mut demoted = false;
        if opts.enforce_q_limits {
            let v: Vec<Complex64> = vm
                .iter()
                .zip(&va)
                .map(|(&m, &a)| Complex64::from_polar(m, a))
                .collect();
            let i_bus = y.mul_vec(&v);
            for &b in pv.clone().iter() {
                let q_gen = (v[b] * i_bus[b].conj()).im + demands.qd[b];
                let pinned = if q_gen < qmin_bus[b] - 1e-9 {
                    Some(qmin_bus[b])
                } else if q_gen > qmax_bus[b] + 1e-9 {
                    Some(qmax_bus[b])
                } else {
                    None
                };
                if let Some(q) = pinned {
                    pv.retain(|&x| x != b);
                    q_fixed[b] = Some(q);
                    switched.push(b);
                    demoted = true;
                }
            }
        }
        if !demoted {
            let v: Vec<Complex64> = vm
                .iter()
                .zip(&va)
                .map(|(&m, &a)| Complex64::from_polar(m, a))
                .collect();
            let i_bus = y.mul_vec(&v);
            let s: Vec<Complex64> = v.iter().zip(&i_bus).map(|(vi, ii)| vi * ii.conj()).collect();
            return Ok(SolvedFlow {
                vm,
                va,
                p_inj: s.iter().map(|si| si.re).collect(),
                q_inj: s.iter().map(|si| si.im).collect(),
                iterations: total_iter,
                max_mismatch: last_mismatch,
                switched_to_pq: switched,
                q_pinned_bus: q_fixed,
            });
        }
    }
    Err(Error::Diverged {
        iterations: total_iter,
        mismatch: f64::INFINITY,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_admittance, cases};
    use crate::pf::testnet;
    use approx::assert_abs_diff_eq;

    /// Reference solution of the unperturbed IEEE 14-bus case (independent
    /// solver, bus order 1..14, angles in degrees).
    const REF_VM: [f64; 14] = [
        1.06, 1.045, 1.01, 1.017671, 1.019514, 1.07, 1.06152, 1.09, 1.055932, 1.050985, 1.056907,
        1.055189, 1.050382, 1.03553,
    ];
    const REF_VA_DEG: [f64; 14] = [
        0.0, -4.982589, -12.7251, -10.312901, -8.773854, -14.220946, -13.359627, -13.359627,
        -14.938521, -15.097288, -14.790622, -15.075585, -15.156276, -16.033645,
    ];

    #[test]
    fn no_load_flat_fixed_point() {
        let case = testnet::three_bus();
        let y = build_admittance(&case).unwrap();
        let demands = Demands::zero(3);
        let setpoints = Setpoints::flat(&case);
        let f =
            solve_newton_raphson(&case, &y, &demands, &setpoints, &SolveOptions::default()).unwrap();
        for b in 0..3 {
            assert_eq!(f.vm[b], 1.0, "bus {b} magnitude");
            assert_eq!(f.va[b], 0.0, "bus {b} angle");
        }
        let pg = f.generator_p(&case, &demands, &setpoints);
        let qg = f.generator_q(&case, &demands);
        assert!(pg.iter().chain(&qg).all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn ieee14_nominal_matches_reference() {
        let case = cases::ieee14();
        let y = build_admittance(&case).unwrap();
        let demands = Demands::nominal(&case);
        let setpoints = Setpoints::nominal(&case);
        let f =
            solve_newton_raphson(&case, &y, &demands, &setpoints, &SolveOptions::default()).unwrap();
        assert!(f.iterations <= 10, "took {} iterations", f.iterations);
        assert!(f.max_mismatch <= 1e-8);
        assert!(f.switched_to_pq.is_empty());
        for b in 0..14 {
            assert_abs_diff_eq!(f.vm[b], REF_VM[b], epsilon = 1e-5);
            assert_abs_diff_eq!(f.va[b].to_degrees(), REF_VA_DEG[b], epsilon = 1e-4);
        }
    }

    #[test]
    fn solution_is_a_fixed_point() {
        let case = cases::ieee14();
        let y = build_admittance(&case).unwrap();
        let demands = Demands::nominal(&case);
        let setpoints = Setpoints::nominal(&case);
        let opts = SolveOptions::default();
        let f = solve_newton_raphson(&case, &y, &demands, &setpoints, &opts).unwrap();
        let warm = SolveOptions {
            init: Some((f.vm.clone(), f.va.clone())),
            ..SolveOptions::default()
        };
        let g = solve_newton_raphson(&case, &y, &demands, &setpoints, &warm).unwrap();
        assert!(g.iterations <= 2, "warm restart took {}", g.iterations);
    }

    #[test]
    fn gross_overload_diverges() {
        let case = cases::ieee14();
        let y = build_admittance(&case).unwrap();
        let mut demands = Demands::nominal(&case);
        for v in demands.pd.iter_mut().chain(demands.qd.iter_mut()) {
            *v *= 10.0;
        }
        let e = solve_newton_raphson(
            &case,
            &y,
            &demands,
            &Setpoints::nominal(&case),
            &SolveOptions::default(),
        )
        .unwrap_err();
        assert!(
            matches!(e, Error::Diverged { .. } | Error::SingularJacobian),
            "unexpected error {e:?}"
        );
    }

    #[test]
    fn solved_sample_has_tiny_residual() {
        let case = cases::ieee14();
        let layout = crate::grid::SampleLayout::new(&case);
        let y = build_admittance(&case).unwrap();
        let demands = Demands::nominal(&case);
        let setpoints = Setpoints::nominal(&case);
        let f =
            solve_newton_raphson(&case, &y, &demands, &setpoints, &SolveOptions::default()).unwrap();
        let x = f.sample(&case, &layout, &demands, &setpoints);
        let r = crate::pf::residual_imbalance(&x, &layout, &y).unwrap();
        assert!(r.mean < 1e-8, "residual {}", r.mean);
    }

    #[test]
    fn jacobian_elements_match_finite_differences() {
        let case = testnet::three_bus();
        let y = build_admittance(&case).unwrap();
        let n = 3;
        let vm = [1.02, 0.98, 1.01];
        let va = [0.0, -0.05, 0.08];
        let state = |vm: &[f64], va: &[f64]| -> Vec<Complex64> {
            let v: Vec<Complex64> = vm
                .iter()
                .zip(va)
                .map(|(&m, &a)| Complex64::from_polar(m, a))
                .collect();
            let i = y.mul_vec(&v);
            v.iter().zip(&i).map(|(vi, ii)| vi * ii.conj()).collect()
        };
        let v: Vec<Complex64> = vm
            .iter()
            .zip(&va)
            .map(|(&m, &a)| Complex64::from_polar(m, a))
            .collect();
        let s = state(&vm, &va);
        let h = 1e-7;
        for k in 0..n {
            let mut vap = va;
            let mut vam = va;
            vap[k] += h;
            vam[k] -= h;
            let mut vmp = vm;
            let mut vmm = vm;
            vmp[k] += h;
            vmm[k] -= h;
            let s_ap = state(&vm, &vap);
            let s_am = state(&vm, &vam);
            let s_mp = state(&vmp, &va);
            let s_mm = state(&vmm, &va);
            for i in 0..n {
                let (dth, dvm) = injection_sensitivity(&v, &vm, &s, &y, i, k);
                let fd_th = (s_ap[i] - s_am[i]) / (2.0 * h);
                let fd_vm = (s_mp[i] - s_mm[i]) / (2.0 * h);
                let scale = 1.0 + dth.norm().max(dvm.norm());
                assert!(
                    (dth - fd_th).norm() <= 1e-5 * scale,
                    "dS[{i}]/dtheta[{k}]: {dth} vs {fd_th}"
                );
                assert!(
                    (dvm - fd_vm).norm() <= 1e-5 * scale,
                    "dS[{i}]/dvm[{k}]: {dvm} vs {fd_vm}"
                );
            }
        }
    }
}
