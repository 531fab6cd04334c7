use nalgebra::DMatrix;
use num_complex::Complex64;

use super::case::NetworkCase;
use crate::error::{Error, Result};

/// Dense nodal admittance matrix in the bus order of the owning case.
///
/// Dense is deliberate: the target grids are tens of buses, where dense
/// complex arithmetic is both faster and simpler than sparse bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmittanceMatrix {
    pub matrix: DMatrix<Complex64>,
}

impl AdmittanceMatrix {
    pub fn n(&self) -> usize {
        self.matrix.nrows()
    }

    /// Y · v for a complex voltage vector.
    pub fn mul_vec(&self, v: &[Complex64]) -> Vec<Complex64> {
        let n = self.n();
        let mut out = vec![Complex64::ZERO; n];
        for i in 0..n {
            let mut acc = Complex64::ZERO;
            for j in 0..n {
                acc += self.matrix[(i, j)] * v[j];
            }
            out[i] = acc;
        }
        out
    }
}

/// Standard π-model construction: for a branch from i to j with series
/// admittance y = 1/(r + jx), charging b, and complex tap τ = tap·e^{jθ}:
///
///   Y_ii += (y + jb/2)/|τ|²     Y_ij += −y/τ*
///   Y_jj += y + jb/2            Y_ji += −y/τ
///
/// plus each bus's own shunt gs + jbs on the diagonal.
pub fn build_admittance(case: &NetworkCase) -> Result<AdmittanceMatrix> {
    let n = case.n_buses();
    let mut y = DMatrix::from_element(n, n, Complex64::ZERO);
    for (k, br) in case.branches.iter().enumerate() {
        let i = case
            .bus_index(br.from)
            .ok_or_else(|| Error::CaseSemantic(format!("branch {k}: unknown bus {}", br.from)))?;
        let j = case
            .bus_index(br.to)
            .ok_or_else(|| Error::CaseSemantic(format!("branch {k}: unknown bus {}", br.to)))?;
        if br.r == 0.0 && br.x == 0.0 {
            return Err(Error::CaseSemantic(format!(
                "branch {k} ({} - {}): zero series impedance",
                br.from, br.to
            )));
        }
        let ys = Complex64::new(1.0, 0.0) / Complex64::new(br.r, br.x);
        let ysh = Complex64::new(0.0, br.b_charge / 2.0);
        let tap = Complex64::from_polar(br.tap, br.shift);
        y[(i, i)] += (ys + ysh) / (tap * tap.conj());
        y[(j, j)] += ys + ysh;
        y[(i, j)] -= ys / tap.conj();
        y[(j, i)] -= ys / tap;
    }
    for (i, bus) in case.buses.iter().enumerate() {
        y[(i, i)] += Complex64::new(bus.gs, bus.bs);
    }
    Ok(AdmittanceMatrix { matrix: y })
}
