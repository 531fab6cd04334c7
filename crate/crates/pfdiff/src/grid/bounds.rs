use serde::{Deserialize, Serialize};

use super::case::NetworkCase;
use super::layout::{Quantity, SampleLayout};
use crate::error::{Error, Result};

/// Half-width of the uniform load perturbation, as a fraction of nominal.
/// Demand dimensions are normalized against exactly this box.
pub const DEMAND_PERTURBATION: f64 = 0.2;

/// Minimum half-width for a dimension whose observed spread is degenerate
/// (e.g. the slack angle, which is identically zero).
const MIN_HALF_WIDTH: f64 = 1e-6;

/// Per-dimension affine normalization box in physical units.
///
/// `normalize` maps [lo, hi] onto [0, 1]; `denormalize` inverts it exactly.
/// The diffusion model itself runs on the centered scale [−1, 1] (see
/// `to_model`/`from_model`): noise is zero-mean, so the model space is the
/// unit box recentered on the box midpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationBounds {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl NormalizationBounds {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::DimensionMismatch {
                expected: lo.len(),
                got: hi.len(),
                context: "normalization bounds".into(),
            });
        }
        for (d, (&l, &h)) in lo.iter().zip(&hi).enumerate() {
            if !(l < h) {
                return Err(Error::CaseSemantic(format!(
                    "bounds dimension {d}: lo {l} must be below hi {h}"
                )));
            }
        }
        Ok(NormalizationBounds { lo, hi })
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    fn check_dim(&self, len: usize, context: &str) -> Result<()> {
        if len != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: len,
                context: context.into(),
            });
        }
        Ok(())
    }

    /// Physical → unit scale: u = (v − lo)/(hi − lo). Values outside the box
    /// map outside [0, 1]; no clipping here.
    pub fn normalize(&self, sample: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(sample.len(), "normalize")?;
        Ok(sample
            .iter()
            .zip(self.lo.iter().zip(&self.hi))
            .map(|(&v, (&l, &h))| (v - l) / (h - l))
            .collect())
    }

    /// Unit scale → physical: v = lo + u·(hi − lo). For u inside [0, 1] the
    /// result is snapped into [lo, hi], so rounding can never push a value
    /// that is nominally inside the box across a box boundary; outside
    /// [0, 1] the map extrapolates linearly with no clipping.
    pub fn denormalize(&self, unit: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(unit.len(), "denormalize")?;
        Ok(unit
            .iter()
            .zip(self.lo.iter().zip(&self.hi))
            .map(|(&u, (&l, &h))| {
                let v = l + u * (h - l);
                if (0.0..=1.0).contains(&u) {
                    v.clamp(l, h)
                } else {
                    v
                }
            })
            .collect())
    }

    /// Unit scale [0,1] → model scale [−1,1].
    pub fn to_model(unit: &[f64]) -> Vec<f64> {
        unit.iter().map(|&u| 2.0 * u - 1.0).collect()
    }

    /// Model scale [−1,1] → unit scale [0,1].
    pub fn from_model(model: &[f64]) -> Vec<f64> {
        model.iter().map(|&x| 0.5 * (x + 1.0)).collect()
    }

    /// Model scale → physical units in one affine step:
    /// v = mid + x·(hi − lo)/2. This is the map under which diffusion states
    /// (including pure N(0, I) noise at t = T) acquire physical meaning, and
    /// the map the terminal-imbalance level γ_T is measured through.
    pub fn physical_from_model(&self, model: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(model.len(), "physical_from_model")?;
        Ok(model
            .iter()
            .zip(self.lo.iter().zip(&self.hi))
            .map(|(&x, (&l, &h))| {
                let v = 0.5 * (l + h) + 0.5 * x * (h - l);
                if (-1.0..=1.0).contains(&x) {
                    v.clamp(l, h)
                } else {
                    v
                }
            })
            .collect())
    }

    /// Strictly affine variant of [`Self::physical_from_model`]: never snaps
    /// to the box edges, so the Jacobian is exactly `half_widths()`
    /// everywhere. Training losses use this (a snap would zero gradients at
    /// the boundary); samplers and evaluators use the snapping variant.
    pub fn physical_from_model_linear(&self, model: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(model.len(), "physical_from_model_linear")?;
        Ok(model
            .iter()
            .zip(self.lo.iter().zip(&self.hi))
            .map(|(&x, (&l, &h))| 0.5 * (l + h) + 0.5 * x * (h - l))
            .collect())
    }

    /// Per-dimension half-widths (hi − lo)/2: the Jacobian of
    /// `physical_from_model`, needed when backpropagating physical-space
    /// residuals into model space.
    pub fn half_widths(&self) -> Vec<f64> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(&l, &h)| 0.5 * (h - l))
            .collect()
    }

    /// Constraint boxes of the case, as flat (lo, hi) vectors: generator and
    /// voltage dimensions from their box constraints, demand dimensions from
    /// the ±20% load perturbation range.
    pub fn from_constraints(case: &NetworkCase, layout: &SampleLayout) -> Result<Self> {
        let (lo, hi) = constraint_box(case, layout);
        let (blo, bhi) = (lo.clone(), hi.clone());
        let (lo, hi) = widen_degenerate(lo, hi, &blo, &bhi);
        NormalizationBounds::new(lo, hi)
    }

    /// Data-calibrated bounds: per dimension mean ± k·σ over a feasible
    /// sample set, intersected with the constraint box of `from_constraints`.
    ///
    /// The intersection keeps every box inside the feasible region, so
    /// clamping a model-space vector into [−1, 1] still lands inside
    /// [C1]–[C4]; the k·σ core keeps the box width calibrated to the actual
    /// data spread rather than to the (much wider) constraint boxes, and is
    /// stable in the number of samples, unlike a min/max envelope.
    pub fn from_data(
        samples: &[Vec<f64>],
        case: &NetworkCase,
        layout: &SampleLayout,
        k_sigma: f64,
    ) -> Result<Self> {
        let d = layout.dim();
        if samples.is_empty() {
            return Err(Error::CaseSemantic(
                "cannot derive bounds from an empty sample set".into(),
            ));
        }
        for s in samples {
            if s.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: s.len(),
                    context: "bounds from data".into(),
                });
            }
        }
        let n = samples.len() as f64;
        let mut mean = vec![0.0; d];
        for s in samples {
            for (m, &v) in mean.iter_mut().zip(s) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut var = vec![0.0; d];
        for s in samples {
            for ((vv, &v), &m) in var.iter_mut().zip(s).zip(&mean) {
                *vv += (v - m) * (v - m);
            }
        }
        for vv in &mut var {
            *vv /= n;
        }

        let (box_lo, box_hi) = constraint_box(case, layout);
        let mut lo = vec![0.0; d];
        let mut hi = vec![0.0; d];
        for dim in 0..d {
            let sd = var[dim].sqrt();
            let (q, _) = layout.describe(dim);
            match q {
                // Demand dimensions use the perturbation box exactly: it is
                // the true support of the load draws.
                Quantity::ActiveDemand | Quantity::ReactiveDemand => {
                    lo[dim] = box_lo[dim];
                    hi[dim] = box_hi[dim];
                }
                _ => {
                    lo[dim] = (mean[dim] - k_sigma * sd).max(box_lo[dim]);
                    hi[dim] = (mean[dim] + k_sigma * sd).min(box_hi[dim]);
                }
            }
        }
        let (lo, hi) = widen_degenerate(lo, hi, &box_lo, &box_hi);
        NormalizationBounds::new(lo, hi)
    }
}

fn constraint_box(case: &NetworkCase, layout: &SampleLayout) -> (Vec<f64>, Vec<f64>) {
    let d = layout.dim();
    let mut lo = vec![0.0; d];
    let mut hi = vec![0.0; d];
    for dim in 0..d {
        let (q, pos) = layout.describe(dim);
        let (l, h) = match q {
            Quantity::ActiveDemand | Quantity::ReactiveDemand => {
                let bus = &case.buses[layout.demand_buses[pos]];
                let nominal = if q == Quantity::ActiveDemand {
                    bus.p_demand
                } else {
                    bus.q_demand
                };
                let a = nominal * (1.0 - DEMAND_PERTURBATION);
                let b = nominal * (1.0 + DEMAND_PERTURBATION);
                (a.min(b), a.max(b))
            }
            Quantity::VoltageMagnitude => {
                let bus = &case.buses[pos];
                (bus.vm_min, bus.vm_max)
            }
            Quantity::VoltageAngle => {
                let bus = &case.buses[pos];
                (bus.va_min, bus.va_max)
            }
            Quantity::ActiveGeneration => {
                let gen = &case.generators[pos];
                (gen.p_min, gen.p_max)
            }
            Quantity::ReactiveGeneration => {
                let gen = &case.generators[pos];
                (gen.q_min, gen.q_max)
            }
        };
        lo[dim] = l;
        hi[dim] = h;
    }
    (lo, hi)
}

/// Give every degenerate dimension a usable width, staying inside the
/// constraint box where the box allows it (so a clamped model value can
/// never denormalize outside [C1]–[C4]); a box narrower than the minimum
/// width is widened symmetrically as a last resort.
fn widen_degenerate(
    mut lo: Vec<f64>,
    mut hi: Vec<f64>,
    box_lo: &[f64],
    box_hi: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let w = 2.0 * MIN_HALF_WIDTH;
    for (d, (l, h)) in lo.iter_mut().zip(hi.iter_mut()).enumerate() {
        if *h - *l >= w {
            continue;
        }
        let mid = 0.5 * (*l + *h);
        let (mut a, mut b) = (mid - MIN_HALF_WIDTH, mid + MIN_HALF_WIDTH);
        if box_hi[d] - box_lo[d] >= w {
            if a < box_lo[d] {
                b += box_lo[d] - a;
                a = box_lo[d];
            } else if b > box_hi[d] {
                a -= b - box_hi[d];
                b = box_hi[d];
            }
        }
        *l = a;
        *h = b;
    }
    (lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::cases;

    #[test]
    fn endpoints_map_to_zero_and_one() {
        let b = NormalizationBounds::new(vec![1.0, -2.0], vec![3.0, 2.0]).unwrap();
        assert_eq!(b.normalize(&[1.0, -2.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(b.normalize(&[3.0, 2.0]).unwrap(), vec![1.0, 1.0]);
        assert_eq!(b.normalize(&[2.0, 0.0]).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn constraint_bounds_handle_negative_nominal_demand() {
        // IEEE 14-bus bus 4 has Qd = −3.9 MVAr; the perturbation box must
        // still come out with lo < hi.
        let case = cases::ieee14();
        let layout = SampleLayout::new(&case);
        let b = NormalizationBounds::from_constraints(&case, &layout).unwrap();
        for d in 0..layout.dim() {
            assert!(b.lo[d] < b.hi[d], "dim {d}");
        }
    }

    #[test]
    fn model_space_roundtrip() {
        let unit = vec![0.0, 0.25, 1.0];
        let model = NormalizationBounds::to_model(&unit);
        assert_eq!(model, vec![-1.0, -0.5, 1.0]);
        assert_eq!(NormalizationBounds::from_model(&model), unit);
    }

    #[test]
    fn linear_map_never_snaps() {
        let b = NormalizationBounds::new(vec![0.9], vec![1.1]).unwrap();
        // A hair inside the model box: the snapping map may clamp onto the
        // edge, the linear one must reproduce mid + x·half exactly.
        let x = 1.0 - 1e-13;
        let lin = b.physical_from_model_linear(&[x]).unwrap()[0];
        assert_eq!(lin, 1.0 + 0.5 * x * 0.2);
        // Outside the box both maps extrapolate identically.
        let out = 1.7;
        assert_eq!(
            b.physical_from_model_linear(&[out]).unwrap(),
            b.physical_from_model(&[out]).unwrap()
        );
        // On the corners the affine form lands within rounding of the
        // bounds but is not snapped onto them — that final snap is what the
        // sampling-path variant adds.
        let lo = b.physical_from_model_linear(&[-1.0]).unwrap()[0];
        let hi = b.physical_from_model_linear(&[1.0]).unwrap()[0];
        assert!((lo - 0.9).abs() < 1e-15 && (hi - 1.1).abs() < 1e-15);
        assert_eq!(b.physical_from_model(&[-1.0]).unwrap()[0], 0.9);
        assert_eq!(b.physical_from_model(&[1.0]).unwrap()[0], 1.1);
    }
}
