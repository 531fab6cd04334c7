//! Dataset evaluation: feasibility, distributional fidelity, and the
//! linearity of imbalance curves.
//!
//! All metrics here are deterministic functions of their inputs, computed on
//! denormalized (physical-unit) samples. Distribution fidelity is scored on
//! 1-D marginals per dimension — exact empirical Wasserstein-1 and
//! Kolmogorov–Smirnov distances — with a mean/max summary across dimensions.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffusion::bound::ImbalanceBound;
use crate::diffusion::sampler::ReverseTrace;
use crate::error::{Error, Result};
use crate::grid::{AdmittanceMatrix, NetworkCase, NormalizationBounds, SampleLayout};
use crate::pf::constraints::check_constraints;
use crate::pf::residual::residual_imbalance;

/// Per-sample imbalance values with order statistics. The scalar summaries
/// are computed over the *sorted* values, so they are exactly invariant
/// under sample reordering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceStats {
    pub per_sample: Vec<f64>,
    pub mean: f64,
    pub median: f64,
    pub p95: f64,
}

impl ImbalanceStats {
    pub fn from_values(per_sample: Vec<f64>) -> Result<Self> {
        if per_sample.is_empty() {
            return Err(Error::InvalidConfig("no samples to summarize".into()));
        }
        if per_sample.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("imbalance summary".into()));
        }
        let mut sorted = per_sample.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = sorted.len();
        let mean = sorted.iter().sum::<f64>() / n as f64;
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        // Nearest-rank percentile: the smallest value with at least 95% of
        // the mass at or below it.
        let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
        let p95 = sorted[rank - 1];
        Ok(ImbalanceStats {
            per_sample,
            mean,
            median,
            p95,
        })
    }

    pub fn summary(&self) -> ImbalanceSummary {
        ImbalanceSummary {
            mean: self.mean,
            median: self.median,
            p95: self.p95,
        }
    }
}

/// The scalar part of [`ImbalanceStats`], for reports.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceSummary {
    pub mean: f64,
    pub median: f64,
    pub p95: f64,
}

/// Power imbalance R(x) over a matrix of physical-unit rows.
pub fn mean_imbalance(
    rows: &Array2<f64>,
    layout: &SampleLayout,
    y: &AdmittanceMatrix,
) -> Result<ImbalanceStats> {
    let mut per_sample = Vec::with_capacity(rows.nrows());
    for row in rows.rows() {
        let x: Vec<f64> = row.to_vec();
        per_sample.push(residual_imbalance(&x, layout, y)?.mean);
    }
    ImbalanceStats::from_values(per_sample)
}

/// Imbalance of pure standard-normal model-space vectors pushed through the
/// denormalization map — the terminal level a diffusion forward process
/// lands at, and the level the bound γ_T is calibrated against.
pub fn noise_imbalance(
    bounds: &NormalizationBounds,
    layout: &SampleLayout,
    y: &AdmittanceMatrix,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ImbalanceStats> {
    if n == 0 {
        return Err(Error::InvalidConfig("noise imbalance needs n >= 1".into()));
    }
    let d = layout.dim();
    let mut per_sample = Vec::with_capacity(n);
    for _ in 0..n {
        let z: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let phys = bounds.physical_from_model(&z)?;
        per_sample.push(residual_imbalance(&phys, layout, y)?.mean);
    }
    ImbalanceStats::from_values(per_sample)
}

/// Fraction of samples satisfying each constraint family, plus the fraction
/// satisfying all of them at once.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SatisfactionReport {
    pub n: usize,
    pub active_generation: f64,
    pub reactive_generation: f64,
    pub voltage_magnitude: f64,
    pub voltage_angle: f64,
    pub power_balance: f64,
    pub line_flow: f64,
    pub all_families: f64,
}

impl SatisfactionReport {
    /// Named per-family rates in constraint order.
    pub fn rates(&self) -> [(&'static str, f64); 6] {
        [
            ("active_generation", self.active_generation),
            ("reactive_generation", self.reactive_generation),
            ("voltage_magnitude", self.voltage_magnitude),
            ("voltage_angle", self.voltage_angle),
            ("power_balance", self.power_balance),
            ("line_flow", self.line_flow),
        ]
    }
}

/// Constraint-satisfaction rates of a matrix of physical-unit rows.
pub fn constraint_satisfaction(
    rows: &Array2<f64>,
    case: &NetworkCase,
    layout: &SampleLayout,
    y: &AdmittanceMatrix,
) -> Result<SatisfactionReport> {
    let n = rows.nrows();
    if n == 0 {
        return Err(Error::InvalidConfig("no samples to check".into()));
    }
    let mut counts = [0usize; 6];
    let mut all = 0usize;
    for row in rows.rows() {
        let x: Vec<f64> = row.to_vec();
        let rep = check_constraints(&x, case, layout, y)?;
        for (k, (_, c)) in rep.checks().iter().enumerate() {
            if c.satisfied {
                counts[k] += 1;
            }
        }
        if rep.all_satisfied() {
            all += 1;
        }
    }
    let rate = |c: usize| c as f64 / n as f64;
    Ok(SatisfactionReport {
        n,
        active_generation: rate(counts[0]),
        reactive_generation: rate(counts[1]),
        voltage_magnitude: rate(counts[2]),
        voltage_angle: rate(counts[3]),
        power_balance: rate(counts[4]),
        line_flow: rate(counts[5]),
        all_families: rate(all),
    })
}

/// Exact empirical 1-D Wasserstein-1 and Kolmogorov–Smirnov distances
/// between two (possibly differently sized) sample vectors: one sweep over
/// the merged sorted values, accumulating the area (W1) and the supremum
/// gap (KS) between the step CDFs.
fn marginal_distances(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidConfig("empty marginal sample".into()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("marginal distance input".into()));
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(|x, y| x.partial_cmp(y).unwrap());
    sb.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let (n, m) = (sa.len() as f64, sb.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut w1 = 0.0;
    let mut ks: f64 = 0.0;
    let mut prev: Option<f64> = None;
    while i < sa.len() || j < sb.len() {
        let v = match (sa.get(i), sb.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => unreachable!(),
        };
        if let Some(p) = prev {
            w1 += (i as f64 / n - j as f64 / m).abs() * (v - p);
        }
        while sa.get(i) == Some(&v) {
            i += 1;
        }
        while sb.get(j) == Some(&v) {
            j += 1;
        }
        ks = ks.max((i as f64 / n - j as f64 / m).abs());
        prev = Some(v);
    }
    Ok((w1, ks))
}

/// Marginal fidelity of one dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionFidelity {
    pub name: String,
    pub w1: f64,
    pub ks: f64,
    /// Fraction of synthetic samples strictly outside the empirical support
    /// [min, max] of the real data — a descriptive statistic for mass in
    /// regions the real dataset never visits.
    pub outside_real_support: f64,
}

/// Per-dimension marginal distances plus the mean/max summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub per_dimension: Vec<DimensionFidelity>,
    pub mean_w1: f64,
    pub max_w1: f64,
    pub mean_ks: f64,
    pub max_ks: f64,
}

impl FidelityReport {
    pub fn summary(&self) -> FidelitySummary {
        FidelitySummary {
            mean_w1: self.mean_w1,
            max_w1: self.max_w1,
            mean_ks: self.mean_ks,
            max_ks: self.max_ks,
        }
    }
}

/// The scalar part of [`FidelityReport`], for reports.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FidelitySummary {
    pub mean_w1: f64,
    pub max_w1: f64,
    pub mean_ks: f64,
    pub max_ks: f64,
}

/// Marginal fidelity of `synthetic` against `real`, both as physical-unit
/// matrices over the same layout.
pub fn distribution_fidelity(
    synthetic: &Array2<f64>,
    real: &Array2<f64>,
    layout: &SampleLayout,
) -> Result<FidelityReport> {
    let d = layout.dim();
    if synthetic.ncols() != d || real.ncols() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: if synthetic.ncols() != d {
                synthetic.ncols()
            } else {
                real.ncols()
            },
            context: "fidelity dataset width".into(),
        });
    }
    if synthetic.nrows() == 0 || real.nrows() == 0 {
        return Err(Error::InvalidConfig("empty fidelity dataset".into()));
    }
    let mut per_dimension = Vec::with_capacity(d);
    for dim in 0..d {
        let s: Vec<f64> = synthetic.column(dim).to_vec();
        let r: Vec<f64> = real.column(dim).to_vec();
        let (w1, ks) = marginal_distances(&s, &r)?;
        let (lo, hi) = r
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| {
                (l.min(v), h.max(v))
            });
        let outside = s.iter().filter(|&&v| v < lo || v > hi).count();
        per_dimension.push(DimensionFidelity {
            name: layout.dim_name(dim),
            w1,
            ks,
            outside_real_support: outside as f64 / s.len() as f64,
        });
    }
    let df = d as f64;
    let mean_w1 = per_dimension.iter().map(|f| f.w1).sum::<f64>() / df;
    let max_w1 = per_dimension.iter().map(|f| f.w1).fold(0.0, f64::max);
    let mean_ks = per_dimension.iter().map(|f| f.ks).sum::<f64>() / df;
    let max_ks = per_dimension.iter().map(|f| f.ks).fold(0.0, f64::max);
    Ok(FidelityReport {
        per_dimension,
        mean_w1,
        max_w1,
        mean_ks,
        max_ks,
    })
}

/// How closely an imbalance curve tracks the linear budget γ_t.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearityScore {
    pub rmse: f64,
    pub max_deviation: f64,
}

/// Score a curve over t = 0..=T against γ_t; the curve must cover every
/// step including both endpoints.
pub fn linearity_score(curve: &[f64], bound: &ImbalanceBound) -> Result<LinearityScore> {
    if curve.len() != bound.t_steps + 1 {
        return Err(Error::DimensionMismatch {
            expected: bound.t_steps + 1,
            got: curve.len(),
            context: "linearity curve".into(),
        });
    }
    let mut acc = 0.0;
    let mut max_dev: f64 = 0.0;
    for (t, &v) in curve.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("imbalance curve at t = {t}")));
        }
        let dev = v - bound.gamma(t);
        acc += dev * dev;
        max_dev = max_dev.max(dev.abs());
    }
    Ok(LinearityScore {
        rmse: (acc / curve.len() as f64).sqrt(),
        max_deviation: max_dev,
    })
}

/// Fraction of reverse-trace rows whose mean imbalance stays at or under
/// the budget γ_t of their step.
pub fn reverse_trace_check(trace: &ReverseTrace, bound: &ImbalanceBound) -> Result<f64> {
    if trace.rows.len() != bound.t_steps + 1 {
        return Err(Error::DimensionMismatch {
            expected: bound.t_steps + 1,
            got: trace.rows.len(),
            context: "reverse trace".into(),
        });
    }
    let mut below = 0usize;
    for (k, row) in trace.rows.iter().enumerate() {
        if row.t != k {
            return Err(Error::InvalidConfig(format!(
                "trace row {k} is labeled t = {}",
                row.t
            )));
        }
        if !row.mean_imbalance.is_finite() {
            return Err(Error::NonFinite(format!("trace imbalance at t = {k}")));
        }
        if row.mean_imbalance <= bound.gamma(row.t) {
            below += 1;
        }
    }
    Ok(below as f64 / trace.rows.len() as f64)
}

/// The machine-readable evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub grid: String,
    pub model_tag: String,
    /// Named RNG streams that produced the evaluated artifacts.
    pub seeds: BTreeMap<String, u64>,
    pub n_synthetic: usize,
    pub n_real: usize,
    pub imbalance: ImbalanceSummary,
    pub constraints: SatisfactionReport,
    pub fidelity: FidelitySummary,
    pub linearity: Option<LinearityScore>,
    pub trace_fraction: Option<f64>,
}

impl EvalReport {
    pub const SCHEMA_VERSION: u32 = 1;

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
            }
        }
        let body = serde_json::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))?;
        std::fs::write(path, body + "\n").map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let report: EvalReport =
            serde_json::from_str(&body).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))?;
        if report.schema_version != Self::SCHEMA_VERSION {
            return Err(Error::InvalidConfig(format!(
                "evaluation report schema {} unsupported (expected {})",
                report.schema_version,
                Self::SCHEMA_VERSION
            )));
        }
        Ok(report)
    }

    /// Plain-text rendering for terminals and logs.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "grid {}  model {}  synthetic {}  real {}\n",
            self.grid, self.model_tag, self.n_synthetic, self.n_real
        ));
        out.push_str(&format!(
            "imbalance [p.u.]   mean {:<10.6} median {:<10.6} p95 {:<10.6}\n",
            self.imbalance.mean, self.imbalance.median, self.imbalance.p95
        ));
        out.push_str("constraint rates   ");
        for (name, rate) in self.constraints.rates() {
            out.push_str(&format!("{name} {rate:.4}  "));
        }
        out.push_str(&format!("all {:.4}\n", self.constraints.all_families));
        out.push_str(&format!(
            "fidelity           W1 mean {:<10.6} max {:<10.6} KS mean {:<8.4} max {:<8.4}\n",
            self.fidelity.mean_w1, self.fidelity.max_w1, self.fidelity.mean_ks, self.fidelity.max_ks
        ));
        if let Some(l) = self.linearity {
            out.push_str(&format!(
                "forward linearity  rmse {:<10.6} max deviation {:<10.6}\n",
                l.rmse, l.max_deviation
            ));
        }
        if let Some(f) = self.trace_fraction {
            out.push_str(&format!("reverse trace      fraction below bound {f:.4}\n"));
        }
        out
    }
}

/// Curve CSV (`t, gamma, imbalance`) for plotting imbalance trajectories.
pub fn write_curve_csv(path: &Path, bound: &ImbalanceBound, curve: &[f64]) -> Result<()> {
    if curve.len() != bound.t_steps + 1 {
        return Err(Error::DimensionMismatch {
            expected: bound.t_steps + 1,
            got: curve.len(),
            context: "curve csv".into(),
        });
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        }
    }
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::Serde(format!("{}: {e}", path.display())))?;
    w.write_record(["t", "gamma", "imbalance"])
        .map_err(|e| Error::Serde(e.to_string()))?;
    for (t, &v) in curve.iter().enumerate() {
        w.write_record([
            t.to_string(),
            format!("{:?}", bound.gamma(t)),
            format!("{v:?}"),
        ])
        .map_err(|e| Error::Serde(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::sampler::TraceRow;
    use crate::grid::cases;
    use crate::grid::ybus::build_admittance;
    use crate::pf::dataset::{generate_dataset, Dataset, GenerationConfig};
    use crate::rng;
    use ndarray::s;
    use once_cell::sync::Lazy;

    struct Fixture {
        case: NetworkCase,
        dataset: Dataset,
        y: AdmittanceMatrix,
    }

    static CASE14: Lazy<Fixture> = Lazy::new(|| {
        let case = cases::ieee14();
        let dataset = generate_dataset(&case, 60, 3301, &GenerationConfig::default()).unwrap();
        let y = build_admittance(&case).unwrap();
        Fixture { case, dataset, y }
    });

    #[test]
    fn order_statistics_use_sorted_values() {
        let stats = ImbalanceStats::from_values(vec![0.4, 0.1, 0.3, 0.2]).unwrap();
        assert_eq!(stats.mean, 0.25);
        assert_eq!(stats.median, 0.25);
        assert_eq!(stats.p95, 0.4);
        let odd = ImbalanceStats::from_values(vec![3.0, 1.0, 2.0]).unwrap();
        assert_eq!(odd.median, 2.0);
        assert_eq!(odd.p95, 3.0);
        // 20 values: the nearest-rank 95th percentile is the 19th sorted.
        let twenty: Vec<f64> = (1..=20).map(|v| v as f64).collect();
        assert_eq!(ImbalanceStats::from_values(twenty).unwrap().p95, 19.0);
        assert!(ImbalanceStats::from_values(vec![]).is_err());
        assert!(ImbalanceStats::from_values(vec![f64::NAN]).is_err());
    }

    #[test]
    fn solved_dataset_imbalance_is_solver_tolerance() {
        let f = &*CASE14;
        let rows = f.dataset.physical_matrix().unwrap();
        let stats = mean_imbalance(&rows, &f.dataset.layout, &f.y).unwrap();
        assert!(stats.mean < 1e-8, "mean {}", stats.mean);
        assert!(stats.p95 < 1e-8, "p95 {}", stats.p95);

        // Reordering the rows leaves every scalar summary bit-identical.
        let perm: Vec<usize> = (0..rows.nrows()).rev().collect();
        let shuffled = rows.select(ndarray::Axis(0), &perm);
        let again = mean_imbalance(&shuffled, &f.dataset.layout, &f.y).unwrap();
        assert_eq!(stats.mean, again.mean);
        assert_eq!(stats.median, again.median);
        assert_eq!(stats.p95, again.p95);
    }

    #[test]
    fn real_dataset_satisfies_everything_noise_satisfies_no_balance() {
        let f = &*CASE14;
        let rows = f.dataset.physical_matrix().unwrap();
        let rep = constraint_satisfaction(&rows, &f.case, &f.dataset.layout, &f.y).unwrap();
        for (name, rate) in rep.rates() {
            assert_eq!(rate, 1.0, "{name}");
        }
        assert_eq!(rep.all_families, 1.0);

        // Pure noise denormalized: power balance is hopeless.
        let mut rng = rng::stream(41, "noise");
        let stats = noise_imbalance(&f.dataset.bounds, &f.dataset.layout, &f.y, 64, &mut rng).unwrap();
        assert!(stats.mean > 1.0, "noise imbalance {}", stats.mean);
        let d = f.dataset.dim();
        let mut noise_rows = Array2::zeros((64, d));
        for i in 0..64 {
            let z: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let phys = f.dataset.bounds.physical_from_model(&z).unwrap();
            for j in 0..d {
                noise_rows[[i, j]] = phys[j];
            }
        }
        let nrep = constraint_satisfaction(&noise_rows, &f.case, &f.dataset.layout, &f.y).unwrap();
        assert!(nrep.power_balance < 0.05, "balance rate {}", nrep.power_balance);
    }

    #[test]
    fn marginal_distances_hand_computed() {
        // a = {0, 1}, b = {0, 1/2, 1}: the step CDFs differ by 1/6 on the
        // whole of [0, 1], so W1 = 1/6 and KS = 1/6.
        let (w1, ks) = marginal_distances(&[0.0, 1.0], &[0.0, 0.5, 1.0]).unwrap();
        assert!((w1 - 1.0 / 6.0).abs() < 1e-15, "w1 {w1}");
        assert!((ks - 1.0 / 6.0).abs() < 1e-15, "ks {ks}");
        // Identical samples in different order: exactly zero.
        let (w1, ks) = marginal_distances(&[2.0, -1.0, 0.5], &[0.5, 2.0, -1.0]).unwrap();
        assert_eq!(w1, 0.0);
        assert_eq!(ks, 0.0);
        assert!(marginal_distances(&[], &[1.0]).is_err());
        assert!(marginal_distances(&[f64::INFINITY], &[1.0]).is_err());
    }

    #[test]
    fn translation_moves_w1_by_the_shift() {
        let f = &*CASE14;
        let rows = f.dataset.physical_matrix().unwrap();
        let mut shifted = rows.clone();
        let dim = 3usize;
        for v in shifted.column_mut(dim) {
            *v += 0.1;
        }
        let rep = distribution_fidelity(&shifted, &rows, &f.dataset.layout).unwrap();
        for (d, fid) in rep.per_dimension.iter().enumerate() {
            if d == dim {
                assert!((fid.w1 - 0.1).abs() < 1e-12, "dim {d} w1 {}", fid.w1);
                assert!(fid.ks > 0.5, "dim {d} ks {}", fid.ks);
            } else {
                assert_eq!(fid.w1, 0.0, "dim {d}");
                assert_eq!(fid.ks, 0.0, "dim {d}");
            }
        }
        assert!((rep.max_w1 - 0.1).abs() < 1e-12);
        assert!((rep.mean_w1 - 0.1 / f.dataset.dim() as f64).abs() < 1e-12);

        // Identical datasets: all distances exactly zero.
        let same = distribution_fidelity(&rows, &rows, &f.dataset.layout).unwrap();
        assert_eq!(same.max_w1, 0.0);
        assert_eq!(same.max_ks, 0.0);
        for fid in &same.per_dimension {
            assert_eq!(fid.outside_real_support, 0.0);
        }
    }

    #[test]
    fn split_halves_give_small_nonzero_noise_floor() {
        let f = &*CASE14;
        let rows = f.dataset.physical_matrix().unwrap();
        let half = rows.nrows() / 2;
        let a = rows.slice(s![..half, ..]).to_owned();
        let b = rows.slice(s![half.., ..]).to_owned();
        let rep = distribution_fidelity(&a, &b, &f.dataset.layout).unwrap();
        assert!(rep.mean_w1 > 0.0);
        assert!(rep.mean_w1.is_finite() && rep.max_w1.is_finite());
        // Disjoint draws from one law: distances stay well under the box
        // scale (p.u. quantities, boxes of order one).
        assert!(rep.mean_w1 < 0.5, "noise floor {}", rep.mean_w1);
        assert!(rep.max_ks < 1.0, "ks {}", rep.max_ks);
    }

    #[test]
    fn linearity_closed_forms() {
        let bound = ImbalanceBound::new(200, 2.75).unwrap();
        let exact: Vec<f64> = (0..=200).map(|t| bound.gamma(t)).collect();
        let s = linearity_score(&exact, &bound).unwrap();
        assert_eq!(s.rmse, 0.0);
        assert_eq!(s.max_deviation, 0.0);

        // All-zero curve: RMSE over the inclusive range 0..=T is
        // γ_T·√((2T+1)/(6T)) — ≈ γ_T/√3 once T is large.
        let zero = vec![0.0; 201];
        let s = linearity_score(&zero, &bound).unwrap();
        let t = 200.0f64;
        let closed = 2.75 * ((2.0 * t + 1.0) / (6.0 * t)).sqrt();
        assert!((s.rmse - closed).abs() < 1e-12, "rmse {} vs {closed}", s.rmse);
        assert!((s.rmse - 2.75 / 3.0f64.sqrt()).abs() < 0.005 * s.rmse);
        assert_eq!(s.max_deviation, 2.75);

        assert!(linearity_score(&zero[..200], &bound).is_err());
        let mut bad = zero.clone();
        bad[7] = f64::NAN;
        assert!(linearity_score(&bad, &bound).is_err());
    }

    #[test]
    fn trace_fraction_counts_rows_under_budget() {
        let bound = ImbalanceBound::new(4, 2.0).unwrap();
        // γ = [0, 0.5, 1, 1.5, 2]; three of five rows stay at or under.
        let rows = vec![
            TraceRow { t: 0, gamma: 0.0, mean_imbalance: 0.0 },
            TraceRow { t: 1, gamma: 0.5, mean_imbalance: 0.7 },
            TraceRow { t: 2, gamma: 1.0, mean_imbalance: 1.0 },
            TraceRow { t: 3, gamma: 1.5, mean_imbalance: 2.0 },
            TraceRow { t: 4, gamma: 2.0, mean_imbalance: 1.9 },
        ];
        let trace = ReverseTrace { rows };
        let frac = reverse_trace_check(&trace, &bound).unwrap();
        assert!((frac - 0.6).abs() < 1e-15, "{frac}");

        let short = ReverseTrace { rows: trace.rows[..3].to_vec() };
        assert!(reverse_trace_check(&short, &bound).is_err());
        let mut bad = trace.clone();
        bad.rows[2].t = 7;
        assert!(reverse_trace_check(&bad, &bound).is_err());
    }

    #[test]
    fn report_roundtrip_and_table() {
        let f = &*CASE14;
        let rows = f.dataset.physical_matrix().unwrap();
        let stats = mean_imbalance(&rows, &f.dataset.layout, &f.y).unwrap();
        let constraints =
            constraint_satisfaction(&rows, &f.case, &f.dataset.layout, &f.y).unwrap();
        let fidelity = distribution_fidelity(&rows, &rows, &f.dataset.layout).unwrap();
        let mut seeds = BTreeMap::new();
        seeds.insert("data".to_string(), 3301u64);
        let report = EvalReport {
            schema_version: EvalReport::SCHEMA_VERSION,
            grid: "case14".into(),
            model_tag: "real-vs-real".into(),
            seeds,
            n_synthetic: rows.nrows(),
            n_real: rows.nrows(),
            imbalance: stats.summary(),
            constraints,
            fidelity: fidelity.summary(),
            linearity: Some(LinearityScore { rmse: 0.1, max_deviation: 0.2 }),
            trace_fraction: Some(0.93),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        report.save(&path).unwrap();
        let loaded = EvalReport::load(&path).unwrap();
        assert_eq!(loaded, report);

        let table = report.render_table();
        assert!(table.contains("case14"));
        assert!(table.contains("power_balance 1.0000"));
        assert!(table.contains("fraction below bound 0.93"));

        // Curve CSV: header + T+1 rows, exact float round trip formatting.
        let bound = ImbalanceBound::new(4, 2.0).unwrap();
        let curve = vec![0.0, 0.6, 1.1, 1.4, 2.0];
        let csv_path = dir.path().join("curve.csv");
        write_curve_csv(&csv_path, &bound, &curve).unwrap();
        let body = std::fs::read_to_string(&csv_path).unwrap();
        let lines: Vec<&str> = body.lines().collect();
        assert_eq!(lines.len(), 6);
        assert_eq!(lines[0], "t,gamma,imbalance");
        assert_eq!(lines[2], "1,0.5,0.6");
    }
}
