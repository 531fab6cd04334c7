//! Sinusoidal step embedding.

use ndarray::Array1;

/// Sinusoidal features of a step index at geometrically spaced frequencies:
/// pairs (sin(t·ω_k), cos(t·ω_k)) with ω_k = 10000^(−k/(width/2)).
///
/// Deterministic in `t`, entries bounded by 1, distinct for every step of
/// any practical schedule length.
pub fn time_embedding(t: usize, width: usize) -> Array1<f64> {
    assert!(width >= 2 && width % 2 == 0, "embedding width must be even");
    let half = width / 2;
    let mut e = Array1::zeros(width);
    for k in 0..half {
        let omega = (-(k as f64) / half as f64 * 10000f64.ln()).exp();
        let arg = t as f64 * omega;
        e[2 * k] = arg.sin();
        e[2 * k + 1] = arg.cos();
    }
    e
}
