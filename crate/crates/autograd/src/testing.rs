//! Finite-difference helpers for gradient verification. Independent of the
//! tape: they only ever evaluate the forward function.

use crate::tensor::Tensor;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Absolute magnitude below which gradients are compared absolutely rather
/// than relatively.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` for each index.
pub fn numeric_grad(x: &Tensor, indices: &[usize], step: f64, mut f: impl FnMut(&Tensor) -> f64) -> Vec<f64> {
    let mut probe = x.clone();
    indices
        .iter()
        .map(|&i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + step;
            let plus = f(&probe);
            probe.data_mut()[i] = orig - step;
            let minus = f(&probe);
            probe.data_mut()[i] = orig;
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

/// `|a - n| / max(|a|, |n|, RELATIVE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Evenly spread sample of at most `count` indices in `0..len`, always
/// including the first and last.
pub fn spread_indices(len: usize, count: usize) -> Vec<usize> {
    if len <= count {
        return (0..len).collect();
    }
    if count <= 1 {
        return vec![0];
    }
    let mut out: Vec<usize> = (0..count).map(|k| k * (len - 1) / (count - 1)).collect();
    out.dedup();
    out
}
