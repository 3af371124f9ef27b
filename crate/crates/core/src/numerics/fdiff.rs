//! Central finite differences, the oracle for every analytic gradient.

use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-5;

/// Central-difference gradient of `f` at `p`.
pub fn finite_diff_grad<F>(mut f: F, p: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(eps > 0.0) {
        return Err(Error::invalid("finite_diff_grad: eps must be positive"));
    }
    let mut x = p.to_vec();
    let mut grad = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let fp = f(&x);
        x[i] = orig - eps;
        let fm = f(&x);
        x[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::numerical(format!(
                "finite_diff_grad: non-finite evaluation at component {i}"
            )));
        }
        grad.push((fp - fm) / (2.0 * eps));
    }
    Ok(grad)
}

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖)`, or the absolute error
/// when both norms are below `floor`.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < floor {
        diff
    } else {
        diff / scale
    }
}
