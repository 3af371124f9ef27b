//! Matrix exponential by scaling and squaring around a Taylor core.

use crate::error::{Error, Result};
use crate::numerics::cmatrix::{CMatrix, C64};

/// Scaled operand norm bound before the Taylor core is applied.
pub const SCALED_NORM_BOUND: f64 = 0.5;
/// Degree of the Taylor polynomial.
pub const TAYLOR_ORDER: usize = 12;

/// `exp(b)` for a square complex matrix.
///
/// The operand is divided by `2^s` so that its Frobenius norm (an upper bound
/// on the spectral norm) is at most 0.5, a degree-12 Taylor polynomial is
/// evaluated by Horner's rule, and the result is squared `s` times.
pub fn matrix_exp(b: &CMatrix) -> Result<CMatrix> {
    if b.rows() != b.cols() {
        return Err(Error::invalid("matrix_exp: matrix must be square"));
    }
    if !b.is_finite() {
        return Err(Error::invalid("matrix_exp: non-finite entries"));
    }
    let n = b.rows();
    let norm = b.frobenius_norm();
    let mut squarings = 0u32;
    if norm > SCALED_NORM_BOUND {
        squarings = (norm / SCALED_NORM_BOUND).log2().ceil().max(0.0) as u32;
    }
    let scaled = b.scale_re(0.5f64.powi(squarings as i32));

    // Horner: I + X(I + X/2(I + X/3(...)))
    let ident = CMatrix::identity(n);
    let mut acc = ident.clone();
    for k in (1..=TAYLOR_ORDER).rev() {
        let term = scaled.matmul(&acc)?.scale(C64::new(1.0 / k as f64, 0.0));
        acc = ident.add(&term)?;
    }
    for _ in 0..squarings {
        acc = acc.matmul(&acc)?;
    }
    Ok(acc)
}
