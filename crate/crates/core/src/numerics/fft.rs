//! Unitary-normalised radix-2 FFT and Householder reflections on complex
//! vectors.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::numerics::cmatrix::{cdot, C64};
use crate::numerics::counter;

fn check_pow2(n: usize) -> Result<()> {
    if n == 0 || !n.is_power_of_two() {
        return Err(Error::invalid(format!("FFT length {n} is not a power of two")));
    }
    Ok(())
}

fn bit_reverse_permute(x: &mut [C64]) {
    let n = x.len();
    let bits = n.trailing_zeros();
    if bits == 0 {
        return;
    }
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            x.swap(i, j);
        }
    }
}

fn transform_in_place(x: &mut [C64], inverse: bool) {
    let n = x.len();
    bit_reverse_permute(x);
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let ang = sign * 2.0 * PI / len as f64;
        let half = len / 2;
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let w = C64::from_polar(1.0, ang * k as f64);
                let a = x[start + k];
                let b = x[start + k + half] * w;
                x[start + k] = a + b;
                x[start + k + half] = a - b;
            }
        }
        counter::add((n / 2) as u64);
        len <<= 1;
    }
    let s = 1.0 / (n as f64).sqrt();
    for v in x.iter_mut() {
        *v *= s;
    }
    counter::add(n as u64);
}

/// Unitary DFT, `y_k = n^{-1/2} Σ_j x_j e^{-2πi jk/n}`.
pub fn fft_apply(x: &[C64]) -> Result<Vec<C64>> {
    check_pow2(x.len())?;
    let mut y = x.to_vec();
    transform_in_place(&mut y, false);
    Ok(y)
}

/// Inverse of [`fft_apply`].
pub fn ifft_apply(x: &[C64]) -> Result<Vec<C64>> {
    check_pow2(x.len())?;
    let mut y = x.to_vec();
    transform_in_place(&mut y, true);
    Ok(y)
}

/// `(I − 2vvᴴ/‖v‖²)x` without forming the reflector.
pub fn householder_apply(v: &[C64], x: &[C64]) -> Result<Vec<C64>> {
    if v.len() != x.len() {
        return Err(Error::invalid("householder_apply: length mismatch"));
    }
    let vv: f64 = v.iter().map(|z| z.norm_sqr()).sum();
    if vv == 0.0 || !vv.is_finite() {
        return Err(Error::invalid("householder_apply: zero reflector"));
    }
    let coef = cdot(v, x) * (2.0 / vv);
    counter::add(2 * v.len() as u64);
    Ok(x.iter().zip(v).map(|(&xi, &vi)| xi - vi * coef).collect())
}
