//! LU factorisation with partial pivoting, used for the Cayley inverse.

use crate::error::{Error, Result};
use crate::numerics::matrix::Matrix;

pub const PIVOT_TOL: f64 = 1e-14;

/// Inverse of a square matrix. Fails with the smallest pivot encountered when
/// it falls below [`PIVOT_TOL`] relative to the largest entry.
pub fn inverse(m: &Matrix) -> Result<Matrix> {
    if !m.is_square() {
        return Err(Error::invalid("inverse: matrix must be square"));
    }
    let n = m.rows();
    let scale = m.as_slice().iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
    let mut lu = m.clone();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut min_pivot = f64::INFINITY;
    for k in 0..n {
        let (p, pv) = (k..n)
            .map(|i| (i, lu[(i, k)].abs()))
            .fold((k, -1.0), |best, c| if c.1 > best.1 { c } else { best });
        min_pivot = min_pivot.min(pv);
        if pv <= PIVOT_TOL * scale {
            return Err(Error::numerical(format!(
                "inverse: singular matrix (smallest pivot {pv:e})"
            )));
        }
        if p != k {
            perm.swap(p, k);
            for j in 0..n {
                let t = lu[(p, j)];
                lu[(p, j)] = lu[(k, j)];
                lu[(k, j)] = t;
            }
        }
        let piv = lu[(k, k)];
        for i in (k + 1)..n {
            let f = lu[(i, k)] / piv;
            lu[(i, k)] = f;
            if f != 0.0 {
                for j in (k + 1)..n {
                    let v = lu[(k, j)];
                    lu[(i, j)] -= f * v;
                }
            }
        }
    }
    log::trace!("inverse: smallest pivot {min_pivot:e}");

    let mut inv = Matrix::zeros(n, n);
    let mut col = vec![0.0; n];
    for j in 0..n {
        for i in 0..n {
            col[i] = if perm[i] == j { 1.0 } else { 0.0 };
        }
        for i in 0..n {
            let mut s = col[i];
            for k in 0..i {
                s -= lu[(i, k)] * col[k];
            }
            col[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = col[i];
            for k in (i + 1)..n {
                s -= lu[(i, k)] * col[k];
            }
            col[i] = s / lu[(i, i)];
        }
        for i in 0..n {
            inv[(i, j)] = col[i];
        }
    }
    Ok(inv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn inverse_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = Matrix::random_normal(6, 6, 1.0, &mut rng);
        let inv = inverse(&m).unwrap();
        assert!(m.matmul(&inv).unwrap().max_abs_diff(&Matrix::identity(6)) < 1e-12);
    }

    #[test]
    fn singular_reports_pivot() {
        let m = Matrix::from_rows(&[&[1.0, 2.0], &[2.0, 4.0]]);
        let err = inverse(&m).unwrap_err();
        assert!(err.to_string().contains("smallest pivot"));
    }
}
