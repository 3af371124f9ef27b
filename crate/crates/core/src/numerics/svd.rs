//! One-sided (Hestenes) Jacobi SVD for real and complex dense matrices, and the
//! polar projections built on it.
//!
//! Pairs of columns are rotated until every pair is numerically orthogonal;
//! the column norms are then the singular values and the accumulated rotations
//! form the right singular vectors. Accurate to working precision at the
//! desk-scale sizes used here (dims up to a few hundred).

use std::ops::{Add, Mul, Sub};

use crate::error::{Error, Result};
use crate::numerics::cmatrix::{CMatrix, C64};
use crate::numerics::matrix::Matrix;

const MAX_SWEEPS: usize = 80;
const ORTHO_TOL: f64 = 1e-15;

/// Smallest singular value accepted by the polar projections.
pub const SINGULAR_TOL: f64 = 1e-12;

/// Scalar field the Jacobi kernel runs over.
trait Field: Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> {
    fn zero() -> Self;
    fn one() -> Self;
    fn conj(self) -> Self;
    fn abs_sq(self) -> f64;
    fn from_re(x: f64) -> Self;
    /// `self / |self|`, the unit phase.
    fn phase(self) -> Self;
}

impl Field for f64 {
    fn zero() -> Self {
        0.0
    }
    fn one() -> Self {
        1.0
    }
    fn conj(self) -> Self {
        self
    }
    fn abs_sq(self) -> f64 {
        self * self
    }
    fn from_re(x: f64) -> Self {
        x
    }
    fn phase(self) -> Self {
        self.signum()
    }
}

impl Field for C64 {
    fn zero() -> Self {
        C64::new(0.0, 0.0)
    }
    fn one() -> Self {
        C64::new(1.0, 0.0)
    }
    fn conj(self) -> Self {
        C64::conj(&self)
    }
    fn abs_sq(self) -> f64 {
        self.norm_sqr()
    }
    fn from_re(x: f64) -> Self {
        C64::new(x, 0.0)
    }
    fn phase(self) -> Self {
        self / self.norm()
    }
}

fn inner<T: Field>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .fold(T::zero(), |acc, (&x, &y)| acc + x.conj() * y)
}

fn sq_norm<T: Field>(a: &[T]) -> f64 {
    a.iter().map(|x| x.abs_sq()).sum()
}

/// Thin SVD of a tall (`rows ≥ cols`) matrix given by its columns.
/// Returns `(u_cols, sigma, v_cols)` sorted by non-increasing sigma, with
/// left vectors of (numerically) zero singular values completed to an
/// orthonormal set.
fn jacobi_tall<T: Field>(mut a: Vec<Vec<T>>, rows: usize) -> Result<(Vec<Vec<T>>, Vec<f64>, Vec<Vec<T>>)> {
    let n = a.len();
    let mut v: Vec<Vec<T>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { T::one() } else { T::zero() }).collect())
        .collect();

    let mut converged = n < 2;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = sq_norm(&a[p]);
                let beta = sq_norm(&a[q]);
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let gamma = inner(&a[p], &a[q]);
                let g = gamma.abs_sq().sqrt();
                if g <= ORTHO_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let e = gamma.phase().conj();
                let zeta = (beta - alpha) / (2.0 * g);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (cc, ss) = (T::from_re(c), T::from_re(s));
                rotate(&mut a, p, q, e, cc, ss);
                rotate(&mut v, p, q, e, cc, ss);
            }
        }
        converged = !rotated;
    }
    if !converged {
        return Err(Error::numerical(format!(
            "Jacobi SVD did not converge within {MAX_SWEEPS} sweeps"
        )));
    }

    let mut order: Vec<(f64, usize)> = a.iter().enumerate().map(|(j, c)| (sq_norm(c).sqrt(), j)).collect();
    order.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
    let scale = order.first().map_or(0.0, |o| o.0);
    let zero_tol = scale * 1e-14 + f64::MIN_POSITIVE;

    let mut sigma = Vec::with_capacity(n);
    let mut u_cols: Vec<Vec<T>> = Vec::with_capacity(n);
    let mut v_cols = Vec::with_capacity(n);
    let mut pending = Vec::new();
    for &(s, j) in &order {
        v_cols.push(v[j].clone());
        if s > zero_tol {
            sigma.push(s);
            let inv = T::from_re(1.0 / s);
            u_cols.push(a[j].iter().map(|&x| x * inv).collect());
        } else {
            sigma.push(0.0);
            pending.push(u_cols.len());
            u_cols.push(Vec::new());
        }
    }
    complete_basis(&mut u_cols, &pending, rows);
    Ok((u_cols, sigma, v_cols))
}

fn rotate<T: Field>(cols: &mut [Vec<T>], p: usize, q: usize, e: T, c: T, s: T) {
    let (left, right) = cols.split_at_mut(q);
    let cp = &mut left[p];
    let cq = &mut right[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let yp = *y * e;
        let xp = *x;
        *x = c * xp - s * yp;
        *y = s * xp + c * yp;
    }
}

/// Fill the columns listed in `pending` with unit vectors orthogonal to all
/// other columns (modified Gram-Schmidt against the standard basis).
fn complete_basis<T: Field>(cols: &mut [Vec<T>], pending: &[usize], rows: usize) {
    let mut candidate = 0;
    for &slot in pending {
        while candidate < rows {
            let mut w: Vec<T> = (0..rows)
                .map(|i| if i == candidate { T::one() } else { T::zero() })
                .collect();
            candidate += 1;
            for _ in 0..2 {
                for (k, c) in cols.iter().enumerate() {
                    if k == slot || c.is_empty() {
                        continue;
                    }
                    let proj = inner(c, &w);
                    for (wi, &ci) in w.iter_mut().zip(c) {
                        *wi = *wi - ci * proj;
                    }
                }
            }
            let nrm = sq_norm(&w).sqrt();
            if nrm > 1e-6 {
                let inv = T::from_re(1.0 / nrm);
                cols[slot] = w.into_iter().map(|x| x * inv).collect();
                break;
            }
        }
    }
}

/// Thin SVD result: `g ≈ u · diag(s) · vᵀ`.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: Matrix,
    pub s: Vec<f64>,
    pub v: Matrix,
}

impl SvdResult {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    /// `u · diag(s) · vᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        let us = Matrix::from_fn(self.u.rows(), self.s.len(), |i, j| self.u[(i, j)] * self.s[j]);
        us.matmul_t(&self.v).expect("consistent factor shapes")
    }
}

#[derive(Debug, Clone)]
pub struct CSvdResult {
    pub u: CMatrix,
    pub s: Vec<f64>,
    pub v: CMatrix,
}

fn real_cols(m: &Matrix, transpose: bool) -> Vec<Vec<f64>> {
    if transpose {
        (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
    } else {
        (0..m.cols()).map(|j| m.col(j)).collect()
    }
}

fn cols_to_matrix(cols: &[Vec<f64>], rows: usize, take: usize) -> Matrix {
    Matrix::from_fn(rows, take, |i, j| cols[j][i])
}

/// Full thin SVD: `k = min(rows, cols)` singular triples.
pub fn svd(g: &Matrix) -> Result<SvdResult> {
    if !g.is_finite() {
        return Err(Error::invalid("svd: non-finite entries"));
    }
    let (d, k) = g.shape();
    let r = d.min(k);
    if d >= k {
        let (u, s, v) = jacobi_tall(real_cols(g, false), d)?;
        Ok(SvdResult {
            u: cols_to_matrix(&u, d, r),
            s,
            v: cols_to_matrix(&v, k, r),
        })
    } else {
        // gᵀ = U' Σ V'ᵀ  ⇒  g = V' Σ U'ᵀ
        let (u, s, v) = jacobi_tall(real_cols(g, true), k)?;
        Ok(SvdResult {
            u: cols_to_matrix(&v, d, r),
            s,
            v: cols_to_matrix(&u, k, r),
        })
    }
}

/// Top-`r` singular triples of `g`.
pub fn truncated_svd(g: &Matrix, r: usize) -> Result<SvdResult> {
    let max_rank = g.rows().min(g.cols());
    if r == 0 || r > max_rank {
        return Err(Error::invalid(format!(
            "truncated_svd: rank {r} outside 1..={max_rank}"
        )));
    }
    let full = svd(g)?;
    Ok(SvdResult {
        u: Matrix::from_fn(g.rows(), r, |i, j| full.u[(i, j)]),
        s: full.s[..r].to_vec(),
        v: Matrix::from_fn(g.cols(), r, |i, j| full.v[(i, j)]),
    })
}

/// SVD of a complex matrix.
pub fn csvd(g: &CMatrix) -> Result<CSvdResult> {
    if !g.is_finite() {
        return Err(Error::invalid("csvd: non-finite entries"));
    }
    let (d, k) = g.shape();
    let r = d.min(k);
    let build = |cols: &[Vec<C64>], rows: usize| CMatrix::from_fn(rows, r, |i, j| cols[j][i]);
    if d >= k {
        let cols = (0..k).map(|j| g.col(j)).collect();
        let (u, s, v) = jacobi_tall(cols, d)?;
        Ok(CSvdResult {
            u: build(&u, d),
            s,
            v: build(&v, k),
        })
    } else {
        let gh = g.adjoint();
        let cols = (0..d).map(|j| gh.col(j)).collect();
        let (u, s, v) = jacobi_tall(cols, k)?;
        Ok(CSvdResult {
            u: build(&v, d),
            s,
            v: build(&u, k),
        })
    }
}

/// Nearest orthogonal matrix in Frobenius norm, `U·Vᵀ` from the SVD.
pub fn polar_project(m: &Matrix) -> Result<Matrix> {
    if !m.is_square() {
        return Err(Error::invalid("polar_project: matrix must be square"));
    }
    let f = svd(m)?;
    let smallest = f.s.last().copied().unwrap_or(0.0);
    if smallest < SINGULAR_TOL {
        return Err(Error::numerical(format!(
            "polar_project: matrix is singular (smallest singular value {smallest:e})"
        )));
    }
    f.u.matmul_t(&f.v)
}

/// Nearest unitary matrix in Frobenius norm, `U·Vᴴ` from the complex SVD.
pub fn polar_project_unitary(m: &CMatrix) -> Result<CMatrix> {
    if m.rows() != m.cols() {
        return Err(Error::invalid("polar_project_unitary: matrix must be square"));
    }
    let f = csvd(m)?;
    let smallest = f.s.last().copied().unwrap_or(0.0);
    if smallest < SINGULAR_TOL {
        return Err(Error::numerical(format!(
            "polar_project_unitary: matrix is singular (smallest singular value {smallest:e})"
        )));
    }
    f.u.matmul(&f.v.adjoint())
}
