use std::fmt;
use std::ops::{Index, IndexMut};

use num_complex::Complex64;
use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::matrix::{standard_normal, Matrix};

pub type C64 = Complex64;

/// Dense complex matrix stored row-major.
#[derive(Clone, PartialEq)]
pub struct CMatrix {
    rows: usize,
    cols: usize,
    data: Vec<C64>,
}

impl CMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![C64::new(0.0, 0.0); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = C64::new(1.0, 0.0);
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<C64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "buffer of length {} cannot hold a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> C64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_real(m: &Matrix) -> Self {
        Self::from_fn(m.rows(), m.cols(), |i, j| C64::new(m[(i, j)], 0.0))
    }

    /// Build from separate real and imaginary parts of equal shape.
    pub fn from_parts(re: &Matrix, im: &Matrix) -> Result<Self> {
        if re.shape() != im.shape() {
            return Err(Error::invalid("real and imaginary parts differ in shape"));
        }
        Ok(Self::from_fn(re.rows(), re.cols(), |i, j| {
            C64::new(re[(i, j)], im[(i, j)])
        }))
    }

    pub fn random_normal<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        Self::from_fn(rows, cols, |_, _| {
            C64::new(std * standard_normal(rng), std * standard_normal(rng))
        })
    }

    /// Random skew-Hermitian matrix `(X − Xᴴ)/2` with Gaussian `X`.
    pub fn random_skew_hermitian<R: Rng + ?Sized>(n: usize, std: f64, rng: &mut R) -> Self {
        let x = Self::random_normal(n, n, std, rng);
        let xh = x.adjoint();
        x.zip_with(&xh, |a, b| (a - b) * 0.5)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[C64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [C64] {
        &mut self.data
    }

    pub fn re(&self) -> Matrix {
        Matrix::from_fn(self.rows, self.cols, |i, j| self[(i, j)].re)
    }

    pub fn im(&self) -> Matrix {
        Matrix::from_fn(self.rows, self.cols, |i, j| self[(i, j)].im)
    }

    pub fn col(&self, j: usize) -> Vec<C64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn set_col(&mut self, j: usize, v: &[C64]) {
        for (i, &x) in v.iter().enumerate() {
            self[(i, j)] = x;
        }
    }

    /// Conjugate transpose.
    pub fn adjoint(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)].conj())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.re.is_finite() && v.im.is_finite())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn scale(&self, s: C64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| v * s).collect(),
        }
    }

    pub fn scale_re(&self, s: f64) -> Self {
        self.scale(C64::new(s, 0.0))
    }

    pub(crate) fn zip_with(&self, other: &Self, f: impl Fn(C64, C64) -> C64) -> Self {
        debug_assert_eq!(self.shape(), other.shape());
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    fn check_same_shape(&self, other: &Self, op: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::invalid(format!(
                "{op}: shape mismatch {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "add")?;
        Ok(self.zip_with(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "sub")?;
        Ok(self.zip_with(other, |a, b| a - b))
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::invalid(format!(
                "matmul: inner dimensions differ ({}x{} · {}x{})",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = vec![C64::new(0.0, 0.0); n * m];
        for i in 0..n {
            let out_row = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let a = self.data[i * k + p];
                let b_row = &other.data[p * m..(p + 1) * m];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Self {
            rows: n,
            cols: m,
            data: out,
        })
    }

    pub fn matvec(&self, x: &[C64]) -> Result<Vec<C64>> {
        if x.len() != self.cols {
            return Err(Error::invalid("matvec: vector length differs from column count"));
        }
        Ok((0..self.rows)
            .map(|i| {
                self.data[i * self.cols..(i + 1) * self.cols]
                    .iter()
                    .zip(x)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect())
    }

    /// `‖selfᴴ·self − I‖_F`, the unitarity residual.
    pub fn unitarity_residual(&self) -> f64 {
        let gram = self.adjoint().matmul(self).expect("square gram");
        gram.sub(&CMatrix::identity(self.cols))
            .expect("same shape")
            .frobenius_norm()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    /// Real `2n×2n` matrix `[[Re, −Im], [Im, Re]]` acting on `[x_re; x_im]`
    /// exactly as `self` acts on `x_re + i·x_im`.
    pub fn realify(&self) -> Matrix {
        let (r, c) = self.shape();
        Matrix::from_fn(2 * r, 2 * c, |i, j| {
            let z = self[(i % r, j % c)];
            match (i < r, j < c) {
                (true, true) | (false, false) => z.re,
                (true, false) => -z.im,
                (false, true) => z.im,
            }
        })
    }
}

impl Index<(usize, usize)> for CMatrix {
    type Output = C64;

    fn index(&self, (i, j): (usize, usize)) -> &C64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for CMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut C64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl fmt::Debug for CMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "CMatrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", &self.data[i * self.cols..(i + 1) * self.cols])?;
        }
        write!(f, "]")
    }
}

pub fn cnorm2(x: &[C64]) -> f64 {
    x.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
}

/// `xᴴy`.
pub fn cdot(x: &[C64], y: &[C64]) -> C64 {
    x.iter().zip(y).map(|(a, b)| a.conj() * b).sum()
}

/// Frobenius norm over real or complex matrices.
pub trait FrobeniusNorm {
    fn frobenius(&self) -> f64;
}

impl FrobeniusNorm for Matrix {
    fn frobenius(&self) -> f64 {
        self.frobenius_norm()
    }
}

impl FrobeniusNorm for CMatrix {
    fn frobenius(&self) -> f64 {
        self.frobenius_norm()
    }
}

pub fn frobenius_norm<M: FrobeniusNorm + ?Sized>(m: &M) -> f64 {
    m.frobenius()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn realify_matches_complex_action() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u = CMatrix::random_normal(4, 4, 1.0, &mut rng);
        let x = CMatrix::random_normal(4, 1, 1.0, &mut rng).col(0);
        let y = u.matvec(&x).unwrap();
        let xr: Vec<f64> = x.iter().map(|z| z.re).chain(x.iter().map(|z| z.im)).collect();
        let yr = u.realify().matvec(&xr).unwrap();
        for i in 0..4 {
            assert!((yr[i] - y[i].re).abs() < 1e-12);
            assert!((yr[i + 4] - y[i].im).abs() < 1e-12);
        }
    }

    #[test]
    fn skew_hermitian_generator() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = CMatrix::random_skew_hermitian(5, 1.0, &mut rng);
        assert_eq!(b.add(&b.adjoint()).unwrap().frobenius_norm(), 0.0);
    }

    #[test]
    fn complex_frobenius() {
        let m = CMatrix::from_vec(1, 2, vec![C64::new(3.0, 0.0), C64::new(0.0, 4.0)]).unwrap();
        assert_eq!(frobenius_norm(&m), 5.0);
        assert_eq!(frobenius_norm(&CMatrix::zeros(2, 2)), 0.0);
    }
}
