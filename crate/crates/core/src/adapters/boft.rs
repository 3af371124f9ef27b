//! Orthogonal fine-tuning state in two forms.
//!
//! *Butterfly*: `m` levels of Givens rotations; level `i` rotates every index
//! pair `(j, j + 2^i)` with bit `i` of `j` clear, one angle per pair. The
//! product `L_{m−1}···L_0` is orthogonal by construction and is applied
//! multiplicatively, `W' = (Π L_i)·W₀`.
//!
//! *Cayley*: a skew-symmetric generator `Q` stored as its strict upper
//! triangle, mapped to `R = (I + ηQ)(I − ηQ)⁻¹` and applied additively as
//! `ΔW = (R − I)·W₀`.

use crate::error::{Error, Result};
use crate::numerics::{counter, lu, polar_project, Matrix};

/// Default number of butterfly levels.
pub const DEFAULT_LEVELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoftForm {
    Butterfly,
    Cayley,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ButterflyLevel {
    pub level_index: usize,
    pub angles: Vec<f64>,
}

impl ButterflyLevel {
    pub fn identity(level_index: usize, dim: usize) -> Self {
        Self {
            level_index,
            angles: vec![0.0; dim / 2],
        }
    }

    /// Index pairs rotated by this level, in angle order.
    pub fn pairs(&self, dim: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        let stride = 1usize << self.level_index;
        (0..dim).filter(move |j| j & stride == 0).map(move |j| (j, j + stride))
    }

    pub fn apply(&self, x: &mut [f64]) {
        let dim = x.len();
        for ((j, k), &theta) in self.pairs(dim).zip(&self.angles) {
            let (s, c) = theta.sin_cos();
            let (xj, xk) = (x[j], x[k]);
            x[j] = c * xj - s * xk;
            x[k] = s * xj + c * xk;
        }
        counter::add(self.angles.len() as u64);
    }

    /// Apply the transpose (inverse) rotation.
    pub fn apply_transpose(&self, x: &mut [f64]) {
        let dim = x.len();
        for ((j, k), &theta) in self.pairs(dim).zip(&self.angles) {
            let (s, c) = theta.sin_cos();
            let (xj, xk) = (x[j], x[k]);
            x[j] = c * xj + s * xk;
            x[k] = -s * xj + c * xk;
        }
    }

    pub fn matrix(&self, dim: usize) -> Matrix {
        let mut m = Matrix::identity(dim);
        for ((j, k), &theta) in self.pairs(dim).zip(&self.angles) {
            let (s, c) = theta.sin_cos();
            m[(j, j)] = c;
            m[(j, k)] = -s;
            m[(k, j)] = s;
            m[(k, k)] = c;
        }
        m
    }

    /// Angle gradients from the gradient of the loss with respect to the
    /// dense level matrix.
    pub fn angle_grads(&self, dim: usize, g_level: &Matrix) -> Vec<f64> {
        self.pairs(dim)
            .zip(&self.angles)
            .map(|((j, k), &theta)| {
                let (s, c) = theta.sin_cos();
                -s * g_level[(j, j)] - c * g_level[(j, k)] + c * g_level[(k, j)] - s * g_level[(k, k)]
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoftState {
    pub form: BoftForm,
    pub dim: usize,
    pub levels: Vec<ButterflyLevel>,
    /// Strict upper triangle of `Q`, row-major (`(0,1), (0,2), …, (d−2,d−1)`).
    generator: Vec<f64>,
    pub eta_boft: f64,
}

impl BoftState {
    /// Butterfly form with `m` identity levels.
    pub fn butterfly(dim: usize, m: usize) -> Result<Self> {
        if dim < 2 || !dim.is_power_of_two() {
            return Err(Error::invalid(format!(
                "butterfly dimension {dim} is not a power of two ≥ 2"
            )));
        }
        let max_levels = dim.trailing_zeros() as usize;
        if m == 0 || m > max_levels {
            return Err(Error::invalid(format!(
                "butterfly levels {m} outside 1..={max_levels} for dimension {dim}"
            )));
        }
        Ok(Self {
            form: BoftForm::Butterfly,
            dim,
            levels: (0..m).map(|i| ButterflyLevel::identity(i, dim)).collect(),
            generator: Vec::new(),
            eta_boft: 0.0,
        })
    }

    /// Cayley form with `Q = 0`.
    pub fn cayley(dim: usize, eta_boft: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("Cayley dimension must be positive"));
        }
        Ok(Self {
            form: BoftForm::Cayley,
            dim,
            levels: Vec::new(),
            generator: vec![0.0; dim * (dim - 1) / 2],
            eta_boft,
        })
    }

    /// Cayley form from an explicit skew-symmetric `q` (upper triangle read).
    pub fn cayley_from_q(q: &Matrix, eta_boft: f64) -> Result<Self> {
        check_skew(q)?;
        let mut st = Self::cayley(q.rows(), eta_boft)?;
        let d = q.rows();
        let mut idx = 0;
        for i in 0..d {
            for j in (i + 1)..d {
                st.generator[idx] = q[(i, j)];
                idx += 1;
            }
        }
        Ok(st)
    }

    pub fn param_count(&self) -> usize {
        match self.form {
            BoftForm::Butterfly => self.levels.iter().map(|l| l.angles.len()).sum(),
            BoftForm::Cayley => self.generator.len(),
        }
    }

    pub fn generator(&self) -> &[f64] {
        &self.generator
    }

    /// Overwrite the stored upper triangle of `Q`.
    pub fn set_generator(&mut self, g: &[f64]) -> Result<()> {
        self.require(BoftForm::Cayley, "set_generator")?;
        if g.len() != self.generator.len() {
            return Err(Error::invalid("generator length mismatch"));
        }
        self.generator.copy_from_slice(g);
        Ok(())
    }

    /// Skew-symmetric `Q`, mirrored from the stored upper triangle.
    pub fn q(&self) -> Matrix {
        let d = self.dim;
        let mut q = Matrix::zeros(d, d);
        let mut idx = 0;
        for i in 0..d {
            for j in (i + 1)..d {
                let v = self.generator[idx];
                q[(i, j)] = v;
                q[(j, i)] = -v;
                idx += 1;
            }
        }
        q
    }

    fn require(&self, form: BoftForm, op: &str) -> Result<()> {
        if self.form != form {
            return Err(Error::invalid(format!("{op}: BOFT state has form {:?}", self.form)));
        }
        Ok(())
    }

    /// Dense `L_{m−1}···L_0` from the materialised level matrices.
    pub fn compose(&self) -> Result<Matrix> {
        self.require(BoftForm::Butterfly, "butterfly_compose")?;
        let mut w = Matrix::identity(self.dim);
        for level in &self.levels {
            w = level.matrix(self.dim).matmul(&w)?;
        }
        Ok(w)
    }

    /// Apply all levels to `x` in `O(d·m)` rotations.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.require(BoftForm::Butterfly, "butterfly_matvec")?;
        if x.len() != self.dim {
            return Err(Error::invalid("butterfly_matvec: vector length mismatch"));
        }
        let mut y = x.to_vec();
        counter::add(self.dim as u64);
        for level in &self.levels {
            level.apply(&mut y);
        }
        Ok(y)
    }

    /// Per-level angle gradients given `h = ∂L/∂(Π L_i)`.
    pub fn level_grads(&self, h: &Matrix) -> Result<Vec<Vec<f64>>> {
        self.require(BoftForm::Butterfly, "butterfly level gradients")?;
        let d = self.dim;
        let mats: Vec<Matrix> = self.levels.iter().map(|l| l.matrix(d)).collect();
        let m = mats.len();
        // prefix[i] = L_{i−1}···L_0
        let mut prefix = Vec::with_capacity(m);
        let mut acc = Matrix::identity(d);
        for mat in &mats {
            prefix.push(acc.clone());
            acc = mat.matmul(&acc)?;
        }
        let mut out = vec![Vec::new(); m];
        // suffixᵀ·h accumulated from the top level down
        let mut left = h.clone();
        for i in (0..m).rev() {
            let g_level = left.matmul_t(&prefix[i])?;
            out[i] = self.levels[i].angle_grads(d, &g_level);
            left = mats[i].t_matmul(&left)?;
        }
        Ok(out)
    }

    /// Plain angle step without the projection check.
    pub fn butterfly_step(&self, grads: &[Vec<f64>], eta: f64) -> Result<Self> {
        self.require(BoftForm::Butterfly, "butterfly_step")?;
        if grads.len() != self.levels.len()
            || grads.iter().zip(&self.levels).any(|(g, l)| g.len() != l.angles.len())
        {
            return Err(Error::invalid("butterfly_step: gradient shape mismatch"));
        }
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::numerical("butterfly_step: non-finite gradient"));
        }
        let mut next = self.clone();
        for (level, g) in next.levels.iter_mut().zip(grads) {
            for (theta, gi) in level.angles.iter_mut().zip(g) {
                *theta -= eta * gi;
            }
        }
        Ok(next)
    }

    /// Angle step followed by the orthogonal projection of every materialised
    /// level, which must leave each level unchanged to within 1e-10.
    pub fn step_project(&self, grads: &[Vec<f64>], eta: f64) -> Result<Self> {
        let next = self.butterfly_step(grads, eta)?;
        for level in &next.levels {
            let dense = level.matrix(next.dim);
            let projected = polar_project(&dense)?;
            let drift = projected.max_abs_diff(&dense);
            if drift > 1e-10 {
                return Err(Error::numerical(format!(
                    "butterfly level {} moved by {drift:e} under projection",
                    level.level_index
                )));
            }
        }
        Ok(next)
    }

    /// `R = (I + ηQ)(I − ηQ)⁻¹` with this state's step size.
    pub fn rotation(&self) -> Result<Matrix> {
        self.require(BoftForm::Cayley, "Cayley rotation")?;
        cayley_orthonormal(&self.q(), self.eta_boft)
    }

    /// `Q ← Q − η(∇Q − ∇Qᵀ)`, updating only the stored upper triangle.
    pub fn q_step(&self, grad_q: &Matrix, eta: f64) -> Result<Self> {
        self.require(BoftForm::Cayley, "boft_q_step")?;
        if grad_q.shape() != (self.dim, self.dim) {
            return Err(Error::invalid("boft_q_step: gradient shape mismatch"));
        }
        if !grad_q.is_finite() {
            return Err(Error::numerical("boft_q_step: non-finite gradient"));
        }
        let mut next = self.clone();
        let mut idx = 0;
        for i in 0..self.dim {
            for j in (i + 1)..self.dim {
                let g = grad_q[(i, j)] - grad_q[(j, i)];
                next.generator[idx] -= eta * g;
                idx += 1;
            }
        }
        Ok(next)
    }
}

fn check_skew(q: &Matrix) -> Result<()> {
    if !q.is_square() {
        return Err(Error::invalid("generator must be square"));
    }
    let asym = q.add(&q.transpose())?.frobenius_norm();
    if asym > 1e-12 * q.frobenius_norm().max(1.0) {
        return Err(Error::invalid(format!(
            "generator is not skew-symmetric (‖Q + Qᵀ‖ = {asym:e})"
        )));
    }
    Ok(())
}

thread_local! {
    static CAYLEY_FAULT: std::cell::Cell<bool> = const { std::cell::Cell::new(false) };
}

/// Test hook: while enabled on the current thread, [`cayley_orthonormal`]
/// returns a slightly corrupted matrix so that detectors can be exercised.
#[doc(hidden)]
pub fn set_cayley_fault(enabled: bool) {
    CAYLEY_FAULT.with(|f| f.set(enabled));
}

/// Cayley map `R = (I + ηQ)(I − ηQ)⁻¹` for skew-symmetric `q`.
pub fn cayley_orthonormal(q: &Matrix, eta: f64) -> Result<Matrix> {
    check_skew(q)?;
    let n = q.rows();
    let eq = q.scale(eta);
    let ident = Matrix::identity(n);
    let minus = ident.sub(&eq)?;
    let plus = ident.add(&eq)?;
    let inv = lu::inverse(&minus)?;
    let mut r = plus.matmul(&inv)?;
    if CAYLEY_FAULT.with(|f| f.get()) {
        r[(0, 0)] += 1e-3;
    }
    Ok(r)
}

/// Gradient of the loss with respect to the full matrix `Q` given
/// `grad_r = ∂L/∂R`: `η·(I + R)ᵀ·∇R·(I − ηQ)⁻ᵀ`.
pub fn cayley_q_grad(q: &Matrix, eta: f64, grad_r: &Matrix) -> Result<Matrix> {
    let n = q.rows();
    let ident = Matrix::identity(n);
    let eq = q.scale(eta);
    let inv = lu::inverse(&ident.sub(&eq)?)?;
    let r = ident.add(&eq)?.matmul(&inv)?;
    let left = ident.add(&r)?.t_matmul(grad_r)?;
    Ok(left.matmul_t(&inv)?.scale(eta))
}

/// `(R − I)·W`.
pub fn boft_delta(r: &Matrix, w: &Matrix) -> Result<Matrix> {
    if !r.is_square() || r.cols() != w.rows() {
        return Err(Error::invalid("boft_delta: rotation and weight shapes disagree"));
    }
    r.sub(&Matrix::identity(r.rows()))?.matmul(w)
}

pub fn butterfly_compose(st: &BoftState) -> Result<Matrix> {
    st.compose()
}

pub fn butterfly_matvec(st: &BoftState, x: &[f64]) -> Result<Vec<f64>> {
    st.matvec(x)
}

pub fn butterfly_step_project(st: &BoftState, grads: &[Vec<f64>], eta: f64) -> Result<BoftState> {
    st.step_project(grads, eta)
}

pub fn boft_q_step(st: &BoftState, grad_q: &Matrix, eta: f64) -> Result<BoftState> {
    st.q_step(grad_q, eta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::fdiff::finite_diff_grad;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_butterfly(dim: usize, m: usize, rng: &mut ChaCha8Rng) -> BoftState {
        let mut st = BoftState::butterfly(dim, m).unwrap();
        for l in &mut st.levels {
            for a in &mut l.angles {
                *a = rng.gen_range(-3.0..3.0);
            }
        }
        st
    }

    fn random_skew(n: usize, scale: f64, rng: &mut ChaCha8Rng) -> Matrix {
        let x = Matrix::random_normal(n, n, scale, rng);
        x.sub(&x.transpose()).unwrap()
    }

    #[test]
    fn zero_angles_identity() {
        let st = BoftState::butterfly(8, 3).unwrap();
        assert_eq!(st.compose().unwrap(), Matrix::identity(8));
        let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        assert_eq!(st.matvec(&x).unwrap(), x.to_vec());
    }

    #[test]
    fn single_pair_is_rotation() {
        let mut st = BoftState::butterfly(2, 1).unwrap();
        st.levels[0].angles[0] = 0.4;
        let (s, c) = 0.4f64.sin_cos();
        let expected = Matrix::from_rows(&[&[c, -s], &[s, c]]);
        assert!(st.compose().unwrap().max_abs_diff(&expected) < 1e-15);
    }

    #[test]
    fn dense_matches_matvec_on_basis() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let st = random_butterfly(8, 3, &mut rng);
        let w = st.compose().unwrap();
        assert!(w.orthogonality_residual() < 1e-12);
        for j in 0..8 {
            let mut e = vec![0.0; 8];
            e[j] = 1.0;
            let y = st.matvec(&e).unwrap();
            for i in 0..8 {
                assert!((y[i] - w[(i, j)]).abs() < 1e-12);
            }
        }
        let x: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y = st.matvec(&x).unwrap();
        let nx: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let ny: f64 = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((nx - ny).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(BoftState::butterfly(6, 1).is_err());
        assert!(BoftState::butterfly(8, 4).is_err());
        assert!(BoftState::butterfly(8, 0).is_err());
        let st = BoftState::cayley(4, 0.1).unwrap();
        assert!(st.compose().is_err());
    }

    #[test]
    fn level_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let st = random_butterfly(8, 3, &mut rng);
        let target = Matrix::random_normal(8, 8, 1.0, &mut rng);
        // L = Σ target ⊙ W, so ∂L/∂W = target
        let loss = |angles: &[f64]| {
            let mut s = st.clone();
            let mut it = angles.iter();
            for l in &mut s.levels {
                for a in &mut l.angles {
                    *a = *it.next().unwrap();
                }
            }
            let w = s.compose().unwrap();
            w.as_slice().iter().zip(target.as_slice()).map(|(a, b)| a * b).sum::<f64>()
        };
        let flat: Vec<f64> = st.levels.iter().flat_map(|l| l.angles.clone()).collect();
        let fd = finite_diff_grad(loss, &flat, 1e-6).unwrap();
        let an: Vec<f64> = st.level_grads(&target).unwrap().concat();
        for (a, f) in an.iter().zip(&fd) {
            assert!((a - f).abs() < 1e-7, "{a} vs {f}");
        }
    }

    #[test]
    fn step_project_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let st = random_butterfly(16, 4, &mut rng);
        let zero: Vec<Vec<f64>> = st.levels.iter().map(|l| vec![0.0; l.angles.len()]).collect();
        assert_eq!(butterfly_step_project(&st, &zero, 0.1).unwrap(), st);
        let grads: Vec<Vec<f64>> = st
            .levels
            .iter()
            .map(|l| l.angles.iter().map(|_| rng.gen_range(-5.0..5.0)).collect())
            .collect();
        let next = st.step_project(&grads, 0.3).unwrap();
        assert!(next.compose().unwrap().orthogonality_residual() < 1e-10);
        let bad = vec![vec![f64::NAN; 8]; 4];
        assert!(matches!(st.step_project(&bad, 0.1), Err(Error::Numerical(_))));
    }

    #[test]
    fn projection_repairs_perturbed_level() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let st = random_butterfly(8, 3, &mut rng);
        let dense = st.levels[1].matrix(8);
        let noisy = dense.add(&Matrix::random_uniform(8, 8, 1e-3, &mut rng)).unwrap();
        assert!(noisy.orthogonality_residual() > 1e-4);
        assert!(polar_project(&noisy).unwrap().orthogonality_residual() <= 1e-10);
    }

    #[test]
    fn cayley_examples() {
        assert!(cayley_orthonormal(&Matrix::zeros(3, 3), 0.5)
            .unwrap()
            .max_abs_diff(&Matrix::identity(3))
            == 0.0);
        // (I + Q/2)(I − Q/2)⁻¹ with Q = [[0,1],[−1,0]]:
        // I − Q/2 = [[1, −.5], [.5, 1]], det 1.25, inverse [[.8, .4], [−.4, .8]]
        let q = Matrix::from_rows(&[&[0.0, 1.0], &[-1.0, 0.0]]);
        let r = cayley_orthonormal(&q, 0.5).unwrap();
        let expected = Matrix::from_rows(&[&[0.6, 0.8], &[-0.8, 0.6]]);
        assert!(r.max_abs_diff(&expected) < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = random_skew(12, 1.0, &mut rng);
        assert!(cayley_orthonormal(&q, 0.01).unwrap().orthogonality_residual() <= 1e-10);
        assert!(cayley_orthonormal(&Matrix::identity(2), 0.1).is_err());
    }

    #[test]
    fn cayley_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let st0 = BoftState::cayley_from_q(&random_skew(5, 0.5, &mut rng), 0.3).unwrap();
        let target = Matrix::random_normal(5, 5, 1.0, &mut rng);
        let loss = |gen: &[f64]| {
            let mut st = st0.clone();
            st.generator.copy_from_slice(gen);
            let r = st.rotation().unwrap();
            r.as_slice().iter().zip(target.as_slice()).map(|(a, b)| a * b).sum::<f64>()
        };
        let fd = finite_diff_grad(loss, st0.generator(), 1e-6).unwrap();
        let gq = cayley_q_grad(&st0.q(), st0.eta_boft, &target).unwrap();
        let mut idx = 0;
        for i in 0..5 {
            for j in (i + 1)..5 {
                let an = gq[(i, j)] - gq[(j, i)];
                assert!((an - fd[idx]).abs() < 1e-7);
                idx += 1;
            }
        }
    }

    #[test]
    fn boft_delta_cases() {
        let r = Matrix::identity(3);
        let w = Matrix::from_fn(3, 2, |i, j| (i * 2 + j) as f64);
        assert_eq!(boft_delta(&r, &w).unwrap(), Matrix::zeros(3, 2));
        let rot = Matrix::from_rows(&[&[0.0, -1.0], &[1.0, 0.0]]);
        let d = boft_delta(&rot, &Matrix::identity(2)).unwrap();
        assert_eq!(d, Matrix::from_rows(&[&[-1.0, -1.0], &[1.0, -1.0]]));
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let rr = cayley_orthonormal(&random_skew(6, 1.0, &mut rng), 0.2).unwrap();
        let w = Matrix::random_normal(6, 4, 1.0, &mut rng);
        let moved = w.add(&boft_delta(&rr, &w).unwrap()).unwrap();
        assert!((moved.frobenius_norm() - w.frobenius_norm()).abs() < 1e-10);
        assert!(moved.max_abs_diff(&rr.matmul(&w).unwrap()) < 1e-12);
    }

    #[test]
    fn q_step_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let st = BoftState::cayley_from_q(&random_skew(4, 1.0, &mut rng), 0.1).unwrap();
        let sym = {
            let x = Matrix::random_normal(4, 4, 1.0, &mut rng);
            x.add(&x.transpose()).unwrap()
        };
        assert_eq!(boft_q_step(&st, &sym, 0.5).unwrap(), st);
        let skew = random_skew(4, 1.0, &mut rng);
        let next = st.q_step(&skew, 0.5).unwrap();
        let expected = st.q().sub(&skew.scale(2.0 * 0.5)).unwrap();
        assert!(next.q().max_abs_diff(&expected) < 1e-14);
        let q = next.q();
        assert_eq!(q.add(&q.transpose()).unwrap(), Matrix::zeros(4, 4));
    }
}
