//! Structured unitary matrices `U = D₃R₂F⁻¹D₂ΠR₁FD₁` and the exponential-map
//! update on the unitary group.
//!
//! `D_k = diag(e^{iθ_k})` are phase diagonals, `R_k = I − 2vvᴴ/‖v‖²` complex
//! Householder reflections, `F` the unitary DFT and `Π` a fixed permutation
//! (`(Πx)_i = x_{perm[i]}`). A matrix-vector product costs `O(n log n)`; the
//! parameter count is `3n` phases plus `2n` complex reflector entries.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{
    cdot, fft_apply, householder_apply, ifft_apply, matrix_exp, polar_project_unitary, CMatrix,
    Matrix, C64,
};

/// Structured unitary parameterisation together with its materialised matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitaryParam {
    pub dim: usize,
    pub d1: Vec<f64>,
    pub d2: Vec<f64>,
    pub d3: Vec<f64>,
    pub r1: Vec<C64>,
    pub r2: Vec<C64>,
    pub perm: Vec<usize>,
    u_cache: CMatrix,
}

/// Gradients of the loss with respect to the structured parameters.
/// Reflector gradients use the `∂/∂Re + i·∂/∂Im` convention.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitaryGrads {
    pub d1: Vec<f64>,
    pub d2: Vec<f64>,
    pub d3: Vec<f64>,
    pub r1: Vec<C64>,
    pub r2: Vec<C64>,
}

impl UnitaryGrads {
    pub fn norm(&self) -> f64 {
        let real: f64 = [&self.d1, &self.d2, &self.d3]
            .iter()
            .flat_map(|v| v.iter())
            .map(|x| x * x)
            .sum();
        let cplx: f64 = self.r1.iter().chain(&self.r2).map(|z| z.norm_sqr()).sum();
        (real + cplx).sqrt()
    }
}

/// Bit-reversal permutation of `0..n` (`n` a power of two).
pub fn bit_reversal(n: usize) -> Vec<usize> {
    let bits = n.trailing_zeros();
    (0..n)
        .map(|i| if bits == 0 { i } else { i.reverse_bits() >> (usize::BITS - bits) })
        .collect()
}

impl UnitaryParam {
    pub fn new(
        d1: Vec<f64>,
        d2: Vec<f64>,
        d3: Vec<f64>,
        r1: Vec<C64>,
        r2: Vec<C64>,
        perm: Vec<usize>,
    ) -> Result<Self> {
        let n = d1.len();
        if n == 0 || !n.is_power_of_two() {
            return Err(Error::invalid(format!("unitary dimension {n} is not a power of two")));
        }
        if [d2.len(), d3.len(), r1.len(), r2.len(), perm.len()].iter().any(|&l| l != n) {
            return Err(Error::invalid("unitary factors disagree on dimension"));
        }
        let mut seen = vec![false; n];
        for &p in &perm {
            if p >= n || seen[p] {
                return Err(Error::invalid("perm is not a permutation"));
            }
            seen[p] = true;
        }
        for r in [&r1, &r2] {
            if r.iter().map(|z| z.norm_sqr()).sum::<f64>() == 0.0 {
                return Err(Error::invalid("zero Householder reflector"));
            }
        }
        let mut p = Self {
            dim: n,
            d1,
            d2,
            d3,
            r1,
            r2,
            perm,
            u_cache: CMatrix::zeros(0, 0),
        };
        p.refresh()?;
        Ok(p)
    }

    /// Zero phases, random unit reflectors and the bit-reversal permutation.
    pub fn init<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Self> {
        let unit = |rng: &mut R| {
            let v: Vec<C64> = (0..n)
                .map(|_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                .collect();
            let nrm = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            v.into_iter().map(|z| z / nrm).collect::<Vec<_>>()
        };
        let r1 = unit(rng);
        let r2 = unit(rng);
        Self::new(vec![0.0; n], vec![0.0; n], vec![0.0; n], r1, r2, bit_reversal(n))
    }

    pub fn param_count(&self) -> usize {
        3 * self.dim + 4 * self.dim
    }

    /// The materialised `U`.
    pub fn u(&self) -> &CMatrix {
        &self.u_cache
    }

    /// Replace the materialised matrix, e.g. after an exponential-map step.
    /// The structured parameters then describe the initial point only.
    pub fn set_u(&mut self, u: CMatrix) -> Result<()> {
        if u.shape() != (self.dim, self.dim) {
            return Err(Error::invalid("set_u: shape mismatch"));
        }
        self.u_cache = u;
        Ok(())
    }

    /// Recompose `U` from the structured parameters.
    pub fn refresh(&mut self) -> Result<()> {
        self.u_cache = self.compose()?;
        Ok(())
    }

    /// Apply the seven factors to `x` without materialising `U`.
    pub fn matvec(&self, x: &[C64]) -> Result<Vec<C64>> {
        if x.len() != self.dim {
            return Err(Error::invalid("unitary_matvec: vector length mismatch"));
        }
        let mut y = apply_phases(&self.d1, x);
        y = fft_apply(&y)?;
        y = householder_apply(&self.r1, &y)?;
        y = permute(&self.perm, &y);
        y = apply_phases(&self.d2, &y);
        y = ifft_apply(&y)?;
        y = householder_apply(&self.r2, &y)?;
        Ok(apply_phases(&self.d3, &y))
    }

    /// Materialise `U` column by column through [`UnitaryParam::matvec`].
    pub fn compose(&self) -> Result<CMatrix> {
        let n = self.dim;
        let mut u = CMatrix::zeros(n, n);
        for j in 0..n {
            let mut e = vec![C64::new(0.0, 0.0); n];
            e[j] = C64::new(1.0, 0.0);
            u.set_col(j, &self.matvec(&e)?);
        }
        Ok(u)
    }

    /// Dense factor matrices, rightmost first: `[D₁, F, R₁, Π, D₂, F⁻¹, R₂, D₃]`.
    pub fn factor_matrices(&self) -> Vec<CMatrix> {
        let n = self.dim;
        let f = dft_matrix(n, false);
        let finv = dft_matrix(n, true);
        let mut pi = CMatrix::zeros(n, n);
        for (i, &p) in self.perm.iter().enumerate() {
            pi[(i, p)] = C64::new(1.0, 0.0);
        }
        vec![
            phase_matrix(&self.d1),
            f,
            reflector_matrix(&self.r1),
            pi,
            phase_matrix(&self.d2),
            finv,
            reflector_matrix(&self.r2),
            phase_matrix(&self.d3),
        ]
    }

    /// Structured-parameter gradients from `grad_u = ∂L/∂Re U + i·∂L/∂Im U`,
    /// taken at the structured point (not at an exponential-map-evolved U).
    pub fn param_grads(&self, grad_u: &CMatrix) -> Result<UnitaryGrads> {
        let factors = self.factor_matrices();
        let n = self.dim;
        let k = factors.len();
        // right[i] = f_{i−1}···f_0
        let mut right = Vec::with_capacity(k);
        let mut acc = CMatrix::identity(n);
        for f in &factors {
            right.push(acc.clone());
            acc = f.matmul(&acc)?;
        }
        let mut per_factor = vec![CMatrix::zeros(0, 0); k];
        let mut left = grad_u.clone(); // (f_{k−1}···f_{i+1})ᴴ ∇U
        for i in (0..k).rev() {
            per_factor[i] = left.matmul(&right[i].adjoint())?;
            left = factors[i].adjoint().matmul(&left)?;
        }
        let phase_grad = |theta: &[f64], g: &CMatrix| -> Vec<f64> {
            theta
                .iter()
                .enumerate()
                .map(|(j, &t)| {
                    let d = C64::from_polar(1.0, t);
                    (g[(j, j)].conj() * C64::new(0.0, 1.0) * d).re
                })
                .collect()
        };
        Ok(UnitaryGrads {
            d1: phase_grad(&self.d1, &per_factor[0]),
            r1: reflector_grad(&self.r1, &per_factor[2]),
            d2: phase_grad(&self.d2, &per_factor[4]),
            r2: reflector_grad(&self.r2, &per_factor[6]),
            d3: phase_grad(&self.d3, &per_factor[7]),
        })
    }

    /// Gradient step on the structured parameters; `U` is recomposed.
    pub fn structured_step(&self, g: &UnitaryGrads, eta: f64) -> Result<Self> {
        let finite = g.norm().is_finite();
        if !finite {
            return Err(Error::numerical("unitary structured step: non-finite gradient"));
        }
        let step = |p: &[f64], d: &[f64]| p.iter().zip(d).map(|(a, b)| a - eta * b).collect();
        let cstep = |p: &[C64], d: &[C64]| p.iter().zip(d).map(|(a, b)| a - b * eta).collect();
        Self::new(
            step(&self.d1, &g.d1),
            step(&self.d2, &g.d2),
            step(&self.d3, &g.d3),
            cstep(&self.r1, &g.r1),
            cstep(&self.r2, &g.r2),
            self.perm.clone(),
        )
    }
}

fn apply_phases(theta: &[f64], x: &[C64]) -> Vec<C64> {
    crate::numerics::counter::add(x.len() as u64);
    x.iter().zip(theta).map(|(&v, &t)| v * C64::from_polar(1.0, t)).collect()
}

fn permute(perm: &[usize], x: &[C64]) -> Vec<C64> {
    crate::numerics::counter::add(x.len() as u64);
    perm.iter().map(|&p| x[p]).collect()
}

fn phase_matrix(theta: &[f64]) -> CMatrix {
    let n = theta.len();
    let mut d = CMatrix::zeros(n, n);
    for (j, &t) in theta.iter().enumerate() {
        d[(j, j)] = C64::from_polar(1.0, t);
    }
    d
}

fn reflector_matrix(v: &[C64]) -> CMatrix {
    let n = v.len();
    let vv: f64 = v.iter().map(|z| z.norm_sqr()).sum();
    CMatrix::from_fn(n, n, |i, j| {
        let id = if i == j { 1.0 } else { 0.0 };
        C64::new(id, 0.0) - v[i] * v[j].conj() * (2.0 / vv)
    })
}

/// Dense unitary DFT matrix from its defining formula.
pub fn dft_matrix(n: usize, inverse: bool) -> CMatrix {
    let sign = if inverse { 1.0 } else { -1.0 };
    let s = 1.0 / (n as f64).sqrt();
    CMatrix::from_fn(n, n, |j, k| {
        C64::from_polar(s, sign * 2.0 * std::f64::consts::PI * ((j * k) % n) as f64 / n as f64)
    })
}

/// `∂L/∂v` for `R = I − 2vvᴴ/s`, `s = vᴴv`, given `H = ∂L/∂R`:
/// `−(2/s)(Hv + Hᴴv) + (4/s²)·Re(vᴴHv)·v`.
fn reflector_grad(v: &[C64], h: &CMatrix) -> Vec<C64> {
    let s: f64 = v.iter().map(|z| z.norm_sqr()).sum();
    let hv = h.matvec(v).expect("square");
    let hhv = h.adjoint().matvec(v).expect("square");
    let quad = cdot(v, &hv).re;
    v.iter()
        .zip(hv.iter().zip(&hhv))
        .map(|(&vi, (&a, &b))| -(a + b) * (2.0 / s) + vi * (4.0 * quad / (s * s)))
        .collect()
}

/// `B = ∇U·Uᴴ − U·∇Uᴴ`, formed as `X − Xᴴ` with `X = ∇U·Uᴴ` so that
/// `Bᴴ = −B` holds exactly.
pub fn skew_hermitian_grad(grad_u: &CMatrix, u: &CMatrix) -> Result<CMatrix> {
    if grad_u.shape() != u.shape() || u.rows() != u.cols() {
        return Err(Error::invalid("skew_hermitian_grad: shapes must be equal and square"));
    }
    let x = grad_u.matmul(&u.adjoint())?;
    x.sub(&x.adjoint())
}

/// `exp(η·B)·U`.
pub fn unitary_exp_update(u: &CMatrix, b: &CMatrix, eta: f64) -> Result<CMatrix> {
    if b.shape() != u.shape() {
        return Err(Error::invalid("unitary_exp_update: shape mismatch"));
    }
    if eta == 0.0 {
        return Ok(u.clone());
    }
    matrix_exp(&b.scale_re(eta))?.matmul(u)
}

/// Nearest unitary matrix (complex polar factor).
pub fn unitary_renormalize(u: &CMatrix) -> Result<CMatrix> {
    polar_project_unitary(u)
}

pub fn unitary_compose(p: &UnitaryParam) -> Result<CMatrix> {
    p.compose()
}

pub fn unitary_matvec(p: &UnitaryParam, x: &[C64]) -> Result<Vec<C64>> {
    p.matvec(x)
}

/// `∂L/∂Re U + i·∂L/∂Im U` from the gradient of the loss with respect to the
/// real `2n×2n` matrix [`CMatrix::realify`] produces.
pub fn grad_u_from_realified(g: &Matrix, n: usize) -> Result<CMatrix> {
    if g.shape() != (2 * n, 2 * n) {
        return Err(Error::invalid("realified gradient has the wrong shape"));
    }
    Ok(CMatrix::from_fn(n, n, |i, j| {
        let re = g[(i, j)] + g[(i + n, j + n)];
        let im = g[(i + n, j)] - g[(i, j + n)];
        C64::new(re, im)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{cnorm2, fdiff::finite_diff_grad};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_param(n: usize, rng: &mut ChaCha8Rng) -> UnitaryParam {
        let mut p = UnitaryParam::init(n, rng).unwrap();
        for d in [&mut p.d1, &mut p.d2, &mut p.d3] {
            for t in d.iter_mut() {
                *t = rng.gen_range(-3.0..3.0);
            }
        }
        p.refresh().unwrap();
        p
    }

    fn random_cvec(n: usize, rng: &mut ChaCha8Rng) -> Vec<C64> {
        (0..n)
            .map(|_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect()
    }

    fn dense_product(p: &UnitaryParam) -> CMatrix {
        p.factor_matrices()
            .into_iter()
            .fold(CMatrix::identity(p.dim), |acc, f| f.matmul(&acc).unwrap())
    }

    #[test]
    fn identity_init_path_is_unitary() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = UnitaryParam::init(16, &mut rng).unwrap();
        assert!(p.u().unitarity_residual() <= 1e-10);
    }

    #[test]
    fn two_by_two_matches_factor_product() {
        let p = UnitaryParam::new(
            vec![0.3, -0.2],
            vec![1.1, 0.5],
            vec![-0.7, 2.0],
            vec![C64::new(1.0, 0.5), C64::new(-0.3, 0.2)],
            vec![C64::new(0.1, -1.0), C64::new(0.8, 0.0)],
            vec![1, 0],
        )
        .unwrap();
        // explicit 2×2 factors
        let f = {
            let s = 1.0 / 2f64.sqrt();
            CMatrix::from_vec(2, 2, vec![C64::new(s, 0.0), C64::new(s, 0.0), C64::new(s, 0.0), C64::new(-s, 0.0)])
                .unwrap()
        };
        let d = |a: f64, b: f64| {
            CMatrix::from_vec(
                2,
                2,
                vec![C64::from_polar(1.0, a), C64::new(0.0, 0.0), C64::new(0.0, 0.0), C64::from_polar(1.0, b)],
            )
            .unwrap()
        };
        let swap = CMatrix::from_vec(
            2,
            2,
            vec![C64::new(0.0, 0.0), C64::new(1.0, 0.0), C64::new(1.0, 0.0), C64::new(0.0, 0.0)],
        )
        .unwrap();
        let refl = |v: [C64; 2]| {
            let s = v[0].norm_sqr() + v[1].norm_sqr();
            CMatrix::from_fn(2, 2, |i, j| {
                C64::new(if i == j { 1.0 } else { 0.0 }, 0.0) - v[i] * v[j].conj() * (2.0 / s)
            })
        };
        let chain = [
            d(0.3, -0.2),
            f.clone(),
            refl([C64::new(1.0, 0.5), C64::new(-0.3, 0.2)]),
            swap,
            d(1.1, 0.5),
            f,
            refl([C64::new(0.1, -1.0), C64::new(0.8, 0.0)]),
            d(-0.7, 2.0),
        ];
        let oracle = chain
            .iter()
            .fold(CMatrix::identity(2), |acc, m| m.matmul(&acc).unwrap());
        assert!(p.u().max_abs_diff(&oracle) < 1e-14);
    }

    #[test]
    fn matvec_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for n in [4, 8, 32] {
            let p = random_param(n, &mut rng);
            let dense = dense_product(&p);
            assert!(p.u().max_abs_diff(&dense) < 1e-12);
            assert!(dense.unitarity_residual() < 1e-10);
            let x = random_cvec(n, &mut rng);
            let y = unitary_matvec(&p, &x).unwrap();
            assert!((cnorm2(&y) - cnorm2(&x)).abs() < 1e-12);
            let yd = dense.matvec(&x).unwrap();
            for (a, b) in y.iter().zip(&yd) {
                assert!((a - b).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let z = vec![C64::new(0.0, 0.0); 4];
        let one = vec![C64::new(1.0, 0.0); 4];
        assert!(UnitaryParam::new(vec![0.0; 4], vec![0.0; 4], vec![0.0; 4], z, one.clone(), bit_reversal(4)).is_err());
        assert!(UnitaryParam::new(vec![0.0; 3], vec![0.0; 3], vec![0.0; 3], one.clone(), one.clone(), vec![0, 1, 2]).is_err());
        assert!(UnitaryParam::new(vec![0.0; 4], vec![0.0; 4], vec![0.0; 4], one.clone(), one, vec![0, 0, 1, 2]).is_err());
    }

    #[test]
    fn param_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_param(4, &mut rng);
        let target = CMatrix::random_normal(4, 4, 1.0, &mut rng);
        // L = Re Σ conj(T)⊙U, so ∇U = T
        let loss_of = |q: &UnitaryParam| -> f64 {
            q.u().as_slice().iter().zip(target.as_slice()).map(|(u, t)| (t.conj() * u).re).sum()
        };
        let g = p.param_grads(&target).unwrap();
        let n = p.dim;
        let flat = |q: &UnitaryParam| -> Vec<f64> {
            let mut v = Vec::new();
            v.extend(&q.d1);
            v.extend(&q.d2);
            v.extend(&q.d3);
            for z in q.r1.iter().chain(&q.r2) {
                v.push(z.re);
                v.push(z.im);
            }
            v
        };
        let unflat = |v: &[f64]| -> UnitaryParam {
            let c = |off: usize| (0..n).map(|i| C64::new(v[off + 2 * i], v[off + 2 * i + 1])).collect();
            UnitaryParam::new(
                v[0..n].to_vec(),
                v[n..2 * n].to_vec(),
                v[2 * n..3 * n].to_vec(),
                c(3 * n),
                c(5 * n),
                p.perm.clone(),
            )
            .unwrap()
        };
        let fd = finite_diff_grad(|v| loss_of(&unflat(v)), &flat(&p), 1e-6).unwrap();
        let mut an = Vec::new();
        an.extend(&g.d1);
        an.extend(&g.d2);
        an.extend(&g.d3);
        for z in g.r1.iter().chain(&g.r2) {
            an.push(z.re);
            an.push(z.im);
        }
        for (a, f) in an.iter().zip(&fd) {
            assert!((a - f).abs() < 1e-7, "{a} vs {f}");
        }
    }

    #[test]
    fn skew_hermitian_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let u = random_param(8, &mut rng).u().clone();
        assert!(skew_hermitian_grad(&u, &u).unwrap().frobenius_norm() < 1e-14);
        assert_eq!(
            skew_hermitian_grad(&CMatrix::zeros(8, 8), &u).unwrap().frobenius_norm(),
            0.0
        );
        let g = CMatrix::random_normal(8, 8, 1.0, &mut rng);
        let b = skew_hermitian_grad(&g, &u).unwrap();
        assert!(b.add(&b.adjoint()).unwrap().frobenius_norm() <= 1e-14);
    }

    #[test]
    fn exp_update_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u = random_param(8, &mut rng).u().clone();
        let b = CMatrix::random_skew_hermitian(8, 1.0, &mut rng);
        assert_eq!(unitary_exp_update(&u, &b, 0.0).unwrap(), u);
        assert!(unitary_exp_update(&u, &CMatrix::zeros(8, 8), 0.3).unwrap().max_abs_diff(&u) == 0.0);
        let next = unitary_exp_update(&u, &b, 0.05).unwrap();
        assert!(next.unitarity_residual() <= 1e-9);
    }

    #[test]
    fn renormalize_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let u = random_param(8, &mut rng).u().clone();
        assert!(unitary_renormalize(&u).unwrap().max_abs_diff(&u) < 1e-12);
        let r = unitary_renormalize(&u.scale_re(1.01)).unwrap();
        assert!(r.max_abs_diff(&u) < 1e-10);
        assert!(r.unitarity_residual() <= 1e-12);
    }

    #[test]
    fn realified_gradient_convention() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 3;
        let u = CMatrix::random_normal(n, n, 1.0, &mut rng);
        let t = Matrix::random_normal(2 * n, 2 * n, 1.0, &mut rng);
        // L = Σ T ⊙ realify(U)
        let loss = |v: &[f64]| {
            let uu = CMatrix::from_fn(n, n, |i, j| C64::new(v[2 * (i * n + j)], v[2 * (i * n + j) + 1]));
            uu.realify().as_slice().iter().zip(t.as_slice()).map(|(a, b)| a * b).sum::<f64>()
        };
        let flat: Vec<f64> = u.as_slice().iter().flat_map(|z| [z.re, z.im]).collect();
        let fd = finite_diff_grad(loss, &flat, 1e-6).unwrap();
        let g = grad_u_from_realified(&t, n).unwrap();
        for (k, z) in g.as_slice().iter().enumerate() {
            assert!((z.re - fd[2 * k]).abs() < 1e-8);
            assert!((z.im - fd[2 * k + 1]).abs() < 1e-8);
        }
    }
}
