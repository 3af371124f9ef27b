//! Low-rank adapters: `ΔW = (α/r)·A·B` with `A: d_out×r`, `B: r×d_in`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{truncated_svd, Matrix};

/// Default rank.
pub const DEFAULT_RANK: usize = 16;
/// Default scaling numerator; the delta is multiplied by `alpha / rank`.
pub const DEFAULT_ALPHA: f64 = 32.0;

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub a: Matrix,
    pub b: Matrix,
    pub alpha: f64,
    /// Bound `λ` in `‖ΔW‖_F ≤ λ·‖W₀‖_F`; `None` disables clamping.
    pub clamp_lambda: Option<f64>,
    /// Product subtracted from the delta so that gradient-aligned factors
    /// start from the frozen model: `ΔW = (α/r)·A·B − anchor`.
    pub anchor: Option<Matrix>,
}

/// What [`LoraAdapter::clamp`] did.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ClampOutcome {
    WithinBound,
    /// Both factors were multiplied by this factor.
    Rescaled(f64),
    /// `‖W₀‖_F = 0` with a nonzero delta: the delta was zeroed.
    ZeroedDegenerate,
}

impl LoraAdapter {
    pub fn new(a: Matrix, b: Matrix, alpha: f64, clamp_lambda: Option<f64>) -> Result<Self> {
        if a.cols() != b.rows() {
            return Err(Error::invalid(format!(
                "LoRA factors disagree on rank: A is {}x{}, B is {}x{}",
                a.rows(),
                a.cols(),
                b.rows(),
                b.cols()
            )));
        }
        let r = a.cols();
        if r == 0 || r > a.rows().min(b.cols()) {
            return Err(Error::invalid(format!(
                "LoRA rank {r} outside 1..={}",
                a.rows().min(b.cols())
            )));
        }
        if let Some(l) = clamp_lambda {
            if !(l > 0.0) {
                return Err(Error::invalid("clamp lambda must be positive"));
            }
        }
        Ok(Self {
            a,
            b,
            alpha,
            clamp_lambda,
            anchor: None,
        })
    }

    /// Zero-delta initialisation: `A ~ U(−init_scale, init_scale)`, `B = 0`.
    pub fn init<R: Rng + ?Sized>(
        d_out: usize,
        d_in: usize,
        rank: usize,
        alpha: f64,
        init_scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let a = Matrix::random_uniform(d_out, rank, init_scale, rng);
        Self::new(a, Matrix::zeros(rank, d_in), alpha, None)
    }

    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    pub fn d_out(&self) -> usize {
        self.a.rows()
    }

    pub fn d_in(&self) -> usize {
        self.b.cols()
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    pub fn param_count(&self) -> usize {
        self.rank() * (self.d_out() + self.d_in())
    }

    /// Gradient-aligned factors anchored at their initial product, so the
    /// delta is exactly zero at construction.
    pub fn anchored(a: Matrix, b: Matrix, alpha: f64, clamp_lambda: Option<f64>) -> Result<Self> {
        let mut ad = Self::new(a, b, alpha, clamp_lambda)?;
        ad.anchor = Some(ad.product());
        Ok(ad)
    }

    /// `(α/r)·A·B` without the anchor.
    pub fn product(&self) -> Matrix {
        self.a.matmul_unchecked(&self.b).scale(self.scaling())
    }

    /// `(α/r)·A·B − anchor`.
    pub fn delta(&self) -> Matrix {
        let p = self.product();
        match &self.anchor {
            Some(anchor) => p.zip_with(anchor, |x, y| x - y),
            None => p,
        }
    }

    /// Enforce `‖ΔW‖_F ≤ λ‖W₀‖_F` by rescaling both factors by the square
    /// root of the violation ratio.
    pub fn clamp(&self, w0: &Matrix) -> Result<(Self, ClampOutcome)> {
        let Some(lambda) = self.clamp_lambda else {
            return Ok((self.clone(), ClampOutcome::WithinBound));
        };
        if w0.shape() != (self.d_out(), self.d_in()) {
            return Err(Error::invalid("lora_clamp: W0 shape does not match adapter"));
        }
        let bound = lambda * w0.frobenius_norm();
        // the bound is enforced on the factor product, which is what rescaling
        // the factors controls
        let norm = self.product().frobenius_norm();
        if norm <= bound {
            return Ok((self.clone(), ClampOutcome::WithinBound));
        }
        let mut out = self.clone();
        if bound == 0.0 {
            out.a = Matrix::zeros(self.d_out(), self.rank());
            out.b = Matrix::zeros(self.rank(), self.d_in());
            return Ok((out, ClampOutcome::ZeroedDegenerate));
        }
        let f = (bound / norm).sqrt();
        out.a = self.a.scale(f);
        out.b = self.b.scale(f);
        Ok((out, ClampOutcome::Rescaled(f)))
    }

    /// One SGD step `A ← A − η∇A`, `B ← B − η∇B`, then the clamp when enabled.
    pub fn grad_step(
        &self,
        grad_a: &Matrix,
        grad_b: &Matrix,
        eta: f64,
        w0: Option<&Matrix>,
    ) -> Result<(Self, ClampOutcome)> {
        if grad_a.shape() != self.a.shape() || grad_b.shape() != self.b.shape() {
            return Err(Error::invalid("lora_grad_step: gradient shapes do not match factors"));
        }
        if !grad_a.is_finite() || !grad_b.is_finite() {
            return Err(Error::numerical("lora_grad_step: non-finite gradient"));
        }
        let mut out = self.clone();
        out.a.axpy(-eta, grad_a)?;
        out.b.axpy(-eta, grad_b)?;
        match (out.clamp_lambda, w0) {
            (Some(_), Some(w0)) => out.clamp(w0),
            (Some(_), None) => Err(Error::invalid(
                "lora_grad_step: clamping enabled but no base weight supplied",
            )),
            (None, _) => Ok((out, ClampOutcome::WithinBound)),
        }
    }

    /// Factor gradients from the gradient `g_w` of the loss with respect to
    /// the delta: `∇A = s·G·Bᵀ`, `∇B = s·Aᵀ·G`.
    pub fn factor_grads(&self, g_w: &Matrix) -> Result<(Matrix, Matrix)> {
        let s = self.scaling();
        let ga = g_w.matmul_t(&self.b)?.scale(s);
        let gb = self.a.t_matmul(g_w)?.scale(s);
        Ok((ga, gb))
    }
}

pub fn lora_delta(ad: &LoraAdapter) -> Matrix {
    ad.delta()
}

pub fn lora_clamp(ad: &LoraAdapter, w0: &Matrix) -> Result<(LoraAdapter, ClampOutcome)> {
    ad.clamp(w0)
}

pub fn lora_grad_step(
    ad: &LoraAdapter,
    grad_a: &Matrix,
    grad_b: &Matrix,
    eta: f64,
    w0: Option<&Matrix>,
) -> Result<(LoraAdapter, ClampOutcome)> {
    ad.grad_step(grad_a, grad_b, eta, w0)
}

/// Gradient-aligned initial factors: `A₀ = U·Σ^{1/2}`, `B₀ = Σ^{1/2}·Vᵀ` from
/// the rank-`r` truncated SVD of `grad_w0`, so `A₀B₀` is the best rank-`r`
/// approximation of the gradient.
pub fn lora_ga_init(grad_w0: &Matrix, r: usize) -> Result<(Matrix, Matrix)> {
    let f = truncated_svd(grad_w0, r)?;
    let sqrt_s: Vec<f64> = f.s.iter().map(|s| s.sqrt()).collect();
    let a0 = Matrix::from_fn(grad_w0.rows(), r, |i, j| f.u[(i, j)] * sqrt_s[j]);
    let b0 = Matrix::from_fn(r, grad_w0.cols(), |i, j| sqrt_s[i] * f.v[(j, i)]);
    Ok((a0, b0))
}
