//! Gradient-norm-weighted mixing of a low-rank and a Cayley-orthogonal delta.

use crate::adapters::boft::{boft_delta, BoftForm, BoftState};
use crate::adapters::lora::LoraAdapter;
use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Below this both gradient norms count as absent and `λ` falls back to ½.
pub const LAMBDA_FLOOR: f64 = 1e-12;

/// `λ = g_lora / (g_lora + g_boft)`, or ½ when both norms vanish.
pub fn hybrid_lambda(g_lora: f64, g_boft: f64) -> Result<f64> {
    if !(g_lora >= 0.0) || !(g_boft >= 0.0) {
        return Err(Error::invalid(format!(
            "gradient norms must be non-negative, got ({g_lora}, {g_boft})"
        )));
    }
    if g_lora < LAMBDA_FLOOR && g_boft < LAMBDA_FLOOR {
        return Ok(0.5);
    }
    Ok(g_lora / (g_lora + g_boft))
}

/// `λ·ΔW_LoRA + (1 − λ)·ΔW_BOFT`.
pub fn hybrid_delta(lambda: f64, d_lora: &Matrix, d_boft: &Matrix) -> Result<Matrix> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("lambda {lambda} outside [0, 1]")));
    }
    if d_lora.shape() != d_boft.shape() {
        return Err(Error::invalid("hybrid_delta: delta shapes differ"));
    }
    Ok(d_lora.zip_with(d_boft, |l, b| lambda * l + (1.0 - lambda) * b))
}

#[derive(Debug, Clone, PartialEq)]
pub struct HybridState {
    pub lora: LoraAdapter,
    pub boft: BoftState,
    /// Mixing coefficient used by the next forward pass.
    pub lambda_last: f64,
    pub eta_lora: f64,
    pub eta_boft: f64,
    /// Smoothing factor `β` for `λ ← β·λ_last + (1 − β)·λ_new`; `None`
    /// recomputes `λ` from every minibatch.
    pub lambda_ema: Option<f64>,
}

impl HybridState {
    pub fn new(
        lora: LoraAdapter,
        boft: BoftState,
        eta_lora: f64,
        eta_boft: f64,
        lambda_ema: Option<f64>,
    ) -> Result<Self> {
        if boft.form != BoftForm::Cayley {
            return Err(Error::invalid("hybrid state needs a Cayley-form BOFT state"));
        }
        if boft.dim != lora.d_out() {
            return Err(Error::invalid("hybrid: rotation and low-rank shapes disagree"));
        }
        if let Some(b) = lambda_ema {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid("lambda_ema must lie in [0, 1)"));
            }
        }
        Ok(Self {
            lora,
            boft,
            lambda_last: 0.5,
            eta_lora,
            eta_boft,
            lambda_ema,
        })
    }

    pub fn param_count(&self) -> usize {
        self.lora.param_count() + self.boft.param_count()
    }

    /// Both component deltas `(ΔW_LoRA, ΔW_BOFT)` against `w0`.
    pub fn components(&self, w0: &Matrix) -> Result<(Matrix, Matrix)> {
        let r = self.boft.rotation()?;
        Ok((self.lora.delta(), boft_delta(&r, w0)?))
    }

    /// Mixed delta at the current `λ`.
    pub fn delta(&self, w0: &Matrix) -> Result<Matrix> {
        let (dl, db) = self.components(w0)?;
        hybrid_delta(self.lambda_last, &dl, &db)
    }

    /// Fold a new pair of gradient norms into `λ`; returns the value stored.
    pub fn update_lambda(&mut self, g_lora: f64, g_boft: f64) -> Result<f64> {
        let fresh = hybrid_lambda(g_lora, g_boft)?;
        self.lambda_last = match self.lambda_ema {
            Some(beta) => (beta * self.lambda_last + (1.0 - beta) * fresh).clamp(0.0, 1.0),
            None => fresh,
        };
        Ok(self.lambda_last)
    }

    /// Factor step with `η_LoRA` and generator step with `η_BOFT`.
    pub fn step(&self, grad_a: &Matrix, grad_b: &Matrix, grad_q: &Matrix, w0: &Matrix) -> Result<Self> {
        let (lora, _) = self.lora.grad_step(grad_a, grad_b, self.eta_lora, Some(w0))?;
        let boft = self.boft.q_step(grad_q, self.eta_boft)?;
        Ok(Self {
            lora,
            boft,
            ..self.clone()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lambda_examples() {
        assert_eq!(hybrid_lambda(3.0, 1.0).unwrap(), 0.75);
        assert_eq!(hybrid_lambda(2.5, 0.0).unwrap(), 1.0);
        assert_eq!(hybrid_lambda(0.0, 0.0).unwrap(), 0.5);
        assert!(hybrid_lambda(-1.0, 1.0).is_err());
        assert!(hybrid_lambda(f64::NAN, 1.0).is_err());
    }

    #[test]
    fn lambda_ordering_and_scale_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let a: f64 = rng.gen_range(0.0..10.0);
            let b: f64 = rng.gen_range(0.0..10.0);
            let l = hybrid_lambda(a, b).unwrap();
            assert_eq!(l > 0.5, a > b);
            let c: f64 = rng.gen_range(0.01..100.0);
            assert!((hybrid_lambda(c * a, c * b).unwrap() - l).abs() < 1e-14);
        }
    }

    #[test]
    fn delta_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = Matrix::random_normal(3, 4, 1.0, &mut rng);
        let e = Matrix::random_normal(3, 4, 1.0, &mut rng);
        assert_eq!(hybrid_delta(1.0, &d, &e).unwrap(), d);
        assert_eq!(hybrid_delta(0.0, &d, &e).unwrap(), e);
        assert_eq!(
            hybrid_delta(0.5, &d, &d.scale(-1.0)).unwrap(),
            Matrix::zeros(3, 4)
        );
        assert!(hybrid_delta(0.5, &d, &Matrix::zeros(4, 3)).is_err());
        assert!(hybrid_delta(1.5, &d, &e).is_err());
    }

    #[test]
    fn ema_smooths_lambda() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let lora = LoraAdapter::init(4, 4, 2, 4.0, 0.1, &mut rng).unwrap();
        let boft = BoftState::cayley(4, 0.1).unwrap();
        let mut st = HybridState::new(lora, boft, 0.01, 0.01, Some(0.5)).unwrap();
        assert_eq!(st.update_lambda(1.0, 0.0).unwrap(), 0.75);
        assert_eq!(st.update_lambda(1.0, 0.0).unwrap(), 0.875);
        st.lambda_ema = None;
        assert_eq!(st.update_lambda(1.0, 3.0).unwrap(), 0.25);
    }

    #[test]
    fn zero_init_has_zero_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let lora = LoraAdapter::init(4, 6, 2, 4.0, 0.1, &mut rng).unwrap();
        let boft = BoftState::cayley(4, 0.1).unwrap();
        let st = HybridState::new(lora, boft, 0.01, 0.01, None).unwrap();
        let w0 = Matrix::random_normal(4, 6, 1.0, &mut rng);
        assert_eq!(st.delta(&w0).unwrap(), Matrix::zeros(4, 6));
    }
}
