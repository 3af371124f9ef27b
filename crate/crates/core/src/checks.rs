//! Invariant suite: each property measures a residual and compares it with
//! a threshold. `peft-forge check` prints the lot.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adapters::{
    butterfly_compose, butterfly_matvec, cayley_orthonormal, hybrid_lambda, lora_ga_init,
    skew_hermitian_grad, unitary_compose, unitary_exp_update, unitary_matvec, unitary_renormalize,
    BoftState, HybridState, LoraAdapter, UnitaryParam,
};
use crate::error::Result;
use crate::model::{read_snapshot, write_snapshot, Adapter, Example, Model, ModelConfig, Target};
use crate::numerics::fdiff::DEFAULT_EPS;
use crate::numerics::{
    cnorm2, counter, fft_apply, ifft_apply, matrix_exp, polar_project, svd, CMatrix, Matrix, C64,
};

/// Outcome of one property.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub measured: f64,
    pub threshold: f64,
    /// `true` when the property demands `measured ≥ threshold` rather than `≤`.
    pub at_least: bool,
}

impl CheckResult {
    fn at_most(name: impl Into<String>, measured: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            measured,
            threshold,
            at_least: false,
        }
    }

    pub fn passed(&self) -> bool {
        if self.at_least {
            self.measured >= self.threshold
        } else {
            self.measured <= self.threshold
        }
    }
}

/// Which constructor an orthogonality sweep exercises.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OrthoKind {
    Cayley,
    Butterfly,
    Unitary,
    Polar,
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn pow2_dim(r: &mut ChaCha8Rng) -> usize {
    1 << r.gen_range(1..=6)
}

fn skew(n: usize, r: &mut ChaCha8Rng) -> Matrix {
    let mut q = Matrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = r.gen_range(-1.0..1.0);
            q[(i, j)] = v;
            q[(j, i)] = -v;
        }
    }
    q
}

fn random_unitary_param(n: usize, r: &mut ChaCha8Rng) -> Result<UnitaryParam> {
    let mut p = UnitaryParam::init(n, r)?;
    for th in p.d1.iter_mut().chain(&mut p.d2).chain(&mut p.d3) {
        *th = r.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
    }
    p.refresh()?;
    Ok(p)
}

/// Largest `‖XᴴX − I‖_F` over `instances` random outputs with dimensions in
/// 2–64 (powers of two where the construction needs them).
pub fn orthogonality_sweep(kind: OrthoKind, instances: usize, seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let res = match kind {
            OrthoKind::Cayley => {
                let n = r.gen_range(2..=64);
                let eta = r.gen_range(0.01..2.0);
                cayley_orthonormal(&skew(n, &mut r), eta)?.orthogonality_residual()
            }
            OrthoKind::Butterfly => {
                let n = pow2_dim(&mut r);
                let m = r.gen_range(1..=n.ilog2() as usize);
                let mut st = BoftState::butterfly(n, m)?;
                for lv in &mut st.levels {
                    for a in &mut lv.angles {
                        *a = r.gen_range(-3.2..3.2);
                    }
                }
                butterfly_compose(&st)?.orthogonality_residual()
            }
            OrthoKind::Unitary => {
                let n = pow2_dim(&mut r);
                unitary_compose(&random_unitary_param(n, &mut r)?)?.unitarity_residual()
            }
            OrthoKind::Polar => {
                let n = r.gen_range(2..=64);
                polar_project(&Matrix::random_normal(n, n, 1.0, &mut r))?.orthogonality_residual()
            }
        };
        worst = worst.max(res);
    }
    Ok(worst)
}

/// `‖UᴴU − I‖_F` after `steps` exponential-map updates with random
/// skew-Hermitian directions, re-projecting every `interval` steps.
pub fn unitary_drift(n: usize, steps: usize, interval: usize, eta: f64, seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let mut u = random_unitary_param(n, &mut r)?.u().clone();
    for k in 1..=steps {
        let g = CMatrix::random_normal(n, n, 1.0, &mut r);
        let b = skew_hermitian_grad(&g, &u)?;
        u = unitary_exp_update(&u, &b, eta)?;
        if k % interval == 0 {
            u = unitary_renormalize(&u)?;
        }
    }
    Ok(u.unitarity_residual())
}

fn tiny_cfg(targets: Vec<Target>) -> ModelConfig {
    ModelConfig {
        n_layers: 1,
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        vocab: 6,
        seq_len: 5,
        adapter_targets: targets,
    }
}

/// Adapter modes covered by the gradient check.
pub const GRADCHECK_MODES: [&str; 7] = [
    "full",
    "lora",
    "butterfly",
    "cayley",
    "hybrid",
    "unitary",
    "unitary_structured",
];

fn perturbed_lora(d_out: usize, d_in: usize, r: &mut ChaCha8Rng) -> Result<LoraAdapter> {
    let mut l = LoraAdapter::init(d_out, d_in, 2, 4.0, 0.3, r)?;
    l.b = Matrix::random_uniform(2, d_in, 0.3, r);
    Ok(l)
}

fn random_cayley(dim: usize, r: &mut ChaCha8Rng) -> Result<BoftState> {
    let mut st = BoftState::cayley(dim, 0.2)?;
    let g: Vec<f64> = st.generator().iter().map(|_| r.gen_range(-0.5..0.5)).collect();
    st.set_generator(&g)?;
    Ok(st)
}

/// A one-layer `d_model = 8` model with every adapter of `mode` moved away
/// from its zero-delta initialisation, plus a small batch with one masked
/// position per example.
pub fn gradcheck_fixture(mode: &str, seed: u64) -> Result<(Model, Vec<Example>)> {
    let mut r = rng(seed);
    let targets = vec![Target::AttnQ, Target::AttnV, Target::AttnO];
    let cfg = tiny_cfg(if mode == "full" { vec![] } else { targets.clone() });
    let mut model = Model::random(cfg.clone(), &mut r)?;
    if mode != "full" {
        for &t in &targets {
            let (d_out, d_in) = cfg.target_shape(t);
            let ad = match mode {
                "lora" => Adapter::Lora(perturbed_lora(d_out, d_in, &mut r)?),
                "butterfly" => {
                    let mut st = BoftState::butterfly(d_out, 3)?;
                    for lv in &mut st.levels {
                        for a in &mut lv.angles {
                            *a = r.gen_range(-1.0..1.0);
                        }
                    }
                    Adapter::Boft(st)
                }
                "cayley" => Adapter::Boft(random_cayley(d_out, &mut r)?),
                "hybrid" => {
                    let mut lora = perturbed_lora(d_out, d_in, &mut r)?;
                    lora.anchor = Some(Matrix::random_uniform(d_out, d_in, 0.1, &mut r));
                    let mut h = HybridState::new(lora, random_cayley(d_out, &mut r)?, 0.01, 0.01, None)?;
                    h.lambda_last = 0.3;
                    Adapter::Hybrid(h)
                }
                "unitary" | "unitary_structured" => Adapter::Unitary {
                    param: random_unitary_param(d_out / 2, &mut r)?,
                    structured: mode == "unitary_structured",
                },
                other => return Err(crate::Error::invalid(format!("unknown gradient-check mode {other}"))),
            };
            model.attach(0, t, ad)?;
        }
    }
    let batch = (0..3)
        .map(|_| {
            let tokens: Vec<usize> = (0..cfg.seq_len).map(|_| r.gen_range(0..cfg.vocab)).collect();
            let targets = tokens
                .iter()
                .enumerate()
                .map(|(i, &t)| if i == 1 { None } else { Some((t + i) % cfg.vocab) })
                .collect();
            Example { tokens, targets }
        })
        .collect();
    Ok((model, batch))
}

/// Relative error between analytic and central-difference gradients.
pub fn gradient_check(mode: &str, seed: u64) -> Result<f64> {
    let (model, batch) = gradcheck_fixture(mode, seed)?;
    model.gradient_check(&batch, mode == "full", DEFAULT_EPS)
}

/// Backpropagate a random cotangent through `depth` random unitary maps and,
/// as a control, through `depth` Gaussian maps with unit-variance entries.
/// Returns the relative norm change of the former and the norm ratio
/// (≥ 1, larger over smaller) of the latter.
pub fn isometry(n: usize, depth: usize, seed: u64) -> Result<(f64, f64)> {
    let mut r = rng(seed);
    let g0: Vec<C64> = (0..n).map(|_| C64::new(r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0))).collect();
    let n0 = cnorm2(&g0);
    let mut g = g0.clone();
    for _ in 0..depth {
        let p = random_unitary_param(n, &mut r)?;
        g = p.u().adjoint().matvec(&g)?;
    }
    let unitary = (cnorm2(&g) - n0).abs() / n0;
    let mut h = g0;
    for _ in 0..depth {
        h = CMatrix::random_normal(n, n, 1.0, &mut r).adjoint().matvec(&h)?;
    }
    let nh = cnorm2(&h);
    let ratio = if nh > n0 { nh / n0 } else { n0 / nh };
    Ok((unitary, ratio))
}

/// Largest relative gap between `‖G − A₀B₀‖²_F` and the discarded singular
/// energy `Σ_{i>r} σᵢ²` of a full SVD, over `trials` random 6×4 matrices and
/// `r ∈ {1, 2, 3}`.
pub fn eckart_young(trials: usize, seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let g = Matrix::random_normal(6, 4, 1.0, &mut r);
        let full = svd(&g)?;
        for rank in 1..=3 {
            let (a0, b0) = lora_ga_init(&g, rank)?;
            let err = g.sub(&a0.matmul(&b0)?)?.frobenius_norm().powi(2);
            let tail: f64 = full.s[rank..].iter().map(|s| s * s).sum();
            worst = worst.max((err - tail).abs() / tail.max(f64::MIN_POSITIVE));
        }
    }
    Ok(worst)
}

/// Largest ratio of counted scalar operations between consecutive
/// dimensions `8, 16, …, 256` for the structured mat-vec of `kind`
/// (`Butterfly` with `log₂ n` levels, or `Unitary`).
pub fn op_count_growth(kind: OrthoKind, seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let mut counts = Vec::new();
    for k in 3..=8 {
        let n = 1usize << k;
        let x: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
        let ops = match kind {
            OrthoKind::Butterfly => {
                let st = BoftState::butterfly(n, k)?;
                counter::measure(|| butterfly_matvec(&st, &x)).1
            }
            OrthoKind::Unitary => {
                let p = random_unitary_param(n, &mut r)?;
                let xc: Vec<C64> = x.iter().map(|&v| C64::new(v, 0.0)).collect();
                counter::measure(|| unitary_matvec(&p, &xc)).1
            }
            _ => return Err(crate::Error::invalid("op counts exist for butterfly and unitary only")),
        };
        counts.push(ops as f64);
    }
    Ok(counts.windows(2).map(|w| w[1] / w[0]).fold(0.0, f64::max))
}

/// Largest violation of `λ ∈ [0, 1]` (NaN counts as infinite) over random
/// gradient-norm pairs, zeros included.
pub fn lambda_range(trials: usize, seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let mut worst = (hybrid_lambda(0.0, 0.0)? - 0.5).abs();
    for i in 0..trials {
        let a = if i % 5 == 0 { 0.0 } else { r.gen_range(0.0..10.0) * 10f64.powi(r.gen_range(-8..8)) };
        let b = if i % 7 == 0 { 0.0 } else { r.gen_range(0.0..10.0) * 10f64.powi(r.gen_range(-8..8)) };
        let l = hybrid_lambda(a, b)?;
        let v = if l.is_nan() { f64::INFINITY } else { (-l).max(l - 1.0).max(0.0) };
        worst = worst.max(v);
    }
    Ok(worst)
}

/// Largest `‖ΔW‖_F / (λ‖W₀‖_F) − 1` (clipped at 0) after clamping
/// random oversized adapters.
pub fn clamp_bound(trials: usize, seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let (d_out, d_in, rank) = (r.gen_range(2..10), r.gen_range(2..10), r.gen_range(1..3));
        let lambda = r.gen_range(0.01..0.5);
        let a = Matrix::random_normal(d_out, rank, 3.0, &mut r);
        let b = Matrix::random_normal(rank, d_in, 3.0, &mut r);
        let w0 = Matrix::random_normal(d_out, d_in, 1.0, &mut r);
        let (ad, _) = LoraAdapter::new(a, b, 2.0 * rank as f64, Some(lambda))?.clamp(&w0)?;
        let ratio = ad.delta().frobenius_norm() / (lambda * w0.frobenius_norm());
        worst = worst.max(ratio - 1.0);
    }
    Ok(worst)
}

/// 0 when a random hybrid model's snapshot reads back equal and re-encodes
/// to the same bytes, 1 otherwise.
pub fn snapshot_round_trip(seed: u64) -> Result<f64> {
    let (model, _) = gradcheck_fixture("hybrid", seed)?;
    let mut buf = Vec::new();
    write_snapshot(&mut buf, &model.cfg, &model.to_tensors())?;
    let (cfg, tensors) = read_snapshot(&mut buf.as_slice())?;
    let back = Model::from_tensors(cfg, &tensors)?;
    let mut again = Vec::new();
    write_snapshot(&mut again, &back.cfg, &back.to_tensors())?;
    Ok(if back == model && again == buf { 0.0 } else { 1.0 })
}

/// Largest `|ifft(fft(x)) − x|` and norm change of the unitary FFT.
pub fn fft_round_trip(trials: usize, seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let n = pow2_dim(&mut r);
        let x: Vec<C64> = (0..n).map(|_| C64::new(r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0))).collect();
        let y = fft_apply(&x)?;
        let back = ifft_apply(&y)?;
        let err = x.iter().zip(&back).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        worst = worst.max(err).max((cnorm2(&y) - cnorm2(&x)).abs());
    }
    Ok(worst)
}

/// Largest relative reconstruction error `‖UΣVᵀ − G‖_F / ‖G‖_F`.
pub fn svd_reconstruction(trials: usize, seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let g = Matrix::random_normal(r.gen_range(1..20), r.gen_range(1..20), 1.0, &mut r);
        let err = svd(&g)?.reconstruct().sub(&g)?.frobenius_norm() / g.frobenius_norm();
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Largest unitarity residual of `exp(B)` for random skew-Hermitian `B`.
pub fn exp_of_skew_is_unitary(trials: usize, seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let n = r.gen_range(1..24);
        let scale = 10f64.powi(r.gen_range(-3..2));
        let b = CMatrix::random_skew_hermitian(n, scale, &mut r);
        worst = worst.max(matrix_exp(&b)?.unitarity_residual());
    }
    Ok(worst)
}

/// Run every property. Failures to evaluate count as infinite residuals.
pub fn run_checks(seed: u64) -> Vec<CheckResult> {
    fn val(r: Result<f64>) -> f64 {
        r.unwrap_or(f64::INFINITY)
    }
    let mut out = vec![
        CheckResult::at_most(
            "cayley_orthonormal orthogonality",
            val(orthogonality_sweep(OrthoKind::Cayley, 100, seed)),
            1e-10,
        ),
        CheckResult::at_most(
            "butterfly_compose orthogonality",
            val(orthogonality_sweep(OrthoKind::Butterfly, 100, seed)),
            1e-10,
        ),
        CheckResult::at_most(
            "unitary_compose unitarity",
            val(orthogonality_sweep(OrthoKind::Unitary, 100, seed)),
            1e-10,
        ),
        CheckResult::at_most(
            "polar_project orthogonality",
            val(orthogonality_sweep(OrthoKind::Polar, 100, seed)),
            1e-10,
        ),
        CheckResult::at_most(
            "exp-map drift (1000 steps, renormalise every 50)",
            val(unitary_drift(16, 1000, 50, 0.05, seed)),
            1e-8,
        ),
        CheckResult::at_most("matrix_exp of skew-Hermitian is unitary", val(exp_of_skew_is_unitary(50, seed)), 1e-10),
    ];
    for mode in GRADCHECK_MODES {
        out.push(CheckResult::at_most(
            format!("gradient check ({mode})"),
            val(gradient_check(mode, seed)),
            1e-4,
        ));
    }
    let (iso, control) = isometry(16, 32, seed).unwrap_or((f64::INFINITY, 0.0));
    out.push(CheckResult::at_most("unitary stack preserves cotangent norm", iso, 1e-6));
    out.push(CheckResult {
        name: "gaussian control stack distorts cotangent norm".into(),
        measured: control,
        threshold: 10.0,
        at_least: true,
    });
    out.extend([
        CheckResult::at_most("lora_ga_init Eckart-Young optimality", val(eckart_young(50, seed)), 1e-8),
        CheckResult::at_most(
            "butterfly_matvec cost growth per doubling",
            val(op_count_growth(OrthoKind::Butterfly, seed)),
            2.5,
        ),
        CheckResult::at_most(
            "unitary_matvec cost growth per doubling",
            val(op_count_growth(OrthoKind::Unitary, seed)),
            2.5,
        ),
        CheckResult::at_most("hybrid lambda stays in [0, 1]", val(lambda_range(1000, seed)), 0.0),
        CheckResult::at_most("lora_clamp respects the norm bound", val(clamp_bound(200, seed)), 1e-12),
        CheckResult::at_most("unitary FFT round trip", val(fft_round_trip(50, seed)), 1e-12),
        CheckResult::at_most("svd reconstruction", val(svd_reconstruction(50, seed)), 1e-12),
        CheckResult::at_most("snapshot round trip is bit-exact", val(snapshot_round_trip(seed)), 0.0),
    ]);
    out
}
