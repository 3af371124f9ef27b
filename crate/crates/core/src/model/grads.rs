//! Batched loss and gradients, and the chain rule from effective weights
//! back to adapter parameters.

use std::collections::BTreeMap;

use crate::adapters::unitary::grad_u_from_realified;
use crate::adapters::{cayley_q_grad, BoftForm, UnitaryGrads};
use crate::error::{Error, Result};
use crate::model::transformer::{self, cross_entropy, Example, ForwardCache};
use crate::model::{Adapter, BaseWeights, LayerBase, Model, ModelConfig, Target};
use crate::numerics::{finite_diff_grad, relative_error, CMatrix, Matrix, C64};
use crate::par;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerBaseGrads {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

impl LayerBaseGrads {
    pub fn get(&self, t: Target) -> &Matrix {
        match t {
            Target::AttnQ => &self.wq,
            Target::AttnK => &self.wk,
            Target::AttnV => &self.wv,
            Target::AttnO => &self.wo,
            Target::FfIn => &self.w1,
            Target::FfOut => &self.w2,
        }
    }

    fn norm_sq(&self) -> f64 {
        let m: f64 = Target::ALL.iter().map(|&t| self.get(t).frobenius_norm().powi(2)).sum();
        m + self.b1.iter().chain(&self.b2).map(|v| v * v).sum::<f64>()
    }
}

/// Gradients with the same layout as [`BaseWeights`].
#[derive(Debug, Clone, PartialEq)]
pub struct BaseGrads {
    pub tok_emb: Matrix,
    pub pos_emb: Matrix,
    pub layers: Vec<LayerBaseGrads>,
    pub head: Matrix,
}

impl BaseGrads {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let z = BaseWeights::zeros(cfg);
        Self {
            tok_emb: z.tok_emb,
            pos_emb: z.pos_emb,
            layers: z
                .layers
                .into_iter()
                .map(|l| LayerBaseGrads {
                    wq: l.wq,
                    wk: l.wk,
                    wv: l.wv,
                    wo: l.wo,
                    w1: l.w1,
                    b1: l.b1,
                    w2: l.w2,
                    b2: l.b2,
                })
                .collect(),
            head: z.head,
        }
    }

    fn add_assign(&mut self, o: &BaseGrads) {
        fn acc(a: &mut Matrix, b: &Matrix) {
            for (x, y) in a.as_mut_slice().iter_mut().zip(b.as_slice()) {
                *x += y;
            }
        }
        fn accv(a: &mut [f64], b: &[f64]) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        acc(&mut self.tok_emb, &o.tok_emb);
        acc(&mut self.pos_emb, &o.pos_emb);
        acc(&mut self.head, &o.head);
        for (a, b) in self.layers.iter_mut().zip(&o.layers) {
            acc(&mut a.wq, &b.wq);
            acc(&mut a.wk, &b.wk);
            acc(&mut a.wv, &b.wv);
            acc(&mut a.wo, &b.wo);
            acc(&mut a.w1, &b.w1);
            acc(&mut a.w2, &b.w2);
            accv(&mut a.b1, &b.b1);
            accv(&mut a.b2, &b.b2);
        }
    }

    /// Norm of the gradients belonging to `layer`.
    pub fn layer_norm(&self, layer: usize) -> f64 {
        self.layers[layer].norm_sq().sqrt()
    }

    pub fn norm(&self) -> f64 {
        let outer = [&self.tok_emb, &self.pos_emb, &self.head]
            .iter()
            .map(|m| m.frobenius_norm().powi(2))
            .sum::<f64>();
        (outer + self.layers.iter().map(LayerBaseGrads::norm_sq).sum::<f64>()).sqrt()
    }

    /// Flattened in [`Model::trainable_params`] full-mode order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend_from_slice(self.tok_emb.as_slice());
        out.extend_from_slice(self.pos_emb.as_slice());
        for l in &self.layers {
            for t in Target::ALL {
                out.extend_from_slice(l.get(t).as_slice());
            }
            out.extend_from_slice(&l.b1);
            out.extend_from_slice(&l.b2);
        }
        out.extend_from_slice(self.head.as_slice());
        out
    }
}

impl BaseWeights {
    /// Plain SGD on every base tensor: `W ← W − η·∇W`.
    pub fn sgd_step(&mut self, g: &BaseGrads, eta: f64) -> Result<()> {
        self.tok_emb.axpy(-eta, &g.tok_emb)?;
        self.pos_emb.axpy(-eta, &g.pos_emb)?;
        self.head.axpy(-eta, &g.head)?;
        for (w, d) in self.layers.iter_mut().zip(&g.layers) {
            for t in Target::ALL {
                w.get_mut(t).axpy(-eta, d.get(t))?;
            }
            for (x, y) in w.b1.iter_mut().zip(&d.b1).chain(w.b2.iter_mut().zip(&d.b2)) {
                *x -= eta * y;
            }
        }
        Ok(())
    }
}

/// Parameter gradients of one adapter.
#[derive(Debug, Clone, PartialEq)]
pub enum AdapterGrad {
    Lora { a: Matrix, b: Matrix },
    /// Per-level angle gradients.
    Butterfly(Vec<Vec<f64>>),
    /// `∂L/∂Q` over the full matrix; the generator gradient is `G − Gᵀ`.
    Cayley(Matrix),
    /// Branch gradients, i.e. those of each component's delta taken with
    /// unit weight, together with the `λ` of the forward pass. The true
    /// gradients are `λ·(a, b)` and `(1 − λ)·q`.
    Hybrid { a: Matrix, b: Matrix, q: Matrix, lambda: f64 },
    /// `∂L/∂Re U + i·∂L/∂Im U`, plus factor gradients in structured mode.
    Unitary { grad_u: CMatrix, structured: Option<UnitaryGrads> },
}

fn generator_grad(g: &Matrix) -> Vec<f64> {
    let n = g.rows();
    let mut out = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            out.push(g[(i, j)] - g[(j, i)]);
        }
    }
    out
}

fn frob_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

impl AdapterGrad {
    /// True loss gradient flattened in [`Model::trainable_params`] order.
    pub fn flatten(&self) -> Vec<f64> {
        match self {
            AdapterGrad::Lora { a, b } => [a.as_slice(), b.as_slice()].concat(),
            AdapterGrad::Butterfly(levels) => levels.concat(),
            AdapterGrad::Cayley(g) => generator_grad(g),
            AdapterGrad::Hybrid { a, b, q, lambda } => {
                let mut out: Vec<f64> = a
                    .as_slice()
                    .iter()
                    .chain(b.as_slice())
                    .map(|v| lambda * v)
                    .collect();
                out.extend(generator_grad(q).into_iter().map(|v| (1.0 - lambda) * v));
                out
            }
            AdapterGrad::Unitary { grad_u, structured } => match structured {
                Some(g) => {
                    let mut out = [g.d1.as_slice(), &g.d2, &g.d3].concat();
                    for z in g.r1.iter().chain(&g.r2) {
                        out.push(z.re);
                        out.push(z.im);
                    }
                    out
                }
                None => grad_u.as_slice().iter().flat_map(|z| [z.re, z.im]).collect(),
            },
        }
    }

    /// Norm of the low-rank part, `√(‖∇A‖² + ‖∇B‖²)`, branch-wise for hybrid.
    pub fn lora_norm(&self) -> Option<f64> {
        match self {
            AdapterGrad::Lora { a, b } | AdapterGrad::Hybrid { a, b, .. } => {
                Some((frob_sq(a.as_slice()) + frob_sq(b.as_slice())).sqrt())
            }
            _ => None,
        }
    }

    /// Norm of the orthogonal part: angle gradients, or `‖∇Q‖_F` over the
    /// full matrix for Cayley generators (branch-wise for hybrid).
    pub fn boft_norm(&self) -> Option<f64> {
        match self {
            AdapterGrad::Butterfly(l) => Some(l.iter().map(|v| frob_sq(v)).sum::<f64>().sqrt()),
            AdapterGrad::Cayley(q) | AdapterGrad::Hybrid { q, .. } => Some(q.frobenius_norm()),
            _ => None,
        }
    }

    /// Norm of the true gradient.
    pub fn norm(&self) -> f64 {
        frob_sq(&self.flatten()).sqrt()
    }
}

/// All trainable gradients for one batch. `base` is present only under full
/// fine-tuning; adapter modes never expose frozen-weight gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub base: Option<BaseGrads>,
    pub adapters: Vec<BTreeMap<Target, AdapterGrad>>,
}

impl Grads {
    pub fn flatten(&self) -> Vec<f64> {
        match &self.base {
            Some(b) => b.flatten(),
            None => self
                .adapters
                .iter()
                .flat_map(|m| m.values())
                .flat_map(AdapterGrad::flatten)
                .collect(),
        }
    }

    pub fn layer_norm(&self, layer: usize) -> f64 {
        match &self.base {
            Some(b) => b.layer_norm(layer),
            None => self.adapters[layer]
                .values()
                .map(|g| g.norm().powi(2))
                .sum::<f64>()
                .sqrt(),
        }
    }

    pub fn norm(&self) -> f64 {
        frob_sq(&self.flatten()).sqrt()
    }
}

impl Model {
    pub fn forward(&self, tokens: &[usize]) -> Result<(Matrix, ForwardCache)> {
        let eff = self.effective_layers()?;
        transformer::forward(&self.cfg, &self.base, &eff, tokens)
    }

    /// Logits for every sequence, in input order.
    pub fn forward_batch(&self, batch: &[Vec<usize>]) -> Result<Vec<Matrix>> {
        let eff = self.effective_layers()?;
        par::map(batch, |toks| {
            transformer::forward(&self.cfg, &self.base, &eff, toks).map(|(l, _)| l)
        })
        .into_iter()
        .collect()
    }

    /// Mean cross-entropy over all non-masked positions of the batch.
    pub fn loss(&self, batch: &[Example]) -> Result<f64> {
        let eff = self.effective_layers()?;
        let parts = par::map(batch, |ex| -> Result<(f64, usize)> {
            let (logits, _) = transformer::forward(&self.cfg, &self.base, &eff, &ex.tokens)?;
            let (l, n, _) = cross_entropy(&logits, &ex.targets)?;
            Ok((l, n))
        });
        let mut total = 0.0;
        let mut count = 0;
        for p in parts {
            let (l, n) = p?;
            total += l;
            count += n;
        }
        Ok(if count == 0 { 0.0 } else { total / count as f64 })
    }

    /// Mean loss and its gradient with respect to every effective weight.
    pub fn weight_grads(&self, batch: &[Example]) -> Result<(f64, BaseGrads)> {
        let eff = self.effective_layers()?;
        let count: usize = batch.iter().map(Example::counted).sum();
        if count == 0 {
            return Ok((0.0, BaseGrads::zeros(&self.cfg)));
        }
        let inv = 1.0 / count as f64;
        let parts = par::map(batch, |ex| -> Result<(f64, BaseGrads)> {
            let (logits, cache) = transformer::forward(&self.cfg, &self.base, &eff, &ex.tokens)?;
            let (l, _, dl) = cross_entropy(&logits, &ex.targets)?;
            let g = transformer::backward(&self.cfg, &self.base, &eff, &cache, &dl.scale(inv))?;
            Ok((l, g))
        });
        let mut total = 0.0;
        let mut acc = BaseGrads::zeros(&self.cfg);
        for p in parts {
            let (l, g) = p?;
            total += l;
            acc.add_assign(&g);
        }
        Ok((total * inv, acc))
    }

    /// Mean loss and trainable gradients: all base weights when `full`,
    /// otherwise adapter parameters only.
    pub fn grads(&self, batch: &[Example], full: bool) -> Result<(f64, Grads)> {
        let (loss, wg) = self.weight_grads(batch)?;
        let adapters = self.adapter_grads(&wg)?;
        let base = if full { Some(wg) } else { None };
        Ok((loss, Grads { base, adapters }))
    }

    /// Chain rule from effective-weight gradients to adapter parameters.
    pub fn adapter_grads(&self, wg: &BaseGrads) -> Result<Vec<BTreeMap<Target, AdapterGrad>>> {
        let mut out = Vec::with_capacity(self.cfg.n_layers);
        for (l, adapters) in self.adapters.iter().enumerate() {
            let mut layer = BTreeMap::new();
            for (&t, ad) in adapters {
                let g = wg.layers[l].get(t);
                let w0 = self.base.layers[l].get(t);
                let grad = match ad {
                    Adapter::Lora(lora) => {
                        let (a, b) = lora.factor_grads(g)?;
                        AdapterGrad::Lora { a, b }
                    }
                    Adapter::Boft(st) => {
                        // W = M·W₀ for both forms, so ∂L/∂M = G·W₀ᵀ
                        let gm = g.matmul_t(w0)?;
                        match st.form {
                            BoftForm::Butterfly => AdapterGrad::Butterfly(st.level_grads(&gm)?),
                            BoftForm::Cayley => {
                                AdapterGrad::Cayley(cayley_q_grad(&st.q(), st.eta_boft, &gm)?)
                            }
                        }
                    }
                    Adapter::Hybrid(h) => {
                        let (a, b) = h.lora.factor_grads(g)?;
                        let gm = g.matmul_t(w0)?;
                        let q = cayley_q_grad(&h.boft.q(), h.boft.eta_boft, &gm)?;
                        AdapterGrad::Hybrid {
                            a,
                            b,
                            q,
                            lambda: h.lambda_last,
                        }
                    }
                    Adapter::Unitary { param, structured } => {
                        let grad_u = grad_u_from_realified(g, param.dim)?;
                        let s = if *structured {
                            Some(param.param_grads(&grad_u)?)
                        } else {
                            None
                        };
                        AdapterGrad::Unitary { grad_u, structured: s }
                    }
                };
                layer.insert(t, grad);
            }
            out.push(layer);
        }
        Ok(out)
    }

    /// Largest norm-wise relative error between the analytic gradient and
    /// central differences, taken per adapter (or over all base weights when
    /// `full`).
    pub fn gradient_check(&self, batch: &[Example], full: bool, eps: f64) -> Result<f64> {
        let (_, grads) = self.grads(batch, full)?;
        let analytic = grads.flatten();
        let p0 = self.trainable_params(full);
        let mut probe = self.clone();
        let numeric = finite_diff_grad(
            |p| {
                probe.set_trainable_params(full, p).expect("same layout");
                probe.loss(batch).unwrap_or(f64::NAN)
            },
            &p0,
            eps,
        )?;
        let blocks: Vec<usize> = if full {
            vec![analytic.len()]
        } else {
            grads
                .adapters
                .iter()
                .flat_map(|m| m.values())
                .map(|g| g.flatten().len())
                .collect()
        };
        let mut worst: f64 = 0.0;
        let mut off = 0;
        for len in blocks {
            let r = off..off + len;
            worst = worst.max(relative_error(&analytic[r.clone()], &numeric[r], 1e-8));
            off += len;
        }
        Ok(worst)
    }

    /// Every trainable scalar in a fixed order: all base weights when `full`,
    /// otherwise the adapter parameters layer by layer, target by target.
    pub fn trainable_params(&self, full: bool) -> Vec<f64> {
        if full {
            let b = &self.base;
            let mut out = Vec::new();
            out.extend_from_slice(b.tok_emb.as_slice());
            out.extend_from_slice(b.pos_emb.as_slice());
            for l in &b.layers {
                for t in Target::ALL {
                    out.extend_from_slice(l.get(t).as_slice());
                }
                out.extend_from_slice(&l.b1);
                out.extend_from_slice(&l.b2);
            }
            out.extend_from_slice(b.head.as_slice());
            return out;
        }
        let mut out = Vec::new();
        for ad in self.adapters.iter().flat_map(|m| m.values()) {
            match ad {
                Adapter::Lora(l) => {
                    out.extend_from_slice(l.a.as_slice());
                    out.extend_from_slice(l.b.as_slice());
                }
                Adapter::Boft(st) => match st.form {
                    BoftForm::Butterfly => {
                        for lv in &st.levels {
                            out.extend_from_slice(&lv.angles);
                        }
                    }
                    BoftForm::Cayley => out.extend_from_slice(st.generator()),
                },
                Adapter::Hybrid(h) => {
                    out.extend_from_slice(h.lora.a.as_slice());
                    out.extend_from_slice(h.lora.b.as_slice());
                    out.extend_from_slice(h.boft.generator());
                }
                Adapter::Unitary { param, structured } => {
                    if *structured {
                        out.extend_from_slice(&param.d1);
                        out.extend_from_slice(&param.d2);
                        out.extend_from_slice(&param.d3);
                        for z in param.r1.iter().chain(&param.r2) {
                            out.push(z.re);
                            out.push(z.im);
                        }
                    } else {
                        out.extend(param.u().as_slice().iter().flat_map(|z| [z.re, z.im]));
                    }
                }
            }
        }
        out
    }

    /// Inverse of [`Model::trainable_params`].
    pub fn set_trainable_params(&mut self, full: bool, p: &[f64]) -> Result<()> {
        let expected = self.trainable_params(full).len();
        if p.len() != expected {
            return Err(Error::invalid(format!(
                "expected {expected} trainable values, got {}",
                p.len()
            )));
        }
        let mut it = p.iter().copied();
        let mut fill = |dst: &mut [f64]| {
            for v in dst.iter_mut() {
                *v = it.next().expect("length checked");
            }
        };
        if full {
            let b = &mut self.base;
            fill(b.tok_emb.as_mut_slice());
            fill(b.pos_emb.as_mut_slice());
            for l in &mut b.layers {
                for t in Target::ALL {
                    fill(LayerBase::get_mut(l, t).as_mut_slice());
                }
                fill(&mut l.b1);
                fill(&mut l.b2);
            }
            fill(b.head.as_mut_slice());
            return Ok(());
        }
        for ad in self.adapters.iter_mut().flat_map(|m| m.values_mut()) {
            match ad {
                Adapter::Lora(l) => {
                    fill(l.a.as_mut_slice());
                    fill(l.b.as_mut_slice());
                }
                Adapter::Boft(st) => match st.form {
                    BoftForm::Butterfly => {
                        for lv in &mut st.levels {
                            fill(&mut lv.angles);
                        }
                    }
                    BoftForm::Cayley => {
                        let mut g = st.generator().to_vec();
                        fill(&mut g);
                        st.set_generator(&g)?;
                    }
                },
                Adapter::Hybrid(h) => {
                    fill(h.lora.a.as_mut_slice());
                    fill(h.lora.b.as_mut_slice());
                    let mut g = h.boft.generator().to_vec();
                    fill(&mut g);
                    h.boft.set_generator(&g)?;
                }
                Adapter::Unitary { param, structured } => {
                    let n = param.dim;
                    if *structured {
                        fill(&mut param.d1);
                        fill(&mut param.d2);
                        fill(&mut param.d3);
                        let mut r = vec![0.0; 4 * n];
                        fill(&mut r);
                        for i in 0..n {
                            param.r1[i] = C64::new(r[2 * i], r[2 * i + 1]);
                            param.r2[i] = C64::new(r[2 * n + 2 * i], r[2 * n + 2 * i + 1]);
                        }
                        param.refresh()?;
                    } else {
                        let mut r = vec![0.0; 2 * n * n];
                        fill(&mut r);
                        let u = CMatrix::from_fn(n, n, |i, j| {
                            C64::new(r[2 * (i * n + j)], r[2 * (i * n + j) + 1])
                        });
                        param.set_u(u)?;
                    }
                }
            }
        }
        Ok(())
    }
}
