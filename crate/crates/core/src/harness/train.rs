//! Training loops for the six fine-tuning methods.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adapters::{
    lora_ga_init, skew_hermitian_grad, unitary_exp_update, unitary_renormalize, BoftForm,
    BoftState, ClampOutcome, HybridState, LoraAdapter, UnitaryParam,
};
use crate::error::{Error, Result};
use crate::model::{Adapter, AdapterGrad, BaseWeights, Example, Grads, Model, ModelConfig};
use crate::numerics::{Matrix, C64};

use super::task::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    Full,
    Lora,
    Boft,
    LoraGa,
    Urnn,
    Hybrid,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Full,
        Method::Lora,
        Method::Boft,
        Method::LoraGa,
        Method::Urnn,
        Method::Hybrid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Full => "full",
            Method::Lora => "lora",
            Method::Boft => "boft",
            Method::LoraGa => "lora_ga",
            Method::Urnn => "urnn",
            Method::Hybrid => "hybrid",
        }
    }

    fn has_lora(self) -> bool {
        matches!(self, Method::Lora | Method::LoraGa | Method::Hybrid)
    }

    fn has_boft(self) -> bool {
        matches!(self, Method::Boft | Method::Hybrid)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown method `{s}` (expected full, lora, boft, lora_ga, urnn or hybrid)"))
    }
}

/// How the unitary sublayers are updated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnitaryUpdate {
    /// `U ← exp(−ηB)·U` on the full matrix, re-projected every
    /// `renorm_interval` steps.
    ExpMap,
    /// SGD on the phases and reflectors of the structured factorisation.
    Structured,
}

impl UnitaryUpdate {
    pub fn name(self) -> &'static str {
        match self {
            UnitaryUpdate::ExpMap => "expmap",
            UnitaryUpdate::Structured => "structured",
        }
    }
}

impl FromStr for UnitaryUpdate {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "expmap" => Ok(UnitaryUpdate::ExpMap),
            "structured" => Ok(UnitaryUpdate::Structured),
            _ => Err(format!("unknown unitary update `{s}` (expected expmap or structured)")),
        }
    }
}

/// Which hybrid branch a hook applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Lora,
    Boft,
}

/// Test hooks; never set by configuration files.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Hooks {
    /// Zero one hybrid branch's gradients before `λ` is computed.
    pub force_zero: Option<Branch>,
    /// Poison a parameter of the last layer before this (0-based) step.
    pub nan_at_step: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub method: Method,
    pub epochs: usize,
    pub batch_size: usize,
    pub eta_lora: f64,
    pub eta_boft: f64,
    pub eta_full: f64,
    pub eta_urnn: f64,
    pub rank: usize,
    pub alpha: f64,
    pub levels: usize,
    /// Norm bound `λ` of the LoRA clamp; `None` disables clamping.
    pub clamp: Option<f64>,
    pub renorm_interval: usize,
    pub lambda_ema: Option<f64>,
    pub boft_form: BoftForm,
    pub unitary_update: UnitaryUpdate,
    /// Record wall time per epoch; when off `wall_ms` is written as 0 so the
    /// metrics file is reproducible byte for byte.
    pub record_wall_time: bool,
    pub hooks: Hooks,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Hybrid,
            epochs: 10,
            batch_size: 16,
            eta_lora: 1e-2,
            eta_boft: 1.0,
            eta_full: 1e-2,
            eta_urnn: 1e-2,
            rank: 16,
            alpha: 32.0,
            levels: 3,
            clamp: None,
            renorm_interval: 50,
            lambda_ema: None,
            boft_form: BoftForm::Butterfly,
            unitary_update: UnitaryUpdate::ExpMap,
            record_wall_time: true,
            hooks: Hooks::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, mcfg: &ModelConfig) -> Result<()> {
        mcfg.validate(self.method == Method::Urnn)?;
        for (name, v) in [
            ("eta_lora", self.eta_lora),
            ("eta_boft", self.eta_boft),
            ("eta_full", self.eta_full),
            ("eta_urnn", self.eta_urnn),
            ("alpha", self.alpha),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!("{name} must be a positive number")));
            }
        }
        if self.batch_size == 0 || self.renorm_interval == 0 {
            return Err(Error::invalid("batch_size and renorm_interval must be at least 1"));
        }
        let smallest = mcfg
            .adapter_targets
            .iter()
            .map(|&t| {
                let (o, i) = mcfg.target_shape(t);
                o.min(i)
            })
            .min()
            .unwrap_or(mcfg.d_model);
        if self.rank == 0 || self.rank > smallest {
            return Err(Error::invalid(format!("rank must lie in 1..={smallest}")));
        }
        let log_d = mcfg.d_model.ilog2() as usize;
        if self.levels == 0 || self.levels > log_d {
            return Err(Error::invalid(format!("levels must lie in 1..=log2(d_model) = {log_d}")));
        }
        let butterfly = self.method == Method::Boft && self.boft_form == BoftForm::Butterfly;
        if butterfly && !mcfg.d_model.is_power_of_two() {
            return Err(Error::invalid("butterfly BOFT needs d_model to be a power of two"));
        }
        if let Some(c) = self.clamp {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::invalid("clamp must be positive"));
            }
        }
        if let Some(b) = self.lambda_ema {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid("lambda_ema must lie in [0, 1)"));
            }
        }
        if self.method != Method::Full && mcfg.adapter_targets.is_empty() {
            return Err(Error::invalid(format!("method {} needs at least one adapter target", self.method)));
        }
        Ok(())
    }
}

/// Closed-form trainable-parameter count of `method` on `mcfg`.
pub fn param_count_formula(cfg: &TrainConfig, mcfg: &ModelConfig) -> usize {
    let per_target = |t| {
        let (d_out, d_in) = mcfg.target_shape(t);
        let lora = cfg.rank * (d_out + d_in);
        let cayley = d_out * (d_out - 1) / 2;
        match cfg.method {
            Method::Full => 0,
            Method::Lora | Method::LoraGa => lora,
            Method::Boft => match cfg.boft_form {
                BoftForm::Butterfly => cfg.levels * d_out / 2,
                BoftForm::Cayley => cayley,
            },
            Method::Hybrid => lora + cayley,
            Method::Urnn => {
                let n = d_out / 2;
                match cfg.unitary_update {
                    UnitaryUpdate::ExpMap => n * n,
                    UnitaryUpdate::Structured => 7 * n,
                }
            }
        }
    };
    match cfg.method {
        Method::Full => mcfg.full_param_count(),
        _ => mcfg.n_layers * mcfg.adapter_targets.iter().map(|&t| per_target(t)).sum::<usize>(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerMetrics {
    pub layer: usize,
    pub g_lora: Option<f64>,
    pub g_boft: Option<f64>,
    pub lambda: Option<f64>,
    pub grad_norm: f64,
    pub param_count: usize,
}

/// One epoch of training. Gradient norms are means over the epoch's steps
/// of the per-step norms; `lambda` is the value held at the end of the epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub method: Method,
    pub layers: Vec<LayerMetrics>,
    pub g_lora: Option<f64>,
    pub g_boft: Option<f64>,
    pub lambda: Option<f64>,
    pub grad_norm: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub wall_ms: f64,
    pub param_count: usize,
}

/// Why a run stopped early.
#[derive(Debug, Clone, PartialEq)]
pub struct AbortRecord {
    pub method: Method,
    pub epoch: usize,
    pub layer: Option<usize>,
    pub reason: String,
}

impl fmt::Display for AbortRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} aborted in epoch {}", self.method, self.epoch)?;
        if let Some(l) = self.layer {
            write!(f, " at layer {l}")?;
        }
        write!(f, ": {}", self.reason)
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub method: Method,
    pub seed: u64,
    pub records: Vec<MetricsRecord>,
    /// Validation loss of the freshly initialised model.
    pub baseline_val_loss: f64,
    pub model: Model,
    pub abort: Option<AbortRecord>,
}

impl RunResult {
    pub fn completed(&self) -> bool {
        self.abort.is_none()
    }

    pub fn last(&self) -> Option<&MetricsRecord> {
        self.records.last()
    }
}

/// Mean loss over `data`; the model is not touched.
pub fn evaluate(model: &Model, data: &[Example]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("evaluate: empty dataset"));
    }
    model.loss(data)
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn first_batch<'a>(cfg: &TrainConfig, train: &'a [Example]) -> &'a [Example] {
    &train[..cfg.batch_size.min(train.len())]
}

/// Frozen base model for `seed`; identical across methods.
pub fn base_model(mcfg: &ModelConfig, seed: u64) -> Result<Model> {
    let base = BaseWeights::random(mcfg, &mut rng_for(seed, 0));
    Model::new(mcfg.clone(), base)
}

/// Base model with the method's adapters attached at their initial state.
/// LoRA-GA and hybrid runs take one gradient pass over the first training
/// batch; hybrid runs also seed `λ` from that batch's branch norms.
pub fn init_model(cfg: &TrainConfig, mcfg: &ModelConfig, train: &[Example], seed: u64) -> Result<Model> {
    cfg.validate(mcfg)?;
    if train.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    let mut model = base_model(mcfg, seed)?;
    let mut rng = rng_for(seed, 1);
    let aligned = if matches!(cfg.method, Method::LoraGa | Method::Hybrid) {
        Some(model.weight_grads(first_batch(cfg, train))?.1)
    } else {
        None
    };
    for layer in 0..mcfg.n_layers {
        for &t in &mcfg.adapter_targets {
            let (d_out, d_in) = mcfg.target_shape(t);
            let ga_factors = || -> Result<LoraAdapter> {
                let g = aligned.as_ref().expect("pre-pass ran").layers[layer].get(t);
                let (a0, b0) = lora_ga_init(g, cfg.rank)?;
                LoraAdapter::anchored(a0, b0, cfg.alpha, cfg.clamp)
            };
            let adapter = match cfg.method {
                Method::Full => continue,
                Method::Lora => {
                    let scale = 1.0 / (d_in as f64).sqrt();
                    let mut l = LoraAdapter::init(d_out, d_in, cfg.rank, cfg.alpha, scale, &mut rng)?;
                    l.clamp_lambda = cfg.clamp;
                    Adapter::Lora(l)
                }
                Method::LoraGa => Adapter::Lora(ga_factors()?),
                Method::Boft => Adapter::Boft(match cfg.boft_form {
                    BoftForm::Butterfly => BoftState::butterfly(d_out, cfg.levels)?,
                    BoftForm::Cayley => BoftState::cayley(d_out, cfg.eta_boft)?,
                }),
                Method::Hybrid => Adapter::Hybrid(HybridState::new(
                    ga_factors()?,
                    BoftState::cayley(d_out, cfg.eta_boft)?,
                    cfg.eta_lora,
                    cfg.eta_boft,
                    cfg.lambda_ema,
                )?),
                Method::Urnn => Adapter::Unitary {
                    param: UnitaryParam::init(d_out / 2, &mut rng)?,
                    structured: cfg.unitary_update == UnitaryUpdate::Structured,
                },
            };
            model.attach(layer, t, adapter)?;
        }
    }
    if cfg.method == Method::Hybrid {
        let (_, mut g) = model.grads(first_batch(cfg, train), false)?;
        apply_force_zero(cfg, &mut g);
        for (layer, per) in g.adapters.iter().enumerate() {
            for (t, ag) in per {
                let (gl, gb) = (ag.lora_norm().unwrap_or(0.0), ag.boft_norm().unwrap_or(0.0));
                if let Some(Adapter::Hybrid(h)) = model.adapters[layer].get_mut(t) {
                    h.lambda_last = crate::adapters::hybrid_lambda(gl, gb)?;
                }
            }
        }
    }
    Ok(model)
}

fn apply_force_zero(cfg: &TrainConfig, g: &mut Grads) {
    let Some(branch) = cfg.hooks.force_zero else { return };
    for ag in g.adapters.iter_mut().flat_map(|m| m.values_mut()) {
        if let AdapterGrad::Hybrid { a, b, q, .. } = ag {
            match branch {
                Branch::Lora => {
                    *a = Matrix::zeros(a.rows(), a.cols());
                    *b = Matrix::zeros(b.rows(), b.cols());
                }
                Branch::Boft => *q = Matrix::zeros(q.rows(), q.cols()),
            }
        }
    }
}

fn param_count_of_layer(model: &Model, layer: usize, full: bool) -> usize {
    if full {
        let lb = &model.base.layers[layer];
        crate::model::Target::ALL.iter().map(|&t| lb.get(t).as_slice().len()).sum::<usize>()
            + lb.b1.len()
            + lb.b2.len()
    } else {
        model.adapters[layer].values().map(Adapter::param_count).sum()
    }
}

fn poison_last_layer(model: &mut Model, full: bool) -> Result<()> {
    let last = model.cfg.n_layers - 1;
    if full || model.adapters[last].is_empty() {
        model.base.layers[last].wq.as_mut_slice()[0] = f64::NAN;
        return Ok(());
    }
    let ad = model.adapters[last].values_mut().next().expect("non-empty");
    match ad {
        Adapter::Lora(l) => l.a.as_mut_slice()[0] = f64::NAN,
        Adapter::Hybrid(h) => h.lora.a.as_mut_slice()[0] = f64::NAN,
        Adapter::Boft(b) if b.form == BoftForm::Butterfly => b.levels[0].angles[0] = f64::NAN,
        Adapter::Boft(b) => {
            let mut g = b.generator().to_vec();
            g[0] = f64::NAN;
            b.set_generator(&g)?;
        }
        Adapter::Unitary { param, .. } => {
            let mut u = param.u().clone();
            u.as_mut_slice()[0] = C64::new(f64::NAN, 0.0);
            param.set_u(u)?;
        }
    }
    Ok(())
}

/// First layer whose effective weights, then whose gradients, are not finite.
fn offending_layer(model: &Model, grads: Option<&Grads>) -> Option<usize> {
    let n = model.cfg.n_layers;
    let bad_weights = |l: usize| -> bool {
        let lb = &model.base.layers[l];
        crate::model::Target::ALL.iter().any(|&t| match model.effective_weight(l, t) {
            Ok(w) => !w.is_finite(),
            Err(_) => true,
        }) || lb.b1.iter().chain(&lb.b2).any(|v| !v.is_finite())
    };
    (0..n)
        .find(|&l| bad_weights(l))
        .or_else(|| grads.and_then(|g| (0..n).find(|&l| !g.layer_norm(l).is_finite())))
}

struct StepStats {
    loss: f64,
    grad_norm: f64,
    g_lora: Option<f64>,
    g_boft: Option<f64>,
    layer_norm: Vec<f64>,
    layer_lora: Vec<Option<f64>>,
    layer_boft: Vec<Option<f64>>,
}

fn branch_norm(per: &BTreeMap<crate::model::Target, AdapterGrad>, f: fn(&AdapterGrad) -> Option<f64>) -> Option<f64> {
    let parts: Vec<f64> = per.values().filter_map(f).collect();
    (!parts.is_empty()).then(|| parts.iter().map(|v| v * v).sum::<f64>().sqrt())
}

fn combine(parts: &[Option<f64>]) -> Option<f64> {
    let vals: Vec<f64> = parts.iter().flatten().copied().collect();
    (!vals.is_empty()).then(|| vals.iter().map(|v| v * v).sum::<f64>().sqrt())
}

enum StepOutcome {
    Done(StepStats),
    Abort { layer: Option<usize>, reason: String },
}

fn train_step(model: &mut Model, cfg: &TrainConfig, batch: &[Example], step: usize) -> Result<StepOutcome> {
    let full = cfg.method == Method::Full;
    if cfg.hooks.nan_at_step == Some(step) {
        poison_last_layer(model, full)?;
    }
    // Forward with the current deltas, loss, backward.
    let (loss, mut grads) = model.grads(batch, full)?;
    if !loss.is_finite() {
        return Ok(StepOutcome::Abort {
            layer: offending_layer(model, Some(&grads)),
            reason: format!("non-finite loss {loss}"),
        });
    }
    apply_force_zero(cfg, &mut grads);
    let n = model.cfg.n_layers;
    let layer_norm: Vec<f64> = (0..n).map(|l| grads.layer_norm(l)).collect();
    if let Some(l) = layer_norm.iter().position(|v| !v.is_finite()) {
        return Ok(StepOutcome::Abort {
            layer: Some(l),
            reason: "non-finite gradient".into(),
        });
    }
    let layer_lora: Vec<Option<f64>> = grads.adapters.iter().map(|m| branch_norm(m, AdapterGrad::lora_norm)).collect();
    let layer_boft: Vec<Option<f64>> = grads.adapters.iter().map(|m| branch_norm(m, AdapterGrad::boft_norm)).collect();
    let stats = StepStats {
        loss,
        grad_norm: grads.norm(),
        g_lora: combine(&layer_lora),
        g_boft: combine(&layer_boft),
        layer_norm,
        layer_lora,
        layer_boft,
    };

    if full {
        let g = grads.base.as_ref().expect("full mode returns base gradients");
        model.base.sgd_step(g, cfg.eta_full)?;
        return Ok(StepOutcome::Done(stats));
    }
    let renorm_now = (step + 1) % cfg.renorm_interval == 0;
    for (layer, per) in grads.adapters.iter().enumerate() {
        for (&t, ag) in per {
            let w0 = model.base.layers[layer].get(t).clone();
            let slot = model.adapters[layer].get_mut(&t).expect("gradient implies adapter");
            let next = match (&*slot, ag) {
                (Adapter::Lora(l), AdapterGrad::Lora { a, b }) => {
                    let (next, outcome) = l.grad_step(a, b, cfg.eta_lora, Some(&w0))?;
                    if outcome == ClampOutcome::ZeroedDegenerate {
                        log::warn!("layer {layer} {t}: zero base weight, LoRA delta clamped to zero");
                    }
                    Adapter::Lora(next)
                }
                (Adapter::Boft(st), AdapterGrad::Butterfly(levels)) => {
                    Adapter::Boft(st.step_project(levels, cfg.eta_boft)?)
                }
                (Adapter::Boft(st), AdapterGrad::Cayley(gq)) => Adapter::Boft(st.q_step(gq, cfg.eta_boft)?),
                (Adapter::Hybrid(h), AdapterGrad::Hybrid { a, b, q, .. }) => {
                    // λ from branch norms, then factor updates and the Q step;
                    // the rotation is recomputed from Q at the next forward.
                    let mut h = h.clone();
                    let gl = (a.frobenius_norm().powi(2) + b.frobenius_norm().powi(2)).sqrt();
                    h.update_lambda(gl, q.frobenius_norm())?;
                    Adapter::Hybrid(h.step(a, b, q, &w0)?)
                }
                (Adapter::Unitary { param, structured }, AdapterGrad::Unitary { grad_u, structured: sg }) => {
                    let param = match (structured, sg) {
                        (true, Some(g)) => param.structured_step(g, cfg.eta_urnn)?,
                        _ => {
                            let b = skew_hermitian_grad(grad_u, param.u())?;
                            let mut u = unitary_exp_update(param.u(), &b, -cfg.eta_urnn)?;
                            if renorm_now {
                                u = unitary_renormalize(&u)?;
                            }
                            let mut p = param.clone();
                            p.set_u(u)?;
                            p
                        }
                    };
                    Adapter::Unitary {
                        param,
                        structured: *structured,
                    }
                }
                _ => return Err(Error::numerical("gradient kind does not match adapter kind")),
            };
            *slot = next;
        }
    }
    Ok(StepOutcome::Done(stats))
}

/// One optimiser step of `cfg.method` on `batch`, returning the loss measured
/// before the update. `step` is the global step index (it drives unitary
/// re-normalisation and the fault hook). A divergent step is an error here.
pub fn step(cfg: &TrainConfig, model: &mut Model, batch: &[Example], step: usize) -> Result<f64> {
    match train_step(model, cfg, batch, step)? {
        StepOutcome::Done(s) => Ok(s.loss),
        StepOutcome::Abort { layer, reason } => Err(Error::numerical(match layer {
            Some(l) => format!("layer {l}: {reason}"),
            None => reason,
        })),
    }
}

/// Train a fresh model for `cfg.epochs` epochs on `data`, seeding the base
/// weights, adapter initialisation and batch order from `seed`.
pub fn train(cfg: &TrainConfig, mcfg: &ModelConfig, data: &Dataset, seed: u64) -> Result<RunResult> {
    let model = init_model(cfg, mcfg, &data.train, seed)?;
    train_model(cfg, model, data, seed)
}

/// Train an already initialised model.
pub fn train_model(cfg: &TrainConfig, mut model: Model, data: &Dataset, seed: u64) -> Result<RunResult> {
    cfg.validate(&model.cfg)?;
    let full = cfg.method == Method::Full;
    let n = model.cfg.n_layers;
    let baseline_val_loss = evaluate(&model, &data.val)?;
    let param_count = if full {
        model.cfg.full_param_count()
    } else {
        model.adapter_param_count()
    };
    let layer_params: Vec<usize> = (0..n).map(|l| param_count_of_layer(&model, l, full)).collect();
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut shuffle = rng_for(seed, 2);
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    let mut abort = None;

    'epochs: for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut shuffle);
        let mut steps: Vec<StepStats> = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Example> = chunk.iter().map(|&i| data.train[i].clone()).collect();
            // A numerical failure mid-run (e.g. an inverse of an exploded
            // generator) is divergence, not a caller error.
            let outcome = match train_step(&mut model, cfg, &batch, step) {
                Err(Error::Numerical(msg)) => StepOutcome::Abort {
                    layer: offending_layer(&model, None),
                    reason: format!("numerical failure: {msg}"),
                },
                other => other?,
            };
            match outcome {
                StepOutcome::Done(s) => steps.push(s),
                StepOutcome::Abort { layer, reason } => {
                    log::warn!("{} epoch {epoch}: aborting, {reason}", cfg.method);
                    abort = Some(AbortRecord {
                        method: cfg.method,
                        epoch,
                        layer,
                        reason,
                    });
                    break 'epochs;
                }
            }
            step += 1;
        }
        let val_loss = evaluate(&model, &data.val)?;
        if !val_loss.is_finite() {
            abort = Some(AbortRecord {
                method: cfg.method,
                epoch,
                layer: offending_layer(&model, None),
                reason: format!("non-finite validation loss {val_loss}"),
            });
            break;
        }
        let wall_ms = if cfg.record_wall_time {
            started.elapsed().as_micros() as f64 / 1000.0
        } else {
            0.0
        };
        let k = steps.len() as f64;
        let mean = |f: &dyn Fn(&StepStats) -> f64| steps.iter().map(f).sum::<f64>() / k;
        let mean_opt = |f: &dyn Fn(&StepStats) -> Option<f64>| -> Option<f64> {
            let v: Option<Vec<f64>> = steps.iter().map(f).collect();
            v.map(|v| v.iter().sum::<f64>() / k)
        };
        let hybrid_lambda = |l: usize| -> Option<f64> {
            let ls: Vec<f64> = model.adapters[l]
                .values()
                .filter_map(|a| match a {
                    Adapter::Hybrid(h) => Some(h.lambda_last),
                    _ => None,
                })
                .collect();
            (!ls.is_empty()).then(|| ls.iter().sum::<f64>() / ls.len() as f64)
        };
        let layers: Vec<LayerMetrics> = (0..n)
            .map(|l| LayerMetrics {
                layer: l,
                g_lora: if cfg.method.has_lora() { mean_opt(&|s| s.layer_lora[l]) } else { None },
                g_boft: if cfg.method.has_boft() { mean_opt(&|s| s.layer_boft[l]) } else { None },
                lambda: hybrid_lambda(l),
                grad_norm: mean(&|s| s.layer_norm[l]),
                param_count: layer_params[l],
            })
            .collect();
        let lambda = {
            let ls: Vec<f64> = layers.iter().filter_map(|l| l.lambda).collect();
            (!ls.is_empty()).then(|| ls.iter().sum::<f64>() / ls.len() as f64)
        };
        let rec = MetricsRecord {
            epoch,
            method: cfg.method,
            g_lora: if cfg.method.has_lora() { mean_opt(&|s| s.g_lora) } else { None },
            g_boft: if cfg.method.has_boft() { mean_opt(&|s| s.g_boft) } else { None },
            lambda,
            layers,
            grad_norm: mean(&|s| s.grad_norm),
            train_loss: mean(&|s| s.loss),
            val_loss,
            wall_ms,
            param_count,
        };
        log::info!(
            "{} epoch {epoch}: train {:.4} val {:.4} |g| {:.4}",
            cfg.method,
            rec.train_loss,
            rec.val_loss,
            rec.grad_norm
        );
        records.push(rec);
    }
    Ok(RunResult {
        method: cfg.method,
        seed,
        records,
        baseline_val_loss,
        model,
        abort,
    })
}
