//! A small transformer encoder whose projection matrices can be adapted.
//!
//! Layers are pre-activation free: `x₁ = x + Attn(x)`, `x₂ = x₁ + FFN(x₁)`,
//! no normalisation. Every weight maps column vectors, `y = W·x`, so a
//! `T×d` activation block is multiplied by `Wᵀ` on the right.

#[cfg(test)]
mod gradcheck_tests;
mod grads;
mod snapshot;
mod transformer;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::adapters::{BoftForm, BoftState, HybridState, LoraAdapter, UnitaryParam};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub use grads::{AdapterGrad, BaseGrads, Grads, LayerBaseGrads};
pub use snapshot::{load_snapshot, read_snapshot, save_snapshot, write_snapshot, Tensor};
pub use transformer::{cross_entropy, Example, ForwardCache, LayerCache};

/// Injection points inside one encoder layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Target {
    AttnQ,
    AttnK,
    AttnV,
    AttnO,
    FfIn,
    FfOut,
}

impl Target {
    pub const ALL: [Target; 6] = [
        Target::AttnQ,
        Target::AttnK,
        Target::AttnV,
        Target::AttnO,
        Target::FfIn,
        Target::FfOut,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Target::AttnQ => "attn_q",
            Target::AttnK => "attn_k",
            Target::AttnV => "attn_v",
            Target::AttnO => "attn_o",
            Target::FfIn => "ff_in",
            Target::FfOut => "ff_out",
        }
    }

    fn bit(self) -> u32 {
        1 << (self as u32)
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Target {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Target::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| format!("unknown adapter target `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab: usize,
    pub seq_len: usize,
    pub adapter_targets: Vec<Target>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            d_model: 32,
            n_heads: 2,
            d_ff: 64,
            vocab: 16,
            seq_len: 16,
            adapter_targets: vec![Target::AttnQ, Target::AttnV],
        }
    }
}

impl ModelConfig {
    /// Check structural constraints; `unitary` demands power-of-two, square
    /// targets.
    pub fn validate(&self, unitary: bool) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab", self.vocab),
            ("seq_len", self.seq_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::invalid(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if unitary {
            if !self.d_model.is_power_of_two() || self.d_model < 2 {
                return Err(Error::invalid(format!(
                    "d_model {} must be a power of two ≥ 2 for unitary targets",
                    self.d_model
                )));
            }
            if let Some(t) = self
                .adapter_targets
                .iter()
                .find(|t| matches!(t, Target::FfIn | Target::FfOut))
            {
                return Err(Error::invalid(format!("unitary target {t} is not square")));
            }
        }
        Ok(())
    }

    /// `(d_out, d_in)` of a target matrix.
    pub fn target_shape(&self, t: Target) -> (usize, usize) {
        match t {
            Target::FfIn => (self.d_ff, self.d_model),
            Target::FfOut => (self.d_model, self.d_ff),
            _ => (self.d_model, self.d_model),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub(crate) fn target_mask(&self) -> u32 {
        self.adapter_targets.iter().fold(0, |m, t| m | t.bit())
    }

    pub(crate) fn targets_from_mask(mask: u32) -> Vec<Target> {
        Target::ALL.into_iter().filter(|t| mask & t.bit() != 0).collect()
    }

    /// Number of scalars in all base weights.
    pub fn full_param_count(&self) -> usize {
        let d = self.d_model;
        let per_layer = 4 * d * d + 2 * d * self.d_ff + self.d_ff + d;
        2 * self.vocab * d + self.seq_len * d + self.n_layers * per_layer
    }
}

/// Frozen (or, under full fine-tuning, live) weights of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerBase {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

impl LayerBase {
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

    pub fn get_mut(&mut self, t: Target) -> &mut Matrix {
        match t {
            Target::AttnQ => &mut self.wq,
            Target::AttnK => &mut self.wk,
            Target::AttnV => &mut self.wv,
            Target::AttnO => &mut self.wo,
            Target::FfIn => &mut self.w1,
            Target::FfOut => &mut self.w2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaseWeights {
    pub tok_emb: Matrix,
    pub pos_emb: Matrix,
    pub layers: Vec<LayerBase>,
    pub head: Matrix,
}

impl BaseWeights {
    /// Gaussian initialisation with fan-in scaling.
    pub fn random<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        let inv = |n: usize| 1.0 / (n as f64).sqrt();
        let layers = (0..cfg.n_layers)
            .map(|_| LayerBase {
                wq: Matrix::random_normal(d, d, inv(d), rng),
                wk: Matrix::random_normal(d, d, inv(d), rng),
                wv: Matrix::random_normal(d, d, inv(d), rng),
                wo: Matrix::random_normal(d, d, inv(d), rng),
                w1: Matrix::random_normal(cfg.d_ff, d, inv(d), rng),
                b1: vec![0.0; cfg.d_ff],
                w2: Matrix::random_normal(d, cfg.d_ff, inv(cfg.d_ff), rng),
                b2: vec![0.0; d],
            })
            .collect();
        Self {
            tok_emb: Matrix::random_normal(cfg.vocab, d, 1.0, rng),
            pos_emb: Matrix::random_normal(cfg.seq_len, d, 0.1, rng),
            layers,
            head: Matrix::random_normal(cfg.vocab, d, inv(d), rng),
        }
    }

    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        Self {
            tok_emb: Matrix::zeros(cfg.vocab, d),
            pos_emb: Matrix::zeros(cfg.seq_len, d),
            layers: (0..cfg.n_layers)
                .map(|_| LayerBase {
                    wq: Matrix::zeros(d, d),
                    wk: Matrix::zeros(d, d),
                    wv: Matrix::zeros(d, d),
                    wo: Matrix::zeros(d, d),
                    w1: Matrix::zeros(cfg.d_ff, d),
                    b1: vec![0.0; cfg.d_ff],
                    w2: Matrix::zeros(d, cfg.d_ff),
                    b2: vec![0.0; d],
                })
                .collect(),
            head: Matrix::zeros(cfg.vocab, d),
        }
    }
}

/// State attached to one target matrix.
#[derive(Debug, Clone, PartialEq)]
pub enum Adapter {
    Lora(LoraAdapter),
    Boft(BoftState),
    Hybrid(HybridState),
    /// The target is replaced by the real `2n×2n` form of `U`. With
    /// `structured` set, training acts on the factor parameters; otherwise on
    /// `U` itself through the exponential map.
    Unitary { param: UnitaryParam, structured: bool },
}

impl Adapter {
    pub fn param_count(&self) -> usize {
        match self {
            Adapter::Lora(l) => l.param_count(),
            Adapter::Boft(b) => b.param_count(),
            Adapter::Hybrid(h) => h.param_count(),
            Adapter::Unitary { param, structured } => {
                if *structured {
                    param.param_count()
                } else {
                    // real dimension of the Lie algebra u(n)
                    param.dim * param.dim
                }
            }
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Adapter::Lora(_) => "lora",
            Adapter::Boft(b) if b.form == BoftForm::Butterfly => "butterfly",
            Adapter::Boft(_) => "cayley",
            Adapter::Hybrid(_) => "hybrid",
            Adapter::Unitary { .. } => "unitary",
        }
    }
}

/// Effective weights of one layer, ready for a forward pass.
#[derive(Debug, Clone)]
pub struct LayerEff {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub base: BaseWeights,
    /// Per layer, the adapters keyed by target. Empty maps mean either an
    /// untouched layer or full fine-tuning.
    pub adapters: Vec<BTreeMap<Target, Adapter>>,
}

impl Model {
    pub fn new(cfg: ModelConfig, base: BaseWeights) -> Result<Self> {
        cfg.validate(false)?;
        if base.layers.len() != cfg.n_layers
            || base.tok_emb.shape() != (cfg.vocab, cfg.d_model)
            || base.pos_emb.shape() != (cfg.seq_len, cfg.d_model)
            || base.head.shape() != (cfg.vocab, cfg.d_model)
        {
            return Err(Error::invalid("base weights do not match the model config"));
        }
        for layer in &base.layers {
            for t in Target::ALL {
                if layer.get(t).shape() != cfg.target_shape(t) {
                    return Err(Error::invalid(format!("base weight {t} has the wrong shape")));
                }
            }
            if layer.b1.len() != cfg.d_ff || layer.b2.len() != cfg.d_model {
                return Err(Error::invalid("bias length does not match the model config"));
            }
        }
        let adapters = vec![BTreeMap::new(); cfg.n_layers];
        Ok(Self { cfg, base, adapters })
    }

    pub fn random<R: Rng + ?Sized>(cfg: ModelConfig, rng: &mut R) -> Result<Self> {
        let base = BaseWeights::random(&cfg, rng);
        Self::new(cfg, base)
    }

    /// Attach `adapter` to `target` of `layer`, replacing any previous one.
    pub fn attach(&mut self, layer: usize, target: Target, adapter: Adapter) -> Result<()> {
        if layer >= self.cfg.n_layers {
            return Err(Error::invalid(format!("layer {layer} out of range")));
        }
        let (d_out, d_in) = self.cfg.target_shape(target);
        let ok = match &adapter {
            Adapter::Lora(l) => (l.d_out(), l.d_in()) == (d_out, d_in),
            Adapter::Boft(b) => b.dim == d_out,
            Adapter::Hybrid(h) => (h.lora.d_out(), h.lora.d_in()) == (d_out, d_in),
            Adapter::Unitary { param, .. } => d_out == d_in && 2 * param.dim == d_out,
        };
        if !ok {
            return Err(Error::invalid(format!(
                "{} adapter does not fit target {target} ({d_out}x{d_in})",
                adapter.kind()
            )));
        }
        self.adapters[layer].insert(target, adapter);
        Ok(())
    }

    pub fn adapter(&self, layer: usize, target: Target) -> Option<&Adapter> {
        self.adapters.get(layer)?.get(&target)
    }

    /// Trainable adapter scalars across all layers.
    pub fn adapter_param_count(&self) -> usize {
        self.adapters
            .iter()
            .flat_map(|m| m.values())
            .map(Adapter::param_count)
            .sum()
    }

    /// `W₀ + Δ` for additive kinds, `(Π L_i)·W₀` for butterfly, the real form
    /// of `U` for unitary, `W₀` when nothing is attached.
    pub fn effective_weight(&self, layer: usize, target: Target) -> Result<Matrix> {
        let lb = self
            .base
            .layers
            .get(layer)
            .ok_or_else(|| Error::invalid(format!("layer {layer} out of range")))?;
        let w0 = lb.get(target);
        match self.adapter(layer, target) {
            None => Ok(w0.clone()),
            Some(Adapter::Lora(l)) => w0.add(&l.delta()),
            Some(Adapter::Boft(b)) => match b.form {
                BoftForm::Butterfly => b.compose()?.matmul(w0),
                BoftForm::Cayley => {
                    let r = b.rotation()?;
                    w0.add(&crate::adapters::boft_delta(&r, w0)?)
                }
            },
            Some(Adapter::Hybrid(h)) => w0.add(&h.delta(w0)?),
            Some(Adapter::Unitary { param, .. }) => Ok(param.u().realify()),
        }
    }

    pub fn effective_layers(&self) -> Result<Vec<LayerEff>> {
        (0..self.cfg.n_layers)
            .map(|l| {
                let lb = &self.base.layers[l];
                Ok(LayerEff {
                    wq: self.effective_weight(l, Target::AttnQ)?,
                    wk: self.effective_weight(l, Target::AttnK)?,
                    wv: self.effective_weight(l, Target::AttnV)?,
                    wo: self.effective_weight(l, Target::AttnO)?,
                    w1: self.effective_weight(l, Target::FfIn)?,
                    b1: lb.b1.clone(),
                    w2: self.effective_weight(l, Target::FfOut)?,
                    b2: lb.b2.clone(),
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn config_validation() {
        let mut cfg = ModelConfig::default();
        assert!(cfg.validate(true).is_ok());
        cfg.n_heads = 3;
        assert!(cfg.validate(false).is_err());
        let cfg = ModelConfig {
            d_model: 24,
            n_heads: 2,
            ..ModelConfig::default()
        };
        assert!(cfg.validate(false).is_ok());
        assert!(cfg.validate(true).is_err());
        let cfg = ModelConfig {
            adapter_targets: vec![Target::FfIn],
            ..ModelConfig::default()
        };
        assert!(cfg.validate(true).is_err());
    }

    #[test]
    fn target_names_round_trip() {
        for t in Target::ALL {
            assert_eq!(t.name().parse::<Target>().unwrap(), t);
        }
        assert!("attn_z".parse::<Target>().is_err());
        let cfg = ModelConfig::default();
        assert_eq!(ModelConfig::targets_from_mask(cfg.target_mask()), cfg.adapter_targets);
    }

    #[test]
    fn effective_weight_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut model = Model::random(ModelConfig::default(), &mut rng).unwrap();
        let w0 = model.base.layers[0].wq.clone();
        assert_eq!(model.effective_weight(0, Target::AttnQ).unwrap(), w0);
        let lora = LoraAdapter::init(32, 32, 4, 8.0, 0.1, &mut rng).unwrap();
        model.attach(0, Target::AttnQ, Adapter::Lora(lora.clone())).unwrap();
        assert_eq!(model.effective_weight(0, Target::AttnQ).unwrap(), w0);
        assert!(model.effective_weight(5, Target::AttnQ).is_err());
        assert!(model
            .attach(0, Target::FfIn, Adapter::Lora(lora))
            .is_err());
    }

    #[test]
    fn full_count_matches_tensors() {
        let cfg = ModelConfig::default();
        let b = BaseWeights::zeros(&cfg);
        let total = b.tok_emb.as_slice().len()
            + b.pos_emb.as_slice().len()
            + b.head.as_slice().len()
            + b.layers
                .iter()
                .map(|l| {
                    Target::ALL.iter().map(|&t| l.get(t).as_slice().len()).sum::<usize>()
                        + l.b1.len()
                        + l.b2.len()
                })
                .sum::<usize>();
        assert_eq!(cfg.full_param_count(), total);
    }
}
