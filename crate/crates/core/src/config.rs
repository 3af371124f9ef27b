//! Flat `key = value` run configuration.
//!
//! One setting per line, `#` starts a comment, blank lines are ignored.
//! Unknown and repeated keys are errors. Lists are comma separated and
//! optional reals accept `none`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::adapters::BoftForm;
use crate::error::{Error, Result};
use crate::harness::{Method, TaskKind, TaskSpec, TrainConfig};
use crate::model::{ModelConfig, Target};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub task: TaskSpec,
    /// Methods compared by a sweep; a single run uses `train.method`.
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub jobs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        Self {
            model: ModelConfig::default(),
            methods: vec![train.method],
            train,
            task: TaskSpec::default(),
            seeds: vec![1, 2, 3],
            out_dir: PathBuf::from("out"),
            jobs: 0,
        }
    }
}

/// Every accepted key, in serialisation order.
pub const KEYS: &[&str] = &[
    "task",
    "seq_len",
    "vocab",
    "train_size",
    "val_size",
    "data_seed",
    "n_layers",
    "d_model",
    "n_heads",
    "d_ff",
    "targets",
    "method",
    "methods",
    "epochs",
    "batch_size",
    "eta_lora",
    "eta_boft",
    "eta_full",
    "eta_urnn",
    "rank",
    "alpha",
    "levels",
    "clamp",
    "renorm_interval",
    "lambda_ema",
    "boft_form",
    "unitary_update",
    "record_wall_time",
    "seeds",
    "out",
    "jobs",
];

fn parse<T: FromStr>(v: &str, what: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("expected {what}, found `{v}`"))
}

fn parse_list<T: FromStr>(v: &str, what: &str) -> std::result::Result<Vec<T>, String> {
    let items: std::result::Result<Vec<T>, String> = v
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(s, what))
        .collect();
    let items = items?;
    if items.is_empty() {
        return Err(format!("expected a comma-separated list of {what}"));
    }
    Ok(items)
}

fn parse_opt_real(v: &str) -> std::result::Result<Option<f64>, String> {
    if v == "none" {
        Ok(None)
    } else {
        parse(v, "a real number or `none`").map(Some)
    }
}

fn parse_method(v: &str) -> std::result::Result<Method, String> {
    v.parse()
}

fn parse_target(v: &str) -> std::result::Result<Target, String> {
    v.parse().map_err(|_| {
        format!("unknown target `{v}` (expected attn_q, attn_k, attn_v, attn_o, ff_in or ff_out)")
    })
}

fn apply(cfg: &mut RunConfig, key: &str, v: &str) -> std::result::Result<(), String> {
    let (m, t, d) = (&mut cfg.model, &mut cfg.train, &mut cfg.task);
    match key {
        "task" => d.kind = v.parse::<TaskKind>()?,
        "seq_len" => {
            m.seq_len = parse(v, "a non-negative integer")?;
            d.seq_len = m.seq_len;
        }
        "vocab" => {
            m.vocab = parse(v, "a non-negative integer")?;
            d.vocab = m.vocab;
        }
        "train_size" => d.train_size = parse(v, "a non-negative integer")?,
        "val_size" => d.val_size = parse(v, "a non-negative integer")?,
        "data_seed" => d.seed = parse(v, "a non-negative integer")?,
        "n_layers" => m.n_layers = parse(v, "a non-negative integer")?,
        "d_model" => m.d_model = parse(v, "a non-negative integer")?,
        "n_heads" => m.n_heads = parse(v, "a non-negative integer")?,
        "d_ff" => m.d_ff = parse(v, "a non-negative integer")?,
        "targets" => {
            let mut ts: Vec<Target> = v
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(parse_target)
                .collect::<std::result::Result<_, _>>()?;
            if ts.is_empty() {
                return Err("expected a comma-separated list of targets".into());
            }
            ts.sort();
            ts.dedup();
            m.adapter_targets = ts;
        }
        "method" => t.method = parse_method(v)?,
        "methods" => {
            cfg.methods = v
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(parse_method)
                .collect::<std::result::Result<_, _>>()?;
            if cfg.methods.is_empty() {
                return Err("expected a comma-separated list of methods".into());
            }
        }
        "epochs" => t.epochs = parse(v, "a non-negative integer")?,
        "batch_size" => t.batch_size = parse(v, "a non-negative integer")?,
        "eta_lora" => t.eta_lora = parse(v, "a real number")?,
        "eta_boft" => t.eta_boft = parse(v, "a real number")?,
        "eta_full" => t.eta_full = parse(v, "a real number")?,
        "eta_urnn" => t.eta_urnn = parse(v, "a real number")?,
        "rank" => t.rank = parse(v, "a non-negative integer")?,
        "alpha" => t.alpha = parse(v, "a real number")?,
        "levels" => t.levels = parse(v, "a non-negative integer")?,
        "clamp" => t.clamp = parse_opt_real(v)?,
        "renorm_interval" => t.renorm_interval = parse(v, "a non-negative integer")?,
        "lambda_ema" => t.lambda_ema = parse_opt_real(v)?,
        "boft_form" => {
            t.boft_form = match v {
                "butterfly" => BoftForm::Butterfly,
                "cayley" => BoftForm::Cayley,
                _ => return Err(format!("unknown BOFT form `{v}` (expected butterfly or cayley)")),
            }
        }
        "unitary_update" => t.unitary_update = v.parse()?,
        "record_wall_time" => t.record_wall_time = parse(v, "true or false")?,
        "seeds" => cfg.seeds = parse_list(v, "non-negative integers")?,
        "out" => {
            if v.is_empty() {
                return Err("output directory must not be empty".into());
            }
            cfg.out_dir = PathBuf::from(v);
        }
        "jobs" => cfg.jobs = parse(v, "a non-negative integer")?,
        _ => return Err("unknown key".into()),
    }
    Ok(())
}

/// Parse and validate a configuration; defaults fill every missing key.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut methods_given = false;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            return Err(Error::Config {
                line,
                key: content.to_string(),
                message: "expected `key = value`".into(),
            });
        };
        let (key, value) = (key.trim(), value.trim());
        let err = |message: String| Error::Config {
            line,
            key: key.to_string(),
            message,
        };
        if let Some(prev) = seen.insert(key.to_string(), line) {
            return Err(err(format!("duplicate key (first set on line {prev})")));
        }
        apply(&mut cfg, key, value).map_err(err)?;
        methods_given |= key == "methods";
    }
    if !methods_given {
        cfg.methods = vec![cfg.train.method];
    }
    validate(&cfg, &seen)?;
    Ok(cfg)
}

fn validate(cfg: &RunConfig, lines: &HashMap<String, usize>) -> Result<()> {
    let at = |key: &str, message: String| Error::Config {
        line: lines.get(key).copied().unwrap_or(0),
        key: key.to_string(),
        message,
    };
    let m = &cfg.model;
    for (key, v) in [
        ("n_layers", m.n_layers),
        ("d_model", m.d_model),
        ("n_heads", m.n_heads),
        ("d_ff", m.d_ff),
        ("vocab", m.vocab),
        ("seq_len", m.seq_len),
        ("train_size", cfg.task.train_size),
        ("val_size", cfg.task.val_size),
    ] {
        if v == 0 {
            return Err(at(key, "must be positive".into()));
        }
    }
    if m.d_model % m.n_heads != 0 {
        return Err(at("n_heads", format!("must divide d_model = {}", m.d_model)));
    }
    let unitary = cfg.methods.contains(&Method::Urnn) || cfg.train.method == Method::Urnn;
    if unitary && !m.d_model.is_power_of_two() {
        return Err(at("d_model", "must be a power of two when a unitary method is selected".into()));
    }
    let all_methods = std::iter::once(cfg.train.method).chain(cfg.methods.iter().copied());
    for method in all_methods {
        let mut t = cfg.train.clone();
        t.method = method;
        if let Err(e) = t.validate(m) {
            let msg = match e {
                Error::InvalidInput(s) => s,
                other => other.to_string(),
            };
            let key = KEYS
                .iter()
                .find(|k| msg.starts_with(*k))
                .copied()
                .unwrap_or("method");
            return Err(at(key, format!("{msg} (method {method})")));
        }
    }
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "none".to_string(), |x| x.to_string())
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

/// Canonical text form; [`parse_config`] of the output yields `cfg` again.
pub fn serialize_config(cfg: &RunConfig) -> String {
    let (m, t, d) = (&cfg.model, &cfg.train, &cfg.task);
    let mut s = String::new();
    for key in KEYS {
        let v = match *key {
            "task" => d.kind.to_string(),
            "seq_len" => m.seq_len.to_string(),
            "vocab" => m.vocab.to_string(),
            "train_size" => d.train_size.to_string(),
            "val_size" => d.val_size.to_string(),
            "data_seed" => d.seed.to_string(),
            "n_layers" => m.n_layers.to_string(),
            "d_model" => m.d_model.to_string(),
            "n_heads" => m.n_heads.to_string(),
            "d_ff" => m.d_ff.to_string(),
            "targets" => join(&m.adapter_targets),
            "method" => t.method.to_string(),
            "methods" => join(&cfg.methods),
            "epochs" => t.epochs.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "eta_lora" => t.eta_lora.to_string(),
            "eta_boft" => t.eta_boft.to_string(),
            "eta_full" => t.eta_full.to_string(),
            "eta_urnn" => t.eta_urnn.to_string(),
            "rank" => t.rank.to_string(),
            "alpha" => t.alpha.to_string(),
            "levels" => t.levels.to_string(),
            "clamp" => opt(t.clamp),
            "renorm_interval" => t.renorm_interval.to_string(),
            "lambda_ema" => opt(t.lambda_ema),
            "boft_form" => match t.boft_form {
                BoftForm::Butterfly => "butterfly".into(),
                BoftForm::Cayley => "cayley".into(),
            },
            "unitary_update" => t.unitary_update.name().into(),
            "record_wall_time" => t.record_wall_time.to_string(),
            "seeds" => join(&cfg.seeds),
            "out" => cfg.out_dir.display().to_string(),
            "jobs" => cfg.jobs.to_string(),
            other => unreachable!("key {other} has no serialiser"),
        };
        let _ = writeln!(s, "{key} = {v}");
    }
    s
}
