//! Synthetic tasks, training loops and method × seed sweeps.

pub mod task;
pub mod train;

pub use task::{make_task, Dataset, TaskKind, TaskSpec};
pub use train::{
    base_model, evaluate, init_model, param_count_formula, step, train, train_model, AbortRecord, Branch, Hooks,
    LayerMetrics, Method, MetricsRecord, RunResult, TrainConfig, UnitaryUpdate,
};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::par;

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub train: TrainConfig,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    /// Worker threads for independent cells; 0 uses the global pool.
    pub jobs: usize,
    /// Poison the first step of this cell (fault-injection hook).
    pub inject_nan: Option<(Method, u64)>,
}

/// Outcome of one (method, seed) cell. Hard errors are kept as text so the
/// remaining cells still run.
#[derive(Debug, Clone)]
pub struct Cell {
    pub method: Method,
    pub seed: u64,
    pub outcome: std::result::Result<RunResult, String>,
}

impl Cell {
    pub fn completed(&self) -> bool {
        matches!(&self.outcome, Ok(r) if r.completed())
    }
}

/// Run every method on every seed over the same dataset. Cells come back in
/// method-major order regardless of how they were scheduled.
pub fn sweep(spec: &SweepSpec, mcfg: &ModelConfig, data: &Dataset) -> Result<Vec<Cell>> {
    if spec.seeds.is_empty() || spec.methods.is_empty() {
        return Err(Error::invalid("sweep needs at least one method and one seed"));
    }
    let cells: Vec<(Method, u64)> = spec
        .methods
        .iter()
        .flat_map(|&m| spec.seeds.iter().map(move |&s| (m, s)))
        .collect();
    Ok(par::with_jobs(spec.jobs, || {
        par::map(&cells, |&(method, seed)| {
            let mut cfg = spec.train.clone();
            cfg.method = method;
            if spec.inject_nan == Some((method, seed)) {
                cfg.hooks.nan_at_step = Some(0);
            }
            let outcome = train(&cfg, mcfg, data, seed).map_err(|e| e.to_string());
            if let Err(e) = &outcome {
                log::warn!("{method} seed {seed} failed: {e}");
            }
            Cell { method, seed, outcome }
        })
    }))
}

#[cfg(test)]
mod tests;
