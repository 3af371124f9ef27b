//! The work behind `check`, `run` and `sweep`; the binary only parses flags.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::checks::{run_checks, CheckResult};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::harness::{make_task, sweep, train, Cell, RunResult, SweepSpec};
use crate::model::save_snapshot;
use crate::report::{metrics_csv, summary_json, sweep_csv, write_atomic};

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const WEIGHTS_FILE: &str = "weights.pfrg";
pub const SWEEP_FILE: &str = "sweep.csv";

/// Run the invariant suite; returns the printable report and whether every
/// property held.
pub fn check(seed: u64) -> (String, Vec<CheckResult>) {
    let results = run_checks(seed);
    let mut s = String::new();
    for r in &results {
        let _ = writeln!(
            s,
            "{} {:<48} {:.3e} ({} {:.0e})",
            if r.passed() { "PASS" } else { "FAIL" },
            r.name,
            r.measured,
            if r.at_least { "≥" } else { "≤" },
            r.threshold
        );
    }
    let failed = results.iter().filter(|r| !r.passed()).count();
    let _ = writeln!(s, "{} properties, {failed} failed", results.len());
    (s, results)
}

fn prepare_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

/// Train `cfg.train.method` with the first configured seed and write the
/// metrics, a summary and the final weights into `cfg.out_dir`. Aborted runs
/// still write their partial artefacts.
pub fn run(cfg: &RunConfig) -> Result<RunResult> {
    let seed = *cfg.seeds.first().ok_or_else(|| Error::invalid("no seed configured"))?;
    prepare_dir(&cfg.out_dir)?;
    let data = make_task(&cfg.task)?;
    let result = train(&cfg.train, &cfg.model, &data, seed)?;
    write_atomic(&cfg.out_dir.join(METRICS_FILE), metrics_csv(&result.records).as_bytes())?;
    write_atomic(&cfg.out_dir.join(SUMMARY_FILE), summary_json(cfg, &result).as_bytes())?;
    save_snapshot(&cfg.out_dir.join(WEIGHTS_FILE), &result.model)?;
    Ok(result)
}

/// Run every configured method on every seed and write the comparison table.
pub fn sweep_table(cfg: &RunConfig) -> Result<Vec<Cell>> {
    if cfg.methods.len() < 2 && cfg.seeds.len() < 2 {
        return Err(Error::invalid("a sweep needs at least two methods or two seeds"));
    }
    prepare_dir(&cfg.out_dir)?;
    let data = make_task(&cfg.task)?;
    let spec = SweepSpec {
        train: cfg.train.clone(),
        methods: cfg.methods.clone(),
        seeds: cfg.seeds.clone(),
        jobs: cfg.jobs,
        inject_nan: None,
    };
    let cells = sweep(&spec, &cfg.model, &data)?;
    write_atomic(&cfg.out_dir.join(SWEEP_FILE), sweep_csv(&cells).as_bytes())?;
    Ok(cells)
}
