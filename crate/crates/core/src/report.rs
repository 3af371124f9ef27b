//! Output artefacts: metrics CSV, run summaries and sweep tables.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde_json::{json, Value};

use crate::config::{serialize_config, RunConfig};
use crate::error::Result;
use crate::harness::{Cell, Method, MetricsRecord, RunResult};

pub const METRICS_COLUMNS: &str =
    "epoch,method,layer,g_lora,g_boft,lambda,grad_norm,train_loss,val_loss,wall_ms,param_count";

pub const SWEEP_COLUMNS: &str = "method,seed,status,train_loss,val_loss,baseline_val_loss,grad_norm,param_count";

/// 17 significant digits: enough for every `f64` to survive a text round trip.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

/// Write `bytes` to a sibling temporary file, then rename it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// One row per (epoch, layer) followed by the epoch's `all` row.
pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut s = String::from(METRICS_COLUMNS);
    s.push('\n');
    for r in records {
        for l in &r.layers {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.epoch,
                r.method,
                l.layer,
                fmt_opt(l.g_lora),
                fmt_opt(l.g_boft),
                fmt_opt(l.lambda),
                fmt_f64(l.grad_norm),
                fmt_f64(r.train_loss),
                fmt_f64(r.val_loss),
                fmt_f64(r.wall_ms),
                l.param_count
            );
        }
        let _ = writeln!(
            s,
            "{},{},all,{},{},{},{},{},{},{},{}",
            r.epoch,
            r.method,
            fmt_opt(r.g_lora),
            fmt_opt(r.g_boft),
            fmt_opt(r.lambda),
            fmt_f64(r.grad_norm),
            fmt_f64(r.train_loss),
            fmt_f64(r.val_loss),
            fmt_f64(r.wall_ms),
            r.param_count
        );
    }
    s
}

fn num(v: f64) -> Value {
    serde_json::Number::from_f64(v).map_or(Value::Null, Value::Number)
}

/// Final metrics plus an echo of the configuration that produced them.
pub fn summary_json(cfg: &RunConfig, run: &RunResult) -> String {
    let last = run.last();
    let abort = run.abort.as_ref().map(|a| {
        json!({
            "method": a.method.name(),
            "epoch": a.epoch,
            "layer": a.layer,
            "reason": a.reason,
        })
    });
    let v = json!({
        "method": run.method.name(),
        "seed": run.seed,
        "status": if run.completed() { "completed" } else { "aborted" },
        "epochs_completed": run.records.len(),
        "baseline_val_loss": num(run.baseline_val_loss),
        "final": last.map(|r| json!({
            "train_loss": num(r.train_loss),
            "val_loss": num(r.val_loss),
            "grad_norm": num(r.grad_norm),
            "lambda": r.lambda.map(num),
            "param_count": r.param_count,
        })),
        "abort": abort,
        "config": serialize_config(cfg),
    });
    let mut s = serde_json::to_string_pretty(&v).expect("json values serialise");
    s.push('\n');
    s
}

struct Row {
    train: f64,
    val: f64,
    baseline: f64,
    grad: f64,
    params: usize,
}

fn row_of(run: &RunResult) -> Option<Row> {
    run.last().map(|r| Row {
        train: r.train_loss,
        val: r.val_loss,
        baseline: run.baseline_val_loss,
        grad: r.grad_norm,
        params: r.param_count,
    })
}

fn write_row(s: &mut String, method: Method, seed: &str, status: &str, row: Option<&Row>) {
    match row {
        Some(r) => {
            let _ = writeln!(
                s,
                "{method},{seed},{status},{},{},{},{},{}",
                fmt_f64(r.train),
                fmt_f64(r.val),
                fmt_f64(r.baseline),
                fmt_f64(r.grad),
                r.params
            );
        }
        None => {
            let _ = writeln!(s, "{method},{seed},{status},,,,,");
        }
    }
}

/// Per-run rows followed, for methods with several seeds, by an `avg` row.
/// Averages are taken over completed runs only; the avg row's status is
/// `partial` when some run did not complete.
pub fn sweep_csv(cells: &[Cell]) -> String {
    let mut s = String::from(SWEEP_COLUMNS);
    s.push('\n');
    let mut methods: Vec<Method> = Vec::new();
    for c in cells {
        if !methods.contains(&c.method) {
            methods.push(c.method);
        }
    }
    for m in methods {
        let mine: Vec<&Cell> = cells.iter().filter(|c| c.method == m).collect();
        let mut done = Vec::new();
        for c in &mine {
            let seed = c.seed.to_string();
            match &c.outcome {
                Ok(run) => {
                    let row = row_of(run);
                    let status = if run.completed() { "completed" } else { "aborted" };
                    write_row(&mut s, m, &seed, status, row.as_ref());
                    if run.completed() {
                        done.extend(row);
                    }
                }
                Err(_) => write_row(&mut s, m, &seed, "error", None),
            }
        }
        if mine.len() < 2 {
            continue;
        }
        let status = if done.len() == mine.len() { "completed" } else { "partial" };
        if done.is_empty() {
            write_row(&mut s, m, "avg", status, None);
            continue;
        }
        let k = done.len() as f64;
        let mean = |f: fn(&Row) -> f64| done.iter().map(f).sum::<f64>() / k;
        let avg = Row {
            train: mean(|r| r.train),
            val: mean(|r| r.val),
            baseline: mean(|r| r.baseline),
            grad: mean(|r| r.grad),
            params: done[0].params,
        };
        write_row(&mut s, m, "avg", status, Some(&avg));
    }
    s
}
