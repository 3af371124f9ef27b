use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_peft-forge"));
    c.env("PEFT_FORGE_LOG", "quiet");
    c
}

fn small_config(dir: &Path, method: &str, extra: &str) -> std::path::PathBuf {
    let text = format!(
        "# tiny copy task\n\
         task = copy\n\
         train_size = 64\n\
         val_size = 16\n\
         d_model = 16\n\
         d_ff = 32\n\
         rank = 4\n\
         eta_lora = 0.003\n\
         eta_boft = 0.1\n\
         method = {method}\n\
         epochs = 2\n\
         record_wall_time = false\n\
         {extra}"
    );
    let p = dir.join(format!("{method}.cfg"));
    fs::write(&p, text).unwrap();
    p
}

fn run(args: &[&str], cfg: &Path, out: &Path) -> Output {
    bin().args(args).arg(cfg).arg("--out").arg(out).output().unwrap()
}

fn column(csv: &str, name: &str) -> Vec<String> {
    let mut lines = csv.lines();
    let idx = lines.next().unwrap().split(',').position(|c| c == name).unwrap();
    lines.map(|l| l.split(',').nth(idx).unwrap().to_string()).collect()
}

#[test]
fn check_passes() {
    let out = bin().arg("check").output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().filter(|l| l.starts_with("PASS")).count() >= 20);
    assert!(!text.contains("FAIL"));
}

#[test]
fn run_writes_metrics_summary_and_weights() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "lora", "");
    let out = dir.path().join("out");
    let res = run(&["run"], &cfg, &out);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    // two epochs × (two layers + the `all` row)
    assert_eq!(csv.lines().count(), 1 + 2 * 3);
    assert!(column(&csv, "lambda").iter().all(String::is_empty));
    assert!(column(&csv, "g_lora").iter().all(|v| v.parse::<f64>().unwrap() > 0.0));
    let summary = fs::read_to_string(out.join("summary.json")).unwrap();
    assert!(summary.contains("\"status\": \"completed\""));
    assert!(out.join("weights.pfrg").metadata().unwrap().len() > 0);
}

#[test]
fn hybrid_reports_lambda() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "hybrid", "");
    let out = dir.path().join("out");
    assert!(run(&["run"], &cfg, &out).status.success());
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    for v in column(&csv, "lambda") {
        let l: f64 = v.parse().unwrap();
        assert!((0.0..=1.0).contains(&l));
    }
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "hybrid", "");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(run(&["run"], &cfg, &a).status.success());
    assert!(run(&["run"], &cfg, &b).status.success());
    for f in ["metrics.csv", "weights.pfrg"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn sweep_writes_table_with_averages() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "lora", "methods = lora,boft\nseeds = 1,2\n");
    let out = dir.path().join("out");
    let res = run(&["sweep"], &cfg, &out);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * (2 + 1));
    assert_eq!(column(&csv, "seed").iter().filter(|s| *s == "avg").count(), 2);
}

#[test]
fn bad_config_names_line_and_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "lora", "rank = banana\n");
    let res = run(&["run"], &cfg, &dir.path().join("out"));
    assert_eq!(res.status.code(), Some(2));
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("rank") && err.contains("line"), "{err}");
}

#[test]
fn unwritable_output_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "lora", "");
    let blocker = dir.path().join("file");
    fs::write(&blocker, "not a directory").unwrap();
    let res = run(&["run"], &cfg, &blocker.join("out"));
    assert!(!res.status.success());
    assert!(!String::from_utf8_lossy(&res.stderr).is_empty());
}
