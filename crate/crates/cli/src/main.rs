use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use log::LevelFilter;

use peft_forge::commands;
use peft_forge::config::{parse_config, RunConfig};

/// Desk-scale parameter-efficient fine-tuning experiments.
#[derive(Parser, Debug)]
#[command(name = "peft-forge", version)]
struct Cli {
    /// Output directory (overrides `out` in the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for sweep cells; 0 uses every core.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Single seed overriding the config's seed list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the invariant suite and print every residual.
    Check,
    /// Train one method and write metrics.csv, summary.json and weights.pfrg.
    Run { config: PathBuf },
    /// Run every method × seed and write sweep.csv.
    Sweep { config: PathBuf },
}

fn init_logging() -> anyhow::Result<()> {
    let level = match std::env::var("PEFT_FORGE_LOG").as_deref() {
        Err(_) | Ok("info") => LevelFilter::Info,
        Ok("quiet") => LevelFilter::Off,
        Ok("debug") => LevelFilter::Debug,
        Ok(other) => bail!("PEFT_FORGE_LOG must be quiet, info or debug, not `{other}`"),
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .init();
    Ok(())
}

fn load(path: &PathBuf, cli: &Cli) -> anyhow::Result<RunConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut cfg = parse_config(&text).with_context(|| format!("in {}", path.display()))?;
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(jobs) = cli.jobs {
        cfg.jobs = jobs;
    }
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    Ok(cfg)
}

fn execute(cli: &Cli) -> anyhow::Result<bool> {
    match &cli.command {
        Command::Check => {
            let (report, results) = commands::check(cli.seed.unwrap_or(0));
            print!("{report}");
            Ok(results.iter().all(|r| r.passed()))
        }
        Command::Run { config } => {
            let cfg = load(config, cli)?;
            let result = commands::run(&cfg)?;
            match &result.abort {
                Some(a) => eprintln!("{a}"),
                None => {
                    if let Some(last) = result.last() {
                        println!(
                            "{} seed {}: val loss {:.6} (baseline {:.6}), {} trainable parameters",
                            result.method, result.seed, last.val_loss, result.baseline_val_loss, last.param_count
                        );
                    }
                }
            }
            println!("wrote {}", cfg.out_dir.display());
            Ok(result.completed())
        }
        Command::Sweep { config } => {
            let cfg = load(config, cli)?;
            let cells = commands::sweep_table(&cfg)?;
            let failed: Vec<String> = cells
                .iter()
                .filter(|c| !c.completed())
                .map(|c| format!("{}/{}", c.method, c.seed))
                .collect();
            if !failed.is_empty() {
                eprintln!("incomplete cells: {}", failed.join(", "));
            }
            println!("wrote {}", cfg.out_dir.join(commands::SWEEP_FILE).display());
            Ok(failed.is_empty())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = init_logging() {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    match execute(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
