use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use mpc_sysid::combiners::CombinerMethod;
use mpc_sysid::experiment::{aggregate_report, run_experiment, write_csv, write_summary, ExperimentConfig};

#[derive(Parser)]
#[command(name = "mpc-sysid", version, about = "Closed-loop RL/SYSID experiments on a linear MPC benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one closed loop and write its per-step CSV.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        method: Option<CombinerMethod>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
        /// Defaults to `<method>_seed<seed>.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every (method, seed) pair into a directory.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// `all` or a comma separated list.
        #[arg(long, default_value = "all")]
        methods: String,
        /// Inclusive range `a..b` or a comma separated list.
        #[arg(long, default_value = "0..9")]
        seeds: String,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Summarize the run CSVs of a directory per method.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_methods(text: &str) -> Result<Vec<CombinerMethod>> {
    if text == "all" {
        return Ok(CombinerMethod::ALL.to_vec());
    }
    text.split(',')
        .map(|m| m.trim().parse::<CombinerMethod>().map_err(anyhow::Error::msg))
        .collect()
}

fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    if let Some((a, b)) = text.split_once("..") {
        let a: u64 = a.trim().parse().context("seed range start")?;
        let b: u64 = b.trim().parse().context("seed range end")?;
        if b < a {
            bail!("empty seed range {text}");
        }
        return Ok((a..=b).collect());
    }
    text.split(',').map(|s| s.trim().parse().context("seed")).collect()
}

fn run_file_name(cfg: &ExperimentConfig) -> String {
    format!("{}_seed{}.csv", cfg.method, cfg.seed)
}

fn run_one(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let output = run_experiment(cfg).with_context(|| format!("run {} seed {}", cfg.method, cfg.seed))?;
    write_csv(&output.records, out).with_context(|| format!("writing {}", out.display()))?;
    let last = output.records.last().expect("nonempty run");
    eprintln!(
        "{} seed {}: {} steps, {} updates, final param_error {:.4}, wrote {}",
        cfg.method,
        cfg.seed,
        output.records.len(),
        output.updates,
        last.param_error,
        out.display()
    );
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run {
            config,
            method,
            seed,
            steps,
            out,
        } => {
            let mut cfg = ExperimentConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
            cfg.method = method.unwrap_or(cfg.method);
            cfg.seed = seed.unwrap_or(cfg.seed);
            cfg.steps = steps.unwrap_or(cfg.steps);
            cfg.validate()?;
            let out = out.unwrap_or_else(|| PathBuf::from(run_file_name(&cfg)));
            run_one(&cfg, &out)
        }
        Command::Sweep {
            config,
            methods,
            seeds,
            out_dir,
        } => {
            let base = ExperimentConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
            std::fs::create_dir_all(&out_dir)?;
            let mut failed = 0;
            for method in parse_methods(&methods)? {
                for &seed in &parse_seeds(&seeds)? {
                    let cfg = ExperimentConfig {
                        method,
                        seed,
                        ..base.clone()
                    };
                    // A failed run is reported and the sweep moves on.
                    if let Err(e) = run_one(&cfg, &out_dir.join(run_file_name(&cfg))) {
                        eprintln!("error: {e:#}");
                        failed += 1;
                    }
                }
            }
            if failed > 0 {
                bail!("{failed} run(s) failed");
            }
            Ok(())
        }
        Command::Report { input, out } => {
            let mut paths: Vec<PathBuf> = std::fs::read_dir(&input)
                .with_context(|| format!("reading {}", input.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "csv"))
                .collect();
            paths.sort();
            if paths.is_empty() {
                bail!("no CSV files in {}", input.display());
            }
            let rows = aggregate_report(&paths)?;
            write_summary(&rows, &out)?;
            for r in &rows {
                println!(
                    "{:<13} runs {:>3}  ma_cost {:.4} (iqr {:.4})  param_error {:.4} (iqr {:.4})  constraint_free {:.0} (iqr {:.0})",
                    r.method.name(),
                    r.runs,
                    r.final_ma_cost_median,
                    r.final_ma_cost_iqr,
                    r.final_param_error_median,
                    r.final_param_error_iqr,
                    r.steps_to_constraint_free_median,
                    r.steps_to_constraint_free_iqr
                );
            }
            Ok(())
        }
    }
}
