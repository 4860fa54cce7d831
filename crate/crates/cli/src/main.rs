use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use unlearn_cli::audit::{audit_dare, audit_sisa};
use unlearn_cli::bench::{run_benchmark, RunOptions};
use unlearn_cli::config::BenchConfig;
use unlearn_cli::dataset::write_csv;
use unlearn_cli::stream::run_streams;
use unlearn_core::{gaussian_blobs, BlobSpec};

#[derive(Parser)]
#[command(name = "unlearn", version, about = "Train, unlearn, and compare against from-scratch retraining")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunArgs {
    /// TOML benchmark configuration.
    config: PathBuf,
    /// Override a config value, e.g. `--set methods.0.shards=8`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Leave clock readings out of the output so reruns are byte-identical.
    #[arg(long)]
    deterministic: bool,
    /// Write into a non-empty output directory.
    #[arg(long)]
    force: bool,
    /// Worker threads (0 = all cores).
    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

impl RunArgs {
    fn load(&self) -> Result<(BenchConfig, RunOptions)> {
        let cfg = BenchConfig::load(&self.config, &self.overrides)?;
        Ok((cfg, RunOptions { deterministic: self.deterministic, force: self.force, jobs: self.jobs }))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run every method × seed cell and write reports.
    Bench(RunArgs),
    /// Simulate a monitored deletion stream per method and seed.
    Stream(RunArgs),
    /// Check a persisted model against its own data.
    Audit {
        #[command(subcommand)]
        target: AuditTarget,
    },
    /// Write a synthetic Gaussian-blob dataset as CSV.
    GenData {
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 10)]
        p: usize,
        #[arg(long, default_value_t = 2.0)]
        class_sep: f64,
        #[arg(long)]
        informative: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum AuditTarget {
    /// Recompute a DaRE forest's cached statistics.
    Dare {
        forest: PathBuf,
        /// Write discrepancies as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Retrain a saved SISA model from its assignment and seeds.
    Sisa {
        model_dir: PathBuf,
        /// Training rows as written by `bench` (train.csv).
        data: PathBuf,
        #[arg(long, default_value_t = 1e-12)]
        tolerance: f64,
    },
}

/// Exit status 2 marks a completed run whose results breach a tolerance.
fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Bench(args) => {
            let (cfg, opts) = args.load()?;
            let out = run_benchmark(&cfg, opts)?;
            for r in &out.reports {
                println!(
                    "{:<14} seed {:<4} acc_err {:.4}  acc_dis {:.4}  disagree {:.2}%  work speedup {:.1}x",
                    r.method, r.seed, r.acc_err, r.acc_dis, r.disagree_pct, r.work_speedup
                );
            }
            println!("reports written to {}", out.output_dir.display());
            for b in &out.breaches {
                eprintln!("tolerance breach: {b}");
            }
            Ok(if out.breaches.is_empty() { 0 } else { 2 })
        }
        Command::Stream(args) => {
            let (cfg, opts) = args.load()?;
            for (path, log) in run_streams(&cfg, opts)? {
                let retrains = log.iter().filter(|s| s.retrained).count();
                println!("{}: {} deletions, {retrains} retrains", path.display(), log.len());
            }
            Ok(0)
        }
        Command::Audit { target: AuditTarget::Dare { forest, out } } => {
            let report = audit_dare(&forest)?;
            if let Some(path) = out {
                std::fs::write(&path, report.to_csv()).with_context(|| format!("writing {}", path.display()))?;
            }
            println!("{} nodes checked, {} discrepancies", report.nodes_checked, report.entries.len());
            Ok(if report.is_clean() { 0 } else { 2 })
        }
        Command::Audit { target: AuditTarget::Sisa { model_dir, data, tolerance } } => {
            let audit = audit_sisa(&model_dir, &data)?;
            println!("{} checkpoints, max |Δ| = {:e}", audit.checkpoints, audit.max_abs_diff);
            Ok(if audit.passes(tolerance) { 0 } else { 2 })
        }
        Command::GenData { n, p, class_sep, informative, seed, out } => {
            let mut spec = BlobSpec::new(n, p, class_sep, seed);
            if let Some(k) = informative {
                spec = spec.with_informative(k);
            }
            write_csv(&gaussian_blobs(&spec)?, &out)?;
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
