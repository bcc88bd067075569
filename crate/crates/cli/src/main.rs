//! Command-line entry point for the experiment harness.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use hardmax_exp::rates::{run_approx_rate, run_audit, run_class_rate};
use hardmax_exp::report::write_json;
use hardmax_exp::verify::run_verify;
use hardmax_exp::{Config, ExitStatus};

#[derive(Parser)]
#[command(name = "hardmax-exp", about = "Hardmax-transformer construction experiments")]
struct Cli {
    /// JSON config file; defaults apply for missing fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed for randomized checks.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output directory for CSV/JSON artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the construction exactness suite against closed-form oracles.
    ConstructVerify,
    /// Measure the sup-error decay as the head count grows.
    ApproxRate,
    /// Measure the excess-risk decay as the sample size grows.
    ClassRate,
    /// Check sparsity and parameter-count budgets of a compiled network.
    Audit,
}

fn run(cli: &Cli, cfg: &Config) -> Result<ExitStatus> {
    let out = cli.out.as_deref();
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
    }
    let pass = match cli.command {
        Command::ConstructVerify => {
            let report = run_verify(cfg.n_verify, cfg.sabotage_b_margin, cli.seed)?;
            for l in &report.checks {
                println!(
                    "{:15} cases={:5} max_dev={:.3e} {}",
                    l.name,
                    l.cases,
                    l.max_deviation,
                    if l.pass { "pass" } else { "FAIL" }
                );
            }
            if let Some(dir) = out {
                write_json(&dir.join("verify.json"), &report)?;
            }
            report.pass
        }
        Command::ApproxRate => {
            let result = run_approx_rate(cfg, &cfg.model, out)?;
            for p in &result.points {
                println!("h={:6} sup_error={:.6e}", p.x as usize, p.error);
            }
            println!(
                "slope={:.4} target={:.4} {}",
                result.slope,
                result.target,
                if result.pass { "pass" } else { "FAIL" }
            );
            result.pass
        }
        Command::ClassRate => {
            let result = run_class_rate(cfg, &cfg.model, out)?;
            for p in &result.points {
                println!(
                    "n={:6} median_excess_risk={:.6e} stderr={:.2e}",
                    p.x as usize, p.error, p.stderr
                );
            }
            println!(
                "slope={:.4} target={:.4} {}",
                result.slope,
                result.target,
                if result.pass { "pass" } else { "FAIL" }
            );
            let mut pass = result.pass;
            if !cfg.robustness_model.is_empty() {
                let other = run_class_rate(cfg, &cfg.robustness_model.clone(), out)?;
                let diff = (other.slope - result.slope).abs();
                let ok = diff <= 0.15;
                println!(
                    "robustness: {} slope={:.4} diff={:.4} {}",
                    cfg.robustness_model,
                    other.slope,
                    diff,
                    if ok { "pass" } else { "FAIL" }
                );
                pass = pass && other.pass && ok;
            }
            pass
        }
        Command::Audit => {
            let report = run_audit(cfg, out)?;
            println!(
                "nonzeros {} <= {}: {}",
                report.nonzeros,
                report.nonzero_bound,
                if report.nonzero_pass { "pass" } else { "FAIL" }
            );
            println!(
                "param_slots {} <= {}: {}",
                report.param_slots,
                report.param_bound,
                if report.param_pass { "pass" } else { "FAIL" }
            );
            report.pass()
        }
    };
    Ok(if pass {
        ExitStatus::Pass
    } else {
        ExitStatus::CheckFailed
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.jobs > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.jobs)
            .build_global()
        {
            eprintln!("failed to configure thread pool: {e}");
            return ExitCode::from(ExitStatus::ConfigError.code() as u8);
        }
    }
    let cfg = match &cli.config {
        Some(path) => match Config::load(path) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("config error: {e:#}");
                return ExitCode::from(ExitStatus::ConfigError.code() as u8);
            }
        },
        None => Config::default(),
    };
    match run(&cli, &cfg) {
        Ok(status) => ExitCode::from(status.code() as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(ExitStatus::CheckFailed.code() as u8)
        }
    }
}
