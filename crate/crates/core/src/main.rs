use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use memflow::cli::commands::{self, ExitStatus};
use memflow::cli::parse_config;

/// Thread count for the intra-step parallel loops.
const THREADS_ENV: &str = "MEMFLOW_THREADS";

#[derive(Parser)]
#[command(name = "memflow", version, about = "Viscoelastic flow with an integral constitutive law on the 2D torus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a simulation described by a TOML config.
    Run {
        config: PathBuf,
        /// Resume from this checkpoint directory.
        #[arg(long)]
        restart: Option<PathBuf>,
    },
    /// Check the kernel and damping assumptions for the model catalog and the tensor inequalities.
    Verify {
        /// Also check `h(x) = 1/(1 + a x^p)`, given as `a,p`.
        #[arg(long, value_name = "A,P", value_parser = parse_pair)]
        kbkz: Option<(f64, f64)>,
    },
    /// Run an Oldroyd-B config alongside the differential oracle.
    Oracle {
        config: PathBuf,
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
    },
    /// Coupled self-convergence over `levels` halvings of dt.
    Converge {
        config: PathBuf,
        #[arg(long, default_value_t = 3)]
        levels: usize,
    },
}

fn parse_pair(s: &str) -> Result<(f64, f64), String> {
    let (a, p) = s.split_once(',').ok_or("expected `a,p`")?;
    let a = a.trim().parse().map_err(|e| format!("{e}"))?;
    let p = p.trim().parse().map_err(|e| format!("{e}"))?;
    Ok((a, p))
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v.parse().with_context(|| format!("{THREADS_ENV}={v}"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn exit(status: ExitStatus) -> ExitCode {
    ExitCode::from(status.code() as u8)
}

fn main() -> anyhow::Result<ExitCode> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    init_threads()?;
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, restart } => {
            let cfg = parse_config(&config)?;
            let outcome = commands::run(&cfg, restart.as_deref())?;
            print!("{}", commands::summarize(&outcome));
            println!("diagnostics: {}", outcome.csv_path.display());
            if let Some(m) = &outcome.message {
                eprintln!("{m}");
            }
            Ok(exit(outcome.status))
        }
        Command::Verify { kbkz } => {
            let report = commands::verify(kbkz);
            print!("{}", report.table());
            Ok(exit(if report.pass() {
                ExitStatus::Ok
            } else {
                ExitStatus::VerifyFailed
            }))
        }
        Command::Oracle { config, tol } => {
            let cfg = parse_config(&config)?;
            let (outcome, gap) = commands::oracle(&cfg, tol)?;
            print!("{}", commands::summarize(&outcome));
            println!("oracle gap at t = {}: {gap:.3e} (tolerance {tol:.1e})", cfg.time.t_final);
            Ok(exit(outcome.status))
        }
        Command::Converge { config, levels } => {
            let cfg = parse_config(&config)?;
            print!("{}", commands::converge(&cfg, levels)?);
            Ok(ExitCode::SUCCESS)
        }
    }
}
