use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use kvsim_cli::config::{self, ConfigError};
use kvsim_cli::drivers::{self, RunError};

/// Finite-element simulator for nonlinear Kelvin-Voigt viscoelasticity.
#[derive(Debug, Parser)]
#[command(name = "kvsim", version)]
struct Cli {
    /// Directory for all artifacts; overrides `outputs` in the config.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Worker threads for assembly (default: all cores). Results do not
    /// depend on this value.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Seed of the random samples drawn by the pointwise oracle check.
    /// Simulations themselves are deterministic.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one scenario and write its energy ledger and snapshots.
    Simulate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Sweep time steps and meshes and fit the energy-dissipation error slope.
    Convergence {
        #[arg(long)]
        config: PathBuf,
    },
    /// Compare two time-stepping schemes over a sweep of time steps.
    OracleCompare {
        #[arg(long)]
        config: PathBuf,
    },
}

enum Failure {
    Config(ConfigError),
    Run(RunError),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e)
    }
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        Failure::Run(e)
    }
}

fn output_dir(cli: &Cli, configured: &Path) -> PathBuf {
    cli.output_dir.clone().unwrap_or_else(|| configured.to_path_buf())
}

fn run(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Simulate { config } => {
            let cfg = config::parse_scenario(config::read_json(config)?)?;
            let out = output_dir(cli, &cfg.outputs);
            let s = drivers::run_scenario(&cfg, &out, cli.seed)?;
            println!(
                "{} steps: W {:.6e} -> {:.6e}, dissipated {:.6e}, max balance error {:.3e}; wrote {}",
                s.steps,
                s.initial_elastic_energy,
                s.final_elastic_energy,
                s.cumulative_dissipation_quad,
                s.max_balance_rel_err,
                out.display()
            );
        }
        Command::Convergence { config } => {
            let cfg = config::parse_convergence(config::read_json(config)?)?;
            let out = output_dir(cli, &cfg.scenario.outputs);
            let s = drivers::run_convergence_study(&cfg, &out, cli.seed)?;
            for m in &s.slope {
                match m.slope {
                    Some(k) => println!("mesh {}^3: slope {k:.4}", m.resolution),
                    None => println!("mesh {}^3: slope undefined (fewer than two step sizes)", m.resolution),
                }
            }
            println!("wrote {}", out.display());
        }
        Command::OracleCompare { config } => {
            let cfg = config::parse_oracle_compare(config::read_json(config)?)?;
            let out = output_dir(cli, &cfg.scenario.outputs);
            let s = drivers::run_oracle_comparison(&cfg, &out, cli.seed)?;
            match s.slope {
                Some(k) => println!("deviation slope {k:.4}"),
                None => println!("deviation slope undefined"),
            }
            if !s.failed_rows.is_empty() {
                println!("failed rows at tau = {:?}", s.failed_rows);
            }
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    // sparse factorizations stay sequential so results are reproducible
    kvsim::linsolve::use_sequential_factorization();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot set thread count: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
