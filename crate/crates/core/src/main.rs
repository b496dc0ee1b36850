use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use highfield::cli::{exit_code, parse_scenario, run, Command};

#[derive(Parser)]
#[command(name = "highfield", about = "Effective high-field dynamics laboratory")]
struct Args {
    #[command(subcommand)]
    command: Cmd,
    /// Scenario file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Seed for randomized steps.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Lowest eigenpairs of the fiber operator at p = 0.
    Spectrum,
    /// First- and second-order coefficients of every cluster.
    Coeffs,
    /// Exact and effective evolution with z-space snapshots.
    Evolve,
    /// Error table over eps and t with fitted rates.
    Converge,
    /// Defects of the truncated series and the lifted projection.
    Almostinv,
    /// Decay diagnostics and weighted resolvent norms.
    Decay,
    /// Effective evolution of a multi-cluster initial state.
    General,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Spectrum => Command::Spectrum,
            Cmd::Coeffs => Command::Coeffs,
            Cmd::Evolve => Command::Evolve,
            Cmd::Converge => Command::Converge,
            Cmd::Almostinv => Command::Almostinv,
            Cmd::Decay => Command::Decay,
            Cmd::General => Command::General,
        }
    }
}

fn main() -> ExitCode {
    let args = Args::parse();
    if args.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(args.threads).build_global() {
            eprintln!("error: cannot configure thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    let Some(config) = args.config else {
        eprintln!("error: --config is required");
        return ExitCode::from(2);
    };
    let text = match std::fs::read_to_string(&config) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", config.display());
            return ExitCode::from(1);
        }
    };
    let result = parse_scenario(&text).and_then(|mut plan| {
        plan.command = args.command.into();
        plan.out_dir = args.out.clone();
        plan.seed = args.seed;
        run(&plan)
    });
    let code = exit_code(&result);
    match &result {
        Ok(report) => {
            for line in &report.summary {
                println!("{line}");
            }
            for name in &report.failed {
                eprintln!("check failed: {name}");
            }
        }
        Err(e) => eprintln!("error: {e}"),
    }
    ExitCode::from(code as u8)
}
