use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gmmsteer_cli::commands::{self, Problem};
use gmmsteer_cli::scenario::Overrides;
use gmmsteer_cli::{CliError, CliResult};

#[derive(Parser)]
#[command(name = "gmmsteer", version, about = "Density steering between Gaussian mixtures")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Terminal component count for the iterative solvers.
    #[arg(long)]
    q: Option<usize>,
    #[arg(long)]
    kappa: Option<f64>,
    /// Comma-separated step bounds `k0,k1,…`.
    #[arg(long, value_delimiter = ',')]
    kappas: Option<Vec<f64>>,
    /// Convergence tolerance of the iterative solvers; the error level for `bounds`.
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long = "max-iter")]
    max_iter: Option<usize>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides { seed: self.seed, q: self.q, kappa: self.kappa, kappas: self.kappas.clone(), eps: self.eps, max_iter: self.max_iter }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Solve a steering problem on a scenario.
    Steer {
        #[arg(value_enum)]
        problem: Problem,
        scenario: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Fit a mixture to a sample CSV with EM.
    FitGmm {
        samples: PathBuf,
        #[arg(long)]
        r: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Simulate a stored policy on a scenario.
    Simulate {
        policy: PathBuf,
        scenario: PathBuf,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Monte Carlo validation of a stored policy.
    Validate {
        policy: PathBuf,
        scenario: PathBuf,
        #[arg(long, default_value_t = 100_000)]
        count: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Error-propagation bounds of a stored policy.
    Bounds {
        policy: PathBuf,
        scenario: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

fn run(cli: Cli) -> CliResult<String> {
    match cli.command {
        Command::Steer { problem, scenario, common } => {
            let m = commands::steer(problem, &scenario, &common.overrides(), &common.out)?;
            Ok(json(&m))
        }
        Command::FitGmm { samples, r, common } => {
            let rep = commands::fit_gmm(&samples, r, common.seed.unwrap_or(0), common.max_iter.unwrap_or(500), &common.out)?;
            Ok(json(&rep))
        }
        Command::Simulate { policy, scenario, count, common } => {
            let n = commands::simulate(&policy, &scenario, count, &common.overrides(), &common.out)?;
            Ok(format!("{{\"samples\":{n}}}"))
        }
        Command::Validate { policy, scenario, count, common } => {
            let v = commands::validate(&policy, &scenario, count, &common.overrides(), &common.out)?;
            Ok(format!("{{\"pass\":{}}}", v.pass))
        }
        Command::Bounds { policy, scenario, common } => {
            let mut ov = common.overrides();
            let eps = ov.eps.take().ok_or_else(|| CliError::Config("bounds needs --eps".into()))?;
            let b = commands::bounds(&policy, &scenario, eps, &ov, &common.out)?;
            Ok(json(&b))
        }
    }
}

fn json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string(v).unwrap_or_default()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(line) => {
            println!("{line}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.report());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
