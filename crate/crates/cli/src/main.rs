use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lda_mixing::experiment::{read_config_file, run, Command, ExperimentConfig, Overrides};
use lda_mixing::Error;

/// Exact and simulated mixing experiments for the two-document LDA Gibbs sampler.
#[derive(Parser)]
#[command(name = "lda-mix", version)]
struct Cli {
    #[command(subcommand)]
    command: Sub,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Subcommand, Clone, Copy)]
enum Sub {
    /// Tables of the exact posterior densities.
    Posterior,
    /// Exact TV curve, mixing time, spectral gap and level-set conductance.
    MixExact,
    /// Trajectory of the full, lumped or surrogate chain.
    Simulate,
    /// Hessian eigenvalues and gradient on a grid over the ridge.
    Landscape,
    /// Numerical checks of the appendix positivity argument.
    AppendixCheck,
    /// Canonical-path congestion and the bounds it implies.
    Paths,
    /// Two-phase coupling times.
    Couple,
    /// Mixing and relaxation times over several m with power-law fits.
    Scaling,
}

impl From<Sub> for Command {
    fn from(s: Sub) -> Self {
        match s {
            Sub::Posterior => Command::Posterior,
            Sub::MixExact => Command::MixExact,
            Sub::Simulate => Command::Simulate,
            Sub::Landscape => Command::Landscape,
            Sub::AppendixCheck => Command::AppendixCheck,
            Sub::Paths => Command::Paths,
            Sub::Couple => Command::Couple,
            Sub::Scaling => Command::Scaling,
        }
    }
}

#[derive(Args)]
struct Flags {
    /// Scale parameter, or a comma-separated list (multiples of 10).
    #[arg(long, global = true)]
    m: Option<String>,
    /// TV threshold for mixing times.
    #[arg(long, global = true)]
    kappa: Option<String>,
    #[arg(long, global = true)]
    seed: Option<String>,
    /// Step limit for mixing-time searches and coupling phase 1.
    #[arg(long = "t-max", global = true)]
    t_max: Option<String>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<String>,
    /// Kernel for exact analysis and simulation: L or Z.
    #[arg(long, global = true)]
    kernel: Option<String>,
    /// Largest m for which the state space is enumerated.
    #[arg(long, global = true)]
    cap: Option<String>,
    /// Largest m for which all path pairs are enumerated.
    #[arg(long = "path-cap", global = true)]
    path_cap: Option<String>,
    /// Landscape grid points per axis.
    #[arg(long, global = true)]
    grid: Option<String>,
    /// Appendix mesh size.
    #[arg(long, global = true)]
    mesh: Option<String>,
    /// Simulation steps.
    #[arg(long, global = true)]
    steps: Option<String>,
    /// Trajectory thinning interval.
    #[arg(long, global = true)]
    thin: Option<String>,
    /// Coupling replicas.
    #[arg(long, global = true)]
    replicas: Option<String>,
    /// Sampled path pairs above the path cap.
    #[arg(long, global = true)]
    pairs: Option<String>,
    /// Simulated chain: full or kernel.
    #[arg(long, global = true)]
    chain: Option<String>,
    /// Coupling start: mode or lumped.
    #[arg(long, global = true)]
    start: Option<String>,
    /// Flat key = value file; flags take precedence over it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

impl Flags {
    fn overrides(&self) -> Result<Overrides, Error> {
        let mut o = Overrides::default();
        let pairs = [
            ("m", &self.m),
            ("kappa", &self.kappa),
            ("seed", &self.seed),
            ("t-max", &self.t_max),
            ("out", &self.out),
            ("kernel", &self.kernel),
            ("cap", &self.cap),
            ("path-cap", &self.path_cap),
            ("grid", &self.grid),
            ("mesh", &self.mesh),
            ("steps", &self.steps),
            ("thin", &self.thin),
            ("replicas", &self.replicas),
            ("pairs", &self.pairs),
            ("chain", &self.chain),
            ("start", &self.start),
        ];
        for (key, value) in pairs {
            if let Some(v) = value {
                o.set(key, v).map_err(|e| Error::InvalidArgument(format!("--{key}: {e}")))?;
            }
        }
        Ok(o)
    }
}

fn configure(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let flags = cli.flags.overrides()?;
    let file = match &cli.flags.config {
        Some(p) => read_config_file(p)?,
        None => Overrides::default(),
    };
    ExperimentConfig::resolve(cli.command.into(), &flags.over(&file))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match configure(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match run(&cfg) {
        Ok(outcome) => {
            for f in &outcome.files {
                println!("{}", f.display());
            }
            if outcome.passed {
                ExitCode::SUCCESS
            } else {
                eprintln!("{}: checks failed", cfg.command);
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
