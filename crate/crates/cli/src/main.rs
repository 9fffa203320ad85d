use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use stvf_core::experiments::{run_study, verify_energy_csv, ExperimentConfig, Study};
use stvf_core::fespace::ElementKind;

#[derive(Parser)]
#[command(name = "stvf", version, about = "Stochastic total variation flow: denoising runs and studies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Single denoising trajectory: energy/error CSV and final image.
    Denoise(RunArgs),
    /// Per-step energy-inequality slack over Monte Carlo realizations.
    EnergyInequality(RunArgs),
    /// Fourth-moment H⁻¹ increments against the time lag.
    IncrementScaling(RunArgs),
    /// Discrete variational inequality for trivial and frozen test processes.
    SviCheck(RunArgs),
    /// Random-walk terminal values against the normal law.
    Donsker(RunArgs),
    /// H¹ stability of the L² projection on a smooth test family.
    ProjectionStability(RunArgs),
    /// Discrete TV of the interpolated square indicator.
    TvOracle(RunArgs),
    /// Re-derive the energy inequality from a denoising CSV.
    CheckCsv { path: PathBuf },
    /// Print the default configuration.
    DefaultConfig,
}

#[derive(Clone, Copy, ValueEnum)]
enum Element {
    P1,
    Cr,
}

#[derive(Args)]
struct RunArgs {
    /// TOML configuration; command-line flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    element: Option<Element>,
    #[arg(long)]
    level: Option<u32>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    realizations: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
}

impl RunArgs {
    fn config(&self, study: Study) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
            None => ExperimentConfig::default(),
        };
        cfg.study = study;
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = &self.out {
            cfg.out = v.clone();
        }
        if let Some(v) = self.element {
            cfg.element = match v {
                Element::P1 => ElementKind::P1,
                Element::Cr => ElementKind::Cr,
            };
        }
        if let Some(v) = self.level {
            cfg.level = v;
        }
        if let Some(v) = self.tau {
            cfg.tau = v;
        }
        if let Some(v) = self.sigma {
            cfg.sigma = v;
        }
        if let Some(v) = self.realizations {
            cfg.realizations = v;
        }
        if let Some(v) = self.workers {
            cfg.workers = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn main() -> anyhow::Result<ExitCode> {
    let cli = Cli::parse();
    let (study, args) = match cli.command {
        Command::Denoise(a) => (Study::Denoise, a),
        Command::EnergyInequality(a) => (Study::EnergyInequality, a),
        Command::IncrementScaling(a) => (Study::IncrementScaling, a),
        Command::SviCheck(a) => (Study::SviCheck, a),
        Command::Donsker(a) => (Study::Donsker, a),
        Command::ProjectionStability(a) => (Study::ProjectionStability, a),
        Command::TvOracle(a) => (Study::TvOracle, a),
        Command::CheckCsv { path } => {
            let file = std::fs::File::open(&path).with_context(|| format!("opening {}", path.display()))?;
            let check = verify_energy_csv(file)?;
            println!(
                "{} steps, min slack {:.6e}, threshold {:.6e}, max mismatch {:.3e}: {}",
                check.steps,
                check.min_slack,
                check.threshold,
                check.max_mismatch,
                if check.pass { "PASS" } else { "FAIL" }
            );
            return Ok(if check.pass { ExitCode::SUCCESS } else { ExitCode::FAILURE });
        }
        Command::DefaultConfig => {
            print!("{}", ExperimentConfig::default().to_toml_string());
            return Ok(ExitCode::SUCCESS);
        }
    };
    let cfg = args.config(study)?;
    let outcome = run_study(&cfg)?;
    println!("{}: {} ({})", study.name(), if outcome.pass { "PASS" } else { "FAIL" }, outcome.summary);
    for f in &outcome.files {
        println!("  wrote {}", f.display());
    }
    Ok(if outcome.pass { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
