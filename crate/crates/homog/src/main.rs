use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use homog::runner::{self, ExperimentConfig, ExperimentKind};

#[derive(Parser)]
#[command(
    name = "homog",
    about = "Desk-scale elliptic homogenization experiments: correctors, \
             effective tensors, invariant measures, divergence-form \
             rewrites, Green-function decay laws, and two-scale studies",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment configuration (TOML; unknown keys are errors).
    #[arg(long)]
    config: PathBuf,
    /// Output directory for CSV, JSON, and field dumps.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker threads for independent experiment items.
    #[arg(long)]
    threads: Option<usize>,
    /// Override the probe seed from the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Periodic cell problems: correctors, homogenized tensor, invariant
    /// measure, skew potential.
    Cell(RunArgs),
    /// Defect corrector on a truncated box with decay diagnostics.
    DefectCorrector(RunArgs),
    /// Operator-norm lower estimates along the defect interpolation.
    NormSweep(RunArgs),
    /// Non-divergence solves, invariant measure, and the rewrite into
    /// divergence form with consistency checks.
    NondivPipeline(RunArgs),
    /// Green-function columns and decay-law fits.
    Green(RunArgs),
    /// Oscillatory solves and two-scale convergence study.
    Twoscale(RunArgs),
    /// Whole-space counterexample run (d = 3, ball source).
    Counterexample(RunArgs),
}

fn dispatch(kind: ExperimentKind, args: &RunArgs) -> Result<bool, homog::Error> {
    if let Some(t) = args.threads {
        if t == 0 {
            return Err(homog::Error::Config("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .ok();
    }
    let mut config = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.run.seed = seed;
    }
    let record = runner::run(kind, &config, &args.out)?;
    for v in &record.verdicts {
        println!(
            "{}: {} — {}",
            v.name,
            if v.passed { "pass" } else { "FAIL" },
            v.detail
        );
    }
    eprintln!(
        "{} finished in {:.2}s, artifacts in {}",
        record.kind,
        record.seconds,
        args.out.display()
    );
    Ok(record.passed())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (kind, args) = match &cli.command {
        Command::Cell(a) => (ExperimentKind::Cell, a),
        Command::DefectCorrector(a) => (ExperimentKind::DefectCorrector, a),
        Command::NormSweep(a) => (ExperimentKind::NormSweep, a),
        Command::NondivPipeline(a) => (ExperimentKind::NondivPipeline, a),
        Command::Green(a) => (ExperimentKind::Green, a),
        Command::Twoscale(a) => (ExperimentKind::Twoscale, a),
        Command::Counterexample(a) => (ExperimentKind::Counterexample, a),
    };
    match dispatch(kind, args) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("one or more checks failed");
            ExitCode::from(1)
        }
        Err(e @ (homog::Error::Config(_) | homog::Error::Io(_))) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
