use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use geotomo::cli::{run, Command, ExperimentConfig, Suite};
use geotomo::Error;

#[derive(Parser)]
#[command(name = "geotomo", version, about = "Geodesic ray transforms and tensor tomography on simple charts")]
struct Args {
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize ray data for a configured field.
    Transform,
    /// Run identity checks; exit 1 if any fails.
    Verify {
        /// Suites to run, overriding the config list.
        #[arg(long = "suite")]
        suites: Vec<Suite>,
    },
    /// Scan the influx fan for β-conjugate points.
    Conjugate {
        #[arg(long = "beta")]
        betas: Vec<f64>,
    },
    /// Reconstruct the solenoidal part from ray data.
    Invert,
    /// Helmholtz decomposition of a configured field.
    Decompose,
    /// Exit times over the influx fan.
    Tau,
}

fn main() -> ExitCode {
    let args = Args::parse();
    match execute(args) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn execute(args: Args) -> Result<i32, Error> {
    let path = args.config.ok_or_else(|| Error::Config("--config is required".into()))?;
    let mut cfg = ExperimentConfig::load(&path)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let command = match args.cmd {
        Cmd::Transform => Command::Transform,
        Cmd::Verify { suites } => {
            if !suites.is_empty() {
                cfg.verify.get_or_insert_with(Default::default).suites = suites;
            }
            Command::Verify
        }
        Cmd::Conjugate { betas } => {
            if !betas.is_empty() {
                cfg.conjugate = Some(geotomo::cli::ConjugateConfig { betas });
            }
            Command::Conjugate
        }
        Cmd::Invert => Command::Invert,
        Cmd::Decompose => Command::Decompose,
        Cmd::Tau => Command::Tau,
    };
    cfg.validate()?;
    if let Some(n) = args.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global().map_err(|e| Error::Config(e.to_string()))?;
    }
    let outcome = run(command, &cfg)?;
    outcome.write(&args.out)?;
    println!("{}", outcome.message);
    Ok(outcome.exit_code())
}
