//! Command-line driver: stage-by-stage or end-to-end experiment runs.
//!
//! Exit codes: 0 success, 1 configuration or I/O problem, 2 algorithmic
//! failure (e.g. the anchor clustering found the wrong number of components).
//! Failures print a single JSON object to stderr.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedmix::harness::{
    eval_stage, generate_stage, phase1_stage, phase2_stage, run_full, ExperimentConfig,
};
use fedmix::phase2::GlobalModel;
use fedmix::Error;

const OUT_ENV: &str = "FEDMIX_OUT";

#[derive(Parser)]
#[command(name = "fedmix", version, about = "Clustered federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Master seed; defaults to the first entry of the config's seed list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to the config's output_dir, then $FEDMIX_OUT.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate an instance and persist it under the seed's run directory.
    Generate(Common),
    /// Run moment descent on a persisted instance.
    Phase1(Common),
    /// Run refinement on a persisted instance.
    Phase2 {
        #[command(flatten)]
        common: Common,
        /// JSON file holding a starting model (list of k vectors); defaults
        /// to the persisted phase-1 centers.
        #[arg(long)]
        theta_start: Option<PathBuf>,
    },
    /// Full pipeline over every configured seed.
    Full(Common),
    /// Recompute and print the evaluation report for a completed run.
    Eval(Common),
}

fn load_config(path: &Path) -> Result<ExperimentConfig, Error> {
    let bytes = std::fs::read(path)?;
    let cfg: ExperimentConfig = serde_json::from_slice(&bytes)?;
    cfg.validate()?;
    Ok(cfg)
}

fn resolve(cfg: &mut ExperimentConfig, common: &Common) -> Result<(), Error> {
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    } else if cfg.output_dir.as_os_str().is_empty() {
        match std::env::var_os(OUT_ENV) {
            Some(dir) => cfg.output_dir = PathBuf::from(dir),
            None => {
                return Err(Error::InvalidConfig(format!(
                    "no output directory: pass --out, set output_dir, or set ${OUT_ENV}"
                )))
            }
        }
    }
    if let Some(seed) = common.seed {
        cfg.seeds = vec![seed];
    }
    Ok(())
}

fn seed_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.seed_dir(cfg.seeds[0])
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<(), Error> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Generate(common) => {
            let mut cfg = load_config(&common.config)?;
            resolve(&mut cfg, &common)?;
            let dir = seed_dir(&cfg);
            std::fs::create_dir_all(&dir)?;
            let manifest = generate_stage(&dir, &cfg.mixture, cfg.seeds[0])?;
            print_json(&serde_json::json!({
                "command": "generate",
                "dir": dir,
                "clients": manifest.client_sizes.len(),
                "total_points": manifest.client_sizes.iter().sum::<usize>(),
            }))
        }
        Command::Phase1(common) => {
            let mut cfg = load_config(&common.config)?;
            resolve(&mut cfg, &common)?;
            let summary = phase1_stage(&seed_dir(&cfg), &cfg.phase1)?;
            print_json(&summary)
        }
        Command::Phase2 { common, theta_start } => {
            let mut cfg = load_config(&common.config)?;
            resolve(&mut cfg, &common)?;
            let start = match theta_start {
                Some(path) => {
                    let thetas: Vec<Vec<f64>> = serde_json::from_slice(&std::fs::read(path)?)?;
                    Some(GlobalModel::new(thetas, 0)?)
                }
                None => None,
            };
            let summary = phase2_stage(&seed_dir(&cfg), &cfg.phase2, start)?;
            print_json(&summary)
        }
        Command::Full(common) => {
            let mut cfg = load_config(&common.config)?;
            resolve(&mut cfg, &common)?;
            let summaries = run_full(&cfg)?;
            print_json(&summaries)?;
            // A run where every seed failed exits with the failure code so
            // scripted callers notice; partial failures are recorded outcomes.
            if summaries.iter().all(|s| s.failure_code != 0) {
                let code = summaries.iter().map(|s| s.failure_code).max().unwrap_or(2);
                std::process::exit(code);
            }
            Ok(())
        }
        Command::Eval(common) => {
            let mut cfg = load_config(&common.config)?;
            resolve(&mut cfg, &common)?;
            let report = eval_stage(&seed_dir(&cfg))?;
            print_json(&report)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if e.use_stderr() {
                eprintln!(
                    "{}",
                    serde_json::json!({ "error": e.to_string(), "code": 1 })
                );
                return ExitCode::from(1);
            }
            // --help / --version.
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.exit_code();
            eprintln!(
                "{}",
                serde_json::json!({ "error": e.to_string(), "code": code })
            );
            ExitCode::from(code as u8)
        }
    }
}
