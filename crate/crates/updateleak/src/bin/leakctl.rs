use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use updateleak::config::ExperimentConfig;
use updateleak::eval::write_figures;
use updateleak::pipeline::{load_report, prepare_data, run_pipeline, PrepareOutcome, RunDir, Stage};
use updateleak::Result;

/// Reconstruction attacks against online-learning updates.
#[derive(Parser)]
#[command(name = "leakctl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the top-level seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the run directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Draws the splits and writes the manifest.
    PrepareData {
        #[command(flatten)]
        common: Common,
    },
    /// Runs pipeline stages against a prepared run directory.
    RunPipeline {
        #[command(flatten)]
        common: Common,
        /// Comma-separated subset of victim,corpus,attack,evaluate.
        #[arg(long, value_delimiter = ',', default_value = "victim,corpus,attack,evaluate")]
        stages: Vec<Stage>,
        /// Reruns requested stages even when their artifacts are current.
        #[arg(long)]
        force: bool,
    },
    /// Prints the summary of a finished run and redraws its figures.
    Report {
        #[command(flatten)]
        common: Common,
    },
}

fn resolve(common: &Common) -> Result<(ExperimentConfig, RunDir)> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir.clone_from(out);
    }
    let dir = RunDir::new(&cfg.out_dir);
    Ok((cfg, dir))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::PrepareData { common } => {
            let (cfg, dir) = resolve(&common)?;
            match prepare_data(&cfg, &dir)? {
                PrepareOutcome::Written => println!("wrote {}", dir.manifest().display()),
                PrepareOutcome::UpToDate => println!("up to date: {}", dir.manifest().display()),
            }
        }
        Command::RunPipeline { common, stages, force } => {
            let (cfg, dir) = resolve(&common)?;
            if let Some(report) = run_pipeline(&cfg, &dir, &stages, force)? {
                print!("{}", report.summary());
            }
        }
        Command::Report { common } => {
            let (cfg, dir) = resolve(&common)?;
            let report = load_report(&dir)?;
            print!("{}", report.summary());
            if cfg.eval.figures {
                write_figures(&report, &dir.figures())?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
