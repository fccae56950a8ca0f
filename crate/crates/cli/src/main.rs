//! `sqs`: run the Server Quality Score pipeline over slam point-by-point data.
//!
//! Settings come from an optional `key = value` config file; any flag given
//! on the command line wins. Exit status is 0 when every dataset succeeds,
//! 1 when at least one dataset failed, and 2 for configuration errors.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sqs_core::ingest::Dataset;
use sqs_core::pipeline::{run, PipelineConfig, Stage, StageSelection};
use sqs_core::Error;

#[derive(Debug, Parser)]
#[command(name = "sqs", version, about = "Server Quality Scores from Grand Slam point-by-point data")]
struct Cli {
    #[command(subcommand)]
    command: Option<Command>,

    /// Key-value config file; flags override its entries.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Directory holding `<year>-<slam>-matches.csv` and `-points.csv` files.
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,

    /// Output directory for artifacts and the manifest.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Seed for the train/test split.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Maximum datasets processed at once.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Dataset such as `wimbledon-M` or `usopen-W`; repeat for several.
    #[arg(long = "dataset", global = true)]
    datasets: Vec<Dataset>,

    /// Season to include; repeat for several.
    #[arg(long = "year", global = true)]
    years: Vec<i32>,

    /// Servers need strictly more training serves than this.
    #[arg(long, global = true)]
    min_serves: Option<usize>,

    /// Share of each season's matches used for training.
    #[arg(long, global = true)]
    split_fraction: Option<f64>,

    /// Stage to run (`all` runs every stage); same as the subcommand.
    #[arg(long, global = true)]
    stage: Option<StageSelection>,

    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Parse and clean match and point files.
    Ingest,
    /// Split matches and summarize each server's training serves.
    Features,
    /// Fit the mixed model for each serve type.
    Fit,
    /// Turn fits into per-server scores.
    Score,
    /// Fold training matches into weighted Elo ratings.
    Welo,
    /// Regress test-split outcomes on scores and ratings.
    Evaluate,
    /// Write top-10 ranking tables.
    Rank,
    /// Run every stage in order.
    All,
}

impl From<Command> for StageSelection {
    fn from(c: Command) -> Self {
        match c {
            Command::Ingest => StageSelection::Only(Stage::Ingest),
            Command::Features => StageSelection::Only(Stage::Features),
            Command::Fit => StageSelection::Only(Stage::Fit),
            Command::Score => StageSelection::Only(Stage::Score),
            Command::Welo => StageSelection::Only(Stage::Welo),
            Command::Evaluate => StageSelection::Only(Stage::Evaluate),
            Command::Rank => StageSelection::Only(Stage::Rank),
            Command::All => StageSelection::All,
        }
    }
}

fn build_config(cli: &Cli) -> Result<(PipelineConfig, StageSelection), Error> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::from_file(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(d) = &cli.data_dir {
        cfg.data_dir = d.clone();
    }
    if let Some(o) = &cli.out {
        cfg.output_dir = o.clone();
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(j) = cli.jobs {
        cfg.jobs = j;
    }
    if !cli.datasets.is_empty() {
        cfg.datasets = cli.datasets.clone();
    }
    if !cli.years.is_empty() {
        cfg.years = cli.years.clone();
    }
    if let Some(m) = cli.min_serves {
        cfg.min_serves = m;
    }
    if let Some(f) = cli.split_fraction {
        cfg.split_fraction = f;
    }
    let selection = match (cli.command.map(StageSelection::from), cli.stage) {
        (Some(a), Some(b)) if a != b => {
            return Err(Error::Config(format!("subcommand {a:?} conflicts with --stage {b:?}")));
        }
        (Some(a), _) | (None, Some(a)) => a,
        (None, None) => StageSelection::All,
    };
    cfg.validate()?;
    Ok((cfg, selection))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let (cfg, selection) = match build_config(&cli) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("sqs: configuration error: {e}");
            return ExitCode::from(2);
        }
    };
    match run(&cfg, selection) {
        Ok(summary) => {
            for d in &summary.manifest.datasets {
                match &d.error {
                    None => println!("{:<14} ok", d.dataset),
                    Some(e) => println!("{:<14} FAILED  {e}", d.dataset),
                }
            }
            println!("manifest: {}", summary.manifest_path.display());
            ExitCode::from(summary.exit_code() as u8)
        }
        Err(e @ Error::Config(_)) => {
            eprintln!("sqs: configuration error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("sqs: {e}");
            ExitCode::from(1)
        }
    }
}
