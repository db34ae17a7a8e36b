use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use shaftpower::metrics::NmaeDenominator;
use shaftpower_cli::commands::{self, Dataset};
use shaftpower_cli::config::parse_seed_list;
use shaftpower_cli::pipeline::{AtStage, StageResult};
use shaftpower_cli::{run_full_experiment, ExperimentConfig};

/// Shaft-power prediction with transfer learning from sensor data to noon reports.
#[derive(Parser, Debug)]
#[command(name = "shaftpower", version)]
struct Cli {
    #[command(flatten)]
    common: Common,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON experiment configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Run a single seed.
    #[arg(long, global = true, conflicts_with = "seeds")]
    seed: Option<u64>,

    /// Seed list, e.g. `0-9` or `0,3,7`.
    #[arg(long, global = true)]
    seeds: Option<String>,

    /// Output directory (default `out`)
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,

    /// Directory holding fleet.json, the weather grid and vessel CSVs (default `data`)
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,

    /// Restrict to this vessel (repeatable).
    #[arg(long = "vessel", global = true)]
    vessels: Vec<String>,

    /// NMAE denominator: `range` or `mean`.
    #[arg(long, global = true)]
    nmae_denominator: Option<NmaeDenominator>,

    /// Re-initialize the output layer before fine-tuning.
    #[arg(long, global = true)]
    reinit_head: bool,

    /// Encode direction features as sine/cosine pairs.
    #[arg(long, global = true)]
    encode_directions: bool,

    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic fleet into the data directory.
    GenSynth,
    /// Attach gridded weather to sensor records.
    Fuse,
    /// Train sensor-data models.
    TrainBaseline,
    /// Fine-tune the output layer of a sensor model on noon reports.
    Finetune {
        /// Base checkpoint used for every seed.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Vessel whose sensor checkpoints to start from.
        #[arg(long)]
        base: Option<String>,
    },
    /// Train noon-report models from scratch.
    TrainScratch,
    /// Score a checkpoint on one vessel's test split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "noon")]
        dataset: Dataset,
    },
    /// Run the complete comparison and write tables, plots and checkpoints.
    FullExperiment,
    /// Feature/target correlations per vessel.
    Correlations,
}

fn resolve(common: &Common, command: &Command) -> StageResult<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p).at("config")?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seeds = vec![s];
        if matches!(command, Command::GenSynth) {
            cfg.synth.seed = s;
        }
    }
    if let Some(list) = &common.seeds {
        cfg.seeds = parse_seed_list(list).at("config")?;
    }
    if let Some(d) = &common.out_dir {
        cfg.out_dir = d.clone();
    }
    if let Some(d) = &common.data_dir {
        cfg.data_dir = d.clone();
    }
    if !common.vessels.is_empty() {
        cfg.vessels = Some(common.vessels.clone());
    }
    if let Some(n) = common.nmae_denominator {
        cfg.nmae_denominator = n;
    }
    cfg.reinit_head |= common.reinit_head;
    cfg.encode_directions |= common.encode_directions;
    cfg.validate().at("config")?;
    Ok(cfg)
}

fn dispatch(cli: &Cli) -> StageResult<()> {
    let cfg = resolve(&cli.common, &cli.command)?;
    match &cli.command {
        Command::GenSynth => commands::gen_synth(&cfg),
        Command::Fuse => commands::fuse_cmd(&cfg),
        Command::TrainBaseline => commands::train_baseline_cmd(&cfg),
        Command::Finetune { checkpoint, base } => commands::finetune_cmd(&cfg, checkpoint.as_deref(), base.as_deref()),
        Command::TrainScratch => commands::train_scratch_cmd(&cfg),
        Command::Evaluate { checkpoint, dataset } => commands::evaluate_cmd(&cfg, checkpoint, *dataset),
        Command::FullExperiment => {
            let outcome = run_full_experiment(&cfg)?;
            println!(
                "base vessel {}; {} runs; outputs in {}",
                outcome.base_vessel,
                outcome.runs.len(),
                cfg.out_dir.display()
            );
            for name in ["scratch_vs_tl", "nmae_bridge"] {
                if let Ok(text) = std::fs::read_to_string(cfg.out_dir.join("tables").join(format!("{name}.txt"))) {
                    print!("\n{text}");
                }
            }
            Ok(())
        }
        Command::Correlations => commands::correlations_cmd(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.common.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
