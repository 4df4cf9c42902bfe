//! `csi`: ingestion, stratification, contrastive pre-training, evaluation
//! and ablations for compound-protein interaction data.

mod commands;
mod error;
mod manifest;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::{Global, Overrides, Preset};
use csi_core::synth::PlantedConfig;

#[derive(Debug, Parser)]
#[command(name = "csi", version, about = "Contrastive stratification lab for compound-protein interaction prediction")]
struct Cli {
    /// Seed for splits, negative sampling, initialization and batching.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Experiment settings as TOML or JSON, overlaid on the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; receives every artifact and manifest.json.
    #[arg(long, global = true, default_value = "csi-out")]
    out: PathBuf,
    /// Worker threads. Training is sequential, so only 1 changes nothing;
    /// the value is recorded in the manifest.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    threads: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Experiment {
    /// Interactions TSV, reactions.jsonl, or a directory holding either.
    input: PathBuf,
    #[arg(long, value_enum, default_value = "full")]
    preset: Preset,
    /// none, compound, sequence, compound+sequence, reaction, rclass or ec.
    #[arg(long)]
    stratification: Option<String>,
    /// Contrastive temperature.
    #[arg(long)]
    tau: Option<f64>,
    /// Also write SVG loss curves and metric bars.
    #[arg(long)]
    svg: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate and normalize a dataset and report its counts.
    Ingest { input: PathBuf },
    /// Dataset counts and strata statistics for every applicable keying.
    Stats { input: PathBuf },
    /// Write the congruent-view strata of one keying as JSON lines.
    Stratify {
        input: PathBuf,
        #[arg(long, default_value = "compound")]
        keying: String,
    },
    /// Generate a planted block-structured benchmark.
    Synth {
        #[arg(long, default_value_t = PlantedConfig::default().blocks)]
        blocks: usize,
        #[arg(long, default_value_t = PlantedConfig::default().compounds_per_block)]
        compounds_per_block: usize,
        #[arg(long, default_value_t = PlantedConfig::default().sequences_per_block)]
        sequences_per_block: usize,
        #[arg(long, default_value_t = PlantedConfig::default().variants)]
        variants: usize,
        #[arg(long, default_value_t = PlantedConfig::default().partners)]
        partners: usize,
        #[arg(long, default_value_t = PlantedConfig::default().noise)]
        noise: f64,
        /// Zero skips the reaction bundle.
        #[arg(long, default_value_t = PlantedConfig::default().reactions_per_block)]
        reactions_per_block: usize,
    },
    /// Train one model end to end and evaluate it.
    Run {
        #[command(flatten)]
        experiment: Experiment,
        /// Views to drop: V1, V2, V3, compound or sequence.
        #[arg(long, value_delimiter = ',')]
        drop: Vec<String>,
    },
    /// Score a saved checkpoint on a freshly prepared split.
    Evaluate {
        input: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "full")]
        preset: Preset,
        /// Negative ratios of the test sets, e.g. 1,5,10,25,50.
        #[arg(long, value_delimiter = ',')]
        ratios: Vec<usize>,
        #[arg(long)]
        svg: bool,
    },
    /// Train the full model, each single-view ablation and the baseline on
    /// one shared split.
    Ablate {
        #[command(flatten)]
        experiment: Experiment,
    },
    /// Train the selected model at each temperature on one shared split.
    GridTau {
        #[command(flatten)]
        experiment: Experiment,
        #[arg(long, value_delimiter = ',', default_values_t = [0.05, 0.06, 0.07, 0.08])]
        taus: Vec<f64>,
    },
}

fn overrides(e: &Experiment, drop: Vec<String>) -> Overrides {
    Overrides {
        stratification: e.stratification.clone(),
        drop,
        tau: e.tau,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let global = Global {
        seed: cli.seed,
        config: cli.config,
        out: cli.out,
        threads: cli.threads as usize,
    };
    let result = match cli.command {
        Command::Ingest { input } => commands::ingest(&global, &input),
        Command::Stats { input } => commands::stats(&global, &input),
        Command::Stratify { input, keying } => commands::stratify(&global, &input, &keying),
        Command::Synth {
            blocks,
            compounds_per_block,
            sequences_per_block,
            variants,
            partners,
            noise,
            reactions_per_block,
        } => commands::synth(
            &global,
            PlantedConfig {
                blocks,
                compounds_per_block,
                sequences_per_block,
                variants,
                partners,
                noise,
                reactions_per_block,
                seed: global.seed.unwrap_or(0),
            },
        ),
        Command::Run { experiment, drop } => {
            let o = overrides(&experiment, drop);
            commands::run(&global, &experiment.input, experiment.preset, &o, experiment.svg)
        }
        Command::Evaluate {
            input,
            checkpoint,
            preset,
            ratios,
            svg,
        } => commands::evaluate(&global, &input, &checkpoint, preset, &ratios, svg),
        Command::Ablate { experiment } => {
            let o = overrides(&experiment, Vec::new());
            commands::ablate(&global, &experiment.input, experiment.preset, &o, experiment.svg)
        }
        Command::GridTau { experiment, taus } => {
            let o = overrides(&experiment, Vec::new());
            commands::grid(&global, &experiment.input, experiment.preset, &o, &taus, experiment.svg)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
