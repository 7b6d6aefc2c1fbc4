//! Thin command-line front end over the library: dataset generation,
//! training, evaluation, inference, and sweeps. All logic lives in the
//! library; this file only parses flags and prints results.

use clap::{Args, Parser, Subcommand};
use refseg::config::RunConfig;
use refseg::error::{RefsegError, Result};
use refseg::sweep::SweepAxis;
use refseg::synth::Dataset;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "refseg", about = "Referring image segmentation on synthetic shape scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Config resolution: defaults, then --config JSON, then explicit flags.
#[derive(Args, Clone)]
struct ConfigArgs {
    /// JSON config file (flags override its fields).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_val: Option<usize>,
    /// Feature-exchange rounds.
    #[arg(long)]
    rounds: Option<usize>,
    /// Graph-convolution layers.
    #[arg(long)]
    graph_layers: Option<usize>,
    /// Auxiliary word-type loss weight.
    #[arg(long)]
    lambda_word_types: Option<f64>,
    /// Disable the entity-perception stage.
    #[arg(long)]
    no_ep: bool,
    /// Disable relation-aware reasoning.
    #[arg(long)]
    no_rar: bool,
    /// Disable feature exchange (single-level model).
    #[arg(long)]
    no_tgfe: bool,
    /// Use unnormalized pooling weights.
    #[arg(long)]
    no_pool_norm: bool,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($field:ident) => {
                if let Some(v) = self.$field {
                    cfg.$field = v;
                }
            };
        }
        set!(seed);
        set!(epochs);
        set!(batch_size);
        set!(learning_rate);
        set!(weight_decay);
        set!(n_train);
        set!(n_val);
        set!(lambda_word_types);
        if let Some(v) = self.rounds {
            cfg.exchange_rounds = v;
        }
        if let Some(v) = self.graph_layers {
            cfg.graph_layers = v;
        }
        if self.no_ep {
            cfg.ep_enabled = false;
        }
        if self.no_rar {
            cfg.rar_enabled = false;
        }
        if self.no_tgfe {
            cfg.tgfe_enabled = false;
        }
        if self.no_pool_norm {
            cfg.normalize_pool_weights = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (images, masks, manifest, vocabulary).
    Gen {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a generated dataset.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset directory (from `gen`).
        #[arg(long)]
        data: PathBuf,
        /// Output directory for the checkpoint and logs.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        /// Checkpoint file.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Split to evaluate.
        #[arg(long, default_value = "val")]
        split: String,
        /// Evaluate at most this many samples.
        #[arg(long)]
        limit: Option<usize>,
        /// Also write the report JSON here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Segment one image given an expression; exports affinity maps.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input image (binary PPM).
        #[arg(long)]
        image: PathBuf,
        /// Referring expression, e.g. "the red square".
        #[arg(long)]
        expression: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train/evaluate one run per axis value and emit a CSV.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// Sweep axis: n-rounds | n-gc | ablation.
        #[arg(long)]
        axis: String,
        #[arg(long)]
        data: PathBuf,
        /// Working directory for per-run artifacts.
        #[arg(long)]
        out: PathBuf,
        /// CSV output path (defaults to <out>/sweep.csv).
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Gen { config, out } => {
            let cfg = config.resolve()?;
            let records = refseg::synth::build_dataset(&out, cfg.seed, cfg.n_train, cfg.n_val, cfg.image_size)?;
            let train = records.iter().filter(|r| r.split == "train").count();
            let val = records.len() - train;
            println!("manifest: {}", out.join("manifest.jsonl").display());
            println!("samples: {train} train / {val} val (seed {})", cfg.seed);
        }
        Command::Train { config, data, out } => {
            let cfg = config.resolve()?;
            let dataset = Dataset::open(&data)?;
            let result = refseg::train::train(&cfg, &dataset, &out)?;
            println!("checkpoint: {}", result.checkpoint_path.display());
            println!("log: {}", result.log_path.display());
            println!("best val overall IoU: {:.4}", result.best_val_iou);
        }
        Command::Eval { checkpoint, data, split, limit, json } => {
            let (model, _) = refseg::checkpoint::load(&checkpoint)?;
            let dataset = Dataset::open(&data)?;
            let report = refseg::eval::evaluate(&model, &dataset, &split, limit)?;
            print!("{}", report.to_table());
            if let Some(path) = json {
                std::fs::write(&path, report.to_json())
                    .map_err(RefsegError::io(format!("writing {}", path.display())))?;
                println!("report: {}", path.display());
            }
        }
        Command::Infer { checkpoint, image, expression, out } => {
            let (model, _) = refseg::checkpoint::load(&checkpoint)?;
            let result = refseg::infer::infer(&model, &image, &expression, &out)?;
            for word in &result.unknown_words {
                eprintln!("warning: \"{word}\" is not in the vocabulary, using <unk>");
            }
            println!("mask: {}", result.mask_path.display());
            for path in &result.exports {
                println!("export: {}", path.display());
            }
        }
        Command::Sweep { config, axis, data, out, csv } => {
            let cfg = config.resolve()?;
            let axis = SweepAxis::parse(&axis)?;
            let dataset = Dataset::open(&data)?;
            std::fs::create_dir_all(&out)
                .map_err(RefsegError::io(format!("creating {}", out.display())))?;
            let csv_path = csv.unwrap_or_else(|| out.join("sweep.csv"));
            let rows = refseg::sweep::sweep(&cfg, axis, &dataset, &out, &csv_path)?;
            print!("{}", refseg::sweep::to_csv(&rows));
            println!("csv: {}", csv_path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}
