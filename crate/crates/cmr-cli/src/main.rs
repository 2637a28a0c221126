//! `cmr` — generate synthetic corpora, train the cross-modal embedding
//! model, evaluate retrieval under the car/car+/car++ fusion protocols, run
//! ablation matrices, and report parameter counts.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric
//! failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cmr_core::data::{generate_synthetic, load_corpus, save_corpus, Split, SyntheticConfig};
use cmr_core::retrieval::{Direction, FusionProtocol};
use cmr_core::train::{
    ablation_matrix, ablation_table, evaluate, parse_ablation_matrix, report_csv, report_table,
    train, Checkpoint, TrainConfig, TrainError,
};
use cmr_core::Model;

#[derive(Parser)]
#[command(name = "cmr", version, about = "cross-modal retrieval engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with planted cross-modal correspondences.
    GenData(GenDataArgs),
    /// Train a model and save the best-validation checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a corpus split.
    Eval(EvalArgs),
    /// Train and evaluate every row of an ablation matrix.
    Ablate(AblateArgs),
    /// Report trainable/frozen parameter counts for a configuration.
    Params(ParamsArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output corpus path (line-delimited records with a header line).
    #[arg(long, default_value = "corpus.jsonl")]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    vocab: usize,
    #[arg(long, default_value_t = 64)]
    concepts: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 512)]
    train_paired: usize,
    #[arg(long, default_value_t = 512)]
    train_unpaired: usize,
    #[arg(long, default_value_t = 128)]
    val: usize,
    #[arg(long, default_value_t = 128)]
    test: usize,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 12)]
    tokens_per_image: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat key=value config file; keys match the training configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the desk-scale preset instead of the paper-scale defaults.
    #[arg(long)]
    desk: bool,
    /// Override single keys, e.g. `--set epochs=5 --set loss=triplet`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig, TrainError> {
        let base = if self.desk {
            TrainConfig::desk()
        } else {
            TrainConfig::default()
        };
        let mut cfg = match &self.config {
            Some(path) => TrainConfig::from_file(path, base)?,
            None => base,
        };
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| TrainError::Config(format!("--set expects KEY=VALUE, got {kv}")))?;
            cfg.apply_override(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Corpus file produced by gen-data.
    #[arg(long)]
    corpus: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// Checkpoint output path.
    #[arg(long, default_value = "model.ckpt")]
    out: PathBuf,
    /// Training log output path.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Split to evaluate: train, val or test.
    #[arg(long, default_value = "test")]
    split: String,
    /// Fusion protocol: car, car+, car++ or all.
    #[arg(long, default_value = "car")]
    protocol: String,
    /// Direction: i2r, r2i or both.
    #[arg(long, default_value = "both")]
    direction: String,
    /// Pairs per sampled subset; 0 uses the whole split.
    #[arg(long, default_value_t = 0)]
    subset_size: usize,
    #[arg(long, default_value_t = 10)]
    n_subsets: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write machine-readable rows to this CSV path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Matrix file: one `label: key=value ...` row per line.
    #[arg(long)]
    matrix: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value_t = 0)]
    subset_size: usize,
    #[arg(long, default_value_t = 1)]
    n_subsets: usize,
    #[arg(long, default_value_t = 0)]
    eval_seed: u64,
}

#[derive(Args)]
struct ParamsArgs {
    #[command(flatten)]
    config: ConfigArgs,
}

/// Error carrying the process exit code.
enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numeric(m) => m,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match &e {
            TrainError::Config(_) | TrainError::Checkpoint(_) => CliError::Usage(e.to_string()),
            TrainError::Data(_) | TrainError::Io { .. } | TrainError::Retrieval(_) => {
                CliError::Data(e.to_string())
            }
            TrainError::NonFiniteLoss { .. }
            | TrainError::Encoder(_)
            | TrainError::Loss(_)
            | TrainError::Layer(_)
            | TrainError::Tensor(_) => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<cmr_core::data::DataError> for CliError {
    fn from(e: cmr_core::data::DataError) -> Self {
        match &e {
            cmr_core::data::DataError::InvalidConfig(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

fn write_file(path: &PathBuf, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text)
        .map_err(|e| CliError::Data(format!("writing {}: {e}", path.display())))
}

fn run_gen_data(args: GenDataArgs) -> Result<(), CliError> {
    let cfg = SyntheticConfig {
        vocab_size: args.vocab,
        concept_count: args.concepts,
        embed_dim: args.dim,
        n_train_paired: args.train_paired,
        n_train_unpaired: args.train_unpaired,
        n_val: args.val,
        n_test: args.test,
        noise_rate: args.noise,
        tokens_per_image: args.tokens_per_image,
        seed: args.seed,
    };
    let corpus = generate_synthetic(&cfg)?;
    save_corpus(&corpus, &args.out)?;
    println!(
        "wrote {} records ({} paired train, {} unpaired train, {} val, {} test) to {}",
        corpus.records.len(),
        cfg.n_train_paired,
        cfg.n_train_unpaired,
        cfg.n_val,
        cfg.n_test,
        args.out.display()
    );
    Ok(())
}

fn run_train(args: TrainArgs) -> Result<(), CliError> {
    let cfg = args.config.resolve()?;
    let corpus = load_corpus(&args.corpus)?;
    let outcome = train(&cfg, &corpus)?;
    outcome.checkpoint.save(&args.out)?;
    if let Some(log_path) = &args.log {
        write_file(log_path, &outcome.log)?;
    }
    println!(
        "best checkpoint: epoch {} val_r1 {} -> {}",
        outcome.checkpoint.epoch,
        outcome.checkpoint.val_r1,
        args.out.display()
    );
    Ok(())
}

fn parse_protocols(s: &str) -> Result<Vec<FusionProtocol>, CliError> {
    if s == "all" {
        return Ok(vec![
            FusionProtocol::Car,
            FusionProtocol::CarPlus,
            FusionProtocol::CarPlusPlus,
        ]);
    }
    FusionProtocol::parse(s)
        .map(|p| vec![p])
        .ok_or_else(|| CliError::Usage(format!("unknown protocol {s} (car|car+|car++|all)")))
}

fn parse_directions(s: &str) -> Result<Vec<Direction>, CliError> {
    if s == "both" {
        return Ok(vec![Direction::ImageToRecipe, Direction::RecipeToImage]);
    }
    Direction::parse(s)
        .map(|d| vec![d])
        .ok_or_else(|| CliError::Usage(format!("unknown direction {s} (i2r|r2i|both)")))
}

fn run_eval(args: EvalArgs) -> Result<(), CliError> {
    let split: Split = args
        .split
        .parse()
        .map_err(|_| CliError::Usage(format!("unknown split {}", args.split)))?;
    let protocols = parse_protocols(&args.protocol)?;
    let directions = parse_directions(&args.direction)?;
    let checkpoint = Checkpoint::load(&args.checkpoint)?;
    let corpus = load_corpus(&args.corpus)?;
    let model = checkpoint.build_model()?;
    let reports = evaluate(
        &model,
        &corpus,
        split,
        &protocols,
        &directions,
        args.subset_size,
        args.n_subsets,
        args.seed,
    )?;
    for (k, v) in checkpoint.config.kv_pairs() {
        println!("config {k}={v}");
    }
    println!(
        "checkpoint epoch={} val_r1={} split={split}",
        checkpoint.epoch, checkpoint.val_r1
    );
    print!("{}", report_table(&reports));
    if let Some(out) = &args.out {
        write_file(out, &report_csv(&reports))?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

fn run_ablate(args: AblateArgs) -> Result<(), CliError> {
    let base = args.config.resolve()?;
    let corpus = load_corpus(&args.corpus)?;
    let text = std::fs::read_to_string(&args.matrix)
        .map_err(|e| CliError::Data(format!("reading {}: {e}", args.matrix.display())))?;
    let rows = parse_ablation_matrix(&text)?;
    let results = ablation_matrix(&base, &corpus, &rows, args.subset_size, args.n_subsets, args.eval_seed)?;
    for (k, v) in base.kv_pairs() {
        println!("config {k}={v}");
    }
    print!("{}", ablation_table(&results));
    Ok(())
}

fn run_params(args: ParamsArgs) -> Result<(), CliError> {
    let cfg = args.config.resolve()?;
    let model = Model::new(cfg.model_config()).map_err(TrainError::from)?;
    let (trainable, frozen) = model.count_params();
    let total = trainable + frozen;
    println!("trainable {trainable}");
    println!("frozen    {frozen}");
    println!("total     {total}");
    println!("ratio     {}", trainable as f64 / total as f64);
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version are not errors
            if e.use_stderr() {
                eprintln!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    let result = match cli.command {
        Command::GenData(args) => run_gen_data(args),
        Command::Train(args) => run_train(args),
        Command::Eval(args) => run_eval(args),
        Command::Ablate(args) => run_ablate(args),
        Command::Params(args) => run_params(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
