use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use pushpull_core::data::{resolve_data_root, subsample, Dataset, DatasetKind, Split};
use pushpull_core::harness::{
    evaluate_checkpoint, parse_grid, report_csv, sensitivity_sweep, train, Checkpoint, TrainConfig,
};
use pushpull_core::model::FirstLayer;
use pushpull_core::parameter_count;

/// Noise levels of the sensitivity table, on the [0, 1] pixel scale.
const SWEEP_GRID: &str = "gaussian:0,0.0001,0.0005,0.001,0.005,0.01,0.02,0.03";

#[derive(Parser)]
#[command(name = "pushpull", version, about = "Train and evaluate push-pull networks under image noise")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a TOML config and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint over a perturbation grid and write a CSV report.
    Eval(EvalArgs),
    /// Train a baseline plus one push-pull model per (h, alpha) pair and tabulate them.
    Sweep(SweepArgs),
    /// Print layer structure and trainable parameter counts of a checkpoint.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Dataset root directory.
    #[arg(long, env = "PUSHPULL_DATA_ROOT")]
    data_root: Option<PathBuf>,
}

#[derive(Args)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Train on this many images per class.
    #[arg(long)]
    subsample: Option<usize>,
}

impl Overrides {
    fn apply(&self, cfg: &mut TrainConfig) -> Result<()> {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        if let Some(b) = self.batch_size {
            cfg.batch_size = b;
        }
        if let Some(lr) = self.lr {
            cfg.sgd.learning_rate = lr;
        }
        if let Some(n) = self.subsample {
            cfg.subsample = Some(n);
        }
        cfg.validate()?;
        Ok(())
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint path; overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Perturbation grid, e.g. "none;gaussian:0,0.1,0.2;poisson:0.5,1,2".
    #[arg(long)]
    grid: String,
    /// CSV report path.
    #[arg(long)]
    out: PathBuf,
    /// Also write the full report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
    /// Master seed for the per-image noise.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Evaluate on a stratified subset of the test split.
    #[arg(long)]
    test_per_class: Option<usize>,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long = "h", value_delimiter = ',', default_values_t = [1.0, 1.5, 2.0])]
    h: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [0.5, 1.0, 1.5])]
    alpha: Vec<f64>,
    #[arg(long, default_value = SWEEP_GRID)]
    grid: String,
    /// Output directory for the matrix and per-model reports.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    eval_seed: u64,
    #[arg(long)]
    test_per_class: Option<usize>,
    #[command(flatten)]
    overrides: Overrides,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    ckpt: PathBuf,
}

fn load_config(path: &Path, data: &DataArgs, overrides: &Overrides) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::load(path)?;
    if data.data_root.is_some() {
        cfg.dataset.root = data.data_root.clone();
    }
    overrides.apply(&mut cfg)?;
    Ok(cfg)
}

fn load_test(kind: DatasetKind, root: &Path, per_class: Option<usize>, seed: u64) -> Result<Dataset> {
    let test = kind
        .load(root, Split::Test)
        .with_context(|| format!("loading the {kind} test split from {}", root.display()))?;
    Ok(match per_class {
        Some(n) => subsample(&test, n, seed)?,
        None => test,
    })
}

fn run_train(args: TrainArgs) -> Result<()> {
    let mut cfg = load_config(&args.config, &args.data, &args.overrides)?;
    if args.out.is_some() {
        cfg.checkpoint = args.out;
    }
    if cfg.checkpoint.is_none() {
        bail!("no checkpoint path: pass --out or set `checkpoint` in the config");
    }
    let outcome = train(&cfg)?;
    for e in &outcome.history {
        println!("epoch {} loss {:.4} accuracy {:.4}", e.epoch + 1, e.loss, e.accuracy);
    }
    Ok(())
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let grid = parse_grid(&args.grid)?;
    let ck = Checkpoint::load(&args.ckpt)?;
    let root = resolve_data_root(args.data.data_root.as_deref());
    let test = load_test(ck.dataset, &root, args.test_per_class, args.seed)?;
    let report = evaluate_checkpoint(&ck, &grid, &test, args.seed)?;
    report_csv(&report, &args.out)?;
    if let Some(path) = &args.json {
        std::fs::write(path, report.to_json()?).with_context(|| format!("writing {}", path.display()))?;
    }
    println!("{} clean accuracy {:.4} over {} images", report.model_id, report.clean_accuracy, test.len());
    Ok(())
}

fn run_sweep(args: SweepArgs) -> Result<()> {
    let base = load_config(&args.config, &args.data, &args.overrides)?;
    let grid = parse_grid(&args.grid)?;
    let root = base.dataset.root();
    let train_set = base
        .dataset
        .kind
        .load(&root, Split::Train)
        .with_context(|| format!("loading the {} training split from {}", base.dataset.kind, root.display()))?;
    let test = load_test(base.dataset.kind, &root, args.test_per_class, args.eval_seed)?;
    let table = sensitivity_sweep(&base, &train_set, &test, &args.h, &args.alpha, &grid, args.eval_seed)?;

    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    table.write_matrix_csv(args.out.join("matrix.csv"))?;
    for row in &table.rows {
        let name = match (row.upsample, row.alpha) {
            (Some(h), Some(a)) => format!("{}-h{h}-a{a}.csv", row.report.model_id),
            _ => format!("{}.csv", row.report.model_id),
        };
        report_csv(&row.report, args.out.join(name))?;
    }
    std::fs::write(args.out.join("sweep.json"), table.to_json()?).context("writing sweep.json")?;
    print!("{}", table.matrix_csv()?);
    Ok(())
}

fn run_inspect(args: InspectArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.ckpt)?;
    let model = ck.to_model()?;
    let count = parameter_count(&model);
    println!("model {}", ck.spec.id());
    println!("dataset {} (trained {} epochs, seed {})", ck.dataset, ck.epochs, ck.seed);
    println!("layers {}", model.layer_kinds().join(" "));
    println!("trainable parameters {count}");
    if let Some(pp) = model.pushpull() {
        let c = pp.config();
        println!(
            "push-pull kernel {} pull {} alpha {} h {}",
            c.kernel_size,
            c.pull_size()?,
            c.alpha,
            c.upsample
        );
    }
    let other = match ck.spec.first_layer {
        FirstLayer::Conv => ck.spec.with_first_layer(FirstLayer::Pushpull),
        FirstLayer::Pushpull => ck.spec.with_first_layer(FirstLayer::Conv),
    };
    let twin_count = other.parameter_count()?;
    println!(
        "counterpart {} trainable parameters {twin_count} ({})",
        other.id(),
        if twin_count == count { "equal" } else { "DIFFERENT" }
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Sweep(a) => run_sweep(a),
        Command::Inspect(a) => run_inspect(a),
    };
    match result {
        Ok(()) => {
            info!("done");
            ExitCode::SUCCESS
        }
        Err(err) => {
            // A core error already renders its own source, so the chain stops there.
            let mut kind = "cli";
            let mut parts = Vec::new();
            for cause in err.chain() {
                parts.push(cause.to_string());
                if let Some(e) = cause.downcast_ref::<pushpull_core::Error>() {
                    kind = e.kind();
                    break;
                }
            }
            eprintln!("error[{kind}]: {}", parts.join(": "));
            ExitCode::FAILURE
        }
    }
}
