//! Single pipeline executable: phantom dataset generation, training,
//! whole-volume prediction, Dice evaluation, Wilcoxon comparison, and a
//! three-arm experiment driver. Exit codes: 0 success, 1 runtime
//! failure, 2 usage error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use hetseg_core::config::RunConfig;
use hetseg_core::eval::{self, DiceTable, Orientation};
use hetseg_core::phantom;
use hetseg_core::trainer::{self, INFER_BATCH};
use hetseg_core::volio::{self, LabelField, TaskManifest};

mod experiment;

#[derive(Parser)]
#[command(
    name = "hetseg",
    version,
    about = "Heteroscedastic multi-task segmentation pipeline on synthetic phantoms"
)]
struct Cli {
    /// Upper bound on worker threads for parallel sections.
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom dataset from the [dataset] section of a config.
    Phantom(PhantomArgs),
    /// Train one model on a generated dataset.
    Train(TrainArgs),
    /// Segment a volume with a trained checkpoint.
    Predict(PredictArgs),
    /// Score predictions against a reference, one Dice row per (case, task).
    Evaluate(EvaluateArgs),
    /// Wilcoxon signed-rank comparison of two metrics files.
    Compare(CompareArgs),
    /// Run the full three-arm comparison from one config.
    Experiment(ExperimentArgs),
    /// Inspect configuration documents.
    Config(ConfigArgs),
    /// Print the version and exit.
    Version,
}

#[derive(Args)]
struct PhantomArgs {
    /// Configuration document; defaults apply to missing keys.
    #[arg(long, value_name = "FILE")]
    config: PathBuf,
    /// Dataset directory to create.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_name = "FILE")]
    config: PathBuf,
    /// Dataset directory (from `phantom`).
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Run directory for checkpoints, curves, and rejection masks.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Continue from the newest checkpoint in --out.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct PredictArgs {
    /// Trained checkpoint.
    #[arg(long, value_name = "CKPT")]
    model: PathBuf,
    /// Input volume (f32 mvol).
    #[arg(long, value_name = "FILE")]
    volume: PathBuf,
    /// Prediction file to write (label mvol).
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Views to ensemble.
    #[arg(long, value_delimiter = ',', default_values = ["axial", "sagittal", "coronal"])]
    views: Vec<String>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Prediction volume, or a directory of them.
    #[arg(long, value_name = "PATH")]
    pred: PathBuf,
    /// Reference volume, or a directory with matching file names.
    #[arg(long, value_name = "PATH", name = "ref")]
    reference: PathBuf,
    /// Task manifest the volumes follow.
    #[arg(long, value_name = "FILE")]
    manifest: PathBuf,
    /// Metrics file to write (case, task, dice).
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long, value_name = "FILE")]
    a: PathBuf,
    #[arg(long, value_name = "FILE")]
    b: PathBuf,
    /// Report file to write (task, n, w, p, direction).
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long, value_name = "FILE")]
    config: PathBuf,
    /// Experiment directory: dataset, per-arm runs, metrics, summary.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args)]
struct ConfigArgs {
    #[command(subcommand)]
    action: ConfigAction,
}

#[derive(Subcommand)]
enum ConfigAction {
    /// Print the fully-defaulted effective configuration.
    Dump {
        /// Document to load first; omitted means built-in defaults.
        #[arg(long, value_name = "FILE")]
        config: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if let Some(n) = cli.jobs {
        // Build the global pool before any parallel section touches it.
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: --jobs: {e}");
            return ExitCode::FAILURE;
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(path: &Path) -> Result<RunConfig> {
    let cfg = RunConfig::load(path).with_context(|| format!("config {}", path.display()))?;
    cfg.validate().with_context(|| format!("config {}", path.display()))?;
    Ok(cfg)
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Phantom(args) => {
            let cfg = load_config(&args.config)?;
            let records = phantom::gen_dataset(&cfg.dataset, &args.out)
                .context("dataset generation failed")?;
            println!("wrote {} cases to {}", records.len(), args.out.display());
            Ok(())
        }
        Command::Train(args) => {
            let cfg = load_config(&args.config)?;
            let outcome =
                trainer::train::<f32>(&cfg.arch, &cfg.train, &args.data, &args.out, args.resume)
                    .context("training failed")?;
            println!(
                "ran {} of {} restarts, final checkpoint {}",
                outcome.restarts_run,
                outcome.total_restarts,
                outcome.final_checkpoint.display()
            );
            Ok(())
        }
        Command::Predict(args) => predict(&args),
        Command::Evaluate(args) => evaluate(&args),
        Command::Compare(args) => {
            let a = DiceTable::read(&args.a)?;
            let b = DiceTable::read(&args.b)?;
            let rows = eval::compare(&a, &b)?;
            eval::write_comparison(&rows, &args.out)?;
            println!("compared {} tasks into {}", rows.len(), args.out.display());
            Ok(())
        }
        Command::Experiment(args) => {
            let cfg = load_config(&args.config)?;
            experiment::run(&cfg, &args.out)
        }
        Command::Config(args) => match args.action {
            ConfigAction::Dump { config } => {
                let cfg = match config {
                    Some(path) => load_config(&path)?,
                    None => RunConfig::default(),
                };
                print!("{}", cfg.dump());
                Ok(())
            }
        },
        Command::Version => {
            println!("hetseg {}", env!("CARGO_PKG_VERSION"));
            Ok(())
        }
    }
}

fn predict(args: &PredictArgs) -> Result<()> {
    let views: Vec<Orientation> = args
        .views
        .iter()
        .map(|v| Orientation::parse(v))
        .collect::<hetseg_core::Result<_>>()?;
    if views.is_empty() {
        bail!("at least one view is required");
    }
    let (model, _) = trainer::load_model::<f32>(&args.model)?;
    let field = volio::read_scalar(&args.volume)?;
    let preds = eval::predict_volume(&model, &field, &views, INFER_BATCH)?;
    let logits: Vec<_> = preds.iter().map(|p| &p.logits).collect();
    let decision = eval::ensemble(&logits)?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    volio::write_label(&decision, &args.out)?;
    println!(
        "wrote {} ({} tasks, {} views ensembled)",
        args.out.display(),
        decision.n_tasks,
        views.len()
    );
    Ok(())
}

/// File stem as the case id; `pred.mvol` scores as case `pred`.
fn case_name(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn evaluate(args: &EvaluateArgs) -> Result<()> {
    let manifest = TaskManifest::read(&args.manifest)?;
    let pairs: Vec<(PathBuf, PathBuf)> = if args.pred.is_dir() {
        if !args.reference.is_dir() {
            bail!("--pred is a directory, so --ref must be one too");
        }
        let mut names: Vec<String> = fs::read_dir(&args.pred)?
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n.ends_with(".mvol"))
            .collect();
        names.sort();
        if names.is_empty() {
            bail!("no .mvol predictions under {}", args.pred.display());
        }
        names
            .into_iter()
            .map(|n| (args.pred.join(&n), args.reference.join(&n)))
            .collect()
    } else {
        vec![(args.pred.clone(), args.reference.clone())]
    };
    let mut table = DiceTable::default();
    for (pred_path, ref_path) in &pairs {
        let pred: LabelField = volio::read_label(pred_path)?;
        let reference = volio::read_label(ref_path)
            .with_context(|| format!("reference for {}", case_name(pred_path)))?;
        table.push_rows(eval::evaluate(&case_name(pred_path), &pred, &reference, &manifest)?);
    }
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    table.write(&args.out)?;
    println!("wrote {} rows to {}", table.rows.len(), args.out.display());
    Ok(())
}
