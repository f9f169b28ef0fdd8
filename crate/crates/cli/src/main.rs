use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use stratimpute::archive::{load_cohort, save_cohort};
use stratimpute::checkpoint::Checkpoint;
use stratimpute::dataio;
use stratimpute::metrics::{aggregate, format_table, AggregateRow, EvalReport};
use stratimpute::model::{Task, Variant};
use stratimpute::synthgen::{synthesize, write_cohort_csvs, SynthConfig};
use stratimpute::tensorize::{tensorize_cohort, TensorizeOptions};
use stratimpute::train::{ablate, evaluate, prepare, train, Split, TrainConfig};

#[derive(Parser, Debug)]
#[command(
    name = "stratimpute",
    version,
    about = "Imputation and outcome prediction for irregular clinical time series"
)]
struct Cli {
    /// Root directory for raw CSVs, archives, checkpoints and reports.
    #[arg(long, env = "STRATIMPUTE_DATA", default_value = "data", global = true)]
    data_root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic cohort as CSV files.
    Synth(SynthArgs),
    /// Turn event, static and label CSVs into a tensor archive.
    Tensorize(TensorizeArgs),
    /// Train one model and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate one or more checkpoints on a split.
    Evaluate(EvaluateArgs),
    /// Train and compare full, no_graph and no_contrastive over several seeds
    /// (both tasks unless --task is given).
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output directory (default: <data-root>/raw).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    patients: Option<usize>,
    #[arg(long)]
    features: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    clusters: Option<usize>,
    #[arg(long)]
    missing_rate: Option<f64>,
    #[arg(long)]
    mnar_strength: Option<f64>,
    #[arg(long)]
    base_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct TensorizeArgs {
    /// Directory holding events.csv, statics.csv and labels.csv (default: <data-root>/raw).
    #[arg(long)]
    input: Option<PathBuf>,
    /// Archive path (default: <data-root>/cohort.safetensors).
    #[arg(long)]
    output: Option<PathBuf>,
    /// Observation window in hours; one bin per hour.
    #[arg(long, default_value_t = 48)]
    horizon: usize,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TaskArg {
    Imputation,
    Prediction,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
#[value(rename_all = "snake_case")]
enum VariantArg {
    Full,
    NoGraph,
    NoContrastive,
}

#[derive(Clone, Copy, Debug, Default, ValueEnum)]
enum Format {
    #[default]
    Table,
    Json,
}

/// Config file plus flag overrides.
#[derive(Args, Debug)]
struct ConfigArgs {
    /// JSON training config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Tensor archive (default: <data-root>/cohort.safetensors).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum)]
    task: Option<TaskArg>,
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Checkpoint path (default: <data-root>/checkpoint.safetensors).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Checkpoint(s); several are aggregated as mean ± sd.
    #[arg(long, required = true, num_args = 1..)]
    checkpoint: Vec<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    format: Format,
    /// Also write the JSON report here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Number of seeds (overrides `repeats`).
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    format: Format,
    #[arg(long)]
    report: Option<PathBuf>,
}

fn default_archive(root: &Path) -> PathBuf {
    root.join("cohort.safetensors")
}

fn load_config(args: &ConfigArgs) -> Result<TrainConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            serde_json::from_str(&text)
                .with_context(|| format!("parsing config {}", path.display()))?
        }
        None => TrainConfig::default(),
    };
    if let Some(t) = args.task {
        cfg.model.task = match t {
            TaskArg::Imputation => Task::Imputation,
            TaskArg::Prediction => Task::Prediction,
        };
    }
    if let Some(v) = args.variant {
        cfg.model.variant = match v {
            VariantArg::Full => Variant::Full,
            VariantArg::NoGraph => Variant::NoGraph,
            VariantArg::NoContrastive => Variant::NoContrastive,
        };
    }
    macro_rules! set {
        ($($flag:ident => $($field:ident).+),*) => {
            $(if let Some(v) = args.$flag { cfg.$($field).+ = v; })*
        };
    }
    set!(
        learning_rate => learning_rate,
        batch_size => batch_size,
        epochs => epochs,
        patience => patience,
        seed => seed,
        lambda => model.lambda,
        temperature => model.temperature
    );
    cfg.validate()?;
    Ok(cfg)
}

fn emit(
    format: Format,
    json: &serde_json::Value,
    table: &str,
    report: Option<&Path>,
) -> Result<()> {
    match format {
        Format::Table => print!("{table}"),
        Format::Json => println!("{}", serde_json::to_string_pretty(json)?),
    }
    if let Some(path) = report {
        std::fs::write(path, serde_json::to_string_pretty(json)?)
            .with_context(|| format!("writing report {}", path.display()))?;
    }
    Ok(())
}

fn run_synth(root: &Path, a: SynthArgs) -> Result<()> {
    let mut cfg = SynthConfig::default();
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => {
            $(if let Some(v) = a.$flag { cfg.$field = v; })*
        };
    }
    set!(
        patients => n_patients,
        features => n_features,
        horizon => horizon,
        clusters => n_clusters,
        missing_rate => missing_rate,
        mnar_strength => mnar_strength,
        base_rate => mortality_base_rate,
        seed => seed
    );
    let out = a.out.unwrap_or_else(|| root.join("raw"));
    let cohort = synthesize(&cfg)?;
    write_cohort_csvs(&cohort, &out)?;
    println!(
        "wrote {} patients, {} events to {}",
        cohort.statics.len(),
        cohort.events.len(),
        out.display()
    );
    Ok(())
}

fn run_tensorize(root: &Path, a: TensorizeArgs) -> Result<()> {
    let input = a.input.unwrap_or_else(|| root.join("raw"));
    let output = a.output.unwrap_or_else(|| default_archive(root));
    let rows = dataio::read_events(&input.join("events.csv"))
        .with_context(|| format!("reading events from {}", input.display()))?;
    let features = dataio::feature_vocabulary(&rows);
    let events = dataio::rows_to_records(&rows, &features)?;
    let statics = dataio::read_statics(&input.join("statics.csv"))?;
    let labels = dataio::read_labels(&input.join("labels.csv"))?;
    let opts = TensorizeOptions {
        horizon_hours: a.horizon,
        split_seed: a.split_seed,
    };
    let cohort = tensorize_cohort(features, &events, &statics, &labels, &opts)?;
    if let Some(parent) = output.parent() {
        std::fs::create_dir_all(parent)?;
    }
    save_cohort(&cohort, &output)?;
    println!(
        "tensorized {} patients (N={}, T={}, g={}; {} events outside the window) into {}",
        cohort.patients.len(),
        cohort.n_features(),
        cohort.horizon,
        cohort.static_width(),
        cohort.rejected_events,
        output.display()
    );
    Ok(())
}

fn run_train(root: &Path, a: TrainArgs) -> Result<()> {
    let cfg = load_config(&a.cfg)?;
    let data_path = a.cfg.data.clone().unwrap_or_else(|| default_archive(root));
    let cohort = load_cohort(&data_path)?;
    let data = prepare(&cohort, &cfg)?;
    let outcome = train(&cohort, &data, &cfg)?;
    for e in &outcome.log {
        info!(
            "epoch {} loss {:.6} val {:?}",
            e.epoch, e.loss, e.val_metric
        );
    }
    let out = a.out.unwrap_or_else(|| root.join("checkpoint.safetensors"));
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let log_path = out.with_extension("log.json");
    std::fs::write(&log_path, serde_json::to_string_pretty(&outcome.log)?)?;
    let (best, ran) = (outcome.best_epoch, outcome.epochs_run);
    let ckpt = Checkpoint::from_outcome(outcome, &cfg, &cohort);
    ckpt.save(&out)?;
    println!(
        "trained {} / {} for {ran} epochs, kept epoch {best}; checkpoint {}, log {}",
        cfg.model.task.name(),
        cfg.model.variant.name(),
        out.display(),
        log_path.display()
    );
    Ok(())
}

fn run_evaluate(root: &Path, a: EvaluateArgs) -> Result<()> {
    let split: Split = a.split.parse()?;
    let data_path = a.data.unwrap_or_else(|| default_archive(root));
    let cohort = load_cohort(&data_path)?;
    let mut reports = Vec::new();
    for path in &a.checkpoint {
        let ckpt = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
        ckpt.check_compatible(&cohort)
            .with_context(|| format!("checkpoint {}", path.display()))?;
        let data = prepare(&cohort, &ckpt.config)?;
        reports.push(evaluate(
            &ckpt.model,
            &cohort,
            &data,
            split,
            ckpt.config.batch_size,
        )?);
    }
    if let [report] = reports.as_slice() {
        return emit(
            a.format,
            &serde_json::to_value(report)?,
            &report.to_table(),
            a.report.as_deref(),
        );
    }
    let variants: std::collections::BTreeSet<&str> =
        reports.iter().map(|r| r.variant.as_str()).collect();
    let label = variants.into_iter().collect::<Vec<_>>().join("+");
    let row = aggregate(&label, &reports)?;
    let json = serde_json::json!({ "runs": reports, "aggregate": [row] });
    emit(a.format, &json, &format_table(&[row]), a.report.as_deref())
}

fn run_ablate(root: &Path, a: AblateArgs) -> Result<()> {
    let mut cfg = load_config(&a.cfg)?;
    if let Some(n) = a.seeds {
        if n == 0 {
            bail!("--seeds must be positive");
        }
        cfg.repeats = n;
    }
    let data_path = a.cfg.data.clone().unwrap_or_else(|| default_archive(root));
    let cohort = load_cohort(&data_path)?;
    let tasks = match a.cfg.task {
        Some(_) => vec![cfg.model.task],
        None => vec![Task::Imputation, Task::Prediction],
    };
    let mut merged: Vec<(Variant, Vec<EvalReport>)> = Vec::new();
    for task in &tasks {
        let mut run = cfg.clone();
        run.model.task = *task;
        info!("ablating {} over {} seeds", task.name(), run.repeats);
        for (k, (variant, reports)) in ablate(&cohort, &run)?.into_iter().enumerate() {
            match merged.get_mut(k) {
                None => merged.push((variant, reports)),
                Some((_, acc)) => {
                    for (into, r) in acc.iter_mut().zip(reports) {
                        into.task = format!("{}+{}", into.task, r.task);
                        into.imputation = into.imputation.or(r.imputation);
                        into.prediction = into.prediction.or(r.prediction);
                    }
                }
            }
        }
    }
    let rows: Vec<AggregateRow> = merged
        .iter()
        .map(|(v, reports)| aggregate(v.name(), reports))
        .collect::<stratimpute::Result<_>>()?;
    let runs: Vec<&EvalReport> = merged.iter().flat_map(|(_, r)| r).collect();
    let json = serde_json::json!({
        "tasks": tasks.iter().map(|t| t.name()).collect::<Vec<_>>(),
        "seeds": cfg.repeats,
        "aggregate": rows,
        "runs": runs,
    });
    emit(a.format, &json, &format_table(&rows), a.report.as_deref())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let root = cli.data_root;
    let result = match cli.command {
        Command::Synth(a) => run_synth(&root, a),
        Command::Tensorize(a) => run_tensorize(&root, a),
        Command::Train(a) => run_train(&root, a),
        Command::Evaluate(a) => run_evaluate(&root, a),
        Command::Ablate(a) => run_ablate(&root, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
