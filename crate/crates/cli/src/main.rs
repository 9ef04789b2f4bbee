use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use mvelma::dataio::{
    export_county_map, read_dataset, synth_generate, write_dataset, Dataset, ImputationReport,
    SynthConfig,
};
use mvelma::gp::KernelFamily;
use mvelma::gradsuite::{run_gradient_suite, TOLERANCE};
use mvelma::pipeline::{
    aggregate_county, evaluate, export_predictions, read_predictions, run_ablation,
    run_ablation_suite, split_indices, train_joint, PipelineConfig, RfTarget, TrainedModel,
    Variant,
};

const EXIT_VALIDATION: u8 = 1;
const EXIT_NUMERICAL: u8 = 2;
const EXIT_USAGE: u8 = 64;

#[derive(Parser, Debug)]
#[command(name = "mvelma", version, about = "Stacked encoder / Gaussian process / random forest regression for post-fire vegetation loss")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset with known ground truth.
    Synth(SynthArgs),
    /// Train on the seeded training split and save the model.
    Train(TrainArgs),
    /// Write per-event predictions with GP mean, variance and confidence.
    Predict(PredictArgs),
    /// Score a predictions file against a dataset.
    Evaluate(EvaluateArgs),
    /// Train and score one ablation variant, or all of them.
    Ablate(AblateArgs),
    /// Aggregate predictions per county.
    Map(MapArgs),
    /// Run the finite-difference gradient suite.
    CheckGrads(CheckGradsArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 500)]
    events: usize,
    #[arg(long, default_value_t = 10)]
    counties: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Noise standard deviation as a fraction of the signal standard deviation.
    #[arg(long, default_value_t = 0.2)]
    noise: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum KernelArg {
    Rbf,
    Matern25,
    Periodic,
    Composite,
}

impl From<KernelArg> for KernelFamily {
    fn from(k: KernelArg) -> Self {
        match k {
            KernelArg::Rbf => KernelFamily::Rbf,
            KernelArg::Matern25 => KernelFamily::Matern25,
            KernelArg::Periodic => KernelFamily::Periodic,
            KernelArg::Composite => KernelFamily::CompositeMaternPeriodic,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum RfTargetArg {
    Direct,
    Residual,
}

#[derive(Args, Debug)]
struct ModelArgs {
    #[arg(long, value_enum, default_value = "matern25")]
    kernel: KernelArg,
    #[arg(long, default_value_t = 80)]
    epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 500)]
    trees: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    #[arg(long, default_value_t = 20)]
    latent: usize,
    #[arg(long, default_value_t = 0.8)]
    train_fraction: f64,
    #[arg(long, value_enum, default_value = "direct")]
    rf_target: RfTargetArg,
    /// Feed the forest out-of-fold GP means from this many folds.
    #[arg(long)]
    oof_folds: Option<usize>,
}

impl ModelArgs {
    fn config(&self, variant: Variant) -> PipelineConfig {
        let mut cfg = PipelineConfig::seeded(self.seed).with_variant(variant);
        cfg.kernel = self.kernel.into();
        cfg.optimizer.max_epochs = self.epochs;
        cfg.optimizer.learning_rate = self.lr;
        cfg.forest.n_trees = self.trees;
        cfg.encoder.hidden = self.hidden;
        cfg.encoder.latent = self.latent;
        cfg.train_fraction = self.train_fraction;
        cfg.rf_target = match self.rf_target {
            RfTargetArg::Direct => RfTarget::Direct,
            RfTargetArg::Residual => RfTarget::Residual,
        };
        cfg.oof_folds = self.oof_folds;
        cfg
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value = "full")]
    variant: Variant,
    #[command(flatten)]
    model_args: ModelArgs,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    All,
    Train,
    Test,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "predictions.csv")]
    out: PathBuf,
    /// Which events to predict; train/test use the split stored in the model.
    #[arg(long, value_enum, default_value = "all")]
    split: SplitArg,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    /// A variant tag, or `all` for the whole suite.
    #[arg(long, default_value = "all")]
    variant: String,
    #[command(flatten)]
    model_args: ModelArgs,
}

#[derive(Args, Debug)]
struct MapArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "county_map.csv")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct CheckGradsArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Prints the fully resolved configuration of a run on one line.
fn echo(name: &str, value: &impl std::fmt::Debug) {
    println!("config {name} {value:?}");
}

fn load_data(dir: &Path) -> anyhow::Result<Dataset> {
    let (ds, report) = read_dataset(dir).with_context(|| format!("reading dataset from {}", dir.display()))?;
    report_imputation(&report);
    Ok(ds)
}

fn report_imputation(report: &ImputationReport) {
    if !report.is_empty() {
        eprintln!(
            "imputation: {} action(s), {} event(s) dropped, {} weather day(s) filled",
            report.actions.len(),
            report.dropped(),
            report.filled_weather_days()
        );
        for a in &report.actions {
            log::info!("{a:?}");
        }
    }
}

fn synth(args: &SynthArgs) -> anyhow::Result<()> {
    let cfg = SynthConfig {
        n_events: args.events,
        n_counties: args.counties,
        seed: args.seed,
        noise_fraction: args.noise,
    };
    echo("synth", &cfg);
    let (ds, truth) = synth_generate(&cfg)?;
    std::fs::create_dir_all(&args.out)?;
    write_dataset(&args.out, &ds)?;
    println!(
        "wrote {} events to {} (noise-free R2 ceiling {:.6})",
        ds.len(),
        args.out.display(),
        truth.r2_ceiling()
    );
    Ok(())
}

fn train(args: &TrainArgs) -> anyhow::Result<()> {
    let cfg = args.model_args.config(args.variant);
    echo("train", &cfg);
    let data = load_data(&args.data)?;
    let model = train_joint(&data, &cfg)?;
    let (_, test) = split_indices(data.len(), cfg.train_fraction, cfg.split_seed)?;
    let test = data.select(&test);
    let pred = model.components(&test)?.prediction;
    let metrics = evaluate(&pred, &test.targets)?;
    if let Some(t) = model.diagnostics.nmll_trace.as_ref() {
        println!(
            "nmll initial={:.6} final={:.6} epochs={}",
            t.initial(),
            t.last(),
            t.epochs_run
        );
    }
    println!("test {metrics}");
    model.save(&args.model)?;
    println!("saved model to {}", args.model.display());
    Ok(())
}

fn predict(args: &PredictArgs) -> anyhow::Result<()> {
    echo("predict", args);
    let model = TrainedModel::load(&args.model)?;
    let data = load_data(&args.data)?;
    let cfg = &model.config;
    let data = match args.split {
        SplitArg::All => data,
        SplitArg::Train | SplitArg::Test => {
            let (train, test) = split_indices(data.len(), cfg.train_fraction, cfg.split_seed)?;
            data.select(if matches!(args.split, SplitArg::Train) { &train } else { &test })
        }
    };
    let rows = model.predict(&data)?;
    export_predictions(&rows, &args.out)?;
    println!("wrote {} predictions to {}", rows.len(), args.out.display());
    Ok(())
}

fn truth_by_event(data: &Dataset) -> HashMap<&str, usize> {
    data.events
        .iter()
        .enumerate()
        .map(|(i, e)| (e.event_id.as_str(), i))
        .collect()
}

fn evaluate_cmd(args: &EvaluateArgs) -> anyhow::Result<()> {
    echo("evaluate", args);
    let rows = read_predictions(&args.pred)?;
    let data = load_data(&args.data)?;
    let index = truth_by_event(&data);
    let mut pred = Vec::with_capacity(rows.len());
    let mut truth = Vec::with_capacity(rows.len());
    for r in &rows {
        let Some(&i) = index.get(r.event_id.as_str()) else {
            bail!(mvelma::Error::InvalidConfig(format!(
                "event {} is not in the dataset",
                r.event_id
            )));
        };
        pred.push(r.y_pred);
        truth.push(data.targets[i]);
    }
    println!("{}", evaluate(&pred, &truth)?);
    Ok(())
}

fn ablate(args: &AblateArgs) -> anyhow::Result<()> {
    let data = load_data(&args.data)?;
    if args.variant.eq_ignore_ascii_case("all") {
        let cfg = args.model_args.config(Variant::Full);
        echo("ablate", &cfg);
        for r in run_ablation_suite(&data, &cfg)? {
            println!("{:<14} {:<20} {}", r.variant.tag(), r.variant.label(), r.metrics);
        }
    } else {
        let variant: Variant = args.variant.parse()?;
        let cfg = args.model_args.config(variant);
        echo("ablate", &cfg);
        let m = run_ablation(&data, variant, &cfg)?;
        println!("{:<14} {:<20} {m}", variant.tag(), variant.label());
    }
    Ok(())
}

fn map(args: &MapArgs) -> anyhow::Result<()> {
    echo("map", args);
    let rows = read_predictions(&args.pred)?;
    let data = load_data(&args.data)?;
    let index = truth_by_event(&data);
    let mut counties = Vec::with_capacity(rows.len());
    let mut observed = Vec::with_capacity(rows.len());
    let mut predicted = Vec::with_capacity(rows.len());
    let mut confidence = Vec::with_capacity(rows.len());
    for r in &rows {
        let Some(&i) = index.get(r.event_id.as_str()) else {
            bail!(mvelma::Error::InvalidConfig(format!(
                "event {} is not in the dataset",
                r.event_id
            )));
        };
        counties.push(data.events[i].county_id.as_str());
        observed.push(r.y_true);
        predicted.push(r.y_pred);
        confidence.push(r.confidence.unwrap_or(0.0));
    }
    let summary = aggregate_county(&counties, &observed, &predicted, &confidence)?;
    export_county_map(&summary, &args.out)?;
    println!("wrote {} counties to {}", summary.len(), args.out.display());
    Ok(())
}

fn check_grads(args: &CheckGradsArgs) -> anyhow::Result<()> {
    echo("check-grads", args);
    let report = run_gradient_suite(args.seed)?;
    for (group, n, worst) in report.by_group() {
        println!("{group:<12} cases={n:<5} max_rel_error={worst:.3e}");
    }
    println!(
        "total cases={} max_rel_error={:.3e} tolerance={TOLERANCE:e}",
        report.instances(),
        report.max_error()
    );
    if !report.passed() {
        bail!(mvelma::Error::NonFinite(format!(
            "gradient check exceeded tolerance: {:.3e}",
            report.max_error()
        )));
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<mvelma::Error>()) {
        Some(e) if e.is_numerical() => EXIT_NUMERICAL,
        _ => EXIT_VALIDATION,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let informational = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = e.print();
            if !informational {
                use clap::CommandFactory;
                let _ = Cli::command().print_help();
                return ExitCode::from(EXIT_USAGE);
            }
            return ExitCode::SUCCESS;
        }
    };
    let result = match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Predict(a) => predict(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Ablate(a) => ablate(a),
        Command::Map(a) => map(a),
        Command::CheckGrads(a) => check_grads(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
