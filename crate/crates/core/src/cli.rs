//! `bnn-select` command-line interface.
//!
//! Exit status: 0 success, 1 usage error, 2 data or format error,
//! 3 numeric or training failure. Output files are written atomically.

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::dataset::{read_features, stratified_splits, synth_generate, write_features, SynthConfig};
use crate::document::{load_posterior, save_model, ModelDocument, PointModel};
use crate::ensemble::{load_matrix, predict_matrix, save_matrix, EnsembleConfig};
use crate::error::{FormatError, ModelError};
use crate::fsutil::{read_to_string, write_atomic};
use crate::mlp::MlpArchitecture;
use crate::report::{aggregate_folds, markdown_table, svg_chart};
use crate::selective::{
    default_policies, evaluate, fmt_sig6, parse_sweep_csv, sweep_csv, sweep_with_baseline,
    ConfidencePolicy, DEFAULT_FIXED,
};
use crate::train::{fit_map, fit_svi, TrainConfig, TrainMode};
use crate::variational::PriorSpec;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric error: {m}"),
        }
    }
}

impl From<FormatError> for CliError {
    fn from(e: FormatError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::NonFiniteLoss { .. } => CliError::Numeric(e.to_string()),
            ModelError::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "bnn-select", version, about = "Variational MLP heads with (N, P) selective classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a two-class Gaussian feature file
    Synth(SynthArgs),
    /// Write stratified train/validation folds of a feature file
    Split(SplitArgs),
    /// Train a variational posterior (svi) or a point network (map)
    Train(TrainArgs),
    /// Sample networks from a posterior and write their prediction matrix
    Sample(SampleArgs),
    /// Evaluate one (N, P) policy on a prediction matrix
    Eval(EvalArgs),
    /// Evaluate a grid of (N, P) policies with random-subset baselines
    Sweep(SweepArgs),
    /// Aggregate sweep tables into a Markdown table and an SVG chart
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 1000)]
    per_class: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    /// Distance between class means in noise standard deviations
    #[arg(long, default_value_t = 4.0)]
    separation: f64,
    #[arg(long, default_value_t = 1.0)]
    noise_std: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SplitArgs {
    #[arg(long)]
    features: PathBuf,
    /// Training fraction per class
    #[arg(long, default_value_t = 0.8)]
    ratio: f64,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Svi,
    Map,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::Svi)]
    mode: ModeArg,
    /// Layer widths, input first
    #[arg(long, value_delimiter = ',', default_value = "512,256,128,2")]
    arch: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    /// Initial learning rate per layer, or one rate for all layers
    #[arg(long, value_delimiter = ',', default_value = "0.0001,0.001,0.002")]
    lr: Vec<f64>,
    /// Learning-rate multiplier applied after every epoch
    #[arg(long, default_value_t = 0.95)]
    lr_decay: f64,
    /// Reparameterization samples per ELBO estimate
    #[arg(long, default_value_t = 1)]
    mc_samples: usize,
    #[arg(long, default_value_t = 0.0)]
    prior_mean: f64,
    #[arg(long, default_value_t = 1.0)]
    prior_std: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SampleArgs {
    #[arg(long)]
    posterior: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Evaluate samples on one thread (output is identical)
    #[arg(long)]
    sequential: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    matrix: PathBuf,
    #[arg(long)]
    n: f64,
    #[arg(long)]
    p: f64,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long)]
    matrix: PathBuf,
    /// N values; without either grid the twelve default rows are used
    #[arg(long, value_delimiter = ',')]
    n_grid: Option<Vec<f64>>,
    /// P values, crossed with the N values
    #[arg(long, value_delimiter = ',')]
    p_grid: Option<Vec<f64>>,
    #[arg(long, default_value_t = 10)]
    baseline_repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// One sweep table per fold
    #[arg(long, num_args = 1.., required = true)]
    sweep_csv: Vec<PathBuf>,
    #[arg(long)]
    out_md: PathBuf,
    #[arg(long)]
    out_svg: PathBuf,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp
                | ErrorKind::DisplayVersion
                | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => 0,
                _ => 1,
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("bnn-select: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Synth(a) => cmd_synth(a),
        Command::Split(a) => cmd_split(a),
        Command::Train(a) => cmd_train(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Report(a) => cmd_report(a),
    }
}

fn cmd_synth(a: SynthArgs) -> Result<(), CliError> {
    let config = SynthConfig {
        per_class_count: a.per_class,
        dim: a.dim,
        separation: a.separation,
        noise_std: a.noise_std,
        seed: a.seed,
    };
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let data = synth_generate(&config)?;
    write_features(&data, &a.out)?;
    eprintln!("wrote {} records of dim {} to {}", data.len(), data.dim(), a.out.display());
    Ok(())
}

fn cmd_split(a: SplitArgs) -> Result<(), CliError> {
    if !(a.ratio > 0.0 && a.ratio < 1.0) {
        return Err(CliError::Usage(format!("--ratio must be in (0, 1), got {}", a.ratio)));
    }
    if a.k == 0 {
        return Err(CliError::Usage("--k must be ≥ 1".into()));
    }
    let data = read_features(&a.features)?;
    let plan = stratified_splits(&data, a.ratio, a.k, a.seed)?;
    fs::create_dir_all(&a.out_dir).map_err(|e| CliError::Data(format!("{}: {e}", a.out_dir.display())))?;
    for (j, fold) in plan.folds.iter().enumerate() {
        write_features(&data.subset(&fold.train), &a.out_dir.join(format!("fold{j}.train.csv")))?;
        write_features(&data.subset(&fold.validation), &a.out_dir.join(format!("fold{j}.val.csv")))?;
        eprintln!("fold {j}: {} train / {} validation", fold.train.len(), fold.validation.len());
    }
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<(), CliError> {
    let arch = MlpArchitecture::new(a.arch).map_err(|e| CliError::Usage(e.to_string()))?;
    let prior = PriorSpec::new(a.prior_mean, a.prior_std).map_err(|e| CliError::Usage(e.to_string()))?;
    let config = TrainConfig {
        mode: match a.mode {
            ModeArg::Svi => TrainMode::Svi,
            ModeArg::Map => TrainMode::Map,
        },
        epochs: a.epochs,
        batch_size: a.batch,
        learning_rates: a.lr,
        lr_decay_per_epoch: a.lr_decay,
        elbo_mc_samples: a.mc_samples,
        seed: a.seed,
        prior,
        ..TrainConfig::default()
    };
    config.validate(&arch).map_err(|e| CliError::Usage(e.to_string()))?;
    let data = read_features(&a.features)?;
    if data.dim() != arch.input_dim() {
        return Err(CliError::Data(format!(
            "features have dimension {}, architecture {arch} expects {}",
            data.dim(),
            arch.input_dim()
        )));
    }
    let doc = match config.mode {
        TrainMode::Svi => {
            let run = fit_svi(&data, &arch, &config)?;
            report_losses(&run.epoch_losses);
            ModelDocument::Posterior(run.posterior)
        }
        TrainMode::Map => {
            let run = fit_map(&data, &arch, &config)?;
            report_losses(&run.epoch_losses);
            ModelDocument::Point(PointModel {
                network: run.network,
                prior,
                train_seed: config.seed,
                metadata: crate::variational::TrainMetadata {
                    epochs: config.epochs,
                    final_loss: run.epoch_losses.last().copied(),
                },
            })
        }
    };
    save_model(&doc, &a.out)?;
    Ok(())
}

fn report_losses(losses: &[f64]) {
    for (e, l) in losses.iter().enumerate() {
        eprintln!("epoch {}: loss {}", e + 1, fmt_sig6(*l));
    }
}

fn cmd_sample(a: SampleArgs) -> Result<(), CliError> {
    if a.samples == 0 {
        return Err(CliError::Usage("--samples must be ≥ 1".into()));
    }
    let posterior = load_posterior(&a.posterior)?;
    let data = read_features(&a.features)?;
    let config = EnsembleConfig {
        sample_count: a.samples,
        master_seed: a.seed,
        parallel: !a.sequential,
    };
    let matrix = predict_matrix(&posterior, &data, &config)?;
    save_matrix(&matrix, &a.out)?;
    eprintln!(
        "wrote {} samples x {} images x {} classes to {}",
        matrix.sample_count(),
        matrix.image_count(),
        matrix.class_count(),
        a.out.display()
    );
    Ok(())
}

fn policy(n: f64, p: f64) -> Result<ConfidencePolicy, CliError> {
    ConfidencePolicy::new(n, p).map_err(|e| CliError::Usage(e.to_string()))
}

fn cmd_eval(a: EvalArgs) -> Result<(), CliError> {
    let policy = policy(a.n, a.p)?;
    let matrix = load_matrix(&a.matrix)?;
    let t = evaluate(&matrix, policy)?;
    println!(
        "n={} p={} total={} skipped={} covered={} coverage={} accuracy={}",
        fmt_sig6(t.n),
        fmt_sig6(t.p),
        t.total,
        t.skipped,
        t.covered,
        fmt_sig6(t.coverage),
        t.accuracy.map_or_else(|| "NA".to_string(), fmt_sig6)
    );
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> Result<(), CliError> {
    if a.baseline_repeats == 0 {
        return Err(CliError::Usage("--baseline-repeats must be ≥ 1".into()));
    }
    let policies = match (&a.n_grid, &a.p_grid) {
        (None, None) => default_policies(),
        (n_grid, p_grid) => {
            let fixed = vec![DEFAULT_FIXED];
            let n_grid = n_grid.as_ref().unwrap_or(&fixed);
            let p_grid = p_grid.as_ref().unwrap_or(&fixed);
            if n_grid.is_empty() || p_grid.is_empty() {
                return Err(CliError::Usage("grids must be non-empty".into()));
            }
            n_grid
                .iter()
                .flat_map(|&n| p_grid.iter().map(move |&p| policy(n, p)))
                .collect::<Result<Vec<_>, _>>()?
        }
    };
    let matrix = load_matrix(&a.matrix)?;
    let rows = sweep_with_baseline(&matrix, &policies, a.baseline_repeats, a.seed)?;
    write_atomic(&a.out, sweep_csv(&rows).as_bytes())?;
    Ok(())
}

fn cmd_report(a: ReportArgs) -> Result<(), CliError> {
    let folds = a
        .sweep_csv
        .iter()
        .map(|p| {
            parse_sweep_csv(&read_to_string(p)?)
                .map_err(|e| CliError::Data(format!("{}: {e}", p.display())))
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let rows = aggregate_folds(&folds)?;
    write_atomic(&a.out_md, markdown_table(&rows, folds.len()).as_bytes())?;
    write_atomic(&a.out_svg, svg_chart(&rows).as_bytes())?;
    Ok(())
}
