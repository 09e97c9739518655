//! `ct-diag`: inspect the model, predict patient diagnoses, evaluate
//! threshold sweeps and train the classifier head.
//!
//! Exit codes: 0 success, 1 usage, 2 weights/model, 3 data.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use ctdiag_core::diagnosis::{self, AggregationRule, DiagnosisError, ThresholdPolicy, ThresholdReport};
use ctdiag_core::ingest::{self, DatasetManifest, IngestError, DEFAULT_BATCH_SIZE};
use ctdiag_core::metrics::DEFAULT_Z;
use ctdiag_core::pipeline::{score_volumes, ScoreError};
use ctdiag_core::trainer::{self, TrainConfig, TrainError};
use ctdiag_core::weights_io::{self, BindError, NtcError};
use ctdiag_core::xception::{build_modified_xception, count_params, freeze_base, HeadSpec, ModelError, ModelGraph};

/// Slices used to calibrate the BN statistics of a randomly initialized base.
const CALIBRATION_SLICES: usize = 16;

#[derive(Parser, Debug)]
#[command(name = "ct-diag", version, about = "CT-volume COVID-19 diagnosis with a modified Xception classifier")]
struct Cli {
    /// Worker threads for slice decoding and inference.
    #[arg(long, global = true, env = "CT_DIAG_WORKERS")]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print parameter counts and base geometry as JSON.
    Inspect(InspectArgs),
    /// Write one CSV row per volume with its slice counts and diagnosis.
    Predict(PredictArgs),
    /// Score a labeled dataset at one or more thresholds.
    #[command(visible_alias = "sweep")]
    Evaluate(EvaluateArgs),
    /// Train the classifier head on a labeled dataset.
    TrainHead(TrainArgs),
}

#[derive(Args, Debug)]
struct InspectArgs {
    /// NTC file to bind before reporting.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Write the tensor name manifest (`name d0,d1,...` per line) here.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    weights: PathBuf,
    /// Directory of volume directories, or a labeled `covid/`/`non-covid/` root.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    threshold: f32,
    #[arg(long, default_value = "majority")]
    rule: AggregationRule,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_BATCH_SIZE)]
    batch: usize,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    weights: PathBuf,
    /// Labeled root with `covid/` and `non-covid/` subdirectories.
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated thresholds, reported in the order given.
    #[arg(long, value_delimiter = ',', default_value = "0.15,0.5,0.9")]
    thresholds: Vec<f32>,
    #[arg(long, default_value = "majority")]
    rule: AggregationRule,
    #[arg(long, default_value_t = DEFAULT_Z)]
    z: f64,
    /// JSON destination; stdout when absent.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_BATCH_SIZE)]
    batch: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Labeled training root.
    #[arg(long)]
    train: PathBuf,
    /// Labeled validation root.
    #[arg(long)]
    val: PathBuf,
    /// Starting weights. A file without head tensors gets a seeded head; with
    /// no file the base is random and BN-calibrated on training slices.
    #[arg(long)]
    weights_in: Option<PathBuf>,
    #[arg(long)]
    weights_out: PathBuf,
    /// Per-epoch history CSV.
    #[arg(long)]
    history: Option<PathBuf>,
    #[arg(long, default_value_t = 13)]
    epochs: usize,
    #[arg(long, default_value_t = 128)]
    batch: usize,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    #[arg(long, default_value_t = 2)]
    patience: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug)]
struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }

    fn model(message: impl ToString) -> Self {
        Self {
            code: 2,
            message: message.to_string(),
        }
    }

    fn data(message: impl ToString) -> Self {
        Self {
            code: 3,
            message: message.to_string(),
        }
    }
}

impl From<NtcError> for CliError {
    fn from(e: NtcError) -> Self {
        Self::model(e)
    }
}

impl From<BindError> for CliError {
    fn from(e: BindError) -> Self {
        Self::model(e)
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        Self::model(e)
    }
}

impl From<IngestError> for CliError {
    fn from(e: IngestError) -> Self {
        Self::data(e)
    }
}

impl From<ScoreError> for CliError {
    fn from(e: ScoreError) -> Self {
        match e {
            ScoreError::Ingest(e) => e.into(),
            ScoreError::Model(e) => e.into(),
        }
    }
}

impl From<DiagnosisError> for CliError {
    fn from(e: DiagnosisError) -> Self {
        match e {
            DiagnosisError::ThresholdOutOfRange(_) | DiagnosisError::NoThresholds => Self::usage(e.to_string()),
            DiagnosisError::ProbabilityOutOfRange(_) => Self::model(e),
            _ => Self::data(e),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Ingest(e) => e.into(),
            TrainError::Unlabeled(_) | TrainError::EmptySet(_) => Self::data(e),
            TrainError::InvalidConfig(_) => Self::usage(e.to_string()),
            _ => Self::model(e),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn write_output(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| CliError::data(format!("{}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report types serialize");
    s.push('\n');
    s
}

/// Builds the model, binds every tensor from `path` and freezes the base.
fn load_model(path: &Path) -> Result<ModelGraph> {
    let entries = weights_io::load_ntc(path)?;
    let model = weights_io::bind_weights(build_modified_xception(HeadSpec::default()), &entries)?;
    Ok(freeze_base(model))
}

fn nonempty(manifest: DatasetManifest, root: &Path) -> Result<DatasetManifest> {
    if manifest.volumes.is_empty() {
        return Err(IngestError::NoVolumes(root.to_path_buf()).into());
    }
    Ok(manifest)
}

#[derive(Serialize)]
struct InspectReport {
    total_params: usize,
    trainable_params: usize,
    base_params: usize,
    conv_layer_count: usize,
    base_output_shape: [usize; 3],
    input_shape: [usize; 3],
    weights_loaded: bool,
}

fn cmd_inspect(args: &InspectArgs) -> Result<()> {
    let model = match &args.weights {
        Some(p) => load_model(p)?,
        None => freeze_base(build_modified_xception(HeadSpec::default())),
    };
    if let Some(m) = &args.manifest {
        fs::write(m, weights_io::name_manifest(&model)).map_err(|e| CliError::data(format!("{}: {e}", m.display())))?;
    }
    let counts = count_params(&model);
    let side = model.input_side();
    let report = InspectReport {
        total_params: counts.total,
        trainable_params: counts.trainable,
        base_params: model.base_param_count(),
        conv_layer_count: model.conv_layer_count(),
        base_output_shape: model.base_output_shape(),
        input_shape: [side, side, 3],
        weights_loaded: model.weights_loaded(),
    };
    write_output(None, &to_json(&report))
}

fn cmd_predict(args: &PredictArgs) -> Result<()> {
    let policy = ThresholdPolicy::new(args.threshold)?;
    if args.batch == 0 {
        return Err(CliError::usage("--batch must be at least 1"));
    }
    let model = load_model(&args.weights)?;
    let manifest = nonempty(ingest::scan_for_prediction(&args.input)?, &args.input)?;
    let scored = score_volumes(&model, &manifest.volumes, args.batch)?;
    let mut csv = String::from("volume_id,n_slices,n_covid_slices,n_noncovid_slices,diagnosis\n");
    for v in &scored {
        let p = diagnosis::diagnose_volume(&v.volume_id, &v.probabilities, &policy, args.rule)?;
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            p.volume_id,
            p.labels.len(),
            p.covid_count,
            p.noncovid_count,
            p.diagnosis.as_str()
        );
    }
    write_output(args.output.as_deref(), &csv)
}

#[derive(Serialize)]
struct SummaryRow {
    threshold: f32,
    volume_accuracy: f64,
    volume_macro_f1: f64,
    slice_accuracy: f64,
    slice_macro_f1: f64,
}

#[derive(Serialize)]
struct EvaluateReport {
    rule: AggregationRule,
    volumes: usize,
    slices: usize,
    reports: Vec<ThresholdReport>,
    summary: Vec<SummaryRow>,
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    if args.thresholds.is_empty() {
        return Err(CliError::usage("--thresholds must not be empty"));
    }
    for &t in &args.thresholds {
        ThresholdPolicy::new(t)?;
    }
    if args.batch == 0 {
        return Err(CliError::usage("--batch must be at least 1"));
    }
    let model = load_model(&args.weights)?;
    let manifest = nonempty(ingest::scan_dataset(&args.data)?, &args.data)?;
    let scored = score_volumes(&model, &manifest.volumes, args.batch)?;
    let reports = diagnosis::sweep_thresholds(&scored, &args.thresholds, args.rule, args.z)?;
    let summary: Vec<SummaryRow> = reports
        .iter()
        .map(|r| SummaryRow {
            threshold: r.threshold,
            volume_accuracy: r.volume.accuracy,
            volume_macro_f1: r.volume.macro_f1_mean,
            slice_accuracy: r.slice.accuracy,
            slice_macro_f1: r.slice.macro_f1_mean,
        })
        .collect();
    let mut table = String::from("threshold  vol_acc  vol_f1   slice_acc  slice_f1\n");
    for s in &summary {
        let _ = writeln!(
            table,
            "{:<9}  {:.4}   {:.4}   {:.4}     {:.4}",
            s.threshold, s.volume_accuracy, s.volume_macro_f1, s.slice_accuracy, s.slice_macro_f1
        );
    }
    eprint!("{table}");
    let report = EvaluateReport {
        rule: args.rule,
        volumes: manifest.volumes.len(),
        slices: manifest.slice_count(),
        reports,
        summary,
    };
    write_output(args.output.as_deref(), &to_json(&report))
}

fn initial_model(args: &TrainArgs, train: &DatasetManifest) -> Result<ModelGraph> {
    let mut model = build_modified_xception(HeadSpec::default());
    match &args.weights_in {
        Some(p) => {
            let entries = weights_io::load_ntc(p)?;
            model.init_head(args.seed);
            if !entries.iter().any(|e| e.name.starts_with("head/")) {
                log::info!("{} has no head tensors; using a seeded head", p.display());
            }
            model = weights_io::bind_base_weights(model, &entries)?;
        }
        None => {
            log::warn!("no --weights-in: using a seeded random base with calibrated BN statistics");
            model.init_random(args.seed);
            let probe = ingest::probe_batch(&train.volumes, CALIBRATION_SLICES, model.input_side())?;
            model.calibrate_base_bn(&probe)?;
        }
    }
    Ok(freeze_base(model))
}

fn cmd_train_head(args: &TrainArgs) -> Result<()> {
    let config = TrainConfig {
        learning_rate: args.lr,
        batch_size: args.batch,
        epochs: args.epochs,
        plateau_patience: args.patience,
        seed: args.seed,
        ..TrainConfig::default()
    };
    config.validate()?;
    let train = nonempty(ingest::scan_dataset(&args.train)?, &args.train)?;
    let val = nonempty(ingest::scan_dataset(&args.val)?, &args.val)?;
    let model = initial_model(args, &train)?;
    let (model, history) = trainer::train_head(model, &train, &val, &config)?;
    weights_io::save_model(&model, &args.weights_out)?;
    if let Some(h) = &args.history {
        fs::write(h, history.to_csv()).map_err(|e| CliError::data(format!("{}: {e}", h.display())))?;
    }
    write_output(None, &to_json(&history.final_epoch()))
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(CliError::usage("--workers must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::usage(e.to_string()))?;
    }
    match &cli.command {
        Command::Inspect(a) => cmd_inspect(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::TrainHead(a) => cmd_train_head(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
