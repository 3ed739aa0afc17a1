//! `icpmon` command-line driver. [`run`] takes explicit streams so the whole
//! surface can be exercised in-process.

use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use icpmon::evaluation::{self, EpsilonRow, ReportConfig};
use icpmon::io::{self, SplitConfig};
use icpmon::refmodel::{self, TrainConfig, TrainReport};
use icpmon::{
    CalibratedMonitor, Dataset, EpsilonGrid, InclusionRule, LatencyStats, NonconformityFunction,
    NonconformityKind, Role, SignificanceLevel,
};
use serde::Serialize;

pub const EXIT_OK: i32 = 0;
pub const EXIT_DATA: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "icpmon", version, about = "Conformal prediction assurance monitor")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Split a raw tabular file and train the reference classifier.
    TrainRef(TrainRefArgs),
    /// Run raw rows through a trained model and write feature CSV.
    Extract(ExtractArgs),
    /// Fit a nonconformity function and calibrate a monitor artifact.
    Calibrate(CalibrateArgs),
    /// Smallest significance level with no multiple predictions on a validation set.
    EstimateEpsilon(EstimateArgs),
    /// Prediction sets for every row of a feature file.
    Predict(PredictArgs),
    /// Verdicts for feature rows streamed on standard input.
    Monitor(MonitorArgs),
    /// Error and efficiency tables over a labeled test file.
    Evaluate(EvaluateArgs),
    /// Per-input latency of set prediction.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
struct SplitArgs {
    /// Share of each class held out for testing.
    #[arg(long, default_value_t = 0.10)]
    test_fraction: f64,
    /// Share of the non-test rows used for proper training.
    #[arg(long, default_value_t = 0.80)]
    train_fraction: f64,
    /// Share of the remaining hold-out used for calibration; the rest validates.
    #[arg(long, default_value_t = 0.50)]
    calib_share: f64,
    /// Calibrate on the whole hold-out and reuse it for validation.
    #[arg(long)]
    share_calib_validation: bool,
}

#[derive(Debug, Args)]
struct TrainRefArgs {
    /// Raw tabular CSV (UCI layout or `id,label,x0..`).
    #[arg(long)]
    data: PathBuf,
    /// Directory for the model and the four split files.
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    split: SplitArgs,
    /// Hidden layer width (default: 2/3 of the inputs plus the classes).
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long, default_value_t = 300)]
    epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    learning_rate: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 25)]
    patience: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct ExtractArgs {
    #[arg(long)]
    model: PathBuf,
    /// Raw tabular CSV.
    #[arg(long)]
    input: PathBuf,
    /// Output feature CSV (standard output when absent).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    /// Nonconformity function.
    #[arg(long = "fn", value_parser = parse_kind)]
    function: NonconformityKind,
    /// Neighbors for `knn`.
    #[arg(long)]
    k: Option<usize>,
    /// Proper training features (embedding-based functions).
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    calib: PathBuf,
    /// Validation features (temperature-scaled functions).
    #[arg(long)]
    validation: Option<PathBuf>,
    /// `strict` includes labels with p > ε, `weak` with p >= ε.
    #[arg(long, default_value = "strict", value_parser = parse_inclusion)]
    inclusion: InclusionRule,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EstimateArgs {
    #[arg(long)]
    monitor: PathBuf,
    #[arg(long)]
    validation: PathBuf,
}

#[derive(Debug, Clone, Copy)]
enum EpsilonArg {
    Fixed(SignificanceLevel),
    Auto,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    monitor: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// Significance level in (0, 1), or `auto` to estimate it from `--validation`.
    #[arg(long, value_parser = parse_epsilon)]
    epsilon: EpsilonArg,
    #[arg(long)]
    validation: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct MonitorArgs {
    #[arg(long)]
    monitor: PathBuf,
    #[arg(long, value_parser = parse_epsilon)]
    epsilon: EpsilonArg,
    #[arg(long)]
    validation: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    monitor: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// Comma-separated significance levels for the per-ε table.
    #[arg(long, value_delimiter = ',', default_values_t = [0.01, 0.05, 0.10, 0.20])]
    epsilons: Vec<f64>,
    /// Also estimate ε from this validation file and evaluate at it.
    #[arg(long)]
    validation: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    /// Include latency measurements (makes the summary nondeterministic).
    #[arg(long)]
    timing: bool,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long)]
    monitor: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    epsilon: f64,
    #[arg(long, default_value_t = 3)]
    repetitions: usize,
}

/// A mistake in how the tool was invoked, as opposed to bad data.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn parse_kind(s: &str) -> std::result::Result<NonconformityKind, String> {
    s.parse().map_err(|e: icpmon::Error| e.to_string())
}

fn parse_inclusion(s: &str) -> std::result::Result<InclusionRule, String> {
    s.parse().map_err(|e: icpmon::Error| e.to_string())
}

fn parse_epsilon(s: &str) -> std::result::Result<EpsilonArg, String> {
    if s == "auto" {
        return Ok(EpsilonArg::Auto);
    }
    let v: f64 = s.parse().map_err(|_| format!("`{s}` is neither a number nor `auto`"))?;
    SignificanceLevel::new(v).map(EpsilonArg::Fixed).map_err(|e| e.to_string())
}

/// Runs one command; returns the process exit code.
pub fn run<I, T>(argv: I, stdin: &mut dyn BufRead, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            let sink: &mut dyn Write = if code == 0 { stdout } else { stderr };
            let _ = write!(sink, "{text}");
            return if code == 0 { EXIT_OK } else { EXIT_USAGE };
        }
    };
    match dispatch(cli.command, stdin, stdout, stderr) {
        Ok(code) => code,
        // reader went away (e.g. `| head`), nothing left to report
        Err(e) if is_broken_pipe(&e) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                EXIT_USAGE
            } else {
                EXIT_DATA
            }
        }
    }
}

fn is_broken_pipe(e: &anyhow::Error) -> bool {
    e.chain()
        .filter_map(|c| c.downcast_ref::<std::io::Error>())
        .any(|io| io.kind() == std::io::ErrorKind::BrokenPipe)
}

fn dispatch(cmd: Command, stdin: &mut dyn BufRead, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<i32> {
    match cmd {
        Command::TrainRef(a) => train_ref(a, stdout),
        Command::Extract(a) => extract(a, stdout),
        Command::Calibrate(a) => calibrate(a, stdout),
        Command::EstimateEpsilon(a) => estimate(a, stdout),
        Command::Predict(a) => predict(a, stdout),
        Command::Monitor(a) => monitor(a, stdin, stdout, stderr),
        Command::Evaluate(a) => evaluate(a, stdout),
        Command::Bench(a) => bench(a, stdout),
    }
    .map(|()| EXIT_OK)
    .or_else(|e| match e.downcast::<PartialFailure>() {
        Ok(_) => Ok(EXIT_DATA),
        Err(e) => Err(e),
    })
}

/// Some streamed rows failed; each was already reported.
#[derive(Debug)]
struct PartialFailure;

impl std::fmt::Display for PartialFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("one or more rows failed")
    }
}

impl std::error::Error for PartialFailure {}

/// Names the file on errors that do not already carry it.
fn at_path<T>(result: icpmon::Result<T>, path: &Path) -> Result<T> {
    result.map_err(|e| match e {
        icpmon::Error::Parse { .. } => e.into(),
        other => anyhow::Error::new(other).context(format!("loading {}", path.display())),
    })
}

fn load_features(path: &Path, role: Role) -> Result<Dataset> {
    at_path(io::load_feature_file(path, role), path)
}

fn load_monitor(path: &Path) -> Result<CalibratedMonitor> {
    at_path(io::load_monitor(path), path)
}

fn write_json<T: Serialize>(value: &T, out: &mut dyn Write) -> Result<()> {
    serde_json::to_writer_pretty(&mut *out, value)?;
    writeln!(out)?;
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

#[derive(Serialize)]
struct TrainSummary {
    inputs: usize,
    hidden: usize,
    classes: usize,
    labels: Vec<String>,
    split_sizes: [usize; 4],
    train_accuracy: f64,
    test_accuracy: f64,
    report: TrainReport,
}

fn train_ref(a: TrainRefArgs, stdout: &mut dyn Write) -> Result<()> {
    let data = at_path(io::load_tabular(&a.data, Role::ProperTraining), &a.data)?;
    let cfg = SplitConfig {
        test_fraction: a.split.test_fraction,
        train_fraction_of_rest: a.split.train_fraction,
        calib_share_of_holdout: a.split.calib_share,
        seed: a.seed,
        share_calibration_validation: a.split.share_calib_validation,
    };
    let splits = io::split_tabular(&data, &cfg).map_err(|e| usage(e.to_string()))?;
    let train_cfg = TrainConfig {
        learning_rate: a.learning_rate,
        epochs: a.epochs,
        batch_size: a.batch_size,
        seed: a.seed,
        early_stop_patience: a.patience,
        hidden: a.hidden,
        ..TrainConfig::default()
    };
    let (model, report) = refmodel::train_with_report(&splits.train, &train_cfg)?;
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    write_file(&a.out_dir.join("model.bin"), &io::encode_model(&model))?;
    for (name, part) in [
        ("train", &splits.train),
        ("calib", &splits.calibration),
        ("validation", &splits.validation),
        ("test", &splits.test),
    ] {
        io::write_tabular_file(part, a.out_dir.join(format!("{name}.raw.csv")))?;
    }
    let summary = TrainSummary {
        inputs: model.inputs,
        hidden: model.hidden,
        classes: model.classes,
        labels: model.universe.names().to_vec(),
        split_sizes: [
            splits.train.len(),
            splits.calibration.len(),
            splits.validation.len(),
            splits.test.len(),
        ],
        train_accuracy: model.accuracy(&splits.train)?,
        test_accuracy: model.accuracy(&splits.test)?,
        report,
    };
    let mut json = Vec::new();
    write_json(&summary, &mut json)?;
    write_file(&a.out_dir.join("train_summary.json"), &json)?;
    stdout.write_all(&json)?;
    Ok(())
}

fn extract(a: ExtractArgs, stdout: &mut dyn Write) -> Result<()> {
    let model = at_path(io::load_model(&a.model), &a.model)?;
    let raw = at_path(io::load_tabular(&a.input, Role::Test), &a.input)?;
    if raw.universe.names() != model.universe.names() {
        bail!("label names of {} do not match the model", a.input.display());
    }
    let features = refmodel::export_features(&model, &raw)?;
    match a.out {
        Some(path) => io::write_feature_file(&features, &path)?,
        None => io::write_features(&features, stdout)?,
    }
    Ok(())
}

fn calibrate(a: CalibrateArgs, stdout: &mut dyn Write) -> Result<()> {
    let kind = a.function;
    if a.k.is_some() && kind != NonconformityKind::Knn {
        return Err(usage(format!("--k only applies to --fn knn, not {kind}")));
    }
    if kind.uses_embedding() && a.train.is_none() {
        return Err(usage(format!("--fn {kind} needs --train")));
    }
    if kind.is_temperature_scaled() && a.validation.is_none() {
        return Err(usage(format!("--fn {kind} needs --validation to fit the temperature")));
    }
    let k = a.k.unwrap_or(icpmon::nonconformity::DEFAULT_K);
    let train = a
        .train
        .as_deref()
        .filter(|_| kind.uses_embedding())
        .map(|p| load_features(p, Role::ProperTraining))
        .transpose()?;
    let validation = a
        .validation
        .as_deref()
        .filter(|_| kind.is_temperature_scaled())
        .map(|p| load_features(p, Role::Validation))
        .transpose()?;
    let calib = load_features(&a.calib, Role::Calibration)?;
    if let Some(t) = &train {
        if t.universe != calib.universe {
            bail!("training and calibration files disagree on the label set");
        }
    }
    let f = NonconformityFunction::fit(kind, train.as_ref(), validation.as_ref(), k)?;
    let monitor = CalibratedMonitor::calibrate(f, &calib)?.with_inclusion(a.inclusion);
    write_file(&a.out, &io::encode_monitor(&monitor))?;
    let mut summary = serde_json::json!({
        "function": kind.name(),
        "calibration_size": monitor.calibration_size(),
        "classes": monitor.classes(),
        "inclusion": monitor.inclusion().to_string(),
    });
    if let Some(k) = monitor.function().k() {
        summary["k"] = k.into();
    }
    if let Some(t) = monitor.function().temperature() {
        summary["temperature"] = t.into();
    }
    write_json(&summary, stdout)
}

fn resolve_epsilon(
    monitor: &CalibratedMonitor,
    epsilon: EpsilonArg,
    validation: Option<&Path>,
) -> Result<SignificanceLevel> {
    match (epsilon, validation) {
        (EpsilonArg::Fixed(e), _) => Ok(e),
        (EpsilonArg::Auto, Some(v)) => Ok(monitor.estimate_epsilon(&load_features(v, Role::Validation)?)?),
        (EpsilonArg::Auto, None) => Err(usage("--epsilon auto requires --validation")),
    }
}

fn estimate(a: EstimateArgs, stdout: &mut dyn Write) -> Result<()> {
    let monitor = load_monitor(&a.monitor)?;
    let validation = load_features(&a.validation, Role::Validation)?;
    let e = monitor.estimate_epsilon(&validation)?;
    writeln!(stdout, "{:?}", e.value())?;
    Ok(())
}

fn predict(a: PredictArgs, stdout: &mut dyn Write) -> Result<()> {
    let monitor = load_monitor(&a.monitor)?;
    let epsilon = resolve_epsilon(&monitor, a.epsilon, a.validation.as_deref())?;
    let (_, rows) = at_path(io::load_feature_rows(&a.input), &a.input)?;
    let mut buf = Vec::new();
    {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(&mut buf);
        w.write_record(io::prediction_header(monitor.classes()))?;
        for row in &rows {
            let r = monitor
                .predict_set(&row.features, epsilon)
                .with_context(|| format!("{}:{} ({})", a.input.display(), row.line, row.id))?;
            w.write_record(io::prediction_record(&row.id, &r))?;
        }
        w.flush()?;
    }
    match a.out {
        Some(path) => write_file(&path, &buf),
        None => Ok(stdout.write_all(&buf)?),
    }
}

fn monitor(a: MonitorArgs, stdin: &mut dyn BufRead, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<()> {
    let monitor = load_monitor(&a.monitor)?;
    let epsilon = resolve_epsilon(&monitor, a.epsilon, a.validation.as_deref())?;
    let mut reader = io::FeatureReader::new(stdin, "<stdin>")?;
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(stdout);
    w.write_record(io::prediction_header(monitor.classes()))?;
    w.flush()?;
    let mut failed = 0usize;
    while let Some(row) = reader.next_row() {
        let outcome = row.map_err(anyhow::Error::from).and_then(|row| {
            let r = monitor
                .predict_set(&row.features, epsilon)
                .with_context(|| format!("<stdin>:{} ({})", row.line, row.id))?;
            Ok((row.id, r))
        });
        match outcome {
            Ok((id, r)) => {
                w.write_record(io::prediction_record(&id, &r))?;
                w.flush()?;
            }
            Err(e) => {
                failed += 1;
                writeln!(stderr, "error: {e:#}")?;
            }
        }
    }
    if failed > 0 {
        return Err(PartialFailure.into());
    }
    Ok(())
}

#[derive(Serialize)]
struct EvaluateSummary {
    config: ReportConfig,
    rows: Vec<EpsilonRow>,
    estimated_epsilon: Option<EpsilonRow>,
    latency: Option<LatencyStats>,
}

fn evaluate(a: EvaluateArgs, stdout: &mut dyn Write) -> Result<()> {
    let monitor = load_monitor(&a.monitor)?;
    let test = load_features(&a.test, Role::Test)?;
    let levels = a
        .epsilons
        .iter()
        .map(|&e| SignificanceLevel::new(e).map_err(|err| usage(err.to_string())))
        .collect::<Result<Vec<_>>>()?;
    if levels.is_empty() {
        return Err(usage("--epsilons must list at least one level"));
    }
    let report = evaluation::evaluate(&monitor, &test, &levels)?;
    let curve = evaluation::calibration_curve(&monitor, &test, &EpsilonGrid::default())?;
    let estimated_epsilon = match &a.validation {
        Some(v) => {
            let e = monitor.estimate_epsilon(&load_features(v, Role::Validation)?)?;
            Some(evaluation::evaluate(&monitor, &test, &[e])?.rows.remove(0))
        }
        None => None,
    };
    let latency = if a.timing {
        Some(evaluation::benchmark_latency(&monitor, &test, 1, levels[0])?)
    } else {
        None
    };

    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let mut buf = Vec::new();
    io::write_epsilon_rows(&report.rows, &mut buf)?;
    write_file(&a.out_dir.join("per_epsilon.csv"), &buf)?;
    buf.clear();
    io::write_curve(&curve, &mut buf)?;
    write_file(&a.out_dir.join("calibration_curve.csv"), &buf)?;
    buf.clear();
    io::write_cumulative_errors(&report.cumulative_errors, &mut buf)?;
    write_file(&a.out_dir.join("cumulative_error.csv"), &buf)?;

    let summary = EvaluateSummary {
        config: report.config,
        rows: report.rows,
        estimated_epsilon,
        latency,
    };
    buf.clear();
    write_json(&summary, &mut buf)?;
    write_file(&a.out_dir.join("summary.json"), &buf)?;
    stdout.write_all(&buf)?;
    Ok(())
}

fn bench(a: BenchArgs, stdout: &mut dyn Write) -> Result<()> {
    let epsilon = SignificanceLevel::new(a.epsilon).map_err(|e| usage(e.to_string()))?;
    if a.repetitions == 0 {
        return Err(usage("--repetitions must be at least 1"));
    }
    let monitor = load_monitor(&a.monitor)?;
    let test = load_features(&a.test, Role::Test)?;
    let stats = evaluation::benchmark_latency(&monitor, &test, a.repetitions, epsilon)?;
    write_json(&stats, stdout)
}
