//! The `kdc` command-line pipeline: train, eval, hybrid, sweep, inspect.
//!
//! Every command can also read flags from a `key=value` file given by
//! `--config FILE` (keys are long flag names without the leading dashes).
//! Flags on the command line override the file.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::classify::{self, posteriors, Classifier, Metrics, PriorMode};
use crate::dataset::{self, LabeledImageSet};
use crate::density::VarianceParams;
use crate::error::{Error, Result};
use crate::hybrid::{self, Combiner, PosteriorTable};
use crate::inspect;
use crate::persist;
use crate::selection::{SelectionConfig, SelectionTrace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DataFormat {
    /// MNIST IDX image + label files
    Idx,
    /// one `label p1 ... pD` line per image
    Delim,
}

#[derive(Debug, Parser)]
#[command(name = "kdc", version, about = "Kernel-distortion generative classifier", args_override_self = true)]
pub struct Cli {
    /// Worker threads (default: all cores)
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// key=value file of flags; explicit flags override it
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Select kernels for every class and save the model
    Train(TrainArgs),
    /// Evaluate a saved model on labeled data
    Eval(EvalArgs),
    /// Combine generative and discriminative posterior tables
    Hybrid(HybridArgs),
    /// Train and evaluate over a range of one parameter
    Sweep(SweepArgs),
    /// Dump a kernel center and its first basis vectors as PGM images
    Inspect(InspectArgs),
}

#[derive(Debug, Clone, Args)]
pub struct FormatArgs {
    #[arg(long, value_enum, default_value = "idx")]
    pub format: DataFormat,
    /// Image width for delimited input
    #[arg(long, default_value_t = 16)]
    pub width: usize,
    /// Image height for delimited input
    #[arg(long, default_value_t = 16)]
    pub height: usize,
    /// Zero margin added on every side
    #[arg(long, default_value_t = 1)]
    pub margin: usize,
}

#[derive(Debug, Clone, Args)]
pub struct SelectionArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub kernels: usize,
    #[arg(long, default_value_t = 3)]
    pub poly_order: u32,
    #[arg(long, default_value_t = 40)]
    pub subspace_dim: usize,
    #[arg(long, default_value_t = 0.9)]
    pub sigma_d2: f64,
    #[arg(long, default_value_t = 0.03)]
    pub sigma_o2: f64,
    #[arg(long, default_value_t = 500)]
    pub iterations: usize,
    /// `auto` or a positive number
    #[arg(long, default_value = "auto")]
    pub assignment_scale: String,
    /// Distortion operator step
    #[arg(long, default_value_t = 0.5)]
    pub step: f64,
    #[arg(long, default_value = "empirical")]
    pub priors: String,
}

impl SelectionArgs {
    fn selection_config(&self) -> Result<SelectionConfig> {
        let config = SelectionConfig {
            kernel_count: self.kernels,
            iterations: self.iterations,
            assignment_scale: self.assignment_scale.parse()?,
            seed: self.seed,
            poly_order: self.poly_order,
            subspace_dim: self.subspace_dim,
            variances: VarianceParams::new(self.sigma_d2, self.sigma_o2)?,
            step: self.step,
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Clone, Args)]
pub struct TrainDataArgs {
    #[arg(long)]
    pub train_images: PathBuf,
    /// Label file (IDX only)
    #[arg(long)]
    pub train_labels: Option<PathBuf>,
    /// Use a seeded stratified subset of this many samples per class
    #[arg(long)]
    pub per_class: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct TestDataArgs {
    #[arg(long)]
    pub test_images: PathBuf,
    #[arg(long)]
    pub test_labels: Option<PathBuf>,
    /// Use a seeded stratified subset of this many samples per class
    #[arg(long)]
    pub test_per_class: Option<usize>,
    /// First drop the training split drawn with `--per-class N --seed S`
    /// from the same file
    #[arg(long)]
    pub exclude_per_class: Option<usize>,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: TrainDataArgs,
    #[command(flatten)]
    pub format: FormatArgs,
    #[command(flatten)]
    pub selection: SelectionArgs,
    /// Output model directory
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: TestDataArgs,
    #[command(flatten)]
    pub format: FormatArgs,
    /// Seed of the stratified splits
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Metrics report path (stdout when absent)
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Write the generative posterior table here
    #[arg(long)]
    pub emit_posteriors: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct HybridArgs {
    #[arg(long)]
    pub generative: PathBuf,
    #[arg(long)]
    pub discriminative: PathBuf,
    /// Labels: an IDX label file or one integer per line
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub mode: String,
    /// Fixed tau (cascade) or w (stack)
    #[arg(long)]
    pub param: Option<f64>,
    /// Tune the parameter by k-fold cross validation
    #[arg(long)]
    pub tune: bool,
    /// `start:step:end` or a comma list; default 0:0.01:1
    #[arg(long)]
    pub grid: Option<String>,
    #[arg(long, default_value_t = 10)]
    pub folds: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepAxis {
    Q,
    VarianceRatio,
    P,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct SweepArgs {
    #[arg(long, value_enum)]
    pub axis: SweepAxis,
    /// Comma-separated values
    #[arg(long)]
    pub values: String,
    #[command(flatten)]
    pub train: TrainDataArgs,
    #[command(flatten)]
    pub test: TestDataArgs,
    #[command(flatten)]
    pub format: FormatArgs,
    #[command(flatten)]
    pub selection: SelectionArgs,
    /// Results table path (stdout when absent)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct InspectArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long = "class")]
    pub class: usize,
    #[arg(long)]
    pub kernel: usize,
    #[arg(long)]
    pub out: PathBuf,
}

/// Where and how to read one labeled image set.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSource {
    pub images: PathBuf,
    pub labels: Option<PathBuf>,
    pub format: DataFormat,
    pub width: usize,
    pub height: usize,
    pub margin: usize,
}

impl DataSource {
    /// Loads and pads the set.
    pub fn load(&self) -> Result<LabeledImageSet> {
        let raw = match self.format {
            DataFormat::Idx => {
                let labels = self.labels.as_ref().ok_or_else(|| {
                    Error::Config("IDX input needs a label file".into())
                })?;
                dataset::load_idx(&self.images, labels)?
            }
            DataFormat::Delim => dataset::load_delimited(&self.images, self.width, self.height)?,
        };
        Ok(dataset::pad_margin(&raw, self.margin))
    }
}

fn source(images: &Path, labels: Option<&PathBuf>, f: &FormatArgs) -> DataSource {
    DataSource {
        images: images.to_path_buf(),
        labels: labels.cloned(),
        format: f.format,
        width: f.width,
        height: f.height,
        margin: f.margin,
    }
}

/// Everything `train` needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: DataSource,
    pub per_class: Option<usize>,
    pub selection: SelectionConfig,
    pub priors: PriorMode,
    pub out: PathBuf,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        for p in std::iter::once(&self.train.images).chain(self.train.labels.as_ref()) {
            if !p.exists() {
                return Err(Error::Config(format!("{} does not exist", p.display())));
            }
        }
        self.selection.validate()
    }

    /// The training set after padding and optional stratified subsetting.
    pub fn training_set(&self) -> Result<LabeledImageSet> {
        let set = self.train.load()?;
        match self.per_class {
            Some(n) => Ok(dataset::stratified_sample(&set, n, self.selection.seed)?.0),
            None => Ok(set),
        }
    }
}

/// Test-side data selection.
#[derive(Debug, Clone, PartialEq)]
pub struct TestSelection {
    pub source: DataSource,
    pub per_class: Option<usize>,
    pub exclude_per_class: Option<usize>,
    pub seed: u64,
}

impl TestSelection {
    pub fn load(&self) -> Result<LabeledImageSet> {
        let mut set = self.source.load()?;
        if let Some(n) = self.exclude_per_class {
            set = dataset::stratified_sample(&set, n, self.seed)?.1;
        }
        if let Some(n) = self.per_class {
            set = dataset::stratified_sample(&set, n, self.seed)?.0;
        }
        Ok(set)
    }
}

pub fn trace_file_name(m: usize) -> String {
    format!("class_{m:03}.tsv")
}

/// Trains, saves the model under `out`, and writes one trace log per class
/// to `out/traces/`.
pub fn cmd_train(config: &RunConfig) -> Result<(Classifier, Vec<SelectionTrace>)> {
    config.validate()?;
    let set = config.training_set()?;
    let (classifier, traces) = classify::train(&set, &config.selection, config.priors)?;
    persist::save_model(&classifier, &config.out)?;
    let trace_dir = config.out.join("traces");
    fs::create_dir_all(&trace_dir).map_err(|e| Error::io(&trace_dir, e))?;
    for (m, trace) in traces.iter().enumerate() {
        let path = trace_dir.join(trace_file_name(m));
        fs::write(&path, trace.to_delimited()).map_err(|e| Error::io(&path, e))?;
    }
    Ok((classifier, traces))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub model: PathBuf,
    pub test: TestSelection,
    pub report: Option<PathBuf>,
    pub emit_posteriors: Option<PathBuf>,
}

/// Evaluates a saved model; writes the report (and posteriors when asked).
/// Returns the metrics and the report text.
pub fn cmd_eval(config: &EvalConfig) -> Result<(Metrics, String)> {
    let classifier = persist::load_model(&config.model)?;
    let test = config.test.load()?;
    if test.dimension() != classifier.dimension() {
        return Err(Error::Config(format!(
            "test images are {}x{} but the model expects {}x{}",
            test.width(),
            test.height(),
            classifier.width(),
            classifier.height()
        )));
    }
    let metrics = classify::evaluate(&test, &classifier)?;
    let report = metrics.to_report();
    if let Some(path) = &config.report {
        fs::write(path, &report).map_err(|e| Error::io(path, e))?;
    }
    if let Some(path) = &config.emit_posteriors {
        let table = PosteriorTable::new(posteriors(&test, &classifier)?, "kernel-distortion")?;
        table.save(path)?;
    }
    Ok((metrics, report))
}

/// Labels from an IDX label file or a text file with one integer per line.
pub fn load_labels(path: &Path) -> Result<Vec<usize>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() >= 8 && bytes[..4] == [0, 0, 8, 1] {
        let count = u32::from_be_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]) as usize;
        let data = bytes.get(8..8 + count).ok_or_else(|| {
            Error::io(path, std::io::Error::new(std::io::ErrorKind::UnexpectedEof, "truncated labels"))
        })?;
        return Ok(data.iter().map(|&b| usize::from(b)).collect());
    }
    let text = String::from_utf8(bytes).map_err(|_| Error::Format(format!("{} is not text", path.display())))?;
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
        .map(|(n, l)| {
            l.parse()
                .map_err(|_| Error::Format(format!("{} line {n}: bad label {l:?}", path.display())))
        })
        .collect()
}

/// Parses `start:step:end` or a comma-separated list.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let bad = || Error::Config(format!("bad grid {spec:?}"));
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() == 3 {
        let nums: Vec<f64> = parts
            .iter()
            .map(|s| s.trim().parse().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        let (start, step, end) = (nums[0], nums[1], nums[2]);
        if !(step > 0.0) || end < start {
            return Err(bad());
        }
        let count = ((end - start) / step + 1e-9).floor() as usize;
        return Ok((0..=count)
            .map(|i| {
                let v = start + i as f64 * step;
                // snap to the decimal grid so 0.1 * 3 prints as 0.3
                (v * 1e9).round() / 1e9
            })
            .collect());
    }
    spec.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse().map_err(|_| bad()))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct HybridConfig {
    pub generative: PathBuf,
    pub discriminative: PathBuf,
    pub labels: PathBuf,
    pub mode: Combiner,
    pub param: Option<f64>,
    pub tune: bool,
    pub grid: Vec<f64>,
    pub folds: usize,
    pub seed: u64,
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HybridOutcome {
    pub parameter: f64,
    pub hybrid_error: f64,
    pub discriminative_error: f64,
    pub generative_error: f64,
    /// Mean held-out error of the tuned combiner (tune mode only).
    pub cross_validated_error: Option<f64>,
    pub report: String,
}

fn first_row_width(path: &Path) -> Result<usize> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .map(str::trim)
        .find(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            l.split(|c: char| c == ',' || c.is_whitespace())
                .filter(|f| !f.is_empty())
                .count()
                .saturating_sub(1)
        })
        .ok_or_else(|| Error::Format(format!("{} has no rows", path.display())))
}

pub fn cmd_hybrid(config: &HybridConfig) -> Result<HybridOutcome> {
    let labels = load_labels(&config.labels)?;
    let m = first_row_width(&config.generative)?;
    let m_d = first_row_width(&config.discriminative)?;
    if m != m_d {
        return Err(Error::Consistency(format!(
            "generative table has {m} classes, discriminative {m_d}"
        )));
    }
    let p_g = hybrid::load_posterior_table(&config.generative, labels.len(), m)?;
    let p_d = hybrid::load_posterior_table(&config.discriminative, labels.len(), m)?;
    if let Some(&bad) = labels.iter().find(|&&l| l >= m) {
        return Err(Error::Consistency(format!("label {bad} outside [0, {m})")));
    }

    let mut report = String::from("# hybrid combination report\n");
    let _ = writeln!(report, "mode={}", config.mode.name());
    let (parameter, cv) = if config.tune {
        let tuned = hybrid::tune(config.mode, &p_d, &p_g, &labels, &config.grid, config.folds, config.seed)?;
        let (cv, _) = hybrid::cross_validated_error(
            config.mode,
            &p_d,
            &p_g,
            &labels,
            &config.grid,
            config.folds,
            config.seed,
        )?;
        (tuned.best, Some((cv, tuned)))
    } else {
        let p = config
            .param
            .ok_or_else(|| Error::Config("give --param or --tune".into()))?;
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Config(format!("parameter {p} outside [0, 1]")));
        }
        (p, None)
    };
    let hybrid_error = hybrid::hybrid_error(config.mode, parameter, &p_d, &p_g, &labels)?;
    let discriminative_error = hybrid::table_error(&p_d, &labels);
    let generative_error = hybrid::table_error(&p_g, &labels);
    let _ = writeln!(report, "parameter={parameter}");
    let _ = writeln!(report, "samples={}", labels.len());
    let _ = writeln!(report, "hybrid_error={hybrid_error}");
    let _ = writeln!(report, "discriminative_error={discriminative_error}");
    let _ = writeln!(report, "generative_error={generative_error}");
    let cross_validated_error = cv.as_ref().map(|(e, _)| *e);
    if let Some((cv_error, tuned)) = &cv {
        let _ = writeln!(report, "folds={}", config.folds);
        let _ = writeln!(report, "tuned_mean_fold_error={}", tuned.best_error);
        let _ = writeln!(report, "cross_validated_error={cv_error}");
        report.push_str(&tuned.to_delimited());
    }
    if let Some(path) = &config.report {
        fs::write(path, &report).map_err(|e| Error::io(path, e))?;
    }
    Ok(HybridOutcome {
        parameter,
        hybrid_error,
        discriminative_error,
        generative_error,
        cross_validated_error,
        report,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    /// `Err` holds the failure message of that point.
    pub error: std::result::Result<f64, String>,
}

pub fn sweep_table(axis: SweepAxis, rows: &[SweepRow]) -> String {
    let name = match axis {
        SweepAxis::Q => "q",
        SweepAxis::VarianceRatio => "variance_ratio",
        SweepAxis::P => "p",
    };
    let mut out = format!("# {name}\terror\tnote\n");
    for row in rows {
        match &row.error {
            Ok(e) => {
                let _ = writeln!(out, "{}\t{e}\t-", row.value);
            }
            Err(msg) => {
                let _ = writeln!(out, "{}\tNaN\t{}", row.value, msg.replace(['\t', '\n'], " "));
            }
        }
    }
    out
}

fn sweep_point(axis: SweepAxis, value: f64, base: &SelectionConfig) -> Result<SelectionConfig> {
    let mut c = base.clone();
    match axis {
        SweepAxis::Q => {
            if value < 1.0 || value.fract() != 0.0 {
                return Err(Error::Config(format!("q must be a positive integer, got {value}")));
            }
            c.subspace_dim = value as usize;
        }
        SweepAxis::P => {
            if value < 1.0 || value.fract() != 0.0 {
                return Err(Error::Config(format!("p must be a positive integer, got {value}")));
            }
            c.poly_order = value as u32;
        }
        SweepAxis::VarianceRatio => {
            let o = base.variances.sigma_o2();
            c.variances = VarianceParams::new(value * o, o)?;
        }
    }
    c.validate()?;
    Ok(c)
}

/// Trains and evaluates once per value. Failures are recorded per point.
pub fn cmd_sweep(
    axis: SweepAxis,
    values: &[f64],
    train: &LabeledImageSet,
    test: &LabeledImageSet,
    base: &SelectionConfig,
    priors: PriorMode,
) -> Vec<SweepRow> {
    values
        .iter()
        .map(|&value| {
            let error = sweep_point(axis, value, base)
                .and_then(|c| classify::train(train, &c, priors))
                .and_then(|(clf, _)| classify::evaluate(test, &clf))
                .map(|m| m.error_rate)
                .map_err(|e| e.to_string());
            SweepRow { value, error }
        })
        .collect()
}

pub fn cmd_inspect(model: &Path, class: usize, kernel: usize, out: &Path) -> Result<Vec<PathBuf>> {
    let classifier = persist::load_model(model)?;
    inspect::inspect_kernel(&classifier, class, kernel, out)
}

/// Splices `--config FILE` contents into the argument list right after the
/// subcommand, so explicit flags (which come later) override them.
pub fn expand_config_args(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let mut config_path = None;
    let mut rest = Vec::with_capacity(args.len());
    let mut iter = args.into_iter();
    while let Some(arg) = iter.next() {
        let s = arg.to_string_lossy();
        if s == "--config" {
            config_path = Some(PathBuf::from(
                iter.next()
                    .ok_or_else(|| Error::Config("--config needs a file".into()))?,
            ));
        } else if let Some(p) = s.strip_prefix("--config=") {
            config_path = Some(PathBuf::from(p));
        } else {
            rest.push(arg);
        }
    }
    let Some(path) = config_path else {
        return Ok(rest);
    };
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut injected: Vec<OsString> = Vec::new();
    for (n, line) in text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())) {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("{} line {n}: expected key=value", path.display()))
        })?;
        let (key, value) = (key.trim().replace('_', "-"), value.trim());
        match value {
            "true" => injected.push(format!("--{key}").into()),
            "false" => {}
            _ => {
                injected.push(format!("--{key}").into());
                injected.push(value.into());
            }
        }
    }
    // position of the subcommand: first non-flag after the program name,
    // skipping the value of a global --threads
    let mut at = 1;
    while at < rest.len() {
        let s = rest[at].to_string_lossy();
        if s == "--threads" {
            at += 2;
        } else if s.starts_with('-') {
            at += 1;
        } else {
            break;
        }
    }
    let insert_at = (at + 1).min(rest.len());
    rest.splice(insert_at..insert_at, injected);
    Ok(rest)
}

fn emit(text: &str, path: Option<&PathBuf>) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Train(a) => {
            let config = RunConfig {
                train: source(&a.data.train_images, a.data.train_labels.as_ref(), &a.format),
                per_class: a.data.per_class,
                selection: a.selection.selection_config()?,
                priors: a.selection.priors.parse()?,
                out: a.out.clone(),
            };
            let (classifier, traces) = cmd_train(&config)?;
            eprintln!(
                "trained {} classes x {} kernels; model written to {}",
                classifier.class_count(),
                classifier.kernel_count(),
                a.out.display()
            );
            for (m, t) in traces.iter().enumerate() {
                eprintln!(
                    "class {m}: log-likelihood {} -> {}",
                    t.initial_log_likelihood,
                    t.final_log_likelihood()
                );
            }
            Ok(())
        }
        Command::Eval(a) => {
            let config = EvalConfig {
                model: a.model,
                test: TestSelection {
                    source: source(&a.data.test_images, a.data.test_labels.as_ref(), &a.format),
                    per_class: a.data.test_per_class,
                    exclude_per_class: a.data.exclude_per_class,
                    seed: a.seed,
                },
                report: a.report.clone(),
                emit_posteriors: a.emit_posteriors,
            };
            let (_, report) = cmd_eval(&config)?;
            if a.report.is_none() {
                print!("{report}");
            }
            Ok(())
        }
        Command::Hybrid(a) => {
            let config = HybridConfig {
                generative: a.generative,
                discriminative: a.discriminative,
                labels: a.labels,
                mode: a.mode.parse()?,
                param: a.param,
                tune: a.tune,
                grid: match &a.grid {
                    Some(g) => parse_grid(g)?,
                    None => hybrid::default_grid(),
                },
                folds: a.folds,
                seed: a.seed,
                report: a.report.clone(),
            };
            let outcome = cmd_hybrid(&config)?;
            if a.report.is_none() {
                print!("{}", outcome.report);
            }
            Ok(())
        }
        Command::Sweep(a) => {
            let base = a.selection.selection_config()?;
            let priors: PriorMode = a.selection.priors.parse()?;
            let run = RunConfig {
                train: source(&a.train.train_images, a.train.train_labels.as_ref(), &a.format),
                per_class: a.train.per_class,
                selection: base.clone(),
                priors,
                out: PathBuf::new(),
            };
            run.validate()?;
            let train = run.training_set()?;
            let test = TestSelection {
                source: source(&a.test.test_images, a.test.test_labels.as_ref(), &a.format),
                per_class: a.test.test_per_class,
                exclude_per_class: a.test.exclude_per_class,
                seed: base.seed,
            }
            .load()?;
            let values = parse_grid(&a.values)?;
            let rows = cmd_sweep(a.axis, &values, &train, &test, &base, priors);
            emit(&sweep_table(a.axis, &rows), a.out.as_ref())
        }
        Command::Inspect(a) => {
            for p in cmd_inspect(&a.model, a.class, a.kernel, &a.out)? {
                eprintln!("wrote {}", p.display());
            }
            Ok(())
        }
    }
}

/// Parses arguments (including any `--config` file) and runs the command.
pub fn run(args: impl IntoIterator<Item = impl Into<OsString>>) -> anyhow::Result<()> {
    let args = expand_config_args(args.into_iter().map(Into::into).collect())?;
    let cli = Cli::try_parse_from(args)?;
    let threads = cli.threads;
    let command = cli.command;
    match threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build()?;
            pool.install(|| dispatch(command))?;
        }
        None => dispatch(command)?,
    }
    Ok(())
}
