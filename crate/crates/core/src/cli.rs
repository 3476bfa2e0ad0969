//! Command-line front end: `generate`, `train`, `eval`, `gradcheck`, `inspect`.
//!
//! Exit codes: 0 success, 1 usage or I/O error, 2 non-finite values during
//! training, 3 gradient check failure.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{self, ClipTraces, DataError, GeneratorConfig};
use crate::model::{predict, ModelConfig};
use crate::params::Parameters;
use crate::pooling::PoolingScheme;
use crate::train::{self, EvalReport, TrainConfig, TrainError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NON_FINITE: i32 = 2;
pub const EXIT_GRADCHECK: i32 = 3;

/// Environment variable capping the worker thread count.
pub const THREADS_ENV: &str = "GROUPPOOL_THREADS";

pub const TRAIN_FILE: &str = "train.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const EVAL_FILE: &str = "eval.json";
pub const TRACES_FILE: &str = "traces.jsonl";

#[derive(Debug, Parser)]
#[command(name = "grouppool", version, about = "Attentive pooling for group activity recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic train/test split as JSONL.
    Generate(CommonArgs),
    /// Train both stages and write checkpoint, metrics and test evaluation.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a clip file or data directory.
    Eval(EvalArgs),
    /// Compare backpropagated and finite-difference gradients.
    Gradcheck(CommonArgs),
    /// Summarise a checkpoint or clip file.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Pooling scheme: max, avg, gap, hap or subgroup-gap.
    #[arg(long)]
    scheme: Option<PoolingScheme>,
    /// Seed override: the generator seed for generate, the training seed
    /// for train, the instance seed for gradcheck.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Directory holding train.jsonl and test.jsonl; generated when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    epochs_stage1: Option<usize>,
    #[arg(long)]
    epochs_stage2: Option<usize>,
    /// Adam learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Weight of the person loss in the joint stage.
    #[arg(long)]
    lambda: Option<f64>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Clip file, or a directory whose test.jsonl is used.
    #[arg(long)]
    data: PathBuf,
    /// Directory for eval.json and, for attentive schemes, traces.jsonl.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InspectArgs {
    #[arg(long, conflicts_with = "data", required_unless_present = "data")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

/// Everything a run needs, as read from a TOML file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub generator: GeneratorConfig,
    pub paths: PathsConfig,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error("gradient check failed: max relative error {0:.3e}")]
    Gradcheck(f64),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Train(TrainError::NonFinite { .. }) => EXIT_NON_FINITE,
            CliError::Gradcheck(_) => EXIT_GRADCHECK,
            _ => EXIT_USAGE,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    /// Generator and model must agree on every shared dimension.
    pub fn check_consistency(&self) -> Result<()> {
        let (g, m) = (&self.generator, &self.model);
        for (name, gv, mv) in [
            ("feature_dim", g.feature_dim, m.feature_dim),
            ("action_classes", g.action_classes, m.action_classes),
            ("activity_classes", g.activity_classes, m.activity_classes),
            ("subgroups", g.subgroups, m.subgroups),
        ] {
            if gv != mv {
                return Err(CliError::Usage(format!(
                    "generator.{name} = {gv} but model.{name} = {mv}"
                )));
            }
        }
        Ok(())
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn output_dir(flag: Option<PathBuf>, config: &RunConfig) -> Result<PathBuf> {
    let dir = flag
        .or_else(|| config.paths.out.clone())
        .ok_or_else(|| CliError::Usage("no output directory (--out or [paths] out)".into()))?;
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    Ok(dir)
}

/// Installs the global thread pool size from `GROUPPOOL_THREADS` if set.
pub fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let threads: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got `{value}`")))?;
    // A pool may already exist when called twice in one process; keep it.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    Ok(())
}

/// Parses `args` (including the program name) and runs the command,
/// writing human-readable output to `out`. Returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match configure_threads().and_then(|_| dispatch(cli.command, out)) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::Generate(args) => generate(args, out),
        Command::Train(args) => train_cmd(args, out),
        Command::Eval(args) => eval_cmd(args, out),
        Command::Gradcheck(args) => gradcheck_cmd(args, out),
        Command::Inspect(args) => inspect(args, out),
    }
}

fn say(out: &mut dyn Write, text: impl std::fmt::Display) -> Result<()> {
    writeln!(out, "{text}").map_err(|source| CliError::Io {
        path: PathBuf::from("<stdout>"),
        source,
    })
}

fn generate(args: CommonArgs, out: &mut dyn Write) -> Result<()> {
    let mut config = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        config.generator.seed = seed;
    }
    let dir = output_dir(args.out, &config)?;
    let (train_set, test_set) = data::generate(&config.generator)?;
    data::save_clips(&dir.join(TRAIN_FILE), &train_set)?;
    data::save_clips(&dir.join(TEST_FILE), &test_set)?;
    say(
        out,
        format_args!(
            "wrote {} train and {} test clips to {}",
            train_set.len(),
            test_set.len(),
            dir.display()
        ),
    )
}

fn load_split(config: &RunConfig, data_flag: Option<PathBuf>) -> Result<(Vec<data::Clip>, Vec<data::Clip>)> {
    match data_flag.or_else(|| config.paths.data.clone()) {
        Some(dir) => Ok((
            data::load_clips(&dir.join(TRAIN_FILE))?,
            data::load_clips(&dir.join(TEST_FILE))?,
        )),
        None => {
            config.check_consistency()?;
            Ok(data::generate(&config.generator)?)
        }
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serialisable");
    std::fs::write(path, text + "\n").map_err(io_err(path))
}

fn clip_traces(params: &crate::model::ModelParams, clips: &[data::Clip]) -> Result<Vec<ClipTraces>> {
    clips
        .iter()
        .map(|clip| {
            let p = predict(params, clip)?;
            Ok(ClipTraces {
                clip_id: clip.id,
                traces: p.traces,
                pred: p.activity,
                truth: clip.activity_label,
            })
        })
        .collect()
}

fn report_lines(out: &mut dyn Write, report: &EvalReport) -> Result<()> {
    say(
        out,
        format_args!(
            "clips {}  group accuracy {:.4}  person accuracy {:.4}",
            report.clips, report.group_accuracy, report.person_accuracy
        ),
    )?;
    say(out, report.confusion_table().trim_end())
}

fn write_outputs(
    dir: &Path,
    params: &crate::model::ModelParams,
    test_set: &[data::Clip],
    out: &mut dyn Write,
) -> Result<EvalReport> {
    let report = train::evaluate(params, test_set)?;
    write_json(&dir.join(EVAL_FILE), &report)?;
    if params.config.scheme.is_attentive() {
        let traces = clip_traces(params, test_set)?;
        data::export_traces(&dir.join(TRACES_FILE), params.config.scheme, &traces)?;
    }
    report_lines(out, &report)?;
    Ok(report)
}

fn train_cmd(args: TrainArgs, out: &mut dyn Write) -> Result<()> {
    let mut config = load_config(args.common.config.as_deref())?;
    if let Some(scheme) = args.common.scheme {
        config.model.scheme = scheme;
    }
    if let Some(seed) = args.common.seed {
        config.train.seed = seed;
    }
    if let Some(e) = args.epochs_stage1 {
        config.train.epochs_stage1 = e;
    }
    if let Some(e) = args.epochs_stage2 {
        config.train.epochs_stage2 = e;
    }
    if let Some(lr) = args.lr {
        config.train.learning_rate = lr;
    }
    if let Some(lambda) = args.lambda {
        config.model.lambda = lambda;
    }
    let dir = output_dir(args.common.out, &config)?;
    let (train_set, test_set) = load_split(&config, args.data)?;

    let metrics_path = dir.join(METRICS_FILE);
    let mut metrics = BufWriter::new(File::create(&metrics_path).map_err(io_err(&metrics_path))?);
    let mut write_failure = None;
    let outcome = train::train(&config.model, &config.train, &train_set, Some(&test_set), |record| {
        let line = serde_json::to_string(record).expect("serialisable");
        if let Err(e) = writeln!(metrics, "{line}") {
            write_failure.get_or_insert(e);
        }
    });
    metrics.flush().map_err(io_err(&metrics_path))?;
    if let Some(e) = write_failure {
        return Err(io_err(&metrics_path)(e));
    }
    let outcome = outcome?;
    if let Some(last) = outcome.records.last() {
        say(out, format_args!("final {} epoch {} loss {:.6}", last.stage, last.epoch, last.loss))?;
    }
    train::save_checkpoint(&dir.join(CHECKPOINT_FILE), &outcome.params)?;
    write_outputs(&dir, &outcome.params, &test_set, out)?;
    say(out, format_args!("outputs in {}", dir.display()))
}

fn eval_cmd(args: EvalArgs, out: &mut dyn Write) -> Result<()> {
    let params = train::load_checkpoint(&args.checkpoint)?;
    let path = if args.data.is_dir() {
        args.data.join(TEST_FILE)
    } else {
        args.data
    };
    let clips = data::load_clips(&path)?;
    for clip in &clips {
        clip.check_against(&params.config)?;
    }
    match args.out {
        Some(dir) => {
            std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
            write_outputs(&dir, &params, &clips, out)?;
        }
        None => report_lines(out, &train::evaluate(&params, &clips)?)?,
    }
    Ok(())
}

fn gradcheck_cmd(args: CommonArgs, out: &mut dyn Write) -> Result<()> {
    let config = load_config(args.config.as_deref())?;
    let schemes = match args.scheme {
        Some(s) => vec![s],
        None => PoolingScheme::ALL.to_vec(),
    };
    let seed = args.seed.unwrap_or(config.train.seed);
    let mut worst: f64 = 0.0;
    let mut failed = false;
    for scheme in schemes {
        let report = train::gradcheck(&train::gradcheck_config(scheme), seed)?;
        say(
            out,
            format_args!(
                "{scheme}: max relative error {:.3e} ({})",
                report.max_rel_error(),
                if report.passed() { "ok" } else { "FAIL" }
            ),
        )?;
        for block in &report.blocks {
            say(out, format_args!("  {:<40} {:.3e}", block.name, block.max_rel_error))?;
        }
        worst = worst.max(report.max_rel_error());
        failed |= !report.passed();
    }
    if failed {
        Err(CliError::Gradcheck(worst))
    } else {
        Ok(())
    }
}

fn inspect(args: InspectArgs, out: &mut dyn Write) -> Result<()> {
    if let Some(path) = args.checkpoint {
        let params = train::load_checkpoint(&path)?;
        let c = &params.config;
        say(
            out,
            format_args!(
                "scheme {}  parameters {}  d_x {}  person hidden {}  group hidden {}",
                c.scheme,
                params.param_count(),
                c.feature_dim,
                c.person_hidden,
                c.group_hidden
            ),
        )?;
        for (name, shape) in params.named_shapes() {
            say(out, format_args!("  {name:<40} {shape}"))?;
        }
    } else if let Some(path) = args.data {
        let clips = data::load_clips(&path)?;
        let mut classes = std::collections::BTreeMap::new();
        for c in &clips {
            *classes.entry(c.activity_label).or_insert(0usize) += 1;
        }
        say(out, format_args!("clips {}", clips.len()))?;
        if let Some(first) = clips.first() {
            say(
                out,
                format_args!(
                    "persons {}  timesteps {}  d_x {}  subgroups {}",
                    first.persons(),
                    first.timesteps(),
                    first.feature_dim(),
                    first.subgroups.count()
                ),
            )?;
        }
        for (k, n) in classes {
            say(out, format_args!("  activity {k}: {n}"))?;
        }
    }
    Ok(())
}
