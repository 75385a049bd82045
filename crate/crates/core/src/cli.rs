//! The `kcr` command line: synth, train, eval, predict and summary.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime or
//! numerical error.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::data::{self, Dataset, LoadOptions, SplitSpec, SynthSpec};
use crate::error::{Error, Result};
use crate::eval;
use crate::model::{self, Architecture, ModelConfig, SequentialModel};
use crate::optim::AdamConfig;
use crate::train::{self, EarlyStopping, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "kcr", version, about = "Train and evaluate a small CNN for isolated handwritten character images")]
struct Cli {
    /// Worker threads; 1 is the reference path. Defaults to $KCR_THREADS or all cores.
    #[arg(long, global = true, env = "KCR_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a procedural glyph dataset as one directory of PGM files per class.
    Synth(SynthArgs),
    /// Train a model and save the best-validation checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split.
    Eval(EvalArgs),
    /// Print the most likely classes for one image.
    Predict(PredictArgs),
    /// Print the layer table of a checkpoint.
    Summary(SummaryArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

impl Switch {
    fn on(self) -> bool {
        self == Switch::On
    }
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    classes: usize,
    #[arg(long)]
    per_class: usize,
    /// Image size as HxW.
    #[arg(long, value_parser = parse_hw)]
    size: (usize, usize),
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Class-per-directory tree, or a directory holding train/, val/ and test/.
    #[arg(long)]
    data: PathBuf,
    /// Skip files that fail to decode instead of aborting.
    #[arg(long)]
    skip_bad: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Model input as HxWxC.
    #[arg(long, value_parser = parse_hwc, default_value = "180x180x3")]
    input: [usize; 3],
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    epochs: u64,
    #[arg(long, default_value_t = 32, value_parser = clap::value_parser!(u64).range(1..))]
    batch: u64,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "on")]
    augment: Switch,
    #[arg(long, value_enum, default_value = "off")]
    early_stop: Switch,
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(1..))]
    patience: u64,
    #[arg(long, default_value_t = 0.0)]
    min_delta: f64,
    #[arg(long, default_value = "canonical")]
    arch: Architecture,
    /// Checkpoint path for the best-validation weights.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch metrics CSV.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Record per-epoch wall-clock seconds; off writes 0 for reproducible files.
    #[arg(long, value_enum, default_value = "on")]
    timing: Switch,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    confusion: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    top: usize,
    /// Split seed (must match training) and evaluation shuffle seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(1..))]
    top: u64,
}

#[derive(Debug, Args)]
struct SummaryArgs {
    #[arg(long)]
    model: PathBuf,
}

fn parse_dims<const N: usize>(s: &str) -> std::result::Result<[usize; N], String> {
    let parts: Vec<&str> = s.split(['x', 'X']).collect();
    let want = if N == 2 { "HxW" } else { "HxWxC" };
    if parts.len() != N {
        return Err(format!("expected {want}, got {s:?}"));
    }
    let mut out = [0; N];
    for (slot, p) in out.iter_mut().zip(parts) {
        *slot = p.trim().parse().map_err(|_| format!("bad extent {p:?} in {s:?}"))?;
        if *slot == 0 {
            return Err(format!("extents in {s:?} must be positive"));
        }
    }
    Ok(out)
}

fn parse_hw(s: &str) -> std::result::Result<(usize, usize), String> {
    parse_dims::<2>(s).map(|[h, w]| (h, w))
}

fn parse_hwc(s: &str) -> std::result::Result<[usize; 3], String> {
    let dims = parse_dims::<3>(s)?;
    if !matches!(dims[2], 1 | 3) {
        return Err(format!("channel count must be 1 or 3, got {}", dims[2]));
    }
    Ok(dims)
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidArgument(_) | Error::Config(_) => EXIT_USAGE,
        e if e.is_data_error() => EXIT_DATA,
        _ => EXIT_RUNTIME,
    }
}

struct Splits {
    train: Dataset,
    val: Dataset,
    test: Dataset,
}

fn load_part(dir: &Path, input: [usize; 3], args: &DataArgs, err: &mut dyn Write) -> Result<Dataset> {
    let opts = LoadOptions { skip_undecodable: args.skip_bad };
    let loaded = data::load_directory_with(dir, input, &opts)?;
    for (path, why) in &loaded.skipped {
        let _ = writeln!(err, "skipped {}: {why}", path.display());
    }
    Ok(loaded.dataset)
}

/// `train/`, `val/` and `test/` subdirectories are used as given; any other
/// tree is split 60/20/20 per class with `seed`.
fn load_splits(args: &DataArgs, input: [usize; 3], seed: u64, err: &mut dyn Write) -> Result<Splits> {
    let root = &args.data;
    if !root.is_dir() {
        return Err(Error::Dataset(format!("{} is not a directory", root.display())));
    }
    let parts = ["train", "val", "test"].map(|p| root.join(p));
    if parts.iter().all(|p| p.is_dir()) {
        let [train, val, test] = [&parts[0], &parts[1], &parts[2]].map(|p| load_part(p, input, args, err));
        let (train, val, test) = (train?, val?, test?);
        if train.class_names != val.class_names || train.class_names != test.class_names {
            return Err(Error::Dataset("train/, val/ and test/ hold different class sets".into()));
        }
        return Ok(Splits { train, val, test });
    }
    let all = load_part(root, input, args, err)?;
    let (train, val, test) = data::split_stratified(&all, &SplitSpec::with_seed(seed))?;
    Ok(Splits { train, val, test })
}

fn cmd_synth(a: &SynthArgs, out: &mut dyn Write) -> Result<()> {
    let spec = SynthSpec {
        num_classes: a.classes,
        per_class: a.per_class,
        height: a.size.0,
        width: a.size.1,
        seed: a.seed,
    };
    let written = data::synth_generate(&spec, &a.out)?;
    let _ = writeln!(out, "wrote {} images in {} classes to {}", written.len(), a.classes, a.out.display());
    Ok(())
}

fn cmd_train(a: &TrainArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let cfg = TrainConfig {
        epochs: a.epochs as usize,
        batch_size: a.batch as usize,
        adam: AdamConfig { lr: a.lr, ..Default::default() },
        augment: if a.augment.on() { Default::default() } else { data::AugmentParams::disabled() },
        seed: a.seed,
        early_stopping: EarlyStopping {
            enabled: a.early_stop.on(),
            patience: a.patience as usize,
            min_delta: a.min_delta,
            restore_best: true,
        },
        checkpoint_path: Some(a.out.clone()),
        record_time: a.timing.on(),
    };
    cfg.validate()?;
    let splits = load_splits(&a.data, a.input, a.seed, err)?;
    let _ = writeln!(
        out,
        "{} classes; {} train, {} val, {} test images",
        splits.train.num_classes(),
        splits.train.len(),
        splits.val.len(),
        splits.test.len()
    );
    let config = ModelConfig::new(a.arch, a.input, splits.train.num_classes());
    let mut model = SequentialModel::build(config, a.seed)?.with_class_names(splits.train.class_names.clone())?;
    let outcome = train::train_with_progress(&mut model, &splits.train, &splits.val, &cfg, |r| {
        let _ = writeln!(
            out,
            "epoch {}/{}  loss {:.4}  acc {:.4}  val_loss {:.4}  val_acc {:.4}  {:.1}s",
            r.epoch, cfg.epochs, r.train_loss, r.train_acc, r.val_loss, r.val_acc, r.seconds
        );
    })?;
    if let Some(path) = &a.metrics {
        train::save_metrics_csv(&outcome.history, path)?;
    }
    if outcome.stopped_early {
        let _ = writeln!(out, "early stop after epoch {}", outcome.history.len());
    }
    let _ = writeln!(out, "best epoch {}; checkpoint {}", outcome.best_epoch, a.out.display());
    Ok(())
}

fn cmd_eval(a: &EvalArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let model = model::load(&a.model).map_err(|e| Error::in_file(&a.model, e))?;
    let splits = load_splits(&a.data, model.config().input_shape, a.seed, err)?;
    if splits.test.class_names != model.class_names() {
        return Err(Error::Dataset(format!(
            "test classes {:?} do not match the model's {:?}",
            splits.test.class_names,
            model.class_names()
        )));
    }
    let report = eval::evaluate(&model, &splits.test, a.seed, a.top)?;
    eval::save_report(&report, &a.report)?;
    if let Some(path) = &a.confusion {
        eval::save_confusion_csv(&report.confusion, path)?;
    }
    let _ = writeln!(
        out,
        "accuracy {:.4} ({} of {} wrong)",
        report.overall_accuracy, report.num_wrong, report.total
    );
    for p in &report.top_pairs {
        let _ = writeln!(out, "  {} -> {}: {}", p.true_name, p.pred_name, p.count);
    }
    Ok(())
}

fn cmd_predict(a: &PredictArgs, out: &mut dyn Write) -> Result<()> {
    let model = model::load(&a.model).map_err(|e| Error::in_file(&a.model, e))?;
    let image = data::load_image(&a.image, model.config().input_shape).map_err(|e| match e {
        e @ Error::Io { .. } => e,
        e => Error::in_file(&a.image, e),
    })?;
    let dims = image.dims().to_vec();
    let probs = model.predict(&image.reshape([1, dims[0], dims[1], dims[2]])?)?;
    let mut ranked: Vec<(usize, f32)> = probs.data().iter().copied().enumerate().collect();
    ranked.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
    for (k, p) in ranked.into_iter().take(a.top as usize) {
        let _ = writeln!(out, "{}\t{:.9}", model.class_names()[k], p);
    }
    Ok(())
}

fn cmd_summary(a: &SummaryArgs, out: &mut dyn Write) -> Result<()> {
    let model = model::load(&a.model).map_err(|e| Error::in_file(&a.model, e))?;
    let _ = write!(out, "{}", model.summary());
    Ok(())
}

fn dispatch(cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a, out),
        Command::Train(a) => cmd_train(a, out, err),
        Command::Eval(a) => cmd_eval(a, out, err),
        Command::Predict(a) => cmd_predict(a, out),
        Command::Summary(a) => cmd_summary(a, out),
    }
}

/// Parses `args` (program name first) and runs the subcommand.
pub fn run<I, T>(args: I, out: &mut (dyn Write + Send), err: &mut (dyn Write + Send)) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let (sink, code): (&mut (dyn Write + Send), _) = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => (out, EXIT_OK),
                _ => (err, EXIT_USAGE),
            };
            let _ = write!(sink, "{}", e.render());
            return code;
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.unwrap_or(0))
        .build()
    {
        Ok(pool) => pool,
        Err(e) => {
            let _ = writeln!(err, "error: cannot start worker threads: {e}");
            return EXIT_RUNTIME;
        }
    };
    match pool.install(|| dispatch(&cli, out, err)) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_args(args: &[&str]) -> (i32, String, String) {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let code = run(std::iter::once("kcr").chain(args.iter().copied()), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn parses_dimensions() {
        assert_eq!(parse_hw("32x24"), Ok((32, 24)));
        assert_eq!(parse_hwc("180x180x3"), Ok([180, 180, 3]));
        assert!(parse_hw("32").is_err());
        assert!(parse_hwc("8x8x2").is_err());
        assert!(parse_hwc("0x8x1").is_err());
    }

    #[test]
    fn usage_errors_exit_1() {
        assert_eq!(run_args(&[]).0, EXIT_USAGE);
        assert_eq!(run_args(&["bogus"]).0, EXIT_USAGE);
        assert_eq!(run_args(&["train", "--data", "d", "--epochs", "0", "--out", "m"]).0, EXIT_USAGE);
        assert_eq!(run_args(&["train", "--data", "d", "--out", "m"]).0, EXIT_USAGE);
        assert_eq!(run_args(&["summary", "--model", "m", "--nope"]).0, EXIT_USAGE);
        let (code, out, _) = run_args(&["--help"]);
        assert_eq!(code, EXIT_OK);
        assert!(out.contains("synth"));
    }

    #[test]
    fn missing_inputs_are_data_errors() {
        let (code, _, err) = run_args(&["summary", "--model", "/nonexistent/model.kcm"]);
        assert_eq!(code, EXIT_DATA, "{err}");
        let (code, _, _) = run_args(&["train", "--data", "/nonexistent", "--epochs", "1", "--out", "/tmp/x.kcm"]);
        assert_eq!(code, EXIT_DATA);
    }

    #[test]
    fn error_classes() {
        assert_eq!(exit_code(&Error::Diverged { epoch: 1, batch: 2 }), EXIT_RUNTIME);
        assert_eq!(exit_code(&Error::Decode("x".into())), EXIT_DATA);
        assert_eq!(exit_code(&Error::InvalidArgument("x".into())), EXIT_USAGE);
    }
}
