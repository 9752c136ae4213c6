//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage, 2 data (missing/corrupt inputs),
//! 3 divergence, 4 verification failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::activations::ActivationKind;
use crate::artifacts::{
    append_metrics, create_metrics, export_feature_maps, format_sig, load_checkpoint,
    save_checkpoint,
};
use crate::data::{
    decode_record, load_batch_file, load_split, Split, CHANNELS, PIXELS, RECORD_BYTES, TEST_FILE,
};
use crate::error::{Error, Result};
use crate::gradcheck::{check_model, Fault};
use crate::model::{build_model, Architecture};
use crate::optim::LrSchedule;
use crate::train::{evaluate, fit, EpochMetrics, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;
pub const EXIT_VERIFICATION: i32 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "asu-cnn",
    version,
    about = "Train and inspect an ASU-activated CNN on CIFAR-10"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from scratch; writes a checkpoint and a metrics CSV.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split.
    Eval(EvalArgs),
    /// Export feature-map mosaics (PGM) for one image.
    Viz(VizArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Print the per-epoch learning rate.
    LrSchedule(ScheduleArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory holding the CIFAR-10 binary batches.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "asu")]
    pub activation: ActivationKind,
    /// Use only the first N training examples after a seeded shuffle.
    #[arg(long)]
    pub subset: Option<usize>,
    /// Limit the test split used for validation (defaults to --subset).
    #[arg(long)]
    pub test_subset: Option<usize>,
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.1)]
    pub decay: f64,
    #[arg(long, default_value = "asu_cnn.ckpt")]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "metrics.csv")]
    pub metrics: PathBuf,
    /// Write 0 in the seconds column so repeated runs give identical CSVs.
    #[arg(long)]
    pub no_timing: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Defaults to the test subset recorded in the checkpoint.
    #[arg(long)]
    pub test_subset: Option<usize>,
}

#[derive(Debug, Args)]
pub struct VizArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory, used with --index.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Test-set image index.
    #[arg(long, conflicts_with = "image")]
    pub index: Option<usize>,
    /// Raw 32×32 RGB file: 3072 bytes, planar R, G, B.
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// `all` or a comma-separated list of conv1, conv2, conv3.
    #[arg(long, default_value = "all")]
    pub layer: String,
    #[arg(long, default_value = "viz")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Seeds to check (repeatable).
    #[arg(long = "seed", default_values_t = [1u64, 2, 3])]
    pub seeds: Vec<u64>,
    #[arg(long, default_value = "asu")]
    pub activation: ActivationKind,
    /// Deliberately break one backward pass; the check must then fail.
    #[arg(long)]
    pub inject_fault: Option<Fault>,
}

#[derive(Debug, Args)]
pub struct ScheduleArgs {
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.1)]
    pub decay: f64,
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Usage(_) | Error::UnknownLayer { .. } | Error::Shape(_) | Error::Size(_) => {
            EXIT_USAGE
        }
        Error::Divergence { .. } => EXIT_DIVERGENCE,
        Error::DataMissing(_)
        | Error::Format { .. }
        | Error::CorruptRecord { .. }
        | Error::BadMagic
        | Error::VersionMismatch { .. }
        | Error::Truncated(_)
        | Error::InvalidCheckpoint(_)
        | Error::Io(_) => EXIT_DATA,
    }
}

/// Parse `args` (including the program name) and run; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Viz(a) => cmd_viz(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::LrSchedule(a) => cmd_lr_schedule(&a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn epoch_line(m: &EpochMetrics) -> String {
    let f = |v: f64| format_sig(v, 6);
    format!(
        "epoch={} lr={} train_loss={} train_acc={} val_loss={} val_acc={}",
        m.epoch,
        f(m.lr),
        f(m.train_loss),
        f(m.train_acc),
        f(m.val_loss),
        f(m.val_acc)
    )
}

pub fn cmd_train(args: &TrainArgs) -> Result<i32> {
    let config = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch,
        seed: args.seed,
        activation: args.activation,
        lr0: args.lr,
        decay: args.decay,
        hidden: args.hidden,
        data_root: Some(args.data.clone()),
        train_subset: args.subset,
        test_subset: args.test_subset.or(args.subset),
    };
    config.validate()?;
    create_metrics(&args.metrics)?;
    let mut io_error = None;
    let outcome = fit(&config, |m| {
        println!("{}", epoch_line(m));
        let row = EpochMetrics {
            wall_seconds: if args.no_timing { 0.0 } else { m.wall_seconds },
            ..m.clone()
        };
        if let Err(e) = append_metrics(&args.metrics, &row) {
            io_error.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_error {
        return Err(e);
    }
    save_checkpoint(&args.checkpoint, &outcome.params, &config)?;
    println!(
        "saved {} ({} parameters), metrics in {}",
        args.checkpoint.display(),
        outcome.params.num_parameters(),
        args.metrics.display()
    );
    Ok(EXIT_OK)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<i32> {
    let (params, config) = load_checkpoint(&args.checkpoint)?;
    let config = config.unwrap_or_default();
    let limit = args.test_subset.or(config.test_subset);
    let test = load_split(&args.data, Split::Test, limit, config.seed)?;
    let (loss, acc) = evaluate(&params, &test)?;
    println!(
        "test_loss={} test_acc={}",
        format_sig(loss, 6),
        format_sig(acc, 6)
    );
    Ok(EXIT_OK)
}

fn read_raw_image(path: &Path) -> Result<crate::tensor::Tensor<f32>> {
    let bytes = std::fs::read(path)?;
    if bytes.len() != PIXELS * CHANNELS {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!(
                "expected {} raw RGB bytes, found {}",
                PIXELS * CHANNELS,
                bytes.len()
            ),
        });
    }
    let mut record = Vec::with_capacity(RECORD_BYTES);
    record.push(0);
    record.extend_from_slice(&bytes);
    Ok(decode_record(&record))
}

pub fn cmd_viz(args: &VizArgs) -> Result<i32> {
    crate::artifacts::parse_layer_selector(&args.layer)?;
    let (params, _) = load_checkpoint(&args.checkpoint)?;
    let image = match (&args.image, args.index) {
        (Some(path), _) => read_raw_image(path)?,
        (None, Some(index)) => {
            let dir = args
                .data
                .as_ref()
                .ok_or_else(|| Error::Usage("--index needs --data".into()))?;
            let (images, _) = load_batch_file(&dir.join(TEST_FILE))?;
            let count = images.len();
            images.into_iter().nth(index).ok_or_else(|| {
                Error::Usage(format!(
                    "image index {index} out of range (test split has {count})"
                ))
            })?
        }
        (None, None) => return Err(Error::Usage("give --image or --index".into())),
    };
    for (path, mosaic) in export_feature_maps(&params, &image, &args.layer, &args.out)? {
        println!(
            "{}: {} tiles of {}x{} -> {}",
            mosaic.layer,
            mosaic.tiles,
            mosaic.tile_height,
            mosaic.tile_width,
            path.display()
        );
    }
    Ok(EXIT_OK)
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<i32> {
    let arch = Architecture::tiny(args.activation);
    let params = build_model::<f64>(arch, 0)?.num_parameters();
    println!(
        "gradcheck: {} activation, {params} parameters, seeds {:?}{}",
        args.activation,
        args.seeds,
        args.inject_fault
            .map(|f| format!(", injected fault {f}"))
            .unwrap_or_default()
    );
    let report = check_model(&arch, &args.seeds, args.inject_fault)?;
    println!("{report}");
    Ok(if report.pass() {
        EXIT_OK
    } else {
        EXIT_VERIFICATION
    })
}

pub fn cmd_lr_schedule(args: &ScheduleArgs) -> Result<i32> {
    let sched = LrSchedule::new(args.lr, args.decay)?;
    println!("epoch,lr");
    for epoch in 0..args.epochs {
        println!("{epoch},{:.3e}", sched.lr_at_epoch(epoch));
    }
    Ok(EXIT_OK)
}
