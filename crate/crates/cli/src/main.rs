//! Command line front end: dataset generation, training, inference,
//! evaluation, ablation, and a forward-pass benchmark.
//!
//! Results go to stdout as JSON; progress and diagnostics go to
//! stderr. Exit codes: 0 on success, 2 for usage and configuration
//! problems including missing paths, 3 for corrupt data or checkpoint
//! files.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use bokehnet_core::data::{generate_dataset, Dataset, DatasetConfig};
use bokehnet_core::error::{DataError, Error, FormatError};
use bokehnet_core::io::{self, RunConfig};
use bokehnet_core::model::{PyNet, PyNetConfig};
use bokehnet_core::rng::DetRng;
use bokehnet_core::tape::ExecMode;
use bokehnet_core::tensor::Tensor;
use bokehnet_core::train::{self, evaluate_model, Split, Trainer, LAST_CHECKPOINT};
use bokehnet_core::Element;

#[derive(Parser)]
#[command(name = "bokehnet", version, about = "Multi-scale bokeh rendering engine")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a synthetic thin-lens dataset to a directory.
    GenData(GenDataArgs),
    /// Train progressively from the deepest level to full resolution.
    Train(TrainArgs),
    /// Run one input pair through a trained model and write a PNG.
    Infer(InferArgs),
    /// PSNR/SSIM on a dataset split, next to a resize baseline.
    Eval(EvalArgs),
    /// Evaluation with deep levels disabled, one row per cut.
    Ablate(AblateArgs),
    /// Forward-pass latency, single- and multi-threaded.
    Bench(BenchArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory for PNG pairs and the manifest.
    #[arg(long)]
    out: PathBuf,
    /// Dataset config JSON; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    pairs: Option<usize>,
    /// Network input edge length; targets render at twice this.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Run config JSON (data_dir, out_dir, model, schedule).
    #[arg(long)]
    config: PathBuf,
    /// Continue from out_dir/last.ckpt.
    #[arg(long)]
    resume: bool,
    /// Train in f32 instead of f64.
    #[arg(long = "f32")]
    use_f32: bool,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input RGB PNG (8-bit, network input size).
    #[arg(long)]
    input: PathBuf,
    /// Depth PNG (16-bit grayscale, same size).
    #[arg(long)]
    depth: PathBuf,
    /// Output PNG path.
    #[arg(long)]
    out: PathBuf,
    /// Pyramid level to run; 1 is the full model.
    #[arg(long, default_value_t = 1)]
    level: usize,
    /// Levels to disable, comma separated (4 and deeper only).
    #[arg(long, value_delimiter = ',')]
    disable: Vec<usize>,
    #[arg(long)]
    single_thread: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    #[arg(long)]
    single_thread: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    #[arg(long)]
    single_thread: bool,
}

#[derive(Args)]
struct BenchArgs {
    /// Benchmark this checkpoint; a fresh model is built otherwise.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    levels: usize,
    #[arg(long, default_value_t = 8)]
    width: usize,
    /// Input edge length.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Timed repetitions after one warm-up.
    #[arg(long, default_value_t = 10)]
    runs: usize,
    #[arg(long, default_value_t = 1)]
    level: usize,
    /// Build the fresh model in f32 instead of f64.
    #[arg(long = "f32")]
    use_f32: bool,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

fn exec_mode(single: bool) -> ExecMode {
    if single {
        ExecMode::SingleThread
    } else {
        ExecMode::MultiThread
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        Error::Train(_) => 2,
        Error::Data(DataError::MissingFile(_)) => 2,
        Error::Data(DataError::Io(_)) => 2,
        Error::Format(FormatError::Io(_)) => 2,
        Error::Data(_) => 3,
        Error::Format(_) => 3,
        Error::Tensor(_) => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::GenData(a) => gen_data(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Infer(a) => cmd_infer(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Ablate(a) => cmd_ablate(a),
        Cmd::Bench(a) => cmd_bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn print_json<S: serde::Serialize>(value: &S) {
    println!(
        "{}",
        serde_json::to_string_pretty(value).expect("serializable result")
    );
}

fn gen_data(args: GenDataArgs) -> Result<(), Error> {
    let mut cfg: DatasetConfig = match &args.config {
        Some(path) => io::read_json(path)?,
        None => DatasetConfig::default(),
    };
    if let Some(p) = args.pairs {
        cfg.pairs = p;
    }
    if let Some(s) = args.size {
        cfg.input_size = s;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let manifest = generate_dataset(&cfg, &args.out)?;
    eprintln!(
        "rendered {} pairs at {}x{} into {}",
        cfg.pairs,
        cfg.input_size,
        cfg.input_size,
        args.out.display()
    );
    print_json(&manifest);
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<(), Error> {
    let cfg: RunConfig = io::read_json(&args.config)?;
    if args.use_f32 {
        run_train::<f32>(cfg, args.resume)
    } else {
        run_train::<f64>(cfg, args.resume)
    }
}

fn run_train<T: Element>(cfg: RunConfig, resume: bool) -> Result<(), Error> {
    cfg.validate()?;
    let data = Dataset::<T>::load(&cfg.data_dir)?;
    let mut trainer = if resume {
        let ckpt = cfg.out_dir.join(LAST_CHECKPOINT);
        if !ckpt.is_file() {
            return Err(DataError::MissingFile(ckpt.display().to_string()).into());
        }
        Trainer::<T>::resume(cfg, &ckpt)?
    } else {
        Trainer::<T>::new(cfg)?
    };
    eprintln!(
        "training {} pairs, {} epochs per level, precision {}",
        data.train.len(),
        trainer.config().epochs_per_level,
        T::DTYPE_NAME
    );
    let mut reports = Vec::new();
    while let Some(level) = trainer.stage() {
        let report = trainer.train_level(&data, level)?;
        eprintln!(
            "level {}: train loss {:.5}, val psnr {:.2} dB",
            report.level, report.train_loss, report.val_psnr
        );
        reports.push(report);
    }
    let eval = trainer.evaluate(&data, Split::Test, &[])?;
    eprintln!(
        "test psnr {:.2} dB (baseline {:.2} dB, margin {:.2} dB)",
        eval.psnr,
        eval.baseline_psnr,
        eval.psnr_margin()
    );
    print_json(&serde_json::json!({ "stages": reports, "test": eval }));
    Ok(())
}

enum AnyModel {
    F32(PyNet<f32>),
    F64(PyNet<f64>),
}

fn load_any_model(path: &Path) -> Result<AnyModel, Error> {
    match train::load_model::<f64>(path) {
        Ok((model, _)) => Ok(AnyModel::F64(model)),
        Err(Error::Format(FormatError::DTypeMismatch { .. })) => {
            let (model, _) = train::load_model::<f32>(path)?;
            Ok(AnyModel::F32(model))
        }
        Err(e) => Err(e),
    }
}

fn cmd_infer(args: InferArgs) -> Result<(), Error> {
    for path in [&args.checkpoint, &args.input, &args.depth] {
        if !path.is_file() {
            return Err(DataError::MissingFile(path.display().to_string()).into());
        }
    }
    match load_any_model(&args.checkpoint)? {
        AnyModel::F64(m) => run_infer::<f64>(&m, &args),
        AnyModel::F32(m) => run_infer::<f32>(&m, &args),
    }
}

fn run_infer<T: Element>(model: &PyNet<T>, args: &InferArgs) -> Result<(), Error> {
    let rgb: Tensor<T> = io::read_rgb8(&args.input)?;
    let depth: Tensor<T> = io::read_gray16(&args.depth)?;
    let (s, w) = (rgb.shape()[1], rgb.shape()[2]);
    if depth.shape() != [1, s, w] {
        return Err(DataError::Manifest(format!(
            "depth {:?} does not match input {:?}",
            depth.shape(),
            rgb.shape()
        ))
        .into());
    }
    let mut data = rgb.into_data();
    data.extend_from_slice(depth.data());
    let input = Tensor::new(vec![4, s, w], data)?;
    let out = train::infer(
        model,
        &input,
        args.level,
        &args.disable,
        exec_mode(args.single_thread),
    )?;
    io::write_rgb8(&args.out, &out)?;
    eprintln!(
        "wrote {} ({}x{})",
        args.out.display(),
        out.shape()[2],
        out.shape()[1]
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), Error> {
    if !args.checkpoint.is_file() {
        return Err(DataError::MissingFile(args.checkpoint.display().to_string()).into());
    }
    let exec = exec_mode(args.single_thread);
    let report = match load_any_model(&args.checkpoint)? {
        AnyModel::F64(m) => {
            let data = Dataset::<f64>::load(&args.data)?;
            evaluate_model(&m, &data, args.split.into(), &[], exec)?
        }
        AnyModel::F32(m) => {
            let data = Dataset::<f32>::load(&args.data)?;
            evaluate_model(&m, &data, args.split.into(), &[], exec)?
        }
    };
    eprintln!(
        "psnr {:.2} dB, ssim {:.4} (baseline {:.2} dB / {:.4}, margin {:.2} dB)",
        report.psnr,
        report.ssim,
        report.baseline_psnr,
        report.baseline_ssim,
        report.psnr_margin()
    );
    print_json(&report);
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<(), Error> {
    if !args.checkpoint.is_file() {
        return Err(DataError::MissingFile(args.checkpoint.display().to_string()).into());
    }
    let exec = exec_mode(args.single_thread);
    let rows = match load_any_model(&args.checkpoint)? {
        AnyModel::F64(m) => {
            let data = Dataset::<f64>::load(&args.data)?;
            run_ablate(&m, &data, args.split.into(), exec)?
        }
        AnyModel::F32(m) => {
            let data = Dataset::<f32>::load(&args.data)?;
            run_ablate(&m, &data, args.split.into(), exec)?
        }
    };
    print_json(&rows);
    Ok(())
}

fn run_ablate<T: Element>(
    model: &PyNet<T>,
    data: &Dataset<T>,
    split: Split,
    exec: ExecMode,
) -> Result<Vec<serde_json::Value>, Error> {
    let levels = model.config().levels;
    let mut cuts: Vec<Vec<usize>> = vec![Vec::new()];
    for cut in (4..=levels).rev() {
        cuts.push((cut..=levels).collect());
    }
    let mut rows = Vec::new();
    for disabled in cuts {
        let report = evaluate_model(model, data, split, &disabled, exec)?;
        eprintln!(
            "disabled {:?}: psnr {:.2} dB, ssim {:.4}",
            disabled, report.psnr, report.ssim
        );
        rows.push(serde_json::json!({
            "disabled": disabled,
            "psnr": report.psnr,
            "ssim": report.ssim,
        }));
    }
    Ok(rows)
}

fn cmd_bench(args: BenchArgs) -> Result<(), Error> {
    if let Some(path) = &args.checkpoint {
        if !path.is_file() {
            return Err(DataError::MissingFile(path.display().to_string()).into());
        }
        match load_any_model(path)? {
            AnyModel::F64(m) => run_bench::<f64>(&m, &args),
            AnyModel::F32(m) => run_bench::<f32>(&m, &args),
        }
    } else {
        let cfg = PyNetConfig::with_levels(args.levels, args.width);
        if args.use_f32 {
            run_bench::<f32>(&PyNet::init(cfg, 1)?, &args)
        } else {
            run_bench::<f64>(&PyNet::init(cfg, 1)?, &args)
        }
    }
}

fn percentile(sorted_ms: &[f64], q: f64) -> f64 {
    let n = sorted_ms.len();
    let idx = ((n as f64 * q).ceil() as usize).clamp(1, n) - 1;
    sorted_ms[idx]
}

fn run_bench<T: Element>(model: &PyNet<T>, args: &BenchArgs) -> Result<(), Error> {
    if args.runs == 0 {
        return Err(bokehnet_core::ConfigError::Invalid {
            field: "runs",
            detail: "must be >= 1".into(),
        }
        .into());
    }
    let cfg = model.config();
    cfg.check_input_extent(args.size, args.size)?;
    let mut rng = DetRng::new(1);
    let data: Vec<T> = (0..cfg.in_channels * args.size * args.size)
        .map(|_| T::from_f64(rng.uniform(-1.0, 1.0)))
        .collect();
    let input = Tensor::new(vec![cfg.in_channels, args.size, args.size], data)?;

    let mut result = serde_json::Map::new();
    result.insert("levels".into(), cfg.levels.into());
    result.insert("size".into(), args.size.into());
    result.insert("level".into(), args.level.into());
    result.insert("runs".into(), args.runs.into());
    result.insert("dtype".into(), T::DTYPE_NAME.into());
    for (label, exec) in [
        ("single_thread", ExecMode::SingleThread),
        ("multi_thread", ExecMode::MultiThread),
    ] {
        train::infer(model, &input, args.level, &[], exec)?;
        let mut times = Vec::with_capacity(args.runs);
        for _ in 0..args.runs {
            let t0 = Instant::now();
            train::infer(model, &input, args.level, &[], exec)?;
            times.push(t0.elapsed().as_secs_f64() * 1e3);
        }
        times.sort_by(|a, b| a.total_cmp(b));
        let median = percentile(&times, 0.5);
        let p90 = percentile(&times, 0.9);
        eprintln!("{label}: median {median:.1} ms, p90 {p90:.1} ms");
        result.insert(
            label.into(),
            serde_json::json!({ "median_ms": median, "p90_ms": p90 }),
        );
    }
    print_json(&serde_json::Value::Object(result));
    Ok(())
}
