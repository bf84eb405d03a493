use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use scribseg::data::{load_case, prepare_samples, synth_generate, Dataset, Split, SynthOptions};
use scribseg::eval::{evaluate_split, render_overlay, run_ablation, AblationAxis, NetworkPredictor};
use scribseg::model::checkpoint;
use scribseg::selftest::run_selftest;
use scribseg::train::{fit, FitOptions};
use scribseg::types::HardLabelMap;
use scribseg::{Error, TrainConfig};

#[derive(Parser)]
#[command(name = "scribseg", version, about = "Scribble-supervised cardiac segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the built-in invariant checks.
    Selftest,
    /// Write a synthetic scribble dataset.
    Synth(SynthArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Score a checkpoint on a split.
    Eval(EvalArgs),
    /// Train and score every configuration of an ablation axis.
    Ablate(AblateArgs),
    /// Write contour overlays for one case.
    Render(RenderArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Dataset root.
    #[arg(long, env = "SCRIBSEG_DATA")]
    data: PathBuf,
    /// Directory holding train.txt/val.txt/test.txt (default: <data>/splits).
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set lambda2=0.3` or `--set optim.epochs=30`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    train: usize,
    #[arg(long, default_value_t = 5)]
    val: usize,
    #[arg(long, default_value_t = 5)]
    test: usize,
    #[arg(long, default_value_t = 4)]
    slices: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    /// Output directory for logs, checkpoints and the config snapshot.
    #[arg(long)]
    out: PathBuf,
    /// Continue from <out>/last.ckpt.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Also write per-case scores as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    axis: AblationAxis,
    /// Comma-separated λ grid for `lambda_sweep`.
    #[arg(long, value_delimiter = ',')]
    values: Option<Vec<f64>>,
    #[arg(long)]
    out: PathBuf,
    /// Split used for scoring (falls back to val when empty).
    #[arg(long, default_value = "test")]
    eval_split: Split,
}

#[derive(Args)]
struct RenderArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    case: String,
    /// Predict with this checkpoint; without it only ground truth is drawn.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

/// Failure with the process exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::UnknownKey(_) | Error::Config(_) => 2,
            _ => 1,
        };
        Failure { code, message: e.to_string() }
    }
}

fn load_config(args: &ConfigArgs) -> Result<TrainConfig, Failure> {
    let cfg = TrainConfig::load(args.config.as_deref(), &args.overrides)?;
    println!("# effective configuration\n{}", cfg.to_toml_string());
    Ok(cfg)
}

fn open_dataset(args: &DataArgs, cfg: &TrainConfig) -> Result<Dataset, Failure> {
    Ok(Dataset::open(&args.data, args.manifest.as_deref(), cfg.model.num_classes, cfg.model.ignore_label)?)
}

fn selftest() -> Result<(), Failure> {
    let results = run_selftest();
    for r in &results {
        match &r.outcome {
            Ok(()) => println!("PASS  {}", r.name),
            Err(m) => println!("FAIL  {}: {m}", r.name),
        }
    }
    let failed = results.iter().filter(|r| !r.passed()).count();
    println!("{} checks, {failed} failed", results.len());
    if failed > 0 {
        return Err(Failure { code: 1, message: format!("{failed} selftest check(s) failed") });
    }
    Ok(())
}

fn synth(a: &SynthArgs) -> Result<(), Failure> {
    let opts = SynthOptions { n_train: a.train, n_val: a.val, n_test: a.test, slices_per_case: a.slices, size: a.size };
    let m = synth_generate(&a.out, &opts, a.seed)?;
    let (tr, va, te) = m.counts();
    println!("wrote {} cases to {} ({tr} train / {va} val / {te} test)", tr + va + te, a.out.display());
    Ok(())
}

fn train(a: &TrainArgs) -> Result<(), Failure> {
    let cfg = load_config(&a.config)?;
    cfg.validate()?;
    let ds = open_dataset(&a.data, &cfg)?;
    let train = prepare_samples(&ds.load_split(Split::Train)?, cfg.model.image_size)?;
    let val = ds.load_split(Split::Val)?;
    let report = fit(&train, &val, &cfg, &FitOptions { out_dir: a.out.clone(), resume: a.resume })?;
    if let Some(r) = report.records.last() {
        println!(
            "finished epoch {} (L_TAS {:.4}, total {:.4})",
            r.epoch, r.metrics.l_tas, r.metrics.total
        );
    }
    if let Some(best) = report.state.best_score {
        println!("best validation mean Dice {best:.4}");
    }
    println!("outputs in {}", a.out.display());
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<(), Failure> {
    let ck = checkpoint::load(&a.checkpoint, None)?;
    let cfg = TrainConfig::from_toml_str(&ck.config)?;
    let ds = open_dataset(&a.data, &cfg)?;
    let table = evaluate_split(&a.checkpoint, &ds, a.split)?;
    print!("{}", table.to_text());
    if let Some(p) = &a.csv {
        std::fs::write(p, table.to_csv()).map_err(Error::from)?;
    }
    Ok(())
}

fn ablate(a: &AblateArgs) -> Result<(), Failure> {
    let cfg = load_config(&a.config)?;
    cfg.validate()?;
    std::fs::create_dir_all(&a.out).map_err(Error::from)?;
    cfg.write(&a.out.join("config.toml"))?;
    let ds = open_dataset(&a.data, &cfg)?;
    let train = prepare_samples(&ds.load_split(Split::Train)?, cfg.model.image_size)?;
    let val = ds.load_split(Split::Val)?;
    let mut scored = ds.load_split(a.eval_split)?;
    if scored.is_empty() || a.eval_split == Split::Train {
        scored = val.clone();
    }
    let table = run_ablation(a.axis, &train, &val, &scored, &cfg, a.values.as_deref(), &a.out)?;
    print!("{}", table.to_text());
    Ok(())
}

fn render(a: &RenderArgs) -> Result<(), Failure> {
    let ck = a.checkpoint.as_deref().map(|p| checkpoint::load(p, None)).transpose()?;
    let cfg = match &ck {
        Some(c) => TrainConfig::from_toml_str(&c.config)?,
        None => TrainConfig::default(),
    };
    let dir: PathBuf = a.data.data.join(&a.case);
    let gt = dir.join("gt.nii.gz");
    let case = load_case(
        &a.case,
        &dir.join("image.nii.gz"),
        &dir.join("scribble.nii.gz"),
        gt.exists().then_some(gt.as_path()),
        cfg.model.num_classes,
        cfg.model.ignore_label,
    )?;
    let preds: Vec<HardLabelMap> = match &ck {
        Some(c) => {
            let net = c.network()?;
            NetworkPredictor { net: &net, image_size: cfg.model.image_size }.predict_slices(&case)?
        }
        None => case
            .slices
            .iter()
            .map(|s| HardLabelMap::new(ndarray_zeros(s.image.dims()), cfg.model.num_classes))
            .collect::<Result<_, _>>()?,
    };
    for (z, (s, p)) in case.slices.iter().zip(&preds).enumerate() {
        let path = a.out.join(format!("{}_slice{z:02}.png", a.case));
        render_overlay(&s.image, p, s.ground_truth.as_ref(), &path)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn ndarray_zeros(dims: (usize, usize)) -> scribseg::ndarray::Array2<i32> {
    scribseg::ndarray::Array2::zeros(dims)
}

fn run(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Selftest => selftest(),
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Render(a) => render(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            if f.code == 2 {
                eprintln!("(usage error; see `scribseg --help`)");
            }
            ExitCode::from(f.code)
        }
    }
}
