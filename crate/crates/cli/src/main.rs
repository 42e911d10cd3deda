use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use mobileone::arch::spec_inference_params;
use mobileone::bench::{
    ablation_net, benchmark, flops_latency_correlation, load_latency_table, latency_table, report_to_string,
    AblationActivation, AblationConfig, ReportFormat, ReportRow, DEFAULT_ITERS, DEFAULT_WARMUP,
};
use mobileone::block::BnInit;
use mobileone::container::stored_dtype;
use mobileone::tensor::DType;
use mobileone::train::{calibrate, train_toy, ToyConfig};
use mobileone::{
    build_model, count_flops, count_params, load_model, reparameterize_model, save_model, variant_spec, Error,
    InitPolicy, Model, ModelMode, Scalar, Tensor4,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Environment variable holding the default worker-thread count.
const THREADS_ENV: &str = "MOBILEONE_THREADS";

#[derive(Parser, Debug)]
#[command(name = "mobileone", version, about = "Build, fold, verify and benchmark MobileOne networks")]
struct Cli {
    /// Worker threads for conv kernels (default: $MOBILEONE_THREADS, else all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build and initialize a variant, then save it.
    Build(BuildArgs),
    /// Fold a train-mode model into its inference form.
    Reparam(ReparamArgs),
    /// Compare a train-mode model against its folded form on random inputs.
    Verify(VerifyArgs),
    /// Time forward passes of a model, a variant, or an ablation network.
    Bench(BenchArgs),
    /// Rank correlation between FLOPs and mobile latency over a table.
    Correlate(CorrelateArgs),
    /// Train a small network on synthetic data.
    TrainToy(TrainToyArgs),
    /// Print inference parameter and MAC counts of a variant.
    Count(CountArgs),
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum ModeArg {
    Train,
    Inference,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum DTypeArg {
    F32,
    F64,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum BnArg {
    Identity,
    Random,
    /// Random affine terms, running statistics from a seeded calibration batch.
    Calibrated,
}

#[derive(Copy, Clone, Debug, ValueEnum, PartialEq)]
enum FormatArg {
    Text,
    Csv,
    Json,
}

#[derive(Args, Debug)]
struct BuildArgs {
    #[arg(long)]
    variant: String,
    #[arg(long, value_enum, default_value = "train")]
    mode: ModeArg,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "f32")]
    dtype: DTypeArg,
    /// Batchnorm initialization for train-mode models.
    #[arg(long, value_enum, default_value = "identity")]
    bn: BnArg,
}

#[derive(Args, Debug)]
struct ReparamArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Compare against this folded file instead of folding in memory.
    #[arg(long)]
    folded: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    trials: usize,
    /// Largest tolerated max-abs deviation.
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
    /// Divide the deviation by max(1, max |reference logit|) before comparing.
    #[arg(long)]
    relative: bool,
    /// Input resolution (default: the model's own).
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Weight file to benchmark.
    #[arg(long, conflicts_with_all = ["variant", "ablation"])]
    model: Option<PathBuf>,
    /// Variant(s) to benchmark in inference form; repeatable.
    #[arg(long, conflicts_with = "ablation")]
    variant: Vec<String>,
    /// Ablation network activation: relu, gelu, silu or se-relu.
    #[arg(long)]
    ablation: Option<String>,
    #[arg(long, default_value_t = 30)]
    depth: usize,
    #[arg(long, default_value_t = 64)]
    channels: usize,
    /// Input resolution (ablation default 56, models default to their own).
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long)]
    with_se: bool,
    #[arg(long)]
    with_skip: bool,
    #[arg(long, default_value_t = DEFAULT_ITERS)]
    iters: usize,
    #[arg(long, default_value_t = DEFAULT_WARMUP)]
    warmup: usize,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long, value_enum, default_value = "csv")]
    format: FormatArg,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct CorrelateArgs {
    /// CSV with flops_m and mobile_ms columns (default: the bundled table).
    #[arg(long)]
    fixture: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "text")]
    format: FormatArg,
}

#[derive(Args, Debug)]
struct TrainToyArgs {
    /// JSON training configuration; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// CSV log destination (default: stdout).
    #[arg(long)]
    log: Option<PathBuf>,
    /// Save the trained model here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct CountArgs {
    #[arg(long)]
    variant: String,
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long, value_enum, default_value = "text")]
    format: FormatArg,
}

/// Error that maps to the usage exit code.
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

fn variant(name: &str) -> anyhow::Result<mobileone::ArchSpec> {
    variant_spec(name).map_err(|e| match e {
        Error::UnknownVariant { .. } => usage(e.to_string()),
        other => other.into(),
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads(cli.threads) {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn configure_threads(flag: Option<usize>) -> anyhow::Result<()> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => Some(
                v.trim()
                    .parse::<usize>()
                    .map_err(|_| usage(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?,
            ),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            return Err(usage("thread count must be positive"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn threads() -> usize {
    rayon::current_num_threads()
}

fn run(cmd: Command) -> anyhow::Result<ExitCode> {
    match cmd {
        Command::Build(a) => cmd_build(a),
        Command::Reparam(a) => with_stored_dtype(&a.input.clone(), |dt| match dt {
            DType::F64 => cmd_reparam::<f64>(&a),
            _ => cmd_reparam::<f32>(&a),
        }),
        Command::Verify(a) => with_stored_dtype(&a.input.clone(), |dt| match dt {
            DType::F64 => cmd_verify::<f64>(&a),
            _ => cmd_verify::<f32>(&a),
        }),
        Command::Bench(a) => cmd_bench(a),
        Command::Correlate(a) => cmd_correlate(a),
        Command::TrainToy(a) => cmd_train_toy(a),
        Command::Count(a) => cmd_count(a),
    }
}

fn with_stored_dtype(
    path: &Path,
    f: impl FnOnce(DType) -> anyhow::Result<ExitCode>,
) -> anyhow::Result<ExitCode> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let dt = stored_dtype(&bytes).with_context(|| format!("parsing {}", path.display()))?;
    f(dt)
}

fn summary_line<T: Scalar>(model: &Model<T>) -> anyhow::Result<String> {
    let folded = reparameterize_model(model)?;
    let res = model.input_resolution;
    Ok(format!(
        "{} ({} mode): {} params stored, {} inference params, {:.1}M MACs at {res}x{res}",
        model.name,
        model.mode.as_str(),
        count_params(model),
        count_params(&folded),
        count_flops(&folded, res)? as f64 / 1e6
    ))
}

/// Calibration batch size used by `build --bn calibrated`.
const CALIBRATION_BATCH: usize = 4;

fn build_and_save<T: Scalar>(
    spec: &mobileone::ArchSpec,
    mode: ModelMode,
    init: InitPolicy,
    calibrated: bool,
    out: &Path,
) -> anyhow::Result<String> {
    let mut m: Model<T> = build_model(spec, mode, init)?;
    if calibrated {
        let res = spec.input_resolution;
        let mut rng = ChaCha8Rng::seed_from_u64(init.seed);
        let x = Tensor4::randn([CALIBRATION_BATCH, spec.in_channels, res, res], 1.0, &mut rng);
        calibrate(&mut m, &x)?;
    }
    save_model(&m, out)?;
    summary_line(&m)
}

fn cmd_build(a: BuildArgs) -> anyhow::Result<ExitCode> {
    let spec = variant(&a.variant)?;
    let mode = match a.mode {
        ModeArg::Train => ModelMode::Train,
        ModeArg::Inference => ModelMode::Inference,
    };
    let init = InitPolicy {
        seed: a.seed,
        bn: match a.bn {
            BnArg::Identity => BnInit::Identity,
            BnArg::Random | BnArg::Calibrated => BnInit::Random,
        },
    };
    let calibrated = matches!(a.bn, BnArg::Calibrated);
    if calibrated && mode == ModelMode::Inference {
        return Err(usage("--bn calibrated applies to train-mode models"));
    }
    let line = match a.dtype {
        DTypeArg::F32 => build_and_save::<f32>(&spec, mode, init, calibrated, &a.out)?,
        DTypeArg::F64 => build_and_save::<f64>(&spec, mode, init, calibrated, &a.out)?,
    };
    println!("{line}");
    println!("wrote {}", a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_reparam<T: Scalar>(a: &ReparamArgs) -> anyhow::Result<ExitCode> {
    let model: Model<T> = load_model(&a.input)?;
    if model.mode == ModelMode::Inference {
        eprintln!("warning: {} is already an inference model; writing it unchanged", a.input.display());
    }
    let folded = reparameterize_model(&model)?;
    save_model(&folded, &a.out)?;
    println!(
        "{} -> {}: {} -> {} params",
        a.input.display(),
        a.out.display(),
        count_params(&model),
        count_params(&folded)
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify<T: Scalar>(a: &VerifyArgs) -> anyhow::Result<ExitCode> {
    if a.trials == 0 {
        return Err(usage("--trials must be at least 1"));
    }
    let model: Model<T> = load_model(&a.input)?;
    if model.mode != ModelMode::Train {
        return Err(usage(format!("{} is not a train-mode model", a.input.display())));
    }
    let folded: Model<T> = match &a.folded {
        Some(p) => {
            let m: Model<T> = load_model(p)?;
            if m.mode != ModelMode::Inference {
                return Err(usage(format!("{} is not an inference model", p.display())));
            }
            m
        }
        None => reparameterize_model(&model)?,
    };
    let res = a.resolution.unwrap_or(model.input_resolution);
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut worst = 0.0f64;
    let mut scale = 0.0f64;
    for _ in 0..a.trials {
        let x = Tensor4::<T>::randn([1, model.in_channels(), res, res], 1.0, &mut rng);
        let reference = model.forward(&x)?;
        let dev = reference.max_abs_diff(&folded.forward(&x)?)?;
        worst = if dev.is_nan() { f64::INFINITY } else { worst.max(dev) };
        scale = scale.max(reference.max_abs());
    }
    let measured = if a.relative { worst / scale.max(1.0) } else { worst };
    let pass = measured <= a.tol;
    println!(
        "trials={} resolution={res} max_abs_dev={worst:.3e} max_abs_logit={scale:.3e} {}={measured:.3e} tol={:.1e} {}",
        a.trials,
        if a.relative { "relative_dev" } else { "checked_dev" },
        a.tol,
        if pass { "PASS" } else { "FAIL" }
    );
    Ok(if pass { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn emit(text: &str, out: Option<&Path>) -> anyhow::Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn bench_model(name: &str, model: &Model<f32>, batch: usize, res: usize, a: &BenchArgs) -> anyhow::Result<ReportRow> {
    let folded = reparameterize_model(model)?;
    let stats = benchmark(|x| folded.forward(x), [batch, folded.in_channels(), res, res], a.warmup, a.iters)?;
    Ok(ReportRow::new(
        name,
        count_params(&folded) as u64,
        count_flops(&folded, res)?,
        threads(),
        &stats,
    ))
}

fn cmd_bench(a: BenchArgs) -> anyhow::Result<ExitCode> {
    if a.iters == 0 || a.batch == 0 {
        return Err(usage("--iters and --batch must be positive"));
    }
    let format = match a.format {
        FormatArg::Csv | FormatArg::Text => ReportFormat::Csv,
        FormatArg::Json => ReportFormat::Json,
    };
    let mut rows = Vec::new();
    if let Some(act) = &a.ablation {
        let activation: AblationActivation = act.parse().map_err(|e: Error| usage(e.to_string()))?;
        let cfg = AblationConfig {
            depth: a.depth,
            channels: a.channels,
            resolution: a.resolution.unwrap_or(56),
            activation,
            with_se: a.with_se,
            with_skip: a.with_skip,
            seed: a.seed,
        };
        let net = ablation_net::<f32>(cfg).map_err(|e| usage(e.to_string()))?;
        let stats = benchmark(|x| net.forward(x), net.input_shape(a.batch), a.warmup, a.iters)?;
        let name = format!(
            "ablation-{act}-d{}{}{}",
            a.depth,
            if a.with_se { "-se" } else { "" },
            if a.with_skip { "-skip" } else { "" }
        );
        rows.push(ReportRow::new(&name, net.param_count() as u64, net.macs(), threads(), &stats));
    } else if let Some(path) = &a.model {
        let model: Model<f32> = load_model(path)?;
        let res = a.resolution.unwrap_or(model.input_resolution);
        rows.push(bench_model(&model.name.clone(), &model, a.batch, res, &a)?);
    } else if !a.variant.is_empty() {
        for v in &a.variant {
            let spec = variant(v)?;
            let model: Model<f32> = build_model(&spec, ModelMode::Inference, InitPolicy::new(a.seed))?;
            let res = a.resolution.unwrap_or(spec.input_resolution);
            rows.push(bench_model(&spec.name, &model, a.batch, res, &a)?);
        }
    } else {
        return Err(usage("bench needs one of --model, --variant or --ablation"));
    }
    emit(&report_to_string(&rows, format)?, a.out.as_deref())?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_correlate(a: CorrelateArgs) -> anyhow::Result<ExitCode> {
    let rows = match &a.fixture {
        Some(p) => load_latency_table(p).with_context(|| format!("loading {}", p.display()))?,
        None => latency_table(),
    };
    let rep = flops_latency_correlation(&rows)?;
    match a.format {
        FormatArg::Json => println!("{}", serde_json::to_string_pretty(&rep)?),
        _ => println!(
            "spearman rho({}, {}) = {:.4}, p = {:.4} ({}, n = {})",
            rep.x_metric, rep.y_metric, rep.rho, rep.p_value, rep.p_method, rep.n
        ),
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_train_toy(a: TrainToyArgs) -> anyhow::Result<ExitCode> {
    let mut cfg: ToyConfig = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).map_err(|e| usage(format!("bad config {}: {e}", p.display())))?
        }
        None => ToyConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
        cfg.data.seed = s;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let out = train_toy::<f32>(&cfg)?;
    match &a.log {
        Some(p) => out.log.write_csv(p)?,
        None => out.log.write_csv_to(std::io::stdout().lock())?,
    }
    if let Some(p) = &a.out {
        save_model(&out.model, p)?;
    }
    eprintln!(
        "trained {} steps; final train loss {:.4}",
        out.steps,
        out.log.final_train_loss().unwrap_or(f64::NAN)
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_count(a: CountArgs) -> anyhow::Result<ExitCode> {
    let spec = variant(&a.variant)?;
    let res = a.resolution.unwrap_or(spec.input_resolution);
    let model: Model<f32> = build_model(&spec, ModelMode::Inference, InitPolicy::new(0))?;
    let params = count_params(&model);
    if params != spec_inference_params(&spec) {
        bail!("internal parameter count mismatch for {}", spec.name);
    }
    let macs = count_flops(&model, res)?;
    match a.format {
        FormatArg::Json => println!(
            "{}",
            serde_json::json!({"variant": spec.name, "params": params, "macs": macs, "resolution": res})
        ),
        _ => println!(
            "{}: {:.3}M params, {:.1}M MACs at {res}x{res}",
            spec.name,
            params as f64 / 1e6,
            macs as f64 / 1e6
        ),
    }
    Ok(ExitCode::SUCCESS)
}
