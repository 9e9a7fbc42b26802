use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use tilepfn::attention::FaultInjection;
use tilepfn::harness::{self, ScalingOptions, SyntheticKind, SyntheticTaskSpec, Variant};
use tilepfn::model::{read_test_csv, read_train_csv, write_predictions};
use tilepfn::{
    chunked_attention_with, forward_with, max_relative_error, reference_attention, AttentionKernel, KernelOptions,
    ModelConfig, OutputKind, Scalar, Seed, TabularTask, TaskKind, Tensor, TileConfig, WeightSet,
};

/// Exact tiled attention checks, context-length sweeps and in-context predictions.
#[derive(Parser, Debug)]
#[command(name = "tilepfn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compare the tiled kernel against the double-precision oracle on seeded inputs.
    ///
    /// Exits 0 iff the max relative error is within tolerance.
    Check(CheckArgs),
    /// Sweep context lengths on a synthetic task and write one CSV row per (length, variant).
    Bench(BenchArgs),
    /// Predict test rows from a train CSV in one forward pass.
    Predict(PredictArgs),
}

#[derive(Args, Debug, Clone, Copy)]
struct TileArgs {
    /// Query rows per tile.
    #[arg(long, default_value_t = 64)]
    query_tile: usize,
    /// Keys and values per tile.
    #[arg(long, default_value_t = 256)]
    kv_tile: usize,
    /// Batch entries per tile; 0 processes the whole batch at once.
    #[arg(long, default_value_t = 8)]
    batch_tile: usize,
}

impl TileArgs {
    fn tiles(&self) -> TileConfig {
        TileConfig::new(
            self.query_tile,
            self.kv_tile,
            (self.batch_tile > 0).then_some(self.batch_tile),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Precision {
    Single,
    Double,
}

#[derive(Args, Debug)]
struct CheckArgs {
    /// Batch size B.
    #[arg(long, default_value_t = 2)]
    batch: usize,
    /// Heads H.
    #[arg(long, default_value_t = 4)]
    heads: usize,
    /// Query length L_q.
    #[arg(long, default_value_t = 128)]
    query_len: usize,
    /// Key/value length L_k.
    #[arg(long, default_value_t = 1024)]
    key_len: usize,
    /// Head dimension d_k.
    #[arg(long, default_value_t = 32)]
    head_dim: usize,
    #[command(flatten)]
    tiles: TileArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Precision::Single)]
    precision: Precision,
    /// Single-threaded kernel evaluation.
    #[arg(long)]
    deterministic: bool,
    /// Override the tolerance (default 1e-5 single, 1e-10 double).
    #[arg(long)]
    tolerance: Option<f64>,
    /// Corrupt the rescale step (negative control).
    #[arg(long, hide = true)]
    inject_fault: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TaskArg {
    Linear,
    Logistic,
    Piecewise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum WeightsArg {
    /// Seeded scaled-normal weights.
    Random,
    /// Hand-set kernel-smoother weights (regression tasks, head_dim >= 8).
    Smoother,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum VariantsArg {
    Both,
    Chunked,
    Monolithic,
}

#[derive(Args, Debug, Clone, Copy)]
struct ModelArgs {
    #[arg(long, default_value_t = 16)]
    d_model: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long, value_enum, default_value_t = TaskArg::Linear)]
    task: TaskArg,
    /// Train rows generated (default: the largest length).
    #[arg(long)]
    n_total: Option<usize>,
    /// Test rows.
    #[arg(long, default_value_t = 256)]
    test_rows: usize,
    /// Feature columns.
    #[arg(long, default_value_t = 8)]
    features: usize,
    #[arg(long, default_value_t = 0.0)]
    noise_std: f64,
    /// Comma-separated ascending context lengths.
    #[arg(long, value_delimiter = ',', required = true)]
    lengths: Vec<usize>,
    #[arg(long, value_enum, default_value_t = VariantsArg::Both)]
    variants: VariantsArg,
    /// Analytic score-matrix budget for the monolithic variant, e.g. 2GiB, 64MiB, 1KB or plain bytes.
    #[arg(long, default_value = "2GiB", value_parser = parse_bytes)]
    budget_bytes: u64,
    #[arg(long, value_enum, default_value_t = WeightsArg::Random)]
    weights: WeightsArg,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    tiles: TileArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Single-threaded kernels with peak-memory metering. Without it the
    /// sweep runs on the thread pool and leaves peak_bytes empty.
    #[arg(long)]
    deterministic: bool,
    /// Records CSV.
    #[arg(long)]
    out: PathBuf,
    /// Also write an SVG plot of metric against context length.
    #[arg(long)]
    svg: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum KindArg {
    Classification,
    Regression,
}

#[derive(Args, Debug)]
struct PredictArgs {
    /// Train CSV with header; the last column is the label.
    #[arg(long)]
    train: PathBuf,
    /// Test CSV with header and the same feature columns.
    #[arg(long)]
    test: PathBuf,
    /// Weight file.
    #[arg(long, conflicts_with = "seed_init", required_unless_present = "seed_init")]
    weights: Option<PathBuf>,
    /// Initialize seeded random weights instead of loading a file.
    #[arg(long)]
    seed_init: Option<u64>,
    /// Task kind when initializing weights.
    #[arg(long, value_enum, default_value_t = KindArg::Classification)]
    kind: KindArg,
    /// Class count (default: the weight file's head, or the largest label + 1).
    #[arg(long)]
    num_classes: Option<usize>,
    #[command(flatten)]
    model: ModelArgs,
    /// Write the weights used to this file.
    #[arg(long)]
    save_weights: Option<PathBuf>,
    #[command(flatten)]
    tiles: TileArgs,
    #[arg(long, value_enum, default_value_t = Precision::Single)]
    precision: Precision,
    #[arg(long)]
    deterministic: bool,
    /// Predictions CSV: p0..pC-1 per row, or a single mean column.
    #[arg(long)]
    out: PathBuf,
}

fn parse_bytes(s: &str) -> Result<u64, String> {
    let s = s.trim();
    let split = s.find(|c: char| !c.is_ascii_digit()).unwrap_or(s.len());
    let (digits, unit) = s.split_at(split);
    let value: u64 = digits.parse().map_err(|_| format!("`{s}` is not a byte count"))?;
    let scale: u64 = match unit.trim().to_ascii_lowercase().as_str() {
        "" | "b" => 1,
        "kb" => 1000,
        "kib" => 1 << 10,
        "mb" => 1_000_000,
        "mib" => 1 << 20,
        "gb" => 1_000_000_000,
        "gib" => 1 << 30,
        other => return Err(format!("unknown byte unit `{other}`")),
    };
    value.checked_mul(scale).ok_or_else(|| format!("`{s}` overflows"))
}

fn kernel_options(deterministic: bool) -> KernelOptions {
    if deterministic {
        KernelOptions::deterministic()
    } else {
        KernelOptions::parallel()
    }
}

fn check_in<T: Scalar>(args: &CheckArgs) -> Result<f64> {
    let shape = [args.batch, args.heads, args.query_len, args.head_dim];
    let kv = [args.batch, args.heads, args.key_len, args.head_dim];
    let seed = Seed(args.seed);
    let q = Tensor::<f64>::randn(shape, seed.derive(0)).cast::<T>();
    let k = Tensor::<f64>::randn(kv, seed.derive(1)).cast::<T>();
    let v = Tensor::<f64>::randn(kv, seed.derive(2)).cast::<T>();
    let mut options = kernel_options(args.deterministic);
    if args.inject_fault {
        options.fault = Some(FaultInjection::RescaleSignFlip);
    }
    let got = chunked_attention_with(&q, &k, &v, args.tiles.tiles(), &options)?;
    Ok(max_relative_error(&got, &reference_attention(&q, &k, &v)?))
}

fn cmd_check(args: &CheckArgs) -> Result<ExitCode> {
    let (err, default_tol) = match args.precision {
        Precision::Single => (check_in::<f32>(args)?, 1e-5),
        Precision::Double => (check_in::<f64>(args)?, 1e-10),
    };
    let tol = args.tolerance.unwrap_or(default_tol);
    println!("max relative error {err:e} (tolerance {tol:e})");
    if err < tol {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!(
            "tolerance exceeded: B={} H={} Lq={} Lk={} dk={} tiles={:?} seed={} precision={:?}",
            args.batch,
            args.heads,
            args.query_len,
            args.key_len,
            args.head_dim,
            args.tiles.tiles(),
            args.seed,
            args.precision
        );
        Ok(ExitCode::FAILURE)
    }
}

fn cmd_bench(args: &BenchArgs) -> Result<ExitCode> {
    let kind = match args.task {
        TaskArg::Linear => SyntheticKind::LinearRegression,
        TaskArg::Logistic => SyntheticKind::LogisticClassification,
        TaskArg::Piecewise => SyntheticKind::Piecewise,
    };
    let n_total = args
        .n_total
        .unwrap_or_else(|| args.lengths.iter().copied().max().unwrap_or(0));
    let spec = SyntheticTaskSpec {
        seed: Seed(args.seed),
        n_total,
        m: args.test_rows,
        p: args.features,
        kind,
        noise_std: args.noise_std,
    };
    let output = match kind.task_kind() {
        TaskKind::Regression => OutputKind::Regression,
        TaskKind::Classification { num_classes } => OutputKind::Classification { num_classes },
    };
    let config = ModelConfig::new(
        args.model.d_model,
        args.model.heads,
        args.model.layers,
        output,
        Seed(args.seed),
    );
    let weights = match args.weights {
        WeightsArg::Random => WeightSet::init(&config)?,
        WeightsArg::Smoother => WeightSet::kernel_smoother(&config, args.features)?,
    };
    let variants: &[Variant] = match args.variants {
        VariantsArg::Both => &[Variant::Monolithic, Variant::Chunked],
        VariantsArg::Chunked => &[Variant::Chunked],
        VariantsArg::Monolithic => &[Variant::Monolithic],
    };
    let options = ScalingOptions {
        budget_bytes: args.budget_bytes,
        parallel: !args.deterministic,
    };
    let records = harness::run_scaling_with(&spec, &args.lengths, &weights, args.tiles.tiles(), variants, &options)?;
    harness::write_records(&records, &args.out)?;
    if let Some(svg) = &args.svg {
        harness::write_svg(&records, svg)?;
    }
    for r in &records {
        let value = r.metric_value.map_or("-".to_string(), |v| format!("{v:.6}"));
        println!(
            "n={:<6} {:<10} {:?}={value} status={:?}",
            r.context_length, r.variant, r.metric_name, r.status
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_predict(args: &PredictArgs) -> Result<ExitCode> {
    let (train_x, train_y) = read_train_csv(&args.train)?;
    let test_x = read_test_csv(&args.test, train_x.cols)?;
    let weights = match (&args.weights, args.seed_init) {
        (Some(path), _) => WeightSet::load(path)?,
        (None, Some(seed)) => {
            let output = match args.kind {
                KindArg::Regression => OutputKind::Regression,
                KindArg::Classification => {
                    let inferred = train_y.iter().fold(0.0f64, |m, &y| m.max(y)) as usize + 1;
                    OutputKind::Classification {
                        num_classes: args.num_classes.unwrap_or(inferred.max(2)),
                    }
                }
            };
            let m = args.model;
            WeightSet::init(&ModelConfig::new(m.d_model, m.heads, m.layers, output, Seed(seed)))?
        }
        (None, None) => bail!("one of --weights or --seed-init is required"),
    };
    let kind = match weights.config.output {
        OutputKind::Regression => TaskKind::Regression,
        OutputKind::Classification { num_classes } => TaskKind::Classification {
            num_classes: args.num_classes.unwrap_or(num_classes),
        },
    };
    let task = TabularTask::new(train_x, train_y, test_x, kind)?;
    let kernel = AttentionKernel::Chunked(args.tiles.tiles());
    let options = kernel_options(args.deterministic);
    let preds = match args.precision {
        Precision::Single => forward_with::<f32>(&task, &weights, &kernel, &options)?,
        Precision::Double => forward_with::<f64>(&task, &weights, &kernel, &options)?,
    };
    write_predictions(&args.out, &preds)?;
    if let Some(path) = &args.save_weights {
        weights.save(path)?;
    }
    eprintln!("wrote {} predictions to {}", preds.len(), args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Check(args) => cmd_check(args),
        Command::Bench(args) => cmd_bench(args).context("bench failed"),
        Command::Predict(args) => cmd_predict(args).context("predict failed"),
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
