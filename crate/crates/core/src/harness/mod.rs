//! Context-length scaling sweeps on synthetic tabular tasks.
//!
//! A sweep generates one task, shuffles its train rows once, and evaluates
//! the model on growing prefixes of that shuffle with both the monolithic
//! and the chunked kernel. Monolithic cells whose score matrix would not
//! fit the byte budget are recorded as `budget-exceeded` instead of run.

mod metrics;
mod plot;
mod synthetic;

pub use metrics::{accuracy, auc, normalized_rmse, rmse};
pub use plot::write_svg;
pub use synthetic::{context_order, gen_task, SyntheticKind, SyntheticTask, SyntheticTaskSpec};

use std::fmt;
use std::fs::{File, OpenOptions};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::{KernelOptions, TileConfig};
use crate::error::{Error, Result};
use crate::memory::with_tracking;
use crate::model::{forward_with, AttentionKernel, ModelConfig, PredictiveDistribution, TaskKind, WeightSet};

/// Analytic monolithic budget used when none is given: 2 GiB.
pub const DEFAULT_BUDGET_BYTES: u64 = 2 << 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Monolithic,
    Chunked,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Monolithic => "monolithic",
            Variant::Chunked => "chunked",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricName {
    Auc,
    Rmse,
    Accuracy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Ok,
    BudgetExceeded,
}

/// One (context length, variant) cell of a sweep.
///
/// `metric_value`, `wallclock_seconds` and `peak_bytes` are empty for
/// budget-exceeded cells; `peak_bytes` is also empty for parallel sweeps.
/// Tile columns are empty for the monolithic variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRecord {
    pub dataset_id: String,
    pub context_length: usize,
    pub variant: Variant,
    pub query_tile: Option<usize>,
    pub kv_tile: Option<usize>,
    pub batch_tile: Option<usize>,
    pub metric_name: MetricName,
    pub metric_value: Option<f64>,
    pub wallclock_seconds: Option<f64>,
    pub peak_bytes: Option<u64>,
    pub seed: u64,
    pub status: Status,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScalingOptions {
    /// Largest analytic score-matrix size the monolithic variant may allocate.
    pub budget_bytes: u64,
    /// Run kernels on the thread pool. Disables memory metering.
    pub parallel: bool,
}

impl Default for ScalingOptions {
    fn default() -> Self {
        ScalingOptions {
            budget_bytes: DEFAULT_BUDGET_BYTES,
            parallel: false,
        }
    }
}

/// Bytes of the largest score matrix a monolithic forward materializes.
///
/// The three attention regimes give `n*H*p^2` (train feature attention),
/// `m*H*p^2` (test feature attention), `p*H*n^2` (train self-attention) and
/// `p*H*m*n` (cross-attention) scores.
pub fn monolithic_score_bytes(n: usize, m: usize, p: usize, heads: usize, bytes_per_scalar: usize) -> u64 {
    let [n, m, p, h, b] = [n, m, p, heads, bytes_per_scalar].map(|v| v as u64);
    let scores = (n * h * p * p).max(m * h * p * p).max(p * h * n * n).max(p * h * m * n);
    scores.saturating_mul(b)
}

/// The metric reported for a task kind and its value on `preds`.
pub fn evaluate(preds: &PredictiveDistribution, test_y: &[f64], kind: TaskKind) -> Result<(MetricName, f64)> {
    match (preds, kind) {
        (PredictiveDistribution::Regression { mean }, TaskKind::Regression) => {
            Ok((MetricName::Rmse, rmse(mean, test_y)?))
        }
        (PredictiveDistribution::Classification { probs }, TaskKind::Classification { num_classes: 2 }) => {
            let scores: Vec<f64> = probs.iter().map(|r| r[1]).collect();
            Ok((MetricName::Auc, auc(&scores, test_y)?))
        }
        (PredictiveDistribution::Classification { probs }, TaskKind::Classification { .. }) => {
            Ok((MetricName::Accuracy, accuracy(probs, test_y)?))
        }
        _ => Err(Error::config("prediction kind does not match task kind")),
    }
}

fn metric_for(kind: TaskKind) -> MetricName {
    match kind {
        TaskKind::Regression => MetricName::Rmse,
        TaskKind::Classification { num_classes: 2 } => MetricName::Auc,
        TaskKind::Classification { .. } => MetricName::Accuracy,
    }
}

/// One record per (length, variant), lengths outermost, with seeded weights from `config`.
pub fn run_scaling(
    spec: &SyntheticTaskSpec,
    lengths: &[usize],
    config: &ModelConfig,
    tiles: TileConfig,
    variants: &[Variant],
    options: &ScalingOptions,
) -> Result<Vec<ScalingRecord>> {
    let weights = WeightSet::init(config)?;
    run_scaling_with(spec, lengths, &weights, tiles, variants, options)
}

/// [`run_scaling`] with explicit weights.
pub fn run_scaling_with(
    spec: &SyntheticTaskSpec,
    lengths: &[usize],
    weights: &WeightSet,
    tiles: TileConfig,
    variants: &[Variant],
    options: &ScalingOptions,
) -> Result<Vec<ScalingRecord>> {
    let config = &weights.config;
    config.validate()?;
    spec.validate()?;
    tiles.validate()?;
    if !lengths.windows(2).all(|w| w[0] <= w[1]) {
        return Err(Error::config(format!("context lengths must be ascending: {lengths:?}")));
    }
    if let Some(&bad) = lengths.iter().find(|&&n| n == 0 || n > spec.n_total) {
        return Err(Error::config(format!(
            "context length {bad} outside [1, n_total = {}]",
            spec.n_total
        )));
    }
    let generated = gen_task(spec)?;
    let kind = generated.task.kind;
    config.check_task(kind)?;
    let order = context_order(spec);
    let kernel_options = if options.parallel {
        KernelOptions::parallel()
    } else {
        KernelOptions::deterministic()
    };

    let mut records = Vec::with_capacity(lengths.len() * variants.len());
    for &n in lengths {
        let task = generated.task.with_train_rows(&order[..n]);
        for &variant in variants {
            let (kernel, tile_cols) = match variant {
                Variant::Monolithic => (AttentionKernel::Monolithic, [None; 3]),
                Variant::Chunked => (
                    AttentionKernel::Chunked(tiles),
                    [Some(tiles.query_tile), Some(tiles.kv_tile), tiles.batch_tile],
                ),
            };
            let mut record = ScalingRecord {
                dataset_id: spec.dataset_id(),
                context_length: n,
                variant,
                query_tile: tile_cols[0],
                kv_tile: tile_cols[1],
                batch_tile: tile_cols[2],
                metric_name: metric_for(kind),
                metric_value: None,
                wallclock_seconds: None,
                peak_bytes: None,
                seed: spec.seed.0,
                status: Status::BudgetExceeded,
            };
            let score_bytes = monolithic_score_bytes(n, spec.m, spec.p, config.num_heads, 4);
            if variant == Variant::Monolithic && score_bytes > options.budget_bytes {
                records.push(record);
                continue;
            }
            let run = || {
                let start = Instant::now();
                let preds = forward_with::<f32>(&task, weights, &kernel, &kernel_options);
                (preds, start.elapsed().as_secs_f64())
            };
            let ((preds, seconds), peak) = if options.parallel {
                (run(), None)
            } else {
                let (out, peak) = with_tracking(run)?;
                (out, Some(peak))
            };
            let (_, value) = evaluate(&preds?, &generated.test_y, kind)?;
            record.metric_value = Some(value);
            record.wallclock_seconds = Some(seconds);
            record.peak_bytes = peak;
            record.status = Status::Ok;
            records.push(record);
        }
    }
    Ok(records)
}

fn write_with(writer: csv::Writer<File>, records: &[ScalingRecord], path: &Path) -> Result<()> {
    let mut writer = writer;
    for r in records {
        writer.serialize(r).map_err(|e| Error::csv(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

const RECORD_HEADER: [&str; 12] = [
    "dataset_id",
    "context_length",
    "variant",
    "query_tile",
    "kv_tile",
    "batch_tile",
    "metric_name",
    "metric_value",
    "wallclock_seconds",
    "peak_bytes",
    "seed",
    "status",
];

/// Creates or truncates `path` and writes a header plus one row per record.
pub fn write_records(records: &[ScalingRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    writer.write_record(RECORD_HEADER).map_err(|e| Error::csv(path, e))?;
    write_with(writer, records, path)
}

/// Appends rows, writing the header only if the file is new or empty.
pub fn append_records(records: &[ScalingRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let empty = file.metadata().map_err(|e| Error::io(path, e))?.len() == 0;
    let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    if empty {
        writer.write_record(RECORD_HEADER).map_err(|e| Error::csv(path, e))?;
    }
    write_with(writer, records, path)
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<ScalingRecord>> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let header = reader.headers().map_err(|e| Error::csv(path, e))?.clone();
    if header.iter().ne(RECORD_HEADER) {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            detail: format!("unexpected header {:?}", header.iter().collect::<Vec<_>>()),
        });
    }
    reader
        .deserialize()
        .map(|r| r.map_err(|e| Error::csv(path, e)))
        .collect()
}
