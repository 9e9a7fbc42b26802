//! A miniature set-structured transformer for in-context tabular prediction.
//!
//! Every (sample, feature) cell becomes one token. Each layer runs
//! attention across a sample's features, then attention across samples
//! (train rows attend to train rows; test rows attend to train rows only),
//! then a per-token MLP, all with pre-norm residuals. Predictions pool the
//! feature tokens of each test row and apply a linear head.
//!
//! Weights are seeded random. The model exists to exercise the attention
//! kernels in the three shape regimes an in-context learner produces, not
//! to be accurate.

mod io;
mod layers;
mod smoother;
mod weights;

pub use io::{read_test_csv, read_train_csv, write_predictions};
pub use layers::{
    cross_attention_pass, embed, feature_attention_pass, mlp_pass, sample_self_attention_pass, AttentionKernel,
};
pub use weights::{AttentionWeights, EmbedWeights, HeadWeights, LayerWeights, MlpWeights, Norm, WeightSet};

use crate::attention::{KernelOptions, TileConfig};
use crate::error::{Error, Result};
use crate::tensor::{batched_matmul, Elementwise, Reduce, Scalar, Seed, Tensor};

/// Row-major matrix of feature values.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::InvalidInput(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidInput("ragged matrix rows".into()));
        }
        Matrix::new(rows.len(), cols, rows.concat())
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Rows in the order given by `indices`.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let data = indices.iter().flat_map(|&i| self.row(i).iter().copied()).collect();
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Classification { num_classes: usize },
    Regression,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TabularTask {
    pub train_x: Matrix,
    /// Class index (as a float) or regression target per train row.
    pub train_y: Vec<f64>,
    pub test_x: Matrix,
    pub kind: TaskKind,
}

impl TabularTask {
    pub fn new(train_x: Matrix, train_y: Vec<f64>, test_x: Matrix, kind: TaskKind) -> Result<Self> {
        let task = TabularTask {
            train_x,
            train_y,
            test_x,
            kind,
        };
        task.validate()?;
        Ok(task)
    }

    pub fn validate(&self) -> Result<()> {
        let (n, p) = (self.train_x.rows, self.train_x.cols);
        if n == 0 || self.test_x.rows == 0 || p == 0 {
            return Err(Error::InvalidInput(format!(
                "task needs n, m, p >= 1 (n={n}, m={}, p={p})",
                self.test_x.rows
            )));
        }
        if self.test_x.cols != p {
            return Err(Error::InvalidInput(format!(
                "test features have {} columns, train features have {p}",
                self.test_x.cols
            )));
        }
        if self.train_y.len() != n {
            return Err(Error::InvalidInput(format!(
                "{} labels for {n} train rows",
                self.train_y.len()
            )));
        }
        if let Some(i) = self
            .train_x
            .data
            .iter()
            .chain(&self.test_x.data)
            .chain(&self.train_y)
            .position(|x| !x.is_finite())
        {
            return Err(Error::InvalidInput(format!("non-finite value at flat position {i}")));
        }
        if let TaskKind::Classification { num_classes } = self.kind {
            if let Some(bad) = self
                .train_y
                .iter()
                .find(|&&y| y < 0.0 || y.fract() != 0.0 || y >= num_classes as f64)
            {
                return Err(Error::InvalidInput(format!(
                    "label {bad} not a class index in [0, {num_classes})"
                )));
            }
        }
        Ok(())
    }

    pub fn num_train(&self) -> usize {
        self.train_x.rows
    }

    pub fn num_test(&self) -> usize {
        self.test_x.rows
    }

    pub fn num_features(&self) -> usize {
        self.train_x.cols
    }

    /// The same task restricted to the given train rows, in that order.
    pub fn with_train_rows(&self, indices: &[usize]) -> TabularTask {
        TabularTask {
            train_x: self.train_x.select_rows(indices),
            train_y: indices.iter().map(|&i| self.train_y[i]).collect(),
            test_x: self.test_x.clone(),
            kind: self.kind,
        }
    }

    /// The same task restricted to the given test rows.
    pub fn with_test_rows(&self, indices: &[usize]) -> TabularTask {
        TabularTask {
            test_x: self.test_x.select_rows(indices),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputKind {
    Classification { num_classes: usize },
    Regression,
}

impl OutputKind {
    pub fn width(self) -> usize {
        match self {
            OutputKind::Classification { num_classes } => num_classes,
            OutputKind::Regression => 1,
        }
    }

    /// Class count, 0 for regression.
    pub fn num_classes(self) -> usize {
        match self {
            OutputKind::Classification { num_classes } => num_classes,
            OutputKind::Regression => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub mlp_hidden: usize,
    pub output: OutputKind,
    pub seed: Seed,
}

impl ModelConfig {
    pub fn new(d_model: usize, num_heads: usize, num_layers: usize, output: OutputKind, seed: Seed) -> Self {
        ModelConfig {
            d_model,
            num_heads,
            num_layers,
            mlp_hidden: 2 * d_model,
            output,
            seed,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.num_heads == 0 || self.num_layers == 0 || self.mlp_hidden == 0 {
            return Err(Error::config(format!("model counts must be >= 1: {self:?}")));
        }
        if !self.d_model.is_multiple_of(self.num_heads) {
            return Err(Error::config(format!(
                "d_model {} not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if self.output.num_classes() == 1 {
            return Err(Error::config("a classification head needs >= 2 classes"));
        }
        Ok(())
    }

    /// Whether this head can serve `kind`.
    pub fn check_task(&self, kind: TaskKind) -> Result<()> {
        match (self.output, kind) {
            (OutputKind::Regression, TaskKind::Regression) => Ok(()),
            (OutputKind::Classification { num_classes: have }, TaskKind::Classification { num_classes: want }) => {
                if want != have {
                    Err(Error::config(format!(
                        "task has {want} classes but the model head has {have}"
                    )))
                } else {
                    Ok(())
                }
            }
            (out, kind) => Err(Error::config(format!("model head {out:?} cannot serve task {kind:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PredictiveDistribution {
    /// One row per test sample; each row sums to 1.
    Classification { probs: Vec<Vec<f64>> },
    /// Predictive mean per test sample, in target units.
    Regression { mean: Vec<f64> },
}

impl PredictiveDistribution {
    pub fn len(&self) -> usize {
        match self {
            PredictiveDistribution::Classification { probs } => probs.len(),
            PredictiveDistribution::Regression { mean } => mean.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every predicted number, row-major.
    pub fn flat(&self) -> Vec<f64> {
        match self {
            PredictiveDistribution::Classification { probs } => probs.concat(),
            PredictiveDistribution::Regression { mean } => mean.clone(),
        }
    }
}

/// Per-column mean and standard deviation of the train features.
fn column_stats(x: &Matrix) -> Vec<(f64, f64)> {
    (0..x.cols)
        .map(|j| {
            let n = x.rows as f64;
            let mean = (0..x.rows).map(|i| x.data[i * x.cols + j]).sum::<f64>() / n;
            let var = (0..x.rows)
                .map(|i| (x.data[i * x.cols + j] - mean).powi(2))
                .sum::<f64>()
                / n;
            let std = var.sqrt();
            (mean, if std > 1e-12 { std } else { 1.0 })
        })
        .collect()
}

fn mean_std(y: &[f64]) -> (f64, f64) {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let std = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    (mean, if std > 1e-12 { std } else { 1.0 })
}

fn standardize(x: &Matrix, stats: &[(f64, f64)]) -> Matrix {
    let data = x
        .data
        .chunks_exact(x.cols)
        .flat_map(|row| row.iter().zip(stats).map(|(v, (m, s))| (v - m) / s))
        .collect();
    Matrix {
        rows: x.rows,
        cols: x.cols,
        data,
    }
}

/// Single forward pass with the tiled kernel, deterministic evaluation.
pub fn forward(task: &TabularTask, weights: &WeightSet, tiles: TileConfig) -> Result<PredictiveDistribution> {
    forward_with::<f32>(
        task,
        weights,
        &AttentionKernel::Chunked(tiles),
        &KernelOptions::deterministic(),
    )
}

/// Forward pass in working precision `T` with an explicit kernel choice.
pub fn forward_with<T: Scalar>(
    task: &TabularTask,
    weights: &WeightSet,
    kernel: &AttentionKernel,
    options: &KernelOptions,
) -> Result<PredictiveDistribution> {
    let config = &weights.config;
    config.validate()?;
    task.validate()?;
    config.check_task(task.kind)?;

    let (y_mean, y_std) = match task.kind {
        TaskKind::Regression => mean_std(&task.train_y),
        TaskKind::Classification { .. } => (0.0, 1.0),
    };
    let (mut train, mut test) = embed::<T>(task, weights)?;
    for layer in &weights.layers {
        train = feature_attention_pass(train, layer, config, kernel, options)?;
        test = feature_attention_pass(test, layer, config, kernel, options)?;
        test = cross_attention_pass(test, &train, layer, config, kernel, options)?;
        train = sample_self_attention_pass(train, layer, config, kernel, options)?;
        train = mlp_pass(train, layer)?;
        test = mlp_pass(test, layer)?;
    }
    drop(train);
    let logits = head(test, weights)?;
    let width = config.output.width();
    let rows: Vec<Vec<f64>> = logits
        .data()
        .chunks_exact(width)
        .map(|r| r.iter().map(|v| v.to_f64()).collect())
        .collect();
    Ok(match config.output {
        OutputKind::Classification { .. } => PredictiveDistribution::Classification {
            probs: rows.into_iter().map(|r| softmax(&r)).collect(),
        },
        OutputKind::Regression => PredictiveDistribution::Regression {
            mean: rows.into_iter().map(|r| r[0] * y_std + y_mean).collect(),
        },
    })
}

/// Mean over feature tokens, final norm and the linear head: `[1, 1, m, width]`.
fn head<T: Scalar>(test: Tensor<T>, weights: &WeightSet) -> Result<Tensor<T>> {
    let [_, m, p, d] = test.shape();
    let pooled = test
        .permute([0, 1, 3, 2])?
        .rowwise_reduce(Reduce::Sum)?
        .apply(Elementwise::Scale(T::ONE / T::from_f64(p as f64)))?
        .reshape([1, 1, m, d])?;
    let normed = layers::layer_norm(&pooled, &weights.head.norm)?;
    let w = weights.head.w.cast::<T>();
    batched_matmul(&normed, &w)?.apply(Elementwise::Add(&weights.head.b.cast::<T>()))
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}
