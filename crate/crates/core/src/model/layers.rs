use crate::attention::{chunked_attention_with, monolithic_attention, KernelOptions, TileConfig};
use crate::error::Result;
use crate::model::weights::{AttentionWeights, LayerWeights, Norm, WeightSet};
use crate::model::{column_stats, mean_std, standardize, ModelConfig, OutputKind, TabularTask, TaskKind};
use crate::tensor::{batched_matmul, Elementwise, Scalar, Tensor};

/// Which attention implementation the model calls.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionKernel {
    Chunked(TileConfig),
    /// Materializes the full score matrix.
    Monolithic,
}

impl AttentionKernel {
    fn run<T: Scalar>(
        &self,
        q: &Tensor<T>,
        k: &Tensor<T>,
        v: &Tensor<T>,
        options: &KernelOptions,
    ) -> Result<Tensor<T>> {
        match self {
            AttentionKernel::Chunked(tiles) => chunked_attention_with(q, k, v, *tiles, options),
            AttentionKernel::Monolithic => monolithic_attention(q, k, v),
        }
    }
}

/// Which token axis attention runs along.
#[derive(Debug, Clone, Copy)]
enum Regime {
    /// Batch = samples, sequence = features.
    Features,
    /// Batch = features, sequence = samples.
    Samples,
}

/// Tokens `[1, samples, features, d_model]` for train and test rows.
///
/// Features are z-scored with train statistics. Each cell becomes
/// `x * feature_w + feature_b`, with one embedding vector shared by every
/// column and no positional term on either axis. Train tokens add the
/// embedding of their row's label; test tokens add the missing-label
/// embedding.
pub fn embed<T: Scalar>(task: &TabularTask, w: &WeightSet) -> Result<(Tensor<T>, Tensor<T>)> {
    task.validate()?;
    let d = w.config.d_model;
    let stats = column_stats(&task.train_x);
    let train_x = standardize(&task.train_x, &stats);
    let test_x = standardize(&task.test_x, &stats);
    let (y_mean, y_std) = match task.kind {
        TaskKind::Regression => mean_std(&task.train_y),
        TaskKind::Classification { .. } => (0.0, 1.0),
    };
    let fw = w.embed.feature_w.data();
    let fb = w.embed.feature_b.data();
    let table = w.embed.label.data();

    let label_vec = |y: f64| -> Vec<f32> {
        match w.config.output {
            OutputKind::Classification { .. } => {
                let c = y as usize;
                table[c * d..(c + 1) * d].to_vec()
            }
            OutputKind::Regression => {
                let yn = ((y - y_mean) / y_std) as f32;
                (0..d).map(|k| yn * table[k] + table[d + k]).collect()
            }
        }
    };
    let tokens = |x: &crate::model::Matrix, extra: &dyn Fn(usize) -> Vec<f32>| -> Result<Tensor<T>> {
        let mut data = Vec::with_capacity(x.rows * x.cols * d);
        for i in 0..x.rows {
            let e = extra(i);
            for &v in x.row(i) {
                let v = v as f32;
                data.extend((0..d).map(|k| T::from_f64((v * fw[k] + fb[k] + e[k]) as f64)));
            }
        }
        Tensor::from_vec([1, x.rows, x.cols, d], data)
    };
    let train = tokens(&train_x, &|i| label_vec(task.train_y[i]))?;
    let missing = w.embed.missing_label.data().to_vec();
    let test = tokens(&test_x, &|_| missing.clone())?;
    Ok((train, test))
}

pub(crate) fn layer_norm<T: Scalar>(x: &Tensor<T>, norm: &Norm) -> Result<Tensor<T>> {
    let d = x.shape()[3];
    let gamma = norm.gamma.cast::<T>();
    let beta = norm.beta.cast::<T>();
    let eps = T::from_f64(1e-5);
    let n = T::from_f64(d as f64);
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(d) {
        let mean = row.iter().fold(T::ZERO, |a, &v| a + v) / n;
        let var = row.iter().fold(T::ZERO, |a, &v| a + (v - mean) * (v - mean)) / n;
        let inv = T::ONE / (var + eps).sqrt();
        for ((v, &g), &b) in row.iter_mut().zip(gamma.data()).zip(beta.data()) {
            *v = (*v - mean) * inv * g + b;
        }
    }
    Ok(out)
}

/// `x @ w` over the last axis of a `[1, S, F, D_in]` tensor.
fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<f32>) -> Result<Tensor<T>> {
    let [a, s, f, d_in] = x.shape();
    let d_out = w.shape()[3];
    let flat = x.clone().reshape([1, 1, a * s * f, d_in])?;
    batched_matmul(&flat, &w.cast::<T>())?.reshape([a, s, f, d_out])
}

fn split_heads<T: Scalar>(x: Tensor<T>, heads: usize, regime: Regime) -> Result<Tensor<T>> {
    let [_, s, f, d] = x.shape();
    let x = x.reshape([s, f, heads, d / heads])?;
    match regime {
        Regime::Features => x.permute([0, 2, 1, 3]),
        Regime::Samples => x.permute([1, 2, 0, 3]),
    }
}

fn merge_heads<T: Scalar>(o: Tensor<T>, regime: Regime) -> Result<Tensor<T>> {
    let o = match regime {
        Regime::Features => o.permute([0, 2, 1, 3])?,
        Regime::Samples => o.permute([2, 0, 1, 3])?,
    };
    let [s, f, h, dk] = o.shape();
    o.reshape([1, s, f, h * dk])
}

#[allow(clippy::too_many_arguments)]
fn attend<T: Scalar>(
    queries: &Tensor<T>,
    context: &Tensor<T>,
    w: &AttentionWeights,
    config: &ModelConfig,
    regime: Regime,
    kernel: &AttentionKernel,
    options: &KernelOptions,
) -> Result<Tensor<T>> {
    let h = config.num_heads;
    let q = split_heads(linear(queries, &w.wq)?, h, regime)?;
    let k = split_heads(linear(context, &w.wk)?, h, regime)?;
    let v = split_heads(linear(context, &w.wv)?, h, regime)?;
    let o = kernel.run(&q, &k, &v, options)?;
    drop((q, k, v));
    linear(&merge_heads(o, regime)?, &w.wo)
}

/// Attention among each sample's feature tokens (batch = samples, length = features).
pub fn feature_attention_pass<T: Scalar>(
    tokens: Tensor<T>,
    layer: &LayerWeights,
    config: &ModelConfig,
    kernel: &AttentionKernel,
    options: &KernelOptions,
) -> Result<Tensor<T>> {
    let normed = layer_norm(&tokens, &layer.feature_norm)?;
    let update = attend(
        &normed,
        &normed,
        &layer.feature_attn,
        config,
        Regime::Features,
        kernel,
        options,
    )?;
    tokens.apply(Elementwise::Add(&update))
}

/// Train tokens attend over all train tokens (batch = features, length = n).
pub fn sample_self_attention_pass<T: Scalar>(
    train: Tensor<T>,
    layer: &LayerWeights,
    config: &ModelConfig,
    kernel: &AttentionKernel,
    options: &KernelOptions,
) -> Result<Tensor<T>> {
    let normed = layer_norm(&train, &layer.sample_norm)?;
    let update = attend(
        &normed,
        &normed,
        &layer.sample_attn,
        config,
        Regime::Samples,
        kernel,
        options,
    )?;
    train.apply(Elementwise::Add(&update))
}

/// Test tokens attend over the train tokens only; test rows never see each other.
pub fn cross_attention_pass<T: Scalar>(
    test: Tensor<T>,
    train: &Tensor<T>,
    layer: &LayerWeights,
    config: &ModelConfig,
    kernel: &AttentionKernel,
    options: &KernelOptions,
) -> Result<Tensor<T>> {
    let queries = layer_norm(&test, &layer.sample_norm)?;
    let context = layer_norm(train, &layer.sample_norm)?;
    let update = attend(
        &queries,
        &context,
        &layer.sample_attn,
        config,
        Regime::Samples,
        kernel,
        options,
    )?;
    test.apply(Elementwise::Add(&update))
}

/// Per-token `x + W2 relu(W1 norm(x) + b1) + b2`.
pub fn mlp_pass<T: Scalar>(tokens: Tensor<T>, layer: &LayerWeights) -> Result<Tensor<T>> {
    let normed = layer_norm(&tokens, &layer.mlp_norm)?;
    let mut hidden = linear(&normed, &layer.mlp.w1)?.apply(Elementwise::Add(&layer.mlp.b1.cast::<T>()))?;
    for v in hidden.data_mut() {
        if *v < T::ZERO {
            *v = T::ZERO;
        }
    }
    let out = linear(&hidden, &layer.mlp.w2)?.apply(Elementwise::Add(&layer.mlp.b2.cast::<T>()))?;
    tokens.apply(Elementwise::Add(&out))
}
