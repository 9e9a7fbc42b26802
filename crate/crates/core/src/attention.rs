//! Scaled dot-product attention: a monolithic reference and an exact tiled
//! kernel that streams key/value tiles through a log-sum-exp merge.
//!
//! For a fixed query tile the kernel keeps, per query row, a running max
//! `mu`, an exp-sum `s` and a weighted accumulator `a`. Each key/value tile
//! with scaled logits `Z` updates them as
//!
//! ```text
//! mu' = max(mu, rowmax(Z))
//! s   = s * exp(mu - mu') + rowsum(exp(Z - mu'))
//! a   = a * exp(mu - mu') + exp(Z - mu') @ V
//! mu  = mu'
//! ```
//!
//! and the tile output is `a / s`. Only `query_tile x kv_tile` logits are
//! ever live, so peak memory follows the tile sizes, not the sequence
//! lengths. Nothing on this path is stochastic; dropout, if ever needed,
//! belongs after the final division.
//!
//! The running statistics live in the same dtype as the logits. `mu`
//! starts at negative infinity; the first merge step writes `s` and `a`
//! directly instead of rescaling zeros by `exp(-inf - mu')`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::memory;
use crate::tensor::{batched_matmul, Elementwise, Reduce, Scalar, Shape, Tensor};

/// Tile sizes along the query, key/value and batch axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TileConfig {
    pub query_tile: usize,
    pub kv_tile: usize,
    /// `None` processes the whole batch at once.
    pub batch_tile: Option<usize>,
}

impl Default for TileConfig {
    fn default() -> Self {
        TileConfig {
            query_tile: 512,
            kv_tile: 2048,
            batch_tile: Some(8),
        }
    }
}

/// Tile sizes clamped to the actual tensor extents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EffectiveTiles {
    pub batch_tile: usize,
    pub query_tile: usize,
    pub kv_tile: usize,
}

impl TileConfig {
    pub fn new(query_tile: usize, kv_tile: usize, batch_tile: Option<usize>) -> Self {
        TileConfig {
            query_tile,
            kv_tile,
            batch_tile,
        }
    }

    /// A single tile along every axis, whatever the shapes.
    pub fn untiled() -> Self {
        TileConfig::new(usize::MAX, usize::MAX, None)
    }

    pub fn validate(&self) -> Result<()> {
        if self.query_tile == 0 || self.kv_tile == 0 || self.batch_tile == Some(0) {
            return Err(Error::config(format!(
                "tile sizes must be >= 1, got query {} kv {} batch {:?}",
                self.query_tile, self.kv_tile, self.batch_tile
            )));
        }
        Ok(())
    }

    pub fn effective(&self, batch: usize, query_len: usize, key_len: usize) -> EffectiveTiles {
        EffectiveTiles {
            batch_tile: self.batch_tile.unwrap_or(batch).min(batch).max(1),
            query_tile: self.query_tile.min(query_len).max(1),
            kv_tile: self.kv_tile.min(key_len).max(1),
        }
    }
}

/// Test hooks that corrupt the kernel on purpose, for negative controls.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultInjection {
    /// Uses `exp(mu' - mu)` instead of `exp(mu - mu')` when rescaling.
    RescaleSignFlip,
}

#[derive(Debug, Clone, Default)]
pub struct KernelOptions {
    /// Evaluate independent (batch tile, query tile) pairs on the rayon pool.
    /// Outputs are bit-identical to the sequential order.
    pub parallel: bool,
    #[doc(hidden)]
    pub fault: Option<FaultInjection>,
}

impl KernelOptions {
    pub fn deterministic() -> Self {
        KernelOptions::default()
    }

    pub fn parallel() -> Self {
        KernelOptions {
            parallel: true,
            fault: None,
        }
    }
}

/// Streaming softmax statistics for one query tile.
#[derive(Debug, Clone)]
pub struct MergeState<T: Scalar> {
    mu: Tensor<T>,
    s: Tensor<T>,
    a: Tensor<T>,
    consumed_keys: usize,
}

impl<T: Scalar> MergeState<T> {
    /// `mu = -inf`, `s = 0`, `a = 0` for `[batch, heads, rows]` query rows.
    pub fn new(batch: usize, heads: usize, rows: usize, value_dim: usize) -> Self {
        MergeState {
            mu: Tensor::full([batch, heads, rows, 1], T::NEG_INFINITY),
            s: Tensor::zeros([batch, heads, rows, 1]),
            a: Tensor::zeros([batch, heads, rows, value_dim]),
            consumed_keys: 0,
        }
    }

    pub fn mu(&self) -> &Tensor<T> {
        &self.mu
    }

    pub fn s(&self) -> &Tensor<T> {
        &self.s
    }

    pub fn a(&self) -> &Tensor<T> {
        &self.a
    }

    pub fn consumed_keys(&self) -> usize {
        self.consumed_keys
    }

    /// `a / s`: the softmax-weighted values over every key consumed so far.
    pub fn finalize(self) -> Result<Tensor<T>> {
        if self.consumed_keys == 0 {
            return Err(Error::EmptyContext);
        }
        self.a.apply(Elementwise::DivBroadcast(&self.s))
    }
}

/// Folds one tile of scaled logits `[B, H, rows, r]` and its values
/// `[B, H, r, d_v]` into `state`.
pub fn lse_merge_step<T: Scalar>(state: MergeState<T>, z_tile: Tensor<T>, v_tile: &Tensor<T>) -> Result<MergeState<T>> {
    merge_step(state, z_tile, v_tile, None)
}

fn merge_step<T: Scalar>(
    state: MergeState<T>,
    z_tile: Tensor<T>,
    v_tile: &Tensor<T>,
    fault: Option<FaultInjection>,
) -> Result<MergeState<T>> {
    let [zb, zh, rows, keys] = z_tile.shape();
    let [vb, vh, vk, _] = v_tile.shape();
    if state.mu.shape() != [zb, zh, rows, 1] {
        return Err(Error::Dimension {
            op: "lse_merge_step",
            axes: "state rows vs logit tile",
            lhs: state.mu.shape().to_vec(),
            rhs: z_tile.shape().to_vec(),
        });
    }
    if [vb, vh, vk] != [zb, zh, keys] || state.a.shape()[3] != v_tile.shape()[3] {
        return Err(Error::Dimension {
            op: "lse_merge_step",
            axes: "logit keys vs value tile",
            lhs: z_tile.shape().to_vec(),
            rhs: v_tile.shape().to_vec(),
        });
    }
    if let Some(index) = z_tile.has_nan() {
        return Err(Error::PoisonedLogit { index });
    }

    let MergeState {
        mu,
        s,
        a,
        consumed_keys,
    } = state;
    let mu_next = z_tile.rowwise_reduce(Reduce::Max)?.apply(Elementwise::Maximum(&mu))?;
    let p = z_tile
        .apply(Elementwise::SubBroadcast(&mu_next))?
        .apply(Elementwise::Exp)?;
    let tile_sum = p.rowwise_reduce(Reduce::Sum)?;
    let tile_acc = batched_matmul(&p, v_tile)?;
    drop(p);

    let (s, a) = if consumed_keys == 0 {
        (tile_sum, tile_acc)
    } else {
        let alpha = match fault {
            Some(FaultInjection::RescaleSignFlip) => mu_next.elementwise(Elementwise::SubBroadcast(&mu))?,
            None => mu.apply(Elementwise::SubBroadcast(&mu_next))?,
        }
        .apply(Elementwise::Exp)?;
        let s = s
            .apply(Elementwise::MulBroadcast(&alpha))?
            .apply(Elementwise::Add(&tile_sum))?;
        let a = a
            .apply(Elementwise::MulBroadcast(&alpha))?
            .apply(Elementwise::Add(&tile_acc))?;
        (s, a)
    };
    Ok(MergeState {
        mu: mu_next,
        s,
        a,
        consumed_keys: consumed_keys + keys,
    })
}

struct Dims {
    batch: usize,
    heads: usize,
    query_len: usize,
    key_len: usize,
    head_dim: usize,
    value_dim: usize,
}

fn check_shapes(q: Shape, k: Shape, v: Shape) -> Result<Dims> {
    let [b, h, lq, dk] = q;
    if k[0] != b || k[1] != h || v[0] != b || v[1] != h {
        return Err(Error::Dimension {
            op: "attention",
            axes: "batch/heads",
            lhs: q.to_vec(),
            rhs: k.to_vec(),
        });
    }
    if k[3] != dk {
        return Err(Error::Dimension {
            op: "attention",
            axes: "d_k (q axis 3 vs k axis 3)",
            lhs: q.to_vec(),
            rhs: k.to_vec(),
        });
    }
    if k[2] != v[2] {
        return Err(Error::Dimension {
            op: "attention",
            axes: "key length (k axis 2 vs v axis 2)",
            lhs: k.to_vec(),
            rhs: v.to_vec(),
        });
    }
    if k[2] == 0 {
        return Err(Error::EmptyContext);
    }
    if dk == 0 {
        return Err(Error::InvalidInput("head dimension must be >= 1".into()));
    }
    Ok(Dims {
        batch: b,
        heads: h,
        query_len: lq,
        key_len: k[2],
        head_dim: dk,
        value_dim: v[3],
    })
}

fn inv_sqrt_dim<T: Scalar>(head_dim: usize) -> T {
    T::ONE / T::from_f64(head_dim as f64).sqrt()
}

/// Single-pass attention in the working dtype: the full `L_q x L_k` score
/// matrix is materialized, row max subtracted, exponentiated and normalized.
pub fn monolithic_attention<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    let dims = check_shapes(q.shape(), k.shape(), v.shape())?;
    let scores =
        batched_matmul(q, &k.transpose_last2())?.apply(Elementwise::Scale(inv_sqrt_dim::<T>(dims.head_dim)))?;
    let row_max = scores.rowwise_reduce(Reduce::Max)?;
    let weights = scores
        .apply(Elementwise::SubBroadcast(&row_max))?
        .apply(Elementwise::Exp)?;
    let denom = weights.rowwise_reduce(Reduce::Sum)?;
    batched_matmul(&weights, v)?.apply(Elementwise::DivBroadcast(&denom))
}

/// Double-precision monolithic attention, the oracle for every tiled run.
pub fn reference_attention<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<f64>> {
    monolithic_attention(&q.cast::<f64>(), &k.cast::<f64>(), &v.cast::<f64>())
}

/// Exact tiled attention, deterministic single-threaded evaluation.
pub fn chunked_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    tiles: TileConfig,
) -> Result<Tensor<T>> {
    chunked_attention_with(q, k, v, tiles, &KernelOptions::deterministic())
}

#[derive(Debug, Clone, Copy)]
struct QueryBlock {
    batch_start: usize,
    batch_len: usize,
    row_start: usize,
    row_len: usize,
}

pub fn chunked_attention_with<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    tiles: TileConfig,
    options: &KernelOptions,
) -> Result<Tensor<T>> {
    tiles.validate()?;
    let dims = check_shapes(q.shape(), k.shape(), v.shape())?;
    if options.parallel && memory::tracking_active() {
        return Err(Error::Instrumentation(
            "parallel kernel evaluation inside a tracking scope".into(),
        ));
    }
    // Allocated up front so it is live for the whole call.
    let mut out = Tensor::zeros([dims.batch, dims.heads, dims.query_len, dims.value_dim]);
    let eff = tiles.effective(dims.batch, dims.query_len, dims.key_len);
    let scale = inv_sqrt_dim::<T>(dims.head_dim);

    let mut blocks = Vec::new();
    for batch_start in (0..dims.batch).step_by(eff.batch_tile) {
        for row_start in (0..dims.query_len).step_by(eff.query_tile) {
            blocks.push(QueryBlock {
                batch_start,
                batch_len: eff.batch_tile.min(dims.batch - batch_start),
                row_start,
                row_len: eff.query_tile.min(dims.query_len - row_start),
            });
        }
    }

    let run = |blk: &QueryBlock| query_block(q, k, v, blk, eff.kv_tile, dims.value_dim, scale, options.fault);
    if options.parallel {
        let results: Vec<Tensor<T>> = blocks.par_iter().map(run).collect::<Result<_>>()?;
        for (blk, o) in blocks.iter().zip(&results) {
            write_block(&mut out, blk, o)?;
        }
    } else {
        for blk in &blocks {
            let o = run(blk)?;
            write_block(&mut out, blk, &o)?;
        }
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn query_block<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    blk: &QueryBlock,
    kv_tile: usize,
    value_dim: usize,
    scale: T,
    fault: Option<FaultInjection>,
) -> Result<Tensor<T>> {
    let heads = q.shape()[1];
    let key_len = k.shape()[2];
    let q_tile = block(q, blk.batch_start, blk.batch_len, blk.row_start, blk.row_len)?;
    let mut state = MergeState::new(blk.batch_len, heads, blk.row_len, value_dim);
    for kv_start in (0..key_len).step_by(kv_tile) {
        let kv_len = kv_tile.min(key_len - kv_start);
        let k_t = block(k, blk.batch_start, blk.batch_len, kv_start, kv_len)?.transpose_last2();
        let z = batched_matmul(&q_tile, &k_t)?.apply(Elementwise::Scale(scale))?;
        drop(k_t);
        let v_tile = block(v, blk.batch_start, blk.batch_len, kv_start, kv_len)?;
        state = merge_step(state, z, &v_tile, fault)?;
    }
    state.finalize()
}

fn block<T: Scalar>(t: &Tensor<T>, b0: usize, bl: usize, r0: usize, rl: usize) -> Result<Tensor<T>> {
    t.block(b0, bl, r0, rl)
}

fn write_block<T: Scalar>(out: &mut Tensor<T>, blk: &QueryBlock, o: &Tensor<T>) -> Result<()> {
    let [_, heads, rows, width] = o.shape();
    let [_, _, out_rows, _] = out.shape();
    let data = out.data_mut();
    for b in 0..blk.batch_len {
        for h in 0..heads {
            let src = ((b * heads + h) * rows) * width;
            let dst = (((blk.batch_start + b) * heads + h) * out_rows + blk.row_start) * width;
            data[dst..dst + rows * width].copy_from_slice(&o.data()[src..src + rows * width]);
        }
    }
    Ok(())
}

/// Arithmetic cost of one attention call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlopReport {
    /// Multiply and add counted separately for both `QK^T` and `PV`.
    pub matmul_flops: u64,
    /// One per logit, plus one rescale per query row for every KV tile after the first.
    pub exp_evals: u64,
}

pub fn flop_count(q_shape: Shape, k_shape: Shape, v_shape: Shape, tiles: TileConfig) -> FlopReport {
    let [b, h, lq, dk] = q_shape.map(|x| x as u64);
    let lk = k_shape[2] as u64;
    let dv = v_shape[3] as u64;
    let rows = b * h * lq;
    let r = (tiles.kv_tile as u64).min(lk).max(1);
    let kv_tiles = lk.div_ceil(r);
    FlopReport {
        matmul_flops: 2 * rows * lk * dk + 2 * rows * lk * dv,
        exp_evals: rows * lk + rows * kv_tiles.saturating_sub(1),
    }
}

/// `max |got - reference| / max(1, |reference|)` over all elements.
pub fn max_relative_error<T: Scalar>(got: &Tensor<T>, reference: &Tensor<f64>) -> f64 {
    assert_eq!(got.shape(), reference.shape(), "max_relative_error: shape mismatch");
    got.data()
        .iter()
        .zip(reference.data())
        .map(|(&g, &r)| (g.to_f64() - r).abs() / r.abs().max(1.0))
        .fold(0.0, f64::max)
}
