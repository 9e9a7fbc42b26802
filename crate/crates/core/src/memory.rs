//! Peak activation memory: an analytic model and a scoped allocation tracker.
//!
//! Every [`Tensor`](crate::Tensor) buffer registers its byte size with the
//! tracker of the thread that created it. A tracking scope records the
//! high-water mark of bytes that were allocated *inside* the scope and are
//! still alive; buffers that existed before the scope opened (the kernel
//! inputs) are never counted, even if they are dropped inside it.
//!
//! Scopes are per thread and may not nest. Kernels refuse to fan out to
//! worker threads while a scope is open, since those allocations would be
//! invisible to it.

use std::cell::RefCell;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::attention::{chunked_attention_with, KernelOptions, TileConfig};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

static NEXT_SCOPE_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, Copy)]
struct Scope {
    id: u64,
    live: u64,
    peak: u64,
}

thread_local! {
    static ACTIVE: RefCell<Option<Scope>> = const { RefCell::new(None) };
}

/// Tag stored in each tensor: the id of the scope that saw its allocation, or 0.
pub(crate) fn register(bytes: usize) -> u64 {
    ACTIVE.with(|cell| match cell.borrow_mut().as_mut() {
        Some(scope) => {
            scope.live += bytes as u64;
            scope.peak = scope.peak.max(scope.live);
            scope.id
        }
        None => 0,
    })
}

pub(crate) fn release(tag: u64, bytes: usize) {
    if tag == 0 {
        return;
    }
    // try_with: tensors may be dropped during thread-local destruction.
    let _ = ACTIVE.try_with(|cell| {
        if let Some(scope) = cell.borrow_mut().as_mut() {
            if scope.id == tag {
                scope.live = scope.live.saturating_sub(bytes as u64);
            }
        }
    });
}

/// Whether a tracking scope is open on the calling thread.
pub fn tracking_active() -> bool {
    ACTIVE.with(|cell| cell.borrow().is_some())
}

struct ScopeGuard;

impl Drop for ScopeGuard {
    fn drop(&mut self) {
        ACTIVE.with(|cell| cell.borrow_mut().take());
    }
}

/// Runs `f` inside a fresh tracking scope and returns its result with the
/// peak of live tracked bytes observed during the call.
///
/// Fails with [`Error::Instrumentation`] if a scope is already open on this
/// thread.
pub fn with_tracking<R>(f: impl FnOnce() -> R) -> Result<(R, u64)> {
    ACTIVE.with(|cell| {
        let mut slot = cell.borrow_mut();
        if slot.is_some() {
            return Err(Error::Instrumentation(
                "tracking scope re-entered on the same thread".into(),
            ));
        }
        *slot = Some(Scope {
            id: NEXT_SCOPE_ID.fetch_add(1, Ordering::Relaxed),
            live: 0,
            peak: 0,
        });
        Ok(())
    })?;
    let guard = ScopeGuard;
    let out = f();
    let peak = ACTIVE.with(|cell| cell.borrow().map(|s| s.peak).unwrap_or(0));
    drop(guard);
    Ok((out, peak))
}

/// Analytic peak activation bytes of one chunked-attention tile step:
/// the logits tile `l*r`, the query tile and accumulator `2*l*d_k`, one
/// key/value tile `r*d_k`, and the running max and exp-sum columns `2*l`,
/// for each of `batch * heads` independent rows.
pub fn analytic_peak(
    batch: usize,
    heads: usize,
    query_tile: usize,
    kv_tile: usize,
    head_dim: usize,
    bytes_per_scalar: usize,
) -> u64 {
    let (b, h, l, r, d) = (
        batch as u64,
        heads as u64,
        query_tile as u64,
        kv_tile as u64,
        head_dim as u64,
    );
    bytes_per_scalar as u64 * b * h * (l * r + 2 * l * d + r * d + 2 * l)
}

/// One metered chunked-attention call.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryReport {
    #[serde(rename = "B")]
    pub batch: usize,
    #[serde(rename = "H")]
    pub heads: usize,
    #[serde(rename = "Lq")]
    pub query_len: usize,
    #[serde(rename = "Lk")]
    pub key_len: usize,
    #[serde(rename = "dk")]
    pub head_dim: usize,
    #[serde(rename = "l")]
    pub query_tile: usize,
    #[serde(rename = "r")]
    pub kv_tile: usize,
    #[serde(rename = "m")]
    pub batch_tile: usize,
    /// High-water mark of live tracked bytes, output buffer included.
    pub tracked_peak: u64,
    /// Analytic prediction for the effective (clamped) tile sizes.
    pub analytic_peak: u64,
    pub output_bytes: u64,
}

impl MemoryReport {
    /// Tracked peak with the output buffer removed.
    pub fn transient_peak(&self) -> u64 {
        self.tracked_peak.saturating_sub(self.output_bytes)
    }

    pub const CSV_HEADER: &'static str = "B,H,Lq,Lk,dk,l,r,m,tracked_peak,analytic_peak,output_bytes";

    /// The report as one CSV row in [`Self::CSV_HEADER`] column order.
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.batch,
            self.heads,
            self.query_len,
            self.key_len,
            self.head_dim,
            self.query_tile,
            self.kv_tile,
            self.batch_tile,
            self.tracked_peak,
            self.analytic_peak,
            self.output_bytes
        )
    }
}

/// Runs the chunked kernel in deterministic mode under a tracking scope.
///
/// The kernel allocates its output buffer before any tile work, so the
/// output is live for the whole call and [`MemoryReport::transient_peak`]
/// isolates the per-tile working set.
pub fn measure_chunked<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    tiles: TileConfig,
) -> Result<(Tensor<T>, MemoryReport)> {
    let options = KernelOptions::deterministic();
    let (out, tracked_peak) = with_tracking(|| chunked_attention_with(q, k, v, tiles, &options))?;
    let out = out?;
    let [batch, heads, query_len, head_dim] = q.shape();
    let key_len = k.shape()[2];
    let eff = tiles.effective(batch, query_len, key_len);
    let report = MemoryReport {
        batch,
        heads,
        query_len,
        key_len,
        head_dim,
        query_tile: tiles.query_tile,
        kv_tile: tiles.kv_tile,
        batch_tile: tiles.batch_tile.unwrap_or(batch),
        tracked_peak,
        analytic_peak: analytic_peak(
            eff.batch_tile,
            heads,
            eff.query_tile,
            eff.kv_tile,
            head_dim,
            T::DTYPE.size_bytes(),
        ),
        output_bytes: out.size_bytes() as u64,
    };
    Ok((out, report))
}
