//! Exact tiled scaled-dot-product attention with a streaming log-sum-exp
//! merge, embedded in a miniature in-context tabular transformer.
//!
//! - [`tensor`]: four-axis dense tensors and the handful of ops the kernels need.
//! - [`attention`]: the double-precision oracle, the tiled kernel and FLOP accounting.
//! - [`memory`]: analytic and tracked peak activation memory.
//! - [`model`]: the set-structured transformer and its weight file format.
//! - [`harness`]: synthetic tasks, metrics and the context-length scaling sweep.

pub mod attention;
pub mod error;
pub mod harness;
pub mod memory;
pub mod model;
pub mod tensor;

pub use attention::{
    chunked_attention, chunked_attention_with, flop_count, lse_merge_step, max_relative_error, monolithic_attention,
    reference_attention, FlopReport, KernelOptions, MergeState, TileConfig,
};
pub use error::{Error, Result};
pub use harness::{ScalingOptions, ScalingRecord, SyntheticKind, SyntheticTaskSpec, Variant};
pub use memory::{analytic_peak, measure_chunked, with_tracking, MemoryReport};
pub use model::{
    forward, forward_with, AttentionKernel, Matrix, ModelConfig, OutputKind, PredictiveDistribution, TabularTask,
    TaskKind, WeightSet,
};
pub use tensor::{batched_matmul, DType, Elementwise, Reduce, Scalar, Seed, Shape, Tensor};
