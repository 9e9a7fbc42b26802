//! Fixtures shared by the criterion benches.

use tilepfn::harness::{gen_task, SyntheticTask};
use tilepfn::{ModelConfig, OutputKind, Result, Seed, Shape, SyntheticKind, SyntheticTaskSpec, Tensor, WeightSet};

/// Standard-normal query, key and value tensors with a shared head dimension.
pub fn qkv(batch: usize, heads: usize, query_len: usize, key_len: usize, head_dim: usize) -> [Tensor<f32>; 3] {
    let q: Shape = [batch, heads, query_len, head_dim];
    let kv: Shape = [batch, heads, key_len, head_dim];
    [
        Tensor::randn(q, Seed(1)),
        Tensor::randn(kv, Seed(2)),
        Tensor::randn(kv, Seed(3)),
    ]
}

/// A linear regression task and random weights for a small model.
pub fn regression_fixture(n: usize, m: usize, p: usize) -> Result<(SyntheticTask, WeightSet)> {
    let spec = SyntheticTaskSpec {
        seed: Seed(0),
        n_total: n,
        m,
        p,
        kind: SyntheticKind::LinearRegression,
        noise_std: 0.1,
    };
    let task = gen_task(&spec)?;
    let weights = WeightSet::init(&ModelConfig::new(16, 4, 2, OutputKind::Regression, Seed(0)))?;
    Ok((task, weights))
}
