use crate::error::{Error, Result};
use crate::model::{ModelConfig, OutputKind, WeightSet};
use crate::tensor::Tensor;

/// Channel layout of the first attention head.
const X: usize = 0;
const Y: usize = 2;
const BIAS: usize = 4;
const EST: usize = 6;

/// Large constant carried by every token so layer norm acts as a fixed rescale.
const CARRIER: f32 = 100.0;

/// Logits are `TILT * x* * x`; the head divides the estimate by `TILT` again.
const TILT: f32 = 0.5;

fn set(t: &mut Tensor<f32>, row: usize, col: usize, value: f32) {
    let cols = t.shape()[3];
    t.data_mut()[row * cols + col] = value;
}

impl WeightSet {
    /// Hand-set regression weights that make the first layer a kernel smoother.
    ///
    /// Each test cell `(i, j)` attends over train cells of column `j` with
    /// logits `t * x*_ij * x_kj` and averages their standardized targets. For
    /// standard-normal features and linear targets this exponentially tilted
    /// average converges to `t * E[y | x_j = x*_ij]` as the context grows, and
    /// the head sums the per-column estimates divided by `t`, which recovers
    /// `y`. Every other block is an identity. `num_features` sets the head's
    /// pooling correction.
    pub fn kernel_smoother(config: &ModelConfig, num_features: usize) -> Result<Self> {
        if config.output != OutputKind::Regression {
            return Err(Error::config("kernel smoother weights need a regression head"));
        }
        if config.head_dim() < 8 || num_features == 0 {
            return Err(Error::config(format!(
                "kernel smoother needs head_dim >= 8 and num_features >= 1, got {} and {num_features}",
                config.head_dim()
            )));
        }
        let mut w = WeightSet::blank(config)?;
        let sigma = CARRIER * (2.0 / config.d_model as f32).sqrt();

        // Token = [x, -x, y, -y, C, -C, est, -est, 0...]: zero mean, and the
        // carrier dominates the variance.
        set(&mut w.embed.feature_w, 0, X, 1.0);
        set(&mut w.embed.feature_w, 0, X + 1, -1.0);
        set(&mut w.embed.feature_b, 0, BIAS, CARRIER);
        set(&mut w.embed.feature_b, 0, BIAS + 1, -CARRIER);
        set(&mut w.embed.label, 0, Y, 1.0);
        set(&mut w.embed.label, 0, Y + 1, -1.0);

        // Layer norm divides by roughly C * sqrt(2 / d_model); undo that.
        let attn = &mut w.layers[0].sample_attn;
        set(&mut attn.wq, X, 0, TILT * sigma * (config.head_dim() as f32).sqrt());
        set(&mut attn.wk, X, 0, sigma);
        set(&mut attn.wv, Y, EST, sigma);
        set(&mut attn.wo, EST, EST, 1.0);
        set(&mut attn.wo, EST, EST + 1, -1.0);

        set(&mut w.head.w, EST, 0, sigma * num_features as f32 / TILT);
        Ok(w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::TileConfig;
    use crate::model::{forward, Matrix, TabularTask, TaskKind};
    use crate::tensor::Seed;

    fn config() -> ModelConfig {
        ModelConfig::new(8, 1, 1, OutputKind::Regression, Seed(0))
    }

    #[test]
    fn rejects_unsupported_configs() {
        let cls = ModelConfig::new(8, 1, 1, OutputKind::Classification { num_classes: 2 }, Seed(0));
        assert!(WeightSet::kernel_smoother(&cls, 2).is_err());
        let narrow = ModelConfig::new(8, 2, 1, OutputKind::Regression, Seed(0));
        assert!(WeightSet::kernel_smoother(&narrow, 2).is_err());
    }

    #[test]
    fn identical_train_rows_are_reproduced() {
        // Every train row is (x, y) = (1, 5); any weighting averages to 5.
        let train = Matrix::new(4, 1, vec![1.0; 4]).unwrap();
        let test = Matrix::new(2, 1, vec![0.3, -2.0]).unwrap();
        let task = TabularTask::new(train, vec![5.0; 4], test, TaskKind::Regression).unwrap();
        let w = WeightSet::kernel_smoother(&config(), 1).unwrap();
        let out = forward(&task, &w, TileConfig::default()).unwrap().flat();
        for v in out {
            assert!((v - 5.0).abs() < 1e-4, "{v}");
        }
    }

    #[test]
    fn weights_follow_similarity() {
        // Two train points with standardized x = -1 and +1; a test query at
        // x* weights them e^{-t x*} and e^{t x*}, so the estimate is tanh(t x*) / t.
        let train = Matrix::new(2, 1, vec![-1.0, 1.0]).unwrap();
        let test = Matrix::new(3, 1, vec![-1.0, 0.0, 1.0]).unwrap();
        let task = TabularTask::new(train, vec![-1.0, 1.0], test, TaskKind::Regression).unwrap();
        let w = WeightSet::kernel_smoother(&config(), 1).unwrap();
        let out = forward(&task, &w, TileConfig::default()).unwrap().flat();
        let t = TILT as f64;
        for (x, got) in [-1.0f64, 0.0, 1.0].iter().zip(out) {
            let want = (t * x).tanh() / t;
            assert!((got - want).abs() < 2e-3, "x*={x}: {got} vs {want}");
        }
    }
}
