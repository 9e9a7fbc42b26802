use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Matrix, TabularTask, TaskKind};
use crate::tensor::Seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticKind {
    /// `y = w·x + e`
    LinearRegression,
    /// `y = 1[sigmoid(w·x + e) > 1/2]`, two classes.
    LogisticClassification,
    /// Sum of axis-aligned steps `h_j * 1[x_j > t_j]` plus noise.
    Piecewise,
}

impl SyntheticKind {
    pub fn task_kind(self) -> TaskKind {
        match self {
            SyntheticKind::LogisticClassification => TaskKind::Classification { num_classes: 2 },
            SyntheticKind::LinearRegression | SyntheticKind::Piecewise => TaskKind::Regression,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SyntheticKind::LinearRegression => "linear",
            SyntheticKind::LogisticClassification => "logistic",
            SyntheticKind::Piecewise => "piecewise",
        }
    }
}

impl fmt::Display for SyntheticKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" | "linear-regression" => Ok(SyntheticKind::LinearRegression),
            "logistic" | "logistic-classification" => Ok(SyntheticKind::LogisticClassification),
            "piecewise" => Ok(SyntheticKind::Piecewise),
            other => Err(Error::config(format!(
                "unknown task kind `{other}` (expected linear, logistic or piecewise)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticTaskSpec {
    pub seed: Seed,
    /// Train rows generated; every requested context length must fit.
    pub n_total: usize,
    /// Test rows.
    pub m: usize,
    pub p: usize,
    pub kind: SyntheticKind,
    pub noise_std: f64,
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_total == 0 || self.m == 0 || self.p == 0 {
            return Err(Error::config(format!(
                "synthetic task needs n_total, m, p >= 1: {self:?}"
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::config(format!(
                "noise_std must be finite and >= 0, got {}",
                self.noise_std
            )));
        }
        Ok(())
    }

    /// Stable identifier used in benchmark records.
    pub fn dataset_id(&self) -> String {
        format!("{}-p{}-seed{}", self.kind, self.p, self.seed.0)
    }
}

/// A generated task together with its test targets and generating rule.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub task: TabularTask,
    pub test_y: Vec<f64>,
    /// Weight vector `w`, or step heights for piecewise tasks.
    pub coefficients: Vec<f64>,
    /// Step thresholds for piecewise tasks, empty otherwise.
    pub thresholds: Vec<f64>,
}

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Deterministic given the spec. Features are iid standard normal.
pub fn gen_task(spec: &SyntheticTaskSpec) -> Result<SyntheticTask> {
    spec.validate()?;
    let p = spec.p;
    let mut rule_rng = spec.seed.derive(0).rng();
    let coefficients: Vec<f64> = (0..p).map(|_| normal(&mut rule_rng) / (p as f64).sqrt()).collect();
    let thresholds: Vec<f64> = match spec.kind {
        SyntheticKind::Piecewise => (0..p).map(|_| 0.5 * normal(&mut rule_rng)).collect(),
        _ => Vec::new(),
    };

    let mut x_rng = spec.seed.derive(1).rng();
    let mut noise_rng = spec.seed.derive(2).rng();
    let mut rows = |count: usize| -> (Matrix, Vec<f64>) {
        let data: Vec<f64> = (0..count * p).map(|_| normal(&mut x_rng)).collect();
        let y = data
            .chunks_exact(p)
            .map(|x| {
                let e = spec.noise_std * normal(&mut noise_rng);
                label(spec.kind, x, &coefficients, &thresholds, e)
            })
            .collect();
        (
            Matrix {
                rows: count,
                cols: p,
                data,
            },
            y,
        )
    };
    let (train_x, train_y) = rows(spec.n_total);
    let (test_x, test_y) = rows(spec.m);
    let task = TabularTask::new(train_x, train_y, test_x, spec.kind.task_kind())?;
    Ok(SyntheticTask {
        task,
        test_y,
        coefficients,
        thresholds,
    })
}

fn label(kind: SyntheticKind, x: &[f64], w: &[f64], t: &[f64], noise: f64) -> f64 {
    let dot: f64 = x.iter().zip(w).map(|(a, b)| a * b).sum();
    match kind {
        SyntheticKind::LinearRegression => dot + noise,
        SyntheticKind::LogisticClassification => {
            let prob = 1.0 / (1.0 + (-(dot + noise)).exp());
            if prob > 0.5 {
                1.0
            } else {
                0.0
            }
        }
        SyntheticKind::Piecewise => {
            x.iter()
                .zip(w)
                .zip(t)
                .map(|((xj, h), tj)| if xj > tj { *h } else { 0.0 })
                .sum::<f64>()
                + noise
        }
    }
}

/// One fixed shuffle of the train rows; a context of length `n` is its first `n` entries.
pub fn context_order(spec: &SyntheticTaskSpec) -> Vec<usize> {
    let mut order: Vec<usize> = (0..spec.n_total).collect();
    order.shuffle(&mut spec.seed.derive(3).rng());
    order
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: SyntheticKind, noise_std: f64) -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            seed: Seed(9),
            n_total: 64,
            m: 16,
            p: 3,
            kind,
            noise_std,
        }
    }

    #[test]
    fn same_spec_same_task() {
        for kind in [
            SyntheticKind::LinearRegression,
            SyntheticKind::LogisticClassification,
            SyntheticKind::Piecewise,
        ] {
            assert_eq!(gen_task(&spec(kind, 0.3)).unwrap(), gen_task(&spec(kind, 0.3)).unwrap());
        }
    }

    #[test]
    fn noise_free_linear_duplicate_rows() {
        let s = spec(SyntheticKind::LinearRegression, 0.0);
        let g = gen_task(&s).unwrap();
        let mut x = g.task.train_x.clone();
        let first = x.row(0).to_vec();
        x.data[3..6].copy_from_slice(&first);
        let y = |i: usize| label(s.kind, x.row(i), &g.coefficients, &g.thresholds, 0.0);
        assert_eq!(y(0).to_bits(), y(1).to_bits());
        assert_eq!(y(0).to_bits(), g.task.train_y[0].to_bits());
    }

    #[test]
    fn noise_free_linear_is_exact_dot() {
        let g = gen_task(&spec(SyntheticKind::LinearRegression, 0.0)).unwrap();
        for i in 0..g.task.num_train() {
            let dot: f64 = g
                .task
                .train_x
                .row(i)
                .iter()
                .zip(&g.coefficients)
                .map(|(a, b)| a * b)
                .sum();
            assert_eq!(dot, g.task.train_y[i]);
        }
    }

    #[test]
    fn logistic_labels_follow_sign() {
        let g = gen_task(&spec(SyntheticKind::LogisticClassification, 0.0)).unwrap();
        let check = |x: &Matrix, y: &[f64]| {
            for (i, &label) in y.iter().enumerate() {
                let dot: f64 = x.row(i).iter().zip(&g.coefficients).map(|(a, b)| a * b).sum();
                assert_eq!(label, if dot > 0.0 { 1.0 } else { 0.0 }, "row {i}");
            }
        };
        check(&g.task.train_x, &g.task.train_y);
        check(&g.task.test_x, &g.test_y);
        assert!(g.task.train_y.contains(&0.0) && g.task.train_y.contains(&1.0));
    }

    #[test]
    fn piecewise_takes_step_values() {
        let g = gen_task(&spec(SyntheticKind::Piecewise, 0.0)).unwrap();
        for i in 0..g.task.num_train() {
            let x = g.task.train_x.row(i);
            let want: f64 = (0..3)
                .filter(|&j| x[j] > g.thresholds[j])
                .map(|j| g.coefficients[j])
                .sum();
            assert_eq!(g.task.train_y[i], want);
        }
    }

    #[test]
    fn order_is_a_permutation() {
        let s = spec(SyntheticKind::LinearRegression, 0.0);
        let mut order = context_order(&s);
        assert_eq!(order, context_order(&s));
        order.sort_unstable();
        assert_eq!(order, (0..64).collect::<Vec<_>>());
    }

    #[test]
    fn rejects_negative_noise() {
        assert!(gen_task(&spec(SyntheticKind::LinearRegression, -0.1)).is_err());
    }

    #[test]
    fn kind_parses() {
        assert_eq!(
            "linear".parse::<SyntheticKind>().unwrap(),
            SyntheticKind::LinearRegression
        );
        assert!("tree".parse::<SyntheticKind>().is_err());
    }
}
