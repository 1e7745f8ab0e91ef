//! Synthetic data: low-rank matrix targets and the toy regression task.

use super::config::{ExperimentConfig, InputDistribution, Teacher};
use crate::error::Result;
use crate::oracle::svd;
use crate::tensor::{Matrix, Rng};
use crate::trainer::Dataset;

// RNG streams, forked from `Rng::new(seed)`
const STREAM_TARGET: u64 = 10;
const STREAM_BASE: u64 = 11;
const STREAM_TRAIN_X: u64 = 12;
const STREAM_TEST_X: u64 = 13;
pub(crate) const STREAM_ADAPTER: u64 = 20;

/// Frozen base, training data and held-out test data; samples are columns.
#[derive(Debug, Clone)]
pub struct Task {
    pub w0: Matrix,
    pub train: Dataset,
    pub test_x: Matrix,
    pub test_y: Matrix,
}

pub fn sample_inputs(config: &ExperimentConfig, rng: &mut Rng, n: usize) -> Matrix {
    let d = config.dims.d_in;
    match config.target.input {
        InputDistribution::Gaussian => Matrix::randn(rng, d, n, 1.0),
        InputDistribution::Bounded => Matrix::uniform(rng, d, n, -config.target.x_max, config.target.x_max),
    }
}

/// `n×k` matrix with orthonormal columns.
pub fn random_orthonormal(rng: &mut Rng, n: usize, k: usize) -> Result<Matrix> {
    Ok(svd(&Matrix::randn(rng, n, k, 1.0))?.u)
}

/// `M = U·diag(spectrum)·Vᵀ` with random orthonormal `U`, `V`.
pub fn low_rank_target(rng: &mut Rng, d_out: usize, d_in: usize, spectrum: &[f64]) -> Result<Matrix> {
    let k = spectrum.len();
    let u = random_orthonormal(rng, d_out, k)?;
    let v = random_orthonormal(rng, d_in, k)?;
    u.matmul(&Matrix::diag(spectrum))?.matmul(&v.transpose())
}

/// Matrix-approximation task: `W₀ = 0`, `y = M·x`. Returns the task and `M`.
pub fn matrix_task(config: &ExperimentConfig, seed: u64) -> Result<(Task, Matrix)> {
    let root = Rng::new(seed);
    let m = low_rank_target(
        &mut root.fork(STREAM_TARGET),
        config.dims.d_out,
        config.dims.d_in,
        &config.target.spectrum,
    )?;
    let x = sample_inputs(config, &mut root.fork(STREAM_TRAIN_X), config.target.n_train);
    let test_x = sample_inputs(config, &mut root.fork(STREAM_TEST_X), config.target.n_test);
    let y = m.matmul(&x)?;
    let test_y = m.matmul(&test_x)?;
    let task = Task {
        w0: Matrix::zeros(config.dims.d_out, config.dims.d_in),
        train: Dataset::regression(x, y)?,
        test_x,
        test_y,
    };
    Ok((task, m))
}

/// Teacher residual `g`, applied column-wise.
#[derive(Debug, Clone)]
pub enum Residual {
    Mlp { w1: Matrix, w2: Matrix, scale: f64 },
    Linear(Matrix),
    Zero,
}

impl Residual {
    pub fn apply(&self, x: &Matrix, d_out: usize) -> Result<Matrix> {
        match self {
            Residual::Mlp { w1, w2, scale } => w2.matmul(&w1.matmul(x)?.tanh())?.scale(*scale),
            Residual::Linear(g) => g.matmul(x),
            Residual::Zero => Ok(Matrix::zeros(d_out, x.cols())),
        }
    }
}

pub fn teacher(config: &ExperimentConfig, rng: &mut Rng) -> Result<Residual> {
    let (d_in, d_out) = (config.dims.d_in, config.dims.d_out);
    let t = &config.target;
    Ok(match t.teacher {
        Teacher::Mlp => {
            let w1 = Matrix::randn(rng, t.teacher_hidden, d_in, 1.0 / (d_in as f64).sqrt());
            let w2 = Matrix::randn(rng, d_out, t.teacher_hidden, 1.0 / (t.teacher_hidden as f64).sqrt());
            Residual::Mlp {
                w1,
                w2,
                scale: t.teacher_scale,
            }
        }
        Teacher::LowRank => {
            let u = Matrix::randn(rng, d_out, t.rank, 1.0 / (t.rank as f64).sqrt());
            let v = Matrix::randn(rng, t.rank, d_in, 1.0 / (d_in as f64).sqrt());
            Residual::Linear(u.matmul(&v)?.scale(t.teacher_scale)?)
        }
        Teacher::Zero => Residual::Zero,
    })
}

/// Toy regression: frozen random `W₀` plus a teacher residual,
/// `y = W₀x + g(x)`.
pub fn toy_task(config: &ExperimentConfig, seed: u64) -> Result<Task> {
    let root = Rng::new(seed);
    let (d_in, d_out) = (config.dims.d_in, config.dims.d_out);
    let w0 = Matrix::randn(&mut root.fork(STREAM_BASE), d_out, d_in, 1.0 / (d_in as f64).sqrt());
    let g = teacher(config, &mut root.fork(STREAM_TARGET))?;
    let label = |x: &Matrix| -> Result<Matrix> { w0.matmul(x)?.add(&g.apply(x, d_out)?) };
    let x = sample_inputs(config, &mut root.fork(STREAM_TRAIN_X), config.target.n_train);
    let test_x = sample_inputs(config, &mut root.fork(STREAM_TEST_X), config.target.n_test);
    let y = label(&x)?;
    let test_y = label(&test_x)?;
    Ok(Task {
        train: Dataset::regression(x, y)?,
        test_y,
        test_x,
        w0,
    })
}
