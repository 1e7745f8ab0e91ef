//! The adaptive nonlinear layer `σ(Z) = φ(H·φ(Z)) + L(Z)`.
//!
//! `φ` is a fixed activation (tanh unless configured otherwise), `H` is the
//! trainable `r̃×r̃` self-projection and `L` is the per-dimension learnable
//! spline. Matrices are processed column by column: each column of `Z` is
//! one `r̃`-vector passing through the layer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spline::{self, SplineCoeffs, SplineGrid};
use crate::tensor::{leaky_relu, sigmoid, Graph, Matrix, Var};

/// Fixed activation used twice in the fixed branch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Sigmoid,
    LeakyRelu { slope: f64 },
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
            Activation::LeakyRelu { slope } => leaky_relu(x, slope),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            Activation::LeakyRelu { slope } => {
                if x > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
        }
    }

    /// `sup |φ'|`.
    pub fn slope_bound(self) -> f64 {
        match self {
            Activation::Tanh => 1.0,
            Activation::Sigmoid => 0.25,
            Activation::LeakyRelu { slope } => slope.abs().max(1.0),
        }
    }

    /// `sup |φ|`; infinite for the unbounded leaky ReLU.
    pub fn value_bound(self) -> f64 {
        match self {
            Activation::Tanh | Activation::Sigmoid => 1.0,
            Activation::LeakyRelu { .. } => f64::INFINITY,
        }
    }

    fn record(self, g: &mut Graph, v: Var) -> Result<Var> {
        match self {
            Activation::Tanh => g.tanh(v),
            Activation::Sigmoid => g.sigmoid(v),
            Activation::LeakyRelu { slope } => g.leaky_relu(v, slope),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnlParams {
    pub h: Matrix,
    pub grid: SplineGrid,
    pub coeffs: SplineCoeffs,
    pub activation: Activation,
}

/// Closed-form ceilings on the partial derivatives of σ at the current
/// parameters, valid for every input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradientCertificate {
    /// Bounds every Jacobian entry and both the row-sum and column-sum
    /// norms of `∂σ/∂z`: `φ'²·r̃·max|H| + Σ_g|B'_g|·max|c|`.
    pub bound_dz: f64,
    /// `|∂σᵢ/∂Hᵢⱼ| = |φ'(uᵢ)·φ(zⱼ)| ≤ sup|φ'|·sup|φ|`.
    pub bound_dh: f64,
    /// `|∂σᵢ/∂cᵢ_g| = B_g(zᵢ) ≤ 1`.
    pub bound_dc: f64,
}

impl AnlParams {
    /// `H = 0.1·I`, zero spline coefficients, tanh.
    pub fn new(rank: usize, grid: SplineGrid) -> Self {
        let h = Matrix::identity(rank).scale(0.1).expect("finite");
        let coeffs = SplineCoeffs::zeros(rank, &grid);
        Self {
            h,
            grid,
            coeffs,
            activation: Activation::Tanh,
        }
    }

    pub fn with_parts(h: Matrix, grid: SplineGrid, coeffs: Matrix, activation: Activation) -> Result<Self> {
        if h.rows() != h.cols() {
            return Err(Error::InvalidArgument(format!(
                "self-projection must be square, got {:?}",
                h.shape()
            )));
        }
        if coeffs.rows() != h.rows() {
            return Err(Error::shape("anl_params", h.shape(), coeffs.shape()));
        }
        let coeffs = SplineCoeffs::new(coeffs, &grid)?;
        Ok(Self {
            h,
            grid,
            coeffs,
            activation,
        })
    }

    pub fn rank(&self) -> usize {
        self.h.rows()
    }

    fn check_input(&self, op: &'static str, z: &Matrix) -> Result<()> {
        if z.rows() != self.rank() {
            return Err(Error::shape(op, self.h.shape(), z.shape()));
        }
        Ok(())
    }

    /// `F(Z) = φ(H·φ(Z))`, column-wise.
    pub fn fixed_forward(&self, z: &Matrix) -> Result<Matrix> {
        self.check_input("fixed_forward", z)?;
        let act = self.activation;
        let inner = z.try_map("fixed_forward", |v| act.apply(v))?;
        self.h.matmul(&inner)?.try_map("fixed_forward", |v| act.apply(v))
    }

    pub fn learnable_forward(&self, z: &Matrix) -> Result<Matrix> {
        spline::learnable_forward(&self.grid, self.coeffs.matrix(), z)
    }

    /// `σ(Z) = F(Z) + L(Z)`.
    pub fn forward(&self, z: &Matrix) -> Result<Matrix> {
        self.fixed_forward(z)?.add(&self.learnable_forward(z)?)
    }

    /// Exact `∂σ/∂z` at a single `r̃`-vector.
    pub fn jacobian(&self, z: &[f64]) -> Result<Matrix> {
        let r = self.rank();
        if z.len() != r {
            return Err(Error::shape("anl_jacobian", self.h.shape(), (z.len(), 1)));
        }
        let act = self.activation;
        let inner: Vec<f64> = z.iter().map(|&v| act.apply(v)).collect();
        let mut jac = Matrix::zeros(r, r);
        for i in 0..r {
            let u: f64 = (0..r).map(|j| self.h[(i, j)] * inner[j]).sum();
            let outer = act.derivative(u);
            for j in 0..r {
                jac[(i, j)] = outer * self.h[(i, j)] * act.derivative(z[j]);
            }
            if self.grid.contains(z[i]) {
                let (first, d) = self.grid.deriv_local(z[i]);
                let c = &self.coeffs.matrix().row(i)[first..];
                jac[(i, i)] += d.iter().zip(c).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        Matrix::checked(r, r, jac.into_data(), "anl_jacobian")
    }

    pub fn gradient_bound_certificate(&self) -> GradientCertificate {
        let act = self.activation;
        let d1 = act.slope_bound();
        let r = self.rank() as f64;
        GradientCertificate {
            bound_dz: d1 * d1 * r * self.h.max_abs() + self.grid.derivative_sum_bound() * self.coeffs.max_abs(),
            bound_dh: d1 * act.value_bound(),
            bound_dc: 1.0,
        }
    }

    /// `sup |σᵢ|`: the fixed branch is bounded by `sup|φ|`, the spline by
    /// `max|c|` (non-negative basis values summing to one).
    pub fn output_bound(&self) -> f64 {
        self.activation.value_bound() + self.coeffs.max_abs()
    }
}

/// Records `σ(z)` on `g` with `h` and `coeffs` supplied as graph variables.
pub fn record_anl(
    g: &mut Graph,
    z: Var,
    h: Var,
    coeffs: Var,
    grid: &SplineGrid,
    activation: Activation,
) -> Result<Var> {
    let inner = activation.record(g, z)?;
    let mixed = g.matmul(h, inner)?;
    let fixed = activation.record(g, mixed)?;
    let learn = g.spline(z, coeffs, grid)?;
    g.add(fixed, learn)
}
