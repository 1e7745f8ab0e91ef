//! Uniform B-spline bases and the per-dimension learnable spline map.
//!
//! A [`SplineGrid`] of degree `k` with `G₀` interior intervals on `[lo, hi]`
//! carries the extended uniform knot vector
//! `t_j = lo + (j - k)·h`, `j = 0..=G₀ + 2k`, `h = (hi - lo)/G₀`,
//! and `G = G₀ + k` basis functions, all of which are non-zero somewhere in
//! the domain. Inputs are clamped to `[lo, hi]` before evaluation, so the
//! learnable map is constant (and has zero slope) outside the domain.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineGrid {
    degree: usize,
    intervals: usize,
    lo: f64,
    hi: f64,
    knots: Vec<f64>,
}

impl Default for SplineGrid {
    fn default() -> Self {
        Self::new(3, 5, -1.0, 1.0).expect("default grid is valid")
    }
}

impl SplineGrid {
    pub fn new(degree: usize, intervals: usize, lo: f64, hi: f64) -> Result<Self> {
        if intervals == 0 {
            return Err(Error::InvalidArgument("spline needs at least one interval".into()));
        }
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::InvalidArgument(format!(
                "spline domain must satisfy lo < hi, got [{lo}, {hi}]"
            )));
        }
        let h = (hi - lo) / intervals as f64;
        let knots = (0..=intervals + 2 * degree)
            .map(|j| lo + (j as f64 - degree as f64) * h)
            .collect();
        Ok(Self {
            degree,
            intervals,
            lo,
            hi,
            knots,
        })
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn intervals(&self) -> usize {
        self.intervals
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Knot spacing `h`.
    pub fn spacing(&self) -> f64 {
        (self.hi - self.lo) / self.intervals as f64
    }

    pub fn basis_count(&self) -> usize {
        self.intervals + self.degree
    }

    pub fn clamp(&self, z: f64) -> f64 {
        z.clamp(self.lo, self.hi)
    }

    pub fn contains(&self, z: f64) -> bool {
        (self.lo..=self.hi).contains(&z)
    }

    /// Certified ceiling on `max_g |B'_g(z)|` over the domain.
    ///
    /// For uniform knots `B'_{i,k} = (B_{i,k-1} - B_{i+1,k-1}) / h`, so the
    /// generic ceiling is `1/h`. Degrees 1–3 use the exact cardinal maxima
    /// (hat slope 1, quadratic peak slope 1, cubic peak slope 2/3).
    pub fn max_basis_derivative(&self) -> f64 {
        let c = match self.degree {
            0 => 0.0,
            1 | 2 => 1.0,
            3 => 2.0 / 3.0,
            _ => 1.0,
        };
        c / self.spacing()
    }

    /// Ceiling on `Σ_g |B'_g(z)|`: each derivative is a difference of two
    /// lower-degree basis values, which themselves sum to one.
    pub fn derivative_sum_bound(&self) -> f64 {
        if self.degree == 0 {
            0.0
        } else {
            2.0 / self.spacing()
        }
    }

    /// Index `m` of the knot span `[t_m, t_{m+1})` holding the clamped input;
    /// `hi` itself belongs to the last interior span.
    fn span(&self, z: f64) -> usize {
        let k = self.degree;
        let last = self.intervals + k - 1;
        let guess = ((z - self.lo) / self.spacing()).floor();
        let mut m = if guess <= 0.0 {
            k
        } else {
            (k + guess as usize).min(last)
        };
        while m > k && z < self.knots[m] {
            m -= 1;
        }
        while m < last && z >= self.knots[m + 1] {
            m += 1;
        }
        m
    }

    /// Non-zero basis values of degree `p` on span `m`: entry `j` is
    /// `B_{m-p+j, p}(z)`.
    fn local_basis(&self, p: usize, m: usize, z: f64) -> Vec<f64> {
        let t = &self.knots;
        let mut n = vec![0.0; p + 1];
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        n[0] = 1.0;
        for j in 1..=p {
            left[j] = z - t[m + 1 - j];
            right[j] = t[m + j] - z;
            let mut saved = 0.0;
            for r in 0..j {
                let tmp = n[r] / (right[r + 1] + left[j - r]);
                n[r] = saved + right[r + 1] * tmp;
                saved = left[j - r] * tmp;
            }
            n[j] = saved;
        }
        n
    }

    /// All `G` basis values at `clamp(z)`; at most `k + 1` are non-zero.
    pub fn basis_eval(&self, z: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.basis_count()];
        let (first, local) = self.basis_local(z);
        out[first..first + local.len()].copy_from_slice(&local);
        out
    }

    /// Non-zero window `(first index, values)` of [`SplineGrid::basis_eval`].
    pub fn basis_local(&self, z: f64) -> (usize, Vec<f64>) {
        let z = self.clamp(z);
        let m = self.span(z);
        (m - self.degree, self.local_basis(self.degree, m, z))
    }

    /// Derivatives of all `G` basis functions at `clamp(z)`.
    pub fn basis_deriv(&self, z: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.basis_count()];
        let (first, local) = self.deriv_local(z);
        out[first..first + local.len()].copy_from_slice(&local);
        out
    }

    pub fn deriv_local(&self, z: f64) -> (usize, Vec<f64>) {
        let k = self.degree;
        let z = self.clamp(z);
        let m = self.span(z);
        if k == 0 {
            return (m, vec![0.0]);
        }
        // lower[j] = B_{m-k+1+j, k-1}(z), j = 0..k
        let lower = self.local_basis(k - 1, m, z);
        let t = &self.knots;
        let kf = k as f64;
        let d = (0..=k)
            .map(|j| {
                let i = m - k + j;
                let a = if j >= 1 {
                    kf * lower[j - 1] / (t[i + k] - t[i])
                } else {
                    0.0
                };
                let b = if j < k {
                    kf * lower[j] / (t[i + k + 1] - t[i + 1])
                } else {
                    0.0
                };
                a - b
            })
            .collect();
        (m - k, d)
    }
}

/// Per-dimension spline coefficients, shape `(r̃, G)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineCoeffs(Matrix);

impl SplineCoeffs {
    pub fn new(c: Matrix, grid: &SplineGrid) -> Result<Self> {
        if c.cols() != grid.basis_count() {
            return Err(Error::shape("spline_coeffs", c.shape(), (c.rows(), grid.basis_count())));
        }
        Ok(Self(c))
    }

    pub fn zeros(rank: usize, grid: &SplineGrid) -> Self {
        Self(Matrix::zeros(rank, grid.basis_count()))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn matrix_mut(&mut self) -> &mut Matrix {
        &mut self.0
    }

    pub fn rank(&self) -> usize {
        self.0.rows()
    }

    pub fn max_abs(&self) -> f64 {
        self.0.max_abs()
    }
}

fn check_rows(op: &'static str, c: &Matrix, z: &Matrix) -> Result<()> {
    if z.rows() != c.rows() {
        return Err(Error::shape(op, c.shape(), z.shape()));
    }
    Ok(())
}

/// `out[i][j] = Σ_g c[i][g] · B_g(z[i][j])`.
pub fn learnable_forward(grid: &SplineGrid, coeffs: &Matrix, z: &Matrix) -> Result<Matrix> {
    check_rows("learnable_forward", coeffs, z)?;
    if coeffs.cols() != grid.basis_count() {
        return Err(Error::shape(
            "learnable_forward",
            coeffs.shape(),
            (coeffs.rows(), grid.basis_count()),
        ));
    }
    let mut out = Matrix::zeros(z.rows(), z.cols());
    for i in 0..z.rows() {
        let c = coeffs.row(i);
        for j in 0..z.cols() {
            let (first, b) = grid.basis_local(z[(i, j)]);
            out[(i, j)] = b.iter().zip(&c[first..]).map(|(bv, cv)| bv * cv).sum();
        }
    }
    Matrix::checked(z.rows(), z.cols(), out.into_data(), "learnable_forward")
}

/// Gradients of `Σ upstream ⊙ learnable_forward(c, z)` with respect to the
/// coefficients and to `z`. Inputs outside the domain sit on the clamped
/// plateau and receive zero input gradient.
pub fn learnable_backward(
    grid: &SplineGrid,
    coeffs: &Matrix,
    z: &Matrix,
    upstream: &Matrix,
) -> Result<(Matrix, Matrix)> {
    check_rows("learnable_backward", coeffs, z)?;
    if upstream.shape() != z.shape() {
        return Err(Error::shape("learnable_backward", z.shape(), upstream.shape()));
    }
    let mut grad_c = Matrix::zeros(coeffs.rows(), coeffs.cols());
    let mut grad_z = Matrix::zeros(z.rows(), z.cols());
    for i in 0..z.rows() {
        for j in 0..z.cols() {
            let u = upstream[(i, j)];
            if u == 0.0 {
                continue;
            }
            let zv = z[(i, j)];
            let (first, b) = grid.basis_local(zv);
            for (g, bv) in b.iter().enumerate() {
                grad_c[(i, first + g)] += u * bv;
            }
            if grid.contains(zv) {
                let (first, d) = grid.deriv_local(zv);
                let slope: f64 = d.iter().zip(&coeffs.row(i)[first..]).map(|(dv, cv)| dv * cv).sum();
                grad_z[(i, j)] = u * slope;
            }
        }
    }
    let grad_c = Matrix::checked(grad_c.rows(), grad_c.cols(), grad_c.into_data(), "learnable_backward")?;
    let grad_z = Matrix::checked(grad_z.rows(), grad_z.cols(), grad_z.into_data(), "learnable_backward")?;
    Ok((grad_c, grad_z))
}
