use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Central-difference gradient of a scalar function of a matrix:
/// `(f(x + ε eᵢⱼ) - f(x - ε eᵢⱼ)) / 2ε` for every entry.
pub fn finite_diff_grad<F>(mut f: F, at: &Matrix, eps: f64) -> Result<Matrix>
where
    F: FnMut(&Matrix) -> Result<f64>,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let mut probe = at.clone();
    let mut out = Matrix::zeros(at.rows(), at.cols());
    for k in 0..at.len() {
        let orig = probe.data()[k];
        probe.data_mut()[k] = orig + eps;
        let up = f(&probe)?;
        probe.data_mut()[k] = orig - eps;
        let down = f(&probe)?;
        probe.data_mut()[k] = orig;
        if !(up.is_finite() && down.is_finite()) {
            return Err(Error::NonFinite { op: "finite_diff_grad" });
        }
        out.data_mut()[k] = (up - down) / (2.0 * eps);
    }
    Ok(out)
}

/// Largest entry-wise relative error `|a - n| / max(1, |a|, |n|)`.
///
/// The unit floor keeps near-zero gradients from turning round-off into
/// large relative errors.
pub fn grad_rel_error(analytic: &Matrix, numeric: &Matrix) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shapes differ");
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / 1f64.max(a.abs()).max(n.abs()))
        .fold(0.0, f64::max)
}

pub fn grad_close(analytic: &Matrix, numeric: &Matrix, rtol: f64) -> bool {
    grad_rel_error(analytic, numeric) <= rtol
}
