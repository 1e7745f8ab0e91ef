//! Propagated gradient ceilings for an AuroRA layer trained with MSE, and a
//! training probe that checks them (plus finite differences) at every step.
//!
//! With `G = ∂L/∂h` and `u = s·|B|ᵀ|G|` (a ceiling on `|∂L/∂σ|` entry-wise),
//! the per-entry ceilings are
//!
//! ```text
//! B : s·sup|σ|·max_i Σ_n |G_in|
//! c : bound_dc·max_k Σ_n u_kn
//! H : bound_dh·max_k Σ_n u_kn
//! A : bound_dz·max_j Σ_n ‖u_n‖∞·|x_jn|
//! x : max_n ( ‖W₀‖₁·‖G_n‖∞ + ‖A‖₁·bound_dz·‖u_n‖∞ )
//! ```
//!
//! where `bound_dz` ceilings the column sums of the layer Jacobian and
//! `‖·‖₁` is the largest absolute column sum.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::adapter::{Adapter, ForwardMode};
use crate::error::{Error, Result};
use crate::tensor::{finite_diff_grad, grad_rel_error, Matrix};
use crate::trainer::{evaluate_mse, StepProbe, StepView, Target};

pub const TRACKED: [&str; 5] = ["x", "anl.H", "spline.c", "adapter.A", "adapter.B"];

/// Relative slack for summation-order rounding in the comparison.
const SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Observation {
    pub step: usize,
    pub value: f64,
    pub bound: f64,
}

impl Observation {
    fn ratio(&self) -> f64 {
        if self.bound > 0.0 {
            self.value / self.bound
        } else if self.value > 0.0 {
            f64::INFINITY
        } else {
            0.0
        }
    }

    /// NaN counts as a violation, hence the negated comparison.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn violates(&self) -> bool {
        !(self.value <= self.bound * (1.0 + SLACK))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Violation {
    pub step: usize,
    pub param: &'static str,
    pub value: f64,
    pub bound: f64,
    /// Column of the gradient holding its largest entry (a batch sample for `x`).
    pub witness_column: usize,
}

pub fn max_abs_column_sum(m: &Matrix) -> f64 {
    (0..m.cols())
        .map(|c| m.column(c).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

fn column_inf_norms(m: &Matrix) -> Vec<f64> {
    (0..m.cols())
        .map(|c| m.column(c).iter().fold(0.0f64, |a, v| a.max(v.abs())))
        .collect()
}

fn max_row_abs_sum(m: &Matrix) -> f64 {
    (0..m.rows())
        .map(|r| m.row(r).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Ceilings for every tracked gradient at the current parameters and batch.
/// `upstream` is `∂L/∂h`.
pub fn gradient_ceilings(
    adapter: &Adapter,
    w0: &Matrix,
    x: &Matrix,
    upstream: &Matrix,
) -> Result<BTreeMap<&'static str, f64>> {
    let Adapter::Aurora(au) = adapter else {
        return Err(Error::InvalidArgument(
            "gradient ceilings need an AuroRA adapter".into(),
        ));
    };
    let s = adapter.scaling().abs();
    let cert = au.anl.gradient_bound_certificate();
    let g_abs = upstream.abs();
    let u = au.b.abs().transpose().matmul(&g_abs)?.scale(s)?;
    let u_sum = max_row_abs_sum(&u);
    let u_inf = column_inf_norms(&u);
    let g_inf = column_inf_norms(upstream);
    let x_abs = x.abs();

    let mut a_bound = 0.0f64;
    for j in 0..x.rows() {
        let total: f64 = (0..x.cols()).map(|n| u_inf[n] * x_abs[(j, n)]).sum();
        a_bound = a_bound.max(total);
    }
    let w0_norm = max_abs_column_sum(w0);
    let a_norm = max_abs_column_sum(&au.a);
    let x_bound = (0..x.cols())
        .map(|n| w0_norm * g_inf[n] + a_norm * cert.bound_dz * u_inf[n])
        .fold(0.0, f64::max);

    Ok(BTreeMap::from([
        ("adapter.B", s * au.anl.output_bound() * max_row_abs_sum(&g_abs)),
        ("spline.c", cert.bound_dc * u_sum),
        ("anl.H", cert.bound_dh * u_sum),
        ("adapter.A", cert.bound_dz * a_bound),
        ("x", x_bound),
    ]))
}

/// Checks every step against the ceilings; runs finite differences on the
/// steps listed in `fd_steps`.
pub struct BoundProbe {
    pub mode: ForwardMode,
    pub fd_steps: Vec<usize>,
    pub fd_eps: f64,
    pub worst: BTreeMap<&'static str, Observation>,
    pub violations: Vec<Violation>,
    pub fd_max_error: f64,
    pub fd_checked: usize,
    pub steps: usize,
}

impl BoundProbe {
    pub fn new(mode: ForwardMode, fd_steps: Vec<usize>) -> Self {
        Self {
            mode,
            fd_steps,
            fd_eps: 1e-6,
            worst: BTreeMap::new(),
            violations: Vec::new(),
            fd_max_error: 0.0,
            fd_checked: 0,
            steps: 0,
        }
    }

    fn finite_difference(&mut self, view: &StepView<'_>, y: &Matrix) -> Result<()> {
        let (adapter, w0, x, mode) = (view.adapter, view.base, view.x, self.mode);
        for (index, (name, analytic)) in view.grads.iter().enumerate() {
            let numeric = finite_diff_grad(
                |p| {
                    let mut probe = adapter.clone();
                    *probe.params_mut()[index].1 = p.clone();
                    evaluate_mse(&probe, w0, x, y, mode)
                },
                adapter.params()[index].1,
                self.fd_eps,
            )?;
            debug_assert_eq!(adapter.params()[index].0, *name);
            self.fd_max_error = self.fd_max_error.max(grad_rel_error(analytic, &numeric));
            self.fd_checked += 1;
        }
        if let Some(gx) = view.input_grad {
            let numeric = finite_diff_grad(|p| evaluate_mse(adapter, w0, p, y, mode), x, self.fd_eps)?;
            self.fd_max_error = self.fd_max_error.max(grad_rel_error(gx, &numeric));
            self.fd_checked += 1;
        }
        Ok(())
    }
}

impl StepProbe for BoundProbe {
    fn wants_input_grad(&self) -> bool {
        true
    }

    fn observe(&mut self, view: &StepView<'_>) -> Result<()> {
        let Target::Regression(y) = view.target else {
            return Err(Error::InvalidArgument("gradient ceilings assume an MSE target".into()));
        };
        self.steps += 1;
        let n = view.output.len() as f64;
        let upstream = view.output.sub(y)?.scale(2.0 / n)?;
        let ceilings = gradient_ceilings(view.adapter, view.base, view.x, &upstream)?;
        let mut actual: Vec<(&'static str, &Matrix)> = view.grads.iter().map(|(k, m)| (*k, m)).collect();
        if let Some(gx) = view.input_grad {
            actual.push(("x", gx));
        }
        for (name, grad) in actual {
            let obs = Observation {
                step: view.step,
                value: grad.max_abs(),
                bound: ceilings[name],
            };
            if obs.violates() {
                let column = (0..grad.cols())
                    .max_by(|&a, &b| {
                        let ma = grad.column(a).iter().fold(0.0f64, |m, v| m.max(v.abs()));
                        let mb = grad.column(b).iter().fold(0.0f64, |m, v| m.max(v.abs()));
                        ma.total_cmp(&mb)
                    })
                    .unwrap_or(0);
                self.violations.push(Violation {
                    step: view.step,
                    param: name,
                    value: obs.value,
                    bound: obs.bound,
                    witness_column: column,
                });
            }
            let worse = self.worst.get(name).is_none_or(|w| obs.ratio() > w.ratio());
            if worse {
                self.worst.insert(name, obs);
            }
        }
        if self.fd_steps.contains(&view.step) {
            self.finite_difference(view, y)?;
        }
        Ok(())
    }
}
