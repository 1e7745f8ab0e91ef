//! Fast invariant suite run by `aurora-bench verify`.
//!
//! Each check is small and independent; the suite reports every failure
//! rather than stopping at the first.

use serde::Serialize;

use crate::adapter::{
    leaky_case_delta_w, param_count_aurora, param_count_lora, Adapter, AdapterKind, AnlOptions, ForwardMode,
};
use crate::anl::{record_anl, Activation, AnlParams};
use crate::error::Result;
use crate::oracle::{epsilon_r, orthogonality_residual, reconstruction_residual, svd};
use crate::spline::SplineGrid;
use crate::tensor::{finite_diff_grad, grad_rel_error, Checkpoint, Graph, Matrix, Rng, Var};
use crate::trainer::{train, Dataset, TrainConfig};

use super::runners::leaky_closed_form;

const GRAD_RTOL: f64 = 1e-5;
const FD_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub seed: u64,
    pub checks: Vec<Check>,
}

impl Summary {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn line(&self) -> String {
        let failed = self.failures().count();
        if failed == 0 {
            format!("OK {} checks", self.checks.len())
        } else {
            format!("FAIL {failed} of {} checks", self.checks.len())
        }
    }
}

struct Suite {
    checks: Vec<Check>,
}

impl Suite {
    fn check(&mut self, name: impl Into<String>, run: impl FnOnce() -> Result<(bool, String)>) {
        let (passed, detail) = run().unwrap_or_else(|e| (false, format!("error: {e}")));
        self.checks.push(Check {
            name: name.into(),
            passed,
            detail,
        });
    }

    fn below(&mut self, name: impl Into<String>, limit: f64, run: impl FnOnce() -> Result<f64>) {
        self.check(name, || {
            let v = run()?;
            Ok((v <= limit, format!("{v:.3e} <= {limit:.0e}")))
        });
    }
}

/// Gradient of `Σ W ⊙ f(inputs)` for random `W`, graph vs central differences.
fn graph_grad_error(
    inputs: &[Matrix],
    rng: &mut Rng,
    build: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let eval = |vals: &[Matrix], weights: Option<&Matrix>| -> Result<(f64, Vec<Matrix>, Matrix)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|m| g.param(m.clone())).collect();
        let out = build(&mut g, &vars)?;
        let shape = g.value(out)?.clone();
        let w = match weights {
            Some(w) => g.constant(w.clone()),
            None => g.constant(Matrix::filled(shape.rows(), shape.cols(), 1.0)),
        };
        let prod = g.hadamard(out, w)?;
        let loss = g.sum(prod)?;
        let value = g.value(loss)?[(0, 0)];
        let mut grads = g.backward(loss)?;
        let gs = vars.iter().map(|v| grads.take(*v).expect("leaf")).collect();
        Ok((value, gs, shape))
    };
    let (_, _, out) = eval(inputs, None)?;
    let weights = Matrix::randn(rng, out.rows(), out.cols(), 1.0);
    let (_, analytic, _) = eval(inputs, Some(&weights))?;
    let mut worst = 0.0f64;
    for k in 0..inputs.len() {
        let numeric = finite_diff_grad(
            |p| {
                let mut vals = inputs.to_vec();
                vals[k] = p.clone();
                Ok(eval(&vals, Some(&weights))?.0)
            },
            &inputs[k],
            FD_EPS,
        )?;
        worst = worst.max(grad_rel_error(&analytic[k], &numeric));
    }
    Ok(worst)
}

/// Uniform samples on `[lo, hi]` kept `gap` away from every point in `avoid`.
pub fn sample_away(rng: &mut Rng, rows: usize, cols: usize, lo: f64, hi: f64, avoid: &[f64], gap: f64) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for v in m.data_mut() {
        *v = loop {
            let x = lo + (hi - lo) * rng.uniform();
            if avoid.iter().all(|a| (x - a).abs() > gap) {
                break x;
            }
        };
    }
    m
}

type OpBuilder = dyn Fn(&mut Graph, &[Var]) -> Result<Var>;

pub fn run_all(seed: u64) -> Summary {
    let mut s = Suite { checks: Vec::new() };
    let mut rng = Rng::new(seed);
    let grid = SplineGrid::default();

    // linear algebra oracle
    s.check("epsilon_1(diag(3,2,1)) = sqrt(5)", || {
        let e = epsilon_r(&Matrix::diag(&[3.0, 2.0, 1.0]), 1)?;
        Ok(((e - 5f64.sqrt()).abs() <= 1e-10, format!("{e}")))
    });
    for (r, c) in [(20, 12), (12, 20), (32, 32), (1, 7)] {
        let m = Matrix::randn(&mut rng, r, c, 1.0);
        s.below(format!("svd residuals {r}x{c}"), 1e-9, || {
            let f = svd(&m)?;
            Ok(reconstruction_residual(&m, &f)?
                .max(orthogonality_residual(&f.u))
                .max(orthogonality_residual(&f.v)))
        });
    }
    {
        let m = Matrix::randn(&mut rng, 10, 8, 1.0);
        let mut r2 = rng.fork(7);
        s.check("random rank-2 factors never beat epsilon_2", || {
            let eps = epsilon_r(&m, 2)?;
            let mut best = f64::INFINITY;
            for _ in 0..200 {
                let u = Matrix::randn(&mut r2, 10, 2, 1.0);
                let v = Matrix::randn(&mut r2, 2, 8, 1.0);
                best = best.min(m.sub(&u.matmul(&v)?)?.frobenius_norm());
            }
            Ok((best >= eps - 1e-9, format!("best sampled {best:.4} vs {eps:.4}")))
        });
    }

    // spline
    s.check("spline partition of unity", || {
        let worst = (0..200)
            .map(|i| {
                let z = -1.0 + 2.0 * i as f64 / 199.0;
                (grid.basis_eval(z).iter().sum::<f64>() - 1.0).abs()
            })
            .fold(0.0, f64::max);
        Ok((worst <= 1e-12, format!("{worst:.2e}")))
    });

    // graph operations
    let knots: Vec<f64> = grid.knots().to_vec();
    let ops: Vec<(&str, Vec<Matrix>, Box<OpBuilder>)> = vec![
        (
            "matmul",
            vec![Matrix::randn(&mut rng, 3, 4, 1.0), Matrix::randn(&mut rng, 4, 2, 1.0)],
            Box::new(|g, v| g.matmul(v[0], v[1])),
        ),
        (
            "add",
            vec![Matrix::randn(&mut rng, 3, 2, 1.0), Matrix::randn(&mut rng, 3, 2, 1.0)],
            Box::new(|g, v| g.add(v[0], v[1])),
        ),
        (
            "sub",
            vec![Matrix::randn(&mut rng, 3, 2, 1.0), Matrix::randn(&mut rng, 3, 2, 1.0)],
            Box::new(|g, v| g.sub(v[0], v[1])),
        ),
        (
            "hadamard",
            vec![Matrix::randn(&mut rng, 3, 2, 1.0), Matrix::randn(&mut rng, 3, 2, 1.0)],
            Box::new(|g, v| g.hadamard(v[0], v[1])),
        ),
        (
            "scale",
            vec![Matrix::randn(&mut rng, 3, 2, 1.0)],
            Box::new(|g, v| g.scale(v[0], -1.7)),
        ),
        (
            "tanh",
            vec![Matrix::randn(&mut rng, 3, 2, 1.5)],
            Box::new(|g, v| g.tanh(v[0])),
        ),
        (
            "sigmoid",
            vec![Matrix::randn(&mut rng, 3, 2, 1.5)],
            Box::new(|g, v| g.sigmoid(v[0])),
        ),
        (
            "leaky_relu",
            vec![sample_away(&mut rng, 3, 2, -2.0, 2.0, &[0.0], 1e-3)],
            Box::new(|g, v| g.leaky_relu(v[0], 0.2)),
        ),
        (
            "sum",
            vec![Matrix::randn(&mut rng, 3, 2, 1.0)],
            Box::new(|g, v| g.sum(v[0])),
        ),
        (
            "mse",
            vec![Matrix::randn(&mut rng, 3, 2, 1.0), Matrix::randn(&mut rng, 3, 2, 1.0)],
            Box::new(|g, v| g.mse(v[0], v[1])),
        ),
        (
            "softmax_cross_entropy",
            vec![Matrix::randn(&mut rng, 4, 3, 1.0)],
            Box::new(|g, v| g.softmax_cross_entropy(v[0], &[0, 3, 1])),
        ),
        (
            "spline",
            vec![
                sample_away(&mut rng, 2, 5, -1.3, 1.3, &knots, 1e-3),
                Matrix::randn(&mut rng, 2, grid.basis_count(), 1.0),
            ],
            Box::new({
                let grid = grid.clone();
                move |g, v| g.spline(v[0], v[1], &grid)
            }),
        ),
        (
            "anl",
            vec![
                sample_away(&mut rng, 2, 5, -1.3, 1.3, &knots, 1e-3),
                Matrix::randn(&mut rng, 2, 2, 1.0),
                Matrix::randn(&mut rng, 2, grid.basis_count(), 1.0),
            ],
            Box::new({
                let grid = grid.clone();
                move |g, v| record_anl(g, v[0], v[1], v[2], &grid, Activation::Tanh)
            }),
        ),
    ];
    for (name, inputs, build) in ops {
        let mut r = rng.fork(100);
        s.below(format!("gradient {name}"), GRAD_RTOL, || {
            graph_grad_error(&inputs, &mut r, build)
        });
    }

    // adapters
    let (d_in, d_out) = (6, 5);
    let w0 = Matrix::randn(&mut rng, d_out, d_in, 1.0);
    let x = Matrix::randn(&mut rng, d_in, 7, 1.0);
    for kind in [AdapterKind::Lora, AdapterKind::MosLora, AdapterKind::Aurora] {
        let mut ad = Adapter::init(kind, d_in, d_out, 2, 4.0, &AnlOptions::default(), &mut rng).unwrap();
        for (_, m) in ad.params_mut() {
            *m = Matrix::randn(&mut rng, m.rows(), m.cols(), 0.5);
        }
        for mode in [ForwardMode::Dynamic, ForwardMode::Static] {
            let ad = ad.clone();
            let y = Matrix::randn(&mut rng, d_out, 7, 1.0);
            s.below(format!("gradient {kind} forward_train {mode:?}"), GRAD_RTOL, || {
                let mut g = Graph::new();
                let xv = g.constant(x.clone());
                let w = g.constant(w0.clone());
                let base = g.matmul(w, xv)?;
                let rec = ad.record(&mut g, xv, mode)?;
                let h = g.add(base, rec.delta)?;
                let yv = g.constant(y.clone());
                let loss = g.mse(h, yv)?;
                let grads = g.backward(loss)?;
                let mut worst = 0.0f64;
                for (k, (_, var)) in rec.params.iter().enumerate() {
                    let numeric = finite_diff_grad(
                        |p| {
                            let mut probe = ad.clone();
                            *probe.params_mut()[k].1 = p.clone();
                            let out = probe.forward_train(&w0, &x, mode)?.sub(&y)?;
                            Ok(out.data().iter().map(|v| v * v).sum::<f64>() / out.len() as f64)
                        },
                        ad.params()[k].1,
                        FD_EPS,
                    )?;
                    worst = worst.max(grad_rel_error(grads.get(*var).expect("leaf"), &numeric));
                }
                Ok(worst)
            });
        }
        if kind != AdapterKind::Aurora {
            s.below(format!("{kind} dynamic equals merged"), 1e-12, || {
                let dynamic = ad.forward_train(&w0, &x, ForwardMode::Dynamic)?;
                let merged = ad.merge(&w0)?.w.matmul(&x)?;
                dynamic.max_abs_diff(&merged)
            });
        }
    }
    s.check("inactive layer merges to W0 exactly", || {
        let mut ad = Adapter::init(
            AdapterKind::Aurora,
            d_in,
            d_out,
            2,
            2.0,
            &AnlOptions::default(),
            &mut rng,
        )?;
        if let Adapter::Aurora(a) = &mut ad {
            a.b = Matrix::randn(&mut rng, d_out, 2, 1.0);
            a.anl = AnlParams::with_parts(
                Matrix::zeros(2, 2),
                grid.clone(),
                Matrix::zeros(2, grid.basis_count()),
                Activation::Tanh,
            )?;
        }
        Ok((ad.merge(&w0)?.w == w0, String::new()))
    });

    // closed forms
    for (a1, a2) in [(0.7, 1.3), (-0.7, 1.3), (0.7, -1.3), (-0.7, -1.3)] {
        s.check(format!("leaky regime ({a1}, {a2})"), || {
            let got = leaky_case_delta_w(a1, a2, 0.9, -1.1, 0.2)?;
            Ok((got == leaky_closed_form(a1, a2, 0.9, -1.1, 0.2), String::new()))
        });
    }
    s.check("parameter-cost ratios", || {
        let g = SplineGrid::default().basis_count();
        let r1 = param_count_aurora(2, 768, 768, g).trainable as f64 / param_count_lora(8, 768, 768).trainable as f64;
        let r2 =
            param_count_aurora(2, 4096, 4096, g).trainable as f64 / param_count_lora(32, 4096, 4096).trainable as f64;
        let ok = param_count_aurora(2, 768, 768, g).trainable == 3092
            && (r1 * 100.0 - 25.16).abs() < 0.005
            && (r2 * 100.0 - 6.26).abs() < 0.005;
        Ok((ok, format!("{:.2}% {:.2}%", r1 * 100.0, r2 * 100.0)))
    });

    // persistence and determinism
    s.check("checkpoint round trip is bit-exact", || {
        let mut ck = Checkpoint::new();
        ck.insert("m", Matrix::randn(&mut rng, 4, 3, 1e3));
        let back = Checkpoint::from_json(&ck.to_json())?;
        Ok((back.matrices == ck.matrices, String::new()))
    });
    s.check("training is deterministic", || {
        let x = Matrix::randn(&mut rng, d_in, 32, 1.0);
        let y = Matrix::randn(&mut rng, d_out, 32, 1.0);
        let data = Dataset::regression(x, y)?;
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 8,
            seed,
            ..TrainConfig::default()
        };
        let run = || -> Result<Vec<u64>> {
            let ad = Adapter::init(
                AdapterKind::Aurora,
                d_in,
                d_out,
                2,
                2.0,
                &AnlOptions::default(),
                &mut Rng::new(seed),
            )?;
            let out = train(ad, &w0, &data, &cfg)?;
            Ok(out.curve.iter().map(|r| r.loss.to_bits()).collect())
        };
        let a = run()?;
        Ok((a == run()?, format!("{} steps", a.len())))
    });

    Summary { seed, checks: s.checks }
}
