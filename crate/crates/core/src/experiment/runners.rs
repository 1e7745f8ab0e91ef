//! One runner per experiment kind. Independent (seed, method, rank) jobs go
//! through [`crate::par::map`]; records come back in job order.

use std::time::Instant;

use serde_json::{json, Value};

use super::bounds::{BoundProbe, TRACKED};
use super::config::{ExperimentConfig, ExperimentKind, Teacher};
use super::report::{Record, Report, RunArtifact};
use super::task::{matrix_task, toy_task, Task, STREAM_ADAPTER};
use crate::adapter::{leaky_case_delta_w, Adapter, AdapterKind, ForwardMode};
use crate::error::{Error, Result};
use crate::oracle::{epsilon_r, numerical_rank, pca_trajectory};
use crate::par::{self, Exec};
use crate::tensor::{Matrix, Rng};
use crate::trainer::{evaluate_mse, train, train_with_probe, StepProbe, TrainOutput};

/// Relative tolerance for the merged-update numerical rank.
pub const RANK_TOL: f64 = 1e-10;

pub fn run(kind: ExperimentKind, config: &ExperimentConfig) -> Result<Report> {
    run_with(Exec::default(), kind, config)
}

/// Like [`run`] with an explicit execution strategy. Reports do not depend
/// on the strategy apart from `runtime_ms`.
pub fn run_with(exec: Exec, kind: ExperimentKind, config: &ExperimentConfig) -> Result<Report> {
    let config = config.resolved(kind);
    config.validate(kind)?;
    let Job { records, extras, runs } = match kind {
        ExperimentKind::MatrixApprox => matrix_approx(exec, &config)?,
        ExperimentKind::GradBounds => grad_bounds(exec, &config)?,
        ExperimentKind::MergeDivergence => merge_divergence(exec, &config)?,
        ExperimentKind::RankSweep => rank_sweep(exec, &config)?,
        ExperimentKind::DeltaPca => delta_pca(exec, &config)?,
        ExperimentKind::LeakyCase => leaky_case(exec, &config)?,
        ExperimentKind::ToyTask => toy(exec, &config)?,
    };
    Ok(Report::new(kind, config, records, extras).with_runs(runs))
}

/// What one job (or a whole runner, after [`flatten`]) produces.
struct Job {
    records: Vec<Record>,
    extras: Value,
    runs: Vec<RunArtifact>,
}

impl Job {
    fn new(records: Vec<Record>, extras: Value) -> Self {
        Self {
            records,
            extras,
            runs: Vec::new(),
        }
    }

    fn with_run(mut self, run: RunArtifact) -> Self {
        self.runs.push(run);
        self
    }
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Trained adapter plus what the training run left behind.
struct Fit {
    adapter: Adapter,
    output: Option<TrainOutput>,
    diverged: bool,
    train_ms: f64,
}

fn fit(
    config: &ExperimentConfig,
    task: &Task,
    kind: AdapterKind,
    rank: usize,
    mode: ForwardMode,
    seed: u64,
    probe: Option<&mut dyn StepProbe>,
) -> Result<Fit> {
    let mut rng = Rng::new(seed).fork(STREAM_ADAPTER);
    let adapter = Adapter::init(
        kind,
        config.dims.d_in,
        config.dims.d_out,
        rank,
        config.adapter.alpha_for(rank),
        &config.anl_options(),
        &mut rng,
    )?;
    let mut tc = config.train_config(seed);
    tc.mode = mode;
    let start = Instant::now();
    let result = match probe {
        Some(p) => train_with_probe(adapter, &task.w0, &task.train, &tc, p),
        None => train(adapter, &task.w0, &task.train, &tc),
    };
    let train_ms = ms_since(start);
    match result {
        Ok(out) => Ok(Fit {
            adapter: out.adapter.clone(),
            output: Some(out),
            diverged: false,
            train_ms,
        }),
        Err(Error::Diverged { last_good, .. }) => Ok(Fit {
            adapter: *last_good,
            output: None,
            diverged: true,
            train_ms,
        }),
        Err(e) => Err(e),
    }
}

impl Fit {
    /// Loss curve and final adapter, without the per-epoch snapshots that
    /// would otherwise add thousands of files to a sweep.
    fn artifact(&self, label: String) -> RunArtifact {
        let mut train = self.output.clone().unwrap_or_else(|| TrainOutput {
            adapter: self.adapter.clone(),
            curve: Vec::new(),
            snapshots: Vec::new(),
        });
        train.snapshots.clear();
        RunArtifact {
            label,
            train,
            snapshots: Vec::new(),
        }
    }
}

fn test_mse(task: &Task, adapter: &Adapter, mode: ForwardMode) -> Result<f64> {
    evaluate_mse(adapter, &task.w0, &task.test_x, &task.test_y, mode)
}

fn flatten(results: Vec<Result<Job>>) -> Result<Job> {
    let mut out = Job::new(Vec::new(), Value::Null);
    let mut extras = Vec::new();
    for r in results {
        let job = r?;
        out.records.extend(job.records);
        out.runs.extend(job.runs);
        if !job.extras.is_null() {
            extras.push(job.extras);
        }
    }
    out.extras = Value::Array(extras);
    Ok(out)
}

fn matrix_approx(exec: Exec, c: &ExperimentConfig) -> Result<Job> {
    let kind = ExperimentKind::MatrixApprox;
    let r = c.adapter.rank;
    let jobs: Vec<(u64, AdapterKind)> = c
        .train
        .seeds
        .iter()
        .flat_map(|&s| [(s, AdapterKind::Lora), (s, AdapterKind::Aurora)])
        .collect();
    let results = par::map_with(exec, &jobs, |&(seed, method)| -> Result<Job> {
        let (task, m) = matrix_task(c, seed)?;
        let oracle = epsilon_r(&m, r)? * c.target.input.std(c.target.x_max);
        let f = fit(c, &task, method, r, ForwardMode::Dynamic, seed, None)?;
        let rms = |mode| -> Result<f64> { Ok((test_mse(&task, &f.adapter, mode)? * c.dims.d_out as f64).sqrt()) };
        let name = method.as_str();
        let ms = f.train_ms;
        let rank = numerical_rank(&f.adapter.delta_weight()?, RANK_TOL)?;
        Ok(Job::new(
            vec![
                Record::new(kind, seed, name, r, "test_rms_dynamic", rms(ForwardMode::Dynamic)?)
                    .with_oracle(oracle)
                    .with_runtime(ms),
                Record::new(kind, seed, name, r, "test_rms_static", rms(ForwardMode::Static)?)
                    .with_oracle(oracle)
                    .with_runtime(ms),
                Record::new(kind, seed, name, r, "delta_w_rank", rank as f64).with_oracle(r as f64),
                Record::new(kind, seed, name, r, "converged", if f.diverged { 0.0 } else { 1.0 }),
            ],
            Value::Null,
        )
        .with_run(f.artifact(format!("{name}_r{r}_s{seed}"))))
    });
    flatten(results)
}

fn short_name(param: &str) -> &'static str {
    match param {
        "x" => "x",
        "anl.H" => "H",
        "spline.c" => "c",
        "adapter.A" => "A",
        "adapter.B" => "B",
        _ => "other",
    }
}

fn grad_bounds(exec: Exec, c: &ExperimentConfig) -> Result<Job> {
    let kind = ExperimentKind::GradBounds;
    let r = c.adapter.rank;
    let results = par::map_with(exec, &c.train.seeds, |&seed| -> Result<Job> {
        let task = toy_task(c, seed)?;
        let total = c.train_config(seed).total_steps(task.train.len());
        let fd_steps = vec![0, total / 2, total.saturating_sub(1)];
        let mut probe = BoundProbe::new(ForwardMode::Dynamic, fd_steps);
        let f = fit(
            c,
            &task,
            AdapterKind::Aurora,
            r,
            ForwardMode::Dynamic,
            seed,
            Some(&mut probe),
        )?;
        let mut recs = Vec::new();
        for name in TRACKED {
            if let Some(w) = probe.worst.get(name) {
                recs.push(
                    Record::new(
                        kind,
                        seed,
                        "aurora",
                        r,
                        format!("grad_max_{}", short_name(name)),
                        w.value,
                    )
                    .with_oracle(w.bound)
                    .with_runtime(f.train_ms),
                );
            }
        }
        recs.push(Record::new(kind, seed, "aurora", r, "violations", probe.violations.len() as f64).with_oracle(0.0));
        recs.push(Record::new(kind, seed, "aurora", r, "fd_max_rel_error", probe.fd_max_error).with_oracle(1e-5));
        recs.push(Record::new(
            kind,
            seed,
            "aurora",
            r,
            "fd_checks",
            probe.fd_checked as f64,
        ));
        recs.push(Record::new(
            kind,
            seed,
            "aurora",
            r,
            "steps_observed",
            probe.steps as f64,
        ));
        recs.push(Record::new(
            kind,
            seed,
            "aurora",
            r,
            "converged",
            if f.diverged { 0.0 } else { 1.0 },
        ));
        Ok(Job::new(
            recs,
            json!({ "seed": seed, "violations": probe.violations, "worst": probe.worst }),
        )
        .with_run(f.artifact(format!("aurora_r{r}_s{seed}"))))
    });
    flatten(results)
}

fn merge_divergence(exec: Exec, c: &ExperimentConfig) -> Result<Job> {
    let kind = ExperimentKind::MergeDivergence;
    let r = c.adapter.rank;
    let jobs: Vec<(u64, AdapterKind, ForwardMode)> = c
        .train
        .seeds
        .iter()
        .flat_map(|&s| {
            [AdapterKind::Lora, AdapterKind::Aurora]
                .into_iter()
                .flat_map(move |k| [(s, k, ForwardMode::Dynamic), (s, k, ForwardMode::Static)])
        })
        .collect();
    let results = par::map_with(exec, &jobs, |&(seed, method, train_mode)| -> Result<Job> {
        let task = toy_task(c, seed)?;
        let f = fit(c, &task, method, r, train_mode, seed, None)?;
        let timed = |mode| -> Result<(f64, f64)> {
            let t = Instant::now();
            let v = test_mse(&task, &f.adapter, mode)?;
            Ok((v, ms_since(t)))
        };
        let name = method.as_str();
        let mut recs = Vec::new();
        match train_mode {
            ForwardMode::Dynamic => {
                let (d, d_ms) = timed(ForwardMode::Dynamic)?;
                let (s, s_ms) = timed(ForwardMode::Static)?;
                recs.push(
                    Record::new(kind, seed, format!("{name}-D"), r, "test_mse", d).with_runtime(f.train_ms + d_ms),
                );
                recs.push(
                    Record::new(kind, seed, format!("{name}-default"), r, "test_mse", s)
                        .with_runtime(f.train_ms + s_ms),
                );
                let dyn_out = f.adapter.adapter_output(&task.test_x, ForwardMode::Dynamic)?;
                let stat_out = f.adapter.adapter_output(&task.test_x, ForwardMode::Static)?;
                let divergence = dyn_out.sub(&stat_out)?.frobenius_norm() / (task.test_x.cols() as f64).sqrt();
                recs.push(Record::new(
                    kind,
                    seed,
                    format!("{name}-default"),
                    r,
                    "output_divergence",
                    divergence,
                ));
                recs.push(Record::new(
                    kind,
                    seed,
                    format!("{name}-D"),
                    r,
                    "converged",
                    if f.diverged { 0.0 } else { 1.0 },
                ));
            }
            ForwardMode::Static => {
                let (s, s_ms) = timed(ForwardMode::Static)?;
                recs.push(
                    Record::new(kind, seed, format!("{name}-S"), r, "test_mse", s).with_runtime(f.train_ms + s_ms),
                );
                recs.push(Record::new(
                    kind,
                    seed,
                    format!("{name}-S"),
                    r,
                    "converged",
                    if f.diverged { 0.0 } else { 1.0 },
                ));
            }
        }
        let trained = match train_mode {
            ForwardMode::Dynamic => "dynamic",
            ForwardMode::Static => "static",
        };
        let label = format!("{name}_{trained}_r{r}_s{seed}");
        Ok(Job::new(recs, Value::Null).with_run(f.artifact(label)))
    });
    flatten(results)
}

fn rank_sweep(exec: Exec, c: &ExperimentConfig) -> Result<Job> {
    let kind = ExperimentKind::RankSweep;
    let mut jobs = Vec::new();
    for &method in &c.adapter.methods {
        for &rank in &c.adapter.ranks {
            for &seed in &c.train.seeds {
                jobs.push((method, rank, seed));
            }
        }
    }
    let results = par::map_with(exec, &jobs, |&(method, rank, seed)| -> Result<Job> {
        let task = toy_task(c, seed)?;
        let f = fit(c, &task, method, rank, ForwardMode::Dynamic, seed, None)?;
        let name = method.as_str();
        let params = f.adapter.param_count().trainable as f64;
        Ok(Job::new(
            vec![
                Record::new(
                    kind,
                    seed,
                    name,
                    rank,
                    "test_mse",
                    test_mse(&task, &f.adapter, ForwardMode::Dynamic)?,
                )
                .with_runtime(f.train_ms),
                Record::new(
                    kind,
                    seed,
                    name,
                    rank,
                    "test_mse_merged",
                    test_mse(&task, &f.adapter, ForwardMode::Static)?,
                ),
                Record::new(kind, seed, name, rank, "param_count", params),
                Record::new(
                    kind,
                    seed,
                    name,
                    rank,
                    "delta_w_rank",
                    numerical_rank(&f.adapter.delta_weight()?, RANK_TOL)? as f64,
                )
                .with_oracle(rank as f64),
                Record::new(kind, seed, name, rank, "converged", if f.diverged { 0.0 } else { 1.0 }),
            ],
            Value::Null,
        )
        .with_run(f.artifact(format!("{name}_r{rank}_s{seed}"))))
    });
    let Job { mut records, runs, .. } = flatten(results)?;

    // spread of each seed's metric across ranks, then of the per-rank medians
    let mut ranges = serde_json::Map::new();
    for &method in &c.adapter.methods {
        let name = method.as_str();
        for &seed in &c.train.seeds {
            let vals: Vec<f64> = records
                .iter()
                .filter(|r| r.method == name && r.seed == seed && r.metric_name == "test_mse")
                .map(|r| r.value)
                .collect();
            let range = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                - vals.iter().copied().fold(f64::INFINITY, f64::min);
            records.push(Record::new(kind, seed, name, 0, "test_mse_range", range));
        }
        let medians: Vec<f64> = c
            .adapter
            .ranks
            .iter()
            .map(|&rank| {
                let v: Vec<f64> = records
                    .iter()
                    .filter(|r| r.method == name && r.rank == rank && r.metric_name == "test_mse")
                    .map(|r| r.value)
                    .collect();
                super::report::median(&v)
            })
            .collect();
        let spread = medians.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            - medians.iter().copied().fold(f64::INFINITY, f64::min);
        ranges.insert(
            name.to_string(),
            json!({ "ranks": c.adapter.ranks, "median_test_mse": medians, "range": spread }),
        );
    }
    Ok(Job {
        records,
        extras: json!({ "median_range_across_ranks": ranges }),
        runs,
    })
}

/// Snapshots entering the PCA, evenly spaced from initialization to the end.
pub const PCA_SNAPSHOTS: usize = 10;

fn spaced(len: usize, n: usize) -> Vec<usize> {
    if len <= n {
        return (0..len).collect();
    }
    (0..n).map(|i| i * (len - 1) / (n - 1)).collect()
}

fn delta_pca(exec: Exec, c: &ExperimentConfig) -> Result<Job> {
    let kind = ExperimentKind::DeltaPca;
    let r = c.adapter.rank;
    let jobs: Vec<(u64, AdapterKind)> = c
        .train
        .seeds
        .iter()
        .flat_map(|&s| c.adapter.methods.iter().map(move |&m| (s, m)))
        .collect();
    let results = par::map_with(exec, &jobs, |&(seed, method)| -> Result<Job> {
        let task = toy_task(c, seed)?;
        let f = fit(c, &task, method, r, ForwardMode::Dynamic, seed, None)?;
        let name = method.as_str();
        let label = format!("{name}_r{r}_s{seed}");
        let Some(out) = &f.output else {
            let recs = vec![Record::new(kind, seed, name, r, "converged", 0.0)];
            return Ok(Job::new(recs, Value::Null).with_run(f.artifact(label)));
        };
        let epochs = spaced(out.snapshots.len(), PCA_SNAPSHOTS);
        let snapshots: Vec<Matrix> = epochs.iter().map(|&e| out.snapshots[e].clone()).collect();
        let t = Instant::now();
        let traj = pca_trajectory(&snapshots)?;
        let ms = ms_since(t);
        Ok(Job::new(
            vec![
                Record::new(kind, seed, name, r, "path_length", traj.path_length).with_runtime(ms),
                Record::new(kind, seed, name, r, "hull_area", traj.hull_area).with_runtime(ms),
                Record::new(kind, seed, name, r, "snapshots", snapshots.len() as f64),
                Record::new(kind, seed, name, r, "converged", 1.0),
            ],
            json!({ "seed": seed, "method": name, "trajectory": traj }),
        )
        .with_run(RunArtifact {
            snapshots: epochs.into_iter().zip(snapshots).collect(),
            ..f.artifact(label)
        }))
    });
    flatten(results)
}

/// The four closed-form sign-regime matrices of `B·LeakyReLU(A)`.
pub fn leaky_closed_form(a1: f64, a2: f64, b1: f64, b2: f64, slope: f64) -> Matrix {
    let (p1, p2) = (a1 > 0.0, a2 > 0.0);
    let rows = match (p1, p2) {
        (true, true) => vec![vec![b1 * a1, b1 * a2], vec![b2 * a1, b2 * a2]],
        (false, true) => vec![vec![b1 * (slope * a1), b1 * a2], vec![b2 * (slope * a1), b2 * a2]],
        (true, false) => vec![vec![b1 * a1, b1 * (slope * a2)], vec![b2 * a1, b2 * (slope * a2)]],
        (false, false) => vec![
            vec![b1 * (slope * a1), b1 * (slope * a2)],
            vec![b2 * (slope * a1), b2 * (slope * a2)],
        ],
    };
    Matrix::from_rows(&rows).expect("2x2")
}

fn leaky_case(exec: Exec, c: &ExperimentConfig) -> Result<Job> {
    let kind = ExperimentKind::LeakyCase;
    let slope = match c.adapter.activation {
        crate::anl::Activation::LeakyRelu { slope } => slope,
        _ => 0.2,
    };
    let results = par::map_with(exec, &c.train.seeds, |&seed| -> Result<Job> {
        let mut rng = Rng::new(seed);
        let mut mag = || 0.1 + 1.9 * rng.uniform();
        let (m1, m2, b1, b2) = (mag(), mag(), mag(), mag());
        let mut recs = Vec::new();
        for (label, s1, s2) in [
            ("pp", 1.0, 1.0),
            ("np", -1.0, 1.0),
            ("pn", 1.0, -1.0),
            ("nn", -1.0, -1.0),
        ] {
            let (a1, a2) = (s1 * m1, s2 * m2);
            let got = leaky_case_delta_w(a1, a2, b1, b2, slope)?;
            let want = leaky_closed_form(a1, a2, b1, b2, slope);
            recs.push(
                Record::new(
                    kind,
                    seed,
                    "leaky_relu",
                    1,
                    format!("regime_{label}_max_abs_diff"),
                    got.max_abs_diff(&want)?,
                )
                .with_oracle(0.0),
            );
            let ba = Matrix::from_rows(&[vec![b1], vec![b2]])?.matmul(&Matrix::from_rows(&[vec![a1, a2]])?)?;
            let linear = leaky_case_delta_w(a1, a2, b1, b2, 1.0)?;
            recs.push(
                Record::new(
                    kind,
                    seed,
                    "leaky_relu",
                    1,
                    format!("regime_{label}_slope1_vs_ba"),
                    linear.max_abs_diff(&ba)?,
                )
                .with_oracle(0.0),
            );
        }
        Ok(Job::new(recs, Value::Null))
    });
    flatten(results)
}

fn toy(exec: Exec, c: &ExperimentConfig) -> Result<Job> {
    let kind = ExperimentKind::ToyTask;
    let r = c.adapter.rank;
    let jobs: Vec<(u64, AdapterKind)> = c
        .train
        .seeds
        .iter()
        .flat_map(|&s| c.adapter.methods.iter().map(move |&m| (s, m)))
        .collect();
    let results = par::map_with(exec, &jobs, |&(seed, method)| -> Result<Job> {
        let task = toy_task(c, seed)?;
        let f = fit(c, &task, method, r, ForwardMode::Dynamic, seed, None)?;
        let name = method.as_str();
        let mut dynamic = Record::new(
            kind,
            seed,
            name,
            r,
            "test_mse",
            test_mse(&task, &f.adapter, ForwardMode::Dynamic)?,
        )
        .with_runtime(f.train_ms);
        // zero and realizable low-rank residuals have a known optimum of 0
        let realizable =
            c.target.teacher == Teacher::Zero || (c.target.teacher == Teacher::LowRank && r >= c.target.rank);
        if realizable {
            dynamic = dynamic.with_oracle(0.0);
        }
        Ok(Job::new(
            vec![
                dynamic,
                Record::new(
                    kind,
                    seed,
                    name,
                    r,
                    "test_mse_merged",
                    test_mse(&task, &f.adapter, ForwardMode::Static)?,
                ),
                Record::new(
                    kind,
                    seed,
                    name,
                    r,
                    "param_count",
                    f.adapter.param_count().trainable as f64,
                ),
                Record::new(
                    kind,
                    seed,
                    name,
                    r,
                    "delta_w_rank",
                    numerical_rank(&f.adapter.delta_weight()?, RANK_TOL)? as f64,
                )
                .with_oracle(r as f64),
                Record::new(kind, seed, name, r, "converged", if f.diverged { 0.0 } else { 1.0 }),
            ],
            Value::Null,
        )
        .with_run(f.artifact(format!("{name}_r{r}_s{seed}"))))
    });
    flatten(results)
}
