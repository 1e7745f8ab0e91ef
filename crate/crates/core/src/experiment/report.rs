//! Per-seed records, aggregates and the CSV/JSON writers.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::Serialize;

use super::config::{ExperimentConfig, ExperimentKind};
use crate::error::{Error, Result};
use crate::tensor::{Checkpoint, Matrix};
use crate::trainer::TrainOutput;

pub const CSV_COLUMNS: [&str; 10] = [
    "kind",
    "seed",
    "method",
    "rank",
    "metric_name",
    "value",
    "oracle",
    "ratio",
    "runtime_ms",
    "config_hash",
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Record {
    pub kind: ExperimentKind,
    pub seed: u64,
    pub method: String,
    /// Adapter rank; 0 for rows that summarize several ranks.
    pub rank: usize,
    pub metric_name: String,
    pub value: f64,
    pub oracle: Option<f64>,
    pub ratio: Option<f64>,
    pub runtime_ms: f64,
    pub config_hash: String,
}

impl Record {
    /// `ratio` is only filled when the oracle is positive.
    pub fn new(
        kind: ExperimentKind,
        seed: u64,
        method: impl Into<String>,
        rank: usize,
        metric: impl Into<String>,
        value: f64,
    ) -> Self {
        Self {
            kind,
            seed,
            method: method.into(),
            rank,
            metric_name: metric.into(),
            value,
            oracle: None,
            ratio: None,
            runtime_ms: 0.0,
            config_hash: String::new(),
        }
    }

    pub fn with_oracle(mut self, oracle: f64) -> Self {
        self.oracle = Some(oracle);
        self.ratio = (oracle > 0.0).then(|| self.value / oracle);
        self
    }

    pub fn with_runtime(mut self, ms: f64) -> Self {
        self.runtime_ms = ms;
        self
    }

    /// Everything except the wall-clock runtime, for reproducibility checks.
    pub fn deterministic_key(
        &self,
    ) -> (
        String,
        u64,
        String,
        usize,
        String,
        u64,
        Option<u64>,
        Option<u64>,
        String,
    ) {
        (
            self.kind.as_str().to_string(),
            self.seed,
            self.method.clone(),
            self.rank,
            self.metric_name.clone(),
            self.value.to_bits(),
            self.oracle.map(f64::to_bits),
            self.ratio.map(f64::to_bits),
            self.config_hash.clone(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub method: String,
    pub rank: usize,
    pub metric_name: String,
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
    /// Fraction of seeds with `ratio < 1`, when ratios exist.
    pub success_fraction: Option<f64>,
}

/// Training leftovers of one run, written under `runs/<label>/`.
#[derive(Debug, Clone)]
pub struct RunArtifact {
    pub label: String,
    pub train: TrainOutput,
    /// `(epoch, merged ΔW)` pairs worth keeping on disk.
    pub snapshots: Vec<(usize, Matrix)>,
}

impl RunArtifact {
    /// `loss.csv`, `adapter.json`, and one `delta_epoch_XXX.json` per kept snapshot.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.train.write_loss_csv(&dir.join("loss.csv"))?;
        self.train.adapter.to_checkpoint().save(&dir.join("adapter.json"))?;
        for (epoch, m) in &self.snapshots {
            let mut ck = Checkpoint::new();
            ck.insert("delta_w", m.clone());
            ck.metadata = Some(serde_json::json!({ "epoch": epoch }));
            ck.save(&dir.join(format!("delta_epoch_{epoch:03}.json")))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub kind: ExperimentKind,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub records: Vec<Record>,
    pub aggregates: Vec<Aggregate>,
    /// Experiment-specific structured output (trajectories, witnesses, ...).
    pub extras: serde_json::Value,
    #[serde(skip)]
    pub runs: Vec<RunArtifact>,
}

impl Report {
    pub fn new(
        kind: ExperimentKind,
        config: ExperimentConfig,
        mut records: Vec<Record>,
        extras: serde_json::Value,
    ) -> Self {
        let hash = config.hash();
        for r in &mut records {
            r.config_hash.clone_from(&hash);
        }
        let aggregates = aggregate(&records);
        Self {
            kind,
            config_hash: hash,
            config,
            records,
            aggregates,
            extras,
            runs: Vec::new(),
        }
    }

    pub fn find(&self, method: &str, rank: usize, metric: &str) -> Option<&Aggregate> {
        self.aggregates
            .iter()
            .find(|a| a.method == method && a.rank == rank && a.metric_name == metric)
    }

    pub fn values(&self, method: &str, rank: usize, metric: &str) -> Vec<f64> {
        self.select(method, rank, metric).map(|r| r.value).collect()
    }

    pub fn select<'a>(
        &'a self,
        method: &'a str,
        rank: usize,
        metric: &'a str,
    ) -> impl Iterator<Item = &'a Record> + 'a {
        self.records
            .iter()
            .filter(move |r| r.method == method && r.rank == rank && r.metric_name == metric)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        w.write_record(CSV_COLUMNS)?;
        let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
        for r in &self.records {
            w.write_record([
                r.kind.as_str().to_string(),
                r.seed.to_string(),
                r.method.clone(),
                r.rank.to_string(),
                r.metric_name.clone(),
                fmt_f64(r.value),
                opt(r.oracle),
                opt(r.ratio),
                format!("{:.3}", r.runtime_ms),
                r.config_hash.clone(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Writes `report.csv` and `report.json` into `dir`, creating it.
    pub fn with_runs(mut self, runs: Vec<RunArtifact>) -> Self {
        self.runs = runs;
        self
    }

    /// `report.csv`, `report.json`, and `runs/<label>/` per training run.
    pub fn write_to_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.write_csv(&dir.join("report.csv"))?;
        self.write_json(&dir.join("report.json"))?;
        for run in &self.runs {
            run.write(&dir.join("runs").join(&run.label))?;
        }
        Ok(())
    }
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::Csv(e)
    }
}

/// Shortest representation that parses back to the same `f64`.
fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Sample standard deviation (0 for fewer than two values).
pub fn std_dev(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
}

pub fn aggregate(records: &[Record]) -> Vec<Aggregate> {
    let mut groups: BTreeMap<(String, usize, String), Vec<&Record>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.method.clone(), r.rank, r.metric_name.clone()))
            .or_default()
            .push(r);
    }
    groups
        .into_iter()
        .map(|((method, rank, metric_name), rows)| {
            let values: Vec<f64> = rows.iter().map(|r| r.value).collect();
            let ratios: Vec<f64> = rows.iter().filter_map(|r| r.ratio).collect();
            let n = values.len();
            Aggregate {
                method,
                rank,
                metric_name,
                count: n,
                mean: values.iter().sum::<f64>() / n as f64,
                std: std_dev(&values),
                median: median(&values),
                min: values.iter().copied().fold(f64::INFINITY, f64::min),
                max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                success_fraction: (!ratios.is_empty())
                    .then(|| ratios.iter().filter(|&&c| c < 1.0).count() as f64 / ratios.len() as f64),
            }
        })
        .collect()
}
