//! TOML experiment configuration.
//!
//! Every key has a default, so an empty file is a valid config. Unknown keys
//! anywhere are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::{AdapterKind, AnlOptions};
use crate::anl::Activation;
use crate::error::{Error, Result};
use crate::spline::SplineGrid;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    MatrixApprox,
    GradBounds,
    MergeDivergence,
    RankSweep,
    DeltaPca,
    LeakyCase,
    ToyTask,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 7] = [
        ExperimentKind::MatrixApprox,
        ExperimentKind::GradBounds,
        ExperimentKind::MergeDivergence,
        ExperimentKind::RankSweep,
        ExperimentKind::DeltaPca,
        ExperimentKind::LeakyCase,
        ExperimentKind::ToyTask,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::MatrixApprox => "matrix_approx",
            ExperimentKind::GradBounds => "grad_bounds",
            ExperimentKind::MergeDivergence => "merge_divergence",
            ExperimentKind::RankSweep => "rank_sweep",
            ExperimentKind::DeltaPca => "delta_pca",
            ExperimentKind::LeakyCase => "leaky_case",
            ExperimentKind::ToyTask => "toy_task",
        }
    }

    /// Seeds used when the config does not list any.
    pub fn default_seed_count(self) -> u64 {
        match self {
            ExperimentKind::MatrixApprox => 10,
            _ => 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputDistribution {
    /// Isotropic standard normal.
    Gaussian,
    /// Uniform on `[-x_max, x_max]` per coordinate.
    Bounded,
}

impl InputDistribution {
    /// Per-coordinate standard deviation of the input.
    pub fn std(self, x_max: f64) -> f64 {
        match self {
            InputDistribution::Gaussian => 1.0,
            InputDistribution::Bounded => x_max / 3f64.sqrt(),
        }
    }
}

/// Residual the toy-task adapters have to learn on top of the frozen base.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Teacher {
    /// `scale · W₂·tanh(W₁x)`.
    Mlp,
    /// Exactly rank-`target.rank` linear map.
    LowRank,
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Dims {
    pub d_in: usize,
    pub d_out: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Self { d_in: 32, d_out: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TargetSection {
    /// Rank of the matrix-approximation target (and of a low-rank teacher).
    pub rank: usize,
    /// Singular values of the matrix-approximation target, length `rank`.
    pub spectrum: Vec<f64>,
    pub input: InputDistribution,
    pub x_max: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub teacher: Teacher,
    pub teacher_hidden: usize,
    pub teacher_scale: f64,
}

impl Default for TargetSection {
    fn default() -> Self {
        Self {
            rank: 8,
            spectrum: vec![8.0, 7.0, 6.0, 5.0, 4.0, 3.0, 2.0, 1.0],
            input: InputDistribution::Gaussian,
            x_max: 1.0,
            n_train: 1024,
            n_test: 2048,
            teacher: Teacher::Mlp,
            teacher_hidden: 16,
            teacher_scale: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterSection {
    pub methods: Vec<AdapterKind>,
    /// Rank for single-rank experiments.
    pub rank: usize,
    /// Ranks visited by the rank sweep.
    pub ranks: Vec<usize>,
    /// Absolute `alpha`; when absent `alpha = 2·rank`, i.e. scaling 2.
    pub alpha: Option<f64>,
    pub activation: Activation,
}

impl Default for AdapterSection {
    fn default() -> Self {
        Self {
            methods: vec![AdapterKind::Lora, AdapterKind::MosLora, AdapterKind::Aurora],
            rank: 2,
            ranks: vec![2, 4, 8, 16],
            alpha: None,
            activation: Activation::Tanh,
        }
    }
}

impl AdapterSection {
    pub fn alpha_for(&self, rank: usize) -> f64 {
        self.alpha.unwrap_or(2.0 * rank as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub warmup_ratio: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    /// Empty means the experiment's default seed list.
    pub seeds: Vec<u64>,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            warmup_ratio: 0.06,
            epochs: 200,
            batch_size: 128,
            weight_decay: 0.0,
            seeds: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplineSection {
    pub degree: usize,
    pub intervals: usize,
    pub lo: f64,
    pub hi: f64,
}

impl Default for SplineSection {
    fn default() -> Self {
        Self {
            degree: 3,
            intervals: 5,
            lo: -1.0,
            hi: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dims: Dims,
    pub target: TargetSection,
    pub adapter: AdapterSection,
    pub train: TrainSection,
    pub spline: SplineSection,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    /// Fills kind-dependent defaults so the result fully describes a run.
    pub fn resolved(&self, kind: ExperimentKind) -> Self {
        let mut c = self.clone();
        if c.train.seeds.is_empty() {
            c.train.seeds = (0..kind.default_seed_count()).collect();
        }
        c
    }

    pub fn validate(&self, kind: ExperimentKind) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dims.d_in == 0 || self.dims.d_out == 0 {
            return bad("dims must be positive".into());
        }
        if self.train.seeds.is_empty() {
            return bad("seed list is empty".into());
        }
        if self.adapter.rank == 0 || self.adapter.ranks.contains(&0) {
            return bad("adapter ranks must be positive".into());
        }
        if self.adapter.methods.is_empty() {
            return bad("adapter.methods is empty".into());
        }
        if self.target.n_train == 0 || self.target.n_test == 0 {
            return bad("n_train and n_test must be positive".into());
        }
        if !(self.target.x_max > 0.0 && self.target.x_max.is_finite()) {
            return bad(format!("x_max must be > 0, got {}", self.target.x_max));
        }
        self.grid()?;
        self.train_config(0)
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        let min_dim = self.dims.d_in.min(self.dims.d_out);
        match kind {
            ExperimentKind::MatrixApprox => {
                if self.target.spectrum.len() != self.target.rank {
                    return bad(format!(
                        "spectrum has {} values but target.rank = {}",
                        self.target.spectrum.len(),
                        self.target.rank
                    ));
                }
                if self.target.rank > min_dim {
                    return bad(format!(
                        "target.rank {} exceeds min(d_in, d_out) = {min_dim}",
                        self.target.rank
                    ));
                }
                if self.target.rank <= self.adapter.rank {
                    return bad(format!(
                        "target.rank ({}) must exceed the adapter rank ({})",
                        self.target.rank, self.adapter.rank
                    ));
                }
                if self.target.spectrum.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
                    return bad("spectrum values must be positive and finite".into());
                }
            }
            ExperimentKind::RankSweep if self.adapter.ranks.is_empty() => {
                return bad("adapter.ranks is empty".into());
            }
            ExperimentKind::DeltaPca if self.train.epochs < 2 => {
                return bad("delta_pca needs at least 2 epochs (3 snapshots)".into());
            }
            ExperimentKind::ToyTask
            | ExperimentKind::MergeDivergence
            | ExperimentKind::GradBounds
            | ExperimentKind::RankSweep
            | ExperimentKind::DeltaPca => {
                if self.target.teacher == Teacher::LowRank && self.target.rank > min_dim {
                    return bad(format!(
                        "target.rank {} exceeds min(d_in, d_out) = {min_dim}",
                        self.target.rank
                    ));
                }
                if self.target.teacher_hidden == 0 {
                    return bad("teacher_hidden must be positive".into());
                }
            }
            _ => {}
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<SplineGrid> {
        SplineGrid::new(
            self.spline.degree,
            self.spline.intervals,
            self.spline.lo,
            self.spline.hi,
        )
        .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn anl_options(&self) -> AnlOptions {
        AnlOptions {
            grid: self.grid().expect("validated"),
            activation: self.adapter.activation,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.train.learning_rate,
            warmup_ratio: self.train.warmup_ratio,
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            weight_decay: self.train.weight_decay,
            seed,
            ..TrainConfig::default()
        }
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        hex::encode(&digest[..8])
    }
}
