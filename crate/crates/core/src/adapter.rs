//! LoRA, MoSLoRA and AuroRA adapters over a frozen base weight.
//!
//! All three share the shape `h = W₀x + s·B·g(A, x)` with `s = alpha/rank`:
//!
//! | kind    | dynamic `g`      | static `g`        |
//! |---------|------------------|-------------------|
//! | LoRA    | `A·x`            | `A·x`             |
//! | MoSLoRA | `W_mix·A·x`      | `W_mix·A·x`       |
//! | AuroRA  | `σ(A·x)`         | `σ(A)·x`          |
//!
//! The static form is what [`Adapter::merge`] folds into the base weight.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::anl::{record_anl, Activation, AnlParams};
use crate::error::{Error, Result};
use crate::spline::SplineGrid;
use crate::tensor::{Checkpoint, Graph, Matrix, Rng, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterKind {
    Lora,
    #[serde(rename = "moslora", alias = "mos_lora")]
    MosLora,
    Aurora,
}

impl AdapterKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AdapterKind::Lora => "lora",
            AdapterKind::MosLora => "moslora",
            AdapterKind::Aurora => "aurora",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "lora" => Ok(AdapterKind::Lora),
            "moslora" | "mos_lora" => Ok(AdapterKind::MosLora),
            "aurora" => Ok(AdapterKind::Aurora),
            other => Err(Error::InvalidArgument(format!("unknown adapter kind {other:?}"))),
        }
    }
}

impl std::fmt::Display for AdapterKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Where the nonlinearity sees the input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForwardMode {
    /// `B·σ(A·x)`.
    Dynamic,
    /// `B·σ(A)·x`, i.e. the merged weight.
    Static,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub a: Matrix,
    pub b: Matrix,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MosLoraAdapter {
    pub a: Matrix,
    pub b: Matrix,
    pub mixer: Matrix,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuroraAdapter {
    pub a: Matrix,
    pub b: Matrix,
    pub anl: AnlParams,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Adapter {
    Lora(LoraAdapter),
    MosLora(MosLoraAdapter),
    Aurora(AuroraAdapter),
}

/// Options only AuroRA consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct AnlOptions {
    pub grid: SplineGrid,
    pub activation: Activation,
}

impl Default for AnlOptions {
    fn default() -> Self {
        Self {
            grid: SplineGrid::default(),
            activation: Activation::Tanh,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub trainable: usize,
    pub formula: String,
    /// Parameters added by the nonlinear layer (`r̃² + r̃·G`), zero otherwise.
    pub anl_extra: usize,
    /// The `2r̃²` order estimate for the same quantity, for comparison.
    pub anl_extra_order: usize,
}

/// Adapter graph handles produced by [`Adapter::record`].
#[derive(Debug, Clone)]
pub struct Recorded {
    /// `s·B·g(A, X)`, shape `d_out × n`.
    pub delta: Var,
    pub params: Vec<(&'static str, Var)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergedWeight {
    pub w: Matrix,
    pub base_id: String,
    pub adapter_id: String,
}

pub fn content_id(ck: &Checkpoint) -> String {
    let digest = Sha256::digest(ck.to_json().as_bytes());
    hex::encode(&digest[..8])
}

impl Adapter {
    /// `A ~ N(0, 1/d_in)`, `B = 0`, mixer `= I`, nonlinear layer at its
    /// defaults; the initial update is exactly zero.
    pub fn init(
        kind: AdapterKind,
        d_in: usize,
        d_out: usize,
        rank: usize,
        alpha: f64,
        anl: &AnlOptions,
        rng: &mut Rng,
    ) -> Result<Self> {
        if d_in == 0 || d_out == 0 || rank == 0 {
            return Err(Error::InvalidArgument(format!(
                "adapter dims must be positive (d_in={d_in}, d_out={d_out}, rank={rank})"
            )));
        }
        if !alpha.is_finite() {
            return Err(Error::InvalidArgument(format!("alpha must be finite, got {alpha}")));
        }
        let a = Matrix::randn(rng, rank, d_in, 1.0 / (d_in as f64).sqrt());
        let b = Matrix::zeros(d_out, rank);
        Ok(match kind {
            AdapterKind::Lora => Adapter::Lora(LoraAdapter { a, b, alpha }),
            AdapterKind::MosLora => Adapter::MosLora(MosLoraAdapter {
                a,
                b,
                mixer: Matrix::identity(rank),
                alpha,
            }),
            AdapterKind::Aurora => {
                let mut params = AnlParams::new(rank, anl.grid.clone());
                params.activation = anl.activation;
                Adapter::Aurora(AuroraAdapter {
                    a,
                    b,
                    anl: params,
                    alpha,
                })
            }
        })
    }

    pub fn kind(&self) -> AdapterKind {
        match self {
            Adapter::Lora(_) => AdapterKind::Lora,
            Adapter::MosLora(_) => AdapterKind::MosLora,
            Adapter::Aurora(_) => AdapterKind::Aurora,
        }
    }

    pub fn a(&self) -> &Matrix {
        match self {
            Adapter::Lora(l) => &l.a,
            Adapter::MosLora(m) => &m.a,
            Adapter::Aurora(a) => &a.a,
        }
    }

    pub fn b(&self) -> &Matrix {
        match self {
            Adapter::Lora(l) => &l.b,
            Adapter::MosLora(m) => &m.b,
            Adapter::Aurora(a) => &a.b,
        }
    }

    pub fn anl(&self) -> Option<&AnlParams> {
        match self {
            Adapter::Aurora(a) => Some(&a.anl),
            _ => None,
        }
    }

    pub fn rank(&self) -> usize {
        self.a().rows()
    }

    pub fn d_in(&self) -> usize {
        self.a().cols()
    }

    pub fn d_out(&self) -> usize {
        self.b().rows()
    }

    pub fn alpha(&self) -> f64 {
        match self {
            Adapter::Lora(l) => l.alpha,
            Adapter::MosLora(m) => m.alpha,
            Adapter::Aurora(a) => a.alpha,
        }
    }

    pub fn set_alpha(&mut self, alpha: f64) {
        match self {
            Adapter::Lora(l) => l.alpha = alpha,
            Adapter::MosLora(m) => m.alpha = alpha,
            Adapter::Aurora(a) => a.alpha = alpha,
        }
    }

    pub fn scaling(&self) -> f64 {
        self.alpha() / self.rank() as f64
    }

    /// Trainable matrices in a fixed order, named as in checkpoints.
    pub fn params(&self) -> Vec<(&'static str, &Matrix)> {
        match self {
            Adapter::Lora(l) => vec![("adapter.A", &l.a), ("adapter.B", &l.b)],
            Adapter::MosLora(m) => vec![("adapter.A", &m.a), ("adapter.B", &m.b), ("adapter.W_mix", &m.mixer)],
            Adapter::Aurora(a) => vec![
                ("adapter.A", &a.a),
                ("adapter.B", &a.b),
                ("anl.H", &a.anl.h),
                ("spline.c", a.anl.coeffs.matrix()),
            ],
        }
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        match self {
            Adapter::Lora(l) => vec![("adapter.A", &mut l.a), ("adapter.B", &mut l.b)],
            Adapter::MosLora(m) => vec![
                ("adapter.A", &mut m.a),
                ("adapter.B", &mut m.b),
                ("adapter.W_mix", &mut m.mixer),
            ],
            Adapter::Aurora(a) => vec![
                ("adapter.A", &mut a.a),
                ("adapter.B", &mut a.b),
                ("anl.H", &mut a.anl.h),
                ("spline.c", a.anl.coeffs.matrix_mut()),
            ],
        }
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.rows() != self.d_in() {
            return Err(Error::shape("adapter_forward", self.a().shape(), x.shape()));
        }
        Ok(())
    }

    /// Scaled adapter branch `s·B·g(A, X)` without the base term.
    pub fn adapter_output(&self, x: &Matrix, mode: ForwardMode) -> Result<Matrix> {
        self.check_input(x)?;
        let s = self.scaling();
        let unscaled = match (self, mode) {
            (Adapter::Lora(l), ForwardMode::Dynamic) => l.b.matmul(&l.a.matmul(x)?)?,
            (Adapter::Lora(l), ForwardMode::Static) => l.b.matmul(&l.a)?.matmul(x)?,
            (Adapter::MosLora(m), ForwardMode::Dynamic) => m.b.matmul(&m.mixer.matmul(&m.a.matmul(x)?)?)?,
            (Adapter::MosLora(m), ForwardMode::Static) => m.b.matmul(&m.mixer)?.matmul(&m.a)?.matmul(x)?,
            (Adapter::Aurora(a), ForwardMode::Dynamic) => a.b.matmul(&a.anl.forward(&a.a.matmul(x)?)?)?,
            (Adapter::Aurora(a), ForwardMode::Static) => a.b.matmul(&a.anl.forward(&a.a)?)?.matmul(x)?,
        };
        unscaled.scale(s)
    }

    /// `W₀X + s·B·g(A, X)`; `W₀` is only read.
    pub fn forward_train(&self, w0: &Matrix, x: &Matrix, mode: ForwardMode) -> Result<Matrix> {
        self.check_base(w0)?;
        w0.matmul(x)?.add(&self.adapter_output(x, mode)?)
    }

    fn check_base(&self, w0: &Matrix) -> Result<()> {
        if w0.shape() != (self.d_out(), self.d_in()) {
            return Err(Error::shape("base_weight", w0.shape(), (self.d_out(), self.d_in())));
        }
        Ok(())
    }

    /// Static update `ΔW = s·B·σ(A)` (σ = identity for LoRA, `W_mix` for MoSLoRA).
    pub fn delta_weight(&self) -> Result<Matrix> {
        let unscaled = match self {
            Adapter::Lora(l) => l.b.matmul(&l.a)?,
            Adapter::MosLora(m) => m.b.matmul(&m.mixer)?.matmul(&m.a)?,
            Adapter::Aurora(a) => a.b.matmul(&a.anl.forward(&a.a)?)?,
        };
        unscaled.scale(self.scaling())
    }

    pub fn merge(&self, w0: &Matrix) -> Result<MergedWeight> {
        self.check_base(w0)?;
        let w = w0.add(&self.delta_weight()?)?;
        let mut base = Checkpoint::new();
        base.insert("W0", w0.clone());
        Ok(MergedWeight {
            w,
            base_id: content_id(&base),
            adapter_id: content_id(&self.to_checkpoint()),
        })
    }

    /// Records the scaled adapter branch on `g` for input `x`.
    pub fn record(&self, g: &mut Graph, x: Var, mode: ForwardMode) -> Result<Recorded> {
        self.check_input(g.value(x)?)?;
        let s = self.scaling();
        let params: Vec<(&'static str, Var)> = self
            .params()
            .into_iter()
            .map(|(name, m)| (name, g.param(m.clone())))
            .collect();
        let var = |name: &str| {
            params
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, v)| *v)
                .expect("parameter registered above")
        };
        let (a, b) = (var("adapter.A"), var("adapter.B"));
        let unscaled = match (self, mode) {
            (Adapter::Lora(_), ForwardMode::Dynamic) => {
                let ax = g.matmul(a, x)?;
                g.matmul(b, ax)?
            }
            (Adapter::Lora(_), ForwardMode::Static) => {
                let ba = g.matmul(b, a)?;
                g.matmul(ba, x)?
            }
            (Adapter::MosLora(_), ForwardMode::Dynamic) => {
                let ax = g.matmul(a, x)?;
                let max = g.matmul(var("adapter.W_mix"), ax)?;
                g.matmul(b, max)?
            }
            (Adapter::MosLora(_), ForwardMode::Static) => {
                let bm = g.matmul(b, var("adapter.W_mix"))?;
                let bma = g.matmul(bm, a)?;
                g.matmul(bma, x)?
            }
            (Adapter::Aurora(au), ForwardMode::Dynamic) => {
                let ax = g.matmul(a, x)?;
                let hidden = record_anl(g, ax, var("anl.H"), var("spline.c"), &au.anl.grid, au.anl.activation)?;
                g.matmul(b, hidden)?
            }
            (Adapter::Aurora(au), ForwardMode::Static) => {
                let sa = record_anl(g, a, var("anl.H"), var("spline.c"), &au.anl.grid, au.anl.activation)?;
                let bsa = g.matmul(b, sa)?;
                g.matmul(bsa, x)?
            }
        };
        let delta = g.scale(unscaled, s)?;
        Ok(Recorded { delta, params })
    }

    pub fn param_count(&self) -> ParamCount {
        let (r, din, dout) = (self.rank(), self.d_in(), self.d_out());
        match self {
            Adapter::Lora(_) => param_count_lora(r, din, dout),
            Adapter::MosLora(_) => {
                let base = r * (din + dout);
                ParamCount {
                    trainable: base + r * r,
                    formula: format!("r(d_in+d_out)+r^2 = {r}*({din}+{dout})+{}", r * r),
                    anl_extra: 0,
                    anl_extra_order: 0,
                }
            }
            Adapter::Aurora(a) => param_count_aurora(r, din, dout, a.anl.grid.basis_count()),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        for (name, m) in self.params() {
            ck.insert(name, m.clone());
        }
        let mut meta = serde_json::json!({
            "kind": self.kind().as_str(),
            "r": self.rank(),
            "alpha": self.alpha(),
        });
        if let Adapter::Aurora(a) = self {
            let (lo, hi) = a.anl.grid.domain();
            meta["G"] = a.anl.grid.basis_count().into();
            meta["degree"] = a.anl.grid.degree().into();
            meta["intervals"] = a.anl.grid.intervals().into();
            meta["domain"] = serde_json::json!([lo, hi]);
            meta["activation"] = serde_json::to_value(a.anl.activation).expect("serializable");
        }
        ck.metadata = Some(meta);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta = ck
            .metadata
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("adapter checkpoint without metadata".into()))?;
        let field = |k: &str| {
            meta.get(k)
                .ok_or_else(|| Error::InvalidArgument(format!("checkpoint metadata missing {k:?}")))
        };
        let kind = AdapterKind::parse(field("kind")?.as_str().unwrap_or_default())?;
        let alpha = field("alpha")?
            .as_f64()
            .ok_or_else(|| Error::InvalidArgument("alpha must be a number".into()))?;
        let a = ck.get("adapter.A")?.clone();
        let b = ck.get("adapter.B")?.clone();
        if b.cols() != a.rows() {
            return Err(Error::shape("adapter_checkpoint", a.shape(), b.shape()));
        }
        Ok(match kind {
            AdapterKind::Lora => Adapter::Lora(LoraAdapter { a, b, alpha }),
            AdapterKind::MosLora => Adapter::MosLora(MosLoraAdapter {
                a,
                b,
                mixer: ck.get("adapter.W_mix")?.clone(),
                alpha,
            }),
            AdapterKind::Aurora => {
                let usize_field = |k: &str| -> Result<usize> {
                    field(k)?
                        .as_u64()
                        .map(|v| v as usize)
                        .ok_or_else(|| Error::InvalidArgument(format!("{k} must be an integer")))
                };
                let domain: (f64, f64) = serde_json::from_value(field("domain")?.clone())?;
                let grid = SplineGrid::new(usize_field("degree")?, usize_field("intervals")?, domain.0, domain.1)?;
                let activation: Activation = serde_json::from_value(field("activation")?.clone())?;
                let anl =
                    AnlParams::with_parts(ck.get("anl.H")?.clone(), grid, ck.get("spline.c")?.clone(), activation)?;
                if anl.rank() != a.rows() {
                    return Err(Error::shape("adapter_checkpoint", a.shape(), anl.h.shape()));
                }
                Adapter::Aurora(AuroraAdapter { a, b, anl, alpha })
            }
        })
    }
}

pub fn param_count_lora(r: usize, d_in: usize, d_out: usize) -> ParamCount {
    ParamCount {
        trainable: r * (d_in + d_out),
        formula: format!("r(d_in+d_out) = {r}*({d_in}+{d_out})"),
        anl_extra: 0,
        anl_extra_order: 0,
    }
}

/// `r̃(d_in+d_out) + r̃² + r̃·G`.
pub fn param_count_aurora(r: usize, d_in: usize, d_out: usize, basis_count: usize) -> ParamCount {
    let extra = r * r + r * basis_count;
    ParamCount {
        trainable: r * (d_in + d_out) + extra,
        formula: format!(
            "r(d_in+d_out)+r^2+r*G = {r}*({d_in}+{d_out})+{}+{}",
            r * r,
            r * basis_count
        ),
        anl_extra: extra,
        anl_extra_order: 2 * r * r,
    }
}

/// Merged-weight inference `W·X`.
pub fn forward_inference(merged: &MergedWeight, x: &Matrix) -> Result<Matrix> {
    merged.w.matmul(x)
}

/// Sign regime of `A = [a1 a2]` under a leaky ReLU.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LeakyRegime {
    BothPositive,
    FirstNonPositive,
    SecondNonPositive,
    BothNonPositive,
}

pub fn leaky_regime(a1: f64, a2: f64) -> LeakyRegime {
    match (a1 > 0.0, a2 > 0.0) {
        (true, true) => LeakyRegime::BothPositive,
        (false, true) => LeakyRegime::FirstNonPositive,
        (true, false) => LeakyRegime::SecondNonPositive,
        (false, false) => LeakyRegime::BothNonPositive,
    }
}

/// `ΔW = B·LeakyReLU(A)` for `A = [a1 a2]` (1×2) and `B = [b1; b2]` (2×1).
///
/// Rows follow `B`, columns follow `A`: entry `(i, j)` is `bᵢ·act(aⱼ)`.
pub fn leaky_case_delta_w(a1: f64, a2: f64, b1: f64, b2: f64, slope: f64) -> Result<Matrix> {
    let a = Matrix::from_rows(&[vec![a1, a2]])?;
    let b = Matrix::from_rows(&[vec![b1], vec![b2]])?;
    let act = crate::tensor::elementwise(crate::tensor::ElementwiseOp::LeakyRelu(slope), &[&a])?;
    b.matmul(&act)
}
