//! AdamW with a linear warmup/decay schedule and the adapter training loop.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::{Adapter, ForwardMode};
use crate::error::{Error, Result};
use crate::tensor::{Gradients, Graph, Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    SoftmaxCrossEntropy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub warmup_ratio: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub loss: LossKind,
    /// Form of the adapter used during training.
    pub mode: ForwardMode,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            warmup_ratio: 0.06,
            epochs: 10,
            batch_size: 64,
            weight_decay: 0.0,
            seed: 0,
            loss: LossKind::Mse,
            mode: ForwardMode::Dynamic,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return bad(format!("warmup_ratio must be in [0, 1), got {}", self.warmup_ratio));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0) {
            return bad("invalid AdamW constants".into());
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self, n: usize) -> usize {
        self.epochs * self.steps_per_epoch(n)
    }
}

/// Linear ramp `0 → lr` over `round(warmup_ratio·total)` steps, then linear
/// decay to `0` at `total`.
pub fn lr_at(config: &TrainConfig, step: usize, total: usize) -> f64 {
    if total == 0 || step >= total {
        return 0.0;
    }
    let lr = config.learning_rate;
    let warmup = (config.warmup_ratio * total as f64).round() as usize;
    if step < warmup {
        lr * step as f64 / warmup as f64
    } else {
        lr * (total - step) as f64 / (total - warmup) as f64
    }
}

/// Per-parameter AdamW moments.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: usize,
    pub first: Vec<Matrix>,
    pub second: Vec<Matrix>,
    pub lr: f64,
}

impl TrainState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Matrix>) -> Self {
        let first: Vec<Matrix> = params.into_iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        Self {
            step: 0,
            second: first.clone(),
            first,
            lr: 0.0,
        }
    }
}

/// One AdamW update with decoupled weight decay:
/// `p ← p - lr·(m̂/(√v̂ + ε) + wd·p)`.
pub fn adamw_step(
    state: &mut TrainState,
    params: &mut [(&'static str, &mut Matrix)],
    grads: &[Matrix],
    lr: f64,
    config: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(Error::InvalidArgument(format!(
            "{} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.first.len()
        )));
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::shape("adamw_step", p.shape(), g.shape()));
        }
        if g.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NanGradient {
                name: name.to_string(),
                step: state.step,
            });
        }
    }
    state.step += 1;
    state.lr = lr;
    let t = state.step as i32;
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);
    for (k, ((_, p), g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.first[k].data_mut();
        let v = state.second[k].data_mut();
        for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *mv = config.beta1 * *mv + (1.0 - config.beta1) * gv;
            *vv = config.beta2 * *vv + (1.0 - config.beta2) * gv * gv;
            let update = (*mv / bc1) / ((*vv / bc2).sqrt() + config.eps);
            *pv -= lr * (update + config.weight_decay * *pv);
        }
        if p.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "adamw_step" });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Regression(Matrix),
    Classes(Vec<usize>),
}

/// Samples are columns: `x` is `d_in × n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub target: Target,
}

impl Dataset {
    pub fn regression(x: Matrix, y: Matrix) -> Result<Self> {
        if x.cols() != y.cols() {
            return Err(Error::shape("dataset", x.shape(), y.shape()));
        }
        Ok(Self {
            x,
            target: Target::Regression(y),
        })
    }

    pub fn classification(x: Matrix, labels: Vec<usize>) -> Result<Self> {
        if x.cols() != labels.len() {
            return Err(Error::shape("dataset", x.shape(), (1, labels.len())));
        }
        Ok(Self {
            x,
            target: Target::Classes(labels),
        })
    }

    pub fn len(&self) -> usize {
        self.x.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn batch(&self, idx: &[usize]) -> Result<(Matrix, Target)> {
        if idx.len() == self.len() && idx.iter().enumerate().all(|(i, &j)| i == j) {
            return Ok((self.x.clone(), self.target.clone()));
        }
        let x = self.x.select_columns(idx)?;
        let t = match &self.target {
            Target::Regression(y) => Target::Regression(y.select_columns(idx)?),
            Target::Classes(l) => Target::Classes(idx.iter().map(|&i| l[i]).collect()),
        };
        Ok((x, t))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub adapter: Adapter,
    pub curve: Vec<StepRecord>,
    /// Merged `ΔW` before training and after every epoch.
    pub snapshots: Vec<Matrix>,
}

impl TrainOutput {
    pub fn final_loss(&self) -> Option<f64> {
        self.curve.last().map(|r| r.loss)
    }

    /// `step,loss,lr` rows.
    pub fn write_loss_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("step,loss,lr\n");
        for r in &self.curve {
            out.push_str(&format!("{},{:.17e},{:.17e}\n", r.step, r.loss, r.lr));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// One checkpoint JSON per epoch snapshot, `delta_epoch_XXX.json`.
    pub fn write_snapshots(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (epoch, s) in self.snapshots.iter().enumerate() {
            let mut ck = crate::tensor::Checkpoint::new();
            ck.insert("delta_w", s.clone());
            ck.metadata = Some(serde_json::json!({ "epoch": epoch }));
            ck.save(&dir.join(format!("delta_epoch_{epoch:03}.json")))?;
        }
        Ok(())
    }
}

/// Everything a probe can inspect at one optimizer step, before the update.
pub struct StepView<'a> {
    pub step: usize,
    pub adapter: &'a Adapter,
    pub base: &'a Matrix,
    pub x: &'a Matrix,
    pub target: &'a Target,
    pub output: &'a Matrix,
    pub loss: f64,
    pub grads: &'a [(&'static str, Matrix)],
    /// `∂loss/∂x`, present when the probe asked for it.
    pub input_grad: Option<&'a Matrix>,
}

pub trait StepProbe {
    fn wants_input_grad(&self) -> bool {
        false
    }

    fn observe(&mut self, view: &StepView<'_>) -> Result<()>;
}

struct NoProbe;

impl StepProbe for NoProbe {
    fn observe(&mut self, _: &StepView<'_>) -> Result<()> {
        Ok(())
    }
}

pub fn train(adapter: Adapter, w0: &Matrix, data: &Dataset, config: &TrainConfig) -> Result<TrainOutput> {
    train_with_probe(adapter, w0, data, config, &mut NoProbe)
}

/// Runs `config.epochs` passes over `data`. `w0` is borrowed immutably and
/// enters the graph only as a constant.
pub fn train_with_probe(
    mut adapter: Adapter,
    w0: &Matrix,
    data: &Dataset,
    config: &TrainConfig,
    probe: &mut dyn StepProbe,
) -> Result<TrainOutput> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    if w0.shape() != (adapter.d_out(), adapter.d_in()) || data.x.rows() != adapter.d_in() {
        return Err(Error::shape("train", w0.shape(), data.x.shape()));
    }
    let n = data.len();
    let total = config.total_steps(n);
    let mut rng = Rng::new(config.seed).fork(1);
    let mut state = TrainState::new(adapter.params().into_iter().map(|(_, m)| m));
    let mut curve = Vec::with_capacity(total);
    let mut snapshots = vec![adapter.delta_weight()?];
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;

    for _epoch in 0..config.epochs {
        if config.batch_size < n {
            rng.shuffle(&mut order);
        }
        for idx in order.chunks(config.batch_size) {
            let (xb, tb) = data.batch(idx)?;
            let lr = lr_at(config, step + 1, total + 1);
            let (loss, grads, input_grad, output) =
                match step_forward_backward(&adapter, w0, &xb, &tb, config, probe.wants_input_grad()) {
                    Ok(v) => v,
                    Err(Error::NonFinite { .. }) => {
                        return Err(Error::Diverged {
                            step,
                            loss: f64::NAN,
                            last_good: Box::new(adapter),
                        })
                    }
                    Err(e) => return Err(e),
                };
            probe.observe(&StepView {
                step,
                adapter: &adapter,
                base: w0,
                x: &xb,
                target: &tb,
                output: &output,
                loss,
                grads: &grads,
                input_grad: input_grad.as_ref(),
            })?;
            let before = adapter.clone();
            let grad_mats: Vec<Matrix> = grads.into_iter().map(|(_, g)| g).collect();
            match adamw_step(&mut state, &mut adapter.params_mut(), &grad_mats, lr, config) {
                Ok(()) => {}
                Err(Error::NonFinite { .. }) => {
                    return Err(Error::Diverged {
                        step,
                        loss,
                        last_good: Box::new(before),
                    })
                }
                Err(e) => return Err(e),
            }
            curve.push(StepRecord { step, loss, lr });
            step += 1;
        }
        snapshots.push(adapter.delta_weight()?);
    }
    Ok(TrainOutput {
        adapter,
        curve,
        snapshots,
    })
}

type StepResult = (f64, Vec<(&'static str, Matrix)>, Option<Matrix>, Matrix);

fn step_forward_backward(
    adapter: &Adapter,
    w0: &Matrix,
    xb: &Matrix,
    tb: &Target,
    config: &TrainConfig,
    want_input_grad: bool,
) -> Result<StepResult> {
    let mut g = Graph::new();
    let x = if want_input_grad {
        g.param(xb.clone())
    } else {
        g.constant(xb.clone())
    };
    let w = g.constant(w0.clone());
    let base = g.matmul(w, x)?;
    let rec = adapter.record(&mut g, x, config.mode)?;
    let h = g.add(base, rec.delta)?;
    let loss = match (tb, config.loss) {
        (Target::Regression(y), LossKind::Mse) => {
            let yv = g.constant(y.clone());
            g.mse(h, yv)?
        }
        (Target::Classes(labels), LossKind::SoftmaxCrossEntropy) => g.softmax_cross_entropy(h, labels)?,
        _ => {
            return Err(Error::InvalidArgument(format!(
                "loss {:?} does not match dataset target",
                config.loss
            )))
        }
    };
    let loss_value = g.value(loss)?[(0, 0)];
    let mut grads: Gradients = g.backward(loss)?;
    let named = rec
        .params
        .iter()
        .map(|(name, v)| {
            let m = grads.take(*v).expect("trainable leaf has a gradient");
            (*name, m)
        })
        .collect();
    let input_grad = if want_input_grad { grads.take(x) } else { None };
    Ok((loss_value, named, input_grad, g.value(h)?.clone()))
}

/// Mean squared error of the adapted layer on `(x, y)`.
pub fn evaluate_mse(adapter: &Adapter, w0: &Matrix, x: &Matrix, y: &Matrix, mode: ForwardMode) -> Result<f64> {
    let pred = adapter.forward_train(w0, x, mode)?;
    let diff = pred.sub(y)?;
    Ok(diff.data().iter().map(|d| d * d).sum::<f64>() / diff.len() as f64)
}
