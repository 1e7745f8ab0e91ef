//! Define-by-run reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Graph`] is an append-only tape: every operation evaluates eagerly,
//! stores its value and parents, and returns a [`Var`] handle. Because nodes
//! are appended in evaluation order, the tape is topologically sorted and
//! [`Graph::backward`] is a single reverse sweep.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::spline::{self, SplineGrid};
use crate::tensor::matrix::{leaky_relu, sigmoid};
use crate::tensor::Matrix;

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(0);

/// Handle to a node of one particular [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Hadamard(usize, usize),
    Scale(usize, f64),
    Tanh(usize),
    Sigmoid(usize),
    LeakyRelu(usize, f64),
    Spline {
        z: usize,
        coeffs: usize,
        grid: SplineGrid,
    },
    Sum(usize),
    MeanSquaredError(usize, usize),
    SoftmaxCrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Matrix,
    },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    trainable: bool,
    needs_grad: bool,
}

#[derive(Debug)]
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to the graph's trainable leaves.
#[derive(Debug, Default)]
pub struct Gradients {
    by_index: HashMap<usize, Matrix>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.by_index.get(&v.index)
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.by_index.remove(&v.index)
    }

    pub fn len(&self) -> usize {
        self.by_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_index.is_empty()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(Error::UnknownNode(v.index));
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Matrix, op: Op, trainable: bool) -> Var {
        let needs_grad = trainable || self.parents(&op).iter().any(|&p| self.nodes[p].needs_grad);
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            trainable,
            needs_grad,
        });
        Var { graph: self.id, index }
    }

    fn parents(&self, op: &Op) -> Vec<usize> {
        match *op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Hadamard(a, b) | Op::MeanSquaredError(a, b) => {
                vec![a, b]
            }
            Op::Scale(a, _) | Op::Tanh(a) | Op::Sigmoid(a) | Op::LeakyRelu(a, _) | Op::Sum(a) => {
                vec![a]
            }
            Op::Spline { z, coeffs, .. } => vec![z, coeffs],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![logits],
        }
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, false)
    }

    /// Leaf whose gradient is reported by [`Graph::backward`].
    pub fn param(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> Result<&Matrix> {
        Ok(&self.nodes[self.idx(v)?].value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let value = self.nodes[ia].value.matmul(&self.nodes[ib].value)?;
        Ok(self.push(value, Op::MatMul(ia, ib), false))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let value = self.nodes[ia].value.add(&self.nodes[ib].value)?;
        Ok(self.push(value, Op::Add(ia, ib), false))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let value = self.nodes[ia].value.sub(&self.nodes[ib].value)?;
        Ok(self.push(value, Op::Sub(ia, ib), false))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let value = self.nodes[ia].value.hadamard(&self.nodes[ib].value)?;
        Ok(self.push(value, Op::Hadamard(ia, ib), false))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        let value = self.nodes[ia].value.scale(c)?;
        Ok(self.push(value, Op::Scale(ia, c), false))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let value = self.nodes[ia].value.tanh();
        Ok(self.push(value, Op::Tanh(ia), false))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let value = self.nodes[ia].value.map(sigmoid);
        Ok(self.push(value, Op::Sigmoid(ia), false))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        let value = self.nodes[ia].value.try_map("leaky_relu", |v| leaky_relu(v, slope))?;
        Ok(self.push(value, Op::LeakyRelu(ia, slope), false))
    }

    /// Per-row learnable spline map of `z` (rows must match `coeffs`).
    pub fn spline(&mut self, z: Var, coeffs: Var, grid: &SplineGrid) -> Result<Var> {
        let (iz, ic) = (self.idx(z)?, self.idx(coeffs)?);
        let value = spline::learnable_forward(grid, &self.nodes[ic].value, &self.nodes[iz].value)?;
        Ok(self.push(
            value,
            Op::Spline {
                z: iz,
                coeffs: ic,
                grid: grid.clone(),
            },
            false,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let value = Matrix::checked(1, 1, vec![self.nodes[ia].value.sum()], "sum")?;
        Ok(self.push(value, Op::Sum(ia), false))
    }

    /// Mean over all entries of `(pred - target)²`.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (ip, it) = (self.idx(pred)?, self.idx(target)?);
        let diff = self.nodes[ip].value.sub(&self.nodes[it].value)?;
        let n = diff.len() as f64;
        let value = diff.data().iter().map(|d| d * d).sum::<f64>() / n;
        let value = Matrix::checked(1, 1, vec![value], "mse")?;
        Ok(self.push(value, Op::MeanSquaredError(ip, it), false))
    }

    /// Mean softmax cross-entropy; column `j` of `logits` scores sample `j`
    /// whose class is `labels[j]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let il = self.idx(logits)?;
        let z = &self.nodes[il].value;
        if labels.len() != z.cols() {
            return Err(Error::shape(
                "softmax_cross_entropy",
                z.shape(),
                (z.rows(), labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= z.rows()) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {} classes",
                z.rows()
            )));
        }
        let mut probs = Matrix::zeros(z.rows(), z.cols());
        let mut loss = 0.0;
        for j in 0..z.cols() {
            let col = z.column(j);
            let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = col.iter().map(|v| (v - max).exp()).sum();
            for (i, v) in col.iter().enumerate() {
                probs[(i, j)] = (v - max).exp() / denom;
            }
            loss += denom.ln() + max - col[labels[j]];
        }
        let value = Matrix::checked(1, 1, vec![loss / z.cols() as f64], "softmax_cross_entropy")?;
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits: il,
                labels: labels.to_vec(),
                probs,
            },
            false,
        ))
    }

    /// Reverse sweep from a 1x1 `loss`; returns gradients for every trainable
    /// leaf that the loss depends on (others get an all-zero entry).
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let il = self.idx(loss)?;
        let lv = &self.nodes[il].value;
        if lv.shape() != (1, 1) {
            return Err(Error::NonScalarLoss {
                rows: lv.rows(),
                cols: lv.cols(),
            });
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; il + 1];
        grads[il] = Some(Matrix::filled(1, 1, 1.0));

        for i in (0..=il).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }

        let mut out = Gradients::default();
        for (i, node) in self.nodes.iter().enumerate().take(il + 1) {
            if node.trainable {
                let g = grads[i]
                    .take()
                    .unwrap_or_else(|| Matrix::zeros(node.value.rows(), node.value.cols()));
                out.by_index.insert(i, g);
            }
        }
        Ok(out)
    }

    fn propagate(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        let node = &self.nodes[i];
        let val = |j: usize| &self.nodes[j].value;
        let wants = |j: usize| self.nodes[j].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, g.matmul(&val(*b).transpose())?)?;
                }
                if wants(*b) {
                    accumulate(grads, *b, val(*a).transpose().matmul(g)?)?;
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, g.clone())?;
                }
                if wants(*b) {
                    accumulate(grads, *b, g.clone())?;
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, g.clone())?;
                }
                if wants(*b) {
                    accumulate(grads, *b, g.scale(-1.0)?)?;
                }
            }
            Op::Hadamard(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, g.hadamard(val(*b))?)?;
                }
                if wants(*b) {
                    accumulate(grads, *b, g.hadamard(val(*a))?)?;
                }
            }
            Op::Scale(a, c) => accumulate(grads, *a, g.scale(*c)?)?,
            Op::Tanh(a) => {
                let local = node.value.map(|y| 1.0 - y * y);
                accumulate(grads, *a, g.hadamard(&local)?)?;
            }
            Op::Sigmoid(a) => {
                let local = node.value.map(|y| y * (1.0 - y));
                accumulate(grads, *a, g.hadamard(&local)?)?;
            }
            Op::LeakyRelu(a, slope) => {
                let s = *slope;
                let local = val(*a).map(|x| if x > 0.0 { 1.0 } else { s });
                accumulate(grads, *a, g.hadamard(&local)?)?;
            }
            Op::Spline { z, coeffs, grid } => {
                let (gc, gz) = spline::learnable_backward(grid, val(*coeffs), val(*z), g)?;
                if wants(*coeffs) {
                    accumulate(grads, *coeffs, gc)?;
                }
                if wants(*z) {
                    accumulate(grads, *z, gz)?;
                }
            }
            Op::Sum(a) => {
                let v = val(*a);
                accumulate(grads, *a, Matrix::filled(v.rows(), v.cols(), g[(0, 0)]))?;
            }
            Op::MeanSquaredError(a, b) => {
                let diff = val(*a).sub(val(*b))?;
                let d = diff.scale(2.0 * g[(0, 0)] / diff.len() as f64)?;
                if wants(*b) {
                    accumulate(grads, *b, d.scale(-1.0)?)?;
                }
                if wants(*a) {
                    accumulate(grads, *a, d)?;
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let mut d = probs.clone();
                for (j, &l) in labels.iter().enumerate() {
                    d[(l, j)] -= 1.0;
                }
                let n = labels.len() as f64;
                accumulate(grads, *logits, d.scale(g[(0, 0)] / n)?)?;
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Matrix>], i: usize, g: Matrix) -> Result<()> {
    grads[i] = Some(match grads[i].take() {
        Some(prev) => prev.add(&g)?,
        None => g,
    });
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_grad, grad_close, Rng};

    #[test]
    fn sum_of_matvec_gradient_is_outer_product() {
        let mut rng = Rng::new(0);
        let w = Matrix::randn(&mut rng, 3, 4, 1.0);
        let x = Matrix::randn(&mut rng, 4, 1, 1.0);
        let mut g = Graph::new();
        let wv = g.param(w);
        let xv = g.constant(x.clone());
        let y = g.matmul(wv, xv).unwrap();
        let loss = g.sum(y).unwrap();
        let grads = g.backward(loss).unwrap();
        let expect = Matrix::filled(3, 1, 1.0).matmul(&x.transpose()).unwrap();
        assert_eq!(grads.get(wv).unwrap(), &expect);
        assert!(grads.get(xv).is_none());
    }

    #[test]
    fn tanh_at_zero_has_unit_gradient() {
        let mut g = Graph::new();
        let z = g.param(Matrix::zeros(2, 3));
        let t = g.tanh(z).unwrap();
        let loss = g.sum(t).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(z).unwrap(), &Matrix::filled(2, 3, 1.0));
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::new();
        let a = g.param(Matrix::zeros(2, 2));
        assert!(matches!(g.backward(a), Err(Error::NonScalarLoss { rows: 2, cols: 2 })));
        let mut other = Graph::new();
        let foreign = other.param(Matrix::zeros(1, 1));
        assert!(matches!(g.backward(foreign), Err(Error::UnknownNode(_))));
        assert!(g.tanh(foreign).is_err());
    }

    #[test]
    fn reused_node_accumulates() {
        // loss = sum(a ⊙ a) ⇒ grad = 2a
        let mut rng = Rng::new(1);
        let a0 = Matrix::randn(&mut rng, 2, 2, 1.0);
        let mut g = Graph::new();
        let a = g.param(a0.clone());
        let sq = g.hadamard(a, a).unwrap();
        let loss = g.sum(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap(), &a0.scale(2.0).unwrap());
    }

    #[test]
    fn unused_param_gets_zero_gradient() {
        let mut g = Graph::new();
        let unused = g.param(Matrix::filled(1, 2, 3.0));
        let a = g.param(Matrix::filled(1, 1, 2.0));
        let loss = g.sum(a).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(unused).unwrap(), &Matrix::zeros(1, 2));
    }

    #[test]
    fn cross_entropy_matches_finite_differences() {
        let mut rng = Rng::new(2);
        let labels = [0usize, 2, 1, 2];
        for _ in 0..20 {
            let z0 = Matrix::randn(&mut rng, 3, 4, 2.0);
            let mut g = Graph::new();
            let z = g.param(z0.clone());
            let loss = g.softmax_cross_entropy(z, &labels).unwrap();
            let grads = g.backward(loss).unwrap();
            let fd = finite_diff_grad(
                |m| {
                    let mut g = Graph::new();
                    let z = g.constant(m.clone());
                    let l = g.softmax_cross_entropy(z, &labels)?;
                    Ok(g.value(l)?[(0, 0)])
                },
                &z0,
                1e-5,
            )
            .unwrap();
            assert!(grad_close(grads.get(z).unwrap(), &fd, 1e-5));
        }
    }

    #[test]
    fn cross_entropy_validates_labels() {
        let mut g = Graph::new();
        let z = g.param(Matrix::zeros(2, 2));
        assert!(g.softmax_cross_entropy(z, &[0]).is_err());
        assert!(g.softmax_cross_entropy(z, &[0, 2]).is_err());
    }
}
