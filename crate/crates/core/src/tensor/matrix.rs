use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::Rng;

/// Dense row-major `f64` matrix.
///
/// Every constructor and public operation rejects NaN/Inf, so a `Matrix`
/// in hand always holds finite values.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Element-wise operations supported by [`elementwise`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ElementwiseOp {
    Tanh,
    Sigmoid,
    LeakyRelu(f64),
    Add,
    Sub,
    Hadamard,
    Scale(f64),
}

impl ElementwiseOp {
    fn arity(self) -> usize {
        match self {
            ElementwiseOp::Add | ElementwiseOp::Sub | ElementwiseOp::Hadamard => 2,
            _ => 1,
        }
    }

    fn name(self) -> &'static str {
        match self {
            ElementwiseOp::Tanh => "tanh",
            ElementwiseOp::Sigmoid => "sigmoid",
            ElementwiseOp::LeakyRelu(_) => "leaky_relu",
            ElementwiseOp::Add => "add",
            ElementwiseOp::Sub => "sub",
            ElementwiseOp::Hadamard => "hadamard",
            ElementwiseOp::Scale(_) => "scale",
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn leaky_relu(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

/// Applies `op` to one (unary) or two (binary) operands of equal shape.
pub fn elementwise(op: ElementwiseOp, operands: &[&Matrix]) -> Result<Matrix> {
    if operands.len() != op.arity() {
        return Err(Error::InvalidArgument(format!(
            "{} expects {} operand(s), got {}",
            op.name(),
            op.arity(),
            operands.len()
        )));
    }
    let a = operands[0];
    let data: Vec<f64> = match op {
        ElementwiseOp::Tanh => a.data.iter().map(|v| v.tanh()).collect(),
        ElementwiseOp::Sigmoid => a.data.iter().map(|&v| sigmoid(v)).collect(),
        ElementwiseOp::LeakyRelu(s) => a.data.iter().map(|&v| leaky_relu(v, s)).collect(),
        ElementwiseOp::Scale(c) => a.data.iter().map(|v| v * c).collect(),
        ElementwiseOp::Add | ElementwiseOp::Sub | ElementwiseOp::Hadamard => {
            let b = operands[1];
            if a.shape() != b.shape() {
                return Err(Error::shape(op.name(), a.shape(), b.shape()));
            }
            let f: fn(f64, f64) -> f64 = match op {
                ElementwiseOp::Add => |x, y| x + y,
                ElementwiseOp::Sub => |x, y| x - y,
                _ => |x, y| x * y,
            };
            a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect()
        }
    };
    Matrix::checked(a.rows, a.cols, data, op.name())
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidArgument(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::InvalidArgument(format!(
                "data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Self::checked(rows, cols, data, "new")
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::InvalidArgument("ragged rows".into()));
        }
        Self::new(r, c, rows.concat())
    }

    pub(crate) fn checked(rows: usize, cols: usize, data: Vec<f64>, op: &'static str) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op });
        }
        Ok(Self { rows, cols, data })
    }

    /// Panics on zero dimensions; all other constructors return errors instead.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "zero-sized matrix {rows}x{cols}");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        m.data.fill(value);
        m
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    /// Gaussian entries with standard deviation `std`.
    pub fn randn(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for v in &mut m.data {
            *v = std * rng.normal();
        }
        m
    }

    pub fn uniform(rng: &mut Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for v in &mut m.data {
            *v = lo + (hi - lo) * rng.uniform();
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the raw buffer. Callers are responsible for keeping
    /// entries finite; the optimizer checks after every update.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn column_matrix(&self, c: usize) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: 1,
            data: self.column(c),
        }
    }

    /// Copies the listed columns, in order, into a new matrix.
    pub fn select_columns(&self, idx: &[usize]) -> Result<Matrix> {
        if idx.is_empty() {
            return Err(Error::InvalidArgument("empty column selection".into()));
        }
        let mut out = Matrix::zeros(self.rows, idx.len());
        for (j, &c) in idx.iter().enumerate() {
            if c >= self.cols {
                return Err(Error::InvalidArgument(format!(
                    "column {c} out of range for {} columns",
                    self.cols
                )));
            }
            for r in 0..self.rows {
                out[(r, j)] = self.get(r, c);
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        matmul(self, other)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        elementwise(ElementwiseOp::Add, &[self, other])
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        elementwise(ElementwiseOp::Sub, &[self, other])
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        elementwise(ElementwiseOp::Hadamard, &[self, other])
    }

    pub fn scale(&self, c: f64) -> Result<Matrix> {
        elementwise(ElementwiseOp::Scale(c), &[self])
    }

    pub fn tanh(&self) -> Matrix {
        // tanh of finite input is finite
        self.map(f64::tanh)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn try_map(&self, op: &'static str, f: impl Fn(f64) -> f64) -> Result<Matrix> {
        Self::checked(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect(), op)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest absolute difference between two equally shaped matrices.
    pub fn max_abs_diff(&self, other: &Matrix) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(Error::shape("max_abs_diff", self.shape(), other.shape()));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn abs(&self) -> Matrix {
        self.map(f64::abs)
    }
}

/// Standard matrix product.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let (n, k, m) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let out_row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a.data[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b.data[p * m..(p + 1) * m];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
    Matrix::checked(n, m, out, "matmul")
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        assert!(r < self.rows && c < self.cols, "index ({r},{c}) out of bounds");
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        assert!(r < self.rows && c < self.cols, "index ({r},{c}) out of bounds");
        &mut self.data[r * self.cols + c]
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}
