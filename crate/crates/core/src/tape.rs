//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! Every operation appends a record to the [`Tape`] holding its inputs and its
//! forward value. Records are appended in evaluation order, so the record list
//! is already topologically sorted and [`Tape::backward`] is a single reverse
//! sweep that visits each record once. Gradients accumulate additively when a
//! value feeds several consumers.
//!
//! Shapes never broadcast: elementwise operations demand identical shapes and
//! bias-style additions go through the explicit [`Tape::add_row_vector`].

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::params::ParamId;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    /// Negative slope in `(0, 1)`. The derivative at exactly zero is the slope.
    LeakyRelu(f64),
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::LeakyRelu(slope) => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Local derivative given the input `x` and the output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::LeakyRelu(slope) => {
                if x > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
        }
    }

    fn kind(self) -> OpKind {
        match self {
            Activation::LeakyRelu(_) => OpKind::LeakyRelu,
            Activation::Sigmoid => OpKind::Sigmoid,
            Activation::Tanh => OpKind::Tanh,
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

/// Operation kinds a tape can record. Used as the coverage registry for the
/// gradient-check suites.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Mul,
    Scale,
    AddRowVector,
    LeakyRelu,
    Sigmoid,
    Tanh,
    Softmax,
    MeanOverRows,
    StopGradient,
    CrossEntropy,
    Sum,
    Transpose,
    ConcatCols,
    StackRows,
    Gather,
    Reshape,
    Conv2d,
    MeanPool2,
    AdjacencyMix,
}

impl OpKind {
    /// Every operation with a backward rule.
    pub const DIFFERENTIABLE: &'static [OpKind] = &[
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::AddRowVector,
        OpKind::LeakyRelu,
        OpKind::Sigmoid,
        OpKind::Tanh,
        OpKind::Softmax,
        OpKind::MeanOverRows,
        OpKind::StopGradient,
        OpKind::CrossEntropy,
        OpKind::Sum,
        OpKind::Transpose,
        OpKind::ConcatCols,
        OpKind::StackRows,
        OpKind::Gather,
        OpKind::Reshape,
        OpKind::Conv2d,
        OpKind::MeanPool2,
        OpKind::AdjacencyMix,
    ];
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRowVector(Var, Var),
    Activation(Var, Activation),
    Softmax(Var),
    MeanOverRows(Var),
    StopGradient(Var),
    CrossEntropy { logits: Var, label: usize, probs: Vec<f64> },
    Sum(Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    StackRows(Vec<Var>),
    Gather { input: Var, rows: Vec<usize>, cols: Vec<usize> },
    Reshape(Var),
    Conv2d { input: Var, kernel: Var, bias: Var },
    MeanPool2(Var),
    AdjacencyMix { adjacency: Var, x: Var },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddRowVector(..) => OpKind::AddRowVector,
            Op::Activation(_, act) => act.kind(),
            Op::Softmax(_) => OpKind::Softmax,
            Op::MeanOverRows(_) => OpKind::MeanOverRows,
            Op::StopGradient(_) => OpKind::StopGradient,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::Sum(_) => OpKind::Sum,
            Op::Transpose(_) => OpKind::Transpose,
            Op::ConcatCols(_) => OpKind::ConcatCols,
            Op::StackRows(_) => OpKind::StackRows,
            Op::Gather { .. } => OpKind::Gather,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::MeanPool2(_) => OpKind::MeanPool2,
            Op::AdjacencyMix { .. } => OpKind::AdjacencyMix,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) | Op::AddRowVector(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(x, _)
            | Op::Activation(x, _)
            | Op::Softmax(x)
            | Op::MeanOverRows(x)
            | Op::StopGradient(x)
            | Op::Sum(x)
            | Op::Transpose(x)
            | Op::Reshape(x)
            | Op::MeanPool2(x) => vec![*x],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::ConcatCols(xs) | Op::StackRows(xs) => xs.clone(),
            Op::Gather { input, .. } => vec![*input],
            Op::Conv2d {
                input,
                kernel,
                bias,
            } => vec![*input, *kernel, *bias],
            Op::AdjacencyMix { adjacency, x } => vec![*adjacency, *x],
        }
    }
}

#[derive(Debug, Clone)]
struct Record {
    op: Op,
    value: Tensor,
}

/// Public view of one tape record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordInfo {
    pub kind: OpKind,
    pub inputs: Vec<Var>,
    pub output: Var,
}

/// Append-only record of a forward computation.
///
/// A tape is single-threaded; independent tapes over a shared read-only
/// parameter snapshot may run concurrently.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    records: Vec<Record>,
    params: Vec<(ParamId, Var)>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.records[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.records[v.0].value.shape()
    }

    pub fn records(&self) -> impl Iterator<Item = RecordInfo> + '_ {
        self.records.iter().enumerate().map(|(i, r)| RecordInfo {
            kind: r.op.kind(),
            inputs: r.op.inputs(),
            output: Var(i),
        })
    }

    /// Distinct operation kinds recorded so far.
    pub fn op_kinds(&self) -> BTreeSet<OpKind> {
        self.records.iter().map(|r| r.op.kind()).collect()
    }

    /// Parameters bound on this tape, in binding order.
    pub fn params(&self) -> &[(ParamId, Var)] {
        &self.params
    }

    /// Smallest `|x|` over all leaky-relu inputs; `None` when no leaky relu
    /// has been recorded. Finite-difference checks are only meaningful when
    /// this margin exceeds the step size.
    pub fn kink_margin(&self) -> Option<f64> {
        self.records
            .iter()
            .filter_map(|r| match r.op {
                Op::Activation(x, Activation::LeakyRelu(_)) => Some(
                    self.value(x)
                        .data()
                        .iter()
                        .map(|v| v.abs())
                        .fold(f64::INFINITY, f64::min),
                ),
                _ => None,
            })
            .reduce(f64::min)
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("{:?}", op.kind())));
        }
        self.records.push(Record { op, value });
        Ok(Var(self.records.len() - 1))
    }

    /// Records a constant input.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        let mut value = value;
        value.set_grad(None);
        self.push(Op::Leaf, value)
    }

    /// Records a learnable parameter. Its gradient is reported under `id`.
    pub fn param(&mut self, id: ParamId, value: &Tensor) -> Result<Var> {
        let mut value = value.clone();
        value.set_grad(None);
        let v = self.push(Op::Leaf, value)?;
        self.params.push((id, v));
        Ok(v)
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        self.value(v)
            .dims2()
            .map_err(|_| Error::shape(op, format!("expected a matrix, got {:?}", self.shape(v))))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("cannot multiply [{m}x{k}] by [{k2}x{n}]"),
            ));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Op::MatMul(a, b), Tensor::new(&[m, n], out)?)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push(Op::Add(a, b), out)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.push(Op::Mul(a, b), out)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= factor);
        self.push(Op::Scale(x, factor), out)
    }

    /// Adds the `[1 x n]` vector `v` to every row of the `[m x n]` matrix `x`.
    pub fn add_row_vector(&mut self, x: Var, v: Var) -> Result<Var> {
        let (m, n) = self.dims2("add_row_vector", x)?;
        let (r, c) = self.dims2("add_row_vector", v)?;
        if r != 1 || c != n {
            return Err(Error::shape(
                "add_row_vector",
                format!("cannot add [{r}x{c}] to rows of [{m}x{n}]"),
            ));
        }
        let bias = self.value(v).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n) {
            row.iter_mut().zip(&bias).for_each(|(o, b)| *o += b);
        }
        self.push(Op::AddRowVector(x, v), out)
    }

    pub fn activation(&mut self, act: Activation, x: Var) -> Result<Var> {
        if let Activation::LeakyRelu(slope) = act {
            if !(slope > 0.0 && slope < 1.0) {
                return Err(Error::Config(format!(
                    "leaky relu slope must lie in (0, 1), got {slope}"
                )));
            }
        }
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = act.apply(*v));
        self.push(Op::Activation(x, act), out)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.activation(Activation::LeakyRelu(slope), x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Tanh, x)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (_, n) = self.dims2("softmax", x)?;
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n) {
            softmax_in_place(row);
        }
        self.push(Op::Softmax(x), out)
    }

    /// Column-wise average over the rows: `[m x n] -> [1 x n]`.
    pub fn mean_over_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2("mean_over_rows", x)?;
        let data = self.value(x).data();
        let mut out = vec![0.0; n];
        for row in data.chunks(n) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        let inv = 1.0 / m as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        self.push(Op::MeanOverRows(x), Tensor::new(&[1, n], out)?)
    }

    /// Identity in the forward pass; blocks the gradient in the backward pass.
    pub fn stop_gradient(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).clone();
        self.push(Op::StopGradient(x), out)
    }

    /// `-log softmax(logits)[label]` for `[1 x K]` logits.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let (r, k) = self.dims2("cross_entropy", logits)?;
        if r != 1 {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits must be a single row, got [{r}x{k}]"),
            ));
        }
        if label >= k {
            return Err(Error::Index(format!(
                "label {label} out of range for {k} classes"
            )));
        }
        let x = self.value(logits).data();
        let top = (0..k).fold(0, |b, j| if x[j] > x[b] { j } else { b });
        let max = x[top];
        // The max term contributes exactly 1; ln_1p keeps confident losses accurate.
        let rest: f64 = (0..k)
            .filter(|&j| j != top)
            .map(|j| (x[j] - max).exp())
            .sum();
        let sum_exp = 1.0 + rest;
        let loss = rest.ln_1p() + (max - x[label]);
        let probs = x.iter().map(|v| (v - max).exp() / sum_exp).collect();
        self.push(
            Op::CrossEntropy {
                logits,
                label,
                probs,
            },
            Tensor::scalar(loss),
        )
    }

    /// Sum of all entries as a `[1 x 1]` scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().sum();
        self.push(Op::Sum(x), Tensor::scalar(total))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose()?;
        self.push(Op::Transpose(x), out)
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::shape("concat_cols", "nothing to concatenate"));
        }
        let rows = self.dims2("concat_cols", xs[0])?.0;
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (r, c) = self.dims2("concat_cols", x)?;
            if r != rows {
                return Err(Error::shape(
                    "concat_cols",
                    format!("row counts differ: {rows} vs {r}"),
                ));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &x in xs {
                out.extend_from_slice(self.value(x).row(i));
            }
        }
        self.push(Op::ConcatCols(xs.to_vec()), Tensor::new(&[rows, total], out)?)
    }

    /// Vertical concatenation of matrices with equal column counts.
    pub fn stack_rows(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::shape("stack_rows", "nothing to stack"));
        }
        let cols = self.dims2("stack_rows", xs[0])?.1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &x in xs {
            let (r, c) = self.dims2("stack_rows", x)?;
            if c != cols {
                return Err(Error::shape(
                    "stack_rows",
                    format!("column counts differ: {cols} vs {c}"),
                ));
            }
            rows += r;
            out.extend_from_slice(self.value(x).data());
        }
        self.push(Op::StackRows(xs.to_vec()), Tensor::new(&[rows, cols], out)?)
    }

    /// Submatrix formed by the given row and column indices, in the given order.
    pub fn gather(&mut self, x: Var, rows: &[usize], cols: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2("gather", x)?;
        if rows.is_empty() || cols.is_empty() {
            return Err(Error::shape("gather", "empty selection"));
        }
        if let Some(&r) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::Index(format!("row {r} out of range for {m} rows")));
        }
        if let Some(&c) = cols.iter().find(|&&c| c >= n) {
            return Err(Error::Index(format!("column {c} out of range for {n} columns")));
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * cols.len());
        for &r in rows {
            out.extend(cols.iter().map(|&c| src.at(r, c)));
        }
        let value = Tensor::new(&[rows.len(), cols.len()], out)?;
        self.push(
            Op::Gather {
                input: x,
                rows: rows.to_vec(),
                cols: cols.to_vec(),
            },
            value,
        )
    }

    /// Row `i` of a matrix as a `[1 x n]` matrix.
    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        let n = self.dims2("row", x)?.1;
        let cols: Vec<usize> = (0..n).collect();
        self.gather(x, &[i], &cols)
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let m = self.dims2("slice_cols", x)?.0;
        let rows: Vec<usize> = (0..m).collect();
        let cols: Vec<usize> = (start..start + len).collect();
        self.gather(x, &rows, &cols)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self
            .value(x)
            .reshaped(shape)
            .map_err(|_| Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape(x))))?;
        self.push(Op::Reshape(x), out)
    }

    /// Stride-1 "same" convolution with zero padding.
    ///
    /// `input` is `[batch, c_in, h, w]`, `kernel` is `[c_out, c_in, k, k]` with
    /// odd `k`, and `bias` is `[1, c_out]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let geom = ConvGeometry::new(self.shape(input), self.shape(kernel), self.shape(bias))?;
        let out = geom.forward(
            self.value(input).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
        );
        let value = Tensor::new(&[geom.batch, geom.c_out, geom.h, geom.w], out)?;
        self.push(
            Op::Conv2d {
                input,
                kernel,
                bias,
            },
            value,
        )
    }

    /// 2x2 average pooling over the trailing two axes of a rank-4 tensor.
    pub fn mean_pool2(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let &[b, c, h, w] = shape.as_slice() else {
            return Err(Error::shape(
                "mean_pool2",
                format!("expected [batch, channels, h, w], got {shape:?}"),
            ));
        };
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(
                "mean_pool2",
                format!("spatial dims must be even, got {h}x{w}"),
            ));
        }
        let (oh, ow) = (h / 2, w / 2);
        let src = self.value(x).data();
        let mut out = vec![0.0; b * c * oh * ow];
        for plane in 0..b * c {
            let s = &src[plane * h * w..(plane + 1) * h * w];
            let o = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            for y in 0..oh {
                for xx in 0..ow {
                    let (y2, x2) = (2 * y, 2 * xx);
                    o[y * ow + xx] = 0.25
                        * (s[y2 * w + x2]
                            + s[y2 * w + x2 + 1]
                            + s[(y2 + 1) * w + x2]
                            + s[(y2 + 1) * w + x2 + 1]);
                }
            }
        }
        self.push(Op::MeanPool2(x), Tensor::new(&[b, c, oh, ow], out)?)
    }

    /// Adjacency-weighted message mixing over `N` nodes.
    ///
    /// Row `i` of the result is `sum_{j != i} A[i][j] * x_j` accumulated in
    /// ascending `j`, plus the self term `A[i][i] * x_i` added last. This is
    /// the same summation order as the explicit neighbour-stack formulation.
    pub fn adjacency_mix(&mut self, adjacency: Var, x: Var) -> Result<Var> {
        let (n, n2) = self.dims2("adjacency_mix", adjacency)?;
        let (rows, d) = self.dims2("adjacency_mix", x)?;
        if n != n2 || rows != n {
            return Err(Error::shape(
                "adjacency_mix",
                format!("adjacency [{n}x{n2}] does not match features [{rows}x{d}]"),
            ));
        }
        let a = self.value(adjacency);
        let xv = self.value(x);
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let mut acc = vec![0.0; d];
            for j in (0..n).filter(|&j| j != i) {
                let aij = a.at(i, j);
                acc.iter_mut()
                    .zip(xv.row(j))
                    .for_each(|(s, v)| *s += aij * v);
            }
            let aii = a.at(i, i);
            for (c, (s, v)) in acc.iter().zip(xv.row(i)).enumerate() {
                out[i * d + c] = s + (0.0 + aii * v);
            }
        }
        self.push(Op::AdjacencyMix { adjacency, x }, Tensor::new(&[n, d], out)?)
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Every bound parameter receives a gradient, zero when the loss does not
    /// depend on it.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.records.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_record(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let params = self
            .params
            .iter()
            .map(|&(id, v)| {
                let g = grads[v.0]
                    .clone()
                    .unwrap_or_else(|| vec![0.0; self.value(v).numel()]);
                (id, g)
            })
            .collect();
        let lens = self.records.iter().map(|r| r.value.numel()).collect();
        Ok(Gradients {
            grads,
            lens,
            params,
        })
    }

    fn backprop_record(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let record = &self.records[idx];
        let out = &record.value;
        match &record.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = self.value(*b).cols();
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                {
                    let ga = slot(grads, *a, m * k);
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * bv[p * n + j];
                            }
                            ga[i * k + p] += s;
                        }
                    }
                }
                let gb = slot(grads, *b, k * n);
                for i in 0..m {
                    for p in 0..k {
                        let aip = av[i * k + p];
                        let row = &mut gb[p * n..(p + 1) * n];
                        row.iter_mut()
                            .zip(&g[i * n..(i + 1) * n])
                            .for_each(|(o, gv)| *o += aip * gv);
                    }
                }
            }
            Op::Add(a, b) => {
                add_into(slot(grads, *a, g.len()), g);
                add_into(slot(grads, *b, g.len()), g);
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let ga = slot(grads, *a, g.len());
                for (i, o) in ga.iter_mut().enumerate() {
                    *o += g[i] * bv[i];
                }
                let gb = slot(grads, *b, g.len());
                for (i, o) in gb.iter_mut().enumerate() {
                    *o += g[i] * av[i];
                }
            }
            Op::Scale(x, factor) => {
                let gx = slot(grads, *x, g.len());
                gx.iter_mut().zip(g).for_each(|(o, gv)| *o += factor * gv);
            }
            Op::AddRowVector(x, v) => {
                add_into(slot(grads, *x, g.len()), g);
                let n = self.value(*v).numel();
                let gv = slot(grads, *v, n);
                for row in g.chunks(n) {
                    add_into(gv, row);
                }
            }
            Op::Activation(x, act) => {
                let xv = self.value(*x).data();
                let yv = out.data();
                let gx = slot(grads, *x, g.len());
                for i in 0..g.len() {
                    gx[i] += g[i] * act.derivative(xv[i], yv[i]);
                }
            }
            Op::Softmax(x) => {
                let n = out.cols();
                let gx = slot(grads, *x, g.len());
                for ((grow, yrow), orow) in g.chunks(n).zip(out.data().chunks(n)).zip(gx.chunks_mut(n))
                {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        orow[j] += yrow[j] * (grow[j] - dot);
                    }
                }
            }
            Op::MeanOverRows(x) => {
                let (m, n) = self.value(*x).dims2().unwrap();
                let inv = 1.0 / m as f64;
                let gx = slot(grads, *x, m * n);
                for row in gx.chunks_mut(n) {
                    row.iter_mut().zip(g).for_each(|(o, gv)| *o += inv * gv);
                }
            }
            Op::StopGradient(_) => {}
            Op::CrossEntropy { logits, label, probs } => {
                let gx = slot(grads, *logits, probs.len());
                for (j, p) in probs.iter().enumerate() {
                    let target = if j == *label { 1.0 } else { 0.0 };
                    gx[j] += g[0] * (p - target);
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                slot(grads, *x, n).iter_mut().for_each(|o| *o += g[0]);
            }
            Op::Transpose(x) => {
                let (r, c) = self.value(*x).dims2().unwrap();
                let gx = slot(grads, *x, r * c);
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] += g[j * r + i];
                    }
                }
            }
            Op::ConcatCols(xs) => {
                let rows = out.rows();
                let total = out.cols();
                let mut offset = 0;
                for &x in xs {
                    let c = self.value(x).cols();
                    let gx = slot(grads, x, rows * c);
                    for i in 0..rows {
                        let src = &g[i * total + offset..i * total + offset + c];
                        add_into(&mut gx[i * c..(i + 1) * c], src);
                    }
                    offset += c;
                }
            }
            Op::StackRows(xs) => {
                let mut offset = 0;
                for &x in xs {
                    let n = self.value(x).numel();
                    add_into(slot(grads, x, n), &g[offset..offset + n]);
                    offset += n;
                }
            }
            Op::Gather { input, rows, cols } => {
                let n = self.value(*input).cols();
                let len = self.value(*input).numel();
                let gx = slot(grads, *input, len);
                let mut k = 0;
                for &r in rows {
                    for &c in cols {
                        gx[r * n + c] += g[k];
                        k += 1;
                    }
                }
            }
            Op::Reshape(x) => add_into(slot(grads, *x, g.len()), g),
            Op::Conv2d {
                input,
                kernel,
                bias,
            } => {
                let geom = ConvGeometry::new(
                    self.shape(*input),
                    self.shape(*kernel),
                    self.shape(*bias),
                )
                .expect("validated in forward");
                let iv = self.value(*input).data();
                let kv = self.value(*kernel).data();
                let (gi, gk, gb) = geom.backward(iv, kv, g);
                add_into(slot(grads, *input, gi.len()), &gi);
                add_into(slot(grads, *kernel, gk.len()), &gk);
                add_into(slot(grads, *bias, gb.len()), &gb);
            }
            Op::MeanPool2(x) => {
                let shape = self.shape(*x);
                let (h, w) = (shape[2], shape[3]);
                let planes = shape[0] * shape[1];
                let (oh, ow) = (h / 2, w / 2);
                let gx = slot(grads, *x, planes * h * w);
                for p in 0..planes {
                    for y in 0..h {
                        for xx in 0..w {
                            gx[p * h * w + y * w + xx] +=
                                0.25 * g[p * oh * ow + (y / 2) * ow + xx / 2];
                        }
                    }
                }
            }
            Op::AdjacencyMix { adjacency, x } => {
                let av = self.value(*adjacency);
                let xv = self.value(*x);
                let (n, d) = xv.dims2().unwrap();
                {
                    let ga = slot(grads, *adjacency, n * n);
                    for i in 0..n {
                        let gi = &g[i * d..(i + 1) * d];
                        for j in 0..n {
                            let s: f64 = gi.iter().zip(xv.row(j)).map(|(a, b)| a * b).sum();
                            ga[i * n + j] += s;
                        }
                    }
                }
                let gx = slot(grads, *x, n * d);
                for i in 0..n {
                    let gi = &g[i * d..(i + 1) * d];
                    for j in 0..n {
                        let aij = av.at(i, j);
                        gx[j * d..(j + 1) * d]
                            .iter_mut()
                            .zip(gi)
                            .for_each(|(o, gv)| *o += aij * gv);
                    }
                }
            }
        }
    }
}

/// Result of a backward sweep.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    lens: Vec<usize>,
    params: Vec<(ParamId, Vec<f64>)>,
}

impl Gradients {
    /// Gradient of the loss with respect to any recorded value. Values the
    /// loss does not reach get zeros.
    pub fn wrt(&self, v: Var) -> Vec<f64> {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| vec![0.0; self.lens[v.0]])
    }

    /// Whether the backward sweep reached `v` at all.
    pub fn reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }

    pub fn params(&self) -> &[(ParamId, Vec<f64>)] {
        &self.params
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Tensor::new(a.shape(), data).expect("shapes checked by caller")
}

/// Plain `[m x k] * [k x n]` product; each output accumulates in ascending `k`.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            orow.iter_mut()
                .zip(&b[p * n..(p + 1) * n])
                .for_each(|(o, bv)| *o += aip * bv);
        }
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

struct ConvGeometry {
    batch: usize,
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    k: usize,
}

impl ConvGeometry {
    fn new(input: &[usize], kernel: &[usize], bias: &[usize]) -> Result<Self> {
        let &[batch, c_in, h, w] = input else {
            return Err(Error::shape(
                "conv2d",
                format!("input must be [batch, c_in, h, w], got {input:?}"),
            ));
        };
        let &[c_out, kc, k, k2] = kernel else {
            return Err(Error::shape(
                "conv2d",
                format!("kernel must be [c_out, c_in, k, k], got {kernel:?}"),
            ));
        };
        if kc != c_in || k != k2 || k % 2 == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kernel:?} incompatible with input {input:?} (square odd kernel required)"),
            ));
        }
        if bias != [1, c_out] {
            return Err(Error::shape(
                "conv2d",
                format!("bias must be [1, {c_out}], got {bias:?}"),
            ));
        }
        Ok(Self {
            batch,
            c_in,
            c_out,
            h,
            w,
            k,
        })
    }

    fn forward(&self, input: &[f64], kernel: &[f64], bias: &[f64]) -> Vec<f64> {
        let &Self {
            batch,
            c_in,
            c_out,
            h,
            w,
            k,
        } = self;
        let pad = (k / 2) as isize;
        let mut out = vec![0.0; batch * c_out * h * w];
        for b in 0..batch {
            for o in 0..c_out {
                let plane = &mut out[(b * c_out + o) * h * w..(b * c_out + o + 1) * h * w];
                plane.iter_mut().for_each(|v| *v = bias[o]);
                for c in 0..c_in {
                    let src = &input[(b * c_in + c) * h * w..(b * c_in + c + 1) * h * w];
                    let ker = &kernel[(o * c_in + c) * k * k..(o * c_in + c + 1) * k * k];
                    for dy in 0..k {
                        for dx in 0..k {
                            let kv = ker[dy * k + dx];
                            let oy = dy as isize - pad;
                            let ox = dx as isize - pad;
                            for y in 0..h {
                                let sy = y as isize + oy;
                                if sy < 0 || sy >= h as isize {
                                    continue;
                                }
                                let (x_lo, x_hi) = valid_range(ox, w);
                                let srow = &src[sy as usize * w..(sy as usize + 1) * w];
                                let prow = &mut plane[y * w..(y + 1) * w];
                                for x in x_lo..x_hi {
                                    prow[x] += kv * srow[(x as isize + ox) as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn backward(&self, input: &[f64], kernel: &[f64], g: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let &Self {
            batch,
            c_in,
            c_out,
            h,
            w,
            k,
        } = self;
        let pad = (k / 2) as isize;
        let mut gi = vec![0.0; input.len()];
        let mut gk = vec![0.0; kernel.len()];
        let mut gb = vec![0.0; c_out];
        for b in 0..batch {
            for o in 0..c_out {
                let gplane = &g[(b * c_out + o) * h * w..(b * c_out + o + 1) * h * w];
                gb[o] += gplane.iter().sum::<f64>();
                for c in 0..c_in {
                    let base = (b * c_in + c) * h * w;
                    let kbase = (o * c_in + c) * k * k;
                    for dy in 0..k {
                        for dx in 0..k {
                            let kv = kernel[kbase + dy * k + dx];
                            let oy = dy as isize - pad;
                            let ox = dx as isize - pad;
                            let mut acc = 0.0;
                            for y in 0..h {
                                let sy = y as isize + oy;
                                if sy < 0 || sy >= h as isize {
                                    continue;
                                }
                                let (x_lo, x_hi) = valid_range(ox, w);
                                for x in x_lo..x_hi {
                                    let si = base + sy as usize * w + (x as isize + ox) as usize;
                                    let gv = gplane[y * w + x];
                                    acc += gv * input[si];
                                    gi[si] += gv * kv;
                                }
                            }
                            gk[kbase + dy * k + dx] += acc;
                        }
                    }
                }
            }
        }
        (gi, gk, gb)
    }
}

/// Output columns `x` for which `x + offset` is a valid input column.
fn valid_range(offset: isize, w: usize) -> (usize, usize) {
    let lo = (-offset).max(0) as usize;
    let hi = (w as isize - offset).min(w as isize).max(0) as usize;
    (lo.min(hi), hi)
}
