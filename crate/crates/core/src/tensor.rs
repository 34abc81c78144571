//! Dense tensors and a tape-based reverse-mode differentiation graph.
//!
//! Every value that flows through the network (fields, parameters, residuals,
//! the scalar cost) is a row-major [`Tensor`] of `f64`. Computations are
//! recorded on a [`Graph`]: each operation appends a node holding its output
//! value and enough context to run its backward rule. Nodes are appended in
//! evaluation order, so the node list is already topologically sorted and the
//! backward pass is a single reverse sweep.
//!
//! A graph is built once per training iteration and thrown away (or
//! [`Graph::reset`]) afterwards. Calling [`Graph::backward`] twice on the same
//! graph is an error.
//!
//! ```
//! use pgnniv::tensor::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let w = g.param(&Tensor::scalar(3.0));
//! let y = g.square(w);
//! g.backward(y).unwrap();
//! assert_eq!(g.grad(w).unwrap().data(), &[6.0]);
//! ```

use std::sync::Arc;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} needs {expected} values, got {got}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("conv1d: kernel width {kernel} exceeds signal width {signal}")]
    KernelTooWide { kernel: usize, signal: usize },
    #[error("{op}: domain violation at index {index} (value {value})")]
    Domain {
        op: &'static str,
        index: usize,
        value: f64,
    },
    #[error("{op}: empty tensor")]
    Empty { op: &'static str },
    #[error("{op}: column range {start}..{end} out of bounds for width {width}")]
    ColumnRange {
        op: &'static str,
        start: usize,
        end: usize,
        width: usize,
    },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("backward already ran on this graph; reset it before another pass")]
    BackwardTwice,
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Row-major dense array of `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected = shape.iter().product::<usize>();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Self::raw(shape, data))
    }

    fn raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        Self {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Self::raw(shape.to_vec(), vec![value; shape.iter().product()])
    }

    pub fn scalar(value: f64) -> Self {
        Self::raw(vec![1], vec![value])
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self::raw(vec![data.len()], data)
    }

    /// Builds a 2-D tensor from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "from_rows",
                    left: vec![cols],
                    right: vec![row.len()],
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_data(self) -> Vec<f64> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value at `(row, col)` of a 2-D tensor.
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.shape[1] + col]
    }

    /// Row `row` of a 2-D tensor.
    pub fn row(&self, row: usize) -> &[f64] {
        let w = self.shape[1];
        &self.data[row * w..(row + 1) * w]
    }

    /// Same data under a new shape; the buffer is shared, not copied.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.len() {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                expected,
                got: self.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            _ => Err(TensorError::Rank {
                op,
                expected: 2,
                shape: self.shape.clone(),
            }),
        }
    }

    fn dims3(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            &[a, b, c] => Ok((a, b, c)),
            _ => Err(TensorError::Rank {
                op,
                expected: 3,
                shape: self.shape.clone(),
            }),
        }
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BinaryFn {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnaryFn {
    Neg,
    Square,
    Sigmoid,
    Exp,
    Ln,
    /// `x^p` for a fixed exponent.
    Pow(f64),
    /// Multiplication by a fixed constant.
    Scale(f64),
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Conv1d {
        signal: Var,
        kernel: Var,
        bias_pre: Option<Var>,
        bias_post: Option<Var>,
        // activation output before `bias_post`, kept only for sigmoid
        activated: Option<Vec<f64>>,
    },
    Binary(BinaryFn, Var, Var),
    Unary(UnaryFn, Var),
    ClampMin(Var, f64),
    AddBias(Var, Var),
    Reshape(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Mse(Var),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation with a reverse-mode backward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
    clamp_events: usize,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Clears all nodes so the graph can be rebuilt for the next iteration.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.backward_done = false;
        self.clamp_events = 0;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of entries raised to the floor by [`Graph::clamp_min`] since the last reset.
    pub fn clamp_events(&self) -> usize {
        self.clamp_events
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.push_shared(Arc::new(value), op, requires_grad)
    }

    fn push_shared(&mut self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf: receives a gradient on backward.
    pub fn param(&mut self, value: &Tensor) -> Var {
        self.push(value.clone(), Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Constant leaf backed by a shared buffer (no copy).
    pub fn constant_shared(&mut self, value: Arc<Tensor>) -> Var {
        self.push_shared(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward root with respect to `v`, if `v` is a
    /// trainable leaf that the root depends on.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        if !matches!(node.op, Op::Leaf) || !node.requires_grad {
            return None;
        }
        let shape = node.value.shape.clone();
        self.grads.get(v.0).and_then(|g| g.as_ref()).map(|g| Tensor::raw(shape, g.clone()))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// `a[M×K] · b[K×P]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.dims2("matmul")?;
        let (k2, p) = tb.dims2("matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: ta.shape.clone(),
                right: tb.shape.clone(),
            });
        }
        let out = matmul_nn(&ta.data, &tb.data, m, k, p);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::raw(vec![m, p], out),
            Op::MatMul(a, b),
            rg,
        ))
    }

    /// Valid 1-D convolution (cross-correlation) over the last axis.
    ///
    /// `signal` is `N×C_in×W`, `kernel` is `C_in×C_out×K`; the result is
    /// `N×C_out×(W−K+1)` with `out = act(Σ signal⋆kernel + bias_pre) + bias_post`.
    pub fn conv1d(
        &mut self,
        signal: Var,
        kernel: Var,
        bias_pre: Option<Var>,
        bias_post: Option<Var>,
        activation: Activation,
    ) -> Result<Var> {
        let ts = self.value(signal);
        let tk = self.value(kernel);
        let (n, c_in, w) = ts.dims3("conv1d")?;
        let (kc_in, c_out, kw) = tk.dims3("conv1d")?;
        if kc_in != c_in {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d",
                left: ts.shape.clone(),
                right: tk.shape.clone(),
            });
        }
        if kw > w {
            return Err(TensorError::KernelTooWide {
                kernel: kw,
                signal: w,
            });
        }
        for b in [bias_pre, bias_post].into_iter().flatten() {
            if self.value(b).len() != c_out {
                return Err(TensorError::ShapeMismatch {
                    op: "conv1d bias",
                    left: vec![c_out],
                    right: self.value(b).shape.clone(),
                });
            }
        }
        let wo = w - kw + 1;
        let mut z = vec![0.0; n * c_out * wo];
        for s in 0..n {
            for co in 0..c_out {
                let out = &mut z[(s * c_out + co) * wo..(s * c_out + co + 1) * wo];
                for ci in 0..c_in {
                    let sig = &ts.data[(s * c_in + ci) * w..(s * c_in + ci + 1) * w];
                    for t in 0..kw {
                        let kv = tk.data[(ci * c_out + co) * kw + t];
                        for (o, x) in out.iter_mut().zip(&sig[t..t + wo]) {
                            *o += kv * x;
                        }
                    }
                }
            }
        }
        if let Some(b) = bias_pre {
            add_channel_bias(&mut z, &self.value(b).data, c_out, wo);
        }
        let activated = match activation {
            Activation::Identity => None,
            Activation::Sigmoid => {
                z.iter_mut().for_each(|v| *v = sigmoid(*v));
                Some(z.clone())
            }
        };
        if let Some(b) = bias_post {
            add_channel_bias(&mut z, &self.value(b).data, c_out, wo);
        }
        let rg = self.rg(signal)
            || self.rg(kernel)
            || bias_pre.is_some_and(|b| self.rg(b))
            || bias_post.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor::raw(vec![n, c_out, wo], z),
            Op::Conv1d {
                signal,
                kernel,
                bias_pre,
                bias_post,
                activated,
            },
            rg,
        ))
    }

    /// Elementwise binary op; shapes must match unless one side is a scalar.
    pub fn binary(&mut self, f: BinaryFn, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let name = match f {
            BinaryFn::Add => "add",
            BinaryFn::Sub => "sub",
            BinaryFn::Mul => "mul",
            BinaryFn::Div => "div",
        };
        let op = |x: f64, y: f64| match f {
            BinaryFn::Add => x + y,
            BinaryFn::Sub => x - y,
            BinaryFn::Mul => x * y,
            BinaryFn::Div => x / y,
        };
        let (shape, data) = if ta.shape == tb.shape {
            let d = ta.data.iter().zip(tb.data.iter()).map(|(&x, &y)| op(x, y)).collect();
            (ta.shape.clone(), d)
        } else if tb.len() == 1 {
            let y = tb.data[0];
            (ta.shape.clone(), ta.data.iter().map(|&x| op(x, y)).collect())
        } else if ta.len() == 1 {
            let x = ta.data[0];
            (tb.shape.clone(), tb.data.iter().map(|&y| op(x, y)).collect())
        } else {
            return Err(TensorError::ShapeMismatch {
                op: name,
                left: ta.shape.clone(),
                right: tb.shape.clone(),
            });
        };
        if f == BinaryFn::Div {
            if let Some(i) = tb.data.iter().position(|&y| y == 0.0) {
                return Err(TensorError::Domain {
                    op: "div",
                    index: i,
                    value: 0.0,
                });
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::raw(shape, data), Op::Binary(f, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryFn::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryFn::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryFn::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryFn::Div, a, b)
    }

    /// Elementwise unary op. `Ln` rejects non-positive entries, `Pow` with a
    /// non-integer exponent rejects negative ones.
    pub fn unary(&mut self, f: UnaryFn, x: Var) -> Result<Var> {
        let tx = self.value(x);
        match f {
            UnaryFn::Ln => {
                if let Some(i) = tx.data.iter().position(|&v| v <= 0.0 || v.is_nan()) {
                    return Err(TensorError::Domain {
                        op: "ln",
                        index: i,
                        value: tx.data[i],
                    });
                }
            }
            UnaryFn::Pow(p) if p.fract() != 0.0 => {
                if let Some(i) = tx.data.iter().position(|&v| v < 0.0) {
                    return Err(TensorError::Domain {
                        op: "pow",
                        index: i,
                        value: tx.data[i],
                    });
                }
            }
            _ => {}
        }
        let data = tx
            .data
            .iter()
            .map(|&v| match f {
                UnaryFn::Neg => -v,
                UnaryFn::Square => v * v,
                UnaryFn::Sigmoid => sigmoid(v),
                UnaryFn::Exp => v.exp(),
                UnaryFn::Ln => v.ln(),
                UnaryFn::Pow(p) => v.powf(p),
                UnaryFn::Scale(c) => c * v,
            })
            .collect();
        let shape = tx.shape.clone();
        let rg = self.rg(x);
        Ok(self.push(Tensor::raw(shape, data), Op::Unary(f, x), rg))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(UnaryFn::Neg, x).expect("neg is total")
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(UnaryFn::Square, x).expect("square is total")
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryFn::Sigmoid, x).expect("sigmoid is total")
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnaryFn::Exp, x).expect("exp is total")
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryFn::Ln, x)
    }

    pub fn powf(&mut self, x: Var, p: f64) -> Result<Var> {
        self.unary(UnaryFn::Pow(p), x)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(UnaryFn::Scale(c), x).expect("scale is total")
    }

    /// `max(x, floor)` elementwise. Entries that hit the floor pass no
    /// gradient and are tallied in [`Graph::clamp_events`].
    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Var {
        let tx = self.value(x);
        let mut hits = 0;
        let data = tx
            .data
            .iter()
            .map(|&v| {
                if v < floor {
                    hits += 1;
                    floor
                } else {
                    v
                }
            })
            .collect();
        let shape = tx.shape.clone();
        let rg = self.rg(x);
        self.clamp_events += hits;
        self.push(Tensor::raw(shape, data), Op::ClampMin(x, floor), rg)
    }

    /// Adds a length-`P` row vector to every row of an `M×P` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let (_, p) = tx.dims2("add_bias")?;
        if tb.len() != p {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                left: tx.shape.clone(),
                right: tb.shape.clone(),
            });
        }
        let mut data = tx.data.to_vec();
        for row in data.chunks_exact_mut(p) {
            for (v, b) in row.iter_mut().zip(tb.data.iter()) {
                *v += b;
            }
        }
        let shape = tx.shape.clone();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Tensor::raw(shape, data), Op::AddBias(x, bias), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let expected: usize = shape.iter().product();
        if expected != tx.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                left: tx.shape.clone(),
                right: shape.to_vec(),
            });
        }
        let value = Tensor {
            shape: shape.to_vec(),
            data: tx.data.clone(),
        };
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let tx = self.value(x);
        let (m, w) = tx.dims2("slice_cols")?;
        if start >= end || end > w {
            return Err(TensorError::ColumnRange {
                op: "slice_cols",
                start,
                end,
                width: w,
            });
        }
        let mut data = Vec::with_capacity(m * (end - start));
        for row in tx.data.chunks_exact(w) {
            data.extend_from_slice(&row[start..end]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::raw(vec![m, end - start], data),
            Op::SliceCols(x, start),
            rg,
        ))
    }

    /// Concatenates 2-D tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(TensorError::Empty { op: "concat_cols" })?;
        let (m, _) = self.value(*first).dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let tp = self.value(p);
            let (pm, pw) = tp.dims2("concat_cols")?;
            if pm != m {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    left: self.value(*first).shape.clone(),
                    right: tp.shape.clone(),
                });
            }
            widths.push(pw);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &pw) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data[r * pw..(r + 1) * pw]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::raw(vec![m, total], data),
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    /// Mean over samples (leading axis) of each sample's sum of squares.
    /// Rank-0/1 tensors count as a single sample.
    pub fn mse(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.is_empty() {
            return Err(TensorError::Empty { op: "mse" });
        }
        let value = mse_value(tx);
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(value), Op::Mse(x), rg))
    }

    /// Populates gradients of the scalar `root` with respect to every
    /// trainable leaf it depends on.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(TensorError::NonScalarRoot(rv.shape.clone()));
        }
        self.backward_done = true;
        self.grads = vec![None; self.nodes.len()];
        if !self.rg(root) {
            return Ok(());
        }
        self.grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(gout) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, gout);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Vec<f64>) {
        match &mut self.grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&mut self, i: usize, gout_owned: Vec<f64>) {
        let node = &self.nodes[i];
        let gout = gout_owned.as_slice();
        let mut updates: Vec<(Var, Vec<f64>)> = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape[0], ta.shape[1]);
                let p = tb.shape[1];
                if self.rg(*a) {
                    updates.push((*a, matmul_nt(gout, &tb.data, m, p, k)));
                }
                if self.rg(*b) {
                    updates.push((*b, matmul_tn(&ta.data, gout, m, k, p)));
                }
            }
            Op::Conv1d {
                signal,
                kernel,
                bias_pre,
                bias_post,
                activated,
            } => {
                let (ts, tk) = (self.value(*signal), self.value(*kernel));
                let (n, c_in, w) = (ts.shape[0], ts.shape[1], ts.shape[2]);
                let (c_out, kw) = (tk.shape[1], tk.shape[2]);
                let wo = w - kw + 1;
                if let Some(b) = bias_post.filter(|b| self.rg(*b)) {
                    updates.push((b, channel_sums(gout, n, c_out, wo)));
                }
                let gz: Vec<f64> = match activated {
                    Some(s) => gout.iter().zip(s).map(|(g, s)| g * s * (1.0 - s)).collect(),
                    None => gout.to_vec(),
                };
                if let Some(b) = bias_pre.filter(|b| self.rg(*b)) {
                    updates.push((b, channel_sums(&gz, n, c_out, wo)));
                }
                if self.rg(*signal) {
                    let mut gs = vec![0.0; ts.len()];
                    for s in 0..n {
                        for co in 0..c_out {
                            let gzr = &gz[(s * c_out + co) * wo..(s * c_out + co + 1) * wo];
                            for ci in 0..c_in {
                                let row = &mut gs[(s * c_in + ci) * w..(s * c_in + ci + 1) * w];
                                for t in 0..kw {
                                    let kv = tk.data[(ci * c_out + co) * kw + t];
                                    for (o, g) in row[t..t + wo].iter_mut().zip(gzr) {
                                        *o += kv * g;
                                    }
                                }
                            }
                        }
                    }
                    updates.push((*signal, gs));
                }
                if self.rg(*kernel) {
                    let mut gk = vec![0.0; tk.len()];
                    for s in 0..n {
                        for co in 0..c_out {
                            let gzr = &gz[(s * c_out + co) * wo..(s * c_out + co + 1) * wo];
                            for ci in 0..c_in {
                                let sig = &ts.data[(s * c_in + ci) * w..(s * c_in + ci + 1) * w];
                                for t in 0..kw {
                                    gk[(ci * c_out + co) * kw + t] +=
                                        dot(&sig[t..t + wo], gzr);
                                }
                            }
                        }
                    }
                    updates.push((*kernel, gk));
                }
            }
            Op::Binary(f, a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let ga = match f {
                        BinaryFn::Add | BinaryFn::Sub => gout.to_vec(),
                        BinaryFn::Mul => scaled_by(gout, tb, |y| y),
                        BinaryFn::Div => scaled_by(gout, tb, |y| 1.0 / y),
                    };
                    updates.push((*a, reduce_to(ga, ta.len())));
                }
                if self.rg(*b) {
                    let gb = match f {
                        BinaryFn::Add => gout.to_vec(),
                        BinaryFn::Sub => gout.iter().map(|g| -g).collect(),
                        BinaryFn::Mul => scaled_by(gout, ta, |x| x),
                        BinaryFn::Div => {
                            let pick = |t: &Tensor, j: usize| t.data[if t.data.len() == 1 { 0 } else { j }];
                            (0..gout.len())
                                .map(|j| -gout[j] * pick(ta, j) / pick(tb, j).powi(2))
                                .collect()
                        }
                    };
                    updates.push((*b, reduce_to(gb, tb.len())));
                }
            }
            Op::Unary(f, x) => {
                if self.rg(*x) {
                    let tx = self.value(*x);
                    let out = &node.value.data;
                    let g = gout
                        .iter()
                        .zip(tx.data.iter())
                        .zip(out.iter())
                        .map(|((g, &v), &y)| {
                            g * match f {
                                UnaryFn::Neg => -1.0,
                                UnaryFn::Square => 2.0 * v,
                                UnaryFn::Sigmoid => y * (1.0 - y),
                                UnaryFn::Exp => y,
                                UnaryFn::Ln => 1.0 / v,
                                UnaryFn::Pow(p) => p * v.powf(p - 1.0),
                                UnaryFn::Scale(c) => *c,
                            }
                        })
                        .collect();
                    updates.push((*x, g));
                }
            }
            Op::ClampMin(x, floor) => {
                if self.rg(*x) {
                    let tx = self.value(*x);
                    let g = gout
                        .iter()
                        .zip(tx.data.iter())
                        .map(|(g, &v)| if v < *floor { 0.0 } else { *g })
                        .collect();
                    updates.push((*x, g));
                }
            }
            Op::AddBias(x, bias) => {
                let p = node.value.shape[1];
                if self.rg(*bias) {
                    let mut gb = vec![0.0; p];
                    for row in gout.chunks_exact(p) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    updates.push((*bias, gb));
                }
                if self.rg(*x) {
                    updates.push((*x, gout.to_vec()));
                }
            }
            Op::Reshape(x) => {
                if self.rg(*x) {
                    updates.push((*x, gout_owned));
                }
            }
            Op::SliceCols(x, start) => {
                if self.rg(*x) {
                    let tx = self.value(*x);
                    let w = tx.shape[1];
                    let sw = node.value.shape[1];
                    let mut g = vec![0.0; tx.len()];
                    for (dst, src) in g.chunks_exact_mut(w).zip(gout.chunks_exact(sw)) {
                        dst[*start..*start + sw].copy_from_slice(src);
                    }
                    updates.push((*x, g));
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape[1];
                let mut offset = 0;
                for &p in parts {
                    let pw = self.value(p).shape[1];
                    if self.rg(p) {
                        let g = gout
                            .chunks_exact(total)
                            .flat_map(|row| row[offset..offset + pw].iter().copied())
                            .collect();
                        updates.push((p, g));
                    }
                    offset += pw;
                }
            }
            Op::Mse(x) => {
                if self.rg(*x) {
                    let tx = self.value(*x);
                    let scale = 2.0 * gout[0] / samples(tx) as f64;
                    updates.push((*x, tx.data.iter().map(|v| scale * v).collect()));
                }
            }
        }
        for (v, g) in updates {
            self.accumulate(v, g);
        }
    }
}

/// `g[j] · f(t[j])`, with a single-entry `t` broadcast.
fn scaled_by(g: &[f64], t: &Tensor, f: impl Fn(f64) -> f64) -> Vec<f64> {
    if t.data.len() == 1 {
        let c = f(t.data[0]);
        g.iter().map(|v| v * c).collect()
    } else {
        g.iter().zip(t.data.iter()).map(|(v, &x)| v * f(x)).collect()
    }
}

/// Sums a broadcast gradient back down to a single entry when needed.
fn reduce_to(g: Vec<f64>, len: usize) -> Vec<f64> {
    if len == 1 && g.len() != 1 {
        vec![g.iter().sum()]
    } else {
        g
    }
}

fn samples(t: &Tensor) -> usize {
    if t.rank() >= 2 {
        t.shape[0]
    } else {
        1
    }
}

/// Plain-value version of [`Graph::mse`].
pub fn mse_value(t: &Tensor) -> f64 {
    t.data.iter().map(|v| v * v).sum::<f64>() / samples(t) as f64
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add_channel_bias(z: &mut [f64], bias: &[f64], c_out: usize, wo: usize) {
    for (i, chunk) in z.chunks_exact_mut(wo).enumerate() {
        let b = bias[i % c_out];
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn channel_sums(g: &[f64], n: usize, c_out: usize, wo: usize) -> Vec<f64> {
    let mut out = vec![0.0; c_out];
    for s in 0..n {
        for (co, o) in out.iter_mut().enumerate() {
            *o += g[(s * c_out + co) * wo..(s * c_out + co + 1) * wo]
                .iter()
                .sum::<f64>();
        }
    }
    out
}

/// `C = A·B` with explicit row/column strides for `A` and `B`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    m: usize,
    k: usize,
    p: usize,
) -> Vec<f64> {
    let mut c = vec![0.0; m * p];
    if m == 0 || k == 0 || p == 0 {
        return c;
    }
    assert!(a.len() >= m * k && b.len() >= k * p);
    // SAFETY: the strides address exactly the m×k and k×p elements checked
    // above, and `c` is a fresh m×p row-major buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            p,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            p as isize,
            1,
        );
    }
    c
}

// C[m×p] = A[m×k] · B[k×p]
fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, p: usize) -> Vec<f64> {
    gemm(a, (k as isize, 1), b, (p as isize, 1), m, k, p)
}

// C[m×k] = G[m×p] · Bᵀ, B is k×p
fn matmul_nt(g: &[f64], b: &[f64], m: usize, p: usize, k: usize) -> Vec<f64> {
    gemm(g, (p as isize, 1), b, (1, p as isize), m, p, k)
}

// C[k×p] = Aᵀ · G, A is m×k, G is m×p
fn matmul_tn(a: &[f64], g: &[f64], m: usize, k: usize, p: usize) -> Vec<f64> {
    gemm(a, (1, k as isize), g, (p as isize, 1), k, m, p)
}
