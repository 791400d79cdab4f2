//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node to a [`Tape`] and returns a lightweight
//! [`Var`] handle. [`Tape::backward`] walks the tape in reverse and returns
//! a [`Gradients`] table holding `d loss / d node` for every node the loss
//! depends on, intermediate activations included. That last part matters:
//! neuron attribution differentiates a model output with respect to a hidden
//! activation, not a parameter.
//!
//! Broadcasting is deliberately narrow. Binary element-wise ops accept
//! identical shapes or a scalar on either side; the only other broadcast is
//! [`Tape::bias_add`], which adds a vector to every row of a matrix.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{matmul_raw, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Abs,
    Tanh,
    Gelu,
    Relu,
    Exp,
    Square,
    Sqrt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
    Max,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Binary(Binary, Var, Var),
    Scale(Var, f64),
    Unary(Unary, Var),
    Matmul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    BiasAdd(Var, Var),
    Reduce {
        op: Reduction,
        input: Var,
        axis: Option<usize>,
        // flat input index chosen by each output element (max only)
        argmax: Vec<usize>,
    },
    LogSoftmax(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    GatherRows {
        input: Var,
        rows: Vec<usize>,
    },
    SelectColumns {
        input: Var,
        cols: Vec<usize>,
    },
    CausalCumMean {
        input: Var,
        seq_len: usize,
    },
    Correlation(Box<CorrelationCache>),
}

#[derive(Debug, Clone)]
struct CorrelationCache {
    student: Var,
    // teacher columns already paired with student columns (N x d_S), centered
    // if requested
    teacher: Vec<Vec<f64>>,
    student_cols: Vec<Vec<f64>>,
    centered: bool,
    corr: Vec<f64>,
    t_norm: Vec<f64>,
    s_norm: Vec<f64>,
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Counters for recoverable numeric events observed while building a graph.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TapeWarnings {
    /// Correlation columns whose norm was zero, scored as `C = 0`.
    pub zero_norm_columns: usize,
}

/// Ordered record of executed operations.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    warnings: TapeWarnings,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl Unary {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Abs => x.abs(),
            Unary::Tanh => x.tanh(),
            Unary::Gelu => gelu(x),
            Unary::Relu => x.max(0.0),
            Unary::Exp => x.exp(),
            Unary::Square => x * x,
            Unary::Sqrt => x.sqrt(),
        }
    }

    /// Local derivative given the input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Abs => sign(x),
            Unary::Tanh => 1.0 - y * y,
            Unary::Gelu => gelu_grad(x),
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Exp => y,
            Unary::Square => 2.0 * x,
            Unary::Sqrt => {
                if y > 0.0 {
                    0.5 / y
                } else {
                    0.0
                }
            }
        }
    }
}

/// Splits `shape` around `axis` into (outer, axis length, inner).
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Row-wise log-softmax of a `rows x cols` buffer, stabilised by the row max.
pub(crate) fn log_softmax_rows(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &data[r * cols..(r + 1) * cols];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        for (o, v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
            *o = v - lse;
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            warnings: TapeWarnings::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn warnings(&self) -> TapeWarnings {
        self.warnings
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::numeric(format!(
                "non-finite value produced by {}",
                op_name(&op)
            )));
        }
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        })
    }

    fn node(&self, v: Var) -> Result<&Node> {
        if v.tape != self.id {
            return Err(Error::Graph(format!(
                "node {} belongs to a different tape",
                v.index
            )));
        }
        self.nodes
            .get(v.index)
            .ok_or_else(|| Error::Graph(format!("node {} is not on this tape", v.index)))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.index].requires_grad)
    }

    /// Records a leaf whose gradient is tracked (a parameter or an input we
    /// want to differentiate against).
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, true)
    }

    /// Records a constant leaf.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, false)
    }

    /// Copies `v` into a fresh constant leaf, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let value = self.node(v)?.value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.node(v).map(|n| &n.value).expect("var from another tape")
    }

    pub fn try_value(&self, v: Var) -> Result<&Tensor> {
        self.node(v).map(|n| &n.value)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    pub fn binary(&mut self, op: Binary, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.node(a)?.value, &self.node(b)?.value);
        let f = |x: f64, y: f64| match op {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let value = if av.shape() == bv.shape() {
            let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::from_parts(av.shape().to_vec(), data)
        } else if bv.is_scalar() {
            let y = bv.item();
            av.map(|x| f(x, y))
        } else if av.is_scalar() {
            let x = av.item();
            bv.map(|y| f(x, y))
        } else {
            return Err(Error::dim(format!(
                "{op:?} operands have shapes {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        };
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Binary(op, a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.node(a)?.value.map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn unary(&mut self, op: Unary, a: Var) -> Result<Var> {
        let value = self.node(a)?.value.map(|x| op.apply(x));
        let rg = self.rg(&[a]);
        self.push(value, Op::Unary(op, a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Abs, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Tanh, a)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Gelu, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Relu, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Exp, a)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Square, a)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.node(a)?.value.matmul(&self.node(b)?.value)?;
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Matmul(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.node(a)?.value.transpose()?;
        let rg = self.rg(&[a]);
        self.push(value, Op::Transpose(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.node(a)?.value.reshape(shape)?;
        let rg = self.rg(&[a]);
        self.push(value, Op::Reshape(a), rg)
    }

    /// Adds a length-`n` vector to every row of an `m x n` matrix.
    pub fn bias_add(&mut self, a: Var, bias: Var) -> Result<Var> {
        let av = &self.node(a)?.value;
        let bv = &self.node(bias)?.value;
        let (m, n) = av.require_matrix("bias_add")?;
        if bv.shape() != [n] {
            return Err(Error::dim(format!(
                "bias of shape {:?} does not fit rows of {:?}",
                bv.shape(),
                av.shape()
            )));
        }
        let mut data = av.data().to_vec();
        for r in 0..m {
            for (o, b) in data[r * n..(r + 1) * n].iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let rg = self.rg(&[a, bias]);
        self.push(Tensor::from_parts(vec![m, n], data), Op::BiasAdd(a, bias), rg)
    }

    pub fn reduce(&mut self, op: Reduction, a: Var, axis: Option<usize>) -> Result<Var> {
        let av = &self.node(a)?.value;
        let shape = av.shape().to_vec();
        let (outer, len, inner, out_shape) = match axis {
            None => (1, av.numel(), 1, Vec::new()),
            Some(ax) if ax < shape.len() => {
                let (o, l, i) = axis_split(&shape, ax);
                let mut s = shape.clone();
                s.remove(ax);
                (o, l, i, s)
            }
            Some(ax) => {
                return Err(Error::dim(format!(
                    "axis {ax} is invalid for shape {shape:?}"
                )))
            }
        };
        let data = av.data();
        let mut out = vec![0.0; outer * inner];
        let mut argmax = Vec::new();
        if op == Reduction::Max {
            argmax = vec![0; outer * inner];
        }
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| o * len * inner + k * inner + i;
                let slot = o * inner + i;
                match op {
                    Reduction::Sum | Reduction::Mean => {
                        let s: f64 = (0..len).map(|k| data[idx(k)]).sum();
                        out[slot] = if op == Reduction::Mean { s / len as f64 } else { s };
                    }
                    Reduction::Max => {
                        let mut best = idx(0);
                        for k in 1..len {
                            // strict comparison keeps the lowest index on ties
                            if data[idx(k)] > data[best] {
                                best = idx(k);
                            }
                        }
                        out[slot] = data[best];
                        argmax[slot] = best;
                    }
                }
            }
        }
        let rg = self.rg(&[a]);
        self.push(
            Tensor::from_parts(out_shape, out),
            Op::Reduce {
                op,
                input: a,
                axis,
                argmax,
            },
            rg,
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.reduce(Reduction::Sum, a, None)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.reduce(Reduction::Mean, a, None)
    }

    /// Row-wise log-softmax of a matrix.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let av = &self.node(a)?.value;
        let (r, c) = av.require_matrix("log_softmax")?;
        let value = Tensor::from_parts(vec![r, c], log_softmax_rows(av.data(), r, c));
        let rg = self.rg(&[a]);
        self.push(value, Op::LogSoftmax(a), rg)
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = &self.node(logits)?.value;
        let (b, c) = lv.require_matrix("softmax_cross_entropy")?;
        if targets.len() != b {
            return Err(Error::dim(format!(
                "{} targets for {b} rows of logits",
                targets.len()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::data(format!("target class {t} out of range for {c} classes")));
        }
        let logp = log_softmax_rows(lv.data(), b, c);
        let loss = -targets
            .iter()
            .enumerate()
            .map(|(r, &t)| logp[r * c + t])
            .sum::<f64>()
            / b as f64;
        let probs = logp.iter().map(|v| v.exp()).collect();
        let rg = self.rg(&[logits]);
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Picks rows of a matrix (embedding lookup, padding removal).
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let value = self.node(a)?.value.select_rows(rows)?;
        let rg = self.rg(&[a]);
        self.push(
            value,
            Op::GatherRows {
                input: a,
                rows: rows.to_vec(),
            },
            rg,
        )
    }

    pub fn select_columns(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let value = self.node(a)?.value.select_columns(cols)?;
        let rg = self.rg(&[a]);
        self.push(
            value,
            Op::SelectColumns {
                input: a,
                cols: cols.to_vec(),
            },
            rg,
        )
    }

    /// Causal running mean over consecutive blocks of `seq_len` rows: row `t`
    /// of each block becomes the mean of rows `0..=t` of that block.
    pub fn causal_cummean(&mut self, a: Var, seq_len: usize) -> Result<Var> {
        let av = &self.node(a)?.value;
        let (rows, d) = av.require_matrix("causal_cummean")?;
        if seq_len == 0 || rows % seq_len != 0 {
            return Err(Error::dim(format!(
                "{rows} rows do not split into sequences of length {seq_len}"
            )));
        }
        let src = av.data();
        let mut out = vec![0.0; rows * d];
        for block in 0..rows / seq_len {
            let mut acc = vec![0.0; d];
            for t in 0..seq_len {
                let r = block * seq_len + t;
                for (j, a) in acc.iter_mut().enumerate() {
                    *a += src[r * d + j];
                    out[r * d + j] = *a / (t + 1) as f64;
                }
            }
        }
        let rg = self.rg(&[a]);
        self.push(
            Tensor::from_parts(vec![rows, d], out),
            Op::CausalCumMean { input: a, seq_len },
            rg,
        )
    }

    /// Sum over paired columns of `(1 - C_m)^2`, where `C_m` is the
    /// un-centered cosine over rows between student column `m` and teacher
    /// column `pairs[m]`.
    ///
    /// The teacher matrix is a constant: no gradient reaches it. A column
    /// with zero norm on either side scores `C = 0` and bumps
    /// [`TapeWarnings::zero_norm_columns`]. With `centered`, both columns are
    /// mean-subtracted first (Pearson correlation).
    pub fn correlation_loss(
        &mut self,
        teacher: &Tensor,
        student: Var,
        pairs: &[usize],
        centered: bool,
    ) -> Result<Var> {
        let sv = &self.node(student)?.value;
        let (n, ds) = sv.require_matrix("correlation_loss student")?;
        let (tn, dt) = teacher.require_matrix("correlation_loss teacher")?;
        if tn != n {
            return Err(Error::dim(format!(
                "teacher has {tn} rows, student has {n}"
            )));
        }
        if pairs.len() != ds {
            return Err(Error::config(format!(
                "selection has {} entries but student width is {ds}",
                pairs.len()
            )));
        }
        if let Some(&bad) = pairs.iter().find(|&&i| i >= dt) {
            return Err(Error::config(format!(
                "selected teacher unit {bad} out of range for width {dt}"
            )));
        }
        let center = |mut col: Vec<f64>| {
            if centered {
                let mean = col.iter().sum::<f64>() / col.len() as f64;
                col.iter_mut().for_each(|v| *v -= mean);
            }
            col
        };
        let teacher_cols: Vec<Vec<f64>> =
            pairs.iter().map(|&i| center(teacher.column(i))).collect();
        let student_cols: Vec<Vec<f64>> = (0..ds).map(|m| center(sv.column(m))).collect();

        let mut corr = Vec::with_capacity(ds);
        let mut t_norm = Vec::with_capacity(ds);
        let mut s_norm = Vec::with_capacity(ds);
        let mut zero = 0;
        let mut loss = 0.0;
        for (t, s) in teacher_cols.iter().zip(&student_cols) {
            let (c, tnorm, snorm) = cosine_parts(t, s);
            if tnorm == 0.0 || snorm == 0.0 {
                zero += 1;
            }
            loss += (1.0 - c) * (1.0 - c);
            corr.push(c);
            t_norm.push(tnorm);
            s_norm.push(snorm);
        }
        self.warnings.zero_norm_columns += zero;
        let rg = self.rg(&[student]);
        self.push(
            Tensor::scalar(loss),
            Op::Correlation(Box::new(CorrelationCache {
                student,
                teacher: teacher_cols,
                student_cols,
                centered,
                corr,
                t_norm,
                s_norm,
            })),
            rg,
        )
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let node = self.node(loss)?;
        if node.value.numel() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.index + 1];
        grads[loss.index] = Some(vec![1.0]);

        for idx in (0..=loss.index).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    /// `d loss / d node`, for any node on the tape, leaf or not.
    pub fn grad_wrt(&self, loss: Var, node: Var) -> Result<Tensor> {
        self.node(node)?;
        self.backward(loss)?.wrt(node, self)
    }

    fn wants_grad(&self, v: Var) -> bool {
        let n = &self.nodes[v.index];
        // Constant leaves never need a gradient; every intermediate node does,
        // since callers may ask for the gradient at any activation.
        !matches!(n.op, Op::Leaf) || n.requires_grad
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, contrib: Vec<f64>| {
            let slot = &mut grads[v.index];
            match slot {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(contrib) {
                        *e += c;
                    }
                }
                None => *slot = Some(contrib),
            }
        };
        let val = |v: Var| &self.nodes[v.index].value;

        match &node.op {
            Op::Leaf => {}
            Op::Binary(op, a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let a_scalar = av.shape() != node.value.shape();
                let b_scalar = bv.shape() != node.value.shape();
                let fold = |v: Vec<f64>, scalar: bool| {
                    if scalar {
                        vec![v.iter().sum()]
                    } else {
                        v
                    }
                };
                let pick = |t: &Tensor, i: usize| {
                    if t.numel() == 1 {
                        t.data()[0]
                    } else {
                        t.data()[i]
                    }
                };
                if self.wants_grad(*a) {
                    let ga: Vec<f64> = match op {
                        Binary::Add | Binary::Sub => g.to_vec(),
                        Binary::Mul => g.iter().enumerate().map(|(i, gi)| gi * pick(bv, i)).collect(),
                    };
                    acc(*a, fold(ga, a_scalar));
                }
                if self.wants_grad(*b) {
                    let gb: Vec<f64> = match op {
                        Binary::Add => g.to_vec(),
                        Binary::Sub => g.iter().map(|gi| -gi).collect(),
                        Binary::Mul => g.iter().enumerate().map(|(i, gi)| gi * pick(av, i)).collect(),
                    };
                    acc(*b, fold(gb, b_scalar));
                }
            }
            Op::Scale(a, c) => {
                if self.wants_grad(*a) {
                    acc(*a, g.iter().map(|gi| gi * c).collect());
                }
            }
            Op::Unary(op, a) => {
                if self.wants_grad(*a) {
                    let x = val(*a).data();
                    let y = node.value.data();
                    acc(
                        *a,
                        g.iter()
                            .zip(x.iter().zip(y))
                            .map(|(gi, (&xi, &yi))| gi * op.derivative(xi, yi))
                            .collect(),
                    );
                }
            }
            Op::Matmul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k) = (av.rows(), av.cols());
                let n = bv.cols();
                if self.wants_grad(*a) {
                    let bt = bv.transpose().expect("matrix");
                    acc(*a, matmul_raw(g, bt.data(), m, n, k));
                }
                if self.wants_grad(*b) {
                    let at = av.transpose().expect("matrix");
                    acc(*b, matmul_raw(at.data(), g, k, m, n));
                }
            }
            Op::Transpose(a) => {
                if self.wants_grad(*a) {
                    let shape = node.value.shape().to_vec();
                    let gt = Tensor::from_parts(shape, g.to_vec()).transpose().expect("matrix");
                    acc(*a, gt.into_data());
                }
            }
            Op::Reshape(a) => {
                if self.wants_grad(*a) {
                    acc(*a, g.to_vec());
                }
            }
            Op::BiasAdd(a, b) => {
                if self.wants_grad(*a) {
                    acc(*a, g.to_vec());
                }
                if self.wants_grad(*b) {
                    let n = val(*b).numel();
                    let mut gb = vec![0.0; n];
                    for row in g.chunks(n) {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    acc(*b, gb);
                }
            }
            Op::Reduce {
                op,
                input,
                axis,
                argmax,
            } => {
                if !self.wants_grad(*input) {
                    return;
                }
                let shape = val(*input).shape().to_vec();
                let numel = val(*input).numel();
                let (outer, len, inner) = match axis {
                    None => (1, numel, 1),
                    Some(ax) => axis_split(&shape, *ax),
                };
                let mut gi = vec![0.0; numel];
                match op {
                    Reduction::Sum | Reduction::Mean => {
                        let s = if *op == Reduction::Mean { 1.0 / len as f64 } else { 1.0 };
                        for o in 0..outer {
                            for k in 0..len {
                                for i in 0..inner {
                                    gi[o * len * inner + k * inner + i] = g[o * inner + i] * s;
                                }
                            }
                        }
                    }
                    Reduction::Max => {
                        for (slot, &src) in argmax.iter().enumerate() {
                            gi[src] += g[slot];
                        }
                    }
                }
                acc(*input, gi);
            }
            Op::LogSoftmax(a) => {
                if self.wants_grad(*a) {
                    let y = node.value.data();
                    let c = node.value.cols();
                    let mut ga = vec![0.0; y.len()];
                    for (r, (grow, yrow)) in g.chunks(c).zip(y.chunks(c)).enumerate() {
                        let gsum: f64 = grow.iter().sum();
                        for j in 0..c {
                            ga[r * c + j] = grow[j] - yrow[j].exp() * gsum;
                        }
                    }
                    acc(*a, ga);
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if self.wants_grad(*logits) {
                    let b = targets.len();
                    let c = probs.len() / b;
                    let s = g[0] / b as f64;
                    let mut gl: Vec<f64> = probs.iter().map(|p| p * s).collect();
                    for (r, &t) in targets.iter().enumerate() {
                        gl[r * c + t] -= s;
                    }
                    acc(*logits, gl);
                }
            }
            Op::GatherRows { input, rows } => {
                if self.wants_grad(*input) {
                    let src = val(*input);
                    let c = src.cols();
                    let mut gi = vec![0.0; src.numel()];
                    for (k, &r) in rows.iter().enumerate() {
                        for j in 0..c {
                            gi[r * c + j] += g[k * c + j];
                        }
                    }
                    acc(*input, gi);
                }
            }
            Op::SelectColumns { input, cols } => {
                if self.wants_grad(*input) {
                    let src = val(*input);
                    let (r, c) = (src.rows(), src.cols());
                    let w = cols.len();
                    let mut gi = vec![0.0; r * c];
                    for i in 0..r {
                        for (k, &j) in cols.iter().enumerate() {
                            gi[i * c + j] += g[i * w + k];
                        }
                    }
                    acc(*input, gi);
                }
            }
            Op::CausalCumMean { input, seq_len } => {
                if self.wants_grad(*input) {
                    let d = node.value.cols();
                    let rows = node.value.rows();
                    let mut gi = vec![0.0; rows * d];
                    for block in 0..rows / seq_len {
                        let mut acc_g = vec![0.0; d];
                        for t in (0..*seq_len).rev() {
                            let r = block * seq_len + t;
                            for j in 0..d {
                                acc_g[j] += g[r * d + j] / (t + 1) as f64;
                                gi[r * d + j] = acc_g[j];
                            }
                        }
                    }
                    acc(*input, gi);
                }
            }
            Op::Correlation(cache) => {
                if self.wants_grad(cache.student) {
                    let n = cache.student_cols.first().map_or(0, Vec::len);
                    let ds = cache.student_cols.len();
                    let mut gs = vec![0.0; n * ds];
                    for m in 0..ds {
                        let (tn, sn, c) = (cache.t_norm[m], cache.s_norm[m], cache.corr[m]);
                        if tn == 0.0 || sn == 0.0 {
                            continue;
                        }
                        let outer = -2.0 * (1.0 - c) * g[0];
                        let t = &cache.teacher[m];
                        let s = &cache.student_cols[m];
                        let mut col: Vec<f64> = t
                            .iter()
                            .zip(s)
                            .map(|(tj, sj)| outer * (tj / (tn * sn) - c * sj / (sn * sn)))
                            .collect();
                        if cache.centered {
                            let mean = col.iter().sum::<f64>() / n as f64;
                            col.iter_mut().for_each(|v| *v -= mean);
                        }
                        for (j, v) in col.into_iter().enumerate() {
                            gs[j * ds + m] = v;
                        }
                    }
                    acc(cache.student, gs);
                }
            }
        }
    }
}

/// `(cosine, |t|, |s|)`; cosine is 0 when either norm vanishes.
pub(crate) fn cosine_parts(t: &[f64], s: &[f64]) -> (f64, f64, f64) {
    let dot: f64 = t.iter().zip(s).map(|(a, b)| a * b).sum();
    let tn = t.iter().map(|v| v * v).sum::<f64>().sqrt();
    let sn = s.iter().map(|v| v * v).sum::<f64>().sqrt();
    if tn == 0.0 || sn == 0.0 {
        return (0.0, tn, sn);
    }
    ((dot / (tn * sn)).clamp(-1.0, 1.0), tn, sn)
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Binary(..) => "binary op",
        Op::Scale(..) => "scale",
        Op::Unary(..) => "unary op",
        Op::Matmul(..) => "matmul",
        Op::Transpose(..) => "transpose",
        Op::Reshape(..) => "reshape",
        Op::BiasAdd(..) => "bias_add",
        Op::Reduce { .. } => "reduce",
        Op::LogSoftmax(..) => "log_softmax",
        Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
        Op::GatherRows { .. } => "gather_rows",
        Op::SelectColumns { .. } => "select_columns",
        Op::CausalCumMean { .. } => "causal_cummean",
        Op::Correlation(..) => "correlation_loss",
    }
}

/// Result of a backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient at `v`, or zeros if the loss does not depend on it.
    pub fn wrt(&self, v: Var, tape: &Tape) -> Result<Tensor> {
        if v.tape != self.tape || v.tape != tape.id {
            return Err(Error::Graph("variable is from a different tape".into()));
        }
        let shape = tape.node(v)?.value.shape().to_vec();
        match self.grads.get(v.index).and_then(Option::as_ref) {
            Some(g) => Ok(Tensor::from_parts(shape, g.clone())),
            None => Ok(Tensor::zeros(&shape)),
        }
    }

    /// Raw gradient buffer, `None` when no gradient reached `v`.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(Option::as_deref)
    }
}
