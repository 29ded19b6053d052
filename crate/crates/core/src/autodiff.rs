//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] records every value in creation order together with the
//! operation that produced it. Creation order is a topological order of the
//! provenance DAG, so [`Graph::backward`] is a single reverse sweep over the
//! node list. Gradients accumulate (`+=`) at fan-out nodes.
//!
//! ```
//! use etrag::autodiff::Graph;
//! use etrag::Matrix;
//!
//! let mut g = Graph::new();
//! let x = g.leaf(Matrix::scalar(3.0));
//! let sq = g.mul(x, x).unwrap();
//! let root = g.sum(sq);
//! g.backward(root).unwrap();
//! assert_eq!(g.grad(x).get(0, 0), 6.0);
//! ```

use crate::matrix::{log_softmax, softmax, Matrix};
use thiserror::Error;

/// Added to every row norm in cosine similarity so zero rows stay finite.
pub const COSINE_NORM_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch { op: &'static str, left: (usize, usize), right: (usize, usize) },
    #[error("{op}: domain violation ({detail})")]
    Domain { op: &'static str, detail: String },
    #[error("{op}: index {index} out of range for {len} rows")]
    IndexOutOfRange { op: &'static str, index: usize, len: usize },
    #[error("{op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
    #[error("backward root must be 1x1, got {0:?}")]
    NonScalarRoot((usize, usize)),
    #[error("backward already ran on this graph; call zero_grad first")]
    BackwardTwice,
    #[error("finite differences: objective returned a non-finite value {0}")]
    NonFinite(f64),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a value stored in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Collapse rows: `r×c → 1×c`.
    Rows,
    /// Collapse columns: `r×c → r×1`.
    Cols,
}

/// The operation catalog together with each op's attributes.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddScalar(f64),
    /// `r×c + 1×c`, the row broadcast used for biases.
    AddRow,
    MatMul,
    Transpose,
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Sum(Option<Axis>),
    Mean,
    ConcatRows,
    ConcatCols,
    GatherRows(Vec<usize>),
    /// One output row per group: the mean of the listed input rows.
    GroupMeanRows(Vec<Vec<usize>>),
    SoftmaxRows,
    LogSoftmaxRows,
    /// Row-wise cosine similarity of two equal-shape inputs, `r×1`.
    CosineRows,
    /// Summed negative log-likelihood of one target class per row, `1×1`.
    CrossEntropy(Vec<usize>),
    Clamp {
        lo: f64,
        hi: f64,
    },
}

impl OpKind {
    fn name(&self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "subtract",
            OpKind::Mul => "elementwise-multiply",
            OpKind::Scale(_) => "scalar-multiply",
            OpKind::AddScalar(_) => "add-scalar",
            OpKind::AddRow => "add-row",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Tanh => "tanh",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Sum(_) => "sum",
            OpKind::Mean => "mean",
            OpKind::ConcatRows => "concat-rows",
            OpKind::ConcatCols => "concat-cols",
            OpKind::GatherRows(_) => "gather-rows",
            OpKind::GroupMeanRows(_) => "group-mean-rows",
            OpKind::SoftmaxRows => "softmax-per-row",
            OpKind::LogSoftmaxRows => "log-softmax-per-row",
            OpKind::CosineRows => "cosine-similarity-per-row-pair",
            OpKind::CrossEntropy(_) => "cross-entropy-with-logits",
            OpKind::Clamp { .. } => "clamp",
        }
    }
}

#[derive(Clone, Debug)]
enum Provenance {
    Leaf,
    Op { kind: OpKind, inputs: Vec<Var> },
}

#[derive(Clone, Debug)]
struct Node {
    value: Matrix,
    provenance: Provenance,
    requires_grad: bool,
}

/// A computation graph. Single-threaded; distinct graphs are independent.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Matrix>>,
    rng_seed: u64,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_seed(rng_seed: u64) -> Self {
        Graph { rng_seed, ..Self::default() }
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A trainable input; gradients are tracked for it.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Provenance::Leaf, true)
    }

    /// A fixed input; no gradient is propagated into it.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Provenance::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.get(0, 0)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of `v`; zeros when nothing reached it.
    pub fn grad(&self, v: Var) -> Matrix {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.nodes[v.0].value.shape();
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backward_done = false;
    }

    fn push(&mut self, value: Matrix, provenance: Provenance, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, provenance, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn expect_arity(kind: &OpKind, inputs: &[Var], n: usize) -> Result<()> {
        if inputs.len() != n {
            return Err(AutodiffError::InvalidArgument {
                op: kind.name(),
                detail: format!("expected {n} inputs, got {}", inputs.len()),
            });
        }
        Ok(())
    }

    fn same_shape(&self, kind: &OpKind, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(AutodiffError::ShapeMismatch { op: kind.name(), left: sa, right: sb });
        }
        Ok(())
    }

    /// Applies `kind` to `inputs`, recording provenance.
    pub fn apply(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let value = self.forward(&kind, inputs)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, Provenance::Op { kind, inputs: inputs.to_vec() }, requires_grad))
    }

    fn forward(&self, kind: &OpKind, inputs: &[Var]) -> Result<Matrix> {
        let name = kind.name();
        let val = |v: Var| &self.nodes[v.0].value;
        match kind {
            OpKind::Add | OpKind::Sub | OpKind::Mul => {
                Self::expect_arity(kind, inputs, 2)?;
                self.same_shape(kind, inputs[0], inputs[1])?;
                let (a, b) = (val(inputs[0]), val(inputs[1]));
                let f: fn(f64, f64) -> f64 = match kind {
                    OpKind::Add => |x, y| x + y,
                    OpKind::Sub => |x, y| x - y,
                    _ => |x, y| x * y,
                };
                let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
                Ok(Matrix::from_vec(a.rows(), a.cols(), data).unwrap())
            }
            OpKind::Scale(s) => {
                Self::expect_arity(kind, inputs, 1)?;
                Ok(val(inputs[0]).map(|x| x * s))
            }
            OpKind::AddScalar(s) => {
                Self::expect_arity(kind, inputs, 1)?;
                Ok(val(inputs[0]).map(|x| x + s))
            }
            OpKind::AddRow => {
                Self::expect_arity(kind, inputs, 2)?;
                let (a, row) = (val(inputs[0]), val(inputs[1]));
                if row.rows() != 1 || row.cols() != a.cols() {
                    return Err(AutodiffError::ShapeMismatch { op: name, left: a.shape(), right: row.shape() });
                }
                let mut out = a.clone();
                for r in 0..out.rows() {
                    for (o, &b) in out.row_mut(r).iter_mut().zip(row.data()) {
                        *o += b;
                    }
                }
                Ok(out)
            }
            OpKind::MatMul => {
                Self::expect_arity(kind, inputs, 2)?;
                let (a, b) = (val(inputs[0]), val(inputs[1]));
                if a.cols() != b.rows() {
                    return Err(AutodiffError::ShapeMismatch { op: name, left: a.shape(), right: b.shape() });
                }
                Ok(a.matmul(b))
            }
            OpKind::Transpose => {
                Self::expect_arity(kind, inputs, 1)?;
                Ok(val(inputs[0]).transpose())
            }
            OpKind::Exp => {
                Self::expect_arity(kind, inputs, 1)?;
                Ok(val(inputs[0]).map(f64::exp))
            }
            OpKind::Log => {
                Self::expect_arity(kind, inputs, 1)?;
                let a = val(inputs[0]);
                if let Some(bad) = a.data().iter().find(|&&x| !(x > 0.0)) {
                    return Err(AutodiffError::Domain { op: name, detail: format!("log of {bad}") });
                }
                Ok(a.map(f64::ln))
            }
            OpKind::Tanh => {
                Self::expect_arity(kind, inputs, 1)?;
                Ok(val(inputs[0]).map(f64::tanh))
            }
            OpKind::Sigmoid => {
                Self::expect_arity(kind, inputs, 1)?;
                Ok(val(inputs[0]).map(sigmoid))
            }
            OpKind::Sum(axis) => {
                Self::expect_arity(kind, inputs, 1)?;
                let a = val(inputs[0]);
                Ok(match axis {
                    None => Matrix::scalar(a.data().iter().sum()),
                    Some(Axis::Rows) => {
                        let mut out = Matrix::zeros(1, a.cols());
                        for r in 0..a.rows() {
                            for (o, &x) in out.data_mut().iter_mut().zip(a.row(r)) {
                                *o += x;
                            }
                        }
                        out
                    }
                    Some(Axis::Cols) => {
                        let data = (0..a.rows()).map(|r| a.row(r).iter().sum()).collect();
                        Matrix::from_vec(a.rows(), 1, data).unwrap()
                    }
                })
            }
            OpKind::Mean => {
                Self::expect_arity(kind, inputs, 1)?;
                let a = val(inputs[0]);
                if a.is_empty() {
                    return Err(AutodiffError::InvalidArgument { op: name, detail: "empty input".into() });
                }
                Ok(Matrix::scalar(a.data().iter().sum::<f64>() / a.len() as f64))
            }
            OpKind::ConcatRows => {
                let first =
                    inputs.first().ok_or(AutodiffError::InvalidArgument { op: name, detail: "no inputs".into() })?;
                let cols = val(*first).cols();
                let mut data = Vec::new();
                let mut rows = 0;
                for &v in inputs {
                    let m = val(v);
                    if m.cols() != cols {
                        return Err(AutodiffError::ShapeMismatch {
                            op: name,
                            left: val(*first).shape(),
                            right: m.shape(),
                        });
                    }
                    rows += m.rows();
                    data.extend_from_slice(m.data());
                }
                Ok(Matrix::from_vec(rows, cols, data).unwrap())
            }
            OpKind::ConcatCols => {
                let first =
                    inputs.first().ok_or(AutodiffError::InvalidArgument { op: name, detail: "no inputs".into() })?;
                let rows = val(*first).rows();
                for &v in inputs {
                    if val(v).rows() != rows {
                        return Err(AutodiffError::ShapeMismatch {
                            op: name,
                            left: val(*first).shape(),
                            right: val(v).shape(),
                        });
                    }
                }
                let cols: usize = inputs.iter().map(|&v| val(v).cols()).sum();
                let mut data = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for &v in inputs {
                        data.extend_from_slice(val(v).row(r));
                    }
                }
                Ok(Matrix::from_vec(rows, cols, data).unwrap())
            }
            OpKind::GatherRows(idx) => {
                Self::expect_arity(kind, inputs, 1)?;
                let a = val(inputs[0]);
                let mut data = Vec::with_capacity(idx.len() * a.cols());
                for &i in idx {
                    if i >= a.rows() {
                        return Err(AutodiffError::IndexOutOfRange { op: name, index: i, len: a.rows() });
                    }
                    data.extend_from_slice(a.row(i));
                }
                Ok(Matrix::from_vec(idx.len(), a.cols(), data).unwrap())
            }
            OpKind::GroupMeanRows(groups) => {
                Self::expect_arity(kind, inputs, 1)?;
                let a = val(inputs[0]);
                let mut out = Matrix::zeros(groups.len(), a.cols());
                for (g, members) in groups.iter().enumerate() {
                    if members.is_empty() {
                        return Err(AutodiffError::InvalidArgument { op: name, detail: format!("group {g} is empty") });
                    }
                    let w = 1.0 / members.len() as f64;
                    for &i in members {
                        if i >= a.rows() {
                            return Err(AutodiffError::IndexOutOfRange { op: name, index: i, len: a.rows() });
                        }
                        for (o, &x) in out.row_mut(g).iter_mut().zip(a.row(i)) {
                            *o += w * x;
                        }
                    }
                }
                Ok(out)
            }
            OpKind::SoftmaxRows | OpKind::LogSoftmaxRows => {
                Self::expect_arity(kind, inputs, 1)?;
                let a = val(inputs[0]);
                let f = if *kind == OpKind::SoftmaxRows { softmax } else { log_softmax };
                let mut data = Vec::with_capacity(a.len());
                for r in 0..a.rows() {
                    data.extend(f(a.row(r)));
                }
                Ok(Matrix::from_vec(a.rows(), a.cols(), data).unwrap())
            }
            OpKind::CosineRows => {
                Self::expect_arity(kind, inputs, 2)?;
                self.same_shape(kind, inputs[0], inputs[1])?;
                let (a, b) = (val(inputs[0]), val(inputs[1]));
                let data = (0..a.rows()).map(|r| cosine_parts(a.row(r), b.row(r)).cos).collect();
                Ok(Matrix::from_vec(a.rows(), 1, data).unwrap())
            }
            OpKind::CrossEntropy(targets) => {
                Self::expect_arity(kind, inputs, 1)?;
                let a = val(inputs[0]);
                if targets.len() != a.rows() {
                    return Err(AutodiffError::InvalidArgument {
                        op: name,
                        detail: format!("{} targets for {} rows", targets.len(), a.rows()),
                    });
                }
                let mut total = 0.0;
                for (r, &t) in targets.iter().enumerate() {
                    if t >= a.cols() {
                        return Err(AutodiffError::IndexOutOfRange { op: name, index: t, len: a.cols() });
                    }
                    total -= log_softmax(a.row(r))[t];
                }
                Ok(Matrix::scalar(total))
            }
            OpKind::Clamp { lo, hi } => {
                Self::expect_arity(kind, inputs, 1)?;
                if !(lo <= hi) {
                    return Err(AutodiffError::InvalidArgument { op: name, detail: format!("lo {lo} > hi {hi}") });
                }
                Ok(val(inputs[0]).map(|x| x.clamp(*lo, *hi)))
            }
        }
    }

    /// Propagates `∂root/∂v` into every ancestor `v` of a scalar `root`.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let shape = self.shape(root);
        if shape != (1, 1) {
            return Err(AutodiffError::NonScalarRoot(shape));
        }
        if self.backward_done {
            return Err(AutodiffError::BackwardTwice);
        }
        self.backward_done = true;
        self.grads[root.0] = Some(Matrix::scalar(1.0));
        let (nodes, grads) = (&self.nodes, &mut self.grads);
        for i in (0..=root.0).rev() {
            if !nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            if let Provenance::Op { kind, inputs } = &nodes[i].provenance {
                let contribs = Self::vjp(nodes, kind, inputs, &nodes[i].value, &gout);
                for (v, g) in inputs.iter().zip(contribs) {
                    if let Some(g) = g {
                        if nodes[v.0].requires_grad {
                            match &mut grads[v.0] {
                                Some(acc) => acc.add_assign(&g),
                                slot @ None => *slot = Some(g),
                            }
                        }
                    }
                }
            }
            grads[i] = Some(gout);
        }
        Ok(())
    }

    /// Vector-Jacobian products for each input of one node.
    fn vjp(nodes: &[Node], kind: &OpKind, inputs: &[Var], out: &Matrix, g: &Matrix) -> Vec<Option<Matrix>> {
        let val = |v: Var| &nodes[v.0].value;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let zip_map = |a: &Matrix, b: &Matrix, f: &dyn Fn(f64, f64) -> f64| {
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            Matrix::from_vec(a.rows(), a.cols(), data).unwrap()
        };
        match kind {
            OpKind::Add => vec![Some(g.clone()), Some(g.clone())],
            OpKind::Sub => vec![Some(g.clone()), Some(g.map(|x| -x))],
            OpKind::Mul => {
                let (a, b) = (val(inputs[0]), val(inputs[1]));
                vec![
                    wants(inputs[0]).then(|| zip_map(g, b, &|x, y| x * y)),
                    wants(inputs[1]).then(|| zip_map(g, a, &|x, y| x * y)),
                ]
            }
            OpKind::Scale(s) => vec![Some(g.map(|x| x * s))],
            OpKind::AddScalar(_) => vec![Some(g.clone())],
            OpKind::AddRow => {
                let mut row = Matrix::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (o, &x) in row.data_mut().iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
                vec![Some(g.clone()), Some(row)]
            }
            OpKind::MatMul => {
                let (a, b) = (val(inputs[0]), val(inputs[1]));
                vec![wants(inputs[0]).then(|| g.matmul_t(b)), wants(inputs[1]).then(|| a.t_matmul(g))]
            }
            OpKind::Transpose => vec![Some(g.transpose())],
            OpKind::Exp => vec![Some(zip_map(g, out, &|x, y| x * y))],
            OpKind::Log => vec![Some(zip_map(g, val(inputs[0]), &|x, y| x / y))],
            OpKind::Tanh => vec![Some(zip_map(g, out, &|x, y| x * (1.0 - y * y)))],
            OpKind::Sigmoid => vec![Some(zip_map(g, out, &|x, y| x * y * (1.0 - y)))],
            OpKind::Sum(axis) => {
                let (r, c) = val(inputs[0]).shape();
                let mut ga = Matrix::zeros(r, c);
                for i in 0..r {
                    for j in 0..c {
                        let gij = match axis {
                            None => g.get(0, 0),
                            Some(Axis::Rows) => g.get(0, j),
                            Some(Axis::Cols) => g.get(i, 0),
                        };
                        ga.set(i, j, gij);
                    }
                }
                vec![Some(ga)]
            }
            OpKind::Mean => {
                let (r, c) = val(inputs[0]).shape();
                vec![Some(Matrix::filled(r, c, g.get(0, 0) / (r * c) as f64))]
            }
            OpKind::ConcatRows => {
                let mut offset = 0;
                inputs
                    .iter()
                    .map(|&v| {
                        let (r, c) = val(v).shape();
                        let slice = g.data()[offset * c..(offset + r) * c].to_vec();
                        offset += r;
                        wants(v).then(|| Matrix::from_vec(r, c, slice).unwrap())
                    })
                    .collect()
            }
            OpKind::ConcatCols => {
                let mut offset = 0;
                inputs
                    .iter()
                    .map(|&v| {
                        let (r, c) = val(v).shape();
                        let start = offset;
                        offset += c;
                        wants(v).then(|| {
                            let mut m = Matrix::zeros(r, c);
                            for i in 0..r {
                                m.row_mut(i).copy_from_slice(&g.row(i)[start..start + c]);
                            }
                            m
                        })
                    })
                    .collect()
            }
            OpKind::GatherRows(idx) => {
                let (r, c) = val(inputs[0]).shape();
                let mut ga = Matrix::zeros(r, c);
                for (k, &i) in idx.iter().enumerate() {
                    for (o, &x) in ga.row_mut(i).iter_mut().zip(g.row(k)) {
                        *o += x;
                    }
                }
                vec![Some(ga)]
            }
            OpKind::GroupMeanRows(groups) => {
                let (r, c) = val(inputs[0]).shape();
                let mut ga = Matrix::zeros(r, c);
                for (k, members) in groups.iter().enumerate() {
                    let w = 1.0 / members.len() as f64;
                    for &i in members {
                        for (o, &x) in ga.row_mut(i).iter_mut().zip(g.row(k)) {
                            *o += w * x;
                        }
                    }
                }
                vec![Some(ga)]
            }
            OpKind::SoftmaxRows => {
                let mut ga = Matrix::zeros(out.rows(), out.cols());
                for r in 0..out.rows() {
                    let (y, gr) = (out.row(r), g.row(r));
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &yy), &gg) in ga.row_mut(r).iter_mut().zip(y).zip(gr) {
                        *o = yy * (gg - dot);
                    }
                }
                vec![Some(ga)]
            }
            OpKind::LogSoftmaxRows => {
                let mut ga = Matrix::zeros(out.rows(), out.cols());
                for r in 0..out.rows() {
                    let (y, gr) = (out.row(r), g.row(r));
                    let total: f64 = gr.iter().sum();
                    for ((o, &yy), &gg) in ga.row_mut(r).iter_mut().zip(y).zip(gr) {
                        *o = gg - yy.exp() * total;
                    }
                }
                vec![Some(ga)]
            }
            OpKind::CosineRows => {
                let (a, b) = (val(inputs[0]), val(inputs[1]));
                let (r, c) = a.shape();
                let mut ga = Matrix::zeros(r, c);
                let mut gb = Matrix::zeros(r, c);
                for i in 0..r {
                    let parts = cosine_parts(a.row(i), b.row(i));
                    let gi = g.get(i, 0);
                    let denom = parts.da * parts.db;
                    for j in 0..c {
                        let (aj, bj) = (a.get(i, j), b.get(i, j));
                        let ua = if parts.na > 0.0 { aj / parts.na } else { 0.0 };
                        let ub = if parts.nb > 0.0 { bj / parts.nb } else { 0.0 };
                        ga.set(i, j, gi * (bj / denom - parts.cos * ua / parts.da));
                        gb.set(i, j, gi * (aj / denom - parts.cos * ub / parts.db));
                    }
                }
                vec![wants(inputs[0]).then_some(ga), wants(inputs[1]).then_some(gb)]
            }
            OpKind::CrossEntropy(targets) => {
                let a = val(inputs[0]);
                let scale = g.get(0, 0);
                let mut ga = Matrix::zeros(a.rows(), a.cols());
                for (r, &t) in targets.iter().enumerate() {
                    let p = softmax(a.row(r));
                    for (j, (o, pj)) in ga.row_mut(r).iter_mut().zip(p).enumerate() {
                        *o = scale * (pj - if j == t { 1.0 } else { 0.0 });
                    }
                }
                vec![Some(ga)]
            }
            OpKind::Clamp { lo, hi } => {
                let a = val(inputs[0]);
                vec![Some(zip_map(g, a, &|gg, x| if x >= *lo && x <= *hi { gg } else { 0.0 }))]
            }
        }
    }

    // Convenience wrappers over `apply`.

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Mul, &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.apply(OpKind::Scale(s), &[a]).expect("scale is total")
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.apply(OpKind::AddScalar(s), &[a]).expect("add-scalar is total")
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.apply(OpKind::AddRow, &[a, row])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::MatMul, &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        self.apply(OpKind::Transpose, &[a]).expect("transpose is total")
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.apply(OpKind::Exp, &[a]).expect("exp is total")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Log, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.apply(OpKind::Tanh, &[a]).expect("tanh is total")
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.apply(OpKind::Sigmoid, &[a]).expect("sigmoid is total")
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.apply(OpKind::Sum(None), &[a]).expect("sum is total")
    }

    pub fn sum_axis(&mut self, a: Var, axis: Axis) -> Var {
        self.apply(OpKind::Sum(Some(axis)), &[a]).expect("sum is total")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Mean, &[a])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        self.apply(OpKind::ConcatRows, parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        self.apply(OpKind::ConcatCols, parts)
    }

    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        self.apply(OpKind::GatherRows(idx), &[a])
    }

    pub fn group_mean_rows(&mut self, a: Var, groups: Vec<Vec<usize>>) -> Result<Var> {
        self.apply(OpKind::GroupMeanRows(groups), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        self.apply(OpKind::SoftmaxRows, &[a]).expect("softmax is total")
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        self.apply(OpKind::LogSoftmaxRows, &[a]).expect("log-softmax is total")
    }

    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::CosineRows, &[a, b])
    }

    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>) -> Result<Var> {
        self.apply(OpKind::CrossEntropy(targets), &[logits])
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.apply(OpKind::Clamp { lo, hi }, &[a])
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Cosine similarity of two rows, with the same norm guard as the graph op.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    cosine_parts(a, b).cos
}

struct CosineParts {
    cos: f64,
    na: f64,
    nb: f64,
    da: f64,
    db: f64,
}

fn cosine_parts(a: &[f64], b: &[f64]) -> CosineParts {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let (da, db) = (na + COSINE_NORM_EPS, nb + COSINE_NORM_EPS);
    CosineParts { cos: dot / (da * db), na, nb, da, db }
}

/// Central-difference gradient of `f` with respect to every entry of every
/// matrix in `params`. `f` builds whatever graph it needs; nothing here
/// touches a graph.
pub fn finite_diff_grad<F>(mut f: F, params: &[Matrix], epsilon: f64) -> Result<Vec<Matrix>>
where
    F: FnMut(&[Matrix]) -> Result<f64>,
{
    if !(epsilon > 0.0) {
        return Err(AutodiffError::InvalidArgument { op: "finite_diff_grad", detail: format!("epsilon {epsilon}") });
    }
    let mut work: Vec<Matrix> = params.to_vec();
    let mut grads = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let (r, c) = params[p].shape();
        let mut grad = Matrix::zeros(r, c);
        for k in 0..params[p].len() {
            let orig = params[p].data()[k];
            work[p].data_mut()[k] = orig + epsilon;
            let plus = f(&work)?;
            work[p].data_mut()[k] = orig - epsilon;
            let minus = f(&work)?;
            work[p].data_mut()[k] = orig;
            for v in [plus, minus] {
                if !v.is_finite() {
                    return Err(AutodiffError::NonFinite(v));
                }
            }
            grad.data_mut()[k] = (plus - minus) / (2.0 * epsilon);
        }
        grads.push(grad);
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn add_doubles() {
        let mut g = Graph::new();
        let a = g.leaf(Matrix::from_rows(&[[1.0, 2.0]]));
        let y = g.add(a, a).unwrap();
        assert_eq!(g.value(y), &Matrix::from_rows(&[[2.0, 4.0]]));
    }

    #[test]
    fn uniform_softmax() {
        let mut g = Graph::new();
        let a = g.leaf(Matrix::from_rows(&[[0.0, 0.0, 0.0]]));
        let y = g.softmax_rows(a);
        for &v in g.value(y).data() {
            assert!(approx(v, 1.0 / 3.0, 1e-15));
        }
    }

    #[test]
    fn orthogonal_cosine_is_zero() {
        let mut g = Graph::new();
        let u = g.leaf(Matrix::from_rows(&[[1.0, 0.0]]));
        let v = g.leaf(Matrix::from_rows(&[[0.0, 1.0]]));
        let c = g.cosine_rows(u, v).unwrap();
        assert_eq!(g.value(c).get(0, 0), 0.0);
    }

    #[test]
    fn zero_row_cosine_is_finite() {
        let mut g = Graph::new();
        let u = g.leaf(Matrix::from_rows(&[[0.0, 0.0]]));
        let v = g.leaf(Matrix::from_rows(&[[0.0, 1.0]]));
        let c = g.cosine_rows(u, v).unwrap();
        let s = g.sum(c);
        g.backward(s).unwrap();
        assert!(g.grad(u).all_finite() && g.grad(v).all_finite());
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Matrix::scalar(3.0));
        let sq = g.mul(x, x).unwrap();
        let root = g.sum(sq);
        g.backward(root).unwrap();
        assert_eq!(g.grad(x).get(0, 0), 6.0);
        assert_eq!(g.grad(root).get(0, 0), 1.0);
    }

    #[test]
    fn exp_gradient_at_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Matrix::scalar(0.0));
        let e = g.exp(x);
        let root = g.sum(e);
        g.backward(root).unwrap();
        assert_eq!(g.grad(x).get(0, 0), 1.0);
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut g = Graph::new();
        let logits = g.leaf(Matrix::from_rows(&[[0.0, 0.0]]));
        let loss = g.cross_entropy(logits, vec![0]).unwrap();
        g.backward(loss).unwrap();
        let fd = finite_diff_grad(
            |p| {
                let mut g = Graph::new();
                let l = g.leaf(p[0].clone());
                let loss = g.cross_entropy(l, vec![0])?;
                Ok(g.scalar_value(loss))
            },
            &[Matrix::from_rows(&[[0.0, 0.0]])],
            1e-6,
        )
        .unwrap();
        // Frozen from the finite-difference oracle.
        let expected = [-0.5, 0.5];
        for j in 0..2 {
            assert!(approx(fd[0].get(0, j), expected[j], 1e-9));
            assert!(approx(g.grad(logits).get(0, j), expected[j], 1e-12));
        }
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Matrix::from_rows(&[[1.0, 2.0]]));
        assert_eq!(g.backward(x), Err(AutodiffError::NonScalarRoot((1, 2))));
    }

    #[test]
    fn second_backward_requires_reset() {
        let mut g = Graph::new();
        let x = g.leaf(Matrix::scalar(2.0));
        let root = g.sum(x);
        g.backward(root).unwrap();
        assert_eq!(g.backward(root), Err(AutodiffError::BackwardTwice));
        g.zero_grad();
        g.backward(root).unwrap();
        assert_eq!(g.grad(x).get(0, 0), 1.0);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::new();
        let a = g.leaf(Matrix::zeros(2, 3));
        let b = g.leaf(Matrix::zeros(2, 3));
        match g.matmul(a, b) {
            Err(AutodiffError::ShapeMismatch { op, left, right }) => {
                assert_eq!(op, "matmul");
                assert_eq!((left, right), ((2, 3), (2, 3)));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn log_domain_is_an_error() {
        let mut g = Graph::new();
        let a = g.leaf(Matrix::from_rows(&[[1.0, 0.0]]));
        assert!(matches!(g.log(a), Err(AutodiffError::Domain { op: "log", .. })));
    }

    #[test]
    fn clamp_passes_gradient_only_inside() {
        let mut g = Graph::new();
        let a = g.leaf(Matrix::from_rows(&[[-2.0, 0.5, 3.0]]));
        let c = g.clamp(a, -1.0, 1.0).unwrap();
        assert_eq!(g.value(c).data(), &[-1.0, 0.5, 1.0]);
        let s = g.sum(c);
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let a = g.constant(Matrix::scalar(2.0));
        let b = g.leaf(Matrix::scalar(5.0));
        let p = g.mul(a, b).unwrap();
        g.backward(p).unwrap();
        assert_eq!(g.grad(a).get(0, 0), 0.0);
        assert_eq!(g.grad(b).get(0, 0), 2.0);
    }

    #[test]
    fn finite_differences_of_square_and_constant() {
        let fd = finite_diff_grad(|p| Ok(p[0].get(0, 0).powi(2)), &[Matrix::scalar(3.0)], 1e-5).unwrap();
        assert!(approx(fd[0].get(0, 0), 6.0, 1e-6));
        let fd = finite_diff_grad(|_| Ok(4.2), &[Matrix::scalar(-1.0)], 1e-5).unwrap();
        assert!(fd[0].get(0, 0).abs() < 1e-10);
        assert!(finite_diff_grad(|_| Ok(f64::NAN), &[Matrix::scalar(0.0)], 1e-5).is_err());
        assert!(finite_diff_grad(|_| Ok(0.0), &[Matrix::scalar(0.0)], 0.0).is_err());
    }
}
