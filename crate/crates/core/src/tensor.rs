//! Dense `f64` tensors and a reverse-mode tape.
//!
//! A [`Tensor`] is an immutable row-major buffer plus an optional tape node.
//! Tensors without a node are constants: operations whose inputs are all
//! constants record nothing, so inference code and training code share the
//! same forward functions. Parameters enter a tape through [`Tape::watch`].
//!
//! A tape is single-use: [`Tape::backward`] consumes it and a second call
//! fails until [`Tape::reset`] is invoked.

use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },
    #[error("division by zero in {op} at flat index {index}")]
    DivByZero { op: &'static str, index: usize },
    #[error("{op} undefined for {value} at flat index {index}")]
    Domain {
        op: &'static str,
        value: f64,
        index: usize,
    },
    #[error("row index {index} out of range for {rows} rows")]
    Index { index: usize, rows: usize },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("backward root is not recorded on this tape")]
    DetachedRoot,
    #[error("tape already consumed by a backward pass; reset it first")]
    TapeConsumed,
    #[error("tensor belongs to a different tape or a reset generation")]
    ForeignNode,
}

pub type Result<T> = std::result::Result<T, TensorError>;

static TAPE_GENERATION: AtomicU64 = AtomicU64::new(1);

/// Handle to a node recorded on a specific tape generation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId {
    tape: u64,
    index: usize,
}

#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    node: Option<NodeId>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .field("tracked", &self.node.is_some())
            .finish()
    }
}

/// Value equality: shape and data, ignoring tape membership.
impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                len: data.len(),
                shape,
            });
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
            node: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: Arc::new(vec![value; n]),
            node: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: Arc::new(vec![value]),
            node: None,
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data: Arc::new(data),
            node: None,
        }
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            let row = row.as_ref();
            if row.len() != cols {
                return Err(TensorError::Shape {
                    op: "from_rows",
                    lhs: vec![cols],
                    rhs: vec![row.len()],
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1..].iter().product()
        } else {
            1
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Same values, no tape node.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: None,
        }
    }

    /// Mutable access to the buffer. Drops any tape node, since the
    /// recorded activation no longer matches.
    pub fn data_mut(&mut self) -> &mut [f64] {
        self.node = None;
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<f64> {
        Arc::try_unwrap(self.data).unwrap_or_else(|a| (*a).clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
            node: None,
        }
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.len() {
            return Err(TensorError::DataLength {
                len: self.len(),
                shape,
            });
        }
        Ok(Tensor {
            shape,
            data: Arc::clone(&self.data),
            node: self.node,
        })
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Stop-gradient: identical values, detached from every tape.
pub fn stop_grad(x: &Tensor) -> Tensor {
    x.detach()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Exp,
    Tanh,
    Relu,
    Silu,
    Square,
    Sqrt,
}

enum Op {
    Leaf,
    MatMul {
        a: Tensor,
        b: Tensor,
    },
    Binary {
        kind: BinaryOp,
        a: Tensor,
        b: Tensor,
    },
    Unary {
        kind: UnaryOp,
        x: Tensor,
        y: Tensor,
    },
    Scale {
        x: NodeId,
        factor: f64,
    },
    Sum {
        x: NodeId,
    },
    RowSum {
        x: NodeId,
        cols: usize,
    },
    ScaleRows {
        x: Tensor,
        s: Tensor,
    },
    ConcatCols {
        parts: Vec<(Option<NodeId>, usize)>,
        rows: usize,
    },
    GatherRows {
        table: NodeId,
        cols: usize,
        index: Vec<usize>,
    },
}

struct Node {
    op: Op,
    len: usize,
}

/// Gradients of the backward root with respect to every watched leaf it reaches.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, x: &Tensor) -> Option<&Tensor> {
        x.node.and_then(|n| self.grads.get(&n))
    }

    /// Gradient for `x`, or zeros when the root does not depend on it.
    pub fn get_or_zeros(&self, x: &Tensor) -> Tensor {
        self.get(x)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(x.shape()))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// `f(a_i, b_i)` over `n` outputs where the shorter operand repeats.
fn zip_broadcast(a: &[f64], b: &[f64], n: usize, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n);
    if a.len() == b.len() {
        out.extend(a.iter().zip(b).map(|(&x, &y)| f(x, y)));
    } else if a.len() == n {
        for chunk in a.chunks_exact(b.len()) {
            out.extend(chunk.iter().zip(b).map(|(&x, &y)| f(x, y)));
        }
    } else {
        for chunk in b.chunks_exact(a.len()) {
            out.extend(a.iter().zip(chunk).map(|(&x, &y)| f(x, y)));
        }
    }
    out
}

pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: TAPE_GENERATION.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Clears all nodes and starts a new generation. Tensors recorded on
    /// the previous generation are rejected afterwards.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
        self.id = TAPE_GENERATION.fetch_add(1, Ordering::Relaxed);
    }

    /// Registers `x` as a differentiable leaf.
    pub fn watch(&mut self, x: &Tensor) -> Tensor {
        let node = self.push(Op::Leaf, x.len());
        Tensor {
            shape: x.shape.clone(),
            data: Arc::clone(&x.data),
            node: Some(node),
        }
    }

    fn push(&mut self, op: Op, len: usize) -> NodeId {
        let index = self.nodes.len();
        self.nodes.push(Node { op, len });
        NodeId { tape: self.id, index }
    }

    fn check(&self, xs: &[&Tensor]) -> Result<bool> {
        let mut any = false;
        for x in xs {
            if let Some(n) = x.node {
                if n.tape != self.id || n.index >= self.nodes.len() {
                    return Err(TensorError::ForeignNode);
                }
                any = true;
            }
        }
        Ok(any)
    }

    fn output(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Option<Op>) -> Tensor {
        let node = op.map(|op| self.push(op, data.len()));
        Tensor {
            shape,
            data: Arc::new(data),
            node,
        }
    }

    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            });
        }
        let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &a.data, (k, 1), &b.data, (n, 1), &mut out, false);
        let op = self.check(&[a, b])?.then(|| Op::MatMul {
            a: a.clone(),
            b: b.clone(),
        });
        Ok(self.output(vec![m, n], out, op))
    }

    fn broadcast_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
        let suffix = |big: &[usize], small: &[usize]| {
            small.len() <= big.len() && big[big.len() - small.len()..] == *small
        };
        if a.shape == b.shape || b.len() == 1 || suffix(&a.shape, &b.shape) {
            Ok(a.shape.clone())
        } else if a.len() == 1 || suffix(&b.shape, &a.shape) {
            Ok(b.shape.clone())
        } else {
            Err(TensorError::Shape {
                op,
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            })
        }
    }

    /// Elementwise binary op. The smaller operand broadcasts when it is a
    /// scalar or matches the trailing dimensions of the larger one.
    pub fn binary(&mut self, kind: BinaryOp, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let name = match kind {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
        };
        let shape = Self::broadcast_shape(name, a, b)?;
        let n: usize = shape.iter().product();
        if kind == BinaryOp::Div {
            if let Some(index) = b.data.iter().position(|&v| v == 0.0) {
                return Err(TensorError::DivByZero { op: name, index });
            }
        }
        let out = match kind {
            BinaryOp::Add => zip_broadcast(&a.data, &b.data, n, |x, y| x + y),
            BinaryOp::Sub => zip_broadcast(&a.data, &b.data, n, |x, y| x - y),
            BinaryOp::Mul => zip_broadcast(&a.data, &b.data, n, |x, y| x * y),
            BinaryOp::Div => zip_broadcast(&a.data, &b.data, n, |x, y| x / y),
        };
        let op = self.check(&[a, b])?.then(|| Op::Binary {
            kind,
            a: a.clone(),
            b: b.clone(),
        });
        Ok(self.output(shape, out, op))
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn unary(&mut self, kind: UnaryOp, x: &Tensor) -> Result<Tensor> {
        if kind == UnaryOp::Sqrt {
            if let Some(index) = x.data.iter().position(|&v| v < 0.0) {
                return Err(TensorError::Domain {
                    op: "sqrt",
                    value: x.data[index],
                    index,
                });
            }
        }
        let data = x.data.iter();
        let out: Vec<f64> = match kind {
            UnaryOp::Exp => data.map(|v| v.exp()).collect(),
            UnaryOp::Tanh => data.map(|v| v.tanh()).collect(),
            UnaryOp::Relu => data.map(|v| v.max(0.0)).collect(),
            UnaryOp::Silu => data.map(|v| v / (1.0 + (-v).exp())).collect(),
            UnaryOp::Square => data.map(|v| v * v).collect(),
            UnaryOp::Sqrt => data.map(|v| v.sqrt()).collect(),
        };
        let shape = x.shape.clone();
        if !self.check(&[x])? {
            return Ok(self.output(shape, out, None));
        }
        let y = Tensor {
            shape: shape.clone(),
            data: Arc::new(out),
            node: None,
        };
        let node = self.push(
            Op::Unary {
                kind,
                x: x.clone(),
                y: y.clone(),
            },
            y.len(),
        );
        Ok(Tensor {
            node: Some(node),
            ..y
        })
    }

    pub fn exp(&mut self, x: &Tensor) -> Result<Tensor> {
        self.unary(UnaryOp::Exp, x)
    }

    pub fn tanh(&mut self, x: &Tensor) -> Result<Tensor> {
        self.unary(UnaryOp::Tanh, x)
    }

    pub fn relu(&mut self, x: &Tensor) -> Result<Tensor> {
        self.unary(UnaryOp::Relu, x)
    }

    pub fn silu(&mut self, x: &Tensor) -> Result<Tensor> {
        self.unary(UnaryOp::Silu, x)
    }

    pub fn square(&mut self, x: &Tensor) -> Result<Tensor> {
        self.unary(UnaryOp::Square, x)
    }

    pub fn sqrt(&mut self, x: &Tensor) -> Result<Tensor> {
        self.unary(UnaryOp::Sqrt, x)
    }

    pub fn scale(&mut self, x: &Tensor, factor: f64) -> Result<Tensor> {
        let out = x.data.iter().map(|v| v * factor).collect();
        let op = match x.node {
            Some(n) => {
                self.check(&[x])?;
                Some(Op::Scale { x: n, factor })
            }
            None => None,
        };
        Ok(self.output(x.shape.clone(), out, op))
    }

    pub fn sum(&mut self, x: &Tensor) -> Result<Tensor> {
        let s = x.data.iter().sum();
        let op = match x.node {
            Some(n) => {
                self.check(&[x])?;
                Some(Op::Sum { x: n })
            }
            None => None,
        };
        Ok(self.output(Vec::new(), vec![s], op))
    }

    pub fn mean(&mut self, x: &Tensor) -> Result<Tensor> {
        let s = self.sum(x)?;
        self.scale(&s, 1.0 / x.len() as f64)
    }

    /// Sum over the last dimension of a matrix: `[m, n] -> [m]`.
    pub fn row_sum(&mut self, x: &Tensor) -> Result<Tensor> {
        let (m, n) = (x.rows(), x.cols());
        let out = (0..m).map(|i| x.data[i * n..(i + 1) * n].iter().sum()).collect();
        let op = match x.node {
            Some(node) => {
                self.check(&[x])?;
                Some(Op::RowSum { x: node, cols: n })
            }
            None => None,
        };
        Ok(self.output(vec![m], out, op))
    }

    /// Multiplies row `i` of `x` by `s[i]`.
    pub fn scale_rows(&mut self, x: &Tensor, s: &Tensor) -> Result<Tensor> {
        if x.shape.len() != 2 || s.len() != x.rows() {
            return Err(TensorError::Shape {
                op: "scale_rows",
                lhs: x.shape.clone(),
                rhs: s.shape.clone(),
            });
        }
        let n = x.cols();
        let out = x
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| v * s.data[i / n])
            .collect();
        let op = self.check(&[x, s])?.then(|| Op::ScaleRows {
            x: x.clone(),
            s: s.clone(),
        });
        Ok(self.output(x.shape.clone(), out, op))
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[&Tensor]) -> Result<Tensor> {
        let rows = parts.first().map_or(0, |p| p.rows());
        for p in parts {
            if p.shape.len() != 2 || p.rows() != rows {
                return Err(TensorError::Shape {
                    op: "concat_cols",
                    lhs: parts[0].shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
        }
        let total: usize = parts.iter().map(|p| p.cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for p in parts {
                out.extend_from_slice(p.row(i));
            }
        }
        let op = self.check(parts)?.then(|| Op::ConcatCols {
            parts: parts.iter().map(|p| (p.node, p.cols())).collect(),
            rows,
        });
        Ok(self.output(vec![rows, total], out, op))
    }

    /// Embedding lookup: row `index[i]` of `table` becomes output row `i`.
    pub fn gather_rows(&mut self, table: &Tensor, index: &[usize]) -> Result<Tensor> {
        let (rows, cols) = (table.rows(), table.cols());
        let mut out = Vec::with_capacity(index.len() * cols);
        for &i in index {
            if i >= rows {
                return Err(TensorError::Index { index: i, rows });
            }
            out.extend_from_slice(table.row(i));
        }
        let op = match table.node {
            Some(node) => {
                self.check(&[table])?;
                Some(Op::GatherRows {
                    table: node,
                    cols,
                    index: index.to_vec(),
                })
            }
            None => None,
        };
        Ok(self.output(vec![index.len(), cols], out, op))
    }

    /// Reverse pass from a scalar root. Consumes the tape.
    pub fn backward(&mut self, root: &Tensor) -> Result<Gradients> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        if root.len() != 1 {
            return Err(TensorError::NonScalarRoot(root.shape.clone()));
        }
        let root_id = root.node.ok_or(TensorError::DetachedRoot)?;
        if root_id.tape != self.id {
            return Err(TensorError::ForeignNode);
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = (0..=root_id.index).map(|_| None).collect();
        grads[root_id.index] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for idx in (0..=root_id.index).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    let id = NodeId { tape: self.id, index: idx };
                    out.grads.insert(id, Tensor::vector(g));
                }
                Op::MatMul { a, b } => {
                    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
                    if let Some(na) = a.node {
                        // dA = dC · Bᵀ
                        let mut da = vec![0.0; m * k];
                        gemm(m, n, k, &g, (n, 1), &b.data, (1, n), &mut da, false);
                        accumulate(&mut grads, na.index, da);
                    }
                    if let Some(nb) = b.node {
                        // dB = Aᵀ · dC
                        let mut db = vec![0.0; k * n];
                        gemm(k, m, n, &a.data, (1, k), &g, (n, 1), &mut db, false);
                        accumulate(&mut grads, nb.index, db);
                    }
                }
                Op::Binary { kind, a, b } => {
                    if let Some(na) = a.node {
                        let ga = match kind {
                            BinaryOp::Add | BinaryOp::Sub => reduce_grad(&g, &a.data, &b.data, a.len(), |gi, _, _| gi),
                            BinaryOp::Mul => reduce_grad(&g, &a.data, &b.data, a.len(), |gi, _, y| gi * y),
                            BinaryOp::Div => reduce_grad(&g, &a.data, &b.data, a.len(), |gi, _, y| gi / y),
                        };
                        accumulate(&mut grads, na.index, ga);
                    }
                    if let Some(nb) = b.node {
                        let gb = match kind {
                            BinaryOp::Add => reduce_grad(&g, &a.data, &b.data, b.len(), |gi, _, _| gi),
                            BinaryOp::Sub => reduce_grad(&g, &a.data, &b.data, b.len(), |gi, _, _| -gi),
                            BinaryOp::Mul => reduce_grad(&g, &a.data, &b.data, b.len(), |gi, x, _| gi * x),
                            BinaryOp::Div => reduce_grad(&g, &a.data, &b.data, b.len(), |gi, x, y| -gi * x / (y * y)),
                        };
                        accumulate(&mut grads, nb.index, gb);
                    }
                }
                Op::Unary { kind, x, y } => {
                    let nx = x.node.expect("unary node without tracked input");
                    let gx = g
                        .iter()
                        .zip(x.data.iter().zip(y.data.iter()))
                        .map(|(gi, (&xv, &yv))| {
                            gi * match kind {
                                UnaryOp::Exp => yv,
                                UnaryOp::Tanh => 1.0 - yv * yv,
                                UnaryOp::Relu => {
                                    if xv > 0.0 {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                                UnaryOp::Silu => {
                                    let s = 1.0 / (1.0 + (-xv).exp());
                                    s * (1.0 + xv * (1.0 - s))
                                }
                                UnaryOp::Square => 2.0 * xv,
                                UnaryOp::Sqrt => 0.5 / yv,
                            }
                        })
                        .collect();
                    accumulate(&mut grads, nx.index, gx);
                }
                Op::Scale { x, factor } => {
                    let gx = g.iter().map(|v| v * factor).collect();
                    accumulate(&mut grads, x.index, gx);
                }
                Op::Sum { x } => {
                    let len = self.nodes[x.index].len;
                    accumulate(&mut grads, x.index, vec![g[0]; len]);
                }
                Op::RowSum { x, cols } => {
                    let gx = g
                        .iter()
                        .flat_map(|&gi| std::iter::repeat_n(gi, *cols))
                        .collect();
                    accumulate(&mut grads, x.index, gx);
                }
                Op::ScaleRows { x, s } => {
                    let n = x.cols();
                    if let Some(nx) = x.node {
                        let gx = g
                            .iter()
                            .enumerate()
                            .map(|(i, gi)| gi * s.data[i / n])
                            .collect();
                        accumulate(&mut grads, nx.index, gx);
                    }
                    if let Some(ns) = s.node {
                        let mut gs = vec![0.0; s.len()];
                        for (i, gi) in g.iter().enumerate() {
                            gs[i / n] += gi * x.data[i];
                        }
                        accumulate(&mut grads, ns.index, gs);
                    }
                }
                Op::ConcatCols { parts, rows } => {
                    let total: usize = parts.iter().map(|p| p.1).sum();
                    let mut offset = 0;
                    for &(node, cols) in parts {
                        if let Some(np) = node {
                            let mut gp = Vec::with_capacity(rows * cols);
                            for i in 0..*rows {
                                let start = i * total + offset;
                                gp.extend_from_slice(&g[start..start + cols]);
                            }
                            accumulate(&mut grads, np.index, gp);
                        }
                        offset += cols;
                    }
                }
                Op::GatherRows { table, cols, index } => {
                    let mut gt = vec![0.0; self.nodes[table.index].len];
                    for (i, &row) in index.iter().enumerate() {
                        for j in 0..*cols {
                            gt[row * cols + j] += g[i * cols + j];
                        }
                    }
                    accumulate(&mut grads, table.index, gt);
                }
            }
        }
        Ok(out)
    }
}

/// Sums `f(g_i, a_i, b_i)` into an output of length `len`, cycling the
/// broadcast operands.
fn reduce_grad(g: &[f64], a: &[f64], b: &[f64], len: usize, f: impl Fn(f64, f64, f64) -> f64) -> Vec<f64> {
    let mut out = vec![0.0; len];
    let (mut ia, mut ib, mut io) = (0, 0, 0);
    for &gi in g {
        out[io] += f(gi, a[ia], b[ib]);
        ia += 1;
        if ia == a.len() {
            ia = 0;
        }
        ib += 1;
        if ib == b.len() {
            ib = 0;
        }
        io += 1;
        if io == len {
            io = 0;
        }
    }
    out
}

fn accumulate(grads: &mut [Option<Vec<f64>>], index: usize, g: Vec<f64>) {
    match &mut grads[index] {
        Some(existing) => existing.iter_mut().zip(g).for_each(|(e, v)| *e += v),
        slot @ None => *slot = Some(g),
    }
}

/// `c = a · b` (or `c += a · b` when `add`), with explicit (row, col) strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    add: bool,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: bounds asserted above; strides describe dense row-major or
    // transposed views of exactly those buffers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            if add { 1.0 } else { 0.0 },
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    /// Central finite differences of `f` with respect to every entry of `x`.
    fn numeric_grad(x: &Tensor, f: &dyn Fn(&Tensor) -> f64) -> Vec<f64> {
        let h = 1e-4;
        (0..x.len())
            .map(|i| {
                let mut plus = x.clone();
                plus.data_mut()[i] += h;
                let mut minus = x.clone();
                minus.data_mut()[i] -= h;
                (f(&plus) - f(&minus)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn matmul_values() {
        let mut tape = Tape::new();
        let id = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let x = m(&[&[1.5, -2.0], &[3.0, 4.0]]);
        assert_eq!(tape.matmul(&id, &x).unwrap(), x);
        let c = tape
            .matmul(&m(&[&[1.0, 2.0], &[3.0, 4.0]]), &m(&[&[5.0], &[6.0]]))
            .unwrap();
        assert_eq!(c.data(), &[17.0, 39.0]);
        assert_eq!(c.shape(), &[2, 1]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut tape = Tape::new();
        let err = tape.matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3]));
        assert!(matches!(err, Err(TensorError::Shape { op: "matmul", .. })));
    }

    #[test]
    fn matmul_gradient() {
        let mut tape = Tape::new();
        let a = tape.watch(&m(&[&[1.0, 1.0]]));
        let b = m(&[&[2.0], &[3.0]]);
        let c = tape.matmul(&a, &b).unwrap();
        let s = tape.sum(&c).unwrap();
        let g = tape.backward(&s).unwrap();
        assert_eq!(g.get(&a).unwrap().data(), &[2.0, 3.0]);
    }

    #[test]
    fn elementwise_identities() {
        let mut tape = Tape::new();
        let x = Tensor::vector(vec![1.0, -2.0, 3.5]);
        assert_eq!(tape.add(&x, &Tensor::scalar(0.0)).unwrap(), x);

        let x = tape.watch(&Tensor::scalar(3.0));
        let y = tape.square(&x).unwrap();
        assert_eq!(tape.backward(&y).unwrap().get(&x).unwrap().item(), 6.0);

        let mut tape = Tape::new();
        let x = tape.watch(&Tensor::scalar(0.0));
        let y = tape.tanh(&x).unwrap();
        assert_eq!(tape.backward(&y).unwrap().get(&x).unwrap().item(), 1.0);
    }

    #[test]
    fn division_by_zero_reports_location() {
        let mut tape = Tape::new();
        let err = tape
            .div(&Tensor::vector(vec![1.0, 2.0, 3.0]), &Tensor::vector(vec![1.0, 0.0, 2.0]))
            .unwrap_err();
        assert_eq!(err, TensorError::DivByZero { op: "div", index: 1 });
    }

    #[test]
    fn broadcasting_rules() {
        let mut tape = Tape::new();
        let x = Tensor::zeros(&[3, 2]);
        assert!(tape.add(&x, &Tensor::vector(vec![1.0, 2.0])).is_ok());
        assert!(tape.add(&x, &Tensor::scalar(1.0)).is_ok());
        // A column vector is not a trailing-dim broadcast.
        assert!(tape.add(&x, &Tensor::zeros(&[3, 1])).is_err());
        assert!(tape.add(&x, &Tensor::vector(vec![1.0, 2.0, 3.0])).is_err());
    }

    #[test]
    fn stop_grad_detaches_one_factor() {
        let mut tape = Tape::new();
        let x = tape.watch(&Tensor::vector(vec![2.0]));
        let y = tape.mul(&x, &stop_grad(&x)).unwrap();
        let s = tape.sum(&y).unwrap();
        assert_eq!(tape.backward(&s).unwrap().get(&x).unwrap().data(), &[2.0]);

        let c = Tensor::vector(vec![1.0, 2.0]);
        assert_eq!(stop_grad(&c), c);
        assert!(!stop_grad(&c).is_tracked());
    }

    #[test]
    fn stop_grad_blocks_target_branch() {
        // ‖u − sg(u_tgt)‖² with u_tgt produced from p: p gets nothing.
        let mut tape = Tape::new();
        let w = tape.watch(&Tensor::vector(vec![0.5, -1.0]));
        let p = tape.watch(&Tensor::vector(vec![2.0, 3.0]));
        let target = tape.square(&p).unwrap();
        let diff = tape.sub(&w, &stop_grad(&target)).unwrap();
        let sq = tape.square(&diff).unwrap();
        let loss = tape.sum(&sq).unwrap();
        let g = tape.backward(&loss).unwrap();
        assert!(g.get(&p).is_none());
        assert_eq!(g.get_or_zeros(&p).data(), &[0.0, 0.0]);
        assert!(g.get(&w).is_some());
    }

    #[test]
    fn weighted_sum_gradient() {
        let mut tape = Tape::new();
        let w = tape.watch(&Tensor::vector(vec![1.0, 2.0]));
        let x = Tensor::vector(vec![3.0, 4.0]);
        let y = tape.mul(&w, &x).unwrap();
        let s = tape.sum(&y).unwrap();
        assert_eq!(tape.backward(&s).unwrap().get(&w).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn independent_parameter_gets_zero() {
        let mut tape = Tape::new();
        let p = tape.watch(&Tensor::vector(vec![1.0, 1.0]));
        let q = tape.watch(&Tensor::vector(vec![2.0]));
        let s = tape.sum(&q).unwrap();
        let g = tape.backward(&s).unwrap();
        assert_eq!(g.get_or_zeros(&p).data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_errors() {
        let mut tape = Tape::new();
        let x = tape.watch(&Tensor::vector(vec![1.0, 2.0]));
        assert_eq!(
            tape.backward(&x).unwrap_err(),
            TensorError::NonScalarRoot(vec![2])
        );
        assert_eq!(
            tape.backward(&Tensor::scalar(1.0)).unwrap_err(),
            TensorError::DetachedRoot
        );
        let s = tape.sum(&x).unwrap();
        tape.backward(&s).unwrap();
        assert_eq!(tape.backward(&s).unwrap_err(), TensorError::TapeConsumed);
        tape.reset();
        assert_eq!(tape.sum(&x).unwrap_err(), TensorError::ForeignNode);
    }

    #[test]
    fn constants_record_nothing() {
        let mut tape = Tape::new();
        let a = Tensor::zeros(&[4, 3]);
        let b = Tensor::zeros(&[3, 2]);
        let c = tape.matmul(&a, &b).unwrap();
        let d = tape.silu(&c).unwrap();
        assert!(!d.is_tracked());
        assert!(tape.is_empty());
    }

    #[test]
    fn gather_concat_row_ops_match_finite_differences() {
        let table = m(&[&[0.3, -0.2], &[1.1, 0.4], &[-0.7, 0.9]]);
        let x = m(&[&[0.5, 1.0, -1.0], &[2.0, -0.5, 0.1]]);
        let s = Tensor::vector(vec![0.7, -1.3]);
        let index = [2usize, 0];
        let f = |table: &Tensor, x: &Tensor, s: &Tensor, tape: &mut Tape| {
            let e = tape.gather_rows(table, &index).unwrap();
            let h = tape.concat_cols(&[&e, x]).unwrap();
            let h = tape.tanh(&h).unwrap();
            let h = tape.scale_rows(&h, s).unwrap();
            let r = tape.row_sum(&h).unwrap();
            let r = tape.square(&r).unwrap();
            tape.sum(&r).unwrap()
        };
        let mut tape = Tape::new();
        let (tt, xt, st) = (tape.watch(&table), tape.watch(&x), tape.watch(&s));
        let loss = f(&tt, &xt, &st, &mut tape);
        let g = tape.backward(&loss).unwrap();
        let eval = |tb: &Tensor, xb: &Tensor, sb: &Tensor| f(tb, xb, sb, &mut Tape::new()).item();
        let checks = [
            (g.get(&tt).unwrap(), numeric_grad(&table, &|p| eval(p, &x, &s))),
            (g.get(&xt).unwrap(), numeric_grad(&x, &|p| eval(&table, p, &s))),
            (g.get(&st).unwrap(), numeric_grad(&s, &|p| eval(&table, &x, p))),
        ];
        for (analytic, numeric) in checks {
            for (a, n) in analytic.data().iter().zip(&numeric) {
                assert!((a - n).abs() < 1e-6 * (1.0 + n.abs()), "{a} vs {n}");
            }
        }
    }

    #[test]
    fn reused_input_accumulates_over_paths() {
        // f = x·x + 3x  ⇒  f' = 2x + 3
        let mut tape = Tape::new();
        let x = tape.watch(&Tensor::scalar(1.5));
        let a = tape.mul(&x, &x).unwrap();
        let b = tape.scale(&x, 3.0).unwrap();
        let f = tape.add(&a, &b).unwrap();
        assert_eq!(tape.backward(&f).unwrap().get(&x).unwrap().item(), 6.0);
    }

    fn composite(x: &Tensor, w: &Tensor, tape: &mut Tape) -> Tensor {
        let h = tape.matmul(x, w).unwrap();
        let a = tape.tanh(&h).unwrap();
        let b = tape.silu(&h).unwrap();
        let c = tape.mul(&a, &b).unwrap();
        let e = tape.scale(&h, 0.3).unwrap();
        let e = tape.exp(&e).unwrap();
        let d = tape.sub(&c, &e).unwrap();
        let sq = tape.square(&d).unwrap();
        let one = Tensor::scalar(1.0);
        let sq1 = tape.add(&sq, &one).unwrap();
        let r = tape.sqrt(&sq1).unwrap();
        let q = tape.div(&r, &sq1).unwrap();
        tape.mean(&q).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn reverse_mode_matches_central_differences(
            xs in proptest::collection::vec(-2.0f64..2.0, 6),
            ws in proptest::collection::vec(-2.0f64..2.0, 6),
        ) {
            let x = Tensor::new(vec![2, 3], xs).unwrap();
            let w = Tensor::new(vec![3, 2], ws).unwrap();
            let mut tape = Tape::new();
            let (xt, wt) = (tape.watch(&x), tape.watch(&w));
            let loss = composite(&xt, &wt, &mut tape);
            let g = tape.backward(&loss).unwrap();
            let gw = g.get(&wt).unwrap();
            let numeric = numeric_grad(&w, &|p| composite(&x, p, &mut Tape::new()).item());
            for (a, n) in gw.data().iter().zip(&numeric) {
                let err = (a - n).abs();
                prop_assert!(err < 1e-6 || err / n.abs() < 1e-4, "{} vs {}", a, n);
            }
        }

        #[test]
        fn stop_grad_is_value_transparent(xs in proptest::collection::vec(-5.0f64..5.0, 1..20)) {
            let x = Tensor::vector(xs);
            let mut tape = Tape::new();
            let t = tape.watch(&x);
            let a = tape.tanh(&t).unwrap();
            let b = tape.tanh(&stop_grad(&t)).unwrap();
            prop_assert_eq!(a.data(), b.data());
        }

        #[test]
        fn backward_is_linear(xs in proptest::collection::vec(-2.0f64..2.0, 4)) {
            let grad_of = |which: u8| {
                let mut tape = Tape::new();
                let x = tape.watch(&Tensor::vector(xs.clone()));
                let f = tape.tanh(&x).unwrap();
                let f = tape.sum(&f).unwrap();
                let g = tape.square(&x).unwrap();
                let g = tape.sum(&g).unwrap();
                let root = match which {
                    0 => f,
                    1 => g,
                    _ => tape.add(&f, &g).unwrap(),
                };
                tape.backward(&root).unwrap().get(&x).unwrap().clone()
            };
            let (gf, gg, gs) = (grad_of(0), grad_of(1), grad_of(2));
            for i in 0..xs.len() {
                prop_assert!((gf.data()[i] + gg.data()[i] - gs.data()[i]).abs() < 1e-12);
            }
        }
    }
}
