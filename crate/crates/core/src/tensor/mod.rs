//! Dense tensor arithmetic with reverse-mode gradient accumulation.
//!
//! A [`Tape`] is a define-by-run record of operations. Every operation
//! appends a node holding the result data, its shape, and enough metadata
//! to replay the chain rule in reverse. Tensors are addressed by
//! [`TensorId`] handles into the tape arena.
//!
//! Conventions:
//! - all data is `f64`, flat, row-major;
//! - reductions run sequentially in index-ascending order, so results are
//!   bit-reproducible;
//! - broadcasting is limited to leading-batch expansion: the right operand
//!   of an elementwise op may be a scalar or a suffix of the left operand's
//!   shape (e.g. `[T, h]` op `[h]`). Everything else is a shape error.
//!
//! A tape and the tensors it references are confined to one thread;
//! distinct tapes may run in parallel.

mod backward;
mod ops;

use crate::error::{Error, Result};

/// Handle to a tensor stored on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

/// How a node was produced; operands are tape indices of earlier nodes.
#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    AddScalar { a: usize },
    MulScalar { a: usize, c: f64 },
    Matmul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Transpose { a: usize, rows: usize, cols: usize },
    Sigmoid { a: usize },
    Swish { a: usize },
    Sin { a: usize },
    Cos { a: usize },
    Exp { a: usize },
    Recip { a: usize },
    SoftmaxLastDim { a: usize, width: usize },
    CausalSoftmax { a: usize, n: usize },
    Huber { pred: usize, target: usize, delta: f64 },
    Sum { a: usize },
    Mean { a: usize },
    SumLastDim { a: usize, width: usize },
    SliceLastDim { a: usize, start: usize, width_in: usize, width_out: usize },
    ConcatLastDim { a: usize, b: usize, wa: usize, wb: usize },
    SliceRows { a: usize, start: usize, row_w: usize },
    GatherRows { a: usize, idx: Vec<usize>, row_w: usize },
    ScatterAddRows { src: usize, idx: Vec<usize>, row_w: usize },
    ScaleRows { a: usize, s: usize, row_w: usize },
    DepthwiseConv { x: usize, filt: usize, dilation: usize, t: usize, h: usize, k: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, eps: f64, width: usize },
}

/// One recorded tensor: value, shape, gradient slot, and provenance.
#[derive(Debug)]
pub(crate) struct Node {
    pub data: Vec<f64>,
    pub shape: Vec<usize>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
    pub op: Op,
}

/// Define-by-run gradient tape. Nodes are appended in topological order:
/// every operand of node `i` has index `< i`.
#[derive(Debug, Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a leaf tensor. `requires_grad` marks it as a gradient target.
    pub fn leaf(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) || numel != data.len() {
            return Err(Error::InvalidShape {
                op: "leaf",
                detail: format!("shape {:?} does not describe {} elements", shape, data.len()),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "leaf" });
        }
        Ok(self.push(data, shape, requires_grad, Op::Leaf))
    }

    /// Register an untracked constant.
    pub fn constant(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Result<TensorId> {
        self.leaf(data, shape, false)
    }

    /// Untracked scalar constant.
    pub fn scalar(&mut self, v: f64) -> Result<TensorId> {
        self.constant(vec![v], vec![1])
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn numel(&self, id: TensorId) -> usize {
        self.nodes[id.0].data.len()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Accumulated gradient of `id`, if backward has reached it.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Clear all accumulated gradients, keeping values.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub(crate) fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Op) -> TensorId {
        self.nodes.push(Node {
            data,
            shape,
            requires_grad,
            grad: None,
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    /// Append an op result, propagating the grad requirement from operands
    /// and rejecting non-finite outputs.
    pub(crate) fn push_op(
        &mut self,
        name: &'static str,
        data: Vec<f64>,
        shape: Vec<usize>,
        operands: &[usize],
        op: Op,
    ) -> Result<TensorId> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = operands.iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.push(data, shape, requires_grad, op))
    }
}

/// Broadcast compatibility for elementwise binary ops: rhs must be equal
/// shape, a scalar, or a suffix of lhs. Returns the rhs chunk length.
pub(crate) fn broadcast_chunk(
    op: &'static str,
    lhs: &[usize],
    rhs: &[usize],
) -> Result<usize> {
    if lhs == rhs {
        let n: usize = lhs.iter().product();
        return Ok(n);
    }
    let rn: usize = rhs.iter().product();
    if rn == 1 {
        return Ok(1);
    }
    if rhs.len() < lhs.len() && lhs[lhs.len() - rhs.len()..] == *rhs {
        return Ok(rn);
    }
    Err(Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    })
}
