//! Operation recording.
//!
//! Every primitive pushes one [`Node`] holding its operands, parameters and
//! forward value. Backward passes are expressed with the same primitives, so
//! gradients land on the tape as ordinary nodes and can be differentiated
//! again.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub(crate) type Id = usize;

/// One recorded primitive.
#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Add(Id, Id),
    Sub(Id, Id),
    Mul(Id, Id),
    Div(Id, Id),
    Neg(Id),
    /// `scale * x + shift`
    Affine(Id, f64, f64),
    MatMul(Id, Id),
    Transpose(Id),
    Reshape(Id, Vec<usize>),
    Expand(Id, Vec<usize>),
    SumTo(Id, Vec<usize>),
    Exp(Id),
    Log(Id),
    Softplus(Id),
    Sqrt(Id),
    /// `1/x`, with `0` mapped to `0`.
    RecipOrZero(Id),
    /// Along the last axis.
    LogSoftmax(Id),
    /// `[N, n] -> [N]`, picking column `idx[i]` of row `i`.
    Gather(Id, Rc<Vec<usize>>),
    /// `[N] -> [N, n]`, the adjoint of `Gather`.
    Scatter(Id, Rc<Vec<usize>>, usize),
    /// `[N, ..] -> [len(rows), ..]`
    IndexRows(Id, Rc<Vec<usize>>),
    /// `[len(rows), ..] -> [n_rows, ..]`, summing into the selected rows.
    ScatterRows(Id, Rc<Vec<usize>>, usize),
    Concat(Vec<Id>, usize),
    Slice(Id, usize, usize, usize),
}

impl Op {
    pub(crate) fn inputs(&self) -> Vec<Id> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b) => vec![*a, *b],
            Neg(a) | Affine(a, ..) | Transpose(a) | Reshape(a, _) | Expand(a, _) | SumTo(a, _)
            | Exp(a) | Log(a) | Softplus(a) | Sqrt(a) | RecipOrZero(a) | LogSoftmax(a)
            | Gather(a, _) | Scatter(a, ..) | IndexRows(a, _) | ScatterRows(a, ..)
            | Slice(a, ..) => vec![*a],
            Concat(xs, _) => xs.clone(),
        }
    }

    fn name(&self) -> &'static str {
        use Op::*;
        match self {
            Leaf => "leaf",
            Add(..) => "add",
            Sub(..) => "sub",
            Mul(..) => "mul",
            Div(..) => "div",
            Neg(..) => "neg",
            Affine(..) => "affine",
            MatMul(..) => "matmul",
            Transpose(..) => "transpose",
            Reshape(..) => "reshape",
            Expand(..) => "expand",
            SumTo(..) => "sum_to",
            Exp(..) => "exp",
            Log(..) => "log",
            Softplus(..) => "softplus",
            Sqrt(..) => "sqrt",
            RecipOrZero(..) => "recip",
            LogSoftmax(..) => "log_softmax",
            Gather(..) => "gather",
            Scatter(..) => "scatter",
            IndexRows(..) => "index_rows",
            ScatterRows(..) => "scatter_rows",
            Concat(..) => "concat",
            Slice(..) => "slice",
        }
    }
}

#[derive(Debug)]
pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) value: Rc<Tensor>,
    pub(crate) requires_grad: bool,
    pub(crate) generation: u32,
}

/// Ordered record of every executed primitive.
///
/// Not `Sync`: a tape belongs to one thread. Independent tapes may live on
/// different threads.
#[derive(Debug, Default)]
pub struct Tape {
    pub(crate) nodes: RefCell<Vec<Node>>,
    generation: Cell<u32>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: Id,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let v = self.value();
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &v.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Derivative order currently being recorded: 0 for the forward pass,
    /// incremented by each call to `grad`.
    pub fn generation(&self) -> u32 {
        self.generation.get()
    }

    pub(crate) fn restore_generation(&self, g: u32) {
        self.generation.set(g);
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push_raw(Op::Leaf, value, true)
    }

    /// A non-differentiable input.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_raw(Op::Leaf, value, false)
    }

    /// A non-differentiable input sharing storage with the caller.
    pub fn constant_shared(&self, value: Rc<Tensor>) -> Var<'_> {
        self.push_rc(Op::Leaf, value, false)
    }

    pub fn scalar(&self, x: f64) -> Var<'_> {
        self.constant(Tensor::scalar(x))
    }

    fn push_raw(&self, op: Op, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push_rc(op, Rc::new(value), requires_grad)
    }

    fn push_rc(&self, op: Op, value: Rc<Tensor>, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            op,
            value,
            requires_grad,
            generation: self.generation.get(),
        });
        Var { tape: self, id }
    }

    /// Runs `op` forward against recorded operands and records the result.
    pub(crate) fn push(&self, op: Op) -> Result<Var<'_>> {
        let (value, requires_grad) = {
            let nodes = self.nodes.borrow();
            let inputs = op.inputs();
            let vals: Vec<&Tensor> = inputs.iter().map(|&i| nodes[i].value.as_ref()).collect();
            let rg = inputs.iter().any(|&i| nodes[i].requires_grad);
            (forward(&op, &vals)?, rg)
        };
        Ok(self.push_raw(op, value, requires_grad))
    }

    pub(crate) fn value_of(&self, id: Id) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    /// Recomputes every recorded node from `leaves` (one value per leaf, in
    /// tape order). Returns all node values.
    pub fn replay(&self, leaves: &[Tensor]) -> Result<Vec<Tensor>> {
        let nodes = self.nodes.borrow();
        let mut out: Vec<Tensor> = Vec::with_capacity(nodes.len());
        let mut next_leaf = leaves.iter();
        for node in nodes.iter() {
            let v = match &node.op {
                Op::Leaf => {
                    let v = next_leaf.next().ok_or_else(|| {
                        Error::Contract("replay: fewer leaf values than leaves".into())
                    })?;
                    if v.shape() != node.value.shape() {
                        return Err(Error::Shape {
                            op: "replay",
                            left: node.value.shape().to_vec(),
                            right: v.shape().to_vec(),
                        });
                    }
                    v.clone()
                }
                op => {
                    let vals: Vec<&Tensor> = op.inputs().iter().map(|&i| &out[i]).collect();
                    forward(op, &vals)?
                }
            };
            out.push(v);
        }
        Ok(out)
    }

    /// Current values of all leaves in tape order, suitable for [`Tape::replay`].
    pub fn leaf_values(&self) -> Vec<Tensor> {
        self.nodes
            .borrow()
            .iter()
            .filter(|n| matches!(n.op, Op::Leaf))
            .map(|n| n.value.as_ref().clone())
            .collect()
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.value().numel()
    }

    /// Single element of a one-element value.
    pub fn item(&self) -> f64 {
        self.value().data()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Derivative order at which this node was recorded.
    pub fn generation(&self) -> u32 {
        self.tape.nodes.borrow()[self.id].generation
    }

    /// Forward value as an owned tensor.
    pub fn eval(&self) -> Tensor {
        self.value().as_ref().clone()
    }
}

fn shape_err(op: &Op, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op: op.name(),
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn rank2(op: &Op, a: &Tensor) -> Result<(usize, usize)> {
    if a.rank() != 2 {
        return Err(Error::Shape {
            op: op.name(),
            left: a.shape().to_vec(),
            right: vec![],
        });
    }
    Ok((a.shape()[0], a.shape()[1]))
}

/// Forward semantics of every primitive; shared by recording and replay.
pub(crate) fn forward(op: &Op, x: &[&Tensor]) -> Result<Tensor> {
    use Op::*;
    Ok(match op {
        Leaf => unreachable!("leaves carry their own value"),
        Add(..) => x[0].zip_map(x[1], "add", |a, b| a + b)?,
        Sub(..) => x[0].zip_map(x[1], "sub", |a, b| a - b)?,
        Mul(..) => x[0].zip_map(x[1], "mul", |a, b| a * b)?,
        Div(..) => {
            if x[1].data().iter().any(|&b| b == 0.0) {
                return Err(Error::Numeric("division by zero in unguarded div".into()));
            }
            x[0].zip_map(x[1], "div", |a, b| a / b)?
        }
        Neg(_) => x[0].map(|a| -a),
        Affine(_, s, c) => x[0].map(|a| s * a + c),
        MatMul(..) => x[0].matmul(x[1])?,
        Transpose(_) => x[0].transpose()?,
        Reshape(_, s) => x[0].reshape(s)?,
        Expand(_, s) => x[0].expand(s)?,
        SumTo(_, s) => x[0].sum_to(s)?,
        Exp(_) => x[0].map(f64::exp),
        Log(_) => {
            if x[0].data().iter().any(|&a| a <= 0.0) {
                return Err(Error::Numeric("log of non-positive value in unguarded log".into()));
            }
            x[0].map(f64::ln)
        }
        Softplus(_) => x[0].map(softplus),
        Sqrt(_) => {
            if x[0].data().iter().any(|&a| a < 0.0) {
                return Err(Error::Numeric("sqrt of negative value".into()));
            }
            x[0].map(f64::sqrt)
        }
        RecipOrZero(_) => x[0].map(|a| if a == 0.0 { 0.0 } else { 1.0 / a }),
        LogSoftmax(_) => {
            let t = x[0];
            let c = t.cols();
            let mut out = t.data().to_vec();
            for row in out.chunks_mut(c.max(1)) {
                let (arg, m) = row
                    .iter()
                    .copied()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, v)| if v > best.1 { (i, v) } else { best });
                // The max term contributes exactly 1; ln_1p keeps tiny tails.
                let rest: f64 = row
                    .iter()
                    .enumerate()
                    .filter(|&(i, _)| i != arg)
                    .map(|(_, v)| (v - m).exp())
                    .sum();
                let lse = m + rest.ln_1p();
                for v in row.iter_mut() {
                    *v -= lse;
                }
            }
            Tensor::new(t.shape().to_vec(), out)?
        }
        Gather(_, idx) => {
            let (n, c) = rank2(op, x[0])?;
            if idx.len() != n {
                return Err(Error::Shape {
                    op: "gather",
                    left: x[0].shape().to_vec(),
                    right: vec![idx.len()],
                });
            }
            let mut out = Vec::with_capacity(n);
            for (i, &j) in idx.iter().enumerate() {
                if j >= c {
                    return Err(Error::Vocabulary { index: j, size: c });
                }
                out.push(x[0].at(i, j));
            }
            Tensor::vector(out)
        }
        Scatter(_, idx, c) => {
            let g = x[0];
            if g.rank() != 1 || g.numel() != idx.len() {
                return Err(Error::Shape {
                    op: "scatter",
                    left: g.shape().to_vec(),
                    right: vec![idx.len()],
                });
            }
            let mut out = Tensor::zeros(&[idx.len(), *c]);
            for (i, &j) in idx.iter().enumerate() {
                out.data_mut()[i * c + j] = g.data()[i];
            }
            out
        }
        IndexRows(_, rows) => {
            let t = x[0];
            if t.rank() == 0 {
                return Err(shape_err(op, t, t));
            }
            let n = t.shape()[0];
            let w = t.numel() / n.max(1);
            let mut out = Vec::with_capacity(rows.len() * w);
            for &r in rows.iter() {
                if r >= n {
                    return Err(Error::Vocabulary { index: r, size: n });
                }
                out.extend_from_slice(&t.data()[r * w..(r + 1) * w]);
            }
            let mut shape = t.shape().to_vec();
            shape[0] = rows.len();
            Tensor::new(shape, out)?
        }
        ScatterRows(_, rows, n) => {
            let t = x[0];
            if t.rank() == 0 || t.shape()[0] != rows.len() {
                return Err(shape_err(op, t, t));
            }
            let w = t.numel() / rows.len().max(1);
            let mut shape = t.shape().to_vec();
            shape[0] = *n;
            let mut out = Tensor::zeros(&shape);
            for (k, &r) in rows.iter().enumerate() {
                for j in 0..w {
                    out.data_mut()[r * w + j] += t.data()[k * w + j];
                }
            }
            out
        }
        Concat(_, axis) => concat(x, *axis)?,
        Slice(_, axis, start, len) => slice(x[0], *axis, *start, *len)?,
    })
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Splits a shape around `axis` into (outer, axis length, inner).
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn concat(x: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = x[0];
    if axis >= first.rank() {
        return Err(Error::Shape {
            op: "concat",
            left: first.shape().to_vec(),
            right: vec![axis],
        });
    }
    for t in &x[1..] {
        let ok = t.rank() == first.rank()
            && t.shape().iter().zip(first.shape()).enumerate().all(|(k, (a, b))| k == axis || a == b);
        if !ok {
            return Err(Error::Shape {
                op: "concat",
                left: first.shape().to_vec(),
                right: t.shape().to_vec(),
            });
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = x.iter().map(|t| t.shape()[axis]).sum();
    let (outer, _, inner) = axis_split(first.shape(), axis);
    let mut out = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for t in x {
            let chunk = t.shape()[axis] * inner;
            out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    Tensor::new(shape, out)
}

fn slice(t: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    if axis >= t.rank() || start + len > t.shape()[axis] {
        return Err(Error::Shape {
            op: "slice",
            left: t.shape().to_vec(),
            right: vec![axis, start, len],
        });
    }
    let (outer, n, inner) = axis_split(t.shape(), axis);
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * n * inner;
        out.extend_from_slice(&t.data()[base + start * inner..base + (start + len) * inner]);
    }
    let mut shape = t.shape().to_vec();
    shape[axis] = len;
    Tensor::new(shape, out)
}
