//! Reverse-mode differentiation on a recording tape.
//!
//! Every primitive's vector-Jacobian product is itself expressed with tape
//! primitives, so gradients obtained through [`Tape::gradients`] are ordinary
//! nodes that can be differentiated again. That is what lets a loss evaluated
//! after several explicit gradient steps be differentiated exactly with respect
//! to quantities that entered those steps ([`Tape::grad_through_update`]).
//!
//! Errors never propagate silently: the first shape violation or non-finite
//! value poisons the tape, subsequent ops become no-ops, and every gradient
//! query reports the offending node.

mod kernels;
mod program;

use alloc::format;
use alloc::rc::Rc;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;
use core::fmt;
use core::ops;

pub use kernels::ConvMode;
pub use program::{record_forward, Instruction, Operand, Primitive, Program, Recording};

use crate::tensor::{numel, Tensor};

pub type NodeId = usize;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AutodiffError {
    #[error("shape error at node {node} ({op}): {detail}")]
    Shape {
        node: NodeId,
        op: &'static str,
        detail: String,
    },
    #[error("node {node} ({op}) produced a non-finite value")]
    NonFinite { node: NodeId, op: &'static str },
    #[error("unsupported primitive `{0}`")]
    UnsupportedOp(String),
    #[error("loss node {node} is not a scalar (shape {shape:?})")]
    NotScalar { node: NodeId, shape: Vec<usize> },
    #[error(
        "node {node} is a detached first-order gradient whose value depends on the \
         differentiation target; second-order derivatives cannot pass through it"
    )]
    UnsupportedSecondOrder { node: NodeId },
    #[error("replay failed: {0}")]
    Replay(String),
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Const,
    /// Value of a first-order gradient of node `source`, cut from the graph.
    Detached {
        source: NodeId,
    },
    Poison,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Square(NodeId),
    Abs(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Softplus(NodeId),
    LogSoftmax(NodeId),
    Sum(NodeId),
    MatMul {
        a: NodeId,
        b: NodeId,
        ta: bool,
        tb: bool,
    },
    Expand {
        input: NodeId,
        outer: usize,
        inner: usize,
        shape: Rc<[usize]>,
    },
    Reduce {
        input: NodeId,
        outer: usize,
        inner: usize,
    },
    Reshape {
        input: NodeId,
        shape: Rc<[usize]>,
    },
    Conv {
        mode: ConvMode,
        a: NodeId,
        b: NodeId,
        k: usize,
    },
    Gather {
        input: NodeId,
        index: Rc<[usize]>,
        shape: Rc<[usize]>,
    },
    Scatter {
        input: NodeId,
        index: Rc<[usize]>,
        shape: Rc<[usize]>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Const => "const",
            Op::Detached { .. } => "detached",
            Op::Poison => "poison",
            Op::Add(..) => "add",
            Op::Sub(..) => "subtract",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Square(_) => "square",
            Op::Abs(_) => "abs",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Exp(_) => "exp",
            Op::Softplus(_) => "softplus",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Sum(_) => "sum",
            Op::MatMul { .. } => "matmul",
            Op::Expand { .. } => "expand",
            Op::Reduce { .. } => "reduce",
            Op::Reshape { .. } => "reshape",
            Op::Conv { .. } => "conv",
            Op::Gather { .. } => "gather",
            Op::Scatter { .. } => "scatter",
        }
    }

    fn inputs(&self) -> ([NodeId; 2], usize) {
        match *self {
            Op::Leaf | Op::Const | Op::Detached { .. } | Op::Poison => ([0, 0], 0),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => ([a, b], 2),
            Op::MatMul { a, b, .. } | Op::Conv { a, b, .. } => ([a, b], 2),
            Op::Scale(a, _)
            | Op::Square(a)
            | Op::Abs(a)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Exp(a)
            | Op::Softplus(a)
            | Op::LogSoftmax(a)
            | Op::Sum(a) => ([a, 0], 1),
            Op::Expand { input, .. }
            | Op::Reduce { input, .. }
            | Op::Reshape { input, .. }
            | Op::Gather { input, .. }
            | Op::Scatter { input, .. } => ([input, 0], 1),
        }
    }
}

#[derive(Clone)]
struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    leaves: Vec<NodeId>,
    error: Option<AutodiffError>,
}

/// An append-only record of primitive operations, in execution order.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<Inner>,
}

/// Handle to one node of a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var({})", self.id)
    }
}

fn evaluate(op: &Op, nodes: &[Node]) -> Result<Tensor, String> {
    let val = |id: NodeId| &nodes[id].value;
    match op {
        Op::Leaf | Op::Const | Op::Detached { .. } | Op::Poison => Err(String::from(
            "value-carrying node evaluated as an operation",
        )),
        Op::Add(a, b) => kernels::zip("add", val(*a), val(*b), |x, y| x + y),
        Op::Sub(a, b) => kernels::zip("subtract", val(*a), val(*b), |x, y| x - y),
        Op::Mul(a, b) => kernels::zip("mul", val(*a), val(*b), |x, y| x * y),
        Op::Scale(a, c) => Ok(val(*a).map(|x| x * c)),
        Op::Square(a) => Ok(val(*a).map(|x| x * x)),
        Op::Abs(a) => Ok(val(*a).map(f64::abs)),
        Op::Relu(a) => Ok(val(*a).map(|x| if x > 0.0 { x } else { 0.0 })),
        Op::Sigmoid(a) => Ok(val(*a).map(crate::math::sigmoid)),
        Op::Exp(a) => Ok(val(*a).map(crate::math::exp)),
        Op::Softplus(a) => Ok(val(*a).map(crate::math::softplus)),
        Op::LogSoftmax(a) => kernels::log_softmax(val(*a)),
        Op::Sum(a) => Ok(Tensor::scalar(val(*a).data().iter().sum())),
        Op::MatMul { a, b, ta, tb } => kernels::matmul(val(*a), val(*b), *ta, *tb),
        Op::Expand {
            input,
            outer,
            inner,
            shape,
        } => kernels::expand(val(*input), *outer, *inner, shape),
        Op::Reduce {
            input,
            outer,
            inner,
        } => kernels::reduce(val(*input), *outer, *inner),
        Op::Reshape { input, shape } => val(*input)
            .clone()
            .reshaped(shape)
            .ok_or_else(|| format!("cannot reshape {:?} to {:?}", val(*input).shape(), shape)),
        Op::Conv { mode, a, b, k } => kernels::conv(*mode, val(*a), val(*b), *k),
        Op::Gather {
            input,
            index,
            shape,
        } => kernels::gather(val(*input), index, shape),
        Op::Scatter {
            input,
            index,
            shape,
        } => kernels::scatter(val(*input), index, shape),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        let var = self.push_value(Op::Leaf, value);
        self.inner.borrow_mut().leaves.push(var.id);
        var
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_value(Op::Const, value)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    /// Handle for an existing node id.
    ///
    /// # Panics
    /// Panics if `id` is not on this tape.
    pub fn var(&self, id: NodeId) -> Var<'_> {
        assert!(id < self.len(), "node {id} is not on this tape");
        Var { tape: self, id }
    }

    /// Ids of leaf nodes, in creation order.
    pub fn leaves(&self) -> Vec<NodeId> {
        self.inner.borrow().leaves.clone()
    }

    /// Name of the primitive recorded at `id`.
    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.inner.borrow().nodes[id].op.name()
    }

    /// Input node ids of the primitive recorded at `id`.
    pub fn op_inputs(&self, id: NodeId) -> Vec<NodeId> {
        let (ids, n) = self.inner.borrow().nodes[id].op.inputs();
        ids[..n].to_vec()
    }

    pub fn value(&self, id: NodeId) -> Tensor {
        self.inner.borrow().nodes[id].value.clone()
    }

    pub fn error(&self) -> Option<AutodiffError> {
        self.inner.borrow().error.clone()
    }

    /// Ok while no op has failed or produced a non-finite value.
    pub fn check(&self) -> Result<(), AutodiffError> {
        match self.error() {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    fn push_value(&self, op: Op, value: Tensor) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        if inner.error.is_none() && !value.is_finite() {
            inner.error = Some(AutodiffError::NonFinite {
                node: id,
                op: op.name(),
            });
        }
        inner.nodes.push(Node { op, value });
        Var { tape: self, id }
    }

    fn push(&self, op: Op) -> Var<'_> {
        let result = {
            let inner = self.inner.borrow();
            if inner.error.is_some() {
                None
            } else {
                Some(evaluate(&op, &inner.nodes))
            }
        };
        match result {
            Some(Ok(value)) => self.push_value(op, value),
            Some(Err(detail)) => {
                let mut inner = self.inner.borrow_mut();
                let id = inner.nodes.len();
                inner.error = Some(AutodiffError::Shape {
                    node: id,
                    op: op.name(),
                    detail,
                });
                inner.nodes.push(Node {
                    op: Op::Poison,
                    value: Tensor::zeros(&[0]),
                });
                Var { tape: self, id }
            }
            None => {
                let mut inner = self.inner.borrow_mut();
                let id = inner.nodes.len();
                inner.nodes.push(Node {
                    op: Op::Poison,
                    value: Tensor::zeros(&[0]),
                });
                Var { tape: self, id }
            }
        }
    }

    /// Records a failed op: poisons the tape with a shape error naming the new node.
    fn fail(&self, op: &'static str, detail: String) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        if inner.error.is_none() {
            inner.error = Some(AutodiffError::Shape {
                node: id,
                op,
                detail,
            });
        }
        inner.nodes.push(Node {
            op: Op::Poison,
            value: Tensor::zeros(&[0]),
        });
        Var { tape: self, id }
    }

    fn truncate(&self, len: usize) {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.truncate(len);
        inner.leaves.retain(|&id| id < len);
        let stale = matches!(
            inner.error,
            Some(AutodiffError::Shape { node, .. } | AutodiffError::NonFinite { node, .. }) if node >= len
        );
        if stale {
            inner.error = None;
        }
    }

    /// Gradients of a scalar `loss` with respect to `wrt`, recorded on the tape
    /// so they can be differentiated again.
    ///
    /// Nodes in `wrt` need not be leaves. Targets with no path to `loss` get zeros.
    pub fn gradients<'t>(
        &'t self,
        loss: Var<'t>,
        wrt: &[Var<'t>],
    ) -> Result<Vec<Var<'t>>, AutodiffError> {
        self.backward(loss, wrt, false)
    }

    /// First-order gradient values; the tape is left exactly as it was.
    pub fn grad<'t>(
        &'t self,
        loss: Var<'t>,
        wrt: &[Var<'t>],
    ) -> Result<Vec<Tensor>, AutodiffError> {
        self.values_then_truncate(loss, wrt, false)
    }

    /// Exact derivative of `loss` with respect to `wrt`, following every path
    /// through gradient computations recorded with [`Tape::gradients`].
    ///
    /// Fails with [`AutodiffError::UnsupportedSecondOrder`] when a path passes
    /// through a detached gradient whose value depends on `wrt`, since the
    /// result would silently be a first-order approximation.
    pub fn grad_through_update<'t>(
        &'t self,
        loss: Var<'t>,
        wrt: &[Var<'t>],
    ) -> Result<Vec<Tensor>, AutodiffError> {
        self.values_then_truncate(loss, wrt, true)
    }

    /// First-order gradients inserted as constants cut from the graph.
    pub fn detached_gradients<'t>(
        &'t self,
        loss: Var<'t>,
        wrt: &[Var<'t>],
    ) -> Result<Vec<Var<'t>>, AutodiffError> {
        let values = self.grad(loss, wrt)?;
        Ok(values
            .into_iter()
            .map(|v| self.push_value(Op::Detached { source: loss.id }, v))
            .collect())
    }

    fn values_then_truncate<'t>(
        &'t self,
        loss: Var<'t>,
        wrt: &[Var<'t>],
        strict: bool,
    ) -> Result<Vec<Tensor>, AutodiffError> {
        let mark = self.len();
        let result = self.backward(loss, wrt, strict).and_then(|vars| {
            self.check()?;
            Ok(vars.iter().map(|v| v.value()).collect())
        });
        self.truncate(mark);
        result
    }

    fn backward<'t>(
        &'t self,
        loss: Var<'t>,
        wrt: &[Var<'t>],
        strict: bool,
    ) -> Result<Vec<Var<'t>>, AutodiffError> {
        self.check()?;
        for v in wrt.iter().chain(core::iter::once(&loss)) {
            assert!(
                core::ptr::eq(v.tape, self),
                "variable belongs to a different tape"
            );
        }
        let end = loss.id + 1;
        let (ops, loss_shape) = {
            let inner = self.inner.borrow();
            let loss_value = &inner.nodes[loss.id].value;
            if !loss_value.is_scalar() {
                return Err(AutodiffError::NotScalar {
                    node: loss.id,
                    shape: loss_value.shape().to_vec(),
                });
            }
            let ops: Vec<Op> = inner.nodes[..end].iter().map(|n| n.op.clone()).collect();
            (ops, loss_value.shape().to_vec())
        };

        let mut needs = vec![false; end];
        for w in wrt {
            if w.id < end {
                needs[w.id] = true;
            }
        }
        for id in 0..end {
            if needs[id] {
                continue;
            }
            let (inputs, n) = ops[id].inputs();
            needs[id] = inputs[..n].iter().any(|&i| needs[i])
                || matches!(ops[id], Op::Detached { source } if strict && needs[source]);
        }

        let mut cot: Vec<Option<Var<'t>>> = vec![None; end];
        if needs[loss.id] {
            cot[loss.id] = Some(self.constant(Tensor::full(&loss_shape, 1.0)));
        }
        for id in (0..end).rev() {
            let Some(g) = cot[id] else { continue };
            if matches!(ops[id], Op::Detached { .. }) {
                return Err(AutodiffError::UnsupportedSecondOrder { node: id });
            }
            for (input, contribution) in self.vjp(&ops[id], id, g, &needs) {
                cot[input] = Some(match cot[input] {
                    Some(prev) => prev + contribution,
                    None => contribution,
                });
            }
        }
        self.check()?;
        Ok(wrt
            .iter()
            .map(|w| match cot.get(w.id).copied().flatten() {
                Some(g) => g,
                None => {
                    let shape = w.shape();
                    self.constant(Tensor::zeros(&shape))
                }
            })
            .collect())
    }

    fn vjp<'t>(
        &'t self,
        op: &Op,
        out: NodeId,
        g: Var<'t>,
        needs: &[bool],
    ) -> Vec<(NodeId, Var<'t>)> {
        let v = |id: NodeId| Var { tape: self, id };
        let want = |id: NodeId| needs[id];
        let mut acc: Vec<(NodeId, Var<'t>)> = Vec::with_capacity(2);
        let mut emit = |id: NodeId, f: &dyn Fn() -> Var<'t>| {
            if want(id) {
                acc.push((id, f()));
            }
        };
        match op {
            Op::Leaf | Op::Const | Op::Poison | Op::Detached { .. } => {}
            Op::Add(a, b) => {
                emit(*a, &|| g);
                emit(*b, &|| g);
            }
            Op::Sub(a, b) => {
                emit(*a, &|| g);
                emit(*b, &|| g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                emit(*a, &|| g * v(*b));
                emit(*b, &|| g * v(*a));
            }
            Op::Scale(a, c) => emit(*a, &|| g.scale(*c)),
            Op::Square(a) => emit(*a, &|| g * v(*a).scale(2.0)),
            Op::Abs(a) => emit(*a, &|| {
                let sign = self.value(*a).map(|x| {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                g * self.constant(sign)
            }),
            Op::Relu(a) => emit(*a, &|| {
                let mask = self.value(*a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                g * self.constant(mask)
            }),
            Op::Sigmoid(a) => emit(*a, &|| {
                let s = v(out);
                g * (s - s.square())
            }),
            Op::Exp(a) => emit(*a, &|| g * v(out)),
            Op::Softplus(a) => emit(*a, &|| g * v(*a).sigmoid()),
            Op::LogSoftmax(a) => emit(*a, &|| {
                let shape = self.value(*a).shape().to_vec();
                let cols = shape[1];
                let row_sums = g.reduce(1, cols);
                g - v(out).exp() * row_sums.expand(1, cols, &shape)
            }),
            Op::Sum(a) => emit(*a, &|| {
                let shape = self.value(*a).shape().to_vec();
                g.expand(1, numel(&shape), &shape)
            }),
            Op::MatMul { a, b, ta, tb } => {
                let (a, b) = (v(*a), v(*b));
                match (ta, tb) {
                    (false, false) => {
                        emit(a.id, &|| g.matmul_t(b, false, true));
                        emit(b.id, &|| a.matmul_t(g, true, false));
                    }
                    (true, false) => {
                        emit(a.id, &|| b.matmul_t(g, false, true));
                        emit(b.id, &|| a.matmul_t(g, false, false));
                    }
                    (false, true) => {
                        emit(a.id, &|| g.matmul_t(b, false, false));
                        emit(b.id, &|| g.matmul_t(a, true, false));
                    }
                    (true, true) => {
                        emit(a.id, &|| b.matmul_t(g, true, true));
                        emit(b.id, &|| g.matmul_t(a, true, true));
                    }
                }
            }
            Op::Expand {
                input,
                outer,
                inner,
                ..
            } => emit(*input, &|| {
                let shape = self.value(*input).shape().to_vec();
                g.reduce(*outer, *inner).reshape(&shape)
            }),
            Op::Reduce {
                input,
                outer,
                inner,
            } => emit(*input, &|| {
                let shape = self.value(*input).shape().to_vec();
                g.expand(*outer, *inner, &shape)
            }),
            Op::Reshape { input, .. } => emit(*input, &|| {
                let shape = self.value(*input).shape().to_vec();
                g.reshape(&shape)
            }),
            Op::Conv { mode, a, b, k } => {
                let (a, b, k) = (v(*a), v(*b), *k);
                let conv = |mode, x: Var<'t>, y: Var<'t>| {
                    self.push(Op::Conv {
                        mode,
                        a: x.id,
                        b: y.id,
                        k,
                    })
                };
                match mode {
                    ConvMode::Forward => {
                        emit(a.id, &|| conv(ConvMode::InputGrad, g, b));
                        emit(b.id, &|| conv(ConvMode::WeightGrad, a, g));
                    }
                    ConvMode::InputGrad => {
                        emit(a.id, &|| conv(ConvMode::Forward, g, b));
                        emit(b.id, &|| conv(ConvMode::WeightGrad, g, a));
                    }
                    ConvMode::WeightGrad => {
                        emit(a.id, &|| conv(ConvMode::InputGrad, b, g));
                        emit(b.id, &|| conv(ConvMode::Forward, a, g));
                    }
                }
            }
            Op::Gather { input, index, .. } => emit(*input, &|| {
                let shape: Rc<[usize]> = self.value(*input).shape().into();
                self.push(Op::Scatter {
                    input: g.id,
                    index: index.clone(),
                    shape,
                })
            }),
            Op::Scatter { input, index, .. } => emit(*input, &|| {
                let shape: Rc<[usize]> = self.value(*input).shape().into();
                self.push(Op::Gather {
                    input: g.id,
                    index: index.clone(),
                    shape,
                })
            }),
        }
        acc
    }

    /// Re-evaluates every recorded primitive on a fresh tape, substituting
    /// `leaves` (in leaf-creation order) for the recorded leaf values.
    ///
    /// Constants and detached gradients keep their recorded values, and
    /// max-pool selections keep their recorded winners.
    pub fn replay(&self, leaves: &[Tensor]) -> Result<Tape, AutodiffError> {
        let inner = self.inner.borrow();
        if leaves.len() != inner.leaves.len() {
            return Err(AutodiffError::Replay(format!(
                "expected {} leaf values, got {}",
                inner.leaves.len(),
                leaves.len()
            )));
        }
        let fresh = Tape::new();
        let mut next_leaf = leaves.iter();
        for (id, node) in inner.nodes.iter().enumerate() {
            match node.op {
                Op::Leaf => {
                    let value = next_leaf
                        .next()
                        .cloned()
                        .unwrap_or_else(|| Tensor::zeros(&[0]));
                    if value.shape() != node.value.shape() {
                        return Err(AutodiffError::Replay(format!(
                            "leaf {id} expects shape {:?}, got {:?}",
                            node.value.shape(),
                            value.shape()
                        )));
                    }
                    fresh.leaf(value);
                }
                Op::Const | Op::Detached { .. } => {
                    fresh.push_value(node.op.clone(), node.value.clone());
                }
                Op::Poison => return Err(AutodiffError::Replay(format!("node {id} is poisoned"))),
                _ => {
                    fresh.push(node.op.clone());
                }
            }
        }
        fresh.check()?;
        Ok(fresh)
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id]
            .value
            .shape()
            .to_vec()
    }

    /// Scalar value, or `None` for non-scalar nodes.
    pub fn item(&self) -> Option<f64> {
        self.tape.inner.borrow().nodes[self.id].value.item()
    }

    fn binary(self, other: Var<'t>, f: impl FnOnce(NodeId, NodeId) -> Op) -> Var<'t> {
        assert!(
            core::ptr::eq(self.tape, other.tape),
            "variables belong to different tapes"
        );
        self.tape.push(f(self.id, other.id))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.tape.push(Op::Scale(self.id, c))
    }

    pub fn square(self) -> Var<'t> {
        self.tape.push(Op::Square(self.id))
    }

    pub fn abs(self) -> Var<'t> {
        self.tape.push(Op::Abs(self.id))
    }

    pub fn relu(self) -> Var<'t> {
        self.tape.push(Op::Relu(self.id))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.tape.push(Op::Sigmoid(self.id))
    }

    pub fn exp(self) -> Var<'t> {
        self.tape.push(Op::Exp(self.id))
    }

    pub fn softplus(self) -> Var<'t> {
        self.tape.push(Op::Softplus(self.id))
    }

    /// Row-wise log-softmax of a `[batch, classes]` node.
    pub fn log_softmax(self) -> Var<'t> {
        self.tape.push(Op::LogSoftmax(self.id))
    }

    pub fn sum(self) -> Var<'t> {
        self.tape.push(Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let n = numel(&self.shape()).max(1);
        self.sum().scale(1.0 / n as f64)
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        self.matmul_t(other, false, false)
    }

    /// `op(self) · op(other)` where `op` transposes when the flag is set.
    pub fn matmul_t(self, other: Var<'t>, ta: bool, tb: bool) -> Var<'t> {
        self.binary(other, |a, b| Op::MatMul { a, b, ta, tb })
    }

    /// Broadcasts a node of `mid` elements to `shape = outer × mid × inner`.
    pub fn expand(self, outer: usize, inner: usize, shape: &[usize]) -> Var<'t> {
        self.tape.push(Op::Expand {
            input: self.id,
            outer,
            inner,
            shape: shape.into(),
        })
    }

    /// Sums an `outer × mid × inner` node down to shape `[mid]`.
    pub fn reduce(self, outer: usize, inner: usize) -> Var<'t> {
        self.tape.push(Op::Reduce {
            input: self.id,
            outer,
            inner,
        })
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        self.tape.push(Op::Reshape {
            input: self.id,
            shape: shape.into(),
        })
    }

    /// Same-padded, stride-1 convolution of `[B,C,H,W]` by a `[O,C,K,K]` kernel (odd `K`).
    pub fn conv2d(self, kernel: Var<'t>) -> Var<'t> {
        let shape = kernel.shape();
        let k = if shape.len() == 4 { shape[2] } else { 0 };
        self.binary(kernel, |a, b| Op::Conv {
            mode: ConvMode::Forward,
            a,
            b,
            k,
        })
    }

    /// 2×2, stride-2 max pooling (ceil mode) over `[B,C,H,W]`.
    pub fn max_pool2d(self) -> Var<'t> {
        let value = self.value();
        match kernels::max_pool_indices(&value) {
            Ok((index, shape)) => self.tape.push(Op::Gather {
                input: self.id,
                index: index.into(),
                shape: shape.as_slice().into(),
            }),
            Err(detail) => self.tape.fail("max_pool2d", detail),
        }
    }

    /// Global average pool `[B,C,H,W] → [B,C]`.
    pub fn global_avg_pool(self) -> Var<'t> {
        let s = self.shape();
        if s.len() != 4 {
            return self
                .tape
                .fail("global_avg_pool", format!("expected [B,C,H,W], got {s:?}"));
        }
        let plane = s[2] * s[3];
        self.reduce(1, plane)
            .reshape(&[s[0], s[1]])
            .scale(1.0 / plane as f64)
    }

    /// `self[B, n] + bias[n]` broadcast over rows.
    pub fn add_row_bias(self, bias: Var<'t>) -> Var<'t> {
        let s = self.shape();
        let rows = s.first().copied().unwrap_or(0);
        self + bias.expand(rows, 1, &s)
    }

    /// `self[B, C, H, W] + bias[C]` broadcast over batch and space.
    pub fn add_channel_bias(self, bias: Var<'t>) -> Var<'t> {
        let s = self.shape();
        if s.len() != 4 {
            return self
                .tape
                .fail("add_channel_bias", format!("expected [B,C,H,W], got {s:?}"));
        }
        self + bias.expand(s[0], s[2] * s[3], &s)
    }

    /// Mean softmax cross-entropy of `[batch, classes]` logits against class indices.
    pub fn softmax_cross_entropy(self, labels: &[usize]) -> Var<'t> {
        let s = self.shape();
        let (rows, cols) = if s.len() == 2 { (s[0], s[1]) } else { (0, 0) };
        let mut onehot = Tensor::zeros(&[rows, cols]);
        if s.len() != 2 || labels.len() != rows || labels.iter().any(|&l| l >= cols) {
            return self.tape.fail(
                "softmax_cross_entropy",
                format!(
                    "logits {s:?} incompatible with {} labels (max {:?})",
                    labels.len(),
                    labels.iter().max()
                ),
            );
        }
        for (r, &l) in labels.iter().enumerate() {
            onehot.data_mut()[r * cols + l] = 1.0;
        }
        (self.log_softmax() * self.tape.constant(onehot))
            .sum()
            .scale(-1.0 / rows.max(1) as f64)
    }

    /// Mean binary cross-entropy of `[batch, 1]` scores against `{0, 1}` targets,
    /// computed as `softplus(z) - y·z`.
    pub fn binary_cross_entropy_with_logits(self, targets: &[usize]) -> Var<'t> {
        let s = self.shape();
        if s != [targets.len(), 1] || targets.iter().any(|&t| t > 1) {
            return self.tape.fail(
                "binary_cross_entropy",
                format!(
                    "scores {s:?} incompatible with {} binary targets",
                    targets.len()
                ),
            );
        }
        let y = Tensor::from_vec(
            &[targets.len(), 1],
            targets.iter().map(|&t| t as f64).collect(),
        );
        let y = self.tape.constant(y);
        (self.softplus() - self * y)
            .sum()
            .scale(1.0 / targets.len().max(1) as f64)
    }
}

impl<'t> ops::Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, Op::Add)
    }
}

impl<'t> ops::Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, Op::Sub)
    }
}

impl<'t> ops::Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, Op::Mul)
    }
}

impl<'t> ops::Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }
}
