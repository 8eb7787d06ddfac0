//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Graph`] owns one computation record: every executed operation is
//! appended to an ordered node list, and [`Graph::backward`] replays adjoints
//! over that list exactly once, in reverse execution order. One training step
//! builds and consumes one record on one thread of control; distinct records
//! over distinct parameter copies may run concurrently.

mod backward;
mod kernels;
mod ops;


use crate::error::{CoreError, Result};
use crate::tensor::Tensor;
use std::cell::RefCell;
use std::rc::Rc;

/// Identifies a node within one computation record.
pub type NodeId = usize;

/// A recorded operation with the input references needed to replay adjoints.
#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Relu(NodeId),
    Exp(NodeId),
    /// ln(max(x, eps)); zero gradient where clamped.
    LnClamped(NodeId, f64),
    /// 1/sqrt(x)
    Rsqrt(NodeId),
    MatMul {
        a: NodeId,
        b: NodeId,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose2(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    SumAxis {
        x: NodeId,
        axis: usize,
    },
    MeanAxis {
        x: NodeId,
        axis: usize,
    },
    /// Insert a new axis of length `n` at `axis`, repeating the input.
    ExpandAxis {
        x: NodeId,
        axis: usize,
        n: usize,
    },
    /// Broadcast multiply by a vector indexed along `axis`.
    MulAlong {
        x: NodeId,
        v: NodeId,
        axis: usize,
    },
    /// Broadcast add of a vector indexed along `axis`.
    AddAlong {
        x: NodeId,
        v: NodeId,
        axis: usize,
    },
    Softmax {
        x: NodeId,
        axis: usize,
    },
    /// y = x / sum(x, axis) with the sum broadcast back.
    NormalizeSum {
        x: NodeId,
        axis: usize,
    },
    /// Vectors along `axis` divided by (their L2 norm + eps).
    L2Normalize {
        x: NodeId,
        axis: usize,
        eps: f64,
    },
    Concat {
        xs: Vec<NodeId>,
        axis: usize,
    },
    Gather {
        x: NodeId,
        idx: Rc<Vec<usize>>,
    },
    Reshape(NodeId),
    Conv2d {
        x: NodeId,
        k: NodeId,
        stride: usize,
        pad: usize,
    },
    MaxPool2 {
        x: NodeId,
        argmax: Rc<Vec<usize>>,
    },
    Bilinear(NodeId),
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Relu(x)
            | Op::Exp(x)
            | Op::LnClamped(x, _)
            | Op::Rsqrt(x)
            | Op::Transpose2(x)
            | Op::SumAll(x)
            | Op::MeanAll(x)
            | Op::Reshape(x) => vec![*x],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::SumAxis { x, .. }
            | Op::MeanAxis { x, .. }
            | Op::ExpandAxis { x, .. }
            | Op::Softmax { x, .. }
            | Op::NormalizeSum { x, .. }
            | Op::L2Normalize { x, .. }
            | Op::Gather { x, .. }
            | Op::MaxPool2 { x, .. }
            | Op::Bilinear(x) => vec![*x],
            Op::MulAlong { x, v, .. } | Op::AddAlong { x, v, .. } => vec![*x, *v],
            Op::Concat { xs, .. } => xs.clone(),
            Op::Conv2d { x, k, .. } => vec![*x, *k],
        }
    }
}

pub(crate) struct Node {
    pub value: Tensor,
    pub op: Op,
}

pub(crate) struct Record {
    pub nodes: Vec<Node>,
    pub no_grad_depth: u32,
}

/// Handle to one computation record. Cheap to clone.
#[derive(Clone)]
pub struct Graph {
    rec: Rc<RefCell<Record>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            rec: Rc::new(RefCell::new(Record {
                nodes: Vec::new(),
                no_grad_depth: 0,
            })),
        }
    }

    /// Record a leaf. Its `requires_grad` flag is honored unless a no-grad
    /// region is active.
    pub fn leaf(&self, mut t: Tensor) -> Var {
        if self.rec.borrow().no_grad_depth > 0 {
            t.requires_grad = false;
        }
        let id = self.push_node(t, Op::Leaf);
        Var {
            graph: self.clone(),
            id,
        }
    }

    pub fn constant(&self, t: Tensor) -> Var {
        let mut t = t;
        t.requires_grad = false;
        let id = self.push_node(t, Op::Leaf);
        Var {
            graph: self.clone(),
            id,
        }
    }

    pub fn scalar(&self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Run `f` with gradient recording disabled: every node created inside is
    /// treated as constant by backward.
    pub fn no_grad<R>(&self, f: impl FnOnce() -> R) -> R {
        self.rec.borrow_mut().no_grad_depth += 1;
        let out = f();
        self.rec.borrow_mut().no_grad_depth -= 1;
        out
    }

    pub fn node_count(&self) -> usize {
        self.rec.borrow().nodes.len()
    }

    pub(crate) fn push_node(&self, mut value: Tensor, op: Op) -> NodeId {
        let mut rec = self.rec.borrow_mut();
        if !matches!(op, Op::Leaf) {
            let needs = rec.no_grad_depth == 0
                && op
                    .inputs()
                    .iter()
                    .any(|&i| rec.nodes[i].value.requires_grad);
            value.requires_grad = needs;
        }
        value.grad = None;
        rec.nodes.push(Node { value, op });
        rec.nodes.len() - 1
    }

    /// Propagate adjoints from a scalar loss. Leaf gradients accumulate across
    /// repeated calls; interior gradients are recomputed each call.
    pub fn backward(&self, loss: &Var) -> Result<()> {
        assert!(
            Rc::ptr_eq(&self.rec, &loss.graph.rec),
            "backward called with a var from another record"
        );
        let mut rec = self.rec.borrow_mut();
        let loss_node = &rec.nodes[loss.id];
        if loss_node.value.numel() != 1 {
            return Err(CoreError::contract(
                "backward",
                format!(
                    "loss must be scalar, got shape {:?}",
                    loss_node.value.shape
                ),
            ));
        }
        // Interior grads are per-call scratch; leaves keep accumulating.
        for node in rec.nodes.iter_mut() {
            if !matches!(node.op, Op::Leaf) {
                node.value.grad = None;
            }
        }
        {
            let g = rec.nodes[loss.id]
                .value
                .grad
                .get_or_insert_with(|| vec![0.0; 1]);
            g[0] += 1.0;
        }
        for id in (0..=loss.id).rev() {
            if rec.nodes[id].value.grad.is_none() || matches!(rec.nodes[id].op, Op::Leaf) {
                continue;
            }
            if !rec.nodes[id].value.requires_grad {
                continue;
            }
            backward::apply_adjoint(&mut rec, id);
        }
        Ok(())
    }
}

/// Handle to one tensor within a record.
#[derive(Clone)]
pub struct Var {
    graph: Graph,
    id: NodeId,
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Var {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.rec.borrow().nodes[self.id].value.shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.graph.rec.borrow().nodes[self.id].value.numel()
    }

    pub fn data(&self) -> Vec<f64> {
        self.graph.rec.borrow().nodes[self.id].value.data.clone()
    }

    pub fn value(&self) -> Tensor {
        self.graph.rec.borrow().nodes[self.id].value.clone()
    }

    pub fn item(&self) -> f64 {
        let rec = self.graph.rec.borrow();
        rec.nodes[self.id].value.item()
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.graph.rec.borrow().nodes[self.id].value.grad.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.rec.borrow().nodes[self.id].value.requires_grad
    }

    /// A constant copy of this value in the same record (stop-gradient).
    pub fn detach(&self) -> Var {
        let t = Tensor::new(self.shape(), self.data());
        self.graph.constant(t)
    }

    pub(crate) fn same_graph(&self, other: &Var) {
        assert!(
            Rc::ptr_eq(&self.graph.rec, &other.graph.rec),
            "vars belong to different computation records"
        );
    }

    pub(crate) fn push(&self, value: Tensor, op: Op) -> Var {
        let id = self.graph.push_node(value, op);
        Var {
            graph: self.graph.clone(),
            id,
        }
    }

    /// Apply `f` to the raw data of this node without cloning.
    pub(crate) fn with_data<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        let rec = self.graph.rec.borrow();
        f(&rec.nodes[self.id].value.data)
    }

    pub(crate) fn with_two<R>(&self, other: &Var, f: impl FnOnce(&[f64], &[f64]) -> R) -> R {
        let rec = self.graph.rec.borrow();
        f(
            &rec.nodes[self.id].value.data,
            &rec.nodes[other.id].value.data,
        )
    }
}
