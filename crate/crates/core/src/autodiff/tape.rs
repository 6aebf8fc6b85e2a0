use std::cell::{Ref, RefCell};
use std::fmt;

use super::element::Element;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub type NodeId = usize;

/// A recorded operation together with whatever its backward rule needs.
#[derive(Debug, Clone)]
pub(crate) enum Op<E> {
    Leaf,
    MatMul {
        a: NodeId,
        b: NodeId,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, E),
    AddScalar(NodeId),
    Reshape(NodeId),
    Permute {
        x: NodeId,
        perm: Vec<usize>,
    },
    SumAll(NodeId),
    SumAxis {
        x: NodeId,
        outer: usize,
        mid: usize,
        inner: usize,
    },
    Mean(NodeId),
    Softmax {
        x: NodeId,
        inv_temp: E,
    },
    Gelu(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<E>,
        rstd: Vec<E>,
    },
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
    },
    AddBias {
        x: NodeId,
        bias: NodeId,
    },
    RepeatRows {
        x: NodeId,
        times: usize,
    },
    Conv2dWrap {
        x: NodeId,
        kernel: Tensor<E>,
    },
    ReduceMax {
        x: NodeId,
        index: usize,
    },
    Gather {
        x: NodeId,
        indices: Vec<usize>,
    },
    Concat(Vec<NodeId>),
}

pub(crate) struct Node<E> {
    pub(crate) value: Tensor<E>,
    pub(crate) op: Op<E>,
    pub(crate) requires_grad: bool,
}

/// Ordered record of operations for reverse-mode differentiation.
///
/// Node ids are assigned in creation order, so every operation's inputs
/// precede it and the reverse sweep is a plain descending loop.
pub struct Tape<E: Element> {
    nodes: RefCell<Vec<Node<E>>>,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> fmt::Debug for Tape<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("len", &self.len()).finish()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, E: Element> {
    pub(crate) tape: &'t Tape<E>,
    pub(crate) id: NodeId,
}

impl<E: Element> fmt::Debug for Var<'_, E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Differentiable leaf.
    pub fn var(&self, value: Tensor<E>) -> Var<'_, E> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<E>) -> Var<'_, E> {
        self.push(value, Op::Leaf, false)
    }

    pub(crate) fn push(&self, value: Tensor<E>, op: Op<E>, requires_grad: bool) -> Var<'_, E> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn nodes(&self) -> Ref<'_, Vec<Node<E>>> {
        self.nodes.borrow()
    }

    pub(crate) fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse sweep from a scalar loss.
    ///
    /// The tape is left untouched, so the sweep can be replayed and yields the
    /// same gradients bit for bit.
    pub fn backward(&self, loss: Var<'_, E>) -> Result<Gradients<E>> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::contract("loss belongs to a different tape"));
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.requires_grad {
            return Err(Error::contract(
                "loss is detached: no differentiable leaf reaches it",
            ));
        }

        let mut grads: Vec<Option<Vec<E>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![E::one()]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            super::backward::propagate(&node.op, &node.value, &g, &nodes, &mut grads);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(id, g)| match (&nodes[id].op, g) {
                (Op::Leaf, Some(g)) if nodes[id].requires_grad => Some(
                    Tensor::new(nodes[id].value.shape().to_vec(), g).expect("grad shape matches"),
                ),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }
}

impl<'t, E: Element> Var<'t, E> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<E> {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    /// Borrow of the forward value.
    pub fn value(&self) -> Ref<'t, Tensor<E>> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn to_tensor(&self) -> Tensor<E> {
        self.value().clone()
    }

    pub fn item(&self) -> E {
        self.value().item()
    }

    pub(crate) fn same_tape(&self, other: &Var<'_, E>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::contract("operands live on different tapes"))
        }
    }
}

/// Gradients of every differentiable leaf reached by a backward sweep.
#[derive(Debug, Clone)]
pub struct Gradients<E> {
    grads: Vec<Option<Tensor<E>>>,
}

impl<E: Element> Gradients<E> {
    pub fn get(&self, var: &Var<'_, E>) -> Option<&Tensor<E>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: &Var<'_, E>) -> Option<Tensor<E>> {
        self.grads.get_mut(var.id).and_then(|g| g.take())
    }
}
