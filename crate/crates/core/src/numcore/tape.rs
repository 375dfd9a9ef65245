//! Reverse-mode differentiation over an append-only tape.
//!
//! Every node's inputs have smaller ids than the node itself, so a single
//! reverse sweep over ids visits nodes in a valid topological order.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use super::ops;
use super::{NumError, Tensor};

pub type NodeId = usize;

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    Mean(NodeId),
    MaskedBce {
        pred: NodeId,
        target: Rc<Tensor>,
        mask: Rc<Tensor>,
    },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
    name: Option<String>,
}

/// Recording context for one optimization step. Not shareable across
/// threads; build one per worker and drop it after the update.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
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

    pub fn clear(&mut self) {
        self.nodes.get_mut().clear();
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool, name: Option<String>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
            name,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Named trainable leaf.
    pub fn param(&self, name: impl Into<String>, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true, Some(name.into()))
    }

    /// Anonymous trainable leaf (useful for input gradients).
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true, None)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false, None)
    }

    fn value(&self, id: NodeId) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Gradients of a scalar `loss` with respect to every trainable leaf.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients, NumError> {
        assert!(std::ptr::eq(self, loss.tape), "loss recorded on another tape");
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if !root.value.is_scalar() {
            return Err(NumError::NonScalarLoss {
                shape: root.value.shape().to_vec(),
            });
        }
        if !root.requires_grad {
            return Err(NumError::DetachedLoss);
        }

        let mut pending: Vec<Option<Tensor>> = (0..=loss.id).map(|_| None).collect();
        pending[loss.id] = Some(Tensor::full(root.value.shape(), 1.0));
        let mut leaves = Vec::new();

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let grad = match pending[id].take() {
                Some(g) => g,
                None if matches!(node.op, Op::Leaf) => Tensor::zeros(node.value.shape()),
                None => continue,
            };
            let needs = |i: NodeId| nodes[i].requires_grad;
            match &node.op {
                Op::Leaf => leaves.push(LeafGrad {
                    id,
                    name: node.name.clone(),
                    grad,
                }),
                Op::Add(a, b) => {
                    if needs(*a) {
                        accumulate(&mut pending[*a], grad.clone());
                    }
                    if needs(*b) {
                        accumulate(&mut pending[*b], grad);
                    }
                }
                Op::Scale(a, factor) => accumulate(&mut pending[*a], ops::scale(&grad, *factor)),
                Op::Relu(a) => {
                    let x = &nodes[*a].value;
                    let data = grad
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(g, &xv)| if xv > 0.0 { *g } else { 0.0 })
                        .collect();
                    accumulate(&mut pending[*a], Tensor::from_parts(grad.shape().to_vec(), data));
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let data = grad
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(g, &yv)| g * yv * (1.0 - yv))
                        .collect();
                    accumulate(&mut pending[*a], Tensor::from_parts(grad.shape().to_vec(), data));
                }
                Op::Mean(a) => {
                    let x = &nodes[*a].value;
                    let share = grad.data()[0] / x.len() as f64;
                    accumulate(&mut pending[*a], Tensor::full(x.shape(), share));
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                } => {
                    let g = ops::conv2d_backward(
                        &nodes[*input].value,
                        &nodes[*weight].value,
                        &nodes[*bias].value,
                        &grad,
                        needs(*input),
                    )?;
                    if let Some(gx) = g.input {
                        accumulate(&mut pending[*input], gx);
                    }
                    if needs(*weight) {
                        accumulate(&mut pending[*weight], g.weight);
                    }
                    if needs(*bias) {
                        accumulate(&mut pending[*bias], g.bias);
                    }
                }
                Op::MaskedBce { pred, target, mask } => {
                    let g = ops::masked_bce_backward(&nodes[*pred].value, target, mask, &grad);
                    accumulate(&mut pending[*pred], g);
                }
            }
        }
        // Leaves recorded after the loss cannot influence it.
        for (id, node) in nodes.iter().enumerate().skip(loss.id + 1) {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                leaves.push(LeafGrad {
                    id,
                    name: node.name.clone(),
                    grad: Tensor::zeros(node.value.shape()),
                });
            }
        }
        leaves.sort_by_key(|l| l.id);
        Ok(Gradients { leaves })
    }
}

fn accumulate(slot: &mut Option<Tensor>, grad: Tensor) {
    match slot {
        None => *slot = Some(grad),
        Some(acc) => {
            let data = acc.data().iter().zip(grad.data()).map(|(a, b)| a + b).collect();
            *acc = Tensor::from_parts(acc.shape().to_vec(), data);
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    /// Value copy with no tape history: gradients never flow back through it.
    pub fn detach(&self) -> Tensor {
        (*self.value()).clone()
    }

    fn same_tape(&self, other: &Var<'_>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'t> {
        self.tape.push(value, op, self.requires_grad(), None)
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>, NumError> {
        self.same_tape(other);
        let value = ops::add(&self.value(), &other.value())?;
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(value, Op::Add(self.id, other.id), rg, None))
    }

    pub fn scale(&self, factor: f64) -> Var<'t> {
        self.unary(ops::scale(&self.value(), factor), Op::Scale(self.id, factor))
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(ops::relu(&self.value()), Op::Relu(self.id))
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(ops::sigmoid(&self.value()), Op::Sigmoid(self.id))
    }

    pub fn mean(&self) -> Var<'t> {
        self.unary(ops::mean(&self.value()), Op::Mean(self.id))
    }

    pub fn conv2d(&self, weight: &Var<'t>, bias: &Var<'t>) -> Result<Var<'t>, NumError> {
        self.same_tape(weight);
        self.same_tape(bias);
        let value = ops::conv2d(&self.value(), &weight.value(), &bias.value())?;
        let rg = self.requires_grad() || weight.requires_grad() || bias.requires_grad();
        let op = Op::Conv2d {
            input: self.id,
            weight: weight.id,
            bias: bias.id,
        };
        Ok(self.tape.push(value, op, rg, None))
    }

    /// Per-sample masked BCE of this prediction against fixed targets.
    pub fn masked_bce(&self, target: &Tensor, mask: &Tensor) -> Result<Var<'t>, NumError> {
        let value = ops::masked_bce(&self.value(), target, mask)?;
        let op = Op::MaskedBce {
            pred: self.id,
            target: Rc::new(target.clone()),
            mask: Rc::new(mask.clone()),
        };
        Ok(self.unary(value, op))
    }
}

struct LeafGrad {
    id: NodeId,
    name: Option<String>,
    grad: Tensor,
}

/// Result of [`Tape::backward`]: one gradient per trainable leaf.
pub struct Gradients {
    leaves: Vec<LeafGrad>,
}

impl Gradients {
    pub fn wrt(&self, var: &Var<'_>) -> Option<&Tensor> {
        self.leaves
            .binary_search_by_key(&var.id, |l| l.id)
            .ok()
            .map(|i| &self.leaves[i].grad)
    }

    /// Gradients of named leaves keyed by name. If several leaves share a
    /// name the most recently recorded one wins.
    pub fn named(&self) -> BTreeMap<String, Tensor> {
        self.leaves
            .iter()
            .filter_map(|l| l.name.as_ref().map(|n| (n.clone(), l.grad.clone())))
            .collect()
    }
}
