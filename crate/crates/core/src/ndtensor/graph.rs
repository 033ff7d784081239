use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Local derivative of one recorded operation.
///
/// Implementations capture whatever forward values they need when the
/// operation is recorded. `backward` receives the gradient of the loss with
/// respect to the operation's output and returns one entry per parent, in
/// the order the parents were recorded. `needs[i]` is false when parent `i`
/// does not require a gradient; such entries may be returned as `None`.
pub trait BackwardOp<T: Real> {
    fn backward(&self, grad_out: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>>;
}

struct Node<T: Real> {
    value: Rc<Tensor<T>>,
    parents: Vec<usize>,
    op: Option<Box<dyn BackwardOp<T>>>,
    requires_grad: bool,
}

/// Reverse-mode tape.
///
/// Nodes are appended in execution order, so the backward pass is a single
/// reverse sweep over the node list. A graph is built fresh for every
/// forward pass and is confined to the thread that built it.
pub struct Graph<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a node of a [`Graph`].
pub struct Var<'g, T: Real> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T: Real> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T: Real> Copy for Var<'_, T> {}

impl<T: Real> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
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

    /// Leaf that receives a gradient in [`Graph::backward`].
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, true)
    }

    /// Leaf without gradient tracking.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            op: None,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// Appends the result of an operation.
    ///
    /// Fails with a numeric error if `value` holds NaN or Inf. The node
    /// tracks gradients iff some parent does; otherwise `op` is dropped.
    pub fn record<'g>(
        &'g self,
        name: &str,
        value: Tensor<T>,
        parents: &[Var<'g, T>],
        op: impl BackwardOp<T> + 'static,
    ) -> Result<Var<'g, T>> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let mut nodes = self.nodes.borrow_mut();
        let ids: Vec<usize> = parents
            .iter()
            .map(|p| {
                assert!(std::ptr::eq(p.graph, self), "variable from another graph");
                p.id
            })
            .collect();
        let requires_grad = ids.iter().any(|&i| nodes[i].requires_grad);
        nodes.push(Node {
            value: Rc::new(value),
            parents: ids,
            op: if requires_grad {
                Some(Box::new(op))
            } else {
                None
            },
            requires_grad,
        });
        Ok(Var {
            graph: self,
            id: nodes.len() - 1,
        })
    }

    /// Propagates d(loss)/d(node) back to every gradient-tracking leaf.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::dim(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(loss.id + 1);
        grads.resize_with(loss.id + 1, || None);
        grads[loss.id] = Some(Tensor::full(
            nodes[loss.id].value.shape().to_vec(),
            T::one(),
        ));
        let mut leaves = HashMap::new();
        for id in (0..=loss.id).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                None => {
                    leaves.insert(id, grad);
                }
                Some(op) => {
                    let needs: Vec<bool> = node
                        .parents
                        .iter()
                        .map(|&p| nodes[p].requires_grad)
                        .collect();
                    let contribs = op.backward(&grad, &needs);
                    debug_assert_eq!(contribs.len(), node.parents.len());
                    for ((&p, contrib), need) in node.parents.iter().zip(contribs).zip(needs) {
                        let Some(c) = contrib else { continue };
                        if !need {
                            continue;
                        }
                        debug_assert_eq!(c.shape(), nodes[p].value.shape());
                        match &mut grads[p] {
                            Some(acc) => {
                                for (a, b) in acc.data_mut().iter_mut().zip(c.data()) {
                                    *a += *b;
                                }
                            }
                            slot @ None => *slot = Some(c),
                        }
                    }
                }
            }
        }
        for g in leaves.values() {
            if !g.is_finite() {
                return Err(Error::NonFinite("backward pass".into()));
            }
        }
        Ok(Gradients { by_id: leaves })
    }
}

impl<'g, T: Real> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        Rc::clone(&self.graph.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        let v = self.value();
        debug_assert_eq!(v.numel(), 1);
        v.data()[0]
    }

    /// Same value, cut off from gradient flow.
    pub fn detach(&self) -> Var<'g, T> {
        self.graph.constant((*self.value()).clone())
    }
}

/// Leaf gradients produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T: Real> {
    by_id: HashMap<usize, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: &Var<'_, T>) -> Option<&Tensor<T>> {
        self.by_id.get(&var.id)
    }

    pub fn take(&mut self, var: &Var<'_, T>) -> Option<Tensor<T>> {
        self.by_id.remove(&var.id)
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }
}
