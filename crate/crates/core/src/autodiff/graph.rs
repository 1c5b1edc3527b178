use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Vector-Jacobian product of one recorded operation.
///
/// `grad` is the gradient w.r.t. the operation's output. The rule returns one
/// entry per input, `None` where `needs[i]` is false.
pub trait Backward {
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>>;
}

struct Node {
    value: Tensor,
    inputs: Vec<Var>,
    op: Option<Box<dyn Backward>>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Operation tape. Nodes are appended in evaluation order.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input or parameter.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, inputs: Vec::new(), op: None, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Records the result of an operation. Extension modules use this to add
    /// their own differentiable kernels.
    pub fn apply(&mut self, op: Box<dyn Backward>, inputs: &[Var], value: Tensor) -> Result<Var> {
        if value.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("graph forward"));
        }
        Ok(self.push(op, inputs, value))
    }

    pub(crate) fn push(&mut self, op: Box<dyn Backward>, inputs: &[Var], value: Tensor) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            inputs: inputs.to_vec(),
            op: if requires_grad { Some(op) } else { None },
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Back-propagates from a scalar node, adding `d loss / d leaf` into the
    /// gradient buffer of every tracked leaf. Repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "backward",
                detail: alloc::format!("loss must be scalar, got shape {:?}", self.nodes[loss.0].value.shape()),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(op) = node.op.as_ref() else {
                let node = &mut self.nodes[i];
                match node.grad.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(g),
                }
                continue;
            };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
            let input_grads = op.backward(&inputs, &node.value, &g, &needs);
            let input_ids = node.inputs.clone();
            for (var, ig) in input_ids.into_iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                match grads[var.0].as_mut() {
                    Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                    None => grads[var.0] = Some(ig),
                }
            }
        }
        Ok(())
    }
}
