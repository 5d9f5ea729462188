use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::ops::Op;
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) struct Node<E: Element> {
    pub value: Tensor<E>,
    pub op: Op,
    pub requires_grad: bool,
}

/// Ordered record of operations. Nodes are appended as they are computed,
/// so every node's inputs precede it.
pub struct Tape<E: Element = f32> {
    pub(crate) nodes: Vec<Node<E>>,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. `requires_grad` follows the tensor's flag.
    pub fn leaf(&mut self, value: Tensor<E>) -> Var {
        let requires_grad = value.requires_grad();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<E>) -> Var {
        self.leaf(value.with_requires_grad(false))
    }

    /// Leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor<E>) -> Var {
        self.leaf(value.with_requires_grad(true))
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copies the value of `v` onto the tape as a constant, cutting the
    /// gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub(crate) fn push(&mut self, value: Tensor<E>, op: Op, op_name: &'static str) -> Result<Var> {
        if value.data().iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse pass from a scalar `loss`. Each recorded operation is visited
    /// once, in reverse order.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_shape = self.nodes[loss.0].value.shape();
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::NotScalar(loss_shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            node.op.backward(&self.nodes, &node.value, &upstream, &mut |input: Var, delta: &[f64]| {
                if !self.nodes[input.0].requires_grad {
                    return;
                }
                match &mut grads[input.0] {
                    Some(g) => g.iter_mut().zip(delta).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(delta.to_vec()),
                }
            });
            grads[idx] = Some(upstream);
        }
        let shapes = self.nodes[..=loss.0]
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `v`; `None` when `v` was not on the path to the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v` as a tensor, zero-filled when `v` was not reached.
    pub fn tensor<E: Element>(&self, v: Var) -> Result<Tensor<E>> {
        let shape = self
            .shapes
            .get(v.0)
            .ok_or_else(|| Error::invalid(format!("var {} recorded after the loss", v.0)))?
            .clone();
        Ok(match self.get(v) {
            Some(g) => Tensor::from_parts(shape, g.iter().map(|&x| E::from_f64(x)).collect()),
            None => Tensor::zeros(shape),
        })
    }

    /// Gradient of `v` in `f64`, zero-filled when unreached.
    pub fn values(&self, v: Var) -> Vec<f64> {
        match self.get(v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; self.shapes.get(v.0).map_or(0, |s| s.iter().product())],
        }
    }
}
