//! Reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation in execution order. Each recorded node
//! owns its output value and an optional [`Backward`] rule; [`Tape::backward`]
//! walks the nodes once in reverse and accumulates vector-Jacobian products
//! into per-node gradient buffers.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

/// Everything a backward rule may look at.
pub struct BackwardCtx<'a> {
    pub inputs: &'a [&'a Tensor],
    pub output: &'a Tensor,
    pub grad_output: &'a [f64],
}

/// Vector-Jacobian product of one recorded operation.
///
/// Returns one entry per input; `None` for inputs that receive no gradient.
pub trait Backward {
    fn name(&self) -> &'static str;
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>>;
}

struct Node {
    value: Tensor,
    inputs: Vec<usize>,
    op: Option<Box<dyn Backward>>,
    requires_grad: bool,
}

/// Ordered record of a forward computation.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    tags: HashMap<String, Var>,
    branches: u64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            tags: HashMap::new(),
            branches: 0xcbf2_9ce4_8422_2325,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf; gradients are tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let requires_grad = tensor.requires_grad();
        self.push_node(tensor, Vec::new(), None, requires_grad)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push_node(tensor.with_requires_grad(false), Vec::new(), None, false)
    }

    /// Records a leaf that always receives a gradient.
    pub fn variable(&mut self, tensor: Tensor) -> Var {
        self.push_node(tensor.with_requires_grad(true), Vec::new(), None, true)
    }

    /// Records the result of an operation over `inputs`.
    pub fn push(&mut self, value: Tensor, inputs: &[Var], op: Box<dyn Backward>) -> Result<Var> {
        let mut idx = Vec::with_capacity(inputs.len());
        let mut requires_grad = false;
        for &v in inputs {
            self.check(v)?;
            requires_grad |= self.nodes[v.index].requires_grad;
            idx.push(v.index);
        }
        let op = if requires_grad { Some(op) } else { None };
        Ok(self.push_node(value, idx, op, requires_grad))
    }

    fn push_node(
        &mut self,
        value: Tensor,
        inputs: Vec<usize>,
        op: Option<Box<dyn Backward>>,
        requires_grad: bool,
    ) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            inputs,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index,
        }
    }

    /// Folds the branch choices of a piecewise op (ReLU signs, pooling
    /// argmaxes) into the tape's branch signature.
    pub(crate) fn record_branches(&mut self, choices: impl IntoIterator<Item = u64>) {
        for c in choices {
            self.branches = (self.branches ^ c).wrapping_mul(0x0100_0000_01b3);
        }
    }

    /// Hash of every branch taken by piecewise operations so far. Two forward
    /// passes with equal signatures lie on the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        self.branches
    }

    pub fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::DetachedTensor);
        }
        Ok(())
    }

    pub fn value(&self, v: Var) -> &Tensor {
        debug_assert_eq!(v.tape, self.id);
        &self.nodes[v.index].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    /// Names an intermediate value so it can be looked up later (Grad-CAM).
    pub fn tag(&mut self, name: impl Into<String>, v: Var) {
        self.tags.insert(name.into(), v);
    }

    pub fn tagged(&self, name: &str) -> Option<Var> {
        self.tags.get(name).copied()
    }

    pub fn tag_names(&self) -> impl Iterator<Item = &str> {
        self.tags.keys().map(String::as_str)
    }

    /// Name of the backward rule recorded for `v`, if any.
    pub fn op_name(&self, v: Var) -> Option<&'static str> {
        self.nodes[v.index].op.as_ref().map(|op| op.name())
    }

    /// Back-propagates from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check(loss)?;
        let value = self.value(loss);
        if value.len() != 1 {
            return Err(Error::NotScalarLoss(value.shape().to_vec()));
        }
        self.backward_with(loss, vec![1.0])
    }

    /// Back-propagates an explicit output gradient `seed` from `out`.
    pub fn backward_with(&self, out: Var, seed: Vec<f64>) -> Result<Gradients> {
        self.check(out)?;
        if seed.len() != self.value(out).len() {
            return Err(Error::ShapeMismatch("seed gradient length".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; out.index + 1];
        grads[out.index] = Some(seed);
        for i in (0..=out.index).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(op) = node.op.as_ref() else { continue };
            let Some(grad_out) = grads[i].take() else { continue };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|&j| &self.nodes[j].value).collect();
            let ctx = BackwardCtx {
                inputs: &inputs,
                output: &node.value,
                grad_output: &grad_out,
            };
            let input_grads = op.backward(&ctx);
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}", op.name());
            for (&j, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[j].requires_grad {
                    continue;
                }
                match &mut grads[j] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
            grads[i] = Some(grad_out);
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(|g| g.as_deref())
    }

    /// Gradient for `v`, or zeros of the given length when nothing flowed.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; len])
    }
}

/// `backward(tape, loss)`: gradients for every tensor recorded with `requires_grad`.
pub fn backward(tape: &Tape, loss: Var) -> Result<Gradients> {
    tape.backward(loss)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_of_sum() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::from_vec(&[3], vec![1.0, -2.0, 5.0]).unwrap());
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_of_square_sum() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::from_vec(&[2], vec![2.0, -3.0]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[4.0, -6.0]);
    }

    #[test]
    fn grad_linear_in_constant() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::from_vec(&[3], vec![0.3, 0.1, 9.0]).unwrap());
        let y = tape.constant(Tensor::from_vec(&[3], vec![1.5, -2.0, 0.25]).unwrap());
        let p = tape.mul(x, y).unwrap();
        let s = tape.sum(p).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.5, -2.0, 0.25]);
        assert!(g.get(y).is_none());
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::from_vec(&[2], vec![1.0, 4.0]).unwrap());
        let y = tape.add(x, x).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn loss_errors() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::NotScalarLoss(_))));
        let mut other = Tape::new();
        let foreign = other.variable(Tensor::zeros(&[1]));
        assert!(matches!(tape.backward(foreign), Err(Error::DetachedTensor)));
    }
}
