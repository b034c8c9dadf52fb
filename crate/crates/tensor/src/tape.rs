//! Tape-based reverse-mode differentiation.
//!
//! Every differentiable operation appends a node to a [`Tape`] in forward
//! execution order. [`Tape::backward`] walks the nodes in exact reverse order,
//! so each node's gradient is complete before its backward rule runs.
//! Gradients of a value consumed several times accumulate additively.
//!
//! A tape serves one forward pass and can be differentiated once; build a new
//! tape for the next pass.
//!
//! ```
//! use saits_tensor::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let w = tape.param(Tensor::new([1], vec![3.0]).unwrap());
//! let loss = w.mul(w).unwrap().sum();
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(w).unwrap().data(), &[6.0]);
//! ```

use std::cell::{Ref, RefCell};
use std::fmt;
use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// A user-defined differentiable operation.
pub trait CustomOp: fmt::Debug {
    fn name(&self) -> &str;

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;

    /// One gradient per input, each shaped like that input.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Tensor>;
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Affine { x: usize, scale: f64 },
    Relu(usize),
    Sigmoid(usize),
    Abs(usize),
    MatMul(usize, usize),
    Softmax(usize),
    Concat(usize, usize),
    Permute { x: usize, perm: Vec<usize> },
    Reshape(usize),
    Sum(usize),
    MeanAxis { x: usize, axis: usize },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        normalized: Tensor,
        inv_std: Vec<f64>,
    },
    MaskedMae { est: usize, slope: Tensor },
    MulConst { x: usize, factor: Tensor },
    Select { mask: Tensor, on_true: usize, on_false: usize },
    Custom { op: Rc<dyn CustomOp>, inputs: Vec<usize> },
}

#[derive(Debug)]
pub(crate) struct Node {
    pub value: Tensor,
    pub requires_grad: bool,
    pub op: Op,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    consumed: bool,
}

/// Record of one forward pass.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<Inner>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Tape")
            .field("nodes", &inner.nodes.len())
            .field("consumed", &inner.consumed)
            .finish()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.shape())
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

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub(crate) fn push(&self, value: Tensor, requires_grad: bool, op: Op) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        // Nothing upstream needs a gradient: record as a plain constant.
        let op = if requires_grad { op } else { Op::Leaf };
        inner.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var { tape: self, id }
    }

    pub(crate) fn nodes(&self) -> Ref<'_, Vec<Node>> {
        Ref::map(self.inner.borrow(), |i| &i.nodes)
    }

    /// Apply a [`CustomOp`] to `inputs`.
    pub fn custom<'t>(&'t self, op: Rc<dyn CustomOp>, inputs: &[Var<'t>]) -> Result<Var<'t>> {
        let (value, requires_grad) = {
            let nodes = self.nodes();
            let vals: Vec<&Tensor> = inputs.iter().map(|v| &nodes[v.id].value).collect();
            (
                op.forward(&vals)?,
                inputs.iter().any(|v| nodes[v.id].requires_grad),
            )
        };
        let ids = inputs.iter().map(|v| v.id).collect();
        Ok(self.push(value, requires_grad, Op::Custom { op, inputs: ids }))
    }

    /// Propagate gradients from a scalar `loss` to every leaf that requires
    /// them. A tape can only be differentiated once.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(TensorError::GraphConsumed);
        }
        let loss_shape = inner.nodes[loss.id].value.shape().to_vec();
        if inner.nodes[loss.id].value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(loss_shape));
        }
        inner.consumed = true;
        let n = inner.nodes.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[loss.id] = Some(Tensor::ones(loss_shape));
        let mut leaf_grads: Vec<Option<Tensor>> = vec![None; n];
        let nodes = &inner.nodes;
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                leaf_grads[id] = Some(g);
                continue;
            }
            crate::ops::backward_rule(nodes, id, g, &mut |input, contrib| {
                if !nodes[input].requires_grad {
                    return;
                }
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            });
        }
        inner.grads = leaf_grads;
        Ok(())
    }

    /// Gradient of the last backward pass with respect to a leaf.
    pub fn grad(&self, var: Var<'_>) -> Option<Tensor> {
        self.inner.borrow().grads.get(var.id).cloned().flatten()
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes()[self.id].value.clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.nodes()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes()[self.id].requires_grad
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.tape.grad(*self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn square_gradient() {
        let tape = Tape::new();
        let w = tape.param(t(&[1], &[3.0]));
        let loss = w.mul(w).unwrap().sum();
        tape.backward(loss).unwrap();
        assert_eq!(w.grad().unwrap().data(), &[6.0]);
    }

    #[test]
    fn masked_mae_gradient_is_sign() {
        let tape = Tape::new();
        let w = tape.param(t(&[1], &[2.0]));
        let loss = w.masked_mae(&t(&[1], &[0.0]), &t(&[1], &[1.0])).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(w.grad().unwrap().data(), &[1.0]);
    }

    #[test]
    fn second_backward_is_an_error() {
        let tape = Tape::new();
        let w = tape.param(t(&[1], &[1.0]));
        let loss = w.mul(w).unwrap().sum();
        tape.backward(loss).unwrap();
        assert_eq!(tape.backward(loss), Err(TensorError::GraphConsumed));
    }

    #[test]
    fn non_scalar_loss_is_an_error() {
        let tape = Tape::new();
        let w = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(
            tape.backward(w),
            Err(TensorError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn reuse_accumulates() {
        // loss = sum(w + w + w) -> dw = 3
        let tape = Tape::new();
        let w = tape.param(t(&[2], &[1.0, -1.0]));
        let s = w.add(w).unwrap().add(w).unwrap();
        tape.backward(s.sum()).unwrap();
        assert_eq!(w.grad().unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::new();
        let c = tape.constant(t(&[1], &[2.0]));
        let w = tape.param(t(&[1], &[5.0]));
        let loss = c.mul(w).unwrap().sum();
        tape.backward(loss).unwrap();
        assert!(c.grad().is_none());
        assert_eq!(w.grad().unwrap().data(), &[2.0]);
    }
}
