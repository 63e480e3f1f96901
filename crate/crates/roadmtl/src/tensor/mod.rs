//! Minimal reverse-mode autodiff on dynamically shaped f64 arrays.
//!
//! A [`Tape`] records one computation graph; [`Tensor`] handles index into it.
//! Nodes store their forward value and, when any input requires gradients, a
//! boxed backward op. `Tape::backward` walks the nodes in reverse insertion
//! order (which is a topological order by construction) and accumulates
//! gradients deterministically: identical inputs yield bitwise-identical
//! gradients on every run.

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};

mod conv;
mod elementwise;
mod linear;
mod norm;
mod pool;
mod resize;

pub use norm::BatchNormStats;
pub use resize::bilinear_resize_plane;

pub type ArrayDyn = ArrayD<f64>;

/// Backward rule of a single graph node.
///
/// `backward` receives the upstream gradient, the parent values and the node's
/// own forward value, and returns one gradient per parent (same order).
pub(crate) trait BackwardOp {
    fn backward(&self, grad: &ArrayDyn, inputs: &[&ArrayDyn], output: &ArrayDyn) -> Vec<ArrayDyn>;
}

struct Node {
    value: ArrayDyn,
    parents: Vec<usize>,
    backop: Option<Box<dyn BackwardOp>>,
    needs_grad: bool,
}

#[derive(Clone, Default)]
pub struct Tape {
    nodes: Rc<RefCell<Vec<Node>>>,
}

/// Handle to one node of a [`Tape`]. Cheap to clone.
#[derive(Clone)]
pub struct Tensor {
    tape: Tape,
    id: usize,
    shape: Vec<usize>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor").field("id", &self.id).field("shape", &self.shape).finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: ArrayDyn, parents: Vec<usize>, backop: Option<Box<dyn BackwardOp>>, needs_grad: bool) -> Tensor {
        let shape = value.shape().to_vec();
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents,
            backop,
            needs_grad,
        });
        Tensor {
            tape: self.clone(),
            id: nodes.len() - 1,
            shape,
        }
    }

    /// New differentiable leaf (model parameters, probed inputs).
    pub fn var(&self, value: ArrayDyn) -> Tensor {
        self.push(value, vec![], None, true)
    }

    /// New constant leaf; gradients never flow into it.
    pub fn constant(&self, value: ArrayDyn) -> Tensor {
        self.push(value, vec![], None, false)
    }

    pub fn scalar(&self, v: f64) -> Tensor {
        self.constant(ArrayDyn::from_elem(IxDyn(&[]), v))
    }

    /// Reverse pass from a scalar `root`. Returns per-node gradients.
    pub fn backward(&self, root: &Tensor) -> Result<Gradients> {
        if root.value_len() != 1 {
            return Err(Error::contract(
                "backward",
                format!("root must be a scalar, got shape {:?}", root.shape),
            ));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<ArrayDyn>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.id] = Some(ArrayDyn::from_elem(IxDyn(&nodes[root.id].value.shape().to_vec()), 1.0));
        for id in (0..=root.id).rev() {
            if grads[id].is_none() {
                continue;
            }
            let node = &nodes[id];
            let Some(op) = node.backop.as_ref() else {
                continue;
            };
            let grad = grads[id].clone().expect("gradient present");
            let parent_vals: Vec<&ArrayDyn> = node.parents.iter().map(|&p| &nodes[p].value).collect();
            let contribs = op.backward(&grad, &parent_vals, &node.value);
            debug_assert_eq!(contribs.len(), node.parents.len());
            for (&p, c) in node.parents.iter().zip(contribs.into_iter()) {
                if !nodes[p].needs_grad {
                    continue;
                }
                match grads[p].as_mut() {
                    Some(a) => *a += &c,
                    None => grads[p] = Some(c),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Result of a backward pass: gradient per tape node, where reached.
pub struct Gradients {
    grads: Vec<Option<ArrayDyn>>,
}

impl Gradients {
    /// Gradient of the root w.r.t. `t`, zeros when no gradient flowed.
    pub fn wrt(&self, t: &Tensor) -> ArrayDyn {
        match self.grads.get(t.id).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => ArrayDyn::zeros(IxDyn(&t.shape)),
        }
    }

    pub fn has_grad(&self, t: &Tensor) -> bool {
        self.grads.get(t.id).map(|g| g.is_some()).unwrap_or(false)
    }
}

impl Tensor {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn value_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn needs_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].needs_grad
    }

    /// Clone of the node's forward value.
    pub fn value(&self) -> ArrayDyn {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    /// Read access without cloning.
    pub fn with_value<R>(&self, f: impl FnOnce(&ArrayDyn) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn scalar_value(&self) -> f64 {
        self.with_value(|v| {
            debug_assert_eq!(v.len(), 1);
            *v.iter().next().expect("non-empty")
        })
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    /// Cut the graph: same value, no history, no gradient flow.
    pub fn detach(&self) -> Tensor {
        self.tape.constant(self.value())
    }

    /// Zero-dimensional constant on this tensor's tape.
    pub fn tape_scalar(&self, v: f64) -> Tensor {
        self.tape.scalar(v)
    }

    pub(crate) fn unary_op(&self, value: ArrayDyn, op: Box<dyn BackwardOp>) -> Tensor {
        let needs = self.needs_grad();
        self.tape
            .push(value, vec![self.id], if needs { Some(op) } else { None }, needs)
    }

    pub(crate) fn nary_op(inputs: &[&Tensor], value: ArrayDyn, op: Box<dyn BackwardOp>) -> Tensor {
        debug_assert!(!inputs.is_empty());
        let tape = inputs[0].tape.clone();
        let needs = inputs.iter().any(|t| t.needs_grad());
        tape.push(
            value,
            inputs.iter().map(|t| t.id).collect(),
            if needs { Some(op) } else { None },
            needs,
        )
    }

    pub(crate) fn same_tape(&self, other: &Tensor, op: &str) -> Result<()> {
        if Rc::ptr_eq(&self.tape.nodes, &other.tape.nodes) {
            Ok(())
        } else {
            Err(Error::contract(op, "operands recorded on different tapes"))
        }
    }
}

/// Central finite difference of `f` at `x` in direction of element `idx`.
///
/// Test-side oracle for gradient checks; kept in the library so integration
/// tests and the acceptance suite share one definition.
pub fn central_difference<F>(mut f: F, x: &ArrayDyn, idx: usize, h: f64) -> f64
where
    F: FnMut(&ArrayDyn) -> f64,
{
    let mut xp = x.clone();
    let mut xm = x.clone();
    xp.as_slice_mut().expect("contiguous")[idx] += h;
    xm.as_slice_mut().expect("contiguous")[idx] -= h;
    (f(&xp) - f(&xm)) / (2.0 * h)
}
