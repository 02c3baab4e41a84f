//! Dense f64 tensors with reverse-mode gradients.
//!
//! Tensors are eager: every op computes its value immediately and, when any
//! input requires gradients, records itself on an implicit tape. Calling
//! [`Tensor::backward`] on a scalar walks that tape in reverse topological
//! order and accumulates gradients additively into every contributing
//! tensor. Graphs are static feed-forward; there is no control-flow capture.
//!
//! All kernels run sequentially in a fixed order, so forward values and
//! gradients are bit-identical across runs for identical inputs.

mod kernels;
mod ops;
pub mod optim;

use std::cell::{Ref, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use thiserror::Error;

pub use optim::Sgd;

/// Errors from tensor construction, ops, and the optimizer.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs} and {rhs}")]
    ShapeMismatch { op: &'static str, lhs: String, rhs: String },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("backward requires a scalar tensor, got shape {0}")]
    NonScalarBackward(String),
    #[error("backward on a tensor with no gradient-requiring inputs")]
    NoGradPath,
    #[error("optimizer step before any backward pass populated a gradient")]
    StepBeforeBackward,
}

pub type Result<T> = std::result::Result<T, TensorError>;

pub(crate) fn shape_str(shape: &[usize]) -> String {
    let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    format!("[{}]", dims.join("x"))
}

/// One node of the computation graph.
struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    backward: Option<Box<dyn ops::BackwardOp>>,
}

/// A dense tensor of f64 values, at most 4-dimensional.
///
/// Cloning is cheap: clones share the same storage and gradient buffer.
#[derive(Clone)]
pub struct Tensor {
    node: Rc<RefCell<Node>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let n = self.node.borrow();
        f.debug_struct("Tensor")
            .field("shape", &n.shape)
            .field("requires_grad", &n.requires_grad)
            .finish()
    }
}

impl Tensor {
    fn new_node(node: Node) -> Tensor {
        Tensor { node: Rc::new(RefCell::new(node)) }
    }

    /// Constant tensor from a flat row-major buffer.
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(TensorError::Invalid {
                op: "from_vec",
                msg: format!("{} values for shape {}", data.len(), shape_str(shape)),
            });
        }
        if shape.len() > 4 {
            return Err(TensorError::Invalid {
                op: "from_vec",
                msg: format!("rank {} exceeds 4", shape.len()),
            });
        }
        Ok(Tensor::new_node(Node {
            data,
            shape: shape.to_vec(),
            grad: None,
            requires_grad: false,
            parents: Vec::new(),
            backward: None,
        }))
    }

    /// Trainable leaf from a flat buffer.
    pub fn param_from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::from_vec(data, shape)?;
        t.node.borrow_mut().requires_grad = true;
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor::from_vec(vec![0.0; numel], shape).expect("shape/data length agree")
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor::from_vec(vec![value; numel], shape).expect("shape/data length agree")
    }

    /// Constant rank-0 scalar.
    pub fn scalar(value: f64) -> Tensor {
        Tensor::from_vec(vec![value], &[]).expect("scalar")
    }

    /// Trainable rank-0 scalar.
    pub fn param_scalar(value: f64) -> Tensor {
        Tensor::param_from_vec(vec![value], &[]).expect("scalar")
    }

    /// Internal: result node of an op.
    fn from_op(
        data: Vec<f64>,
        shape: Vec<usize>,
        parents: Vec<Tensor>,
        backward: Box<dyn ops::BackwardOp>,
    ) -> Tensor {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        if requires_grad {
            Tensor::new_node(Node {
                data,
                shape,
                grad: None,
                requires_grad: true,
                parents,
                backward: Some(backward),
            })
        } else {
            // Constant subgraphs record no tape.
            Tensor::new_node(Node {
                data,
                shape,
                grad: None,
                requires_grad: false,
                parents: Vec::new(),
                backward: None,
            })
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        self.node.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.node.borrow().data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.borrow().requires_grad
    }

    /// Toggle gradient tracking on a leaf (used to freeze parameters).
    /// Ops over tensors with this cleared record no tape.
    pub fn set_requires_grad(&self, value: bool) {
        let mut n = self.node.borrow_mut();
        assert!(n.backward.is_none(), "set_requires_grad only applies to leaves");
        n.requires_grad = value;
        if !value {
            n.grad = None;
        }
    }

    /// Borrow the value buffer.
    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        Ref::map(self.node.borrow(), |n| &n.data)
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.node.borrow().data.clone()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        let n = self.node.borrow();
        assert_eq!(n.data.len(), 1, "item() on tensor of {} elements", n.data.len());
        n.data[0]
    }

    /// Copy of the accumulated gradient, if any backward pass reached this tensor.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.node.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.node.borrow_mut().grad = None;
    }

    /// Overwrite the value buffer in place (used by the optimizer and tests).
    pub fn set_data(&self, data: &[f64]) {
        let mut n = self.node.borrow_mut();
        assert_eq!(n.data.len(), data.len(), "set_data length mismatch");
        n.data.copy_from_slice(data);
    }

    /// True when two handles share the same storage.
    pub fn same_storage(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.node, &other.node)
    }

    fn accumulate_grad(&self, g: &[f64]) {
        let mut n = self.node.borrow_mut();
        match &mut n.grad {
            Some(buf) => {
                for (b, &v) in buf.iter_mut().zip(g) {
                    *b += v;
                }
            }
            None => n.grad = Some(g.to_vec()),
        }
    }

    /// Reverse-mode pass from a scalar output.
    ///
    /// Accumulates `d self / d leaf` into every gradient-requiring tensor
    /// that contributed to this value. Gradients add across repeated calls
    /// until cleared.
    pub fn backward(&self) -> Result<()> {
        {
            let n = self.node.borrow();
            if n.data.len() != 1 {
                return Err(TensorError::NonScalarBackward(shape_str(&n.shape)));
            }
            if !n.requires_grad {
                return Err(TensorError::NoGradPath);
            }
        }

        // Iterative post-order DFS; children (parents in graph terms) are
        // pushed in a fixed order, so the schedule is deterministic.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<usize> = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            let key = Rc::as_ptr(&t.node) as usize;
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(key) {
                continue;
            }
            stack.push((t.clone(), true));
            let n = t.node.borrow();
            for p in &n.parents {
                if p.requires_grad() {
                    stack.push((p.clone(), false));
                }
            }
        }

        self.accumulate_grad(&[1.0]);

        for t in order.iter().rev() {
            let (parent_grads, parents) = {
                let n = t.node.borrow();
                let op = match &n.backward {
                    Some(op) => op,
                    None => continue,
                };
                let grad_out = match &n.grad {
                    Some(g) => g,
                    None => continue,
                };
                let ctx = ops::BackwardCtx {
                    grad_out,
                    out_data: &n.data,
                    parents: &n.parents,
                };
                (op.backward(&ctx), n.parents.clone())
            };
            for (p, g) in parents.iter().zip(parent_grads) {
                if let Some(g) = g {
                    if p.requires_grad() {
                        p.accumulate_grad(&g);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_bad_lengths() {
        assert!(Tensor::from_vec(vec![1.0, 2.0], &[3]).is_err());
        assert!(Tensor::from_vec(vec![1.0; 8], &[2, 2, 2]).is_ok());
    }

    #[test]
    fn square_gradient_matches_analytic() {
        // d/dx (x*x) at x=3 is 6.
        let x = Tensor::param_from_vec(vec![3.0], &[]).unwrap();
        let y = x.mul(&x).unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn backward_requires_scalar_and_grad_path() {
        let x = Tensor::from_vec(vec![1.0, 2.0], &[2]).unwrap();
        assert!(matches!(x.backward(), Err(TensorError::NonScalarBackward(_))));
        let c = Tensor::scalar(1.0);
        assert!(matches!(c.backward(), Err(TensorError::NoGradPath)));
    }

    #[test]
    fn grads_accumulate_across_branches() {
        // y = x + x => dy/dx = 2
        let x = Tensor::param_from_vec(vec![5.0], &[]).unwrap();
        let y = x.add(&x).unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0]);
    }

    #[test]
    fn constant_subgraphs_record_no_tape() {
        let a = Tensor::from_vec(vec![1.0, 2.0], &[2]).unwrap();
        let b = Tensor::from_vec(vec![3.0, 4.0], &[2]).unwrap();
        let c = a.add(&b).unwrap();
        assert!(!c.requires_grad());
        assert!(c.node.borrow().backward.is_none());
    }
}
