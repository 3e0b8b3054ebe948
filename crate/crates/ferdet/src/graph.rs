//! Reverse-mode tape.
//!
//! Every operator pushes a node holding its output plus a closure that maps
//! the upstream gradient to per-parent gradient contributions. Nodes are
//! appended in execution order, so a reverse walk over the vector is a valid
//! topological order and visits each node exactly once. Gradients accumulate
//! additively when a value feeds several consumers.

use std::rc::Rc;

use crate::error::{FerError, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type BackFn<T> = Box<dyn Fn(&Tensor<T>) -> Vec<(Var, Tensor<T>)>>;

struct Node<T: Scalar> {
    value: Rc<Tensor<T>>,
    requires_grad: bool,
    back: Option<BackFn<T>>,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    /// When set, every operator output is checked for NaN/Inf.
    pub check_finite: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            check_finite: cfg!(debug_assertions),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts a leaf. Leaves with `requires_grad` receive gradients in
    /// [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            back: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn rc(&self, v: Var) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes[v.0].value)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Registers an operator output. `back` maps the upstream gradient to
    /// contributions for each parent that could require a gradient.
    pub fn push_op(&mut self, value: Tensor<T>, parents: &[Var], back: BackFn<T>) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(FerError::Numeric(
                "operator produced a non-finite value".into(),
            ));
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            back: if requires_grad { Some(back) } else { None },
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Runs reverse accumulation from a scalar loss.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(FerError::invalid(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            if self.grads[i].is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let Some(back) = self.nodes[i].back.as_ref() else {
                continue;
            };
            let gout = self.grads[i].as_ref().unwrap();
            let contributions = back(gout);
            for (pv, gt) in contributions {
                if !self.nodes[pv.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(gt.shape(), self.nodes[pv.0].value.shape());
                match &mut self.grads[pv.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(gt.data()) {
                            *a = *a + *b;
                        }
                    }
                    slot => *slot = Some(gt),
                }
            }
        }
        Ok(())
    }

    /// Gradient of the last backward pass w.r.t. `v`. Leaves a loss did not
    /// reach report a zero gradient.
    pub fn grad(&self, v: Var) -> Tensor<T> {
        match &self.grads.get(v.0) {
            Some(Some(g)) => g.clone(),
            _ => Tensor::zeros(self.nodes[v.0].value.shape()),
        }
    }
}
