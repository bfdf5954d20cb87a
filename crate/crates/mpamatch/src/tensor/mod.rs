//! Reverse-mode automatic differentiation over `f64` dense arrays.
//!
//! Every op builds a node in a dynamically constructed DAG. Calling
//! [`Tensor::backward`] on a scalar output walks the graph in reverse
//! topological order and accumulates gradients into every node that
//! requires them. Graphs are rebuilt each training step; parameters are
//! the only long-lived nodes.
//!
//! All ops are single-threaded and evaluate in a fixed order, so two
//! forward passes over identical data are bitwise identical.

mod image;
mod ops;

use ndarray::ArrayD;
use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

pub type Data = ArrayD<f64>;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Gradient contributions for each parent, aligned with `Node::parents`.
type BackwardFn = Box<dyn Fn(&Data) -> Vec<Option<Data>>>;

struct Node {
    id: u64,
    data: RefCell<Data>,
    grad: RefCell<Option<Data>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// Shared handle to a graph node. Cloning is cheap (reference count bump).
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl Tensor {
    /// Leaf with no gradient tracking.
    pub fn constant(data: Data) -> Self {
        Tensor(Rc::new(Node {
            id: next_id(),
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad: false,
            parents: Vec::new(),
            backward: None,
        }))
    }

    /// Trainable leaf; gradients accumulate here across a backward pass.
    pub fn param(data: Data) -> Self {
        Tensor(Rc::new(Node {
            id: next_id(),
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad: true,
            parents: Vec::new(),
            backward: None,
        }))
    }

    /// Interior node. Gradient tracking is inherited from the parents; a
    /// node with no differentiable ancestors keeps neither its parents nor
    /// its backward closure, so no-grad subgraphs are pruned as they are
    /// built.
    pub(crate) fn from_op(data: Data, parents: Vec<Tensor>, backward: BackwardFn) -> Self {
        let requires_grad = parents.iter().any(|p| p.0.requires_grad);
        let (parents, backward) = if requires_grad {
            (parents, Some(backward))
        } else {
            (Vec::new(), None)
        };
        Tensor(Rc::new(Node {
            id: next_id(),
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            parents,
            backward,
        }))
    }

    pub fn data(&self) -> std::cell::Ref<'_, Data> {
        self.0.data.borrow()
    }

    pub fn to_data(&self) -> Data {
        self.0.data.borrow().clone()
    }

    /// Replace the stored values in place (optimizer updates, finite
    /// differences). Shape must not change.
    pub fn set_data(&self, data: Data) {
        assert_eq!(
            self.0.data.borrow().shape(),
            data.shape(),
            "set_data must preserve shape"
        );
        *self.0.data.borrow_mut() = data;
    }

    /// Apply an in-place mutation to the stored values.
    pub fn with_data_mut(&self, f: impl FnOnce(&mut Data)) {
        f(&mut self.0.data.borrow_mut());
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.data.borrow().shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.0.data.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Scalar value of a 1-element tensor.
    pub fn item(&self) -> f64 {
        let d = self.0.data.borrow();
        assert_eq!(d.len(), 1, "item() requires a scalar tensor");
        *d.iter().next().unwrap()
    }

    /// Copy of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Data> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Cut the graph: same values, no history.
    pub fn detach(&self) -> Tensor {
        Tensor::constant(self.to_data())
    }

    fn accumulate_grad(&self, g: Data) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => *acc += &g,
            None => *slot = Some(g),
        }
    }

    /// Reverse-mode sweep from a scalar output. Gradients of all reachable
    /// `requires_grad` nodes are accumulated; call `zero_grad` on
    /// parameters between steps.
    pub fn backward(&self) {
        assert_eq!(self.len(), 1, "backward() requires a scalar output");
        if !self.0.requires_grad {
            return;
        }
        let order = self.topo_order();
        self.accumulate_grad(Data::from_elem(self.0.data.borrow().raw_dim(), 1.0));
        for node in order.iter().rev() {
            let Some(backward) = &node.0.backward else {
                continue;
            };
            let grad_out = node.0.grad.borrow().clone();
            let Some(grad_out) = grad_out else { continue };
            let parent_grads = backward(&grad_out);
            debug_assert_eq!(parent_grads.len(), node.0.parents.len());
            for (parent, pg) in node.0.parents.iter().zip(parent_grads) {
                if let Some(pg) = pg {
                    if parent.0.requires_grad {
                        debug_assert_eq!(pg.shape(), parent.0.data.borrow().shape());
                        parent.accumulate_grad(pg);
                    }
                }
            }
            // Interior grads are no longer needed once propagated.
            if node.0.backward.is_some() {
                *node.0.grad.borrow_mut() = None;
            }
        }
    }

    /// Post-order over the differentiable subgraph: every node appears
    /// after all of its parents.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut visited: HashSet<u64> = HashSet::new();
        let mut order: Vec<Tensor> = Vec::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.0.id) {
                continue;
            }
            stack.push((t.clone(), true));
            for p in &t.0.parents {
                if p.0.requires_grad && !visited.contains(&p.0.id) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.0.id)
            .field("shape", &self.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn accumulates_through_shared_nodes() {
        let x = Tensor::param(arr1(&[2.0, 3.0]).into_dyn());
        // y = sum(x*x + x*x) = 2*sum(x^2); dy/dx = 4x
        let sq = x.mul(&x);
        let y = sq.add(&sq).sum_all();
        y.backward();
        let g = x.grad().unwrap();
        assert_eq!(g.as_slice().unwrap(), &[8.0, 12.0]);
    }

    #[test]
    fn constants_do_not_track() {
        let x = Tensor::constant(arr1(&[1.0, 2.0]).into_dyn());
        let y = x.mul(&x).sum_all();
        assert!(!y.requires_grad());
        y.backward();
        assert!(x.grad().is_none());
    }

    #[test]
    fn detach_cuts_history() {
        let x = Tensor::param(arr1(&[2.0]).into_dyn());
        let y = x.mul(&x).detach();
        let z = y.mul(&y).sum_all();
        z.backward();
        assert!(x.grad().is_none());
        assert_eq!(z.item(), 16.0);
    }
}
