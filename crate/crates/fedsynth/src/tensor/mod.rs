//! Dense f64 tensors with reverse-mode differentiation.
//!
//! Graphs are define-by-run: every op on a tensor that requires grad records
//! its parents and a backward closure. `backward` walks the tape once in
//! reverse topological order and accumulates gradients additively, so a node
//! consumed k times receives the sum of k contributions.

mod gradcheck;
mod ops;

pub use gradcheck::{grad_check, GradCheckReport};

use std::cell::RefCell;
use std::collections::HashSet;
use std::rc::Rc;

use crate::error::{Error, Result};

type BackwardFn = Box<dyn Fn(&[f64])>;

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    parents: Vec<Tensor>,
    backward_fn: Option<BackwardFn>,
    backward_done: bool,
}

/// Shared handle to a graph node. Cloning is cheap and aliases the node.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<RefCell<Node>>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let n = self.inner.borrow();
        f.debug_struct("Tensor")
            .field("shape", &n.shape)
            .field("requires_grad", &n.requires_grad)
            .finish()
    }
}

thread_local! {
    static MUL_COUNT: std::cell::Cell<u64> = const { std::cell::Cell::new(0) };
}

/// Multiply-counting instrumentation for the flops estimator checks.
pub mod mul_counter {
    pub fn reset() {
        super::MUL_COUNT.with(|c| c.set(0));
    }
    pub fn get() -> u64 {
        super::MUL_COUNT.with(|c| c.get())
    }
    pub(super) fn add(n: u64) {
        super::MUL_COUNT.with(|c| c.set(c.get() + n));
    }
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::invalid(
                "from_vec",
                format!("shape {:?} wants {} elements, got {}", shape, n, data.len()),
            ));
        }
        Ok(Tensor::new(shape, data, false))
    }

    /// A trainable leaf.
    pub fn param(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let t = Tensor::from_vec(shape, data)?;
        t.inner.borrow_mut().requires_grad = true;
        Ok(t)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::new(vec![1], vec![v], false)
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n], false)
    }

    fn new(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Tensor {
        Tensor {
            inner: Rc::new(RefCell::new(Node {
                shape,
                data,
                requires_grad,
                grad: None,
                parents: Vec::new(),
                backward_fn: None,
                backward_done: false,
            })),
        }
    }

    pub(crate) fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward_fn: BackwardFn,
    ) -> Result<Tensor> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op });
        }
        let track = parents.iter().any(|p| p.requires_grad());
        let t = Tensor::new(shape, data, track);
        if track {
            let mut n = t.inner.borrow_mut();
            n.parents = parents;
            n.backward_fn = Some(backward_fn);
        }
        Ok(t)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn data(&self) -> Vec<f64> {
        self.inner.borrow().data.clone()
    }

    /// Scalar value; panics if not a single element.
    pub fn item(&self) -> f64 {
        let n = self.inner.borrow();
        assert_eq!(n.data.len(), 1, "item() on non-scalar tensor");
        n.data[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Same data as a fresh constant leaf; gradient does not flow through.
    pub fn detach(&self) -> Tensor {
        let n = self.inner.borrow();
        Tensor::new(n.shape.clone(), n.data.clone(), false)
    }

    /// In-place SGD step: data -= lr * grad. No-op when no grad accumulated.
    pub fn sgd_step(&self, lr: f64) {
        let mut n = self.inner.borrow_mut();
        if let Some(g) = n.grad.take() {
            for (d, gi) in n.data.iter_mut().zip(g.iter()) {
                *d -= lr * gi;
            }
        }
    }

    /// Overwrite data in place (shapes must match).
    pub fn set_data(&self, data: &[f64]) {
        let mut n = self.inner.borrow_mut();
        assert_eq!(n.data.len(), data.len(), "set_data length mismatch");
        n.data.copy_from_slice(data);
    }

    fn ptr_id(&self) -> usize {
        Rc::as_ptr(&self.inner) as usize
    }

    fn accumulate_grad(&self, g: &[f64]) {
        let mut n = self.inner.borrow_mut();
        if !n.requires_grad {
            return;
        }
        let len = n.data.len();
        let grad = n.grad.get_or_insert_with(|| vec![0.0; len]);
        for (a, b) in grad.iter_mut().zip(g.iter()) {
            *a += b;
        }
    }

    /// Reverse-mode sweep from a scalar loss. Populates `grad` on every
    /// reachable tensor with `requires_grad`.
    pub fn backward(&self) -> Result<()> {
        {
            let mut root = self.inner.borrow_mut();
            if root.data.len() != 1 {
                return Err(Error::NonScalarLoss(root.shape.clone()));
            }
            if root.backward_done {
                return Err(Error::BackwardTwice);
            }
            root.backward_done = true;
        }
        // Iterative postorder DFS over parents.
        let mut topo: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<usize> = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                topo.push(t);
                continue;
            }
            if !visited.insert(t.ptr_id()) {
                continue;
            }
            stack.push((t.clone(), true));
            for p in t.inner.borrow().parents.iter() {
                if !visited.contains(&p.ptr_id()) {
                    stack.push((p.clone(), false));
                }
            }
        }
        self.accumulate_grad(&[1.0]);
        for t in topo.iter().rev() {
            let (grad, has_fn) = {
                let n = t.inner.borrow();
                (n.grad.clone(), n.backward_fn.is_some())
            };
            if let (Some(g), true) = (grad, has_fn) {
                let n = t.inner.borrow();
                (n.backward_fn.as_ref().unwrap())(&g);
            }
        }
        Ok(())
    }
}
