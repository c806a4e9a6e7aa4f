//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! The computation graph is define-by-run: every differentiable operation
//! produces a fresh tensor holding handles to its inputs plus a backward
//! closure, so the "tape" is rebuilt on each forward pass and dropped with
//! the loss. Gradients accumulate additively, which makes multi-use of a
//! tensor inside one graph correct by construction.
//!
//! Graphs are confined to one thread (`Rc` + `RefCell`); independent
//! training runs may execute on separate threads with no shared state.

mod gemm;
mod gradcheck;
mod ops;

pub use gradcheck::finite_diff_check;

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

/// Probability clamp used inside every log / KL / cross-entropy path,
/// shared with the scalar oracles so frozen expected values line up.
pub const PROB_EPS: f64 = 1e-8;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` with gradient recording disabled on this thread. Ops executed
/// inside produce constants, so evaluation passes build no graph.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

type BackwardFn = Box<dyn Fn(&[f64])>;

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    parents: Vec<Tensor>,
    backward_fn: Option<BackwardFn>,
}

/// Handle to an immutable n-dimensional f64 array, optionally recorded on
/// the autodiff tape. Cloning is cheap (reference count bump).
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Constant tensor (never receives gradient).
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        if numel(&shape) != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel(&shape),
                data.len()
            )));
        }
        Ok(Self::build(shape, data, false, Vec::new(), None))
    }

    /// Leaf tensor that participates in autodiff (a trainable parameter or
    /// an input under gradient check).
    pub fn param(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        if numel(&shape) != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel(&shape),
                data.len()
            )));
        }
        Ok(Self::build(shape, data, true, Vec::new(), None))
    }

    pub fn scalar(v: f64) -> Tensor {
        Self::build(vec![1], vec![v], false, Vec::new(), None)
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n = numel(&shape);
        Self::build(shape, vec![0.0; n], false, Vec::new(), None)
    }

    pub fn full(shape: Vec<usize>, v: f64) -> Tensor {
        let n = numel(&shape);
        Self::build(shape, vec![v; n], false, Vec::new(), None)
    }

    /// Records a new operation result. When grad is disabled or no parent
    /// requires grad, parents and the backward rule are dropped and the
    /// result is a plain constant.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: &[&Tensor],
        backward: impl Fn(&[f64]) + 'static,
    ) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        let rg = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        if rg {
            let parents = parents.iter().map(|p| (*p).clone()).collect();
            Self::build(shape, data, true, parents, Some(Box::new(backward)))
        } else {
            Self::build(shape, data, false, Vec::new(), None)
        }
    }

    fn build(
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        parents: Vec<Tensor>,
        backward_fn: Option<BackwardFn>,
    ) -> Tensor {
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                requires_grad,
                grad: RefCell::new(None),
                parents,
                backward_fn,
            }),
        }
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.inner.data
    }

    pub fn len(&self) -> usize {
        self.inner.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.len(), 1);
        self.inner.data[0]
    }

    /// Copy of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    /// Removes and returns the accumulated gradient.
    pub fn take_grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow_mut().take()
    }

    pub fn clear_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Same values, off the tape: no parents, no gradient, ever.
    pub fn detach(&self) -> Tensor {
        Self::build(
            self.inner.shape.clone(),
            self.inner.data.clone(),
            false,
            Vec::new(),
            None,
        )
    }

    pub(crate) fn accumulate_grad(&self, g: &[f64]) {
        self.accumulate_grad_with(|acc| {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += *b;
            }
        });
    }

    /// Ensures the gradient slot exists (zero-filled) and lets `f` add its
    /// contribution in place. No-op on tensors outside the tape, so a
    /// detached tensor never receives gradient.
    pub(crate) fn accumulate_grad_with(&self, f: impl FnOnce(&mut [f64])) {
        if !self.inner.requires_grad {
            return;
        }
        let mut slot = self.inner.grad.borrow_mut();
        let acc = slot.get_or_insert_with(|| vec![0.0; self.inner.data.len()]);
        f(acc);
    }

    /// Reverse-mode sweep from a scalar loss. Every reachable tensor with
    /// `requires_grad` ends up holding d(loss)/d(tensor); contributions from
    /// multiple uses sum.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(Error::NonScalarLoss(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Err(Error::OffTape);
        }
        let order = self.topo_order();
        self.accumulate_grad(&[1.0]);
        // `order` is post-order (ancestors first), so the reverse walk visits
        // every node after all of its consumers: each gradient is complete
        // before it is propagated, and each node is processed exactly once.
        for t in order.iter().rev() {
            let g = t.inner.grad.borrow().clone();
            if let (Some(g), Some(f)) = (g, t.inner.backward_fn.as_ref()) {
                f(&g);
            }
        }
        Ok(())
    }

    fn topo_order(&self) -> Vec<Tensor> {
        enum Frame {
            Enter(Tensor),
            Exit(Tensor),
        }
        let mut order = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack = vec![Frame::Enter(self.clone())];
        while let Some(frame) = stack.pop() {
            match frame {
                Frame::Enter(t) => {
                    if !visited.insert(t.id()) {
                        continue;
                    }
                    stack.push(Frame::Exit(t.clone()));
                    for p in &t.inner.parents {
                        if p.requires_grad() && !visited.contains(&p.id()) {
                            stack.push(Frame::Enter(p.clone()));
                        }
                    }
                }
                Frame::Exit(t) => order.push(t),
            }
        }
        order
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_of_sum_is_ones() {
        let x = Tensor::param(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let loss = x.reduce_sum(None).unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_of_sum_of_squares_is_2x() {
        let x = Tensor::param(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let loss = x.mul(&x).unwrap().reduce_sum(None).unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, -4.0, 1.0]);
    }

    #[test]
    fn multi_use_gradients_sum_over_paths() {
        // loss = sum(x + x) => grad = 2 per element.
        let x = Tensor::param(vec![2], vec![3.0, 4.0]).unwrap();
        let loss = x.add(&x).unwrap().reduce_sum(None).unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let x = Tensor::param(vec![2], vec![3.0, 4.0]).unwrap();
        let d = x.detach();
        assert_eq!(d.data(), x.data());
        assert!(!d.requires_grad());
        // loss = sum(x * detach(x)): grad wrt x is the values of x, not 2x.
        let loss = x.mul(&d).unwrap().reduce_sum(None).unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![3.0, 4.0]);
        assert!(d.grad().is_none());
    }

    #[test]
    fn backward_on_detached_tensor_errors() {
        let x = Tensor::new(vec![1], vec![2.0]).unwrap();
        assert!(matches!(x.backward(), Err(Error::OffTape)));
    }

    #[test]
    fn backward_on_non_scalar_errors() {
        let x = Tensor::param(vec![2], vec![1.0, 2.0]).unwrap();
        let y = x.add(&x).unwrap();
        assert!(matches!(y.backward(), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn no_grad_suppresses_graph() {
        let x = Tensor::param(vec![2], vec![1.0, 2.0]).unwrap();
        let y = no_grad(|| x.mul(&x).unwrap());
        assert!(!y.requires_grad());
    }
}
