//! Dense-array numeric core with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable row-major array. Operations on tensors that
//! require gradients record themselves (the computation record is the chain
//! of [`Op`] nodes hanging off each result), and [`Tensor::backward`] replays
//! that record in reverse topological order, accumulating gradients into
//! every `requires_grad` ancestor. Graphs are confined to one thread.

pub mod check;
pub mod io;
pub mod kernels;
mod ops;

pub use ops::Op;

use std::cell::RefCell;
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::{Error, Real, Result};

/// Default clamp for `log`: arguments below this are treated as this value,
/// so one-hot predictions produce finite losses.
pub const LOG_EPS: Real = 1e-12;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

pub(crate) struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: Vec<Real>,
    grad: RefCell<Option<Vec<Real>>>,
    requires_grad: bool,
    op: Option<Op>,
}

/// Immutable dense tensor; cheap to clone (shared storage).
#[derive(Clone)]
pub struct Tensor {
    pub(crate) inner: Rc<Inner>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor(shape={:?}", self.shape())?;
        if self.len() <= 8 {
            write!(f, ", data={:?}", self.data())?;
        }
        write!(f, ", grad={})", self.inner.requires_grad)
    }
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() || shape.iter().any(|&e| e == 0) {
        return Err(Error::InvalidArg(format!(
            "shape extents must be positive, got {shape:?}"
        )));
    }
    let numel: usize = shape.iter().product();
    if numel != len {
        return Err(Error::InvalidArg(format!(
            "shape {shape:?} does not match data length {len}"
        )));
    }
    Ok(())
}

impl Tensor {
    pub(crate) fn make(data: Vec<Real>, shape: Vec<usize>, requires_grad: bool, op: Option<Op>) -> Tensor {
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                grad: RefCell::new(None),
                requires_grad,
                op,
            }),
        }
    }

    pub fn from_vec(data: Vec<Real>, shape: &[usize]) -> Result<Tensor> {
        check_shape(shape, data.len())?;
        Ok(Tensor::make(data, shape.to_vec(), false, None))
    }

    /// Leaf tensor that participates in gradient computation.
    pub fn param(data: Vec<Real>, shape: &[usize]) -> Result<Tensor> {
        check_shape(shape, data.len())?;
        Ok(Tensor::make(data, shape.to_vec(), true, None))
    }

    pub fn scalar(x: Real) -> Tensor {
        Tensor::make(vec![x], vec![1], false, None)
    }

    pub fn zeros(shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        Tensor::from_vec(vec![0.0; numel], shape)
    }

    pub fn full(shape: &[usize], x: Real) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        Tensor::from_vec(vec![x; numel], shape)
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn len(&self) -> usize {
        self.inner.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.data.is_empty()
    }

    pub fn data(&self) -> &[Real] {
        &self.inner.data
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Scalar value; panics if the tensor is not a single element.
    pub fn item(&self) -> Real {
        assert_eq!(self.len(), 1, "item() on non-scalar tensor");
        self.inner.data[0]
    }

    pub fn grad(&self) -> Option<Vec<Real>> {
        self.inner.grad.borrow().clone()
    }

    pub(crate) fn op(&self) -> Option<&Op> {
        self.inner.op.as_ref()
    }

    pub fn clear_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Leaf copy detached from any recorded operations.
    pub fn detach(&self) -> Tensor {
        Tensor::make(self.inner.data.clone(), self.inner.shape.clone(), false, None)
    }

    /// Leaf copy of this tensor's data that requires gradients.
    pub fn to_param(&self) -> Tensor {
        Tensor::make(self.inner.data.clone(), self.inner.shape.clone(), true, None)
    }

    pub fn all_finite(&self) -> bool {
        self.inner.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn accum_grad(&self, g: &[Real]) {
        debug_assert_eq!(g.len(), self.len());
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => {
                for (a, &b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Reverse-mode sweep from a scalar loss. Gradients accumulate (sum)
    /// into every `requires_grad` ancestor; running it twice on the same
    /// loss without clearing gradients is an error.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(Error::NonScalarLoss(self.shape().to_vec()));
        }
        if self.inner.grad.borrow().is_some() {
            return Err(Error::BackwardTwice);
        }
        let order = self.topo_order();
        self.accum_grad(&[1.0]);
        for node in order.iter().rev() {
            let Some(op) = &node.inner.op else { continue };
            let g = node
                .inner
                .grad
                .borrow()
                .clone()
                .expect("topological order guarantees a gradient");
            for (input, gin) in op.vjp(node, &g) {
                input.accum_grad(&gin);
            }
        }
        Ok(())
    }

    /// Post-order (inputs before consumers) over the requires_grad subgraph.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut seen: HashSet<u64> = HashSet::new();
        // (node, expanded) pairs; expanded nodes are emitted on second visit.
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !t.inner.requires_grad || !seen.insert(t.inner.id) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(op) = &t.inner.op {
                for input in op.inputs() {
                    stack.push((input.clone(), false));
                }
            }
        }
        order
    }
}
