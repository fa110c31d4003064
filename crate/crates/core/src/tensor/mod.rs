//! Dense row-major tensors with define-by-run reverse-mode autodiff.
//!
//! Each operation that consumes a tensor with `requires_grad` set produces a
//! node holding handles to its inputs; the implicit DAG of those handles is
//! the differentiation graph for one forward pass and is dropped with the
//! output. Values are immutable once a tensor participates in a graph —
//! parameter updates happen between passes via [`TensorBase::update_values`].
//! Tensors are cheap `Rc` handles and are confined to one thread per run.

mod autograd;
mod ops;

use std::cell::{Cell, Ref, RefCell};
use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;

pub(crate) use autograd::Op;
pub(crate) use ops::bilinear_axis;

/// Numerically stable scalar sigmoid, shared with non-graph callers.
pub fn sigmoid_scalar<F: Scalar>(x: F) -> F {
    ops::stable_sigmoid(x)
}

pub struct TensorBase<F: Scalar> {
    inner: Rc<Inner<F>>,
}

struct Inner<F: Scalar> {
    shape: Vec<usize>,
    values: RefCell<Vec<F>>,
    requires_grad: Cell<bool>,
    grad: RefCell<Option<Vec<F>>>,
    op: Option<Op<F>>,
}

impl<F: Scalar> Clone for TensorBase<F> {
    fn clone(&self) -> Self {
        TensorBase {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<F: Scalar> std::fmt::Debug for TensorBase<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad.get())
            .field("leaf", &self.inner.op.is_none())
            .finish()
    }
}

impl<F: Scalar> TensorBase<F> {
    fn from_parts(values: Vec<F>, shape: Vec<usize>, requires_grad: bool, op: Option<Op<F>>) -> Self {
        debug_assert_eq!(values.len(), shape.iter().product::<usize>());
        TensorBase {
            inner: Rc::new(Inner {
                shape,
                values: RefCell::new(values),
                requires_grad: Cell::new(requires_grad),
                grad: RefCell::new(None),
                op,
            }),
        }
    }

    /// New leaf tensor; `values.len()` must equal the shape's element count.
    pub fn from_vec(values: Vec<F>, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if values.len() != numel {
            return Err(TensorError::Config {
                op: "from_vec",
                msg: format!("{} values cannot fill shape {shape:?}", values.len()),
            });
        }
        Ok(Self::from_parts(values, shape.to_vec(), false, None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Self::from_parts(vec![F::zero(); numel], shape.to_vec(), false, None)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, F::one())
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        let numel: usize = shape.iter().product();
        Self::from_parts(vec![value; numel], shape.to_vec(), false, None)
    }

    /// Rank-0 constant.
    pub fn scalar(value: F) -> Self {
        Self::from_parts(vec![value], Vec::new(), false, None)
    }

    /// Leaf with elements drawn from `N(0, std²)`.
    pub fn randn<R: Rng>(shape: &[usize], std: F, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let values = (0..numel)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                F::lit(z) * std
            })
            .collect();
        Self::from_parts(values, shape.to_vec(), false, None)
    }

    pub(crate) fn node(values: Vec<F>, shape: Vec<usize>, op: Op<F>) -> Self {
        // A node none of whose inputs need gradients is a plain constant;
        // recording the op would only pin the input graph in memory.
        if op.inputs().iter().any(|t| t.requires_grad()) {
            Self::from_parts(values, shape, true, Some(op))
        } else {
            Self::from_parts(values, shape, false, None)
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn ndim(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    /// Borrows the element buffer (row-major).
    pub fn values(&self) -> Ref<'_, Vec<F>> {
        self.inner.values.borrow()
    }

    pub fn to_vec(&self) -> Vec<F> {
        self.inner.values.borrow().clone()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> F {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.inner.values.borrow()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad.get()
    }

    /// Marks a leaf as trainable (or frozen). Affects graphs built afterwards.
    pub fn set_requires_grad(&self, flag: bool) {
        debug_assert!(self.is_leaf(), "requires_grad is a leaf property");
        self.inner.requires_grad.set(flag);
        if !flag {
            *self.inner.grad.borrow_mut() = None;
        }
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.op.is_none()
    }

    pub fn grad(&self) -> Option<Vec<F>> {
        self.inner.grad.borrow().clone()
    }

    pub fn has_grad(&self) -> bool {
        self.inner.grad.borrow().is_some()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Overwrites the element buffer; must not be called mid-graph.
    pub fn set_values(&self, values: &[F]) {
        let mut buf = self.inner.values.borrow_mut();
        assert_eq!(buf.len(), values.len(), "set_values length mismatch");
        buf.copy_from_slice(values);
    }

    /// In-place mutation of the element buffer (optimizer updates).
    pub fn update_values(&self, f: impl FnOnce(&mut [F])) {
        f(&mut self.inner.values.borrow_mut());
    }

    /// Two tensors are the same if they share storage.
    pub fn ptr_eq(&self, other: &Self) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    pub(crate) fn key(&self) -> usize {
        Rc::as_ptr(&self.inner) as usize
    }

    pub(crate) fn op(&self) -> Option<&Op<F>> {
        self.inner.op.as_ref()
    }

    pub(crate) fn accumulate_grad(&self, delta: &[F]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += *di;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    /// Ensures a zero-initialized grad buffer and hands it to `f`.
    pub(crate) fn with_grad_buf(&self, f: impl FnOnce(&mut [F])) {
        let mut slot = self.inner.grad.borrow_mut();
        let buf = slot.get_or_insert_with(|| vec![F::zero(); self.numel()]);
        f(buf);
    }

    pub(crate) fn seed_grad_one(&self) {
        *self.inner.grad.borrow_mut() = Some(vec![F::one(); self.numel()]);
    }
}
