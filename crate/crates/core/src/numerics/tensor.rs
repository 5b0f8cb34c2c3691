//! The tensor type and graph plumbing.

use std::cell::Cell;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock, RwLockReadGuard};

use super::ops::Op;
use super::{shape_numel, Element};
use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAPH_DISABLED: Cell<bool> = const { Cell::new(false) };
}

/// Runs `f` with graph recording disabled on this thread: operations inside
/// produce plain tensors with no backward nodes. Used by samplers, evaluation,
/// and the finite-difference oracle's re-evaluations.
pub fn without_graph<T>(f: impl FnOnce() -> T) -> T {
    GRAPH_DISABLED.with(|flag| {
        let prev = flag.get();
        flag.set(true);
        let out = f();
        flag.set(prev);
        out
    })
}

pub(crate) fn graph_enabled() -> bool {
    GRAPH_DISABLED.with(|flag| !flag.get())
}

pub(crate) struct Inner<E: Element> {
    pub(crate) id: u64,
    pub(crate) shape: Vec<usize>,
    /// Storage. Written in place only by optimizer updates and explicit
    /// `set_data`, never by graph operations.
    pub(crate) data: RwLock<Vec<E>>,
    /// Accumulated gradient for leaf variables; `None` until first backward.
    pub(crate) grad: Mutex<Option<Vec<E>>>,
    /// Whether this tensor participates in gradient computation.
    pub(crate) tracked: bool,
    /// The operation that produced this tensor (`None` for leaves).
    pub(crate) op: Option<Op<E>>,
}

/// Dense row-major tensor. Cloning is cheap (shared storage).
pub struct Tensor<E: Element> {
    pub(crate) inner: Arc<Inner<E>>,
}

impl<E: Element> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<E: Element> std::fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("tracked", &self.inner.tracked)
            .finish()
    }
}

impl<E: Element> Tensor<E> {
    fn build(data: Vec<E>, shape: &[usize], tracked: bool, op: Option<Op<E>>) -> Result<Self> {
        if data.len() != shape_numel(shape) {
            return Err(Error::dim(format!(
                "tensor data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor {
            inner: Arc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape: shape.to_vec(),
                data: RwLock::new(data),
                grad: Mutex::new(None),
                tracked,
                op,
            }),
        })
    }

    /// Untracked tensor (constants, inputs that need no gradient).
    pub fn from_vec(data: Vec<E>, shape: &[usize]) -> Result<Self> {
        Self::build(data, shape, false, None)
    }

    /// Tracked leaf variable: receives a gradient on backward.
    pub fn var(data: Vec<E>, shape: &[usize]) -> Result<Self> {
        Self::build(data, shape, true, None)
    }

    pub(crate) fn from_op(data: Vec<E>, shape: &[usize], op: Op<E>) -> Result<Self> {
        // Graph recording already checked by callers via `Op::any_tracked`.
        Self::build(data, shape, true, Some(op))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::from_vec(vec![E::ZERO; shape_numel(shape)], shape)
            .expect("zeros: length matches by construction")
    }

    pub fn full(value: E, shape: &[usize]) -> Self {
        Tensor::from_vec(vec![value; shape_numel(shape)], shape)
            .expect("full: length matches by construction")
    }

    pub fn scalar(value: E) -> Self {
        Tensor::from_vec(vec![value], &[1]).expect("scalar")
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        shape_numel(&self.inner.shape)
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn tracked(&self) -> bool {
        self.inner.tracked
    }

    /// True for a tracked tensor with no producing op (a variable).
    pub fn is_leaf_var(&self) -> bool {
        self.inner.tracked && self.inner.op.is_none()
    }

    /// Read access to the storage.
    pub fn data(&self) -> RwLockReadGuard<'_, Vec<E>> {
        self.inner.data.read().expect("tensor storage poisoned")
    }

    pub fn to_vec(&self) -> Vec<E> {
        self.data().clone()
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> Result<E> {
        if self.numel() != 1 {
            return Err(Error::dim(format!(
                "item() requires a single-element tensor, shape is {:?}",
                self.shape()
            )));
        }
        Ok(self.data()[0])
    }

    /// Overwrites storage in place (parameter updates). Length must match.
    pub fn set_data(&self, new: Vec<E>) -> Result<()> {
        if new.len() != self.numel() {
            return Err(Error::dim(format!(
                "set_data: length {} does not match shape {:?}",
                new.len(),
                self.shape()
            )));
        }
        *self.inner.data.write().expect("tensor storage poisoned") = new;
        Ok(())
    }

    /// Applies `f` to the storage in place (optimizer steps).
    pub fn update_data(&self, f: impl FnOnce(&mut [E])) {
        let mut guard = self.inner.data.write().expect("tensor storage poisoned");
        f(&mut guard);
    }

    /// Accumulated gradient of a leaf variable, if backward has reached it.
    pub fn grad(&self) -> Option<Vec<E>> {
        self.inner.grad.lock().expect("grad poisoned").clone()
    }

    /// Clears the accumulated gradient.
    pub fn zero_grad(&self) {
        *self.inner.grad.lock().expect("grad poisoned") = None;
    }

    pub(crate) fn accumulate_grad(&self, g: &[E]) {
        let mut guard = self.inner.grad.lock().expect("grad poisoned");
        match guard.as_mut() {
            Some(existing) => {
                for (e, &gi) in existing.iter_mut().zip(g) {
                    *e += gi;
                }
            }
            None => *guard = Some(g.to_vec()),
        }
    }

    /// A detached copy: same values, no graph history, untracked.
    pub fn detach(&self) -> Tensor<E> {
        Tensor::from_vec(self.to_vec(), self.shape()).expect("detach: shape preserved")
    }

    /// True if every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }
}
