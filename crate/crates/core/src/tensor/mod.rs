//! Reverse-mode differentiable array engine.
//!
//! A `Tensor` is an immutable n-dimensional float array plus an optional
//! gradient buffer. Operations build a DAG as they execute (define-by-run);
//! [`backward`](Tensor::backward) replays the recorded graph in reverse
//! topological order, accumulating gradients additively into every
//! `requires_grad` leaf. Element type is generic: `f32` for training,
//! `f64` for finite-difference gradient checking.
//!
//! Data buffers are immutable after creation — the optimizer swaps whole
//! parameter tensors rather than mutating in place. Only the grad slot is
//! interior-mutable.

mod conv;
mod gradcheck;
mod io;
mod ops;
mod tape;

pub use conv::conv2d;
pub use gradcheck::{grad_check, GradCheckFailure, GradCheckReport};
pub use io::{read_ten, write_ten};
pub use tape::Tape;

use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::distributions::{Distribution, Uniform};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Element dtype tag, as stored in the ".ten" binary header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            c => Err(Error::Parse(format!("unknown dtype code {c}"))),
        }
    }
}

/// Float element for tensor storage. Implemented for `f32` and `f64`.
pub trait Element:
    num_traits::Float
    + num_traits::NumAssign
    + std::iter::Sum
    + fmt::Debug
    + fmt::Display
    + Copy
    + 'static
{
    const DTYPE: Dtype;
    const BYTES: usize;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Element for f32 {
    const DTYPE: Dtype = Dtype::F32;
    const BYTES: usize = 4;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4-byte slice"))
    }
}

impl Element for f64 {
    const DTYPE: Dtype = Dtype::F64;
    const BYTES: usize = 8;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8-byte slice"))
    }
}

static NEXT_NODE_ID: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// True while operations should record the backward graph.
pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Scope guard disabling graph recording; restores the previous mode on drop.
pub struct NoGradGuard {
    prev: bool,
}

impl NoGradGuard {
    #[allow(clippy::new_without_default)]
    pub fn new() -> Self {
        let prev = GRAD_ENABLED.with(|g| g.replace(false));
        NoGradGuard { prev }
    }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        let prev = self.prev;
        GRAD_ENABLED.with(|g| g.set(prev));
    }
}

/// Run `f` with graph recording disabled (inference mode).
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let _guard = NoGradGuard::new();
    f()
}

/// Vector-Jacobian product: upstream gradient -> one gradient per parent,
/// in parent order.
pub(crate) type Vjp<E> = Box<dyn Fn(&[E]) -> Vec<Vec<E>>>;

pub(crate) struct Node<E: Element> {
    pub(crate) id: u64,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<E>,
    pub(crate) requires_grad: bool,
    pub(crate) grad: RefCell<Option<Vec<E>>>,
    pub(crate) parents: Vec<Tensor<E>>,
    pub(crate) vjp: Option<Vjp<E>>,
}

/// Immutable n-d float array with an optional gradient slot.
///
/// Cloning is cheap (reference-counted); two clones share data and grad.
pub struct Tensor<E: Element> {
    pub(crate) node: Rc<Node<E>>,
}

impl<E: Element> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor {
            node: Rc::clone(&self.node),
        }
    }
}

impl<E: Element> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Tensor<{:?}>{:?} requires_grad={}",
            E::DTYPE,
            self.node.shape,
            self.node.requires_grad
        )
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn fmt_shape(shape: &[usize]) -> String {
    format!("{shape:?}")
}

impl<E: Element> Tensor<E> {
    fn make(shape: Vec<usize>, data: Vec<E>, requires_grad: bool, parents: Vec<Tensor<E>>, vjp: Option<Vjp<E>>) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len());
        Tensor {
            node: Rc::new(Node {
                id: NEXT_NODE_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                requires_grad,
                grad: RefCell::new(None),
                parents,
                vjp,
            }),
        }
    }

    /// New constant tensor; errors if `shape` does not account for `data.len()`.
    pub fn from_vec(shape: Vec<usize>, data: Vec<E>) -> Result<Self> {
        if numel_of(&shape) != data.len() {
            return Err(Error::Shape(format!(
                "shape {} implies {} elements, data has {}",
                fmt_shape(&shape),
                numel_of(&shape),
                data.len()
            )));
        }
        Ok(Self::make(shape, data, false, Vec::new(), None))
    }

    /// New trainable leaf (requires_grad = true).
    pub fn param(shape: Vec<usize>, data: Vec<E>) -> Result<Self> {
        let t = Self::from_vec(shape, data)?;
        Ok(Self::make(t.node.shape.clone(), t.node.data.clone(), true, Vec::new(), None))
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel_of(&shape);
        Self::make(shape, vec![E::zero(); n], false, Vec::new(), None)
    }

    pub fn full(shape: Vec<usize>, value: E) -> Self {
        let n = numel_of(&shape);
        Self::make(shape, vec![value; n], false, Vec::new(), None)
    }

    /// Rank-0 scalar.
    pub fn scalar(value: E) -> Self {
        Self::make(Vec::new(), vec![value], false, Vec::new(), None)
    }

    /// Leaf with entries drawn from U(-bound, bound).
    pub fn uniform(shape: Vec<usize>, bound: f64, rng: &mut ChaCha8Rng) -> Self {
        let dist = Uniform::new_inclusive(-bound, bound);
        let n = numel_of(&shape);
        let data = (0..n).map(|_| E::from_f64(dist.sample(rng))).collect();
        Self::make(shape, data, false, Vec::new(), None)
    }

    /// Trainable leaf initialized U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    pub fn init_projection(shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self::init_uniform(shape, bound, rng)
    }

    /// Trainable leaf initialized U(-bound, bound).
    pub fn init_uniform(shape: Vec<usize>, bound: f64, rng: &mut ChaCha8Rng) -> Self {
        let t = Self::uniform(shape, bound, rng);
        Self::make(t.node.shape.clone(), t.node.data.clone(), true, Vec::new(), None)
    }

    /// New leaf sharing this tensor's values but with requires_grad = true.
    /// Detached from any recorded history.
    pub fn requiring_grad(&self) -> Self {
        Self::make(self.node.shape.clone(), self.node.data.clone(), true, Vec::new(), None)
    }

    /// New constant leaf with the same values, detached from history.
    pub fn detached(&self) -> Self {
        Self::make(self.node.shape.clone(), self.node.data.clone(), false, Vec::new(), None)
    }

    /// Leaf with identical values; used by the optimizer to publish an
    /// updated parameter.
    pub fn param_like(&self, data: Vec<E>) -> Result<Self> {
        if data.len() != self.node.data.len() {
            return Err(Error::Shape(format!(
                "replacement data has {} elements, parameter holds {}",
                data.len(),
                self.node.data.len()
            )));
        }
        Ok(Self::make(self.node.shape.clone(), data, true, Vec::new(), None))
    }

    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<E>,
        parents: Vec<Tensor<E>>,
        vjp: impl Fn(&[E]) -> Vec<Vec<E>> + 'static,
    ) -> Self {
        let track = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        if track {
            Self::make(shape, data, true, parents, Some(Box::new(vjp)))
        } else {
            Self::make(shape, data, false, Vec::new(), None)
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn rank(&self) -> usize {
        self.node.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.node.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.node.data
    }

    /// Value of a rank-0 or single-element tensor.
    pub fn item(&self) -> E {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar");
        self.node.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    /// Accumulated gradient, if backward has reached this tensor.
    pub fn grad(&self) -> Option<Vec<E>> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_grad(&self, g: &[E]) {
        debug_assert_eq!(g.len(), self.numel());
        let mut slot = self.node.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += *b;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Reverse-mode gradient accumulation from a scalar loss.
    ///
    /// Every `requires_grad` tensor reachable from `self` receives (or
    /// accumulates into) its grad buffer. Each recorded node is visited
    /// exactly once, in reverse topological order.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {}",
                fmt_shape(self.shape())
            )));
        }
        let tape = Tape::build(self);
        self.accumulate_grad(&[E::one()]);
        tape.reverse_accumulate();
        Ok(())
    }

    /// Identical values rounded through `f64`, in the target element type.
    /// Exact for f32 -> f64.
    pub fn cast<T: Element>(&self) -> Tensor<T> {
        let data = self.data().iter().map(|v| T::from_f64(v.as_f64())).collect();
        Tensor::make(self.node.shape.clone(), data, false, Vec::new(), None)
    }

    /// Row-major index helpers for rank-2 tensors.
    pub fn rows(&self) -> usize {
        self.node.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.node.shape[1]
    }

    pub(crate) fn check_rank(&self, rank: usize, ctx: &str) -> Result<()> {
        if self.rank() != rank {
            return Err(Error::Shape(format!(
                "{ctx}: expected rank {rank}, got shape {}",
                fmt_shape(self.shape())
            )));
        }
        Ok(())
    }

    /// True if every entry is finite.
    pub fn all_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }
}

/// Decompose a shape around `axis` as (outer, len, inner) for row-major
/// slice iteration.
pub(crate) fn axis_view(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Index(format!(
            "axis {axis} out of range for shape {}",
            fmt_shape(shape)
        )));
    }
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    Ok((outer, len, inner))
}
