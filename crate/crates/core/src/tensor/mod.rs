//! Dense `f64` tensors with reverse-mode automatic differentiation.
//!
//! Every operation that consumes a tensor tracking gradients records a node
//! holding its parents and a backward closure. Node ids are drawn from a
//! global counter, so creation order is a valid topological order and
//! [`Tensor::backward`] only has to sort the reachable set by id.
//!
//! Layout is row-major; 4-D tensors are NCHW. There is no implicit
//! broadcasting: elementwise ops require equal shapes or an explicit scalar
//! operand, and [`Tensor::broadcast_to`] must be called where expansion is
//! intended.

mod check;
pub(crate) mod counter;
pub(crate) mod kernels;
mod ops;
mod shape;
mod tape;

use std::cell::{Cell, RefCell};
use std::collections::hash_map::DefaultHasher;
use std::fmt;
use std::hash::Hasher;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

pub use counter::{count_ops, OpCounts};
pub use check::{finite_diff_check, finite_diff_check_coords, FiniteDiffReport};
pub use ops::{ElementwiseOp, Operand, Reduction};
pub use shape::Shape;
pub use tape::GraphTape;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("axis {axis} out of range for rank {rank}")]
    Axis { axis: usize, rank: usize },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("non-finite value: {0}")]
    Numeric(String),
    #[error("invalid state: {0}")]
    State(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Gradient of one backward step with respect to each parent, in parent
/// order. `None` means "no contribution".
pub type ParentGrads = Vec<Option<Vec<f64>>>;

/// Backward rule of a recorded op: maps the upstream gradient of the output
/// to gradients of the parents.
pub type BackwardFn = Box<dyn Fn(&[f64]) -> ParentGrads + Send + Sync>;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static RELU_PROBE: RefCell<Option<DefaultHasher>> = const { RefCell::new(None) };
}

pub(crate) struct GradFn {
    pub(crate) op: &'static str,
    pub(crate) parents: Vec<Tensor>,
    pub(crate) backward: BackwardFn,
}

pub(crate) struct Inner {
    pub(crate) id: u64,
    pub(crate) shape: Shape,
    pub(crate) data: Vec<f64>,
    pub(crate) requires_grad: bool,
    pub(crate) grad: Mutex<Option<Vec<f64>>>,
    pub(crate) grad_fn: Option<GradFn>,
}

/// Reference-counted handle to an immutable tensor value and its graph node.
#[derive(Clone)]
pub struct Tensor(pub(crate) Arc<Inner>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("Tensor");
        s.field("shape", &self.dims()).field("requires_grad", &self.requires_grad());
        if self.numel() <= 16 {
            s.field("data", &self.data());
        }
        s.finish()
    }
}

/// Disables graph recording on this thread until dropped.
pub struct NoGradGuard {
    prev: bool,
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.prev));
    }
}

pub fn no_grad() -> NoGradGuard {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    NoGradGuard { prev }
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Runs `f` while hashing the on/off pattern of every relu evaluated inside
/// it. Two evaluations with different hashes crossed a relu kink.
pub fn with_relu_probe<T>(f: impl FnOnce() -> T) -> (T, u64) {
    let prev = RELU_PROBE.with(|p| p.replace(Some(DefaultHasher::new())));
    let out = f();
    let hash = RELU_PROBE.with(|p| {
        let h = p.replace(prev).expect("probe installed above");
        h.finish()
    });
    (out, hash)
}

pub(crate) fn probe_relu(input: &[f64]) {
    RELU_PROBE.with(|p| {
        if let Some(h) = p.borrow_mut().as_mut() {
            for chunk in input.chunks(64) {
                let mut bits = 0u64;
                for (i, &v) in chunk.iter().enumerate() {
                    if v > 0.0 {
                        bits |= 1 << i;
                    }
                }
                h.write_u64(bits);
            }
        }
    });
}

impl Tensor {
    fn from_parts(shape: Shape, data: Vec<f64>, requires_grad: bool, grad_fn: Option<GradFn>) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        Tensor(Arc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            grad: Mutex::new(None),
            grad_fn,
        }))
    }

    pub fn new(data: Vec<f64>, dims: &[usize]) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != data.len() {
            return Err(TensorError::Shape(format!(
                "{} values do not fill shape {:?}",
                data.len(),
                dims
            )));
        }
        Ok(Self::from_parts(shape, data, false, None))
    }

    /// Leaf tensor that accumulates gradients.
    pub fn param(data: Vec<f64>, dims: &[usize]) -> Result<Self> {
        Ok(Self::new(data, dims)?.into_param())
    }

    pub fn from_shape(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if shape.numel() != data.len() {
            return Err(TensorError::Shape(format!(
                "{} values do not fill shape {:?}",
                data.len(),
                shape.dims()
            )));
        }
        Ok(Self::from_parts(shape, data, false, None))
    }

    pub fn full(dims: &[usize], value: f64) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let n = shape.numel();
        Ok(Self::from_parts(shape, vec![value; n], false, None))
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        Self::full(dims, 0.0)
    }

    pub fn ones(dims: &[usize]) -> Result<Self> {
        Self::full(dims, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(Shape::scalar(), vec![value], false, None)
    }

    /// Fresh leaf with the same values that tracks gradients.
    pub fn into_param(self) -> Self {
        match Arc::try_unwrap(self.0) {
            Ok(inner) =>Self::from_parts(inner.shape, inner.data, true, None),
            Err(arc) => Self::from_parts(arc.shape.clone(), arc.data.clone(), true, None),
        }
    }

    /// Copy of the values cut off from the graph.
    pub fn detach(&self) -> Self {
        Self::from_parts(self.0.shape.clone(), self.0.data.clone(), false, None)
    }

    /// Records an op output. Public so that other modules can define fused
    /// ops with hand-written backward rules.
    pub fn from_op(
        op: &'static str,
        shape: Shape,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: impl Fn(&[f64]) -> ParentGrads + Send + Sync + 'static,
    ) -> Self {
        let track = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        if track {
            let grad_fn = GradFn {
                op,
                parents,
                backward: Box::new(backward),
            };
            Self::from_parts(shape, data, true, Some(grad_fn))
        } else {
            Self::from_parts(shape, data, false, None)
        }
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &Shape {
        &self.0.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.0.shape.dims()
    }

    pub fn rank(&self) -> usize {
        self.0.shape.rank()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.grad_fn.is_none()
    }

    pub fn op_name(&self) -> Option<&'static str> {
        self.0.grad_fn.as_ref().map(|g| g.op)
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "item() on tensor with {} elements",
                self.numel()
            )));
        }
        Ok(self.0.data[0])
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.lock().expect("grad lock").clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock") = None;
    }

    pub(crate) fn accumulate_grad(&self, g: &[f64]) {
        let mut slot = self.0.grad.lock().expect("grad lock");
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Reverse sweep from a single-element root. Leaf gradients accumulate
    /// across calls until [`Tensor::zero_grad`].
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.dims()
            )));
        }
        GraphTape::record(self).run_backward(self)
    }
}
