//! Minimal dense tensor algebra with reverse-mode automatic differentiation.
//!
//! Tensors are row-major `Real` buffers with a shape vector and an optional
//! gradient of the same shape. A [`Tape`] records every differentiable op; a
//! single [`Tape::backward`] call replays the records in reverse and
//! accumulates gradients into every reachable tensor marked `requires_grad`.
//! Gradients keep accumulating across backward calls until explicitly zeroed,
//! which is what gradient accumulation over micro-batches relies on.
//!
//! Every op validates that its output is finite and fails otherwise, so NaNs
//! and infinities never propagate silently.

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use crate::Real;

pub mod gemm;
pub mod gradcheck;
pub mod ops;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward called on an empty tape")]
    EmptyTape,
    #[error("softmax row {row} is fully masked")]
    FullyMaskedRow { row: usize },
    #[error("index {index} out of range for extent {extent} in {op}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        extent: usize,
    },
    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;

struct Inner {
    shape: Vec<usize>,
    data: Vec<Real>,
    grad: Option<Vec<Real>>,
    requires_grad: bool,
}

/// Cheap-clone handle to a dense tensor. Cloning shares the buffer; use
/// [`Tensor::to_vec`] for a value snapshot.
#[derive(Clone)]
pub struct Tensor(Rc<RefCell<Inner>>);

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.0.borrow();
        f.debug_struct("Tensor")
            .field("shape", &inner.shape)
            .field("requires_grad", &inner.requires_grad)
            .finish()
    }
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn new(shape: Vec<usize>, data: Vec<Real>, requires_grad: bool) -> Result<Tensor> {
        if numel_of(&shape) != data.len() || shape.iter().any(|&e| e == 0) {
            return Err(TensorError::ShapeMismatch {
                op: "new",
                detail: format!("shape {:?} does not describe {} values", shape, data.len()),
            });
        }
        Ok(Tensor(Rc::new(RefCell::new(Inner {
            shape,
            data,
            grad: None,
            requires_grad,
        }))))
    }

    /// Build a constant tensor from row-major data.
    pub fn from_vec(shape: &[usize], data: Vec<Real>) -> Result<Tensor> {
        let t = Tensor::new(shape.to_vec(), data, false)?;
        t.check_finite("from_vec")?;
        Ok(t)
    }

    /// Build a trainable parameter from row-major data.
    pub fn param(shape: &[usize], data: Vec<Real>) -> Result<Tensor> {
        let t = Tensor::new(shape.to_vec(), data, true)?;
        t.check_finite("param")?;
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::new(shape.to_vec(), vec![0.0; numel_of(shape)], false).expect("zeros")
    }

    pub fn full(shape: &[usize], value: Real) -> Tensor {
        Tensor::new(shape.to_vec(), vec![value; numel_of(shape)], false).expect("full")
    }

    pub fn scalar_value(value: Real) -> Tensor {
        Tensor::full(&[1], value)
    }

    /// Gaussian-initialised parameter with standard deviation `std`.
    pub fn randn_param(rng: &mut impl rand::Rng, shape: &[usize], std: Real) -> Tensor {
        let data = (0..numel_of(shape))
            .map(|_| {
                // Box-Muller keeps us independent of distribution crates.
                let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                let u2: f64 = rng.gen::<f64>();
                let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                z as Real * std
            })
            .collect();
        Tensor::new(shape.to_vec(), data, true).expect("randn_param")
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.0.borrow().data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.borrow().requires_grad
    }

    pub fn set_requires_grad(&self, flag: bool) {
        self.0.borrow_mut().requires_grad = flag;
    }

    /// Borrow the underlying data. Keep the guard short-lived.
    pub fn data(&self) -> Ref<'_, [Real]> {
        Ref::map(self.0.borrow(), |inner| inner.data.as_slice())
    }

    pub fn to_vec(&self) -> Vec<Real> {
        self.0.borrow().data.clone()
    }

    /// Extract the single value of a scalar tensor.
    pub fn scalar(&self) -> Result<Real> {
        let inner = self.0.borrow();
        if inner.data.len() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "scalar",
                detail: format!("expected 1 element, shape is {:?}", inner.shape),
            });
        }
        Ok(inner.data[0])
    }

    /// Replace the data in place (same length). Used by the optimizer.
    pub fn set_data(&self, data: Vec<Real>) -> Result<()> {
        let mut inner = self.0.borrow_mut();
        if data.len() != inner.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "set_data",
                detail: format!("expected {} values, got {}", inner.data.len(), data.len()),
            });
        }
        inner.data = data;
        Ok(())
    }

    /// Snapshot of the accumulated gradient, if any backward has reached this
    /// tensor since the last [`Tensor::zero_grad`].
    pub fn grad(&self) -> Option<Vec<Real>> {
        self.0.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.0.borrow_mut().grad = None;
    }

    /// Add `delta` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&self, delta: &[Real]) {
        let mut inner = self.0.borrow_mut();
        debug_assert_eq!(delta.len(), inner.data.len());
        match &mut inner.grad {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += *di;
                }
            }
            None => inner.grad = Some(delta.to_vec()),
        }
    }

    /// Scale the accumulated gradient in place (gradient averaging).
    pub fn scale_grad(&self, factor: Real) {
        if let Some(g) = &mut self.0.borrow_mut().grad {
            for gi in g.iter_mut() {
                *gi *= factor;
            }
        }
    }

    fn check_finite(&self, op: &'static str) -> Result<()> {
        if self.0.borrow().data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(TensorError::NonFinite { op })
        }
    }

    /// Two tensors are the same node iff their handles share storage.
    pub fn same_node(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }
}

struct TapeEntry {
    #[allow(dead_code)]
    op: &'static str,
    backward: Box<dyn FnOnce()>,
}

/// Ordered record of executed differentiable ops. Confined to one thread; a
/// fresh tape is created per forward/backward pass and consumed by
/// [`Tape::backward`].
pub struct Tape {
    entries: RefCell<Vec<TapeEntry>>,
    active: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    /// A recording tape for a training pass.
    pub fn new() -> Tape {
        Tape {
            entries: RefCell::new(Vec::new()),
            active: true,
        }
    }

    /// A non-recording tape for inference.
    pub fn inactive() -> Tape {
        Tape {
            entries: RefCell::new(Vec::new()),
            active: false,
        }
    }

    pub fn is_active(&self) -> bool {
        self.active
    }

    pub fn len(&self) -> usize {
        self.entries.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.borrow().is_empty()
    }

    pub(crate) fn record(&self, op: &'static str, backward: impl FnOnce() + 'static) {
        if self.active {
            self.entries.borrow_mut().push(TapeEntry {
                op,
                backward: Box::new(backward),
            });
        }
    }

    /// Run reverse-mode accumulation from a scalar loss. Consumes the tape's
    /// records; every leaf with `requires_grad` ends up holding accumulated
    /// gradients.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if loss.numel() != 1 {
            return Err(TensorError::NonScalarLoss(loss.shape()));
        }
        let entries = std::mem::take(&mut *self.entries.borrow_mut());
        if entries.is_empty() {
            return Err(TensorError::EmptyTape);
        }
        loss.accumulate_grad(&[1.0]);
        for entry in entries.into_iter().rev() {
            (entry.backward)();
        }
        Ok(())
    }
}

/// Helper shared by ops: output tensor that requires grad iff recording is on
/// and any input requires grad.
fn op_output(
    op: &'static str,
    shape: Vec<usize>,
    data: Vec<Real>,
    track: bool,
) -> Result<Tensor> {
    let out = Tensor::new(shape, data, track)?;
    out.check_finite(op)?;
    Ok(out)
}

/// Gradient of `t`, or zeros when no downstream path reached it.
fn grad_or_zero(t: &Tensor) -> Vec<Real> {
    t.grad().unwrap_or_else(|| vec![0.0; t.numel()])
}
