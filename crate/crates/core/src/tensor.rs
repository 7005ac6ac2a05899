use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major tensor with an attached gradient slot.
///
/// Cloning is cheap: clones share the value buffer and the gradient slot, so
/// a clone held by the tape sees gradients accumulated during backward.
/// Values are immutable through shared handles; `data_mut` copies on write
/// when aliased, which the optimizer relies on to update leaf parameters.
#[derive(Clone)]
pub struct Tensor<S: Scalar> {
    shape: Arc<Vec<usize>>,
    data: Arc<Vec<S>>,
    grad: Arc<Mutex<Option<Vec<S>>>>,
    requires_grad: bool,
}

impl<S: Scalar> Tensor<S> {
    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::parameter(
                "tensor",
                format!("shape {:?} needs {} values, got {}", shape, numel, data.len()),
            ));
        }
        Ok(Tensor {
            shape: Arc::new(shape.to_vec()),
            data: Arc::new(data),
            grad: Arc::new(Mutex::new(None)),
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor::from_vec(shape, vec![S::zero(); numel]).expect("consistent by construction")
    }

    pub fn filled(shape: &[usize], v: S) -> Self {
        let numel = shape.iter().product();
        Tensor::from_vec(shape, vec![v; numel]).expect("consistent by construction")
    }

    pub fn scalar(v: S) -> Self {
        Tensor::from_vec(&[1], vec![v]).expect("consistent by construction")
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Same values, no gradient tracking, fresh gradient slot.
    pub fn detach(&self) -> Self {
        Tensor {
            shape: Arc::clone(&self.shape),
            data: Arc::clone(&self.data),
            grad: Arc::new(Mutex::new(None)),
            requires_grad: false,
        }
    }

    /// Same values and shape, fresh gradient slot, tracking enabled.
    /// Used to give each training step's parameter view its own accumulator.
    pub fn grad_view(&self) -> Self {
        Tensor {
            shape: Arc::clone(&self.shape),
            data: Arc::clone(&self.data),
            grad: Arc::new(Mutex::new(None)),
            requires_grad: true,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    /// Mutable access to the value buffer. Copies if other handles alias it.
    pub fn data_mut(&mut self) -> &mut [S] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn scalar_value(&self) -> S {
        debug_assert_eq!(self.numel(), 1, "scalar_value on non-scalar tensor");
        self.data[0]
    }

    /// Flat index of a multi-dimensional position, row-major.
    pub fn flat_index(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut flat = 0;
        for (i, &d) in idx.iter().enumerate() {
            debug_assert!(d < self.shape[i]);
            flat = flat * self.shape[i] + d;
        }
        flat
    }

    pub fn at(&self, idx: &[usize]) -> S {
        self.data[self.flat_index(idx)]
    }

    pub fn grad(&self) -> Option<Vec<S>> {
        self.grad.lock().expect("grad lock").clone()
    }

    /// Adds `delta` into the gradient slot, allocating zeros on first use.
    /// Accumulation is additive by contract: callers reset explicitly.
    pub fn accumulate_grad(&self, delta: &[S]) {
        debug_assert_eq!(delta.len(), self.numel());
        let mut slot = self.grad.lock().expect("grad lock");
        match slot.as_mut() {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi = *gi + *di;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    /// Adds `delta` into `[offset, offset + delta.len())` of the gradient,
    /// zero-filling the rest on first use. Used by slice and concat backward.
    pub fn accumulate_grad_range(&self, offset: usize, delta: &[S]) {
        debug_assert!(offset + delta.len() <= self.numel());
        let mut slot = self.grad.lock().expect("grad lock");
        let g = slot.get_or_insert_with(|| vec![S::zero(); self.numel()]);
        for (gi, di) in g[offset..offset + delta.len()].iter_mut().zip(delta) {
            *gi = *gi + *di;
        }
    }

    pub fn clear_grad(&self) {
        *self.grad.lock().expect("grad lock") = None;
    }

    /// True when both handles share one gradient slot (clones of one tensor).
    pub fn same_slot(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.grad, &other.grad)
    }
}

impl<S: Scalar> std::fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape())?;
        if self.numel() <= 8 {
            write!(f, " {:?}", self.data())?;
        }
        Ok(())
    }
}
