//! Explicit, per-forward-pass recording tape for reverse-mode differentiation.
//!
//! Every differentiable op evaluates eagerly, pushes one entry onto the tape
//! (its inputs, its output value and a [`Backward`] rule holding whatever
//! forward context it needs) and hands back a [`Var`]. Entries are appended in
//! evaluation order, so the tape is topologically sorted by construction and a
//! single reverse sweep visits every entry exactly once.

use std::cell::{Ref, RefCell};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Vector-Jacobian product rule for one recorded op.
pub trait Backward<T: Real> {
    fn name(&self) -> &'static str;

    /// Given `d loss / d output`, return `d loss / d input` for each input in
    /// recording order. `None` means "no contribution".
    fn backward(
        &self,
        grad_out: &Tensor<T>,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
    ) -> Vec<Option<Tensor<T>>>;
}

struct Entry<T: Real> {
    value: Rc<Tensor<T>>,
    inputs: Vec<usize>,
    rule: Option<Box<dyn Backward<T>>>,
    requires_grad: bool,
}

pub struct Tape<T: Real> {
    id: u64,
    entries: RefCell<Vec<Entry<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
pub struct Var<'t, T: Real> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Real> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T: Real> Copy for Var<'_, T> {}

impl<T: Real> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(tape {}, node {}, shape {:?})", self.tape.id, self.id, self.shape())
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            entries: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, entry: Entry<T>) -> Var<'_, T> {
        let mut entries = self.entries.borrow_mut();
        entries.push(entry);
        Var {
            tape: self,
            id: entries.len() - 1,
        }
    }

    /// Leaf whose gradient is wanted.
    pub fn variable(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.push(Entry {
            value: Rc::new(value),
            inputs: Vec::new(),
            rule: None,
            requires_grad,
        })
    }

    /// Record the result of an op. Fails if `output` holds NaN or ±inf.
    pub fn record<'t>(
        &'t self,
        inputs: &[Var<'t, T>],
        output: Tensor<T>,
        rule: impl Backward<T> + 'static,
    ) -> Result<Var<'t, T>> {
        if !output.is_finite() {
            return Err(Error::NonFinite { op: rule.name() });
        }
        let requires_grad = {
            let entries = self.entries.borrow();
            inputs.iter().any(|v| {
                debug_assert!(std::ptr::eq(v.tape, self), "input from another tape");
                entries[v.id].requires_grad
            })
        };
        let rule: Option<Box<dyn Backward<T>>> = if requires_grad {
            Some(Box::new(rule))
        } else {
            None
        };
        Ok(self.push(Entry {
            value: Rc::new(output),
            inputs: inputs.iter().map(|v| v.id).collect(),
            rule,
            requires_grad,
        }))
    }

    /// Names of the recorded ops in order; leaves are reported as `"leaf"`.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.entries
            .borrow()
            .iter()
            .map(|e| match (&e.rule, e.inputs.is_empty()) {
                (Some(r), _) => r.name(),
                (None, true) => "leaf",
                (None, false) => "const-op",
            })
            .collect()
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Backward(format!(
                "loss belongs to tape {} but backward was called on tape {}",
                loss.tape.id, self.id
            )));
        }
        let entries = self.entries.borrow();
        if loss.id >= entries.len() {
            return Err(Error::Backward("loss is not on this tape".into()));
        }
        let loss_value = &entries[loss.id].value;
        if loss_value.len() != 1 {
            return Err(Error::Backward(format!(
                "loss must be a scalar, got shape {:?}",
                loss_value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..entries.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(loss_value.shape().to_vec(), T::one()));

        for id in (0..=loss.id).rev() {
            let entry = &entries[id];
            let Some(rule) = entry.rule.as_ref() else {
                continue;
            };
            let Some(grad_out) = grads[id].take() else {
                continue;
            };
            let inputs: Vec<&Tensor<T>> =
                entry.inputs.iter().map(|&i| entries[i].value.as_ref()).collect();
            let input_grads = rule.backward(&grad_out, &inputs, &entry.value);
            debug_assert_eq!(input_grads.len(), entry.inputs.len(), "{}", rule.name());
            for (&input_id, g) in entry.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !entries[input_id].requires_grad {
                    continue;
                }
                debug_assert_eq!(
                    g.shape(),
                    entries[input_id].value.shape(),
                    "{} produced a gradient of the wrong shape",
                    rule.name()
                );
                match &mut grads[input_id] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Gradients {
            tape_id: self.id,
            grads,
        })
    }
}

/// Gradients of a scalar loss with respect to the leaves of a tape.
pub struct Gradients<T: Real> {
    tape_id: u64,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for a leaf. `None` when the leaf is unreachable from the loss
    /// or was recorded as a constant.
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        if var.tape.id != self.tape_id {
            return None;
        }
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient for a leaf, zero-filled when it did not receive any.
    pub fn get_or_zeros(&self, var: Var<'_, T>) -> Tensor<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape()))
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        Rc::clone(&self.tape.entries.borrow()[self.id].value)
    }

    /// Borrow the value without cloning the `Rc`.
    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor<T>) -> R) -> R {
        let entries: Ref<'_, Vec<Entry<T>>> = self.tape.entries.borrow();
        f(&entries[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.with_value(|v| v.shape().to_vec())
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.entries.borrow()[self.id].requires_grad
    }
}
