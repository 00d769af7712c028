//! Named parameter storage and per-pass binding onto a tape.

use std::cell::RefCell;
use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::volcore::{Gradients, Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    /// `false` for buffers such as batch-norm running statistics.
    pub trainable: bool,
}

/// Ordered, name-indexed collection of learnable tensors and buffers.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    fn insert(&mut self, name: String, value: Tensor<T>, trainable: bool) -> ParamId {
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name `{name}`"
        );
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        let grad = Tensor::zeros(value.shape().to_vec());
        self.entries.push(ParamEntry {
            name,
            value,
            grad,
            trainable,
        });
        ParamId(id)
    }

    pub fn add_param(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.insert(name.into(), value, true)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.insert(name.into(), value, false)
    }

    /// Uniform `[-bound, bound]` with `bound = sqrt(6 / fan_in)`.
    pub fn add_fan_in_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        let value = Tensor::from_fn(shape.to_vec(), |_| T::lit(rng.random_range(-bound..bound)));
        self.add_param(name, value)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].grad
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.entries[id.0].trainable)
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    pub fn accumulate_grads(&mut self, grads: PassOutput<T>) {
        for (id, g) in grads.grads {
            self.entries[id.0].grad.add_assign(&g);
        }
        self.apply_buffer_updates(grads.buffer_updates);
    }

    pub fn apply_buffer_updates(&mut self, updates: Vec<(ParamId, Tensor<T>)>) {
        for (id, v) in updates {
            assert_eq!(v.shape(), self.entries[id.0].value.shape());
            self.entries[id.0].value = v;
        }
    }

    /// Replace values by name from `other`; shapes must agree and every
    /// entry of `self` must be present.
    pub fn load_from(&mut self, named: &[(String, Tensor<T>)]) -> Result<()> {
        let mut seen = vec![false; self.entries.len()];
        for (name, value) in named {
            let id = self.find(name).ok_or_else(|| {
                Error::Data(format!("checkpoint tensor `{name}` does not exist in the model"))
            })?;
            let entry = &mut self.entries[id.0];
            if entry.value.shape() != value.shape() {
                return Err(Error::shape("load_from", entry.value.shape(), value.shape()));
            }
            entry.value = value.clone();
            seen[id.0] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Data(format!(
                "checkpoint is missing tensor `{}`",
                self.entries[missing].name
            )));
        }
        Ok(())
    }
}

/// Gradients and buffer updates collected from one forward/backward pass.
pub struct PassOutput<T> {
    pub grads: Vec<(ParamId, Tensor<T>)>,
    pub buffer_updates: Vec<(ParamId, Tensor<T>)>,
}

/// One forward pass's view of a [`ParamStore`]: every entry bound onto the
/// tape, plus the running-statistic updates produced in train mode.
pub struct Ctx<'s, 't, T: Real> {
    pub tape: &'t Tape<T>,
    store: &'s ParamStore<T>,
    vars: Vec<Var<'t, T>>,
    mode: Mode,
    updates: RefCell<Vec<(ParamId, Tensor<T>)>>,
}

impl<'s, 't, T: Real> Ctx<'s, 't, T> {
    /// Bind all trainable entries as gradient-tracked leaves (when
    /// `track_grads`) or as constants.
    pub fn new(tape: &'t Tape<T>, store: &'s ParamStore<T>, mode: Mode, track_grads: bool) -> Self {
        let vars = store
            .entries
            .iter()
            .map(|e| tape.leaf(e.value.clone(), track_grads && e.trainable))
            .collect();
        Ctx {
            tape,
            store,
            vars,
            mode,
            updates: RefCell::new(Vec::new()),
        }
    }

    /// Bind the store onto caller-supplied variables, one per entry in store
    /// order. Lets external code (gradient checks) own the leaves.
    pub fn from_vars(tape: &'t Tape<T>, store: &'s ParamStore<T>, vars: Vec<Var<'t, T>>, mode: Mode) -> Result<Self> {
        if vars.len() != store.entries.len() {
            return Err(Error::InvalidArgument(format!(
                "{} variables supplied for {} store entries",
                vars.len(),
                store.entries.len()
            )));
        }
        for (v, e) in vars.iter().zip(&store.entries) {
            if v.shape() != e.value.shape() {
                return Err(Error::shape("Ctx::from_vars", e.value.shape(), &v.shape()));
            }
        }
        Ok(Ctx {
            tape,
            store,
            vars,
            mode,
            updates: RefCell::new(Vec::new()),
        })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn param(&self, id: ParamId) -> Var<'t, T> {
        self.vars[id.0]
    }

    pub fn buffer(&self, id: ParamId) -> &'s Tensor<T> {
        &self.store.entries[id.0].value
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn input(&self, x: Tensor<T>) -> Var<'t, T> {
        self.tape.constant(x)
    }

    pub(crate) fn push_buffer_update(&self, id: ParamId, value: Tensor<T>) {
        self.updates.borrow_mut().push((id, value));
    }

    /// Collect per-parameter gradients from `grads` (if any) and the pending
    /// buffer updates.
    pub fn finish(self, grads: Option<&Gradients<T>>) -> PassOutput<T> {
        let mut out = Vec::new();
        if let Some(grads) = grads {
            for (i, e) in self.store.entries.iter().enumerate() {
                if !e.trainable {
                    continue;
                }
                if let Some(g) = grads.get(self.vars[i]) {
                    out.push((ParamId(i), g.clone()));
                }
            }
        }
        PassOutput {
            grads: out,
            buffer_updates: self.updates.into_inner(),
        }
    }
}
