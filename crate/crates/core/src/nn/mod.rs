//! Parameter storage, the forward-pass context, and the layer primitives
//! the network is assembled from.

mod attention;
mod layers;

pub use attention::Cbam;
pub use layers::{BatchNorm2d, Conv2d, ConvSpec, GhostConv, PRelu};

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Learnable tensors are updated by the optimizer; buffers (batch-norm
/// running statistics) are only mutated by train-mode forward passes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    Learnable,
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Entry<T> {
    pub name: String,
    pub kind: EntryKind,
    pub value: Tensor4<T>,
}

/// Every tensor of a model in creation order. This order is the
/// checkpoint manifest and the optimizer's state layout.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, kind: EntryKind, value: Tensor4<T>) -> ParamId {
        self.entries.push(Entry {
            name: name.into(),
            kind,
            value,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &Entry<T> {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor4<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor4<T> {
        &mut self.entries[id.0].value
    }

    pub fn entries(&self) -> &[Entry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [Entry<T>] {
        &mut self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn learnable(&self) -> impl Iterator<Item = (ParamId, &Entry<T>)> + '_ {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.kind == EntryKind::Learnable)
            .map(|(i, e)| (ParamId(i), e))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Sets every learnable gradient buffer to zero.
    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            if e.kind == EntryKind::Learnable {
                e.value.zero_grad();
            }
        }
    }

    /// Folds the results of a finished forward/backward pass into the store.
    pub fn apply(&mut self, outcome: PassOutcome<T>) -> Result<()> {
        for (id, g) in outcome.grads {
            self.entries[id.0].value.accumulate_grad(&g)?;
        }
        for u in outcome.running_updates {
            let m = u.momentum;
            let keep = T::one() - m;
            let mean = self.entries[u.mean.0].value.data_mut();
            for (r, &b) in mean.iter_mut().zip(&u.batch_mean) {
                *r = keep * *r + m * b;
            }
            let var = self.entries[u.var.0].value.data_mut();
            for (r, &b) in var.iter_mut().zip(&u.batch_var) {
                *r = keep * *r + m * b;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Batch-norm uses batch statistics and schedules running-stat updates.
    Train,
    /// Batch-norm reads running statistics; nothing is mutated.
    Eval,
}

/// Pending running-statistic update from one train-mode batch-norm call.
#[derive(Clone, Debug)]
pub struct RunningUpdate<T> {
    pub mean: ParamId,
    pub var: ParamId,
    pub batch_mean: Vec<T>,
    /// Unbiased (divide by count − 1) batch variance.
    pub batch_var: Vec<T>,
    pub momentum: T,
}

/// Everything a pass produced that should flow back into the store.
#[derive(Debug, Default)]
pub struct PassOutcome<T> {
    pub grads: Vec<(ParamId, Vec<T>)>,
    pub running_updates: Vec<RunningUpdate<T>>,
}

/// One forward pass: a tape plus lazy bindings of store entries to leaves.
///
/// The store is only read during the pass; gradients and running-stat
/// updates are collected and handed back by [`Ctx::finish`].
pub struct Ctx<'s, T> {
    pub tape: Tape<T>,
    store: &'s ParamStore<T>,
    bound: Vec<Option<Var>>,
    mode: Mode,
    track_grads: bool,
    running_updates: Vec<RunningUpdate<T>>,
}

impl<'s, T: Scalar> Ctx<'s, T> {
    pub fn new(store: &'s ParamStore<T>, mode: Mode, track_grads: bool) -> Self {
        Ctx {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            mode,
            track_grads,
            running_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    /// Leaf for a learnable entry, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let mut value = self.store.value(id).clone();
        value.clear_grad();
        let v = self.tape.leaf(value, self.track_grads);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn bound(&self, id: ParamId) -> Option<Var> {
        self.bound[id.0]
    }

    pub fn input(&mut self, x: Tensor4<T>, requires_grad: bool) -> Var {
        self.tape.leaf(x, requires_grad)
    }

    pub(crate) fn push_running_update(&mut self, u: RunningUpdate<T>) {
        if self.mode == Mode::Train {
            self.running_updates.push(u);
        }
    }

    /// Extracts parameter gradients (after [`Tape::backward`]) and pending
    /// running-stat updates.
    pub fn finish(self) -> PassOutcome<T> {
        let mut grads = Vec::new();
        for (i, b) in self.bound.iter().enumerate() {
            if let Some(v) = b {
                if let Some(g) = self.tape.grad(*v) {
                    grads.push((ParamId(i), g.to_vec()));
                }
            }
        }
        PassOutcome {
            grads,
            running_updates: self.running_updates,
        }
    }
}
