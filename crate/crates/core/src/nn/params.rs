use std::collections::HashMap;

use indexmap::IndexMap;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::Checkpoint;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EntryKind {
    /// Updated by the optimiser.
    Param,
    /// State carried between steps (running statistics, power-iteration
    /// vectors) but never differentiated.
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub value: Tensor,
    pub kind: EntryKind,
}

/// Named parameters and buffers of one network, in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: IndexMap<String, Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn insert(&mut self, name: &str, value: Tensor, kind: EntryKind) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        self.entries.insert(name.to_string(), Entry { value, kind });
        Ok(())
    }

    pub fn add_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        self.insert(name, value, EntryKind::Param)
    }

    pub fn add_buffer(&mut self, name: &str, value: Tensor) -> Result<()> {
        self.insert(name, value, EntryKind::Buffer)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|e| &e.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name).map(|e| &mut e.value)
    }

    pub fn expect(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Checkpoint(format!("no entry named {name:?}")))
    }

    pub fn kind(&self, name: &str) -> Option<EntryKind> {
        self.entries.get(name).map(|e| e.kind)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Entry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of trainable scalars.
    pub fn num_params(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.kind == EntryKind::Param)
            .map(|e| e.value.numel())
            .sum()
    }

    /// Copies every entry into `ckpt` under `prefix.`.
    pub fn save_into(&self, ckpt: &mut Checkpoint, prefix: &str) -> Result<()> {
        for (name, e) in &self.entries {
            ckpt.insert(format!("{prefix}.{name}"), e.value.clone())?;
        }
        Ok(())
    }

    /// Overwrites every entry from `ckpt`. The checkpoint must hold each
    /// name with an identical shape.
    pub fn load_from(&mut self, ckpt: &Checkpoint, prefix: &str) -> Result<()> {
        for (name, e) in self.entries.iter_mut() {
            let key = format!("{prefix}.{name}");
            let t = ckpt
                .tensors
                .get(&key)
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks {key:?}")))?;
            if t.shape() != e.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "{key}: checkpoint shape {:?} differs from model shape {:?}",
                    t.shape(),
                    e.value.shape()
                )));
            }
            e.value = t.clone();
        }
        Ok(())
    }
}

/// How a forward pass treats the parameters it binds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mode {
    /// Bind parameters as differentiable leaves.
    pub trainable: bool,
    /// Normalise with batch statistics instead of running statistics.
    pub batch_stats: bool,
    /// Advance running statistics and power-iteration state.
    pub update_state: bool,
}

impl Mode {
    /// Ordinary training forward.
    pub const TRAIN: Mode = Mode {
        trainable: true,
        batch_stats: true,
        update_state: true,
    };
    /// Gradients flow through to the input but the network is not updated
    /// (a discriminator inside the generator loss).
    pub const FROZEN: Mode = Mode {
        trainable: false,
        batch_stats: true,
        update_state: false,
    };
    /// Inference with running statistics.
    pub const EVAL: Mode = Mode {
        trainable: false,
        batch_stats: false,
        update_state: false,
    };
}

/// Binds store entries onto a tape, at most once per name.
pub struct Binder<'s> {
    store: &'s mut ParamStore,
    bound: HashMap<String, Var>,
    pub mode: Mode,
}

impl<'s> Binder<'s> {
    pub fn new(store: &'s mut ParamStore, mode: Mode) -> Self {
        Binder {
            store,
            bound: HashMap::new(),
            mode,
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        self.store
    }

    /// Leaf for parameter `name` on `tape`.
    pub fn param(&mut self, tape: &mut Tape, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = self.store.expect(name)?.clone();
        let trainable = self.mode.trainable && self.store.kind(name) == Some(EntryKind::Param);
        let v = tape.leaf(value, trainable);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Returns a cached derived variable (such as a normalised weight).
    pub fn cached(&self, key: &str) -> Option<Var> {
        self.bound.get(key).copied()
    }

    pub fn cache(&mut self, key: &str, v: Var) {
        self.bound.insert(key.to_string(), v);
    }

    /// Gradients of every trainable parameter bound so far, in store order.
    pub fn grads(&self, tape: &Tape) -> Vec<(String, Tensor)> {
        self.store
            .iter()
            .filter(|(_, e)| e.kind == EntryKind::Param)
            .filter_map(|(name, _)| {
                let v = *self.bound.get(name)?;
                tape.requires_grad(v)
                    .then(|| (name.to_string(), tape.grad_tensor(v)))
            })
            .collect()
    }
}
