//! Named parameter storage with freeze flags, binding onto a tape, and
//! content fingerprints.
//!
//! Canonical names (block indices are 0-based):
//!
//! | prefix | contents |
//! |---|---|
//! | `stem.conv{1,2}.{weight,bias}` | convolutional front end |
//! | `blocks.{i}.attn_ln.*`, `blocks.{i}.attn.{q,k,v,o}.*`, `blocks.{i}.mlp_ln.*`, `blocks.{i}.mlp.fc{1,2}.*` | transformer blocks |
//! | `head.*` | aggregation LayerNorm, pooling attention, batch norm, projection |
//! | `lora.blocks.{i}.{q,k,v,o}.{A,B}`, `lora.scale` | low-rank adapters |
//! | `aam.weight` | training classifier |

use std::collections::HashMap;

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    /// Learnable weight; counted in parameter totals.
    Weight,
    /// Non-learned state (running statistics, counters, fixed multipliers).
    Buffer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Encoder,
    Head,
    Adapter,
    Classifier,
}

impl ParamGroup {
    pub fn of(name: &str) -> Self {
        if name.starts_with("head.") {
            ParamGroup::Head
        } else if name.starts_with("lora.") {
            ParamGroup::Adapter
        } else if name.starts_with("aam.") {
            ParamGroup::Classifier
        } else {
            ParamGroup::Encoder
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub kind: ParamKind,
    pub trainable: bool,
}

/// Initial value rule for a declared parameter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

/// Declared name, shape and kind of one parameter. Model layouts are lists of
/// these, used both to initialize stores and to count parameters without
/// allocating them.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub init: Init,
}

impl ParamSpec {
    pub fn weight(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            kind: ParamKind::Weight,
            init,
        }
    }

    pub fn buffer(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            kind: ParamKind::Buffer,
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn group(&self) -> ParamGroup {
        ParamGroup::of(&self.name)
    }

    pub fn materialize<T: Scalar>(&self, rng: &mut impl Rng) -> Tensor<T> {
        match self.init {
            Init::Zeros => Tensor::zeros(&self.shape),
            Init::Ones => Tensor::ones(&self.shape),
            Init::Normal(std) => {
                let normal = Normal::new(0.0, std).expect("finite init std");
                Tensor::from_fn(&self.shape, |_| T::lit(normal.sample(rng)))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CountMode {
    Total,
    Trainable,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: IndexMap<String, Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: IndexMap::new(),
        }
    }

    /// Materializes `specs` in order, drawing Gaussian entries from `rng`.
    pub fn from_specs(specs: &[ParamSpec], rng: &mut impl Rng) -> Self {
        let mut store = Self::new();
        store.extend_from_specs(specs, rng);
        store
    }

    pub fn extend_from_specs(&mut self, specs: &[ParamSpec], rng: &mut impl Rng) {
        for spec in specs {
            self.insert(spec.name.clone(), spec.materialize(rng), spec.kind);
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, kind: ParamKind) {
        let trainable = kind == ParamKind::Weight;
        self.params.insert(
            name.into(),
            Param {
                value,
                kind,
                trainable,
            },
        );
    }

    pub fn insert_weight(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.insert(name, value, ParamKind::Weight);
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.insert(name, value, ParamKind::Buffer);
    }

    pub fn remove(&mut self, name: &str) -> Option<Param<T>> {
        self.params.shift_remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn param(&self, name: &str) -> Result<&Param<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.param(name)?.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    /// Replaces a tensor's value, keeping kind and trainability.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = self.get_mut(name)?;
        slot.expect_same_shape(&value, "param set")?;
        *slot = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Weights whose group is in `groups` become trainable; all others are
    /// frozen. Buffers are never trainable.
    pub fn train_only(&mut self, groups: &[ParamGroup]) {
        for (name, p) in &mut self.params {
            p.trainable = p.kind == ParamKind::Weight && groups.contains(&ParamGroup::of(name));
        }
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        p.trainable = trainable && p.kind == ParamKind::Weight;
        Ok(())
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(k, _)| k.clone())
            .collect()
    }

    /// Element counts over weights, excluding the training classifier.
    pub fn count(&self, mode: CountMode) -> usize {
        self.params
            .iter()
            .filter(|(name, p)| {
                p.kind == ParamKind::Weight
                    && ParamGroup::of(name) != ParamGroup::Classifier
                    && (mode == CountMode::Total || p.trainable)
            })
            .map(|(_, p)| p.value.numel())
            .sum()
    }

    /// SHA-256 over names, shapes and little-endian `f64` payloads of the
    /// selected entries, in store order.
    pub fn fingerprint(&self, select: impl Fn(&str, &Param<T>) -> bool) -> String {
        let mut h = Sha256::new();
        for (name, p) in self.params.iter().filter(|(n, p)| select(n, p)) {
            h.update(name.as_bytes());
            h.update([0u8]);
            for &e in p.value.shape() {
                h.update((e as u64).to_le_bytes());
            }
            for &x in p.value.data() {
                h.update(x.as_f64().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn group_fingerprint(&self, group: ParamGroup) -> String {
        self.fingerprint(|n, _| ParamGroup::of(n) == group)
    }

    /// Fingerprint of every weight that is not currently trainable.
    pub fn frozen_fingerprint(&self) -> String {
        self.fingerprint(|_, p| p.kind == ParamKind::Weight && !p.trainable)
    }

    /// Same entries converted to another scalar type.
    pub fn cast<U: Scalar>(self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .into_iter()
                .map(|(k, p)| {
                    let value = p.value.cast();
                    (k, Param { value, kind: p.kind, trainable: p.trainable })
                })
                .collect(),
        }
    }

    /// Places every tensor on `tape`: trainable weights as gradient leaves,
    /// everything else as constants.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> Bindings<'t, T> {
        let vars = self
            .params
            .iter()
            .map(|(name, p)| (name.clone(), tape.leaf(p.value.clone(), p.trainable)))
            .collect();
        Bindings { vars }
    }
}

/// Tape handles for a bound [`ParamStore`].
pub struct Bindings<'t, T: Scalar> {
    vars: HashMap<String, Var<'t, T>>,
}

impl<'t, T: Scalar> Bindings<'t, T> {
    pub fn var(&self, name: &str) -> Result<Var<'t, T>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn try_var(&self, name: &str) -> Option<Var<'t, T>> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var<'t, T>)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}
