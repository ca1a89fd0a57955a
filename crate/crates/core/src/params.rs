//! Named parameter storage shared by every module of the model.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{DemoError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Optimizer group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    /// The visual encoder.
    Encoder,
    /// Everything built on top of the encoder.
    Module,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub group: Group,
    /// Buffers (batch-norm running statistics) are stored here too but are
    /// never touched by the optimizer.
    pub trainable: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, group: Group) -> ParamId {
        self.insert(name.into(), value, group, true)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor, group: Group) -> ParamId {
        self.insert(name.into(), value, group, false)
    }

    fn insert(&mut self, name: String, value: Tensor, group: Group, trainable: bool) -> ParamId {
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            group,
            trainable,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// Overwrite every entry from `(name, tensor)` pairs. The set of names
    /// and every shape must match exactly.
    pub fn load_named(&mut self, entries: &BTreeMap<String, Tensor>) -> Result<()> {
        let mut missing = Vec::new();
        let mut mismatched = Vec::new();
        for p in &self.params {
            match entries.get(&p.name) {
                None => missing.push(p.name.clone()),
                Some(t) if t.shape() != p.value.shape() => mismatched.push(format!(
                    "{} (expected {:?}, found {:?})",
                    p.name,
                    p.value.shape(),
                    t.shape()
                )),
                Some(_) => {}
            }
        }
        let extra: Vec<String> = entries
            .keys()
            .filter(|k| !self.by_name.contains_key(*k))
            .cloned()
            .collect();
        if !missing.is_empty() || !extra.is_empty() || !mismatched.is_empty() {
            let mut parts = Vec::new();
            if !missing.is_empty() {
                parts.push(format!("missing: {}", missing.join(", ")));
            }
            if !extra.is_empty() {
                parts.push(format!("unexpected: {}", extra.join(", ")));
            }
            if !mismatched.is_empty() {
                parts.push(format!("shape mismatch: {}", mismatched.join(", ")));
            }
            return Err(DemoError::Checkpoint(parts.join("; ")));
        }
        for p in &mut self.params {
            p.value = entries[&p.name].clone();
        }
        Ok(())
    }

    pub fn named_values(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect()
    }
}

/// Seeded initializer used while building modules.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn normal(&mut self, shape: [usize; 3], std: f64) -> Tensor {
        let dist = Normal::new(0.0, std).expect("valid std");
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| dist.sample(&mut self.rng)).collect())
    }

    pub fn uniform(&mut self, shape: [usize; 3], bound: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(
            shape,
            (0..n)
                .map(|_| self.rng.random_range(-bound..=bound))
                .collect(),
        )
    }
}
