//! Named parameter storage.
//!
//! Every learnable tensor lives in a [`ParamStore`] under a unique
//! hierarchical name such as `branch.a.layer.0.gate.fuse.W`. Model code holds
//! [`ParamId`] handles; a parameter referenced from several places (the shared
//! encoder) is still a single entry.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Initialisation schemes used by the model.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    Xavier { fan_in: usize, fan_out: usize },
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor.with_requires_grad(true));
        Ok(id)
    }

    /// Creates and initialises a parameter. The random stream depends only
    /// on `seed` and `name`, so adding or removing other parameters never
    /// changes this one's initial value.
    pub fn init(&mut self, name: &str, dims: &[usize], init: Init, seed: u64) -> Result<ParamId> {
        let n: usize = dims.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Xavier { fan_in, fan_out } => {
                let bound = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt() as f32;
                let mut rng = ChaCha8Rng::seed_from_u64(name_seed(seed, name));
                (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
            }
        };
        self.insert(name, Tensor::from_vec(dims, data)?)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    /// Parameters in name order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> + '_ {
        self.index
            .iter()
            .map(move |(name, &id)| (id, name.as_str(), &self.tensors[id.0]))
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.index.values().copied().collect()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> + '_ {
        self.index.keys().map(String::as_str)
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Copies values (not gradients) from `other`, which must hold the same
    /// names and shapes.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        let (missing, extra) = self.name_diff(other);
        if !missing.is_empty() || !extra.is_empty() {
            return Err(Error::CheckpointMismatch { missing, extra });
        }
        for (name, &id) in &self.index {
            let src = other.by_name(name).expect("checked above");
            let dst = &mut self.tensors[id.0];
            if src.dims() != dst.dims() {
                return Err(Error::dim("copy_values_from", dst.dims(), src.dims()));
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    /// Names in `self` but absent from `other`, and names in `other` but
    /// absent from `self`.
    pub fn name_diff(&self, other: &ParamStore) -> (Vec<String>, Vec<String>) {
        let missing = self
            .index
            .keys()
            .filter(|n| !other.index.contains_key(*n))
            .cloned()
            .collect();
        let extra = other
            .index
            .keys()
            .filter(|n| !self.index.contains_key(*n))
            .cloned()
            .collect();
        (missing, extra)
    }
}

fn name_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a over the name, mixed with the run seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}
