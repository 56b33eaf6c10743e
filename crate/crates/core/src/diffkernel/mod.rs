//! Minimal differentiable-computation kernel.
//!
//! Dense tensors, multilayer perceptrons with hand-rolled exact
//! reverse-mode gradients, an Adam optimizer, diffusion-step
//! embeddings, and a binary checkpoint container. Learned components
//! train in single precision; the whole kernel is generic over
//! [`Scalar`] so gradient checks can run the identical code path in
//! double precision.

mod adam;
mod checkpoint;
mod embed;
mod mlp;
mod tensor;

pub use adam::{adam_step, clip_global_norm, AdamConfig, AdamOutcome, NonFinitePolicy};
pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CheckpointMeta};
pub use embed::sinusoidal_embed;
pub use mlp::{init_mlp, mlp_backward, mlp_forward, Activation, MlpSpec, MlpTrace};
pub use tensor::{Dtype, Scalar, Tensor};

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Named gradients, keyed like the owning [`ParameterSet`].
pub type Gradients<S> = BTreeMap<String, Tensor<S>>;

/// A tensor parameter with its Adam state.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<S: Scalar> {
    pub value: Tensor<S>,
    pub m: Tensor<S>,
    pub v: Tensor<S>,
    pub step: u64,
}

impl<S: Scalar> Param<S> {
    pub fn new(value: Tensor<S>) -> Param<S> {
        let m = Tensor::zeros(value.shape().to_vec());
        let v = Tensor::zeros(value.shape().to_vec());
        Param {
            value,
            m,
            v,
            step: 0,
        }
    }
}

/// A named map of tensor parameters with per-parameter optimizer
/// state. Iteration order is the sorted name order, which makes every
/// update and serialization deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterSet<S: Scalar> {
    params: BTreeMap<String, Param<S>>,
}

impl<S: Scalar> ParameterSet<S> {
    pub fn new() -> Self {
        ParameterSet {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<S>) {
        self.params.insert(name.into(), Param::new(value));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<S>> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Validation(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param<S>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Validation(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<S>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param<S>)> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count across all parameter values.
    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Clone just the values (no optimizer state), e.g. for checkpoints.
    pub fn values(&self) -> BTreeMap<String, Tensor<S>> {
        self.params
            .iter()
            .map(|(k, p)| (k.clone(), p.value.clone()))
            .collect()
    }

    /// Rebuild from bare values with fresh optimizer state.
    pub fn from_values(values: BTreeMap<String, Tensor<S>>) -> Self {
        let mut ps = ParameterSet::new();
        for (k, v) in values {
            ps.insert(k, v);
        }
        ps
    }

    /// Convert every scalar (used by the double-precision gradient
    /// check mode to lift trained parameters).
    pub fn cast<T: Scalar>(&self) -> ParameterSet<T> {
        let mut out = ParameterSet::new();
        for (k, p) in &self.params {
            out.insert(k.clone(), p.value.cast());
        }
        out
    }
}
