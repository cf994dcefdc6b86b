//! Named parameter storage and initialization.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::attention::orthogonal_features;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Arc<Tensor>,
    pub trainable: bool,
}

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn get(&self, idx: usize) -> &Tensor {
        &self.params[idx].value
    }

    pub fn param(&self, idx: usize) -> &Param {
        &self.params[idx]
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Total number of scalars, trainable or not.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn num_trainable(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.params.iter().map(|p| p.value.numel()).collect()
    }

    pub(crate) fn push(&mut self, name: String, value: Tensor, trainable: bool) -> usize {
        self.params.push(Param {
            name,
            value: Arc::new(value),
            trainable,
        });
        self.params.len() - 1
    }

    /// Binds every parameter to `tape` as a leaf. Gradients are requested for
    /// trainable parameters only when `with_grad` is set.
    pub fn bind(&self, tape: &mut Tape, with_grad: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.leaf_shared(Arc::clone(&p.value), with_grad && p.trainable))
            .collect()
    }

    /// Mutable access for in-place optimizer updates (copy-on-write if a
    /// tape still shares the storage).
    pub fn values_mut(&mut self) -> Vec<&mut Tensor> {
        self.params.iter_mut().map(|p| Arc::make_mut(&mut p.value)).collect()
    }

    /// Replaces the value of parameter `idx`, keeping its shape.
    pub fn set(&mut self, idx: usize, value: Tensor) -> Result<()> {
        if value.shape() != self.params[idx].value.shape() {
            return Err(Error::dim("param set", self.params[idx].value.shape(), value.shape()));
        }
        self.params[idx].value = Arc::new(value);
        Ok(())
    }
}

/// How a freshly created parameter is filled.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Zero-mean Gaussian with the given standard deviation.
    Normal(f64),
    /// `ln u`, `u ~ U[0.5, 1.5]`, so that `A′ = −exp(·) = −u`.
    NegDecayLog,
    /// Inverse softplus of a log-uniform timescale in [1e-3, 1e-1].
    TimescaleBias,
    /// Frozen orthogonal random features (rows × cols).
    OrthogonalFeatures,
}

/// Supplies parameter tensors either from a random initializer or from a
/// loaded checkpoint.
pub(crate) enum ParamSource {
    Fresh(ChaCha8Rng),
    Loaded(HashMap<String, Tensor>),
}

impl ParamSource {
    pub(crate) fn make(&mut self, store: &mut ParamStore, name: &str, shape: &[usize], init: Init) -> Result<usize> {
        let trainable = !matches!(init, Init::OrthogonalFeatures);
        let value = match self {
            ParamSource::Fresh(rng) => fresh(rng, shape, init),
            ParamSource::Loaded(map) => {
                let t = map
                    .remove(name)
                    .ok_or_else(|| Error::Config(format!("checkpoint is missing parameter '{name}'")))?;
                if t.shape() != shape {
                    return Err(Error::Config(format!(
                        "parameter '{name}' has shape {:?}, expected {shape:?}",
                        t.shape()
                    )));
                }
                t
            }
        };
        Ok(store.push(name.to_string(), value, trainable))
    }

    pub(crate) fn finish(self) -> Result<()> {
        if let ParamSource::Loaded(map) = self {
            if let Some(name) = map.keys().next() {
                return Err(Error::Config(format!("checkpoint has unexpected parameter '{name}'")));
            }
        }
        Ok(())
    }
}

fn fresh(rng: &mut ChaCha8Rng, shape: &[usize], init: Init) -> Tensor {
    let n: usize = shape.iter().product();
    let data = match init {
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
        Init::Normal(std) => (0..n)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect(),
        Init::NegDecayLog => (0..n).map(|_| rng.random_range(0.5..1.5f64).ln()).collect(),
        Init::TimescaleBias => (0..n)
            .map(|_| {
                let dt = (rng.random_range(1e-3f64.ln()..1e-1f64.ln())).exp();
                // softplus⁻¹(dt) = ln(exp(dt) − 1)
                dt.exp_m1().ln()
            })
            .collect(),
        Init::OrthogonalFeatures => return orthogonal_features(shape[0], shape[1], rng),
    };
    Tensor::new(shape.to_vec(), data).expect("shape matches element count")
}
