//! Named parameter collections and their initialisation.

use rand::Rng;

use crate::rng::Rng64;
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

/// Ordered named tensors. Order is significant: it is the order in which models
/// attach parameters to a tape and the order written to model files.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    /// Appends a tensor and returns its position.
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> usize {
        self.entries.push((name.into(), tensor));
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn at(&self, idx: usize) -> &Tensor<T> {
        &self.entries[idx].1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Records every tensor on the tape, as trainable leaves or as constants.
    pub fn attach(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.entries
            .iter()
            .map(|(_, t)| tape.leaf(t.clone().with_requires_grad(trainable)))
            .collect()
    }

    /// Pulls gradients for attached vars; parameters that received none get zeros.
    pub fn collect_grads(&self, tape: &mut Tape<T>, vars: &[Var]) -> Vec<Vec<T>> {
        vars.iter()
            .zip(&self.entries)
            .map(|(&v, (_, t))| tape.take_grad(v).unwrap_or_else(|| vec![T::zero(); t.numel()]))
            .collect()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast::<U>())).collect(),
        }
    }

    pub fn into_entries(self) -> Vec<(String, Tensor<T>)> {
        self.entries
    }

    pub fn from_entries(entries: Vec<(String, Tensor<T>)>) -> Self {
        ParamSet { entries }
    }
}

/// He-uniform conv kernel `[filters, channels, k, k]`: `U(-b, b)`, `b = sqrt(6 / fan_in)`.
pub fn he_uniform<T: Real>(shape: &[usize], fan_in: usize, rng: &mut Rng64) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::of(rng.gen_range(-bound..bound)))
}

/// Adds a conv layer's kernel (He-uniform) and zero bias; returns the kernel index.
pub fn push_conv<T: Real>(
    params: &mut ParamSet<T>,
    name: &str,
    in_channels: usize,
    filters: usize,
    kernel: usize,
    rng: &mut Rng64,
) -> usize {
    let fan_in = in_channels * kernel * kernel;
    let k = params.push(
        format!("{name}.weight"),
        he_uniform(&[filters, in_channels, kernel, kernel], fan_in, rng),
    );
    params.push(format!("{name}.bias"), Tensor::zeros(&[filters]));
    k
}

/// Scalar parameters of a conv layer with bias.
pub fn conv_param_count(in_channels: usize, filters: usize, kernel: usize) -> usize {
    filters * in_channels * kernel * kernel + filters
}
