//! Parameterized building blocks. Each layer only stores its parameter names and
//! hyperparameters; the tensors live in a [`ParamStore`].

use rand::Rng;

use crate::error::Result;
use crate::nn::graph::{Conv2dSpec, Graph, Var};
use crate::nn::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub spec: Conv2dSpec,
    pub bias: bool,
}

impl Conv2d {
    /// Square kernel with "same"-style padding `kernel / 2`.
    pub fn new(name: impl Into<String>, in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        Self {
            name: name.into(),
            in_channels,
            out_channels,
            kernel,
            spec: Conv2dSpec { stride, pad: kernel / 2 },
            bias: true,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn num_params(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel + if self.bias { self.out_channels } else { 0 }
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        let fan_in = self.in_channels * self.kernel * self.kernel;
        let shape = [self.out_channels, self.in_channels, self.kernel, self.kernel];
        store.get_or_insert_with(&self.weight_name(), || Tensor::he_normal(&shape, fan_in, rng));
        if self.bias {
            store.get_or_insert_with(&self.bias_name(), || Tensor::zeros(&[self.out_channels]));
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, &self.weight_name())?;
        let b = if self.bias { Some(g.param(store, &self.bias_name())?) } else { None };
        g.conv2d(x, w, b, self.spec)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub name: String,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, in_features: usize, out_features: usize) -> Self {
        Self { name: name.into(), in_features, out_features }
    }

    pub fn num_params(&self) -> usize {
        self.out_features * (self.in_features + 1)
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        let bound = 1.0 / (self.in_features.max(1) as f64).sqrt();
        store.get_or_insert_with(&format!("{}.weight", self.name), || {
            Tensor::uniform(&[self.out_features, self.in_features], -bound, bound, rng)
        });
        store.get_or_insert_with(&format!("{}.bias", self.name), || Tensor::zeros(&[self.out_features]));
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, &format!("{}.weight", self.name))?;
        let b = g.param(store, &format!("{}.bias", self.name))?;
        g.linear(x, w, Some(b))
    }
}
