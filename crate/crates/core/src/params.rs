//! Named parameter storage, initialization and the thin layer wrappers the
//! network is assembled from.

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::nn::{self, ConvOptions};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Ordered `name -> tensor` map. Iteration order is insertion order, which
/// makes checkpoints and optimizer state deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Scalar> {
    tensors: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            tensors: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar parameter count.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }
}

/// Tape plus parameter lookup for one forward pass.
pub struct Ctx<'a, 't, T: Scalar> {
    pub tape: &'t Tape<T>,
    pub params: &'a ParamStore<T>,
}

impl<'a, 't, T: Scalar> Ctx<'a, 't, T> {
    pub fn new(tape: &'t Tape<T>, params: &'a ParamStore<T>) -> Self {
        Ctx { tape, params }
    }

    pub fn param(&self, name: &str) -> Result<Var<'t, T>> {
        let value = self
            .params
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
        Ok(self.tape.param(name, value))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal(0, std) resampled until within ±2·std.
    TruncNormal(f64),
    Zeros,
    Ones,
}

pub fn init_tensor<T: Scalar>(shape: &[usize], init: Init, rng: &mut impl Rng) -> Tensor<T> {
    match init {
        Init::Zeros => Tensor::zeros(shape),
        Init::Ones => Tensor::ones(shape),
        Init::TruncNormal(std) => Tensor::from_fn(shape, |_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break T::of(z * std);
            }
        }),
    }
}

/// Default standard deviation for projection weights.
pub const PROJ_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub opts: ConvOptions,
    pub bias: bool,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, kernel: usize) -> Self {
        Conv2d {
            name: name.into(),
            in_channels: cin,
            out_channels: cout,
            kernel,
            opts: ConvOptions::same(kernel),
            bias: true,
        }
    }

    pub fn pointwise(name: impl Into<String>, cin: usize, cout: usize) -> Self {
        Self::new(name, cin, cout, 1)
    }

    /// Depthwise `kernel`×`kernel` over `channels` with the given stride.
    pub fn depthwise(
        name: impl Into<String>,
        channels: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        Conv2d {
            opts: ConvOptions {
                stride,
                padding: (kernel - 1) / 2,
                groups: channels,
            },
            ..Self::new(name, channels, channels, kernel)
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels / self.opts.groups,
            self.kernel,
            self.kernel,
        ]
    }

    pub fn num_params(&self) -> usize {
        self.weight_shape().iter().product::<usize>()
            + if self.bias { self.out_channels } else { 0 }
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, weight: Init, rng: &mut impl Rng) {
        store.insert(
            self.weight_name(),
            init_tensor(&self.weight_shape(), weight, rng),
        );
        if self.bias {
            store.insert(self.bias_name(), Tensor::zeros(&[self.out_channels]));
        }
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'_, 't, T>,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let w = ctx.param(&self.weight_name())?;
        let b = if self.bias {
            Some(ctx.param(&self.bias_name())?)
        } else {
            None
        };
        nn::conv2d(x, w, b, self.opts)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub name: String,
    pub channels: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        LayerNorm {
            name: name.into(),
            channels,
            eps: 1e-5,
        }
    }

    pub fn num_params(&self) -> usize {
        2 * self.channels
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>) {
        store.insert(
            format!("{}.gamma", self.name),
            Tensor::ones(&[self.channels]),
        );
        store.insert(
            format!("{}.beta", self.name),
            Tensor::zeros(&[self.channels]),
        );
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'_, 't, T>,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let g = ctx.param(&format!("{}.gamma", self.name))?;
        let b = ctx.param(&format!("{}.beta", self.name))?;
        nn::layer_norm(x, g, b, self.eps)
    }
}
