//! Small parameterised layers shared by the backbone, projectors and fusion.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// Binds a tape to the parameter store it reads from.
#[derive(Clone, Copy)]
pub struct Ctx<'t> {
    pub tape: &'t Tape,
    pub store: &'t ParamStore,
}

impl<'t> Ctx<'t> {
    pub fn new(tape: &'t Tape, store: &'t ParamStore) -> Self {
        Ctx { tape, store }
    }

    pub fn p(&self, id: ParamId) -> Var<'t> {
        self.tape.param(self.store, id)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Silu,
    Identity,
}

impl Activation {
    pub fn apply<'t>(self, x: Var<'t>) -> Result<Var<'t>> {
        match self {
            Activation::Silu => x.silu(),
            Activation::Identity => Ok(x),
        }
    }
}

/// Weight initialisation for a layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// normal(0, gain / sqrt(fan_in))
    Scaled(f64),
    Normal(f64),
    Zeros,
}

impl Init {
    fn sample<R: Rng + ?Sized>(self, shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
        match self {
            Init::Scaled(gain) => Tensor::randn(shape, gain / (fan_in as f64).sqrt(), rng),
            Init::Normal(std) => Tensor::randn(shape, std, rng),
            Init::Zeros => Tensor::zeros(shape),
        }
    }
}

/// Square-kernel 2-D convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let shape = [out_channels, in_channels, kernel, kernel];
        let weight = store.add(
            format!("{name}.weight"),
            init.sample(&shape, in_channels * kernel * kernel, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels]));
        Conv {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
        }
    }

    /// "Same" padding for odd kernels.
    pub fn forward<'t>(&self, ctx: Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let c = x.shape()[0];
        if c != self.in_channels {
            return Err(Error::shape("conv", &[self.in_channels], &[c]));
        }
        x.conv2d(ctx.p(self.weight), Some(ctx.p(self.bias)), self.stride, self.kernel / 2)
    }

    pub fn num_params(&self) -> usize {
        self.out_channels * (self.in_channels * self.kernel * self.kernel + 1)
    }
}

/// Affine map `x·W + b` with `W: in × out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_features: usize,
        out_features: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            init.sample(&[in_features, out_features], in_features, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_features]));
        Linear {
            weight,
            bias,
            in_features,
            out_features,
        }
    }

    /// Accepts a `in` vector or a `rows × in` matrix.
    pub fn forward<'t>(&self, ctx: Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        let as_matrix = match shape.as_slice() {
            [n] if *n == self.in_features => x.reshape(&[1, *n])?,
            [_, n] if *n == self.in_features => x,
            _ => return Err(Error::shape("linear", &[self.in_features], &shape)),
        };
        let y = as_matrix.matmul(ctx.p(self.weight))?.add(ctx.p(self.bias))?;
        if shape.len() == 1 {
            y.reshape(&[self.out_features])
        } else {
            Ok(y)
        }
    }

    pub fn num_params(&self) -> usize {
        self.out_features * (self.in_features + 1)
    }
}
