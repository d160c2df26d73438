//! Parameterized layers shared by the encoders and composition modules.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// Uniform bound for He initialization of a layer followed by a RELU.
pub fn he_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

/// Uniform bound for a linear output layer.
pub fn lecun_bound(fan_in: usize) -> f64 {
    (3.0 / fan_in as f64).sqrt()
}

/// Affine map `x W + b` on `[N, in]` inputs.
#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        bound: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Dense {
            weight: store.add(format!("{name}.weight"), Tensor::uniform(&[input, output], bound, rng))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[output]))?,
            input,
            output,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }
}

/// 3×3 stride-1 convolution with bias on `[N, H, W, C]` maps.
#[derive(Clone, Debug)]
pub struct Conv3x3 {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Conv3x3 {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        bound: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Conv3x3 {
            kernel: store.add(format!("{name}.kernel"), Tensor::uniform(&[3, 3, input, output], bound, rng))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[output]))?,
            input,
            output,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let k = g.param(store, self.kernel);
        let b = g.param(store, self.bias);
        let y = g.conv2d(x, k, 1)?;
        g.add(y, b)
    }
}

/// A dense layer on vectors or a 3×3 convolution on maps, chosen by the
/// composition layer mode.
#[derive(Clone, Debug)]
pub enum Layer {
    Dense(Dense),
    Conv(Conv3x3),
}

impl Layer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        conv: bool,
        input: usize,
        output: usize,
        relu_follows: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = if conv { 9 * input } else { input };
        let bound = if relu_follows {
            he_bound(fan_in)
        } else {
            lecun_bound(fan_in)
        };
        Ok(if conv {
            Layer::Conv(Conv3x3::new(store, name, input, output, bound, rng)?)
        } else {
            Layer::Dense(Dense::new(store, name, input, output, bound, rng)?)
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        match self {
            Layer::Dense(d) => d.forward(g, store, x),
            Layer::Conv(c) => c.forward(g, store, x),
        }
    }

    pub fn params(&self) -> [ParamId; 2] {
        match self {
            Layer::Dense(d) => [d.weight, d.bias],
            Layer::Conv(c) => [c.kernel, c.bias],
        }
    }
}
