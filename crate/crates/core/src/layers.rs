//! Parameterized layers (dense, conv block, dropout) and their composition.
//!
//! Layers own their parameters as host [`Tensor`]s. A forward pass copies them
//! onto the active [`Tape`] through a [`ParamBinds`] accumulator, which later
//! maps tape gradients back to the owning tensors in registration order.
//! Whether dropout is stochastic, and whether parameters record gradients, is
//! carried by the per-pass [`ExecCtx`] rather than by the layers themselves.

use alloc::vec::Vec;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::rng::{self, stream};
use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Errors raised while composing layers.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LayerError {
    #[error("layer {index}: {source}")]
    AtLayer { index: usize, source: TensorError },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Per-pass execution context: dropout mode and gradient recording.
pub struct ExecCtx {
    dropout_rng: Option<ChaCha8Rng>,
    record_grads: bool,
}

impl ExecCtx {
    /// Dropout disabled, gradients not recorded: plain inference.
    pub fn deterministic() -> Self {
        Self {
            dropout_rng: None,
            record_grads: false,
        }
    }

    /// Dropout stochastic with the given stream, gradients not recorded:
    /// one Monte Carlo inference pass.
    pub fn stochastic(rng: ChaCha8Rng) -> Self {
        Self {
            dropout_rng: Some(rng),
            record_grads: false,
        }
    }

    /// Enables gradient recording (training passes).
    pub fn recording(mut self) -> Self {
        self.record_grads = true;
        self
    }

    pub fn dropout_enabled(&self) -> bool {
        self.dropout_rng.is_some()
    }
}

/// Tape handles for every parameter bound during one forward pass, in
/// registration order.
#[derive(Default)]
pub struct ParamBinds {
    vars: Vec<Var>,
}

impl ParamBinds {
    pub fn new() -> Self {
        Self::default()
    }

    fn bind(&mut self, tape: &mut Tape, ctx: &ExecCtx, t: &Tensor) -> Var {
        let v = if ctx.record_grads {
            tape.leaf(t)
        } else {
            tape.leaf_detached(t)
        };
        self.vars.push(v);
        v
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Fully connected layer: `y = x Wᵀ + b` with `W: [out, in]`, `b: [out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self, TensorError> {
        if weight.shape().len() != 2 || bias.shape() != [weight.shape()[0]] {
            return Err(TensorError::ShapeMismatch {
                op: "dense",
                lhs: weight.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        Ok(Self { weight, bias })
    }

    /// Glorot-uniform weights (bound `sqrt(6/(fan_in+fan_out))`), zero bias.
    pub fn init(in_dim: usize, out_dim: usize, seed: u64) -> Self {
        Self::init_scaled(in_dim, out_dim, 1.0, seed)
    }

    /// Glorot-uniform weights with the bound multiplied by `gain`, zero bias.
    /// Classifier heads use a gain below one so their initial logits stay
    /// near zero even when the incoming features have grown a large scale
    /// through the trunk; starting close to the uniform distribution keeps
    /// the first optimizer steps label-driven rather than saturation-driven.
    pub fn init_scaled(in_dim: usize, out_dim: usize, gain: f64, seed: u64) -> Self {
        let mut r = rng::substream(seed, &[stream::PARAM_INIT]);
        let weight = glorot(&[out_dim, in_dim], in_dim, out_dim, gain, &mut r);
        let bias = Tensor::zeros(&[out_dim]).with_grad();
        Self { weight, bias }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        ctx: &mut ExecCtx,
        binds: &mut ParamBinds,
        x: Var,
    ) -> Result<Var, TensorError> {
        let w = binds.bind(tape, ctx, &self.weight);
        let b = binds.bind(tape, ctx, &self.bias);
        let wt = tape.transpose(w)?;
        let y = tape.matmul(x, wt)?;
        tape.add_row_bias(y, b)
    }
}

/// Convolutional block: 3x3 conv (stride 1, pad 1), relu, 2x2 average pool.
/// Output spatial dims are exactly half the input's.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    pub kernels: Tensor,
    pub bias: Tensor,
}

impl ConvBlock {
    pub fn new(kernels: Tensor, bias: Tensor) -> Result<Self, TensorError> {
        let s = kernels.shape();
        if s.len() != 4 || s[2] != 3 || s[3] != 3 || bias.shape() != [s[0]] {
            return Err(TensorError::ShapeMismatch {
                op: "conv_block",
                lhs: kernels.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        Ok(Self { kernels, bias })
    }

    pub fn init(in_channels: usize, filters: usize, seed: u64) -> Self {
        Self::init_scaled(in_channels, filters, 1.0, seed)
    }

    /// Glorot-uniform kernels with the bound multiplied by `gain`, zero bias.
    pub fn init_scaled(in_channels: usize, filters: usize, gain: f64, seed: u64) -> Self {
        let mut r = rng::substream(seed, &[stream::PARAM_INIT]);
        let fan_in = in_channels * 9;
        let fan_out = filters * 9;
        let kernels = glorot(&[filters, in_channels, 3, 3], fan_in, fan_out, gain, &mut r);
        let bias = Tensor::zeros(&[filters]).with_grad();
        Self { kernels, bias }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        ctx: &mut ExecCtx,
        binds: &mut ParamBinds,
        x: Var,
    ) -> Result<Var, TensorError> {
        let k = binds.bind(tape, ctx, &self.kernels);
        let b = binds.bind(tape, ctx, &self.bias);
        let y = tape.conv2d(x, k, b)?;
        let y = tape.relu(y);
        tape.avg_pool2(y)
    }
}

/// Inverted dropout; the mask stream and stochastic/disabled mode come from
/// the [`ExecCtx`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dropout {
    rate: f64,
}

impl Dropout {
    pub fn new(rate: f64) -> Result<Self, TensorError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::DropoutRate { rate });
        }
        Ok(Self { rate })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        ctx: &mut ExecCtx,
        x: Var,
    ) -> Result<Var, TensorError> {
        match ctx.dropout_rng.as_mut() {
            Some(rng) => tape.dropout(x, self.rate, rng),
            None => Ok(x),
        }
    }
}

/// A trunk building block.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense(Dense),
    Conv(ConvBlock),
    Dropout(Dropout),
    /// Collapses `[n, d...]` to `[n, prod(d)]`.
    Flatten,
    Relu,
}

impl Layer {
    pub fn forward(
        &self,
        tape: &mut Tape,
        ctx: &mut ExecCtx,
        binds: &mut ParamBinds,
        x: Var,
    ) -> Result<Var, TensorError> {
        match self {
            Layer::Dense(d) => d.forward(tape, ctx, binds, x),
            Layer::Conv(c) => c.forward(tape, ctx, binds, x),
            Layer::Dropout(d) => d.forward(tape, ctx, x),
            Layer::Flatten => {
                let s = tape.shape(x).to_vec();
                let rest: usize = s[1..].iter().product();
                tape.reshape(x, &[s[0], rest])
            }
            Layer::Relu => Ok(tape.relu(x)),
        }
    }

    /// Parameter tensors in bind order.
    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Dense(d) => [&d.weight, &d.bias].into(),
            Layer::Conv(c) => [&c.kernels, &c.bias].into(),
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Dense(d) => [&mut d.weight, &mut d.bias].into(),
            Layer::Conv(c) => [&mut c.kernels, &mut c.bias].into(),
            _ => Vec::new(),
        }
    }
}

/// Left-to-right composition of a layer stack on the active tape.
pub fn stack_forward(
    layers: &[Layer],
    tape: &mut Tape,
    ctx: &mut ExecCtx,
    binds: &mut ParamBinds,
    x: Var,
) -> Result<Var, LayerError> {
    let mut h = x;
    for (index, layer) in layers.iter().enumerate() {
        h = layer
            .forward(tape, ctx, binds, h)
            .map_err(|source| LayerError::AtLayer { index, source })?;
    }
    Ok(h)
}

fn glorot(shape: &[usize], fan_in: usize, fan_out: usize, gain: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = gain * libm::sqrt(6.0 / (fan_in + fan_out) as f64);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::from_vec(data, shape)
        .expect("consistent by construction")
        .with_grad()
}
