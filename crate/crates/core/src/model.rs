//! The dual-head classifier: a shared trunk feeding a 2-class lesion head and
//! a 4-class stain head, plus the single-head stain-only variant, with
//! MC-dropout prediction.
//!
//! Both heads read the identical feature tensor from one trunk pass. Dropout
//! sits after the trunk's final feature layer and inside each head before its
//! output layer, so every prediction path is stochastic under MC sampling.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::layers::{stack_forward, ConvBlock, Dense, Dropout, ExecCtx, Layer, LayerError, ParamBinds};
use crate::rng::{self, stream};
use crate::tensor::{Tape, Tensor, TensorError, Var};

pub const LESION_CLASSES: usize = 2;
pub const STAIN_CLASSES: usize = 4;

/// Errors from model construction and evaluation.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model config: {0}")]
    Config(&'static str),
    #[error("input shape {got:?} does not match configured {want:?}")]
    InputShape { got: Vec<usize>, want: Vec<usize> },
    #[error("mc_predict requires T >= 1")]
    ZeroPasses,
}

/// Trunk family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum TrunkKind {
    Conv,
    Dense,
}

/// Shared feature extractor configuration.
///
/// `widths` are filter counts (conv) or hidden sizes (dense); the trunk ends
/// in a dense projection to `feature_dim`, a relu, and the feature dropout.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct TrunkConfig {
    pub kind: TrunkKind,
    pub widths: Vec<usize>,
    /// Input as (channels, height, width).
    pub input_shape: (usize, usize, usize),
    pub feature_dim: usize,
    /// Multiplier on the Glorot bound of every trunk layer's weights.
    pub init_gain: f64,
}

impl Default for TrunkConfig {
    fn default() -> Self {
        Self {
            kind: TrunkKind::Conv,
            widths: vec![4, 8],
            input_shape: (3, 16, 16),
            feature_dim: 24,
            init_gain: 1.0,
        }
    }
}

/// Full model configuration shared by the dual-head and stain-only variants.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct ModelConfig {
    pub trunk: TrunkConfig,
    pub head_hidden: usize,
    pub dropout_rate: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            trunk: TrunkConfig::default(),
            head_hidden: 12,
            dropout_rate: 0.2,
        }
    }
}

/// One task head: dense, dropout, dense to `classes` logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    hidden: Dense,
    dropout: Dropout,
    output: Dense,
}

impl Head {
    /// Initial weight gain for head layers. Trunk features reach the heads with a
    /// scale well above unit variance, so plain Glorot weights would put the initial
    /// logits deep into softmax saturation where per-sample gradients vanish. A gain
    /// below one keeps the starting logits near zero and the early steps label-driven.
    const INIT_GAIN: f64 = 0.25;

    fn init(feature_dim: usize, hidden: usize, classes: usize, rate: f64, seed: u64) -> Result<Self, ModelError> {
        Ok(Self {
            hidden: Dense::init_scaled(feature_dim, hidden, Self::INIT_GAIN, rng::derive_seed(seed, &[0])),
            dropout: Dropout::new(rate).map_err(LayerError::Tensor)?,
            output: Dense::init_scaled(hidden, classes, Self::INIT_GAIN, rng::derive_seed(seed, &[1])),
        })
    }

    fn forward(
        &self,
        tape: &mut Tape,
        ctx: &mut ExecCtx,
        binds: &mut ParamBinds,
        z: Var,
    ) -> Result<Var, TensorError> {
        let h = self.hidden.forward(tape, ctx, binds, z)?;
        let h = self.dropout.forward(tape, ctx, h)?;
        self.output.forward(tape, ctx, binds, h)
    }

    fn params(&self) -> Vec<&Tensor> {
        vec![
            &self.hidden.weight,
            &self.hidden.bias,
            &self.output.weight,
            &self.output.bias,
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.hidden.weight,
            &mut self.hidden.bias,
            &mut self.output.weight,
            &mut self.output.bias,
        ]
    }

    /// Euclidean norm of the output-layer weight matrix, logged each epoch to
    /// expose the degenerate fix where the head alone collapses its logits.
    pub fn output_weight_norm(&self) -> f64 {
        self.output.weight.l2_norm()
    }
}

/// Head arrangement: the dual lesion+stain model or the stain-only variant.
#[derive(Debug, Clone, PartialEq)]
pub enum HeadSet {
    Dual { lesion: Head, stain: Head },
    StainOnly { stain: Head },
}

/// Variant tag, used by checkpoints and reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum ModelKind {
    Dual,
    StainOnly,
}

/// Logit handles from one forward pass.
pub struct ModelOutput {
    pub lesion_logits: Option<Var>,
    pub stain_logits: Var,
}

/// Shared trunk plus heads.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    trunk: Vec<Layer>,
    heads: HeadSet,
    config: ModelConfig,
}

// init-seed section tags, shared across variants so the stain-only model's
// trunk and stain head start identical to the dual model's
const SECTION_TRUNK: u64 = 0;
const SECTION_LESION: u64 = 1;
const SECTION_STAIN: u64 = 2;

impl Model {
    /// Builds the dual-head model with deterministic per-layer init streams.
    pub fn dual(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let trunk = build_trunk(&config, seed)?;
        let lesion = Head::init(
            config.trunk.feature_dim,
            config.head_hidden,
            LESION_CLASSES,
            config.dropout_rate,
            rng::derive_seed(seed, &[SECTION_LESION]),
        )?;
        let stain = Head::init(
            config.trunk.feature_dim,
            config.head_hidden,
            STAIN_CLASSES,
            config.dropout_rate,
            rng::derive_seed(seed, &[SECTION_STAIN]),
        )?;
        Ok(Self {
            trunk,
            heads: HeadSet::Dual { lesion, stain },
            config,
        })
    }

    /// Builds the single-head stain-only variant on the same trunk family.
    pub fn stain_only(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let trunk = build_trunk(&config, seed)?;
        let stain = Head::init(
            config.trunk.feature_dim,
            config.head_hidden,
            STAIN_CLASSES,
            config.dropout_rate,
            rng::derive_seed(seed, &[SECTION_STAIN]),
        )?;
        Ok(Self {
            trunk,
            heads: HeadSet::StainOnly { stain },
            config,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn kind(&self) -> ModelKind {
        match self.heads {
            HeadSet::Dual { .. } => ModelKind::Dual,
            HeadSet::StainOnly { .. } => ModelKind::StainOnly,
        }
    }

    pub fn stain_head(&self) -> &Head {
        match &self.heads {
            HeadSet::Dual { stain, .. } | HeadSet::StainOnly { stain } => stain,
        }
    }

    pub fn lesion_head(&self) -> Option<&Head> {
        match &self.heads {
            HeadSet::Dual { lesion, .. } => Some(lesion),
            HeadSet::StainOnly { .. } => None,
        }
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<(), ModelError> {
        let got = tape.shape(x);
        let (c, h, w) = self.config.trunk.input_shape;
        if got.len() != 4 || got[1..] != [c, h, w] {
            return Err(ModelError::InputShape {
                got: got.to_vec(),
                want: vec![c, h, w],
            });
        }
        Ok(())
    }

    /// Trunk features `z` for a batch.
    pub fn features(
        &self,
        tape: &mut Tape,
        ctx: &mut ExecCtx,
        binds: &mut ParamBinds,
        x: Var,
    ) -> Result<Var, ModelError> {
        self.check_input(tape, x)?;
        Ok(stack_forward(&self.trunk, tape, ctx, binds, x)?)
    }

    /// Head logits from externally supplied features.
    pub fn forward_heads(
        &self,
        tape: &mut Tape,
        ctx: &mut ExecCtx,
        binds: &mut ParamBinds,
        z: Var,
    ) -> Result<ModelOutput, ModelError> {
        match &self.heads {
            HeadSet::Dual { lesion, stain } => {
                let lesion_logits = lesion.forward(tape, ctx, binds, z).map_err(LayerError::from)?;
                let stain_logits = stain.forward(tape, ctx, binds, z).map_err(LayerError::from)?;
                Ok(ModelOutput {
                    lesion_logits: Some(lesion_logits),
                    stain_logits,
                })
            }
            HeadSet::StainOnly { stain } => {
                let stain_logits = stain.forward(tape, ctx, binds, z).map_err(LayerError::from)?;
                Ok(ModelOutput {
                    lesion_logits: None,
                    stain_logits,
                })
            }
        }
    }

    /// One trunk evaluation shared by the heads.
    pub fn forward(
        &self,
        tape: &mut Tape,
        ctx: &mut ExecCtx,
        binds: &mut ParamBinds,
        x: Var,
    ) -> Result<ModelOutput, ModelError> {
        let z = self.features(tape, ctx, binds, x)?;
        self.forward_heads(tape, ctx, binds, z)
    }

    /// Parameters in bind order (trunk, then lesion head, then stain head).
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.trunk.iter().flat_map(|l| l.params()).collect();
        match &self.heads {
            HeadSet::Dual { lesion, stain } => {
                out.extend(lesion.params());
                out.extend(stain.params());
            }
            HeadSet::StainOnly { stain } => out.extend(stain.params()),
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> =
            self.trunk.iter_mut().flat_map(|l| l.params_mut()).collect();
        match &mut self.heads {
            HeadSet::Dual { lesion, stain } => {
                out.extend(lesion.params_mut());
                out.extend(stain.params_mut());
            }
            HeadSet::StainOnly { stain } => out.extend(stain.params_mut()),
        }
        out
    }

    /// Parameter names aligned with [`Model::params`] order.
    pub fn param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (i, layer) in self.trunk.iter().enumerate() {
            match layer {
                Layer::Dense(_) => {
                    out.push(format!("trunk.{i}.weight"));
                    out.push(format!("trunk.{i}.bias"));
                }
                Layer::Conv(_) => {
                    out.push(format!("trunk.{i}.kernels"));
                    out.push(format!("trunk.{i}.bias"));
                }
                _ => {}
            }
        }
        let head_names = |prefix: &str, out: &mut Vec<String>| {
            out.push(format!("{prefix}.hidden.weight"));
            out.push(format!("{prefix}.hidden.bias"));
            out.push(format!("{prefix}.output.weight"));
            out.push(format!("{prefix}.output.bias"));
        };
        match &self.heads {
            HeadSet::Dual { .. } => {
                head_names("lesion_head", &mut out);
                head_names("stain_head", &mut out);
            }
            HeadSet::StainOnly { .. } => head_names("stain_head", &mut out),
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Copies tape gradients back onto the owning parameter tensors.
    ///
    /// Parameters the loss never reaches accumulate nothing, which downstream
    /// optimizer steps treat as a zero gradient.
    pub fn accumulate_grads(&mut self, tape: &Tape, binds: &ParamBinds) {
        let vars = binds.vars().to_vec();
        for (param, var) in self.params_mut().into_iter().zip(vars) {
            if let Some(g) = tape.grad(var) {
                param.accumulate_grad(g);
            }
        }
    }

    pub fn clear_grads(&mut self) {
        for p in self.params_mut() {
            p.clear_grad();
        }
    }

    /// Deterministic class probabilities (dropout disabled) for a batch.
    pub fn predict_probs(
        &self,
        x: &Tensor,
    ) -> Result<(Option<Vec<f64>>, Vec<f64>), ModelError> {
        let mut tape = Tape::new();
        let mut ctx = ExecCtx::deterministic();
        let mut binds = ParamBinds::new();
        let xv = tape.leaf_detached(x);
        let out = self.forward(&mut tape, &mut ctx, &mut binds, xv)?;
        let stain = {
            let p = tape.softmax(out.stain_logits).map_err(LayerError::Tensor)?;
            tape.value(p).to_vec()
        };
        let lesion = match out.lesion_logits {
            Some(l) => {
                let p = tape.softmax(l).map_err(LayerError::Tensor)?;
                Some(tape.value(p).to_vec())
            }
            None => None,
        };
        Ok((lesion, stain))
    }

    /// MC-dropout prediction for a whole batch; see [`mc_predict`].
    pub fn mc_predict_batch(
        &self,
        x: &Tensor,
        t_passes: usize,
        seed: u64,
    ) -> Result<McBatch, ModelError> {
        if t_passes == 0 {
            return Err(ModelError::ZeroPasses);
        }
        let n = x.shape()[0];
        let mut stain_acc = McAccumulator::new(n, STAIN_CLASSES);
        let mut lesion_acc = match self.kind() {
            ModelKind::Dual => Some(McAccumulator::new(n, LESION_CLASSES)),
            ModelKind::StainOnly => None,
        };
        for pass in 0..t_passes {
            let rng = rng::substream(seed, &[stream::MC_PASS, pass as u64]);
            let mut tape = Tape::new();
            let mut ctx = ExecCtx::stochastic(rng);
            let mut binds = ParamBinds::new();
            let xv = tape.leaf_detached(x);
            let out = self.forward(&mut tape, &mut ctx, &mut binds, xv)?;
            let sp = tape.softmax(out.stain_logits).map_err(LayerError::Tensor)?;
            stain_acc.push(tape.value(sp));
            if let (Some(acc), Some(logits)) = (lesion_acc.as_mut(), out.lesion_logits) {
                let lp = tape.softmax(logits).map_err(LayerError::Tensor)?;
                acc.push(tape.value(lp));
            }
        }
        Ok(McBatch {
            lesion: lesion_acc.map(|a| a.finish(t_passes)),
            stain: stain_acc.finish(t_passes),
        })
    }
}

/// Monte Carlo summary for one sample and one head.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct MCPrediction {
    pub mean_probs: Vec<f64>,
    pub var_probs: Vec<f64>,
    /// Mean over classes of `var_probs`.
    pub uncertainty: f64,
    pub t: usize,
}

/// MC predictions for a batch, per head.
pub struct McBatch {
    pub lesion: Option<Vec<MCPrediction>>,
    pub stain: Vec<MCPrediction>,
}

/// MC-dropout prediction for a single sample: T stochastic passes, per-class
/// sample mean and population (1/T) variance of the softmax outputs.
///
/// When every pass produces bitwise-identical probabilities (e.g. dropout
/// rate 0), the variance and uncertainty are exactly zero and the mean equals
/// the deterministic output.
pub fn mc_predict(
    model: &Model,
    x: &Tensor,
    t_passes: usize,
    seed: u64,
) -> Result<(Option<MCPrediction>, MCPrediction), ModelError> {
    let batch = model.mc_predict_batch(x, t_passes, seed)?;
    Ok((
        batch.lesion.map(|mut v| v.swap_remove(0)),
        {
            let mut v = batch.stain;
            v.swap_remove(0)
        },
    ))
}

struct McAccumulator {
    n: usize,
    k: usize,
    passes: usize,
    first: Vec<f64>,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
    identical: Vec<bool>,
}

impl McAccumulator {
    fn new(n: usize, k: usize) -> Self {
        Self {
            n,
            k,
            passes: 0,
            first: vec![0.0; n * k],
            sum: vec![0.0; n * k],
            sum_sq: vec![0.0; n * k],
            identical: vec![true; n],
        }
    }

    fn push(&mut self, probs: &[f64]) {
        debug_assert_eq!(probs.len(), self.n * self.k);
        if self.passes == 0 {
            self.first.copy_from_slice(probs);
        }
        self.passes += 1;
        for i in 0..self.n {
            if self.identical[i] {
                let a = &self.first[i * self.k..(i + 1) * self.k];
                let b = &probs[i * self.k..(i + 1) * self.k];
                if !a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()) {
                    self.identical[i] = false;
                }
            }
        }
        for ((s, q), &p) in self.sum.iter_mut().zip(self.sum_sq.iter_mut()).zip(probs) {
            *s += p;
            *q += p * p;
        }
    }

    fn finish(self, t: usize) -> Vec<MCPrediction> {
        let tf = t as f64;
        (0..self.n)
            .map(|i| {
                let lo = i * self.k;
                let hi = lo + self.k;
                if self.identical[i] {
                    return MCPrediction {
                        mean_probs: self.first[lo..hi].to_vec(),
                        var_probs: vec![0.0; self.k],
                        uncertainty: 0.0,
                        t,
                    };
                }
                let mean_probs: Vec<f64> =
                    self.sum[lo..hi].iter().map(|&s| s / tf).collect();
                let var_probs: Vec<f64> = self.sum_sq[lo..hi]
                    .iter()
                    .zip(&mean_probs)
                    .map(|(&q, &m)| (q / tf - m * m).max(0.0))
                    .collect();
                let uncertainty = var_probs.iter().sum::<f64>() / self.k as f64;
                MCPrediction {
                    mean_probs,
                    var_probs,
                    uncertainty,
                    t,
                }
            })
            .collect()
    }
}

fn build_trunk(config: &ModelConfig, seed: u64) -> Result<Vec<Layer>, ModelError> {
    let (c, h, w) = config.trunk.input_shape;
    if c == 0 || h == 0 || w == 0 || config.trunk.feature_dim == 0 || config.head_hidden == 0 {
        return Err(ModelError::Config("dimensions must be positive"));
    }
    let dropout = Dropout::new(config.dropout_rate).map_err(LayerError::Tensor)?;
    let gain = config.trunk.init_gain;
    if !(gain.is_finite() && gain > 0.0) {
        return Err(ModelError::Config("trunk init_gain must be finite and positive"));
    }
    let mut layers = Vec::new();
    let layer_seed = |i: u64| rng::derive_seed(seed, &[SECTION_TRUNK, i]);
    let flat_in;
    match config.trunk.kind {
        TrunkKind::Conv => {
            let mut ch = c;
            let (mut hh, mut ww) = (h, w);
            for (i, &f) in config.trunk.widths.iter().enumerate() {
                if hh < 2 || ww < 2 || hh % 2 != 0 || ww % 2 != 0 {
                    return Err(ModelError::Config(
                        "conv trunk needs even spatial dims at every block",
                    ));
                }
                layers.push(Layer::Conv(ConvBlock::init_scaled(ch, f, gain, layer_seed(i as u64))));
                ch = f;
                hh /= 2;
                ww /= 2;
            }
            layers.push(Layer::Flatten);
            flat_in = ch * hh * ww;
        }
        TrunkKind::Dense => {
            layers.push(Layer::Flatten);
            let mut prev = c * h * w;
            for (i, &width) in config.trunk.widths.iter().enumerate() {
                if width == 0 {
                    return Err(ModelError::Config("zero trunk width"));
                }
                layers.push(Layer::Dense(Dense::init_scaled(prev, width, gain, layer_seed(i as u64))));
                layers.push(Layer::Relu);
                prev = width;
            }
            flat_in = prev;
        }
    }
    layers.push(Layer::Dense(Dense::init_scaled(
        flat_in,
        config.trunk.feature_dim,
        gain,
        layer_seed(config.trunk.widths.len() as u64),
    )));
    layers.push(Layer::Relu);
    layers.push(Layer::Dropout(dropout));
    Ok(layers)
}
