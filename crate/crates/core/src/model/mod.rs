//! A small pre-norm transformer with per-layer output capture, analytic
//! gradients, an Adam trainer and deterministic synthetic tasks.
//!
//! Parameters are stored as `f32` [`Tensor`]s in a fixed order; every
//! forward and backward pass runs in `f64` (see [`compute`]).
//!
//! Parameter names:
//!
//! ```text
//! embed.tok            vocab_size x d_model
//! embed.pos            max_seq_len x d_model
//! layer.{i}.attn.q     d_model x d_model      (rows = output features)
//! layer.{i}.attn.k     d_model x d_model
//! layer.{i}.attn.v     d_model x d_model
//! layer.{i}.attn.out   d_model x d_model
//! layer.{i}.ln1.g      d_model
//! layer.{i}.ln1.b      d_model
//! layer.{i}.ffn.in     d_ff x d_model
//! layer.{i}.ffn.out    d_model x d_ff
//! layer.{i}.ln2.g      d_model
//! layer.{i}.ln2.b      d_model
//! final_ln.g           d_model
//! final_ln.b           d_model
//! head.w               n_out x d_model
//! head.b               n_out
//! ```
//!
//! Classification pools the final hidden states by mean over positions and
//! attends over the whole sequence; language modelling predicts every next
//! token under a causal mask.

pub mod compute;
mod data;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

pub use compute::{cross_entropy, ParamsF64, StepStats};
pub use data::{
    count_label, gen_classification, gen_classification_with, gen_lm, lm_dataset_from_stream,
    Batch, Dataset, Example, MarkovChain, DEFAULT_TOKEN_A, DEFAULT_TOKEN_B,
};
pub use train::{train, EpochLog, TrainLog, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskHead {
    Classification { n_classes: usize },
    LanguageModel,
}

impl TaskHead {
    pub fn is_classification(&self) -> bool {
        matches!(self, TaskHead::Classification { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub task_head: TaskHead,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_layers == 0 {
            return fail("n_layers must be >= 1".into());
        }
        if self.vocab_size < 2 {
            return fail("vocab_size must be >= 2".into());
        }
        if self.n_heads == 0 || self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return fail(format!(
                "d_model ({}) must be a positive multiple of n_heads ({})",
                self.d_model, self.n_heads
            ));
        }
        if self.d_ff == 0 || self.max_seq_len == 0 {
            return fail("d_ff and max_seq_len must be >= 1".into());
        }
        if let TaskHead::Classification { n_classes } = self.task_head {
            if n_classes < 2 {
                return fail("classification needs at least 2 classes".into());
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Width of the output layer.
    pub fn n_outputs(&self) -> usize {
        match self.task_head {
            TaskHead::Classification { n_classes } => n_classes,
            TaskHead::LanguageModel => self.vocab_size,
        }
    }

    pub fn layout(&self) -> Layout {
        Layout { cfg: *self }
    }
}

/// Per-layer parameter components in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Component {
    AttnQ,
    AttnK,
    AttnV,
    AttnOut,
    Ln1G,
    Ln1B,
    FfnIn,
    FfnOut,
    Ln2G,
    Ln2B,
}

impl Component {
    pub const ALL: [Component; 10] = [
        Component::AttnQ,
        Component::AttnK,
        Component::AttnV,
        Component::AttnOut,
        Component::Ln1G,
        Component::Ln1B,
        Component::FfnIn,
        Component::FfnOut,
        Component::Ln2G,
        Component::Ln2B,
    ];

    /// The weight matrices of a layer; these are what precision plans,
    /// pruning and quantization act on.
    pub const MATRICES: [Component; 6] = [
        Component::AttnQ,
        Component::AttnK,
        Component::AttnV,
        Component::AttnOut,
        Component::FfnIn,
        Component::FfnOut,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::AttnQ => "attn.q",
            Component::AttnK => "attn.k",
            Component::AttnV => "attn.v",
            Component::AttnOut => "attn.out",
            Component::Ln1G => "ln1.g",
            Component::Ln1B => "ln1.b",
            Component::FfnIn => "ffn.in",
            Component::FfnOut => "ffn.out",
            Component::Ln2G => "ln2.g",
            Component::Ln2B => "ln2.b",
        }
    }

    pub fn is_matrix(self) -> bool {
        Self::MATRICES.contains(&self)
    }
}

const PER_LAYER: usize = Component::ALL.len();

/// Index arithmetic for the fixed parameter order.
#[derive(Debug, Clone, Copy)]
pub struct Layout {
    cfg: ModelConfig,
}

/// What a parameter index refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    TokenEmbedding,
    PositionEmbedding,
    Layer(usize, Component),
    FinalLnGain,
    FinalLnBias,
    HeadWeight,
    HeadBias,
}

impl Layout {
    pub const TOK: usize = 0;
    pub const POS: usize = 1;

    pub fn len(&self) -> usize {
        2 + PER_LAYER * self.cfg.n_layers + 4
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn layer(&self, layer: usize, c: Component) -> usize {
        debug_assert!(layer < self.cfg.n_layers);
        2 + layer * PER_LAYER + c as usize
    }

    pub fn final_g(&self) -> usize {
        2 + PER_LAYER * self.cfg.n_layers
    }

    pub fn final_b(&self) -> usize {
        self.final_g() + 1
    }

    pub fn head_w(&self) -> usize {
        self.final_g() + 2
    }

    pub fn head_b(&self) -> usize {
        self.final_g() + 3
    }

    pub fn role(&self, index: usize) -> ParamRole {
        match index {
            Self::TOK => ParamRole::TokenEmbedding,
            Self::POS => ParamRole::PositionEmbedding,
            i if i < self.final_g() => {
                let j = i - 2;
                ParamRole::Layer(j / PER_LAYER, Component::ALL[j % PER_LAYER])
            }
            i if i == self.final_g() => ParamRole::FinalLnGain,
            i if i == self.final_b() => ParamRole::FinalLnBias,
            i if i == self.head_w() => ParamRole::HeadWeight,
            _ => ParamRole::HeadBias,
        }
    }

    pub fn name(&self, index: usize) -> String {
        match self.role(index) {
            ParamRole::TokenEmbedding => "embed.tok".into(),
            ParamRole::PositionEmbedding => "embed.pos".into(),
            ParamRole::Layer(l, c) => format!("layer.{l}.{}", c.name()),
            ParamRole::FinalLnGain => "final_ln.g".into(),
            ParamRole::FinalLnBias => "final_ln.b".into(),
            ParamRole::HeadWeight => "head.w".into(),
            ParamRole::HeadBias => "head.b".into(),
        }
    }

    pub fn shape(&self, index: usize) -> Vec<usize> {
        let c = &self.cfg;
        let d = c.d_model;
        match self.role(index) {
            ParamRole::TokenEmbedding => vec![c.vocab_size, d],
            ParamRole::PositionEmbedding => vec![c.max_seq_len, d],
            ParamRole::Layer(_, comp) => match comp {
                Component::AttnQ | Component::AttnK | Component::AttnV | Component::AttnOut => {
                    vec![d, d]
                }
                Component::FfnIn => vec![c.d_ff, d],
                Component::FfnOut => vec![d, c.d_ff],
                _ => vec![d],
            },
            ParamRole::FinalLnGain | ParamRole::FinalLnBias => vec![d],
            ParamRole::HeadWeight => vec![c.n_outputs(), d],
            ParamRole::HeadBias => vec![c.n_outputs()],
        }
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        (0..self.len()).find(|&i| self.name(i) == name)
    }

    /// Indices of the weight matrices of `layer`.
    pub fn layer_matrices(&self, layer: usize) -> [usize; 6] {
        Component::MATRICES.map(|c| self.layer(layer, c))
    }

    /// Indices of every parameter belonging to `layer`.
    pub fn layer_params(&self, layer: usize) -> std::ops::Range<usize> {
        let start = self.layer(layer, Component::ALL[0]);
        start..start + PER_LAYER
    }
}

/// Classification accuracy or language-model perplexity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Metric {
    Accuracy(f64),
    Perplexity(f64),
}

impl Metric {
    pub fn value(&self) -> f64 {
        match *self {
            Metric::Accuracy(v) | Metric::Perplexity(v) => v,
        }
    }

    /// Degradation from `self` (base) to `quantized`: accuracy drop
    /// `base - quantized`, perplexity drop `quantized - base`.
    pub fn drop_to(&self, quantized: &Metric) -> Result<f64> {
        match (self, quantized) {
            (Metric::Accuracy(b), Metric::Accuracy(q)) => Ok(b - q),
            (Metric::Perplexity(b), Metric::Perplexity(q)) => Ok(q - b),
            _ => Err(Error::domain("metric kinds differ")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `batch x n_classes` for classification, `(batch * seq) x vocab` for LM.
    pub logits: Tensor,
    /// Post-residual hidden state of each block, `(batch * seq) x d_model`.
    pub layer_outputs: Option<Vec<Tensor>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerModel {
    config: ModelConfig,
    params: Vec<Tensor>,
}

impl TransformerModel {
    /// All-zero parameters.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        let params = (0..layout.len())
            .map(|i| Tensor::zeros(&layout.shape(i)))
            .collect();
        Ok(Self { config, params })
    }

    /// Random initialization: scaled normal matrices, unit layer-norm gains,
    /// zero biases.
    pub fn init(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        let mut model = Self::zeros(config)?;
        let layout = config.layout();
        let depth_scale = 1.0 / (2.0 * config.n_layers as f64).sqrt();
        for i in 0..layout.len() {
            let shape = layout.shape(i);
            let fan_in = *shape.last().unwrap() as f64;
            let std = match layout.role(i) {
                ParamRole::TokenEmbedding | ParamRole::PositionEmbedding => Some(0.5),
                ParamRole::Layer(_, Component::AttnOut | Component::FfnOut) => {
                    Some(depth_scale / fan_in.sqrt())
                }
                ParamRole::Layer(_, c) if c.is_matrix() => Some(1.0 / fan_in.sqrt()),
                ParamRole::HeadWeight => Some(1.0 / fan_in.sqrt()),
                _ => None,
            };
            let t = &mut model.params[i];
            match (std, layout.role(i)) {
                (Some(s), _) => t
                    .data_mut()
                    .iter_mut()
                    .for_each(|x| *x = (rng.normal() * s) as f32),
                (None, ParamRole::Layer(_, Component::Ln1G | Component::Ln2G))
                | (None, ParamRole::FinalLnGain) => t.data_mut().fill(1.0),
                _ => {}
            }
        }
        Ok(model)
    }

    /// Build from tensors in layout order, checking every shape.
    pub fn from_params(config: ModelConfig, params: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        if params.len() != layout.len() {
            return Err(Error::dim(format!(
                "expected {} parameter tensors, got {}",
                layout.len(),
                params.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            if p.shape() != layout.shape(i) {
                return Err(Error::dim(format!(
                    "{}: expected shape {:?}, got {:?}",
                    layout.name(i),
                    layout.shape(i),
                    p.shape()
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> Layout {
        self.config.layout()
    }

    pub fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.params
    }

    pub fn tensor(&self, index: usize) -> &Tensor {
        &self.params[index]
    }

    /// Replace one parameter; the shape must stay the same.
    pub fn set_tensor(&mut self, index: usize, t: Tensor) -> Result<()> {
        if t.shape() != self.params[index].shape() {
            return Err(Error::dim(format!(
                "{}: shape {:?} does not match {:?}",
                self.layout().name(index),
                t.shape(),
                self.params[index].shape()
            )));
        }
        self.params[index] = t;
        Ok(())
    }

    pub fn tensor_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.params[index]
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.layout().index_of(name).map(|i| &self.params[i])
    }

    /// `(name, tensor)` pairs in layout order.
    pub fn named_params(&self) -> impl Iterator<Item = (String, &Tensor)> + '_ {
        let layout = self.layout();
        self.params
            .iter()
            .enumerate()
            .map(move |(i, t)| (layout.name(i), t))
    }

    pub fn params_f64(&self) -> ParamsF64 {
        self.params.iter().map(Tensor::to_f64).collect()
    }

    /// True when every parameter is bit-identical to `other`'s.
    pub fn bit_eq(&self, other: &TransformerModel) -> bool {
        self.config == other.config
            && self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.bit_eq(b))
    }

    pub fn forward(&self, batch: &Batch, capture: bool) -> Result<ForwardOutput> {
        compute::forward(self, batch, capture)
    }

    /// Mean cross-entropy of the model on one batch.
    pub fn loss(&self, batch: &Batch) -> Result<f64> {
        compute::loss_f64(&self.config, &self.params_f64(), batch)
    }

    /// Gradient of [`TransformerModel::loss`] with respect to every parameter.
    pub fn backward(&self, batch: &Batch) -> Result<Vec<Tensor>> {
        let (_, grads) = compute::loss_and_grad_f64(&self.config, &self.params_f64(), batch)?;
        let layout = self.layout();
        grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| Tensor::new(layout.shape(i), g.into_iter().map(|x| x as f32).collect()))
            .collect()
    }

    /// Final layer norm and output head applied to captured last-layer states
    /// of shape `(batch * seq) x d_model`.
    pub fn head_forward(&self, hidden: &Tensor, batch_size: usize) -> Result<Tensor> {
        compute::head_forward(self, hidden, batch_size)
    }

    pub fn evaluate(&self, dataset: &Dataset) -> Result<Metric> {
        compute::evaluate(self, dataset)
    }
}
