//! Models built on top of the attention layers: the single-layer model for
//! the contextual retrieval task and a generic (optionally weight-shared)
//! encoder block.

use serde::{Deserialize, Serialize};

use crate::attention::{attention, AttentionConfig, AttentionTrace, AttentionWeights, Variant};
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear};
use crate::rng::Rng;
use crate::tensor::{ParamCount, ParamStore, Tensor};

/// How raw task features are embedded into the model width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    /// Single affine map `input → d`.
    Linear,
    /// `Linear(input → d) → ReLU → Linear(d → d)`.
    Mlp,
}

fn default_true() -> bool {
    true
}

fn default_encoder() -> EncoderKind {
    EncoderKind::Mlp
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub d: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub d_r: usize,
    /// Heads for multi-head, searches for compositional.
    pub searches: usize,
    /// Ignored for multi-head.
    #[serde(default)]
    pub retrievals: usize,
    /// Feed each token's own encoding to the readout next to its
    /// attention output.
    #[serde(default = "default_true")]
    pub self_concat: bool,
    #[serde(default = "default_encoder")]
    pub encoder: EncoderKind,
    /// Layer normalisation on the attention output.
    #[serde(default)]
    pub layer_norm: bool,
    /// Biases on the attention projections.
    #[serde(default)]
    pub attention_bias: bool,
    #[serde(default)]
    pub readout_bias: bool,
    #[serde(default)]
    pub dropout: f64,
}

impl ModelConfig {
    pub fn attention_config(&self) -> AttentionConfig {
        AttentionConfig {
            variant: self.variant,
            d: self.d,
            d_k: self.d_k,
            d_v: self.d_v,
            d_r: self.d_r,
            searches: self.searches,
            retrievals: match self.variant {
                Variant::MultiHead => self.searches,
                _ => self.retrievals,
            },
            mask_diagonal: true,
            bias: self.attention_bias,
            dropout: self.dropout,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.attention_config().validate()
    }
}

#[derive(Debug, Clone)]
pub enum Encoder {
    Linear(Linear),
    Mlp(Linear, Linear),
}

impl Encoder {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Encoder::Linear(l) => l.forward(x),
            Encoder::Mlp(a, b) => b.forward(&a.forward(x)?.relu()),
        }
    }

    pub fn input_width(&self) -> usize {
        match self {
            Encoder::Linear(l) | Encoder::Mlp(l, _) => l.fan_in(),
        }
    }
}

/// Single attention layer with a per-token scalar readout. No residual
/// path around attention; the diagonal of every search is masked.
#[derive(Debug, Clone)]
pub struct TaskModel {
    pub config: ModelConfig,
    pub attention_config: AttentionConfig,
    pub encoder: Encoder,
    pub attention: AttentionWeights,
    pub norm: Option<LayerNorm>,
    pub readout: Linear,
    pub store: ParamStore,
}

impl TaskModel {
    pub fn new(config: &ModelConfig, input_width: usize, rng: &mut Rng) -> Result<TaskModel> {
        config.validate()?;
        if input_width == 0 {
            return Err(Error::contract("task input width must be positive"));
        }
        let d = config.d;
        let mut store = ParamStore::new();
        let encoder = match config.encoder {
            EncoderKind::Linear => Encoder::Linear(Linear::new(&mut store, "encoder.0", input_width, d, true, rng)?),
            EncoderKind::Mlp => Encoder::Mlp(
                Linear::new(&mut store, "encoder.0", input_width, d, true, rng)?,
                Linear::new(&mut store, "encoder.1", d, d, false, rng)?,
            ),
        };
        let attention_config = config.attention_config();
        let attention = AttentionWeights::init(&attention_config, &mut store, "attn", rng)?;
        let norm = if config.layer_norm {
            Some(LayerNorm::new(&mut store, "norm", d)?)
        } else {
            None
        };
        let readout_in = if config.self_concat { 2 * d } else { d };
        let readout = Linear::new(&mut store, "readout", readout_in, 1, config.readout_bias, rng)?;
        Ok(TaskModel {
            config: config.clone(),
            attention_config,
            encoder,
            attention,
            norm,
            readout,
            store,
        })
    }

    pub fn input_width(&self) -> usize {
        self.encoder.input_width()
    }

    /// `[B, N, input]` (or `[N, input]`) → predictions `[B, N]` (or `[N]`).
    /// With `train_rng`, attention dropout is active.
    pub fn forward(&self, x: &Tensor, train_rng: Option<&mut Rng>) -> Result<(Tensor, AttentionTrace)> {
        let width = x.shape().last().copied().unwrap_or(0);
        if x.rank() < 2 || x.rank() > 3 || width != self.input_width() {
            return Err(Error::dim("task_forward", x.shape(), &[0, self.input_width()]));
        }
        let h = self.encoder.forward(x)?;
        let (mut a, trace) = attention(&h, &self.attention, &self.attention_config, train_rng)?;
        if let Some(norm) = &self.norm {
            a = norm.forward(&a)?;
        }
        let features = if self.config.self_concat {
            Tensor::concat(&[a, h], x.rank() - 1)?
        } else {
            a
        };
        let y = self.readout.forward(&features)?;
        let out_shape = &x.shape()[..x.rank() - 1];
        Ok((y.reshape(out_shape)?, trace))
    }

    pub fn parameter_count(&self) -> ParamCount {
        self.store.count()
    }

    /// Parameters whose gradient is zero by construction: key biases add
    /// the same amount to every logit of a softmax row, and the token term
    /// of the linear value scorer is shared by all retrievals it ranks.
    pub fn inert_parameters(&self) -> Vec<String> {
        self.store
            .iter()
            .map(|p| p.name.clone())
            .filter(|n| n.ends_with("key.bias") || n.ends_with(".score_query"))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderBlockConfig {
    pub attention: AttentionConfig,
    /// Hidden width of the feed-forward network.
    pub ff_hidden: usize,
    pub depth: usize,
    #[serde(default)]
    pub share_across_layers: bool,
}

/// Parameters of one encoder layer: attention then a two-layer MLP, each
/// followed by a residual add and layer norm (post-norm).
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub attention: AttentionWeights,
    pub norm_attention: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
    pub norm_ff: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub config: EncoderBlockConfig,
    pub layers: Vec<EncoderLayer>,
    pub store: ParamStore,
}

impl EncoderBlock {
    pub fn new(config: &EncoderBlockConfig, rng: &mut Rng) -> Result<EncoderBlock> {
        config.attention.validate()?;
        if config.ff_hidden == 0 {
            return Err(Error::contract("feed-forward hidden width must be positive"));
        }
        let d = config.attention.d;
        let distinct = match (config.depth, config.share_across_layers) {
            (0, _) => 0,
            (_, true) => 1,
            (k, false) => k,
        };
        let mut store = ParamStore::new();
        let mut layers = Vec::with_capacity(distinct);
        for k in 0..distinct {
            let p = if config.share_across_layers {
                "layer".to_string()
            } else {
                format!("layer.{k}")
            };
            layers.push(EncoderLayer {
                attention: AttentionWeights::init(&config.attention, &mut store, &format!("{p}.attn"), rng)?,
                norm_attention: LayerNorm::new(&mut store, &format!("{p}.norm_attn"), d)?,
                ff_in: Linear::new(&mut store, &format!("{p}.ff.0"), d, config.ff_hidden, true, rng)?,
                ff_out: Linear::new(&mut store, &format!("{p}.ff.1"), config.ff_hidden, d, true, rng)?,
                norm_ff: LayerNorm::new(&mut store, &format!("{p}.norm_ff"), d)?,
            });
        }
        Ok(EncoderBlock {
            config: config.clone(),
            layers,
            store,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut x = x.clone();
        for k in 0..self.config.depth {
            let layer = &self.layers[if self.config.share_across_layers { 0 } else { k }];
            x = layer.forward(&x, &self.config.attention)?;
        }
        Ok(x)
    }

    pub fn parameter_count(&self) -> ParamCount {
        self.store.count()
    }
}

impl EncoderLayer {
    pub fn forward(&self, x: &Tensor, config: &AttentionConfig) -> Result<Tensor> {
        let (a, _) = attention(x, &self.attention, config, None)?;
        let x = self.norm_attention.forward(&x.add(&a)?)?;
        let f = self.ff_out.forward(&self.ff_in.forward(&x)?.relu())?;
        self.norm_ff.forward(&x.add(&f)?)
    }
}
