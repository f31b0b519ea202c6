//! The channel-time patch transformer.
//!
//! Pipeline for one look-back window `L x M`: reversible instance
//! normalization, per-channel patching, patch projection plus a learnable
//! positional table, a stack of channel-time encoder blocks, a
//! channel-shared flatten-linear head and denormalization back to original
//! units. Setting [`ModelConfig::channel_attention`] to `false` drops the
//! channel sublayers and yields the channel-independent baseline.

pub mod attention;
pub mod config;
pub mod encoder;
pub mod params;
pub mod patch;
pub mod revin;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

pub use attention::{channel_attention, time_attention, AttentionOutput, AttentionVars};
pub use config::{num_patches, ModelConfig};
pub use encoder::{encoder_block, prediction_head, BlockSettings, BlockVars};
pub use params::{Bound, ParamId, ParamSet};
pub use patch::{patch_source_index, patchify, project_and_embed};
pub use revin::{revin_denormalize, revin_normalize, RevInState};

use crate::error::{Error, Result, TensorError};
use crate::tensor::{Tape, Tensor, Var};
use encoder::{FeedForwardVars, NormVars, SublayerVars};

#[derive(Debug, Clone, Copy)]
struct AttentionIds {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    bo: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct NormIds {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct FeedForwardIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct SublayerIds {
    attention: AttentionIds,
    attention_norm: NormIds,
    ffn: FeedForwardIds,
    ffn_norm: NormIds,
}

#[derive(Debug, Clone)]
struct BlockIds {
    channel: Option<SublayerIds>,
    time: SublayerIds,
}

#[derive(Debug, Clone)]
struct Layout {
    proj_w: ParamId,
    proj_b: ParamId,
    pos: ParamId,
    blocks: Vec<BlockIds>,
    head_w: ParamId,
    head_b: ParamId,
}

/// Parameter initializer: Glorot-uniform weights, zero biases, unit
/// layer-norm gains, `N(0, 0.02^2)` positional table.
struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn glorot(&mut self, fan_in: usize, fan_out: usize) -> Tensor {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-a, a).expect("finite bounds");
        Tensor::from_fn(&[fan_in, fan_out], |_| dist.sample(&mut self.rng))
    }

    fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let dist = Normal::new(0.0, std).expect("positive std");
        Tensor::from_fn(shape, |_| dist.sample(&mut self.rng))
    }
}

fn build_layout(config: &ModelConfig, params: &mut ParamSet, init: &mut Init) -> Layout {
    let (p, d, f, t) = (config.patch_len, config.model_dim, config.ffn_dim, config.horizon);
    let n = config.num_patches();

    let proj_w = params.add("patch_proj.weight", init.glorot(p, d));
    let proj_b = params.add("patch_proj.bias", Tensor::zeros(&[d]));
    let pos = params.add("pos_embedding", init.normal(&[n, d], 0.02));

    let sublayer = |params: &mut ParamSet, init: &mut Init, prefix: String| {
        let mut add = |name: &str, value: Tensor| params.add(format!("{prefix}.{name}"), value);
        let attention = AttentionIds {
            wq: add("attn.wq", init.glorot(d, d)),
            wk: add("attn.wk", init.glorot(d, d)),
            wv: add("attn.wv", init.glorot(d, d)),
            wo: add("attn.wo", init.glorot(d, d)),
            bo: add("attn.bo", Tensor::zeros(&[d])),
        };
        let attention_norm = NormIds {
            gain: add("attn_norm.gain", Tensor::full(&[d], 1.0)),
            bias: add("attn_norm.bias", Tensor::zeros(&[d])),
        };
        let ffn = FeedForwardIds {
            w1: add("ffn.w1", init.glorot(d, f)),
            b1: add("ffn.b1", Tensor::zeros(&[f])),
            w2: add("ffn.w2", init.glorot(f, d)),
            b2: add("ffn.b2", Tensor::zeros(&[d])),
        };
        let ffn_norm = NormIds {
            gain: add("ffn_norm.gain", Tensor::full(&[d], 1.0)),
            bias: add("ffn_norm.bias", Tensor::zeros(&[d])),
        };
        SublayerIds {
            attention,
            attention_norm,
            ffn,
            ffn_norm,
        }
    };

    let blocks = (0..config.encoder_layers)
        .map(|i| {
            let channel = config
                .channel_attention
                .then(|| sublayer(params, init, format!("blocks.{i}.channel")));
            let time = sublayer(params, init, format!("blocks.{i}.time"));
            BlockIds { channel, time }
        })
        .collect();

    let head_w = params.add("head.weight", init.glorot(n * d, t));
    let head_b = params.add("head.bias", Tensor::zeros(&[t]));
    Layout {
        proj_w,
        proj_b,
        pos,
        blocks,
        head_w,
        head_b,
    }
}

/// Result of a recorded forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Forecast `[B, T, M]` in original units.
    pub prediction: Var,
    /// Per layer, `[B, N, H_c, M, M]`; empty when channel attention is off.
    pub channel_weights: Vec<Var>,
    /// Per layer, `[B, M, H_t, N, N]`.
    pub time_weights: Vec<Var>,
}

/// Per-layer `M x M` channel-attention weights averaged over patches and
/// heads.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionSummary {
    pub layers: Vec<Tensor>,
}

impl AttentionSummary {
    /// Element-wise average over all layers.
    pub fn mean(&self) -> Tensor {
        let mut acc = Tensor::zeros(self.layers[0].shape());
        for layer in &self.layers {
            for (a, v) in acc.data_mut().iter_mut().zip(layer.data()) {
                *a += v;
            }
        }
        let k = self.layers.len() as f64;
        acc.data_mut().iter_mut().for_each(|a| *a /= k);
        acc
    }
}

#[derive(Debug, Clone)]
pub struct CtPatchTst {
    config: ModelConfig,
    params: ParamSet,
    layout: Layout,
}

impl CtPatchTst {
    /// Freshly initialized model; identical seeds give identical weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let layout = build_layout(&config, &mut params, &mut init);
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    /// Rebuilds a model from `config` and named parameter values, checking
    /// that every expected parameter is present with the expected shape.
    pub fn from_named(config: ModelConfig, named: &[(String, Tensor)]) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        if named.len() != model.params.len() {
            return Err(Error::Config(format!(
                "parameter count mismatch: model has {}, source has {}",
                model.params.len(),
                named.len()
            )));
        }
        for (name, value) in named {
            let id = model
                .params
                .find(name)
                .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))?;
            let slot = model.params.get_mut(id);
            if slot.shape() != value.shape() {
                return Err(crate::error::CheckpointError::ShapeMismatch {
                    name: name.clone(),
                    expected: slot.shape().to_vec(),
                    found: value.shape().to_vec(),
                }
                .into());
            }
            *slot = value.clone();
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn settings(&self) -> BlockSettings {
        BlockSettings {
            channel_heads: self.config.channel_heads,
            time_heads: self.config.time_heads,
            layernorm_eps: self.config.layernorm_eps,
            dropout: self.config.dropout,
        }
    }

    fn sublayer_vars(bound: &Bound, ids: &SublayerIds) -> SublayerVars {
        let a = &ids.attention;
        SublayerVars {
            attention: AttentionVars {
                wq: bound[a.wq],
                wk: bound[a.wk],
                wv: bound[a.wv],
                wo: bound[a.wo],
                bo: bound[a.bo],
            },
            attention_norm: NormVars {
                gain: bound[ids.attention_norm.gain],
                bias: bound[ids.attention_norm.bias],
            },
            ffn: FeedForwardVars {
                w1: bound[ids.ffn.w1],
                b1: bound[ids.ffn.b1],
                w2: bound[ids.ffn.w2],
                b2: bound[ids.ffn.b2],
            },
            ffn_norm: NormVars {
                gain: bound[ids.ffn_norm.gain],
                bias: bound[ids.ffn_norm.bias],
            },
        }
    }

    /// Tape handles of the encoder block `layer`.
    pub fn block_vars(&self, bound: &Bound, layer: usize) -> BlockVars {
        let ids = &self.layout.blocks[layer];
        BlockVars {
            channel: ids.channel.as_ref().map(|c| Self::sublayer_vars(bound, c)),
            time: Self::sublayer_vars(bound, &ids.time),
        }
    }

    /// Records a forward pass for a batch `x` of shape `[B, L, M]`.
    ///
    /// Dropout is applied only when `rng` is given.
    pub fn forward_graph(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardOutput, TensorError> {
        let c = &self.config;
        let [_, len, m] = *tape.shape(x) else {
            return Err(TensorError::Contract(format!(
                "forward expects [B, L, M], got {:?}",
                tape.shape(x)
            )));
        };
        if len != c.lookback || m != c.channels {
            return Err(TensorError::Shape {
                op: "forward",
                lhs: tape.shape(x).to_vec(),
                rhs: vec![c.lookback, c.channels],
            });
        }
        if !tape.value(x).all_finite() {
            return Err(TensorError::NonFinite("forward input"));
        }
        let l = &self.layout;

        let channels_first = tape.permute(x, &[0, 2, 1])?;
        let (normalized, stats) = revin::normalize_graph(tape, channels_first, c.revin_eps)?;
        let patches = patch::patchify_graph(tape, normalized, c.patch_len, c.stride)?;
        let mut h = project_and_embed(tape, patches, bound[l.proj_w], bound[l.proj_b], bound[l.pos])?;

        let settings = self.settings();
        let mut channel_weights = Vec::new();
        let mut time_weights = Vec::new();
        for layer in 0..l.blocks.len() {
            let vars = self.block_vars(bound, layer);
            let out = encoder_block(tape, h, &vars, &settings, rng.as_deref_mut())?;
            h = out.output;
            channel_weights.extend(out.channel_weights);
            time_weights.push(out.time_weights);
        }

        let head = prediction_head(tape, h, bound[l.head_w], bound[l.head_b])?;
        let restored = revin::denormalize_graph(tape, head, stats)?;
        let prediction = tape.permute(restored, &[0, 2, 1])?;
        Ok(ForwardOutput {
            prediction,
            channel_weights,
            time_weights,
        })
    }

    /// Inference on one window `L x M` (returning `T x M`) or a batch
    /// `B x L x M` (returning `B x T x M`).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let single = x.rank() == 2;
        let batched = if single {
            x.clone().reshape(&[1, x.shape()[0], x.shape()[1]])?
        } else {
            x.clone()
        };
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let input = tape.constant(batched);
        let out = self.forward_graph(&mut tape, &bound, input, None)?;
        let pred = tape.value(out.prediction).clone();
        if single {
            let s = pred.shape().to_vec();
            Ok(pred.reshape(&s[1..])?)
        } else {
            Ok(pred)
        }
    }

    /// Channel-attention maps of one window `L x M`, averaged over all
    /// patches and heads, one `M x M` matrix per encoder layer.
    pub fn channel_attention_summary(&self, x: &Tensor) -> Result<AttentionSummary> {
        if !self.config.channel_attention {
            return Err(TensorError::Contract(
                "channel attention summary requested from a channel-independent model".into(),
            )
            .into());
        }
        let [len, m] = *x.shape() else {
            return Err(TensorError::Contract(format!("expected L x M window, got {:?}", x.shape())).into());
        };
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let input = tape.constant(x.clone().reshape(&[1, len, m])?);
        let out = self.forward_graph(&mut tape, &bound, input, None)?;
        let layers = out
            .channel_weights
            .iter()
            .map(|&w| {
                let v = tape.value(w);
                let groups = v.len() / (m * m);
                let mut acc = Tensor::zeros(&[m, m]);
                for g in v.data().chunks(m * m) {
                    for (a, x) in acc.data_mut().iter_mut().zip(g) {
                        *a += x;
                    }
                }
                acc.data_mut().iter_mut().for_each(|a| *a /= groups as f64);
                acc
            })
            .collect();
        Ok(AttentionSummary { layers })
    }
}
