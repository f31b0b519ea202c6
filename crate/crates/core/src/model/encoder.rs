//! Channel-time encoder block and the flatten-linear prediction head.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::TensorError;
use crate::model::attention::{channel_attention, time_attention, AttentionVars};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy)]
pub struct FeedForwardVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct NormVars {
    pub gain: Var,
    pub bias: Var,
}

/// Attention, then feed-forward, each closed by residual add and layer norm.
#[derive(Debug, Clone, Copy)]
pub struct SublayerVars {
    pub attention: AttentionVars,
    pub attention_norm: NormVars,
    pub ffn: FeedForwardVars,
    pub ffn_norm: NormVars,
}

#[derive(Debug, Clone, Copy)]
pub struct BlockVars {
    /// Absent in the channel-independent variant.
    pub channel: Option<SublayerVars>,
    pub time: SublayerVars,
}

#[derive(Debug, Clone, Copy)]
pub struct BlockSettings {
    pub channel_heads: usize,
    pub time_heads: usize,
    pub layernorm_eps: f64,
    pub dropout: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct BlockOutput {
    pub output: Var,
    pub channel_weights: Option<Var>,
    pub time_weights: Var,
}

/// Position-wise `D -> F -> D` network with GELU.
pub fn feed_forward(tape: &mut Tape, x: Var, p: &FeedForwardVars) -> Result<Var, TensorError> {
    let h = tape.matmul(x, p.w1)?;
    let h = tape.add_broadcast(h, p.b1)?;
    let h = tape.gelu(h);
    let out = tape.matmul(h, p.w2)?;
    tape.add_broadcast(out, p.b2)
}

/// Inverted dropout; identity when `rng` is `None` or `rate` is zero.
pub fn dropout(tape: &mut Tape, x: Var, rate: f64, rng: Option<&mut ChaCha8Rng>) -> Result<Var, TensorError> {
    let Some(rng) = rng else { return Ok(x) };
    if rate <= 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - rate);
    let mask = Tensor::from_fn(tape.shape(x), |_| {
        if rng.random::<f64>() < rate {
            0.0
        } else {
            keep
        }
    });
    let mask = tape.constant(mask);
    tape.mul(x, mask)
}

fn add_norm(tape: &mut Tape, residual: Var, update: Var, norm: &NormVars, eps: f64) -> Result<Var, TensorError> {
    let sum = tape.add(residual, update)?;
    tape.layer_norm(sum, norm.gain, norm.bias, eps)
}

fn sublayer(
    tape: &mut Tape,
    x: Var,
    p: &SublayerVars,
    attended: Var,
    s: &BlockSettings,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Var, TensorError> {
    let attended = dropout(tape, attended, s.dropout, rng.as_deref_mut())?;
    let h = add_norm(tape, x, attended, &p.attention_norm, s.layernorm_eps)?;
    let f = feed_forward(tape, h, &p.ffn)?;
    let f = dropout(tape, f, s.dropout, rng)?;
    add_norm(tape, h, f, &p.ffn_norm, s.layernorm_eps)
}

/// One channel-time encoder block on `[B, M, N, D]`.
///
/// Channel attention, add & norm, FFN, add & norm, then the same chain with
/// time attention. Without channel parameters the first chain is skipped
/// and the block reduces to a channel-independent transformer layer.
pub fn encoder_block(
    tape: &mut Tape,
    x: Var,
    p: &BlockVars,
    s: &BlockSettings,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<BlockOutput, TensorError> {
    let mut h = x;
    let mut channel_weights = None;
    if let Some(cp) = &p.channel {
        let att = channel_attention(tape, h, &cp.attention, s.channel_heads)?;
        channel_weights = Some(att.weights);
        h = sublayer(tape, h, cp, att.output, s, rng.as_deref_mut())?;
    }
    let att = time_attention(tape, h, &p.time.attention, s.time_heads)?;
    let output = sublayer(tape, h, &p.time, att.output, s, rng)?;
    Ok(BlockOutput {
        output,
        channel_weights,
        time_weights: att.weights,
    })
}

/// Flattens each channel's `N x D` representation and maps it to `T` steps
/// with channel-shared weights `[N*D, T]`: `[B, M, N, D] -> [B, M, T]`.
pub fn prediction_head(tape: &mut Tape, z: Var, weight: Var, bias: Var) -> Result<Var, TensorError> {
    let [b, m, n, d] = *tape.shape(z) else {
        return Err(TensorError::Contract(format!(
            "head expects [B, M, N, D], got {:?}",
            tape.shape(z)
        )));
    };
    let flat = tape.reshape(z, &[b, m, n * d])?;
    let out = tape.matmul(flat, weight)?;
    tape.add_broadcast(out, bias)
}
