//! Scaled dot-product multi-head attention along either the channel axis or
//! the patch axis of a `[B, M, N, D]` representation.

use crate::error::TensorError;
use crate::tensor::{Tape, Var};

/// Projection weights of one attention sublayer. Query/key/value maps are
/// `D x D` (all heads side by side, `d_k = D / H` columns each) and carry no
/// bias; the output projection does.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub bo: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionOutput {
    pub output: Var,
    /// Softmax weights `[G, H, S, S]`, one row-stochastic matrix per group
    /// and head.
    pub weights: Var,
}

/// Self-attention over the `S` rows of each of `G` independent groups
/// `[G, S, D]`, with parameters shared by all groups.
pub fn multi_head_attention(
    tape: &mut Tape,
    x: Var,
    p: &AttentionVars,
    heads: usize,
) -> Result<AttentionOutput, TensorError> {
    let [g, s, d] = *tape.shape(x) else {
        return Err(TensorError::Contract(format!(
            "attention expects [G, S, D], got {:?}",
            tape.shape(x)
        )));
    };
    if heads == 0 || d % heads != 0 {
        return Err(TensorError::Contract(format!(
            "model dim {d} not divisible by {heads} heads"
        )));
    }
    let dk = d / heads;

    let q = tape.matmul(x, p.wq)?;
    let k = tape.matmul(x, p.wk)?;
    let v = tape.matmul(x, p.wv)?;

    let q = split_heads(tape, q, g, s, heads, dk, false)?;
    let k_t = split_heads(tape, k, g, s, heads, dk, true)?;
    let v = split_heads(tape, v, g, s, heads, dk, false)?;

    let scores = tape.bmm(q, k_t)?;
    let scores = tape.scale(scores, 1.0 / (dk as f64).sqrt());
    let weights = tape.softmax(scores)?;
    let mixed = tape.bmm(weights, v)?;

    let mixed = tape.reshape(mixed, &[g, heads, s, dk])?;
    let mixed = tape.permute(mixed, &[0, 2, 1, 3])?;
    let mixed = tape.reshape(mixed, &[g, s, d])?;
    let out = tape.matmul(mixed, p.wo)?;
    let output = tape.add_broadcast(out, p.bo)?;
    let weights = tape.reshape(weights, &[g, heads, s, s])?;
    Ok(AttentionOutput { output, weights })
}

/// `[G, S, H*dk] -> [G*H, S, dk]`, or `[G*H, dk, S]` when `transposed`.
fn split_heads(
    tape: &mut Tape,
    x: Var,
    g: usize,
    s: usize,
    heads: usize,
    dk: usize,
    transposed: bool,
) -> Result<Var, TensorError> {
    let x = tape.reshape(x, &[g, s, heads, dk])?;
    if transposed {
        let x = tape.permute(x, &[0, 2, 3, 1])?;
        tape.reshape(x, &[g * heads, dk, s])
    } else {
        let x = tape.permute(x, &[0, 2, 1, 3])?;
        tape.reshape(x, &[g * heads, s, dk])
    }
}

/// Attention across the `M` channels at each patch index. Output is
/// `[B, M, N, D]`; weights are `[B, N, H, M, M]`.
pub fn channel_attention(
    tape: &mut Tape,
    x: Var,
    p: &AttentionVars,
    heads: usize,
) -> Result<AttentionOutput, TensorError> {
    let [b, m, n, d] = dims4(tape, x)?;
    let by_patch = tape.permute(x, &[0, 2, 1, 3])?;
    let grouped = tape.reshape(by_patch, &[b * n, m, d])?;
    let att = multi_head_attention(tape, grouped, p, heads)?;
    let out = tape.reshape(att.output, &[b, n, m, d])?;
    let output = tape.permute(out, &[0, 2, 1, 3])?;
    let weights = tape.reshape(att.weights, &[b, n, heads, m, m])?;
    Ok(AttentionOutput { output, weights })
}

/// Attention across the `N` patches of each channel separately. Output is
/// `[B, M, N, D]`; weights are `[B, M, H, N, N]`.
pub fn time_attention(
    tape: &mut Tape,
    x: Var,
    p: &AttentionVars,
    heads: usize,
) -> Result<AttentionOutput, TensorError> {
    let [b, m, n, d] = dims4(tape, x)?;
    let grouped = tape.reshape(x, &[b * m, n, d])?;
    let att = multi_head_attention(tape, grouped, p, heads)?;
    let output = tape.reshape(att.output, &[b, m, n, d])?;
    let weights = tape.reshape(att.weights, &[b, m, heads, n, n])?;
    Ok(AttentionOutput { output, weights })
}

fn dims4(tape: &Tape, x: Var) -> Result<[usize; 4], TensorError> {
    match *tape.shape(x) {
        [b, m, n, d] => Ok([b, m, n, d]),
        ref other => Err(TensorError::Contract(format!(
            "expected [B, M, N, D], got {other:?}"
        ))),
    }
}
