//! Patching and patch embedding.
//!
//! Each channel is padded at the end with `stride` copies of its final value
//! and cut into windows of `patch_len` steps taken every `stride` steps,
//! which yields `floor((L - P) / S) + 2` patches.

use crate::error::TensorError;
use crate::model::config::num_patches;
use crate::tensor::{Tape, Tensor, Var};

/// Source time index (into the unpadded series) for each position of each
/// patch, in `[N, P]` order.
pub fn patch_source_index(lookback: usize, patch_len: usize, stride: usize) -> Result<Vec<usize>, TensorError> {
    if patch_len == 0 || stride == 0 {
        return Err(TensorError::Contract("patch_len and stride must be positive".into()));
    }
    if lookback < patch_len {
        return Err(TensorError::Contract(format!(
            "look-back {lookback} is shorter than patch length {patch_len}"
        )));
    }
    let n = num_patches(lookback, patch_len, stride);
    let mut index = Vec::with_capacity(n * patch_len);
    for p in 0..n {
        for j in 0..patch_len {
            index.push((p * stride + j).min(lookback - 1));
        }
    }
    Ok(index)
}

/// Cuts an `L x M` window into `M x N x P` patches.
pub fn patchify(x: &Tensor, patch_len: usize, stride: usize) -> Result<Tensor, TensorError> {
    let [len, m] = *x.shape() else {
        return Err(TensorError::Contract(format!(
            "patchify expects an L x M window, got {:?}",
            x.shape()
        )));
    };
    let src = patch_source_index(len, patch_len, stride)?;
    let n = src.len() / patch_len;
    let d = x.data();
    let mut out = Vec::with_capacity(m * src.len());
    for c in 0..m {
        out.extend(src.iter().map(|&t| d[t * m + c]));
    }
    Tensor::new(vec![m, n, patch_len], out)
}

/// Graph version of [`patchify`] on a channels-first batch `[B, M, L]`,
/// producing `[B, M, N, P]`.
pub fn patchify_graph(tape: &mut Tape, x: Var, patch_len: usize, stride: usize) -> Result<Var, TensorError> {
    let [b, m, len] = *tape.shape(x) else {
        return Err(TensorError::Contract(format!(
            "patchify expects [B, M, L], got {:?}",
            tape.shape(x)
        )));
    };
    let src = patch_source_index(len, patch_len, stride)?;
    let n = src.len() / patch_len;
    let mut index = Vec::with_capacity(b * m * src.len());
    for row in 0..b * m {
        index.extend(src.iter().map(|&t| row * len + t));
    }
    tape.gather(x, index, &[b, m, n, patch_len])
}

/// Affine projection `P -> D` of every patch followed by the positional
/// table `[N, D]`, added identically to every channel.
pub fn project_and_embed(
    tape: &mut Tape,
    patches: Var,
    weight: Var,
    bias: Var,
    pos: Var,
) -> Result<Var, TensorError> {
    let ps = tape.shape(patches).to_vec();
    let pos_shape = tape.shape(pos).to_vec();
    let n = ps[ps.len() - 2];
    if pos_shape.len() != 2 || pos_shape[0] != n {
        return Err(TensorError::Shape {
            op: "project_and_embed",
            lhs: ps,
            rhs: pos_shape,
        });
    }
    let projected = tape.matmul(patches, weight)?;
    let projected = tape.add_broadcast(projected, bias)?;
    tape.add_broadcast(projected, pos)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patch_counts_for_reference_lookbacks() {
        let x = Tensor::zeros(&[336, 1]);
        assert_eq!(patchify(&x, 16, 8).unwrap().shape(), &[1, 42, 16]);
        let x = Tensor::zeros(&[512, 1]);
        assert_eq!(patchify(&x, 16, 8).unwrap().shape(), &[1, 64, 16]);
    }

    #[test]
    fn minimal_window_pads_with_final_value() {
        let x = Tensor::from_fn(&[16, 1], |i| i as f64 + 1.0);
        let p = patchify(&x, 16, 8).unwrap();
        assert_eq!(p.shape(), &[1, 2, 16]);
        let second: Vec<f64> = (0..16).map(|j| p.at(&[0, 1, j])).collect();
        let mut expected: Vec<f64> = (9..=16).map(f64::from).collect();
        expected.extend([16.0; 8]);
        assert_eq!(second, expected);
    }

    #[test]
    fn short_window_is_rejected() {
        let x = Tensor::zeros(&[7, 2]);
        assert!(patchify(&x, 8, 4).is_err());
    }

    #[test]
    fn embed_shapes_and_trivial_cases() {
        let mut tape = Tape::new();
        let pos_t = Tensor::from_fn(&[4, 3], |i| i as f64 * 0.1);
        let patches = tape.constant(Tensor::zeros(&[2, 4, 3]));
        let w = tape.constant(Tensor::from_fn(&[3, 3], |i| (i % 4 == 0) as u8 as f64));
        let b = tape.constant(Tensor::zeros(&[3]));
        let pos = tape.constant(pos_t.clone());
        let out = project_and_embed(&mut tape, patches, w, b, pos).unwrap();
        assert_eq!(tape.shape(out), &[2, 4, 3]);
        for c in 0..2 {
            for i in 0..12 {
                assert_eq!(tape.value(out).data()[c * 12 + i], pos_t.data()[i]);
            }
        }

        let pt = Tensor::from_fn(&[2, 4, 3], |i| i as f64 - 5.0);
        let patches = tape.constant(pt.clone());
        let zero_pos = tape.constant(Tensor::zeros(&[4, 3]));
        let out = project_and_embed(&mut tape, patches, w, b, zero_pos).unwrap();
        assert_eq!(tape.value(out), &pt);

        let bad_pos = tape.constant(Tensor::zeros(&[5, 3]));
        assert!(project_and_embed(&mut tape, patches, w, b, bad_pos).is_err());
    }
}
