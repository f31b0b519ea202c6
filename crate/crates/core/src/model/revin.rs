//! Reversible instance normalization.
//!
//! Each channel of a look-back window is standardized with its own mean and
//! population variance over time; forecasts are mapped back to the original
//! scale with the same statistics. No learnable affine terms.

use crate::error::TensorError;
use crate::tensor::{Tape, Tensor, Var};

/// Per-channel statistics of one look-back window.
#[derive(Debug, Clone, PartialEq)]
pub struct RevInState {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RevInState {
    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// Normalizes an `L x M` window channel by channel.
pub fn revin_normalize(x: &Tensor, eps: f64) -> Result<(Tensor, RevInState), TensorError> {
    let [len, m] = *x.shape() else {
        return Err(TensorError::Contract(format!(
            "revin expects an L x M window, got {:?}",
            x.shape()
        )));
    };
    if len < 2 {
        return Err(TensorError::Contract("revin needs at least two time steps".into()));
    }
    let d = x.data();
    let mut mean = vec![0.0; m];
    let mut var = vec![0.0; m];
    for c in 0..m {
        let mu = (0..len).map(|t| d[t * m + c]).sum::<f64>() / len as f64;
        mean[c] = mu;
        var[c] = (0..len).map(|t| (d[t * m + c] - mu).powi(2)).sum::<f64>() / len as f64;
    }
    let out = Tensor::from_fn(x.shape(), |i| {
        let c = i % m;
        (d[i] - mean[c]) / (var[c] + eps).sqrt()
    });
    Ok((out, RevInState { mean, var }))
}

/// Maps a normalized `T x M` forecast back to original units.
pub fn revin_denormalize(y: &Tensor, state: &RevInState, eps: f64) -> Result<Tensor, TensorError> {
    let m = *y.shape().last().unwrap_or(&0);
    if y.rank() != 2 || m != state.channels() {
        return Err(TensorError::Contract(format!(
            "denormalize: forecast shape {:?} does not match {} channels of state",
            y.shape(),
            state.channels()
        )));
    }
    let d = y.data();
    Ok(Tensor::from_fn(y.shape(), |i| {
        let c = i % m;
        d[i] * (state.var[c] + eps).sqrt() + state.mean[c]
    }))
}

/// Statistics recorded on a tape, both shaped `[B, M, 1]`.
#[derive(Debug, Clone, Copy)]
pub struct RevInVars {
    pub mean: Var,
    pub std: Var,
}

/// Differentiable normalization of a channels-first batch `[B, M, L]`.
pub fn normalize_graph(tape: &mut Tape, x: Var, eps: f64) -> Result<(Var, RevInVars), TensorError> {
    let len = *tape.shape(x).last().unwrap();
    let mean = tape.mean_last(x);
    let mean_full = tape.expand_last(mean, len)?;
    let centered = tape.sub(x, mean_full)?;
    let sq = tape.square(centered);
    let var = tape.mean_last(sq);
    let shifted = tape.add_scalar(var, eps);
    let std = tape.sqrt(shifted);
    let std_full = tape.expand_last(std, len)?;
    let out = tape.div(centered, std_full)?;
    Ok((out, RevInVars { mean, std }))
}

/// Inverse of [`normalize_graph`] for a channels-first forecast `[B, M, T]`.
pub fn denormalize_graph(tape: &mut Tape, y: Var, stats: RevInVars) -> Result<Var, TensorError> {
    let t = *tape.shape(y).last().unwrap();
    let std = tape.expand_last(stats.std, t)?;
    let mean = tape.expand_last(stats.mean, t)?;
    let scaled = tape.mul(y, std)?;
    tape.add(scaled, mean)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_hand_example() {
        let x = Tensor::new(vec![3, 1], vec![1., 2., 3.]).unwrap();
        let (y, st) = revin_normalize(&x, 1e-14).unwrap();
        let r = 1.5f64.sqrt();
        for (a, b) in y.data().iter().zip([-r, 0.0, r]) {
            assert!((a - b).abs() < 1e-6);
        }
        assert_eq!(st.mean, vec![2.0]);
        assert!((st.var[0] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn constant_channel_normalizes_to_zero() {
        let x = Tensor::new(vec![3, 2], vec![4., 1., 4., 2., 4., 3.]).unwrap();
        let (y, st) = revin_normalize(&x, 1e-8).unwrap();
        assert_eq!(st.var[0], 0.0);
        for t in 0..3 {
            assert_eq!(y.at(&[t, 0]), 0.0);
        }
    }

    #[test]
    fn denormalize_examples() {
        let st = RevInState {
            mean: vec![2.0],
            var: vec![2.0 / 3.0],
        };
        let y = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let out = revin_denormalize(&y, &st, 0.0).unwrap();
        assert!((out.item() - 2.816496580927726).abs() < 1e-12);

        let st = RevInState {
            mean: vec![5.0, -1.0],
            var: vec![3.0, 0.5],
        };
        let out = revin_denormalize(&Tensor::zeros(&[4, 2]), &st, 1e-8).unwrap();
        for t in 0..4 {
            assert_eq!(out.at(&[t, 0]), 5.0);
            assert_eq!(out.at(&[t, 1]), -1.0);
        }
        assert!(revin_denormalize(&Tensor::zeros(&[4, 3]), &st, 1e-8).is_err());
    }

    #[test]
    fn graph_matches_direct_formula() {
        let x = Tensor::from_fn(&[5, 2], |i| ((i * 7) % 5) as f64 * 0.3 - 0.4);
        let (direct, st) = revin_normalize(&x, 1e-8).unwrap();
        let mut tape = Tape::new();
        let v = tape.constant(x.clone().reshape(&[1, 5, 2]).unwrap());
        let cf = tape.permute(v, &[0, 2, 1]).unwrap();
        let (n, stats) = normalize_graph(&mut tape, cf, 1e-8).unwrap();
        let back = tape.permute(n, &[0, 2, 1]).unwrap();
        for (a, b) in tape.value(back).data().iter().zip(direct.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(tape.value(stats.mean).data(), st.mean.as_slice());
        let restored = denormalize_graph(&mut tape, n, stats).unwrap();
        let restored = tape.permute(restored, &[0, 2, 1]).unwrap();
        for (a, b) in tape.value(restored).data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
