#![allow(dead_code)]

use ctpatchtst::model::ParamId;
use ctpatchtst::tensor::{finite_diff_grad, gradient_mismatch};
use ctpatchtst::{CtPatchTst, ModelConfig, Tape, Tensor};

pub const REL_TOL: f64 = 1e-4;
pub const ABS_FLOOR: f64 = 1e-8;
pub const FD_STEP: f64 = 1e-5;

pub fn small_config(channel_attention: bool) -> ModelConfig {
    ModelConfig {
        lookback: 32,
        horizon: 8,
        channels: 3,
        patch_len: 8,
        stride: 4,
        model_dim: 16,
        channel_heads: 1,
        time_heads: 4,
        encoder_layers: 2,
        ffn_dim: 32,
        dropout: 0.0,
        channel_attention,
        ..ModelConfig::default()
    }
}

/// Deterministic pseudo-random tensor in [-scale, scale] (splitmix64).
pub fn noise(shape: &[usize], seed: u64, scale: f64) -> Tensor {
    let mut s = seed;
    Tensor::from_fn(shape, |_| {
        s = s.wrapping_add(0x9E3779B97F4A7C15);
        let mut z = s;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        z ^= z >> 31;
        ((z >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0) * scale
    })
}

/// MSE of the model on one batch, evaluated without recording gradients.
pub fn mse_value(model: &CtPatchTst, x: &Tensor, y: &Tensor) -> f64 {
    let pred = model.forward(x).unwrap();
    pred.data()
        .iter()
        .zip(y.data())
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / y.len() as f64
}

/// Analytic parameter gradients of the batch MSE.
pub fn analytic_grads(model: &CtPatchTst, x: &Tensor, y: &Tensor) -> Vec<Tensor> {
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape, true);
    let input = tape.constant(x.clone());
    let out = model.forward_graph(&mut tape, &bound, input, None).unwrap();
    let target = tape.constant(y.clone());
    let diff = tape.sub(out.prediction, target).unwrap();
    let sq = tape.square(diff);
    let loss = tape.mean(sq);
    tape.backward(loss).unwrap();
    bound.grads(&tape)
}

pub struct GradientCheck {
    pub name: String,
    /// Scored mismatch (relative, with the absolute floor applied).
    pub score: f64,
    pub max_abs_diff: f64,
    pub max_abs_grad: f64,
}

fn max_abs(t: &Tensor) -> f64 {
    t.data().iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Worst mismatch per parameter between backprop and central differences.
pub fn model_gradient_report(model: &CtPatchTst, x: &Tensor, y: &Tensor) -> Vec<GradientCheck> {
    let analytic = analytic_grads(model, x, y);
    let ids: Vec<ParamId> = model.params().ids().collect();
    ids.into_iter()
        .map(|id| {
            let name = model.params().name(id).to_string();
            let mut probe = model.clone();
            let numeric = finite_diff_grad(
                |v| {
                    *probe.params_mut().get_mut(id) = v.clone();
                    mse_value(&probe, x, y)
                },
                model.params().get(id),
                FD_STEP,
            );
            let a = &analytic[id.index()];
            let diff = a.data().iter().zip(numeric.data()).fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
            GradientCheck {
                name,
                score: gradient_mismatch(a, &numeric, ABS_FLOOR),
                max_abs_diff: diff,
                max_abs_grad: max_abs(a).max(max_abs(&numeric)),
            }
        })
        .collect()
}
