//! Browser bindings for three small demonstrations: the patch layout of a
//! look-back window, instance normalization of a series, and a tiny
//! training run on the lagged synthetic data with its channel-attention map.
//!
//! Every function returns a JSON string; failures come back as
//! `{"error": "..."}` rather than exceptions.

use serde::Serialize;
use wasm_bindgen::prelude::wasm_bindgen;

use ctpatchtst::data::{clean, make_windows, split_chronological, synthetic_series, FixtureSpec, Split, SplitFractions};
use ctpatchtst::evaluation::compute_metrics;
use ctpatchtst::model::{patch_source_index, revin_denormalize, revin_normalize};
use ctpatchtst::training::{TrainConfig, Trainer};
use ctpatchtst::{CtPatchTst, ModelConfig, Tensor};

#[derive(Serialize)]
struct ErrorReply {
    error: String,
}

fn reply<T: Serialize>(result: Result<T, String>) -> String {
    match result {
        Ok(v) => serde_json::to_string(&v),
        Err(error) => serde_json::to_string(&ErrorReply { error }),
    }
    .expect("plain data serializes")
}

#[derive(Serialize)]
struct Patch {
    start: usize,
    /// Source time step for each position.
    sources: Vec<usize>,
    /// Positions filled by repeating the final value.
    padded: usize,
}

#[derive(Serialize)]
struct PatchLayout {
    lookback: usize,
    patch_len: usize,
    stride: usize,
    n_patches: usize,
    patches: Vec<Patch>,
}

/// Which time steps feed each patch.
#[wasm_bindgen]
pub fn patch_layout(lookback: usize, patch_len: usize, stride: usize) -> String {
    reply(
        patch_source_index(lookback, patch_len, stride)
            .map_err(|e| e.to_string())
            .map(|index| {
                let patches: Vec<Patch> = index
                    .chunks(patch_len)
                    .enumerate()
                    .map(|(k, sources)| Patch {
                        start: k * stride,
                        sources: sources.to_vec(),
                        padded: (k * stride + patch_len).saturating_sub(lookback),
                    })
                    .collect();
                PatchLayout {
                    lookback,
                    patch_len,
                    stride,
                    n_patches: patches.len(),
                    patches,
                }
            }),
    )
}

#[derive(Serialize)]
struct RevInReply {
    mean: f64,
    var: f64,
    normalized: Vec<f64>,
    restored: Vec<f64>,
    max_round_trip_error: f64,
}

/// Normalizes one series with its own statistics and restores it.
#[wasm_bindgen]
pub fn revin_demo(values: Vec<f64>) -> String {
    let run = || -> Result<RevInReply, String> {
        let x = Tensor::new(vec![values.len(), 1], values.clone()).map_err(|e| e.to_string())?;
        let (z, state) = revin_normalize(&x, 1e-8).map_err(|e| e.to_string())?;
        let back = revin_denormalize(&z, &state, 1e-8).map_err(|e| e.to_string())?;
        let err = back
            .data()
            .iter()
            .zip(&values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        Ok(RevInReply {
            mean: state.mean[0],
            var: state.var[0],
            normalized: z.into_data(),
            restored: back.into_data(),
            max_round_trip_error: err,
        })
    };
    reply(run())
}

#[derive(Serialize)]
struct TrainReply {
    channel_attention: bool,
    channels: Vec<String>,
    train_loss: Vec<f64>,
    val_mse: Vec<f64>,
    test_mse: f64,
    /// Look-back of the first test window, `[channel][step]`.
    history: Vec<Vec<f64>>,
    forecast: Vec<Vec<f64>>,
    truth: Vec<Vec<f64>>,
    /// Layer-averaged channel attention, `[row][column]`; empty when the
    /// channel-independent variant is trained.
    attention: Vec<Vec<f64>>,
}

fn columns(t: &Tensor) -> Vec<Vec<f64>> {
    let [rows, m] = *t.shape() else { return Vec::new() };
    (0..m).map(|c| (0..rows).map(|r| t.at(&[r, c])).collect()).collect()
}

/// Trains a tiny model for `epochs` passes over a small slice of the lagged
/// synthetic series and forecasts the first test window.
#[wasm_bindgen]
pub fn train_tiny(seed: u64, epochs: usize, channel_attention: bool) -> String {
    let run = || -> Result<TrainReply, String> {
        let (l, t) = (48, 8);
        let spec = FixtureSpec {
            rows: 900,
            seed,
            ..FixtureSpec::default()
        };
        let series = clean(&synthetic_series(&spec, 0)).map_err(|e| e.to_string())?;
        let s = split_chronological(&series, SplitFractions::default(), l, t).map_err(|e| e.to_string())?;
        let train = make_windows(&s.train, l, t, Split::Train).map_err(|e| e.to_string())?;
        let val = make_windows(&s.val, l, t, Split::Val).map_err(|e| e.to_string())?;
        let test = make_windows(&s.test, l, t, Split::Test).map_err(|e| e.to_string())?;
        let config = ModelConfig {
            lookback: l,
            horizon: t,
            channels: series.channels(),
            patch_len: 8,
            stride: 4,
            model_dim: 16,
            time_heads: 4,
            encoder_layers: 1,
            ffn_dim: 32,
            channel_attention,
            ..ModelConfig::default()
        };
        let tc = TrainConfig {
            learning_rate: 0.003,
            batch_size: 64,
            seed,
            ..TrainConfig::default()
        };
        let model = CtPatchTst::new(config, seed).map_err(|e| e.to_string())?;
        let mut trainer = Trainer::new(model, tc);
        let (mut train_loss, mut val_mse) = (Vec::new(), Vec::new());
        // Epochs are driven by hand: the timed epoch helper needs a clock,
        // which the browser target does not provide.
        for _ in 0..epochs.clamp(1, 50) {
            train_loss.push(trainer.train_epoch(&train).map_err(|e| e.to_string())?);
            val_mse.push(compute_metrics(trainer.model(), &val, 256, true).map_err(|e| e.to_string())?.mse);
        }
        let model = trainer.model();
        let test_mse = compute_metrics(model, &test, 256, true).map_err(|e| e.to_string())?.mse;
        let (x, y) = test.example(0);
        let forecast = model.forward(&x).map_err(|e| e.to_string())?;
        let attention = if channel_attention {
            let mean = model.channel_attention_summary(&x).map_err(|e| e.to_string())?.mean();
            let m = series.channels();
            mean.data().chunks(m).map(<[f64]>::to_vec).collect()
        } else {
            Vec::new()
        };
        Ok(TrainReply {
            channel_attention,
            channels: series.channel_names.clone(),
            train_loss,
            val_mse,
            test_mse,
            history: columns(&x),
            forecast: columns(&forecast),
            truth: columns(&y),
            attention,
        })
    };
    reply(run())
}
