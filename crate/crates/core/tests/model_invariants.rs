mod common;

use common::{model_gradient_report, noise, small_config, REL_TOL};
use ctpatchtst::model::{num_patches, patchify};
use ctpatchtst::{CtPatchTst, ModelConfig, Tape, Tensor};
use proptest::prelude::*;

fn permute_last(x: &Tensor, perm: &[usize]) -> Tensor {
    let m = *x.shape().last().unwrap();
    Tensor::from_fn(x.shape(), |i| x.data()[(i / m) * m + perm[i % m]])
}

fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn output_shapes_for_reference_horizons() {
    let x = noise(&[336, 3], 4, 100.0);
    for t in [96, 192, 336, 720] {
        let model = CtPatchTst::new(
            ModelConfig {
                horizon: t,
                ..ModelConfig::default()
            },
            0,
        )
        .unwrap();
        let y = model.forward(&x).unwrap();
        assert_eq!(y.shape(), &[t, 3]);
        assert!(y.all_finite());
    }
}

#[test]
fn tiny_two_channel_end_to_end_gradients() {
    let config = ModelConfig {
        channels: 2,
        encoder_layers: 1,
        ..small_config(true)
    };
    let model = CtPatchTst::new(config, 8).unwrap();
    let x = noise(&[2, 32, 2], 30, 2.0);
    let y = noise(&[2, 8, 2], 31, 1.0);
    for c in model_gradient_report(&model, &x, &y) {
        assert!(c.score <= REL_TOL, "{}: {}", c.name, c.score);
    }
}

#[test]
fn independent_channels_have_zero_cross_gradients() {
    let model = CtPatchTst::new(small_config(false), 2).unwrap();
    let x = noise(&[2, 32, 3], 12, 5.0);
    for out_channel in 0..3 {
        let mut tape = Tape::new();
        let bound = model.params().bind(&mut tape, false);
        let input = tape.variable(x.clone());
        let out = model.forward_graph(&mut tape, &bound, input, None).unwrap();
        let mask = Tensor::from_fn(&[2, 8, 3], |i| if i % 3 == out_channel { 1.0 } else { 0.0 });
        let mask = tape.constant(mask);
        let picked = tape.mul(out.prediction, mask).unwrap();
        let loss = tape.sum(picked);
        tape.backward(loss).unwrap();
        let g = tape.grad(input).unwrap();
        for (i, v) in g.data().iter().enumerate() {
            if i % 3 == out_channel {
                continue;
            }
            assert_eq!(*v, 0.0, "d out[{out_channel}] / d in[{}] nonzero", i % 3);
        }
        assert!(g.data().iter().enumerate().any(|(i, v)| i % 3 == out_channel && *v != 0.0));
    }
}

#[test]
fn channel_time_model_does_mix_channels() {
    let model = CtPatchTst::new(small_config(true), 2).unwrap();
    let x = noise(&[1, 32, 3], 40, 5.0);
    let mut bumped = x.clone();
    for v in bumped.data_mut().iter_mut().step_by(3) {
        *v += 2.0;
    }
    let a = model.forward(&x).unwrap();
    let b = model.forward(&bumped).unwrap();
    let moved = a.data().iter().zip(b.data()).enumerate().any(|(i, (p, q))| i % 3 != 0 && p != q);
    assert!(moved);
}

#[test]
fn attention_summary_rows_and_permutation() {
    let model = CtPatchTst::new(small_config(true), 6).unwrap();
    let x = noise(&[32, 3], 2, 3.0);
    let perm = [1, 2, 0];
    let summary = model.channel_attention_summary(&x).unwrap();
    let permuted = model.channel_attention_summary(&permute_last(&x, &perm)).unwrap();
    assert_eq!(summary.layers.len(), 2);
    for (layer, other) in summary.layers.iter().zip(&permuted.layers) {
        assert_eq!(layer.shape(), &[3, 3]);
        for r in 0..3 {
            let s: f64 = (0..3).map(|c| layer.at(&[r, c])).sum();
            assert!((s - 1.0).abs() <= 1e-12);
            for c in 0..3 {
                assert!((other.at(&[r, c]) - layer.at(&[perm[r], perm[c]])).abs() <= 1e-9);
            }
        }
    }
    let mean = summary.mean();
    for r in 0..3 {
        let s: f64 = (0..3).map(|c| mean.at(&[r, c])).sum();
        assert!((s - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn fresh_graph_after_update() {
    let mut model = CtPatchTst::new(small_config(true), 1).unwrap();
    let x = noise(&[32, 3], 5, 1.0);
    let before = model.forward(&x).unwrap();
    let head = model.params().find("head.bias").unwrap();
    for v in model.params_mut().get_mut(head).data_mut() {
        *v += 0.5;
    }
    let after = model.forward(&x).unwrap();
    assert!(max_diff(&before, &after) > 0.0);
    let again = model.forward(&x).unwrap();
    assert_eq!(after, again);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn full_network_is_channel_permutation_equivariant(seed in 0u64..1000, p in 0usize..6) {
        let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let perm = perms[p];
        let model = CtPatchTst::new(small_config(true), seed).unwrap();
        let x = noise(&[2, 32, 3], seed + 1, 10.0);
        let y = model.forward(&x).unwrap();
        let yp = model.forward(&permute_last(&x, &perm)).unwrap();
        prop_assert!(max_diff(&yp, &permute_last(&y, &perm)) <= 1e-9);
    }

    #[test]
    fn attention_weights_are_row_stochastic(seed in 0u64..1000, ca in any::<bool>()) {
        let model = CtPatchTst::new(small_config(ca), seed).unwrap();
        let mut tape = Tape::new();
        let bound = model.params().bind(&mut tape, false);
        let input = tape.constant(noise(&[2, 32, 3], seed, 50.0));
        let out = model.forward_graph(&mut tape, &bound, input, None).unwrap();
        prop_assert_eq!(out.channel_weights.len(), if ca { 2 } else { 0 });
        for w in out.channel_weights.iter().chain(&out.time_weights) {
            let t = tape.value(*w);
            let k = *t.shape().last().unwrap();
            for row in t.data().chunks(k) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn patch_count_and_overlap(l in 1usize..200, p in 1usize..40, s in 1usize..40) {
        prop_assume!(p <= l);
        let x = Tensor::from_fn(&[l, 2], |i| i as f64);
        let patches = patchify(&x, p, s).unwrap();
        let n = (l - p) / s + 2;
        prop_assert_eq!(patches.shape(), &[2, n, p]);
        prop_assert_eq!(num_patches(l, p, s), n);
        if s < p {
            for c in 0..2 {
                for k in 0..n - 1 {
                    for j in 0..p - s {
                        prop_assert_eq!(patches.at(&[c, k + 1, j]), patches.at(&[c, k, j + s]));
                    }
                }
            }
        }
    }
}
