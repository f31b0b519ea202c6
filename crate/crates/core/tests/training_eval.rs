mod common;

use common::small_config;
use ctpatchtst::data::{clean, make_windows, split_chronological, synthetic_series, FixtureSpec, Split, SplitFractions, WindowedDataset};
use ctpatchtst::error::{Error, TensorError};
use ctpatchtst::evaluation::{
    ablation_compare, cell_seed, compute_metrics, evaluate, export_attention, patch_sweep, ExperimentData, SweepData,
    SweepGrid, Variant,
};
use ctpatchtst::training::{fit, mae_loss, mse_loss, TrainConfig, Trainer};
use ctpatchtst::{CtPatchTst, ModelConfig, Tape, Tensor};
use proptest::prelude::*;

fn fixture_windows(l: usize, t: usize) -> (WindowedDataset, WindowedDataset, WindowedDataset) {
    let series = clean(&synthetic_series(&FixtureSpec::default(), 0)).unwrap();
    let s = split_chronological(&series, SplitFractions::default(), l, t).unwrap();
    (
        make_windows(&s.train, l, t, Split::Train).unwrap(),
        make_windows(&s.val, l, t, Split::Val).unwrap(),
        make_windows(&s.test, l, t, Split::Test).unwrap(),
    )
}

fn quick_train() -> TrainConfig {
    TrainConfig {
        batch_size: 32,
        epochs: 3,
        learning_rate: 0.005,
        seed: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn run_record_and_best_selection() {
    let (train, val, _) = fixture_windows(32, 8);
    let train = train.truncated(200);
    let mut model = CtPatchTst::new(small_config(true), 0).unwrap();
    let record = fit(&mut model, &train, &val, &quick_train()).unwrap();
    assert_eq!(record.epochs.len(), 3);
    let min = record.epochs.iter().map(|e| e.val_mse).fold(f64::INFINITY, f64::min);
    let best = record.best().unwrap();
    assert_eq!(best.val_mse, min);
    let rechecked = compute_metrics(&model, &val, 64, false).unwrap();
    assert_eq!(rechecked.mse, min);

    let mut csv = Vec::new();
    record.write_csv(&mut csv).unwrap();
    assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 4);
}

#[test]
fn training_is_deterministic() {
    let (train, val, _) = fixture_windows(32, 8);
    let train = train.truncated(150);
    let run = || {
        let mut model = CtPatchTst::new(
            ModelConfig {
                dropout: 0.2,
                ..small_config(true)
            },
            9,
        )
        .unwrap();
        let rec = fit(&mut model, &train, &val, &quick_train()).unwrap();
        (rec.epochs.iter().map(|e| e.train_loss).collect::<Vec<_>>(), model)
    };
    let (a, ma) = run();
    let (b, mb) = run();
    assert_eq!(a, b);
    assert_eq!(ma.params().values(), mb.params().values());
}

#[test]
fn patience_stops_early() {
    let (train, val, _) = fixture_windows(32, 8);
    let cfg = TrainConfig {
        epochs: 30,
        patience: Some(1),
        learning_rate: 0.5,
        ..quick_train()
    };
    let mut trainer = Trainer::new(CtPatchTst::new(small_config(false), 0).unwrap(), cfg);
    let rec = trainer.fit(&train.truncated(64), &val).unwrap();
    assert!(rec.epochs.len() < 30);
    let best = rec.best_epoch.unwrap();
    assert!(rec.epochs.len() - 1 - best <= 1);
}

#[test]
fn zero_model_on_zero_targets_has_zero_loss() {
    let mut model = CtPatchTst::new(small_config(true), 0).unwrap();
    for name in ["head.weight", "head.bias"] {
        let id = model.params().find(name).unwrap();
        model.params_mut().get_mut(id).data_mut().fill(0.0);
    }
    let y = model.forward(&Tensor::zeros(&[2, 32, 3])).unwrap();
    let mut tape = Tape::new();
    let p = tape.constant(y);
    let z = tape.constant(Tensor::zeros(&[2, 8, 3]));
    let loss = mse_loss(&mut tape, p, z).unwrap();
    assert_eq!(tape.value(loss).item(), 0.0);
}

#[test]
fn single_window_metrics_equal_losses() {
    let (_, _, test) = fixture_windows(32, 8);
    let one = test.truncated(1);
    let model = CtPatchTst::new(small_config(true), 2).unwrap();
    let report = evaluate(&model, &one, "DK1", false).unwrap();
    let (x, y) = one.example(0);
    let pred = model.forward(&x).unwrap();
    let mut tape = Tape::new();
    let (p, t) = (tape.constant(pred), tape.constant(y));
    let mse = mse_loss(&mut tape, p, t).unwrap();
    let mae = mae_loss(&mut tape, p, t).unwrap();
    assert!((report.mse - tape.value(mse).item()).abs() <= 1e-12 * report.mse.max(1.0));
    assert!((report.mae - tape.value(mae).item()).abs() <= 1e-12 * report.mae.max(1.0));
    assert_eq!(report.examples, 1);
    assert_eq!(report.variant, Variant::ChannelTime);
}

#[test]
fn report_counts_every_test_window() {
    let (_, _, test) = fixture_windows(32, 8);
    let model = CtPatchTst::new(small_config(false), 2).unwrap();
    let a = evaluate(&model, &test, "DK1", false).unwrap();
    let b = evaluate(&model, &test, "DK1", true).unwrap();
    assert_eq!(a.examples, test.len());
    assert!(b.normalized && !a.normalized);
    assert!(b.mse < a.mse);
}

#[test]
fn empty_test_set_is_rejected() {
    let (_, _, test) = fixture_windows(32, 8);
    let model = CtPatchTst::new(small_config(true), 2).unwrap();
    let err = evaluate(&model, &test.truncated(0), "DK1", false).unwrap_err();
    assert!(matches!(err, Error::Tensor(TensorError::Contract(_))));
}

#[test]
fn single_channel_ablation_reports_both() {
    let series = clean(&synthetic_series(&FixtureSpec::default(), 0)).unwrap();
    let mut single = series.clone();
    single.channel_names.truncate(1);
    for row in &mut single.values {
        row.truncate(1);
    }
    let s = split_chronological(&single, SplitFractions::default(), 32, 8).unwrap();
    let data = ExperimentData {
        name: "single".into(),
        train: make_windows(&s.train, 32, 8, Split::Train).unwrap().truncated(64),
        val: make_windows(&s.val, 32, 8, Split::Val).unwrap(),
        test: make_windows(&s.test, 32, 8, Split::Test).unwrap(),
    };
    let mc = ModelConfig {
        channels: 1,
        ..small_config(true)
    };
    let tc = TrainConfig {
        epochs: 1,
        ..quick_train()
    };
    let r = ablation_compare(&data, &mc, &tc, &[0, 1], false).unwrap();
    assert_eq!(r.channel_time.len(), 2);
    assert_eq!(r.channel_independent.len(), 2);
    for (a, b) in r.channel_time.iter().zip(&r.channel_independent) {
        assert_eq!(a.examples, b.examples);
        assert!(a.mse.is_finite() && b.mse.is_finite());
    }
}

fn sweep_data() -> SweepData {
    let series = clean(&synthetic_series(&FixtureSpec::default(), 1)).unwrap();
    let s = split_chronological(&series, SplitFractions::default(), 48, 24).unwrap();
    SweepData {
        name: "DK2".into(),
        train: s.train.slice(0, 200),
        val: s.val,
        test: s.test,
    }
}

fn sweep_base() -> ModelConfig {
    ModelConfig {
        lookback: 48,
        model_dim: 8,
        time_heads: 2,
        encoder_layers: 1,
        ffn_dim: 8,
        ..ModelConfig::default()
    }
}

#[test]
fn sweep_counts_skips_and_is_order_and_thread_invariant() {
    let data = sweep_data();
    let tc = TrainConfig {
        epochs: 1,
        batch_size: 64,
        ..TrainConfig::default()
    };
    let grid = SweepGrid {
        patch_lens: vec![8, 16, 64],
        horizons: vec![12, 24],
    };
    let rows = patch_sweep(&grid, &data, &sweep_base(), &tc, false, 1).unwrap();
    assert_eq!(rows.len(), 2 * 2 * 2, "P=64 > L=48 is skipped");

    let reversed = SweepGrid {
        patch_lens: vec![16, 8],
        horizons: vec![24, 12],
    };
    let parallel = patch_sweep(&reversed, &data, &sweep_base(), &tc, false, 3).unwrap();
    for row in &rows {
        let twin = parallel
            .iter()
            .find(|r| r.patch_len == row.patch_len && r.horizon == row.horizon && r.variant == row.variant)
            .unwrap();
        assert_eq!(twin, row);
        assert_eq!(row.stride, row.patch_len / 2);
    }
    assert_ne!(cell_seed(tc.seed, 8, 12), cell_seed(tc.seed, 16, 12));
}

#[test]
fn single_horizon_sweep_trains_four_cells() {
    let tc = TrainConfig {
        epochs: 1,
        batch_size: 64,
        ..TrainConfig::default()
    };
    let grid = SweepGrid {
        patch_lens: vec![8, 16],
        horizons: vec![24],
    };
    let rows = patch_sweep(&grid, &sweep_data(), &sweep_base(), &tc, false, 1).unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows.iter().filter(|r| r.variant == Variant::ChannelTime).count(), 2);
}

#[test]
fn attention_export_files() {
    let model = CtPatchTst::new(small_config(true), 4).unwrap();
    let names: Vec<String> = ctpatchtst::data::DEFAULT_CHANNELS.iter().map(|s| s.to_string()).collect();
    let x = common::noise(&[32, 3], 8, 2.0);
    let dir = tempfile::tempdir().unwrap();
    let paths = export_attention(&model, &x, &names, dir.path()).unwrap();
    let files: Vec<String> = paths.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
    assert_eq!(files, ["attention_layer0.csv", "attention_layer1.csv", "attention_mean.csv"]);
    for p in &paths {
        let mut r = csv::Reader::from_path(p).unwrap();
        let header: Vec<String> = r.headers().unwrap().iter().map(str::to_string).collect();
        assert_eq!(&header[1..], names.as_slice());
        let rows: Vec<csv::StringRecord> = r.records().map(Result::unwrap).collect();
        assert_eq!(rows.len(), 3);
        for (row, name) in rows.iter().zip(&names) {
            assert_eq!(&row[0], name);
            let s: f64 = (1..4).map(|c| row[c].parse::<f64>().unwrap()).sum();
            assert!((s - 1.0).abs() <= 1e-6);
        }
    }
    let first = std::fs::read(&paths[2]).unwrap();
    export_attention(&model, &x, &names, dir.path()).unwrap();
    assert_eq!(std::fs::read(&paths[2]).unwrap(), first);

    let ci = CtPatchTst::new(small_config(false), 4).unwrap();
    let err = export_attention(&ci, &x, &names, dir.path()).unwrap_err();
    assert!(matches!(err, Error::Tensor(TensorError::Contract(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn losses_are_nonnegative_symmetric_and_permutation_invariant(
        pairs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..24),
        rot in 0usize..24,
    ) {
        let n = pairs.len();
        let a: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let b: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let eval = |a: &[f64], b: &[f64]| {
            let mut tape = Tape::new();
            let p = tape.constant(Tensor::new(vec![1, n, 1], a.to_vec()).unwrap());
            let t = tape.constant(Tensor::new(vec![1, n, 1], b.to_vec()).unwrap());
            let mse = mse_loss(&mut tape, p, t).unwrap();
            let mae = mae_loss(&mut tape, p, t).unwrap();
            (tape.value(mse).item(), tape.value(mae).item())
        };
        let (mse, mae) = eval(&a, &b);
        prop_assert!(mse >= 0.0 && mae >= 0.0);
        prop_assert_eq!(eval(&a, &a), (0.0, 0.0));
        if a != b {
            prop_assert!(mse > 0.0 && mae > 0.0);
        }
        let (mse_sw, mae_sw) = eval(&b, &a);
        prop_assert_eq!(mae_sw, mae);
        prop_assert_eq!(mse_sw, mse);
        let k = rot % n;
        let (mut ra, mut rb) = (a.clone(), b.clone());
        ra.rotate_left(k);
        rb.rotate_left(k);
        let (mse_r, mae_r) = eval(&ra, &rb);
        prop_assert!((mse_r - mse).abs() <= 1e-12 * mse.max(1.0));
        prop_assert!((mae_r - mae).abs() <= 1e-12 * mae.max(1.0));
    }
}
