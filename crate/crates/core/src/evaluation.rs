//! Test metrics, the channel-attention ablation, the patch-length sweep and
//! attention-map export.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::data::{make_windows, RawSeries, Split, WindowedDataset};
use crate::error::{Error, Result, TensorError};
use crate::model::{num_patches, CtPatchTst, ModelConfig};
use crate::tensor::Tensor;
use crate::training::{fit, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
    /// Number of windows evaluated.
    pub count: usize,
}

/// Anything mapping input windows `[B, L, M]` to forecasts `[B, T, M]`.
pub trait Forecaster {
    fn forecast(&self, x: &Tensor) -> Result<Tensor>;

    /// Variance floor used for normalized-space metrics.
    fn revin_eps(&self) -> f64 {
        1e-8
    }
}

impl Forecaster for CtPatchTst {
    fn forecast(&self, x: &Tensor) -> Result<Tensor> {
        self.forward(x)
    }

    fn revin_eps(&self) -> f64 {
        self.config().revin_eps
    }
}

impl<F: Fn(&Tensor) -> Result<Tensor>> Forecaster for F {
    fn forecast(&self, x: &Tensor) -> Result<Tensor> {
        self(x)
    }
}

/// MSE and MAE over every window, channel and horizon step of `ds`.
///
/// With `normalized`, predictions and targets are first standardized with
/// the statistics of their own input window.
pub fn compute_metrics<F: Forecaster + ?Sized>(model: &F, ds: &WindowedDataset, batch_size: usize, normalized: bool) -> Result<Metrics> {
    if ds.is_empty() {
        return Err(TensorError::Contract("cannot evaluate on an empty dataset".into()).into());
    }
    let eps = model.revin_eps();
    let m = ds.channels();
    let (mut se, mut ae, mut n) = (0.0, 0.0, 0usize);
    let indices: Vec<usize> = (0..ds.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let (x, y) = ds.batch(chunk);
        let pred = model.forecast(&x)?;
        if pred.shape() != y.shape() {
            return Err(TensorError::Shape {
                op: "compute_metrics",
                lhs: pred.shape().to_vec(),
                rhs: y.shape().to_vec(),
            }
            .into());
        }
        let (l, t) = (ds.lookback(), ds.horizon());
        for b in 0..chunk.len() {
            let xs = &x.data()[b * l * m..(b + 1) * l * m];
            let (mean, scale) = if normalized {
                window_stats(xs, m, eps)
            } else {
                (vec![0.0; m], vec![1.0; m])
            };
            let ps = &pred.data()[b * t * m..(b + 1) * t * m];
            let ys = &y.data()[b * t * m..(b + 1) * t * m];
            for (i, (p, y)) in ps.iter().zip(ys).enumerate() {
                let c = i % m;
                let d = (p - mean[c]) / scale[c] - (y - mean[c]) / scale[c];
                se += d * d;
                ae += d.abs();
                n += 1;
            }
        }
    }
    Ok(Metrics {
        mse: se / n as f64,
        mae: ae / n as f64,
        count: ds.len(),
    })
}

fn window_stats(rows: &[f64], m: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let l = rows.len() / m;
    let mut mean = vec![0.0; m];
    let mut scale = vec![0.0; m];
    for c in 0..m {
        let mu = (0..l).map(|t| rows[t * m + c]).sum::<f64>() / l as f64;
        let var = (0..l).map(|t| (rows[t * m + c] - mu).powi(2)).sum::<f64>() / l as f64;
        mean[c] = mu;
        scale[c] = (var + eps).sqrt();
    }
    (mean, scale)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Variant {
    #[serde(rename = "ct")]
    ChannelTime,
    #[serde(rename = "ci")]
    ChannelIndependent,
}

impl Variant {
    pub fn of(config: &ModelConfig) -> Self {
        if config.channel_attention {
            Variant::ChannelTime
        } else {
            Variant::ChannelIndependent
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::ChannelTime => "ct-patchtst",
            Variant::ChannelIndependent => "patchtst",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub dataset: String,
    pub horizon: usize,
    pub lookback: usize,
    pub variant: Variant,
    pub mse: f64,
    pub mae: f64,
    pub examples: usize,
    pub normalized: bool,
}

impl EvalReport {
    pub const CSV_HEADER: [&'static str; 8] = [
        "dataset", "variant", "lookback", "horizon", "mse", "mae", "examples", "units",
    ];

    pub fn csv_row(&self) -> [String; 8] {
        [
            self.dataset.clone(),
            self.variant.as_str().to_string(),
            self.lookback.to_string(),
            self.horizon.to_string(),
            self.mse.to_string(),
            self.mae.to_string(),
            self.examples.to_string(),
            if self.normalized { "normalized" } else { "original" }.to_string(),
        ]
    }
}

pub fn write_reports<W: Write>(out: W, reports: &[EvalReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(EvalReport::CSV_HEADER).map_err(std::io::Error::from)?;
    for r in reports {
        w.write_record(r.csv_row()).map_err(std::io::Error::from)?;
    }
    w.flush()?;
    Ok(())
}

/// Test-set report for a trained model.
pub fn evaluate(model: &CtPatchTst, test: &WindowedDataset, dataset: &str, normalized: bool) -> Result<EvalReport> {
    let metrics = compute_metrics(model, test, 256, normalized)?;
    let c = model.config();
    Ok(EvalReport {
        dataset: dataset.to_string(),
        horizon: c.horizon,
        lookback: c.lookback,
        variant: Variant::of(c),
        mse: metrics.mse,
        mae: metrics.mae,
        examples: metrics.count,
        normalized,
    })
}

/// Windowed train/val/test sets of one experiment.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub name: String,
    pub train: WindowedDataset,
    pub val: WindowedDataset,
    pub test: WindowedDataset,
}

/// Trains and tests one model variant; returns the report.
pub fn train_and_evaluate(
    data: &ExperimentData,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    normalized: bool,
) -> Result<EvalReport> {
    let mut model = CtPatchTst::new(model_config.clone(), train_config.seed)?;
    fit(&mut model, &data.train, &data.val, train_config)?;
    evaluate(&model, &data.test, &data.name, normalized)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationResult {
    pub seeds: Vec<u64>,
    pub channel_time: Vec<EvalReport>,
    pub channel_independent: Vec<EvalReport>,
}

fn mean_std(xs: impl Iterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = xs.collect();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

impl AblationResult {
    /// `(mean, sample std)` of test MSE for the channel-time model.
    pub fn channel_time_mse(&self) -> (f64, f64) {
        mean_std(self.channel_time.iter().map(|r| r.mse))
    }

    pub fn channel_independent_mse(&self) -> (f64, f64) {
        mean_std(self.channel_independent.iter().map(|r| r.mse))
    }

    pub fn channel_time_mae(&self) -> (f64, f64) {
        mean_std(self.channel_time.iter().map(|r| r.mae))
    }

    pub fn channel_independent_mae(&self) -> (f64, f64) {
        mean_std(self.channel_independent.iter().map(|r| r.mae))
    }
}

/// Trains both variants on identical data with identical seeds; the only
/// difference is whether channel attention is enabled.
pub fn ablation_compare(
    data: &ExperimentData,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    seeds: &[u64],
    normalized: bool,
) -> Result<AblationResult> {
    let mut result = AblationResult {
        seeds: seeds.to_vec(),
        channel_time: Vec::new(),
        channel_independent: Vec::new(),
    };
    for &seed in seeds {
        let tc = TrainConfig {
            seed,
            ..train_config.clone()
        };
        for enabled in [true, false] {
            let mc = ModelConfig {
                channel_attention: enabled,
                ..model_config.clone()
            };
            let report = train_and_evaluate(data, &mc, &tc, normalized)?;
            log::info!("seed {seed} {}: mse {:.6} mae {:.6}", report.variant.as_str(), report.mse, report.mae);
            if enabled {
                result.channel_time.push(report);
            } else {
                result.channel_independent.push(report);
            }
        }
    }
    Ok(result)
}

/// Stride used for patch length `p` in the sweep.
pub fn sweep_stride(p: usize) -> usize {
    (p / 2).max(1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepGrid {
    pub patch_lens: Vec<usize>,
    pub horizons: Vec<usize>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            patch_lens: vec![4, 8, 12, 16, 24, 32, 40],
            horizons: vec![96, 192, 336, 720],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub variant: Variant,
    pub patch_len: usize,
    pub stride: usize,
    pub horizon: usize,
    pub num_patches: usize,
    pub mse: f64,
    pub mae: f64,
}

/// Seed of one sweep cell, so results do not depend on grid order.
pub fn cell_seed(base: u64, patch_len: usize, horizon: usize) -> u64 {
    let mut h = base ^ 0x243F_6A88_85A3_08D3;
    for v in [patch_len as u64, horizon as u64] {
        h = (h ^ v).wrapping_mul(0x1000_0000_01B3).rotate_left(29);
    }
    h
}

/// Splits needed by the sweep; windows are rebuilt per horizon.
#[derive(Debug, Clone)]
pub struct SweepData {
    pub name: String,
    pub train: RawSeries,
    pub val: RawSeries,
    pub test: RawSeries,
}

/// Trains and evaluates both variants for every valid `(P, T)` cell.
///
/// Cells with `P > L` are skipped with a warning. With `jobs > 1`, cells
/// run on that many threads; the row order is always grid order.
pub fn patch_sweep(
    grid: &SweepGrid,
    data: &SweepData,
    base: &ModelConfig,
    train_config: &TrainConfig,
    normalized: bool,
    jobs: usize,
) -> Result<Vec<SweepRow>> {
    let mut cells = Vec::new();
    for &t in &grid.horizons {
        for &p in &grid.patch_lens {
            if p > base.lookback || p == 0 {
                log::warn!("skipping sweep cell P={p}: patch longer than look-back {}", base.lookback);
                continue;
            }
            for enabled in [true, false] {
                cells.push((p, t, enabled));
            }
        }
    }

    let run_cell = |&(p, t, enabled): &(usize, usize, bool)| -> Result<SweepRow> {
        let l = base.lookback;
        let exp = ExperimentData {
            name: data.name.clone(),
            train: make_windows(&data.train, l, t, Split::Train)?,
            val: make_windows(&data.val, l, t, Split::Val)?,
            test: make_windows(&data.test, l, t, Split::Test)?,
        };
        let mc = ModelConfig {
            patch_len: p,
            stride: sweep_stride(p),
            horizon: t,
            channel_attention: enabled,
            ..base.clone()
        };
        let tc = TrainConfig {
            seed: cell_seed(train_config.seed, p, t),
            ..train_config.clone()
        };
        let report = train_and_evaluate(&exp, &mc, &tc, normalized)?;
        Ok(SweepRow {
            variant: report.variant,
            patch_len: p,
            stride: mc.stride,
            horizon: t,
            num_patches: mc.num_patches(),
            mse: report.mse,
            mae: report.mae,
        })
    };

    let jobs = jobs.max(1).min(cells.len().max(1));
    if jobs == 1 {
        return cells.iter().map(run_cell).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut slots: Vec<Option<Result<SweepRow>>> = (0..cells.len()).map(|_| None).collect();
    let results = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if i >= cells.len() {
                    break;
                }
                let r = run_cell(&cells[i]);
                results.lock().expect("sweep results lock")[i] = Some(r);
            });
        }
    });
    slots.into_iter().map(|r| r.expect("every cell ran")).collect()
}

pub fn write_sweep_csv<W: Write>(out: W, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["variant", "P", "S", "T", "n_patches", "mse", "mae"])
        .map_err(std::io::Error::from)?;
    for r in rows {
        w.write_record([
            r.variant.as_str().to_string(),
            r.patch_len.to_string(),
            r.stride.to_string(),
            r.horizon.to_string(),
            r.num_patches.to_string(),
            r.mse.to_string(),
            r.mae.to_string(),
        ])
        .map_err(std::io::Error::from)?;
    }
    w.flush()?;
    Ok(())
}

/// Checks a sweep row's patch count against the closed-form count.
pub fn row_patch_count_ok(row: &SweepRow, lookback: usize) -> bool {
    row.num_patches == num_patches(lookback, row.patch_len, row.stride)
}

fn write_matrix(path: &Path, names: &[String], m: &Tensor) -> Result<()> {
    let k = names.len();
    let mut w = csv::Writer::from_path(path).map_err(std::io::Error::from)?;
    let mut header = vec![String::new()];
    header.extend(names.iter().cloned());
    w.write_record(&header).map_err(std::io::Error::from)?;
    for (i, name) in names.iter().enumerate() {
        let mut row = vec![name.clone()];
        row.extend((0..k).map(|j| m.data()[i * k + j].to_string()));
        w.write_record(&row).map_err(std::io::Error::from)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `attention_layer{k}.csv` for every encoder layer and
/// `attention_mean.csv` into `dir`; returns the written paths.
pub fn export_attention(model: &CtPatchTst, window: &Tensor, channel_names: &[String], dir: &Path) -> Result<Vec<PathBuf>> {
    if channel_names.len() != model.config().channels {
        return Err(Error::Config(format!(
            "{} channel names for a {}-channel model",
            channel_names.len(),
            model.config().channels
        )));
    }
    let summary = model.channel_attention_summary(window)?;
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for (k, layer) in summary.layers.iter().enumerate() {
        let p = dir.join(format!("attention_layer{k}.csv"));
        write_matrix(&p, channel_names, layer)?;
        paths.push(p);
    }
    let p = dir.join("attention_mean.csv");
    write_matrix(&p, channel_names, &summary.mean())?;
    paths.push(p);
    Ok(paths)
}
