use std::sync::Arc;

use chrono::NaiveDateTime;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::RawSeries;
use crate::error::DataError;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Stride-1 sliding windows over a cleaned series.
///
/// Example `k` has input rows `[k, k + L)` and target rows
/// `[k + L, k + L + T)`. Rows are shared, not copied per example.
#[derive(Debug, Clone)]
pub struct WindowedDataset {
    rows: Arc<Vec<f64>>,
    timestamps: Arc<Vec<NaiveDateTime>>,
    channels: usize,
    lookback: usize,
    horizon: usize,
    split: Split,
}

pub fn make_windows(series: &RawSeries, lookback: usize, horizon: usize, split: Split) -> Result<WindowedDataset, DataError> {
    if lookback == 0 || horizon == 0 {
        return Err(DataError::Insufficient("lookback and horizon must be positive".into()));
    }
    if series.len() < lookback + horizon {
        return Err(DataError::Insufficient(format!(
            "{} series has {} rows, needs {} for lookback {lookback} + horizon {horizon}",
            split.as_str(),
            series.len(),
            lookback + horizon
        )));
    }
    let rows = series.values.iter().flatten().copied().collect();
    Ok(WindowedDataset {
        rows: Arc::new(rows),
        timestamps: Arc::new(series.timestamps.clone()),
        channels: series.channels(),
        lookback,
        horizon,
        split,
    })
}

impl WindowedDataset {
    pub fn len(&self) -> usize {
        (self.timestamps.len() + 1).saturating_sub(self.lookback + self.horizon)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn lookback(&self) -> usize {
        self.lookback
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn split(&self) -> Split {
        self.split
    }

    fn rows(&self, start: usize, count: usize) -> &[f64] {
        &self.rows[start * self.channels..(start + count) * self.channels]
    }

    /// `(input L x M, target T x M)` of example `k`.
    pub fn example(&self, k: usize) -> (Tensor, Tensor) {
        let m = self.channels;
        let input = Tensor::new(vec![self.lookback, m], self.rows(k, self.lookback).to_vec());
        let target = Tensor::new(vec![self.horizon, m], self.rows(k + self.lookback, self.horizon).to_vec());
        (input.expect("window shape"), target.expect("window shape"))
    }

    pub fn input_times(&self, k: usize) -> &[NaiveDateTime] {
        &self.timestamps[k..k + self.lookback]
    }

    pub fn target_times(&self, k: usize) -> &[NaiveDateTime] {
        &self.timestamps[k + self.lookback..k + self.lookback + self.horizon]
    }

    /// Stacks examples into `([B, L, M], [B, T, M])`.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Tensor) {
        let m = self.channels;
        let mut xs = Vec::with_capacity(indices.len() * self.lookback * m);
        let mut ys = Vec::with_capacity(indices.len() * self.horizon * m);
        for &k in indices {
            xs.extend_from_slice(self.rows(k, self.lookback));
            ys.extend_from_slice(self.rows(k + self.lookback, self.horizon));
        }
        let b = indices.len();
        (
            Tensor::new(vec![b, self.lookback, m], xs).expect("batch shape"),
            Tensor::new(vec![b, self.horizon, m], ys).expect("batch shape"),
        )
    }

    /// Keeps only the first `n` examples (the underlying rows are shared).
    pub fn truncated(&self, n: usize) -> WindowedDataset {
        let keep = (n.min(self.len()) + self.lookback + self.horizon - 1).min(self.timestamps.len());
        WindowedDataset {
            rows: Arc::new(self.rows[..keep * self.channels].to_vec()),
            timestamps: Arc::new(self.timestamps[..keep].to_vec()),
            ..self.clone()
        }
    }
}

/// One epoch of example indices in batches.
#[derive(Debug, Clone)]
pub struct Batches {
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for Batches {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let chunk = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(chunk)
    }
}

/// Covers every example once; the final partial batch is kept. When
/// shuffling, the permutation depends only on `(seed, epoch)`.
pub fn batch_iter(ds: &WindowedDataset, batch_size: usize, shuffle: bool, seed: u64, epoch: u64) -> Batches {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut order: Vec<usize> = (0..ds.len()).collect();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
    }
    Batches {
        order,
        batch_size,
        pos: 0,
    }
}
