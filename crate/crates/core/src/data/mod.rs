//! Hourly multichannel series: ingestion, cleaning, chronological splits
//! and sliding windows.

mod fixture;
mod io;
mod windows;

use chrono::{NaiveDateTime, TimeDelta};

use crate::error::DataError;

pub use fixture::{synthetic_series, write_fixture, write_fixture_file, FixtureSpec};
pub use io::{format_timestamp, load_csv, parse_timestamp, read_csv, CsvColumns};
pub use windows::{batch_iter, make_windows, Batches, Split, WindowedDataset};

/// Default forecast channels.
pub const DEFAULT_CHANNELS: [&str; 3] = ["OffshoreWindPower", "OnshoreWindPower", "SolarPowerProd"];

/// Time-indexed multichannel readings of one price area. Missing readings
/// are `NaN` until [`clean`] runs.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSeries {
    pub timestamps: Vec<NaiveDateTime>,
    pub area: String,
    pub channel_names: Vec<String>,
    /// One row per timestamp, `channel_names.len()` values each.
    pub values: Vec<Vec<f64>>,
}

impl RawSeries {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channel_names.len()
    }

    /// Rows `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> RawSeries {
        RawSeries {
            timestamps: self.timestamps[start..end].to_vec(),
            area: self.area.clone(),
            channel_names: self.channel_names.clone(),
            values: self.values[start..end].to_vec(),
        }
    }
}

/// Repairs a raw series so that it is strictly hourly and fully finite.
///
/// Rows are ordered by time and duplicate timestamps keep their first
/// occurrence. Missing hours are inserted, missing cells are forward-filled
/// from the previous reading, rows before the first complete reading are
/// dropped and negative readings are clamped to zero.
pub fn clean(raw: &RawSeries) -> Result<RawSeries, DataError> {
    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.sort_by_key(|&i| raw.timestamps[i]);
    order.dedup_by_key(|i| raw.timestamps[*i]);

    let hour = TimeDelta::hours(1);
    let m = raw.channels();
    let mut timestamps = Vec::with_capacity(order.len());
    let mut values: Vec<Vec<f64>> = Vec::with_capacity(order.len());
    for &i in &order {
        let t = raw.timestamps[i];
        if let Some(&prev) = timestamps.last() {
            let mut fill: NaiveDateTime = prev + hour;
            while fill < t {
                timestamps.push(fill);
                values.push(vec![f64::NAN; m]);
                fill += hour;
            }
        }
        timestamps.push(t);
        values.push(raw.values[i].clone());
    }

    let first_complete = values
        .iter()
        .position(|row| row.iter().all(|v| v.is_finite()))
        .ok_or_else(|| DataError::Empty(format!(" after cleaning area `{}`", raw.area)))?;
    timestamps.drain(..first_complete);
    values.drain(..first_complete);

    let mut clamped = 0usize;
    for r in 0..values.len() {
        for c in 0..m {
            if !values[r][c].is_finite() {
                values[r][c] = values[r - 1][c];
            }
            if values[r][c] < 0.0 {
                values[r][c] = 0.0;
                clamped += 1;
            }
        }
    }
    if clamped > 0 {
        log::warn!("clamped {clamped} negative readings to zero");
    }
    Ok(RawSeries {
        timestamps,
        area: raw.area.clone(),
        channel_names: raw.channel_names.clone(),
        values,
    })
}

/// Train/validation/test fractions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: RawSeries,
    pub val: RawSeries,
    pub test: RawSeries,
    /// First own (non-prefix) row of the validation and test segments.
    pub boundaries: (usize, usize),
}

/// Splits chronologically at `floor(n * train)` and
/// `floor(n * (train + val))`. Validation and test segments are prefixed by
/// the preceding `lookback` rows so their first windows exist; the prefix
/// only ever feeds inputs, never targets.
pub fn split_chronological(
    raw: &RawSeries,
    fractions: SplitFractions,
    lookback: usize,
    horizon: usize,
) -> Result<Splits, DataError> {
    let SplitFractions { train, val, test } = fractions;
    if train <= 0.0 || val < 0.0 || test < 0.0 || ((train + val + test) - 1.0).abs() > 1e-9 {
        return Err(DataError::Fractions(format!(
            "({train}, {val}, {test}) must be non-negative, train positive, and sum to 1"
        )));
    }
    let n = raw.len();
    // The small offset keeps e.g. 1000 * (0.7 + 0.1) from flooring to 799.
    let floor = |f: f64| (n as f64 * f + 1e-9).floor() as usize;
    let b1 = floor(train).min(n);
    let b2 = floor(train + val).clamp(b1, n);
    let need = lookback + horizon;
    let train_seg = raw.slice(0, b1);
    let val_seg = raw.slice(b1.saturating_sub(lookback), b2);
    let test_seg = raw.slice(b2.saturating_sub(lookback), n);
    for (name, seg) in [("train", &train_seg), ("val", &val_seg), ("test", &test_seg)] {
        if seg.len() < need {
            return Err(DataError::Insufficient(format!(
                "{name} segment has {} rows, needs at least {need} (lookback {lookback} + horizon {horizon})",
                seg.len()
            )));
        }
    }
    Ok(Splits {
        train: train_seg,
        val: val_seg,
        test: test_seg,
        boundaries: (b1, b2),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;

    fn ts(h: i64) -> NaiveDateTime {
        NaiveDate::from_ymd_opt(2019, 1, 1)
            .unwrap()
            .and_hms_opt(0, 0, 0)
            .unwrap()
            + TimeDelta::hours(h)
    }

    fn series(hours: &[i64], vals: &[f64]) -> RawSeries {
        RawSeries {
            timestamps: hours.iter().map(|&h| ts(h)).collect(),
            area: "DK1".into(),
            channel_names: vec!["a".into()],
            values: vals.iter().map(|&v| vec![v]).collect(),
        }
    }

    fn flat(s: &RawSeries) -> Vec<f64> {
        s.values.iter().map(|r| r[0]).collect()
    }

    #[test]
    fn forward_fill() {
        let s = clean(&series(&[0, 1, 2], &[5.0, f64::NAN, 7.0])).unwrap();
        assert_eq!(flat(&s), vec![5.0, 5.0, 7.0]);
    }

    #[test]
    fn leading_missing_dropped() {
        let s = clean(&series(&[0, 1, 2], &[f64::NAN, 3.0, 4.0])).unwrap();
        assert_eq!(flat(&s), vec![3.0, 4.0]);
        assert_eq!(s.timestamps[0], ts(1));
    }

    #[test]
    fn duplicates_keep_first() {
        let s = clean(&series(&[0, 1, 1, 2], &[0.0, 1.0, 9.0, 2.0])).unwrap();
        assert_eq!(flat(&s), vec![0.0, 1.0, 2.0]);
    }

    #[test]
    fn gaps_are_filled_hourly_and_negatives_clamped() {
        let s = clean(&series(&[3, 0, 1], &[8.0, 2.0, -1.0])).unwrap();
        assert_eq!(s.timestamps, vec![ts(0), ts(1), ts(2), ts(3)]);
        assert_eq!(flat(&s), vec![2.0, 0.0, 0.0, 8.0]);
    }

    #[test]
    fn all_missing_is_empty_error() {
        assert!(matches!(
            clean(&series(&[0, 1], &[f64::NAN, f64::NAN])),
            Err(DataError::Empty(_))
        ));
    }

    #[test]
    fn split_floor_arithmetic() {
        let hours: Vec<i64> = (0..1000).collect();
        let vals: Vec<f64> = (0..1000).map(f64::from).collect();
        let s = series(&hours, &vals);
        let sp = split_chronological(&s, SplitFractions::default(), 48, 24).unwrap();
        assert_eq!(sp.boundaries, (700, 800));
        assert_eq!(sp.train.len(), 700);
        assert_eq!(sp.val.len(), 100 + 48);
        assert_eq!(sp.test.len(), 200 + 48);
        assert_eq!(sp.val.timestamps[48], ts(700));
        assert_eq!(sp.test.timestamps[48], ts(800));
    }

    #[test]
    fn empty_test_fraction_is_insufficient() {
        let hours: Vec<i64> = (0..1000).collect();
        let s = series(&hours, &vec![1.0; 1000]);
        let f = SplitFractions {
            train: 0.5,
            val: 0.5,
            test: 0.0,
        };
        assert!(matches!(
            split_chronological(&s, f, 48, 24),
            Err(DataError::Insufficient(msg)) if msg.starts_with("test")
        ));
    }

    #[test]
    fn bad_fractions_rejected() {
        let s = series(&[0, 1], &[1.0, 2.0]);
        let f = SplitFractions {
            train: 0.7,
            val: 0.2,
            test: 0.2,
        };
        assert!(matches!(split_chronological(&s, f, 1, 1), Err(DataError::Fractions(_))));
    }
}
