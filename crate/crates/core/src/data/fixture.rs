//! Seeded synthetic data in the same CSV layout as the real generation
//! records.
//!
//! Offshore wind is a daily sinusoid plus an AR(1) component, onshore wind
//! is the offshore series delayed by `lag` hours plus noise, and solar is a
//! clipped daily bell. The lagged copy makes cross-channel information
//! genuinely useful for forecasting.

use std::io::Write;
use std::path::Path;

use chrono::{NaiveDate, NaiveDateTime, TimeDelta};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{format_timestamp, RawSeries, DEFAULT_CHANNELS};

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureSpec {
    /// Rows per area.
    pub rows: usize,
    pub seed: u64,
    pub areas: Vec<String>,
    /// Delay of the onshore channel behind the offshore channel, in hours.
    pub lag: usize,
    /// AR(1) coefficient of the offshore stochastic component.
    pub ar_coef: f64,
    pub start: NaiveDateTime,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            rows: 2000,
            seed: 7,
            areas: vec!["DK1".into(), "DK2".into()],
            lag: 4,
            ar_coef: 0.9,
            start: NaiveDate::from_ymd_opt(2019, 1, 1)
                .unwrap()
                .and_hms_opt(0, 0, 0)
                .unwrap(),
        }
    }
}

/// The synthetic series of area number `area_index`.
pub fn synthetic_series(spec: &FixtureSpec, area_index: usize) -> RawSeries {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(1000).wrapping_add(area_index as u64));
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let total = spec.rows + spec.lag;
    let innovation = (1.0 - spec.ar_coef * spec.ar_coef).sqrt();
    let phase = area_index as f64 * 0.7;
    let day = std::f64::consts::TAU / 24.0;

    let mut ar = 0.0;
    let offshore: Vec<f64> = (0..total)
        .map(|t| {
            ar = spec.ar_coef * ar + innovation * unit.sample(&mut rng);
            let v = 800.0 + 200.0 * (day * t as f64 + phase).sin() + 250.0 * ar;
            v.max(0.0)
        })
        .collect();

    let values = (0..spec.rows)
        .map(|i| {
            let t = i + spec.lag;
            let onshore = (offshore[t - spec.lag] + 20.0 * unit.sample(&mut rng)).max(0.0);
            let hour = (t % 24) as f64;
            let bell = (std::f64::consts::PI * (hour - 6.0) / 12.0).sin().max(0.0);
            let solar = (400.0 * bell * (1.0 + 0.1 * unit.sample(&mut rng))).max(0.0);
            vec![offshore[t], onshore, solar]
        })
        .collect();

    RawSeries {
        timestamps: (0..spec.rows)
            .map(|i| spec.start + TimeDelta::hours(i as i64))
            .collect(),
        area: spec.areas.get(area_index).cloned().unwrap_or_default(),
        channel_names: DEFAULT_CHANNELS.iter().map(|s| s.to_string()).collect(),
        values,
    }
}

/// Writes all areas, hour by hour, with the default column names.
pub fn write_fixture<W: Write>(out: W, spec: &FixtureSpec) -> std::io::Result<()> {
    let series: Vec<RawSeries> = (0..spec.areas.len()).map(|a| synthetic_series(spec, a)).collect();
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["HourUTC", "PriceArea"];
    header.extend(DEFAULT_CHANNELS);
    w.write_record(&header)?;
    for i in 0..spec.rows {
        for s in &series {
            let mut rec = vec![format_timestamp(s.timestamps[i]), s.area.clone()];
            rec.extend(s.values[i].iter().map(|v| format!("{v:.4}")));
            w.write_record(&rec)?;
        }
    }
    w.flush()
}

/// Writes the fixture to `path`.
pub fn write_fixture_file(path: &Path, spec: &FixtureSpec) -> std::io::Result<()> {
    let file = std::fs::File::create(path)?;
    write_fixture(std::io::BufWriter::new(file), spec)
}
