//! Flat `key = value` run configuration.
//!
//! Resolution order is defaults, then a config file, then individual
//! overrides. Unknown keys and unparsable values are errors that name the
//! key. [`RunConfig::to_text`] writes every key in canonical order, so the
//! echoed file reproduces the run when fed back in.

use std::path::{Path, PathBuf};

use crate::data::{CsvColumns, FixtureSpec, SplitFractions, DEFAULT_CHANNELS};
use crate::error::{Error, Result};
use crate::evaluation::SweepGrid;
use crate::model::ModelConfig;
use crate::training::{LossKind, LrSchedule, TrainConfig};

/// `(key, default, description)` for every recognized key.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("data_path", "data.csv", "input CSV (make-fixture writes here)"),
    ("area", "DK1", "price area to select; empty selects all rows"),
    ("timestamp_column", "HourUTC", "timestamp column name"),
    ("area_column", "PriceArea", "area column name"),
    ("columns", "OffshoreWindPower,OnshoreWindPower,SolarPowerProd", "forecast channels, comma separated"),
    ("train_fraction", "0.7", "chronological train share"),
    ("val_fraction", "0.1", "chronological validation share"),
    ("test_fraction", "0.2", "chronological test share"),
    ("max_train_windows", "0", "cap on training windows, 0 for all"),
    ("max_eval_windows", "0", "cap on validation and test windows, 0 for all"),
    ("out_dir", "runs", "output directory"),
    ("seed", "0", "seed for initialization, shuffling, dropout and fixtures"),
    ("jobs", "1", "parallel sweep cells"),
    ("lookback", "336", "look-back window L"),
    ("horizon", "96", "forecast horizon T"),
    ("patch_len", "16", "patch length P"),
    ("stride", "auto", "patch stride S; auto is floor(P / 2)"),
    ("model_dim", "256", "latent width D"),
    ("channel_heads", "1", "channel attention heads"),
    ("time_heads", "16", "time attention heads"),
    ("encoder_layers", "4", "encoder blocks"),
    ("ffn_dim", "512", "feed-forward hidden width"),
    ("dropout", "0.0", "dropout rate"),
    ("revin_eps", "1e-8", "instance-normalization variance floor"),
    ("layernorm_eps", "1e-5", "layer-normalization variance floor"),
    ("channel_attention", "true", "false gives the channel-independent baseline"),
    ("learning_rate", "0.001", "Adam learning rate"),
    ("batch_size", "128", "examples per batch"),
    ("epochs", "50", "training epochs"),
    ("loss", "mse", "training loss, mse or mae"),
    ("adam_beta1", "0.9", "first-moment decay"),
    ("adam_beta2", "0.999", "second-moment decay"),
    ("adam_eps", "1e-8", "Adam denominator floor"),
    ("patience", "0", "early-stopping patience in epochs, 0 disables"),
    ("grad_clip", "0", "global gradient-norm clip, 0 disables"),
    ("lr_step_every", "0", "decay the learning rate every this many epochs, 0 disables"),
    ("lr_step_factor", "0.5", "learning-rate decay factor"),
    ("shuffle", "true", "shuffle training batches"),
    ("normalized_metrics", "false", "report metrics in per-window normalized units"),
    ("sweep_patch_lens", "4,8,12,16,24,32,40", "sweep patch lengths"),
    ("sweep_horizons", "96,192,336,720", "sweep horizons"),
    ("fixture_rows", "2000", "rows per area in the synthetic fixture"),
    ("fixture_areas", "DK1,DK2", "areas in the synthetic fixture"),
    ("fixture_lag", "4", "onshore delay behind offshore, in hours"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: Vec<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|(_, d, _)| d.to_string()).collect(),
        }
    }
}

fn slot(key: &str) -> Result<usize> {
    KEYS.iter()
        .position(|(k, _, _)| *k == key)
        .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))
}

fn bad(key: &str, value: &str, want: &str) -> Error {
    Error::Config(format!("`{key}` = `{value}` is not {want}"))
}

impl RunConfig {
    pub fn get(&self, key: &str) -> Result<&str> {
        Ok(&self.values[slot(key)?])
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let i = slot(key.trim())?;
        self.values[i] = value.trim().to_string();
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{pair}` is not key=value")))?;
        self.set(k, v)
    }

    /// Applies the contents of a config file.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split_once('#').map_or(raw, |(l, _)| l).trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text)
    }

    /// Every key with its resolved value, one per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for ((k, _, doc), v) in KEYS.iter().zip(&self.values) {
            s.push_str(&format!("# {doc}\n{k} = {v}\n"));
        }
        s
    }

    fn parse<T: std::str::FromStr>(&self, key: &str, want: &str) -> Result<T> {
        let v = self.get(key)?;
        v.parse().map_err(|_| bad(key, v, want))
    }

    fn usize(&self, key: &str) -> Result<usize> {
        self.parse(key, "a non-negative integer")
    }

    fn f64(&self, key: &str) -> Result<f64> {
        let x: f64 = self.parse(key, "a number")?;
        if x.is_finite() {
            Ok(x)
        } else {
            Err(bad(key, self.get(key)?, "a finite number"))
        }
    }

    fn bool(&self, key: &str) -> Result<bool> {
        self.parse(key, "true or false")
    }

    fn list<T: std::str::FromStr>(&self, key: &str, want: &str) -> Result<Vec<T>> {
        let v = self.get(key)?;
        v.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| bad(key, v, want)))
            .collect()
    }

    fn names(&self, key: &str) -> Result<Vec<String>> {
        self.list(key, "a comma-separated list")
    }

    pub fn seed(&self) -> Result<u64> {
        self.parse("seed", "a non-negative integer")
    }

    pub fn jobs(&self) -> Result<usize> {
        self.usize("jobs")
    }

    pub fn out_dir(&self) -> Result<PathBuf> {
        Ok(PathBuf::from(self.get("out_dir")?))
    }

    pub fn data_path(&self) -> Result<PathBuf> {
        Ok(PathBuf::from(self.get("data_path")?))
    }

    pub fn area(&self) -> Result<Option<String>> {
        let a = self.get("area")?;
        Ok((!a.is_empty()).then(|| a.to_string()))
    }

    pub fn columns(&self) -> Result<CsvColumns> {
        let channels = self.names("columns")?;
        if channels.is_empty() {
            return Err(Error::Config("`columns` names no channels".into()));
        }
        Ok(CsvColumns {
            timestamp: self.get("timestamp_column")?.to_string(),
            area: self.get("area_column")?.to_string(),
            channels,
        })
    }

    pub fn split_fractions(&self) -> Result<SplitFractions> {
        Ok(SplitFractions {
            train: self.f64("train_fraction")?,
            val: self.f64("val_fraction")?,
            test: self.f64("test_fraction")?,
        })
    }

    pub fn max_train_windows(&self) -> Result<Option<usize>> {
        Ok(Some(self.usize("max_train_windows")?).filter(|&n| n > 0))
    }

    pub fn max_eval_windows(&self) -> Result<Option<usize>> {
        Ok(Some(self.usize("max_eval_windows")?).filter(|&n| n > 0))
    }

    pub fn normalized_metrics(&self) -> Result<bool> {
        self.bool("normalized_metrics")
    }

    /// Model architecture; the channel count comes from `columns`.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let patch_len = self.usize("patch_len")?;
        let stride = match self.get("stride")? {
            "auto" => (patch_len / 2).max(1),
            _ => self.usize("stride")?,
        };
        let config = ModelConfig {
            lookback: self.usize("lookback")?,
            horizon: self.usize("horizon")?,
            channels: self.columns()?.channels.len(),
            patch_len,
            stride,
            model_dim: self.usize("model_dim")?,
            channel_heads: self.usize("channel_heads")?,
            time_heads: self.usize("time_heads")?,
            encoder_layers: self.usize("encoder_layers")?,
            ffn_dim: self.usize("ffn_dim")?,
            dropout: self.f64("dropout")?,
            revin_eps: self.f64("revin_eps")?,
            layernorm_eps: self.f64("layernorm_eps")?,
            channel_attention: self.bool("channel_attention")?,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let loss = match self.get("loss")? {
            "mse" => LossKind::Mse,
            "mae" => LossKind::Mae,
            v => return Err(bad("loss", v, "mse or mae")),
        };
        let every = self.usize("lr_step_every")?;
        let clip = self.f64("grad_clip")?;
        let config = TrainConfig {
            learning_rate: self.f64("learning_rate")?,
            batch_size: self.usize("batch_size")?,
            epochs: self.usize("epochs")?,
            loss,
            adam_beta1: self.f64("adam_beta1")?,
            adam_beta2: self.f64("adam_beta2")?,
            adam_eps: self.f64("adam_eps")?,
            seed: self.seed()?,
            patience: Some(self.usize("patience")?).filter(|&p| p > 0),
            grad_clip: (clip > 0.0).then_some(clip),
            schedule: if every == 0 {
                LrSchedule::Constant
            } else {
                LrSchedule::Step {
                    every,
                    factor: self.f64("lr_step_factor")?,
                }
            },
            shuffle: self.bool("shuffle")?,
        };
        if config.batch_size == 0 || config.learning_rate <= 0.0 {
            return Err(Error::Config("batch_size and learning_rate must be positive".into()));
        }
        Ok(config)
    }

    pub fn sweep_grid(&self) -> Result<SweepGrid> {
        Ok(SweepGrid {
            patch_lens: self.list("sweep_patch_lens", "a list of integers")?,
            horizons: self.list("sweep_horizons", "a list of integers")?,
        })
    }

    pub fn fixture_spec(&self) -> Result<FixtureSpec> {
        let columns = self.columns()?;
        if columns.channels != DEFAULT_CHANNELS {
            log::warn!("the fixture always writes the default channel columns");
        }
        Ok(FixtureSpec {
            rows: self.usize("fixture_rows")?,
            seed: self.seed()?,
            areas: self.names("fixture_areas")?,
            lag: self.usize("fixture_lag")?,
            ..FixtureSpec::default()
        })
    }

    /// Parses every typed view, so that bad values fail before any work.
    pub fn check(&self) -> Result<()> {
        self.model_config()?;
        self.train_config()?;
        self.split_fractions()?;
        self.sweep_grid()?;
        self.fixture_spec()?;
        self.jobs()?;
        self.max_train_windows()?;
        self.max_eval_windows()?;
        self.normalized_metrics()?;
        Ok(())
    }
}
