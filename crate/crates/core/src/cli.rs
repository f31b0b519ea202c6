//! `ctpt` command-line interface.
//!
//! Exit codes: 0 success, 1 other I/O failure, 2 configuration or contract
//! error (including usage errors and architecture mismatches), 3 data
//! error, 4 numeric abort.

use std::ffi::OsString;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use chrono::TimeDelta;
use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::RunConfig;
use crate::data::{clean, load_csv, make_windows, split_chronological, write_fixture_file, Split, WindowedDataset};
use crate::error::{CheckpointError, DataError, Error, Result, TensorError};
use crate::evaluation::{evaluate, export_attention, patch_sweep, write_reports, write_sweep_csv, SweepData};
use crate::model::{CtPatchTst, ModelConfig};
use crate::tensor::Tensor;
use crate::training::Trainer;

#[derive(Debug, Parser)]
#[command(name = "ctpt", version, about = "Channel-time patch transformer forecasting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// Config file of `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint to read (eval, predict, export-attn); defaults to
    /// `<out>/checkpoint.ctpt`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Output directory, overriding `out_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed, overriding `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// `key=value` override; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on the configured data and write the best checkpoint.
    Train(Common),
    /// Evaluate a checkpoint on the test split.
    Eval(Common),
    /// Forecast the next T hours from an L-row CSV window.
    Predict {
        #[command(flatten)]
        common: Common,
        /// CSV with a timestamp column and the configured channel columns.
        #[arg(long)]
        input: PathBuf,
    },
    /// Train and evaluate both variants over patch lengths and horizons.
    Sweep(Common),
    /// Export channel-attention maps for one window.
    ExportAttn {
        #[command(flatten)]
        common: Common,
        /// Window CSV; defaults to the first test window.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Write the seeded synthetic fixture to `data_path`.
    MakeFixture(Common),
}

/// Exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Checkpoint(_) => 2,
        Error::Tensor(TensorError::NonFinite(_)) | Error::Numeric(_) => 4,
        Error::Tensor(_) => 2,
        Error::Data(_) => 3,
        Error::Io(_) => 1,
    }
}

/// Parses `args` (including the program name), runs the command and
/// returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Train(c) => cmd_train(&resolve(&c)?),
        Command::Eval(c) => cmd_eval(&resolve(&c)?, c.checkpoint.as_deref()),
        Command::Predict { common, input } => cmd_predict(&resolve(&common)?, common.checkpoint.as_deref(), &input),
        Command::Sweep(c) => cmd_sweep(&resolve(&c)?),
        Command::ExportAttn { common, input } => {
            cmd_export_attn(&resolve(&common)?, common.checkpoint.as_deref(), input.as_deref())
        }
        Command::MakeFixture(c) => cmd_make_fixture(&resolve(&c)?),
    }
}

/// Defaults, then `--config`, then `--out`/`--seed`, then `--set`.
pub fn resolve(common: &Common) -> Result<RunConfig> {
    let mut config = RunConfig::default();
    if let Some(path) = &common.config {
        config.apply_file(path)?;
    }
    if let Some(out) = &common.out {
        config.set("out_dir", &out.to_string_lossy())?;
    }
    if let Some(seed) = common.seed {
        config.set("seed", &seed.to_string())?;
    }
    for pair in &common.set {
        config.set_pair(pair)?;
    }
    config.check()?;
    Ok(config)
}

fn prepare_out(config: &RunConfig) -> Result<PathBuf> {
    let out = config.out_dir()?;
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("resolved_config.txt"), config.to_text())?;
    Ok(out)
}

struct Prepared {
    name: String,
    train: WindowedDataset,
    val: WindowedDataset,
    test: WindowedDataset,
}

fn cap(ds: WindowedDataset, limit: Option<usize>) -> WindowedDataset {
    match limit {
        Some(n) if n < ds.len() => ds.truncated(n),
        _ => ds,
    }
}

fn load_splits(config: &RunConfig, model: &ModelConfig) -> Result<(String, crate::data::Splits)> {
    let columns = config.columns()?;
    let area = config.area()?;
    let raw = load_csv(&config.data_path()?, area.as_deref(), &columns)?;
    let series = clean(&raw)?;
    let splits = split_chronological(&series, config.split_fractions()?, model.lookback, model.horizon)?;
    Ok((area.unwrap_or_else(|| "all".into()), splits))
}

fn load_windows(config: &RunConfig, model: &ModelConfig) -> Result<Prepared> {
    let (name, s) = load_splits(config, model)?;
    let (l, t) = (model.lookback, model.horizon);
    Ok(Prepared {
        name,
        train: cap(make_windows(&s.train, l, t, Split::Train)?, config.max_train_windows()?),
        val: cap(make_windows(&s.val, l, t, Split::Val)?, config.max_eval_windows()?),
        test: cap(make_windows(&s.test, l, t, Split::Test)?, config.max_eval_windows()?),
    })
}

fn checkpoint_path(config: &RunConfig, explicit: Option<&Path>) -> Result<PathBuf> {
    Ok(explicit.map(Path::to_path_buf).unwrap_or(config.out_dir()?.join("checkpoint.ctpt")))
}

/// Loads a checkpoint and checks it against the configured architecture.
pub fn load_matching(config: &RunConfig, path: &Path) -> Result<CtPatchTst> {
    let Checkpoint { model, .. } = load_checkpoint(path)?;
    let expected = config.model_config()?;
    let reference = CtPatchTst::new(expected.clone(), 0)?;
    for (name, want) in reference.params().iter() {
        if let Some(id) = model.params().find(name) {
            let found = model.params().get(id).shape();
            if found != want.shape() {
                return Err(CheckpointError::ShapeMismatch {
                    name: name.to_string(),
                    expected: want.shape().to_vec(),
                    found: found.to_vec(),
                }
                .into());
            }
        }
    }
    let mut stored = model.config().clone();
    stored.dropout = expected.dropout;
    if stored != expected {
        return Err(Error::Config(format!(
            "checkpoint architecture {:?} differs from configured {:?}",
            model.config(),
            expected
        )));
    }
    Ok(model)
}

pub fn cmd_train(config: &RunConfig) -> Result<()> {
    let model_config = config.model_config()?;
    let train_config = config.train_config()?;
    let data = load_windows(config, &model_config)?;
    let out = prepare_out(config)?;
    log::info!(
        "training on {} windows, validating on {}, area {}",
        data.train.len(),
        data.val.len(),
        data.name
    );
    let model = CtPatchTst::new(model_config, train_config.seed)?;
    let mut trainer = Trainer::new(model, train_config);
    trainer.fit(&data.train, &data.val)?;
    let record = trainer.record();
    record.write_csv(BufWriter::new(File::create(out.join("run_record.csv"))?))?;
    let best = trainer.best_model();
    let path = out.join("checkpoint.ctpt");
    save_checkpoint(&best, None, &path)?;
    if let Some(b) = record.best() {
        println!(
            "best epoch {} val_mse={} val_mae={} checkpoint={}",
            b.epoch,
            b.val_mse,
            b.val_mae,
            path.display()
        );
    }
    Ok(())
}

pub fn cmd_eval(config: &RunConfig, checkpoint: Option<&Path>) -> Result<()> {
    let model = load_matching(config, &checkpoint_path(config, checkpoint)?)?;
    let data = load_windows(config, model.config())?;
    let out = prepare_out(config)?;
    let report = evaluate(&model, &data.test, &data.name, config.normalized_metrics()?)?;
    write_reports(BufWriter::new(File::create(out.join("eval_report.csv"))?), std::slice::from_ref(&report))?;
    let row = report.csv_row();
    println!("mse={} mae={} examples={} units={}", row[4], row[5], row[6], row[7]);
    Ok(())
}

pub fn cmd_predict(config: &RunConfig, checkpoint: Option<&Path>, input: &Path) -> Result<()> {
    let model = load_matching(config, &checkpoint_path(config, checkpoint)?)?;
    let c = model.config().clone();
    let columns = config.columns()?;
    let window = load_csv(input, None, &columns)?;
    if window.len() != c.lookback {
        return Err(Error::Config(format!(
            "input has {} rows, expected exactly L = {}",
            window.len(),
            c.lookback
        )));
    }
    if window.values.iter().flatten().any(|v| !v.is_finite()) {
        return Err(DataError::Empty("complete window (input has missing readings)".into()).into());
    }
    let x = Tensor::new(vec![c.lookback, c.channels], window.values.concat())?;
    let y = model.forward(&x)?;
    let out = prepare_out(config)?;
    let last = *window.timestamps.last().expect("non-empty window");
    let mut w = csv::Writer::from_path(out.join("forecast.csv")).map_err(std::io::Error::from)?;
    let mut header = vec![columns.timestamp.clone()];
    header.extend(columns.channels.iter().cloned());
    w.write_record(&header).map_err(std::io::Error::from)?;
    for t in 0..c.horizon {
        let mut row = vec![crate::data::format_timestamp(last + TimeDelta::hours(t as i64 + 1))];
        row.extend((0..c.channels).map(|m| y.at(&[t, m]).to_string()));
        w.write_record(&row).map_err(std::io::Error::from)?;
    }
    w.flush()?;
    println!("wrote {} forecast rows to {}", c.horizon, out.join("forecast.csv").display());
    Ok(())
}

pub fn cmd_sweep(config: &RunConfig) -> Result<()> {
    let base = config.model_config()?;
    let grid = config.sweep_grid()?;
    let max_t = grid.horizons.iter().copied().max().unwrap_or(base.horizon);
    // Splits are sized for the longest horizon so every cell sees the same rows.
    let (name, s) = load_splits(config, &ModelConfig { horizon: max_t, ..base.clone() })?;
    let out = prepare_out(config)?;
    let data = SweepData {
        name,
        train: s.train,
        val: s.val,
        test: s.test,
    };
    let rows = patch_sweep(&grid, &data, &base, &config.train_config()?, config.normalized_metrics()?, config.jobs()?)?;
    write_sweep_csv(BufWriter::new(File::create(out.join("sweep_results.csv"))?), &rows)?;
    println!("wrote {} sweep rows to {}", rows.len(), out.join("sweep_results.csv").display());
    Ok(())
}

pub fn cmd_export_attn(config: &RunConfig, checkpoint: Option<&Path>, input: Option<&Path>) -> Result<()> {
    let model = load_matching(config, &checkpoint_path(config, checkpoint)?)?;
    if !model.config().channel_attention {
        return Err(TensorError::Contract("checkpoint has channel attention disabled; nothing to export".into()).into());
    }
    let c = model.config().clone();
    let columns = config.columns()?;
    let window = match input {
        Some(path) => {
            let w = load_csv(path, None, &columns)?;
            if w.len() != c.lookback {
                return Err(Error::Config(format!("input has {} rows, expected exactly L = {}", w.len(), c.lookback)));
            }
            Tensor::new(vec![c.lookback, c.channels], w.values.concat())?
        }
        None => load_windows(config, &c)?.test.example(0).0,
    };
    let out = prepare_out(config)?;
    let paths = export_attention(&model, &window, &columns.channels, &out)?;
    for p in paths {
        println!("{}", p.display());
    }
    Ok(())
}

pub fn cmd_make_fixture(config: &RunConfig) -> Result<()> {
    let path = config.data_path()?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let spec = config.fixture_spec()?;
    write_fixture_file(&path, &spec)?;
    println!("wrote {} rows x {} areas to {}", spec.rows, spec.areas.len(), path.display());
    Ok(())
}
