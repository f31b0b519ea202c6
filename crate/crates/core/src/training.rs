//! Losses, Adam and the epoch loop with validation-based model selection.

use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{batch_iter, WindowedDataset};
use crate::error::{Error, Result, TensorError};
use crate::evaluation::compute_metrics;
use crate::model::{CtPatchTst, ParamSet};
use crate::tensor::{Tape, Tensor, Var};

fn check_same(tape: &Tape, pred: Var, truth: Var, op: &'static str) -> Result<(), TensorError> {
    if tape.shape(pred) != tape.shape(truth) {
        return Err(TensorError::Shape {
            op,
            lhs: tape.shape(pred).to_vec(),
            rhs: tape.shape(truth).to_vec(),
        });
    }
    Ok(())
}

/// Mean absolute error over every element.
pub fn mae_loss(tape: &mut Tape, pred: Var, truth: Var) -> Result<Var, TensorError> {
    check_same(tape, pred, truth, "mae_loss")?;
    let diff = tape.sub(pred, truth)?;
    let abs = tape.abs(diff);
    Ok(tape.mean(abs))
}

/// Mean squared error over every element.
pub fn mse_loss(tape: &mut Tape, pred: Var, truth: Var) -> Result<Var, TensorError> {
    check_same(tape, pred, truth, "mse_loss")?;
    let diff = tape.sub(pred, truth)?;
    let sq = tape.square(diff);
    Ok(tape.mean(sq))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum LossKind {
    Mse,
    Mae,
}

impl LossKind {
    pub fn apply(self, tape: &mut Tape, pred: Var, truth: Var) -> Result<Var, TensorError> {
        match self {
            LossKind::Mse => mse_loss(tape, pred, truth),
            LossKind::Mae => mae_loss(tape, pred, truth),
        }
    }
}

/// Learning-rate schedule; constant by default.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum LrSchedule {
    Constant,
    /// Multiply the rate by `factor` every `every` epochs.
    Step { every: usize, factor: f64 },
}

impl LrSchedule {
    pub fn rate(self, base: f64, epoch: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Step { every, factor } => base * factor.powi((epoch / every.max(1)) as i32),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub loss: LossKind,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub patience: Option<usize>,
    /// Global gradient-norm clip; off when `None`.
    pub grad_clip: Option<f64>,
    pub schedule: LrSchedule,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            batch_size: 128,
            epochs: 50,
            loss: LossKind::Mse,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            patience: None,
            grad_clip: None,
            schedule: LrSchedule::Constant,
            shuffle: true,
        }
    }
}

/// Adam moment accumulators, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Tensor> = params.values().iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update with learning rate `lr`.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &[Tensor],
    state: &mut OptimizerState,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<()> {
    for id in params.ids() {
        if !grads[id.index()].all_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient for parameter `{}`",
                params.name(id)
            )));
        }
    }
    state.step += 1;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let bc1 = 1.0 - b1.powi(state.step as i32);
    let bc2 = 1.0 - b2.powi(state.step as i32);
    for (i, p) in params.values_mut().iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        }
    }
    Ok(())
}

fn clip_gradients(grads: &mut [Tensor], max_norm: f64) {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mse: f64,
    pub val_mae: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RunRecord {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
}

impl RunRecord {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.best_epoch.map(|i| &self.epochs[i])
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "train_loss", "val_mse", "val_mae", "seconds"])
            .map_err(std::io::Error::from)?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                e.train_loss.to_string(),
                e.val_mse.to_string(),
                e.val_mae.to_string(),
                format!("{:.3}", e.seconds),
            ])
            .map_err(std::io::Error::from)?;
        }
        w.flush()?;
        Ok(())
    }

    /// One JSON object per epoch.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for e in &self.epochs {
            let line = serde_json::to_string(e).map_err(std::io::Error::from)?;
            writeln!(out, "{line}")?;
        }
        Ok(())
    }
}

/// Owns a model and its optimizer across epochs.
///
/// The trajectory depends only on the model, optimizer state, completed
/// epoch count and configuration, so a trainer rebuilt from a checkpoint
/// continues exactly where the original left off.
#[derive(Debug, Clone)]
pub struct Trainer {
    model: CtPatchTst,
    optimizer: OptimizerState,
    epochs_done: usize,
    config: TrainConfig,
    record: RunRecord,
    best: Option<ParamSet>,
}

impl Trainer {
    pub fn new(model: CtPatchTst, config: TrainConfig) -> Self {
        let optimizer = OptimizerState::new(model.params());
        Self::resume(model, optimizer, 0, config)
    }

    pub fn resume(model: CtPatchTst, optimizer: OptimizerState, epochs_done: usize, config: TrainConfig) -> Self {
        Self {
            model,
            optimizer,
            epochs_done,
            config,
            record: RunRecord::default(),
            best: None,
        }
    }

    pub fn model(&self) -> &CtPatchTst {
        &self.model
    }

    pub fn optimizer(&self) -> &OptimizerState {
        &self.optimizer
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    pub fn record(&self) -> &RunRecord {
        &self.record
    }

    /// The model with the best validation MSE seen so far, or the current
    /// model if no epoch has completed.
    pub fn best_model(&self) -> CtPatchTst {
        let mut m = self.model.clone();
        if let Some(best) = &self.best {
            *m.params_mut() = best.clone();
        }
        m
    }

    /// Mean training loss over one pass of `train`, without validation.
    pub fn train_epoch(&mut self, train: &WindowedDataset) -> Result<f64> {
        if train.is_empty() {
            return Err(TensorError::Contract("training set is empty".into()).into());
        }
        let cfg = &self.config;
        let epoch = self.epochs_done as u64;
        let lr = cfg.schedule.rate(cfg.learning_rate, self.epochs_done);
        let mut total = 0.0;
        let mut count = 0usize;
        for (b, indices) in batch_iter(train, cfg.batch_size, cfg.shuffle, cfg.seed, epoch).enumerate() {
            let (x, y) = train.batch(&indices);
            let mut tape = Tape::new();
            let bound = self.model.params().bind(&mut tape, true);
            let input = tape.constant(x);
            let target = tape.constant(y);
            let mut rng = ChaCha8Rng::seed_from_u64(
                cfg.seed ^ epoch.wrapping_mul(0xD1B5_4A32_D192_ED03) ^ (b as u64).wrapping_mul(0x8CB9_2BA7_2F3D_8DD7),
            );
            let dropout_rng = (self.model.config().dropout > 0.0).then_some(&mut rng);
            let out = self.model.forward_graph(&mut tape, &bound, input, dropout_rng)?;
            let loss = cfg.loss.apply(&mut tape, out.prediction, target)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at epoch {} batch {b}",
                    self.epochs_done
                )));
            }
            tape.backward(loss)?;
            let mut grads = bound.grads(&tape);
            if let Some(max_norm) = cfg.grad_clip {
                clip_gradients(&mut grads, max_norm);
            }
            adam_step(self.model.params_mut(), &grads, &mut self.optimizer, cfg, lr)?;
            total += value * indices.len() as f64;
            count += indices.len();
        }
        self.epochs_done += 1;
        Ok(total / count as f64)
    }

    /// One training epoch followed by validation; updates the best model.
    pub fn run_epoch(&mut self, train: &WindowedDataset, val: &WindowedDataset) -> Result<EpochRecord> {
        if val.is_empty() {
            return Err(TensorError::Contract("validation set is empty".into()).into());
        }
        let start = Instant::now();
        let train_loss = self.train_epoch(train)?;
        let metrics = compute_metrics(&self.model, val, self.config.batch_size, false)?;
        let rec = EpochRecord {
            epoch: self.epochs_done - 1,
            train_loss,
            val_mse: metrics.mse,
            val_mae: metrics.mae,
            seconds: start.elapsed().as_secs_f64(),
        };
        let improved = self.record.best().is_none_or(|b| rec.val_mse < b.val_mse);
        self.record.epochs.push(rec.clone());
        if improved {
            self.record.best_epoch = Some(self.record.epochs.len() - 1);
            self.best = Some(self.model.params().clone());
        }
        log::info!(
            "epoch {} train_loss {:.6} val_mse {:.6} val_mae {:.6}",
            rec.epoch,
            rec.train_loss,
            rec.val_mse,
            rec.val_mae
        );
        Ok(rec)
    }

    /// Runs until `config.epochs` epochs are done in total or patience runs
    /// out.
    pub fn fit(&mut self, train: &WindowedDataset, val: &WindowedDataset) -> Result<&RunRecord> {
        while self.epochs_done < self.config.epochs {
            self.run_epoch(train, val)?;
            if let (Some(p), Some(best)) = (self.config.patience, self.record.best_epoch) {
                if self.record.epochs.len() - 1 - best >= p {
                    log::info!("early stop after {} epochs without improvement", p);
                    break;
                }
            }
        }
        Ok(&self.record)
    }
}

/// Trains `model` in place and leaves it holding the best-validation
/// parameters.
pub fn fit(model: &mut CtPatchTst, train: &WindowedDataset, val: &WindowedDataset, config: &TrainConfig) -> Result<RunRecord> {
    let mut trainer = Trainer::new(model.clone(), config.clone());
    trainer.fit(train, val)?;
    *model = trainer.best_model();
    Ok(trainer.record)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn losses(pred: &[f64], truth: &[f64]) -> (f64, f64) {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::new(vec![pred.len()], pred.to_vec()).unwrap());
        let t = tape.constant(Tensor::new(vec![truth.len()], truth.to_vec()).unwrap());
        let mse = mse_loss(&mut tape, p, t).unwrap();
        let mae = mae_loss(&mut tape, p, t).unwrap();
        (tape.value(mse).item(), tape.value(mae).item())
    }

    #[test]
    fn loss_examples() {
        assert_eq!(losses(&[1.0, 2.0], &[2.0, 4.0]), (2.5, 1.5));
        assert_eq!(losses(&[3.0, -1.0], &[3.0, -1.0]), (0.0, 0.0));
        assert_eq!(losses(&[1.0, 7.0], &[2.0, 4.0]).1, losses(&[2.0, 4.0], &[1.0, 7.0]).1);
    }

    #[test]
    fn loss_shape_mismatch() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::zeros(&[2, 3]));
        let t = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(mse_loss(&mut tape, p, t).is_err());
        assert!(mae_loss(&mut tape, p, t).is_err());
    }

    fn one_param(v: &[f64]) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.add("w", Tensor::new(vec![v.len()], v.to_vec()).unwrap());
        ps
    }

    #[test]
    fn adam_first_step_closed_form() {
        let cfg = TrainConfig::default();
        let mut ps = one_param(&[1.0, -2.0, 0.5]);
        let g = Tensor::new(vec![3], vec![0.3, -4.0, 1e-3]).unwrap();
        let mut st = OptimizerState::new(&ps);
        adam_step(&mut ps, std::slice::from_ref(&g), &mut st, &cfg, cfg.learning_rate).unwrap();
        // After one step m_hat = g and v_hat = g^2, so the update is
        // lr * g / (|g| + eps).
        for (i, &start) in [1.0, -2.0, 0.5].iter().enumerate() {
            let gi = g.data()[i];
            let expected = start - 0.001 * gi / (gi.abs() + 1e-8);
            assert!((ps.values()[0].data()[i] - expected).abs() < 1e-6);
            assert!(((ps.values()[0].data()[i] - start).abs() - 0.001).abs() < 1e-6);
        }
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_zero_gradient_keeps_params_and_decays_moments() {
        let cfg = TrainConfig::default();
        let mut ps = one_param(&[1.0, 2.0]);
        let mut st = OptimizerState::new(&ps);
        adam_step(&mut ps, &[Tensor::full(&[2], 0.5)], &mut st, &cfg, 0.0).unwrap();
        let m_before = st.m[0].clone();
        let before = ps.clone();
        adam_step(&mut ps, &[Tensor::zeros(&[2])], &mut st, &cfg, 0.001).unwrap();
        assert_eq!(st.step, 2);
        for (a, b) in st.m[0].data().iter().zip(m_before.data()) {
            assert!((a - 0.9 * b).abs() < 1e-15);
        }
        // m is nonzero from the first step, so a zero-gradient step can still
        // move the weights; starting fresh it cannot.
        let mut fresh = one_param(&[1.0, 2.0]);
        let mut st2 = OptimizerState::new(&fresh);
        adam_step(&mut fresh, &[Tensor::zeros(&[2])], &mut st2, &cfg, 0.001).unwrap();
        assert_eq!(fresh, one_param(&[1.0, 2.0]));
        assert_ne!(ps, before);
    }

    #[test]
    fn adam_rejects_nan_and_names_parameter() {
        let cfg = TrainConfig::default();
        let mut ps = one_param(&[1.0]);
        let mut st = OptimizerState::new(&ps);
        let err = adam_step(&mut ps, &[Tensor::full(&[1], f64::NAN)], &mut st, &cfg, 0.001).unwrap_err();
        assert!(err.to_string().contains("`w`"));
        assert_eq!(st.step, 0);
    }

    #[test]
    fn schedules() {
        assert_eq!(LrSchedule::Constant.rate(0.1, 7), 0.1);
        let s = LrSchedule::Step { every: 2, factor: 0.5 };
        assert_eq!(s.rate(1.0, 0), 1.0);
        assert_eq!(s.rate(1.0, 3), 0.5);
        assert_eq!(s.rate(1.0, 4), 0.25);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut g = vec![Tensor::full(&[2], 3.0), Tensor::full(&[1], 4.0)];
        clip_gradients(&mut g, 1.0);
        let norm: f64 = g.iter().flat_map(|t| t.data()).map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }
}
