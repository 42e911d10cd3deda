//! Small end-to-end training loop on synthetic data.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{build_model, ArchSpec, Model, ModelMode, StageSpec};
use crate::block::{BlockActivation, BlockKind, InitPolicy};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

use super::data::{Split, SyntheticDataset, SyntheticSpec};
use super::loss::label_smoothed_ce;
use super::optim::{TrainState, EMA_DECAY, SGD_MOMENTUM};
use super::schedule::{CurriculumSpec, ScheduleSpec};
use super::tape::backward;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    pub arch: ArchSpec,
    pub data: SyntheticSpec,
    pub epochs: usize,
    pub batch_size: usize,
    /// Stop after this many optimizer steps, if set.
    pub max_steps: Option<usize>,
    pub lr0: f64,
    pub lr_end: f64,
    pub wd0: f64,
    pub wd_end: f64,
    pub momentum: f64,
    pub ema_decay: f64,
    pub smoothing: f64,
    pub bn_momentum: f64,
    /// Fixed training resolution, used when no curriculum is given.
    pub resolution: usize,
    pub curriculum: Option<CurriculumSpec>,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            arch: toy_arch(4, true),
            data: SyntheticSpec::default(),
            epochs: 12,
            batch_size: 32,
            max_steps: None,
            lr0: 0.05,
            lr_end: 0.0,
            wd0: 1e-4,
            wd_end: 1e-5,
            momentum: SGD_MOMENTUM,
            ema_decay: EMA_DECAY,
            smoothing: 0.1,
            bn_momentum: 0.1,
            resolution: 16,
            curriculum: None,
            seed: 0,
        }
    }
}

/// A three-stage network for desk-scale experiments. With `branches` the
/// stages carry `k` conv branches plus scale and skip branches; without,
/// each stage is a single conv+BN (the plain baseline).
pub fn toy_arch(k: usize, branches: bool) -> ArchSpec {
    let k = if branches { k } else { 1 };
    let stage = |blocks, stride, base_channels, kind| StageSpec {
        blocks,
        stride,
        base_channels,
        alpha: 1.0,
        k,
        activation: BlockActivation::Relu,
        kind,
        max_channels: None,
    };
    ArchSpec {
        name: format!("toy-k{k}{}", if branches { "" } else { "-plain" }),
        stages: vec![
            stage(1, 2, 16, BlockKind::Stem),
            stage(2, 2, 32, BlockKind::Separable),
            stage(2, 2, 64, BlockKind::Separable),
        ],
        n_classes: 10,
        in_channels: 3,
        input_resolution: 16,
        scale_branch: branches,
        skip_branch: branches,
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if self.epochs == 0 || self.batch_size < 2 {
            return Err(Error::InvalidArgument("need >= 1 epoch and batch size >= 2".into()));
        }
        if self.data.n_classes > self.arch.n_classes {
            return Err(Error::InvalidArgument(format!(
                "dataset has {} classes but the head has {}",
                self.data.n_classes, self.arch.n_classes
            )));
        }
        if self.data.channels != self.arch.in_channels {
            return Err(Error::InvalidArgument("dataset and model channel counts differ".into()));
        }
        if let Some(c) = &self.curriculum {
            c.validate()?;
            if c.total_epochs() != self.epochs {
                return Err(Error::InvalidArgument("curriculum must span every epoch".into()));
            }
        }
        Ok(())
    }

    pub fn resolution_at(&self, epoch: usize) -> usize {
        self.curriculum
            .as_ref()
            .and_then(|c| c.phase_at(epoch))
            .map_or(self.resolution, |p| p.resolution)
    }

    fn steps_per_epoch(&self) -> usize {
        self.data.train_size / self.batch_size
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub wd: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv_to(std::fs::File::create(path)?)
    }

    /// Columns: epoch, train_loss, val_loss, lr, wd.
    pub fn write_csv_to<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn final_train_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.train_loss)
    }
}

pub struct ToyOutcome<T> {
    pub log: TrainLog,
    pub model: Model<T>,
    pub state: TrainState,
    pub steps: usize,
}

/// Mean eval-mode cross entropy over the validation split.
pub fn evaluate<T: Scalar>(model: &Model<T>, data: &SyntheticDataset, resolution: usize, batch: usize) -> Result<f64> {
    let n = data.len(Split::Val);
    let mut total = 0.0;
    for start in (0..n).step_by(batch) {
        let idx: Vec<usize> = (start..(start + batch).min(n)).collect();
        let (x, y) = data.batch::<T>(Split::Val, &idx, resolution)?;
        let (loss, _) = label_smoothed_ce(&model.forward(&x)?, &y, 0.0)?;
        total += loss * idx.len() as f64;
    }
    Ok(total / n as f64)
}

/// Trains a freshly built train-mode model on synthetic data.
pub fn train_toy<T: Scalar>(cfg: &ToyConfig) -> Result<ToyOutcome<T>> {
    cfg.validate()?;
    let mut model: Model<T> = build_model(&cfg.arch, ModelMode::Train, InitPolicy::new(cfg.seed))?;
    train_model(&mut model, cfg).map(|(log, state, steps)| ToyOutcome {
        log,
        model,
        state,
        steps,
    })
}

/// Trains `model` in place. Returns the per-epoch log, the optimizer state
/// and the number of steps taken.
pub fn train_model<T: Scalar>(model: &mut Model<T>, cfg: &ToyConfig) -> Result<(TrainLog, TrainState, usize)> {
    cfg.validate()?;
    let data = SyntheticDataset::new(cfg.data)?;
    let per_epoch = cfg.steps_per_epoch();
    if per_epoch == 0 {
        return Err(Error::InvalidArgument("batch size exceeds the training split".into()));
    }
    let planned = cfg.epochs * per_epoch;
    let total = cfg.max_steps.map_or(planned, |m| m.min(planned));
    let schedule = ScheduleSpec {
        lr0: cfg.lr0,
        lr_end: cfg.lr_end,
        wd0: cfg.wd0,
        wd_end: cfg.wd_end,
        total_steps: total,
    };
    schedule.validate()?;
    let mut state = TrainState::from_model(model, total);
    state.momentum = cfg.momentum;
    state.ema_decay = cfg.ema_decay;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..data.len(Split::Train)).collect();
    let bn_momentum = T::of(cfg.bn_momentum);
    let mut log = TrainLog::default();
    let mut step = 0;

    'epochs: for epoch in 0..cfg.epochs {
        let res = cfg.resolution_at(epoch);
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut count = 0;
        for chunk in order.chunks_exact(cfg.batch_size) {
            if step == total {
                break;
            }
            let (x, y) = data.batch::<T>(Split::Train, chunk, res)?;
            let (loss, grads) = backward(model, &x, &y, cfg.smoothing, bn_momentum)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step,
                    value: loss,
                });
            }
            state.sgd_step(&grads, schedule.lr(step)?, schedule.weight_decay(step)?)?;
            state.write_params(model)?;
            sum += loss;
            count += 1;
            step += 1;
        }
        if count > 0 {
            log.records.push(EpochRecord {
                epoch,
                train_loss: sum / count as f64,
                val_loss: evaluate(model, &data, res, cfg.batch_size)?,
                lr: schedule.lr(step)?,
                wd: schedule.weight_decay(step)?,
            });
        }
        if step == total {
            break 'epochs;
        }
    }
    Ok((log, state, step))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(branches: bool) -> ToyConfig {
        ToyConfig {
            arch: toy_arch(2, branches),
            data: SyntheticSpec {
                train_size: 64,
                val_size: 32,
                ..SyntheticSpec::default()
            },
            epochs: 4,
            batch_size: 16,
            resolution: 8,
            ..ToyConfig::default()
        }
    }

    #[test]
    fn loss_decreases_on_separable_data() {
        let out = train_toy::<f32>(&quick(true)).unwrap();
        let r = &out.log.records;
        assert_eq!(r.len(), 4);
        assert!(r[3].train_loss < r[0].train_loss, "{r:?}");
        assert!(r.iter().all(|e| e.train_loss.is_finite() && e.val_loss.is_finite()));
        assert_eq!(out.steps, 16);
    }

    #[test]
    fn max_steps_truncates_training() {
        let cfg = ToyConfig {
            max_steps: Some(5),
            ..quick(false)
        };
        let out = train_toy::<f32>(&cfg).unwrap();
        assert_eq!(out.steps, 5);
        assert_eq!(out.state.step, 5);
        assert_eq!(out.log.records.len(), 2);
    }

    #[test]
    fn divergence_aborts_with_context() {
        let cfg = ToyConfig {
            lr0: 1e30,
            lr_end: 1e30,
            ..quick(false)
        };
        match train_toy::<f32>(&cfg) {
            Err(Error::NonFiniteLoss { .. }) => {}
            Err(e) => panic!("unexpected error {e}"),
            Ok(out) => panic!("training with lr 1e30 finished: {:?}", out.log.records),
        }
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = ToyConfig {
            curriculum: Some(CurriculumSpec::imagenet().rescaled(12, 16).unwrap()),
            ..ToyConfig::default()
        };
        let s = serde_json::to_string(&cfg).unwrap();
        let back: ToyConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(cfg, back);
        let partial: ToyConfig = serde_json::from_str(r#"{"epochs": 3}"#).unwrap();
        assert_eq!(partial.epochs, 3);
        assert_eq!(partial.batch_size, ToyConfig::default().batch_size);
    }

    #[test]
    fn curriculum_must_span_epochs() {
        let cfg = ToyConfig {
            curriculum: Some(CurriculumSpec::constant(3, 8)),
            ..quick(true)
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn csv_log_has_expected_columns() {
        let out = train_toy::<f32>(&ToyConfig {
            max_steps: Some(4),
            ..quick(false)
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        out.log.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("epoch,train_loss,val_loss,lr,wd\n"));
    }
}
