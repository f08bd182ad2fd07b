//! Training loop with plateau learning-rate decay, early stopping, JSON-lines
//! logs and best-checkpoint retention.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::depthio::{Manifest, Sample, Split};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::objective::{self, LossBreakdown};
use crate::patterns::{self, derive_seed};
use crate::pipeline::checkpoint::{Checkpoint, TrainState};
use crate::pipeline::config::{DataConfig, TrainConfig, TrainPattern};
use crate::pipeline::eval::{evaluate_samples, load_samples};
use crate::pipeline::model::SparseDc;
use crate::pipeline::optim::Adam;
use crate::synthetic;

pub const STEP_LOG: &str = "train_log.jsonl";
pub const EPOCH_LOG: &str = "epochs.jsonl";
pub const BEST_CHECKPOINT: &str = "best.safetensors";
pub const LAST_CHECKPOINT: &str = "last.safetensors";
pub const NONFINITE_DUMP: &str = "nonfinite_batch.json";

/// Outcome of one epoch in the plateau schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScheduleEvent {
    pub improved: bool,
    pub decayed: bool,
    pub stop: bool,
}

/// Feeds one validation RMSE into the schedule: an unimproved epoch counts
/// toward both the decay patience and the early-stop patience; improvement
/// resets both.
pub fn observe_validation(state: &mut TrainState, cfg: &TrainConfig, rmse: f64) -> ScheduleEvent {
    state.last_val_rmse = Some(rmse);
    let improved = state.best_val_rmse.is_none_or(|b| rmse < b);
    let mut decayed = false;
    if improved {
        state.best_val_rmse = Some(rmse);
        state.unimproved = 0;
        state.since_decay = 0;
    } else {
        state.unimproved += 1;
        state.since_decay += 1;
        if state.since_decay >= cfg.plateau_patience {
            state.lr *= cfg.lr_decay;
            state.since_decay = 0;
            decayed = true;
        }
    }
    let stop = state.unimproved >= cfg.early_stop_patience;
    state.stopped_early |= stop;
    ScheduleEvent { improved, decayed, stop }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub samples: Vec<String>,
    pub points: Vec<usize>,
    pub grad_norm: f64,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub val: MetricsReport,
    pub improved: bool,
    pub decayed: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub epochs: Vec<EpochRecord>,
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
}

pub struct Trainer {
    cfg: TrainConfig,
    model: SparseDc,
    adam: Adam,
    train: Vec<Sample>,
    val: Vec<Sample>,
    state: TrainState,
    log: BufWriter<File>,
    epoch_log: BufWriter<File>,
}

/// Training and validation samples for a data config.
pub fn load_data(cfg: &TrainConfig) -> Result<(Vec<Sample>, Vec<Sample>)> {
    match &cfg.data {
        DataConfig::Synthetic { count, seed } => {
            let s = synthetic::scenes(*count, *seed)?;
            Ok((s.clone(), s))
        }
        DataConfig::Manifest { path } => {
            let m = Manifest::load(path)?;
            let train = load_samples(m.split(Split::Train), cfg.model.preprocess)?;
            if train.is_empty() {
                return Err(Error::EmptyInput(format!("manifest {} has no train entries", path.display())));
            }
            let val = load_samples(m.split(Split::Val), cfg.model.preprocess)?;
            let val = if val.is_empty() { train.clone() } else { val };
            Ok((train, val))
        }
    }
}

fn jsonl(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

impl Trainer {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let (train, val) = load_data(cfg)?;
        Self::with_data(cfg, train, val)
    }

    pub fn with_data(cfg: &TrainConfig, train: Vec<Sample>, val: Vec<Sample>) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() || val.is_empty() {
            return Err(Error::EmptyInput("training and validation sets must be non-empty".into()));
        }
        std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
        let config_path = cfg.out_dir.join("config.toml");
        std::fs::write(&config_path, cfg.to_toml()?).map_err(|e| Error::io(&config_path, e))?;
        let model = SparseDc::new(&cfg.model, cfg.seed, DType::F32, &Device::Cpu)?;
        Ok(Self {
            adam: Adam::new(cfg.lr),
            state: TrainState::new(cfg.lr),
            log: jsonl(&cfg.out_dir.join(STEP_LOG))?,
            epoch_log: jsonl(&cfg.out_dir.join(EPOCH_LOG))?,
            cfg: cfg.clone(),
            model,
            train,
            val,
        })
    }

    pub fn model(&self) -> &SparseDc {
        &self.model
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn train_samples(&self) -> &[Sample] {
        &self.train
    }

    pub fn val_samples(&self) -> &[Sample] {
        &self.val
    }

    /// Sparse input for `sample` at the current step.
    fn sparsify(&self, sample: &Sample) -> Result<crate::depthio::DepthMap> {
        let step_seed = self.cfg.seed ^ (self.state.step as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let seed = derive_seed(step_seed, &sample.id);
        let sparse = match &self.cfg.pattern {
            TrainPattern::RandomRange { min, max } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let n = rng.random_range(*min..=*max);
                patterns::sample_random(&sample.gt, n, rng.random())?
            }
            TrainPattern::Fixed { pattern } => pattern.apply_for(&sample.gt, &sample.image, &sample.id)?,
        };
        match self.cfg.row_mask {
            Some(f) => patterns::mask_rows(&sparse, f, seed.rotate_left(17)),
            None => Ok(sparse),
        }
    }

    fn batch(&self, indices: &[usize]) -> Result<(Tensor, Tensor, Tensor, Vec<usize>)> {
        let dev = self.model.device().clone();
        let dt = self.model.dtype();
        let dims = self.train[indices[0]].dims();
        let (mut images, mut sparse, mut gts, mut points) = (vec![], vec![], vec![], vec![]);
        for &i in indices {
            let s = &self.train[i];
            if s.dims() != dims {
                return Err(Error::Shape(format!("batch mixes sizes {:?} and {:?}", dims, s.dims())));
            }
            let sp = self.sparsify(s)?;
            points.push(sp.valid_count());
            images.push(s.image.to_tensor(&dev, dt)?);
            sparse.push(sp.to_tensor(&dev, dt)?);
            gts.push(s.gt.to_tensor(&dev, dt)?);
        }
        Ok((Tensor::cat(&images, 0)?, Tensor::cat(&sparse, 0)?, Tensor::cat(&gts, 0)?, points))
    }

    /// One optimizer step on the given training samples.
    pub fn step(&mut self, indices: &[usize]) -> Result<StepRecord> {
        let (image, sparse, gt, points) = self.batch(indices)?;
        let pred = self.model.forward(&image, &sparse)?;
        let (loss, breakdown) = objective::total_loss(&pred.scales, pred.coarse(), &pred.refined, &gt, &self.cfg.loss)?;
        let ids: Vec<String> = indices.iter().map(|&i| self.train[i].id.clone()).collect();
        if !breakdown.total.is_finite() {
            self.dump_nonfinite(&ids, &points, &breakdown)?;
            return Err(Error::NonFiniteLoss {
                step: self.state.step,
                sample_ids: ids,
            });
        }
        let grads = loss.backward()?;
        self.adam.lr = self.state.lr;
        let grad_norm = self.adam.step(self.model.params(), &grads, self.cfg.grad_clip)?;
        let record = StepRecord {
            step: self.state.step,
            epoch: self.state.epoch,
            lr: self.state.lr,
            samples: ids,
            points,
            grad_norm,
            loss: breakdown,
        };
        self.state.step += 1;
        writeln!(self.log, "{}", serde_json::to_string(&record)?).map_err(|e| Error::io(self.cfg.out_dir.join(STEP_LOG), e))?;
        Ok(record)
    }

    fn dump_nonfinite(&self, ids: &[String], points: &[usize], breakdown: &LossBreakdown) -> Result<()> {
        let path = self.cfg.out_dir.join(NONFINITE_DUMP);
        let dump = serde_json::json!({
            "step": self.state.step,
            "epoch": self.state.epoch,
            "samples": ids,
            "points": points,
            "loss": breakdown,
        });
        std::fs::write(&path, serde_json::to_string_pretty(&dump)?).map_err(|e| Error::io(&path, e))
    }

    pub fn validate(&self) -> Result<MetricsReport> {
        evaluate_samples(&self.model, &self.val, &self.cfg.val_pattern)
    }

    fn checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::capture(&self.model, Some(&self.cfg), &self.state, Some(&self.adam))
    }

    fn budget_left(&self) -> bool {
        self.cfg.max_steps.is_none_or(|m| self.state.step < m)
    }

    /// Runs epochs until early stopping, `max_epochs` or `max_steps`.
    pub fn run(mut self) -> Result<TrainOutcome> {
        let best_path = self.cfg.out_dir.join(BEST_CHECKPOINT);
        let last_path = self.cfg.out_dir.join(LAST_CHECKPOINT);
        let mut epochs = Vec::new();
        while self.state.epoch < self.cfg.max_epochs && self.budget_left() {
            let mut order: Vec<usize> = (0..self.train.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(self.cfg.seed ^ (self.state.epoch as u64).rotate_left(32)));
            for chunk in order.chunks(self.cfg.batch_size) {
                if !self.budget_left() {
                    break;
                }
                self.step(chunk)?;
            }
            self.log.flush().map_err(|e| Error::io(self.cfg.out_dir.join(STEP_LOG), e))?;
            let val = self.validate()?;
            self.state.epoch += 1;
            let event = observe_validation(&mut self.state, &self.cfg, val.rmse);
            let record = EpochRecord {
                epoch: self.state.epoch,
                step: self.state.step,
                lr: self.state.lr,
                val,
                improved: event.improved,
                decayed: event.decayed,
            };
            writeln!(self.epoch_log, "{}", serde_json::to_string(&record)?)
                .and_then(|_| self.epoch_log.flush())
                .map_err(|e| Error::io(self.cfg.out_dir.join(EPOCH_LOG), e))?;
            epochs.push(record);
            if event.improved {
                self.checkpoint()?.save(&best_path)?;
            }
            if event.stop {
                break;
            }
        }
        self.checkpoint()?.save(&last_path)?;
        Ok(TrainOutcome {
            state: self.state,
            epochs,
            best_checkpoint: best_path,
            last_checkpoint: last_path,
        })
    }
}

pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    Trainer::new(cfg)?.run()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> TrainConfig {
        TrainConfig::default()
    }

    #[test]
    fn plateau_decays_after_five_and_stops_at_ten() {
        let c = cfg();
        let mut s = TrainState::new(c.lr);
        assert!(observe_validation(&mut s, &c, 1.0).improved);
        let mut lrs = vec![];
        let mut stops = vec![];
        for _ in 0..10 {
            let e = observe_validation(&mut s, &c, 1.0);
            lrs.push(s.lr);
            stops.push(e.stop);
        }
        assert!(lrs[..4].iter().all(|l| *l == 1e-4));
        assert!((lrs[4] - 3e-5).abs() < 1e-18);
        assert!((lrs[9] - 9e-6).abs() < 1e-18);
        assert_eq!(stops.iter().position(|s| *s), Some(9));
        assert!(s.stopped_early);
    }

    #[test]
    fn improvement_resets_counters() {
        let c = cfg();
        let mut s = TrainState::new(c.lr);
        observe_validation(&mut s, &c, 1.0);
        for _ in 0..4 {
            observe_validation(&mut s, &c, 2.0);
        }
        assert!(observe_validation(&mut s, &c, 0.5).improved);
        assert_eq!((s.unimproved, s.since_decay, s.lr), (0, 0, 1e-4));
        assert_eq!(s.best_val_rmse, Some(0.5));
    }
}
