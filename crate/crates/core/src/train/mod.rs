//! Adam training with an epoch-level learning-rate drop, total dropout and
//! checkpointing.
//!
//! Every random choice of a step (batch composition, crops, flips, dropout)
//! is derived from `(seed, epoch, step)`, so a run resumed from a checkpoint
//! continues exactly as an uninterrupted one.

mod adam;
mod checkpoint;

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamConfig, DecayKind, OptimState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, CHECKPOINT_VERSION};

use crate::data::{make_batch, random_patch, AugmentConfig, DataError, Scene};
use crate::grid::{GridError, GridModel};
use crate::regularization::sample_drop_mask;
use crate::tensor::{NormMode, Tape, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("non-finite gradient in {param} at element {index}")]
    NonFiniteGradient { param: String, index: usize },
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: u64 },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// First epoch trained with `lr_after_drop`.
    pub lr_drop_epoch: usize,
    pub lr_after_drop: f64,
    #[serde(default)]
    pub adam: AdamConfig,
    /// Apply total dropout during training (keep probability from the grid
    /// spec).
    pub total_dropout: bool,
    pub seed: u64,
    /// Write a checkpoint every this many epochs (0: only at the end).
    pub snapshot_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 4,
            epochs: 80,
            lr_drop_epoch: 60,
            lr_after_drop: 0.001,
            adam: AdamConfig::default(),
            total_dropout: true,
            seed: 0,
            snapshot_every: 20,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        if self.lr_drop_epoch > self.epochs {
            return Err(TrainError::Config(format!(
                "lr_drop_epoch {} is after the last epoch {}",
                self.lr_drop_epoch, self.epochs
            )));
        }
        if self.adam.lr < 0.0 || self.lr_after_drop < 0.0 {
            return Err(TrainError::Config("learning rates must be non-negative".into()));
        }
        Ok(())
    }

    /// Base learning rate of `epoch` (0-based).
    pub fn base_lr(&self, epoch: usize) -> f64 {
        if epoch < self.lr_drop_epoch {
            self.adam.lr
        } else {
            self.lr_after_drop
        }
    }
}

/// One line of the JSON-lines training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub steps: usize,
    pub skipped: usize,
    pub base_lr: f64,
    pub lr_first: f64,
    pub lr_last: f64,
    pub global_step: u64,
    pub keep_prob: f64,
    pub total_dropout: bool,
    pub seed: u64,
}

impl EpochLog {
    pub fn write_jsonl<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        serde_json::to_writer(&mut *w, self)?;
        w.write_all(b"\n")
    }
}

/// Outcome of a single update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepOutcome {
    Updated { loss: f64, lr: f64 },
    /// Every label in the batch was ignored.
    Skipped,
}

/// Model, optimizer and position in the schedule.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: GridModel<f32>,
    pub optim: OptimState,
    pub cfg: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed steps over the whole run.
    pub global_step: u64,
}

const PATCH_STREAM: u64 = 1 << 62;

impl Trainer {
    pub fn new(model: GridModel<f32>, cfg: TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let optim = OptimState::new(cfg.adam, model.params());
        Ok(Trainer {
            model,
            optim,
            cfg,
            epoch: 0,
            global_step: 0,
        })
    }

    /// Forward in train mode, loss, backward and Adam update on one batch.
    pub fn train_step(&mut self, images: &Tensor<f32>, labels: &[u8]) -> Result<StepOutcome, TrainError> {
        let spec = self.model.spec();
        let drop = if self.cfg.total_dropout {
            Some(sample_drop_mask(spec, spec.keep_prob, self.cfg.seed, self.global_step)?)
        } else {
            None
        };
        let mut tape = Tape::new();
        let out = self.model.forward(&mut tape, images, NormMode::Train, drop.as_ref())?;
        let loss = match tape.softmax_cross_entropy(out.logits, labels) {
            Ok(l) => l,
            Err(TensorError::AllIgnored) => return Ok(StepOutcome::Skipped),
            Err(e) => return Err(e.into()),
        };
        let value = tape.value(loss).data()[0] as f64;
        if !value.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                epoch: self.epoch,
                step: self.global_step,
            });
        }
        tape.backward(loss)?;
        let mut grads = self.model.gradients(&tape, &out);
        let lr = adam_step(self.model.params_mut(), &mut grads, &mut self.optim)?;
        self.global_step += 1;
        Ok(StepOutcome::Updated { loss: value, lr })
    }

    /// Batches of scene indices for epoch `epoch`: a seeded permutation cut
    /// into `batch_size` chunks (the last one may be shorter).
    pub fn epoch_batches(&self, n_scenes: usize, epoch: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..n_scenes).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        order.chunks(self.cfg.batch_size).map(<[usize]>::to_vec).collect()
    }

    /// Trains one epoch over `scenes` with random patches.
    pub fn train_epoch(&mut self, scenes: &[Scene], aug: &AugmentConfig) -> Result<EpochLog, TrainError> {
        if scenes.is_empty() {
            return Err(TrainError::Config("the training set is empty".into()));
        }
        let epoch = self.epoch;
        self.optim.base_lr = self.cfg.base_lr(epoch);
        let lr_first = self.optim.current_lr();
        let mut lr_last = lr_first;
        let mut total = 0.0;
        let mut steps = 0;
        let mut skipped = 0;
        for indices in self.epoch_batches(scenes.len(), epoch) {
            let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ PATCH_STREAM);
            rng.set_stream(self.global_step);
            let patches = indices
                .iter()
                .map(|&k| random_patch(&scenes[k], aug, &mut rng))
                .collect::<Result<Vec<_>, _>>()?;
            let (images, labels) = make_batch(&patches);
            match self.train_step(&images, &labels)? {
                StepOutcome::Updated { loss, lr } => {
                    total += loss;
                    steps += 1;
                    lr_last = lr;
                }
                StepOutcome::Skipped => skipped += 1,
            }
        }
        self.epoch += 1;
        let spec = self.model.spec();
        Ok(EpochLog {
            epoch,
            mean_loss: if steps > 0 { total / steps as f64 } else { f64::NAN },
            steps,
            skipped,
            base_lr: self.optim.base_lr,
            lr_first,
            lr_last,
            global_step: self.global_step,
            keep_prob: spec.keep_prob,
            total_dropout: self.cfg.total_dropout,
            seed: self.cfg.seed,
        })
    }
}
