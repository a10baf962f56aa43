//! Training: Adam with step-decay learning rate, focal loss on
//! full-resolution (bilinearly upsampled) logits, per-epoch evaluation,
//! JSON-lines history and resumable checkpoints.

mod checkpoint;

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{GradStore, Graph};
use crate::data::{augment, batch_indices, derive_seed, normalize, rng_for, AugmentConfig, SegBatch, SegSample};
use crate::error::{Error, Result};
use crate::loss::{FocalConfig, LabelMap};
use crate::metrics::{ConfusionAccumulator, MeanOptions};
use crate::network::Model;
use crate::params::ParamStore;
use crate::tensor::{bilinear_upsample, BnMode, Element, Tensor, BN_MOMENTUM};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};

/// What the decay period counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecayUnit {
    Epoch,
    Step,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Initial learning rate.
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    /// Learning rate multiplier applied every `decay_period` units.
    pub decay_factor: f64,
    pub decay_period: u64,
    pub decay_unit: DecayUnit,
    pub epochs: u64,
    /// Stop early once this many optimizer steps have run.
    pub max_steps: Option<u64>,
    /// Focal-loss focusing parameter.
    pub gamma: f64,
    pub ignore_index: Option<u8>,
    pub seed: u64,
    /// Encoder weights imported before the first step.
    pub pretrained_encoder: Option<PathBuf>,
    /// Share of samples held out for validation (by name hash).
    pub val_fraction: f64,
    /// Train on a fixed pool of this many pre-augmented samples instead of
    /// augmenting on the fly.
    pub aug_pool: Option<usize>,
    pub shuffle: bool,
    /// Evaluate every this many epochs (the last epoch is always evaluated).
    pub eval_every: u64,
    /// Also score the training set at evaluation time.
    pub eval_train: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 16,
            decay_factor: 0.8,
            decay_period: 30,
            decay_unit: DecayUnit::Epoch,
            epochs: 100,
            max_steps: None,
            gamma: 6.0,
            ignore_index: None,
            seed: 0,
            pretrained_encoder: None,
            val_fraction: 0.1,
            aug_pool: None,
            shuffle: true,
            eval_every: 1,
            eval_train: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [("lr", self.lr), ("eps", self.eps)];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {v}")));
            }
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config(format!(
                "decay_factor must be in (0, 1], got {}",
                self.decay_factor
            )));
        }
        if self.decay_period == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config(
                "decay_period, batch_size and eval_every must be at least 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!(
                "val_fraction must be in [0, 1), got {}",
                self.val_fraction
            )));
        }
        self.focal().validate()
    }

    pub fn focal(&self) -> FocalConfig {
        FocalConfig {
            gamma: self.gamma,
            ignore_index: self.ignore_index,
        }
    }
}

/// `lr0 · factor^⌊epoch / period⌋`.
pub fn lr_schedule(epoch: u64, cfg: &TrainConfig) -> f64 {
    cfg.lr * cfg.decay_factor.powi((epoch / cfg.decay_period) as i32)
}

/// Learning rate at a given point, honouring the configured decay unit.
pub fn lr_at(cfg: &TrainConfig, epoch: u64, step: u64) -> f64 {
    match cfg.decay_unit {
        DecayUnit::Epoch => lr_schedule(epoch, cfg),
        DecayUnit::Step => lr_schedule(step, cfg),
    }
}

/// Adam moments for every trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Element = f32> {
    /// Completed updates.
    pub t: u64,
    pub m: IndexMap<String, Tensor<T>>,
    pub v: IndexMap<String, Tensor<T>>,
}

impl<T: Element> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || {
            params
                .trainable()
                .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
                .collect()
        };
        Self {
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One bias-corrected Adam update of every trainable tensor.
pub fn adam_step<T: Element>(
    params: &mut ParamStore<T>,
    grads: &GradStore<T>,
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    let names: Vec<String> = params.trainable().map(|(k, _)| k.clone()).collect();
    for name in &names {
        if grads.get(name).is_none() {
            return Err(Error::InvalidArgument(format!(
                "missing gradient for trainable tensor {name}"
            )));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::from_f64(cfg.beta1), T::from_f64(cfg.beta2));
    let (c1, c2) = (T::from_f64(1.0 - cfg.beta1), T::from_f64(1.0 - cfg.beta2));
    let bc1 = T::from_f64(1.0 - cfg.beta1.powi(t));
    let bc2 = T::from_f64(1.0 - cfg.beta2.powi(t));
    let (lr, eps) = (T::from_f64(lr), T::from_f64(cfg.eps));
    for name in &names {
        let g = grads.get(name).expect("checked above");
        let p = params.tensor_mut(name)?;
        if g.shape() != p.shape() {
            return Err(Error::TensorShape {
                name: name.clone(),
                expected: p.shape(),
                got: g.shape(),
            });
        }
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        let iter = p
            .data_mut()
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut())
            .zip(g.data());
        for (((p, m), v), &g) in iter {
            *m = b1 * *m + c1 * g;
            *v = b2 * *v + c2 * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Counters and bookkeeping carried across epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Next epoch to run.
    pub epoch: u64,
    /// Optimizer steps taken.
    pub step: u64,
    pub lr: f64,
    pub best_mdice: Option<f64>,
    pub best_epoch: Option<u64>,
    pub adam: AdamState<f32>,
}

/// One line of the history log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub val_mdice: Option<f64>,
    pub val_miou: Option<f64>,
    pub train_mdice: Option<f64>,
    pub train_miou: Option<f64>,
    pub steps: u64,
    pub wall_s: f64,
    pub afb_enabled: bool,
    pub pretrained: bool,
}

/// Eval-mode predictions at full input resolution (logits upsampled, then argmax).
pub fn predict_masks(model: &Model<f32>, images: &Tensor<f32>) -> Result<LabelMap> {
    let norm = normalize(images, &model.config().normalization);
    let logits = model.predict(&norm)?;
    let factor = images.h() / logits.h();
    Ok(LabelMap::argmax(&bilinear_upsample(&logits, factor)?))
}

/// Confusion counts of the model over `samples`.
pub fn evaluate(
    model: &Model<f32>,
    samples: &[SegSample],
    batch_size: usize,
    ignore: Option<u8>,
) -> Result<ConfusionAccumulator> {
    let mut acc = ConfusionAccumulator::new(model.config().num_classes).with_ignore(ignore);
    for idx in batch_indices(samples.len(), batch_size, None)? {
        let picked: Vec<&SegSample> = idx.iter().map(|&i| &samples[i]).collect();
        let batch = SegBatch::from_samples(idx, &picked)?;
        let pred = predict_masks(model, &batch.images)?;
        acc.update(pred.data(), batch.masks.data())?;
    }
    Ok(acc)
}

fn scores(acc: &ConfusionAccumulator) -> Result<(f64, f64)> {
    let opts = MeanOptions::default();
    Ok((acc.mean_dice(opts)?, acc.mean_iou(opts)?))
}

/// Where and how often [`Trainer::fit`] reports.
#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    /// Receives `history.jsonl`, `checkpoint.lwaw` (every epoch) and
    /// `best.lwaw` (best validation score).
    pub out_dir: Option<PathBuf>,
    /// Stop after finishing this epoch even if more are configured.
    pub stop_after_epoch: Option<u64>,
    pub augment: Option<AugmentConfig>,
    /// Print one line per epoch to stderr.
    pub verbose: bool,
}

pub struct Trainer {
    model: Model<f32>,
    cfg: TrainConfig,
    state: TrainState,
    pretrained: bool,
}

const SHUFFLE_TAG: u64 = 0x5348_5546;
const AUGMENT_TAG: u64 = 0x4155_4720;
const POOL_TAG: u64 = 0x504f_4f4c;

impl Trainer {
    /// Fresh run; imports the pretrained encoder if one is configured.
    pub fn new(mut model: Model<f32>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let pretrained = match &cfg.pretrained_encoder {
            Some(path) => {
                model.import_pretrained_encoder(path)?;
                true
            }
            None => false,
        };
        let state = TrainState {
            epoch: 0,
            step: 0,
            lr: lr_at(&cfg, 0, 0),
            best_mdice: None,
            best_epoch: None,
            adam: AdamState::new(model.params()),
        };
        Ok(Self {
            model,
            cfg,
            state,
            pretrained,
        })
    }

    /// Continue from a checkpoint written by [`Trainer::save_checkpoint`].
    pub fn resume(path: &Path) -> Result<Self> {
        let ck = load_checkpoint(path)?;
        ck.train_config.validate()?;
        Ok(Self {
            model: ck.model,
            cfg: ck.train_config,
            state: ck.state,
            pretrained: ck.pretrained,
        })
    }

    pub fn model(&self) -> &Model<f32> {
        &self.model
    }

    pub fn into_model(self) -> Model<f32> {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Change the epoch/step budget, e.g. to extend a resumed run.
    pub fn set_budget(&mut self, epochs: u64, max_steps: Option<u64>) {
        self.cfg.epochs = epochs;
        self.cfg.max_steps = max_steps;
    }

    /// Whether the encoder started from imported weights.
    pub fn pretrained(&self) -> bool {
        self.pretrained
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.model, &self.state, &self.cfg, self.pretrained)
    }

    fn done(&self) -> bool {
        self.state.epoch >= self.cfg.epochs || self.cfg.max_steps.is_some_and(|m| self.state.step >= m)
    }

    /// Forward, backward and one optimizer update on a batch; returns the loss.
    pub fn train_step(&mut self, batch: &SegBatch) -> Result<f64> {
        let lr = lr_at(&self.cfg, self.state.epoch, self.state.step);
        self.state.lr = lr;
        let images = normalize(&batch.images, &self.model.config().normalization);
        let mut g = Graph::new();
        let x = g.constant(images);
        let (logits, bn_updates) = self.model.forward_collect(&mut g, &x, BnMode::Train)?;
        let factor = batch.images.h() / logits.shape()[2];
        let up = g.bilinear_upsample(&logits, factor)?;
        let loss = g.focal_loss(&up, Arc::new(batch.masks.clone()), &self.cfg.focal())?;
        let value = loss.value().data()[0] as f64;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.state.step,
                lr,
            });
        }
        let grads = g.backward(&loss)?.into_params();
        drop(g);
        let params = self.model.params_mut();
        params.apply_bn_updates(&bn_updates, BN_MOMENTUM)?;
        adam_step(params, &grads, &mut self.state.adam, lr, &self.cfg)?;
        self.state.step += 1;
        Ok(value)
    }

    /// Training samples for one epoch, in batch order.
    fn epoch_batches(&self, samples: &[SegSample]) -> Result<Vec<Vec<usize>>> {
        let shuffle = self
            .cfg
            .shuffle
            .then(|| derive_seed(&[self.cfg.seed, SHUFFLE_TAG, self.state.epoch]));
        batch_indices(samples.len(), self.cfg.batch_size, shuffle)
    }

    fn make_batch(&self, samples: &[SegSample], idx: Vec<usize>, aug: Option<&AugmentConfig>) -> Result<SegBatch> {
        let epoch = self.state.epoch;
        let seed = self.cfg.seed;
        let picked: Vec<SegSample> = idx
            .par_iter()
            .map(|&i| match aug {
                Some(a) => augment(
                    &samples[i],
                    a,
                    &mut rng_for(&[seed, AUGMENT_TAG, a.seed, epoch, i as u64]),
                ),
                None => samples[i].clone(),
            })
            .collect();
        let refs: Vec<&SegSample> = picked.iter().collect();
        SegBatch::from_samples(idx, &refs)
    }

    /// One pass over `samples`; returns the mean loss per sample.
    pub fn run_epoch(&mut self, samples: &[SegSample], aug: Option<&AugmentConfig>) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("training set is empty".into()));
        }
        let mut total = 0.0;
        let mut count = 0usize;
        for idx in self.epoch_batches(samples)? {
            if self.cfg.max_steps.is_some_and(|m| self.state.step >= m) {
                break;
            }
            let batch = self.make_batch(samples, idx, aug)?;
            let loss = self.train_step(&batch)?;
            total += loss * batch.len() as f64;
            count += batch.len();
        }
        Ok(if count == 0 { f64::NAN } else { total / count as f64 })
    }

    fn build_pool(&self, samples: &[SegSample], aug: &AugmentConfig, size: usize) -> Vec<SegSample> {
        (0..size)
            .into_par_iter()
            .map(|j| {
                let src = &samples[j % samples.len()];
                let mut s = augment(src, aug, &mut rng_for(&[self.cfg.seed, POOL_TAG, aug.seed, j as u64]));
                s.name = format!("{}#{j}", src.name);
                s
            })
            .collect()
    }

    /// Train until the configured epoch/step budget is spent.
    pub fn fit(&mut self, train: &[SegSample], val: &[SegSample], opts: &FitOptions) -> Result<Vec<EpochRecord>> {
        if train.is_empty() {
            return Err(Error::InvalidArgument("training set is empty".into()));
        }
        if let Some(a) = &opts.augment {
            a.validate()?;
        }
        let pool;
        let (samples, aug) = match (self.cfg.aug_pool, &opts.augment) {
            (Some(size), Some(a)) if a.enabled => {
                pool = self.build_pool(train, a, size.max(1));
                (&pool[..], None)
            }
            (_, a) => (train, a.as_ref().filter(|a| a.enabled)),
        };
        let history_path = opts.out_dir.as_ref().map(|d| d.join("history.jsonl"));
        if let Some(dir) = &opts.out_dir {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            if self.state.epoch == 0 {
                let p = history_path.as_ref().expect("set with out_dir");
                fs::write(p, b"").map_err(|e| Error::io(p, e))?;
            }
        }
        let mut history = Vec::new();
        while !self.done() {
            let t0 = Instant::now();
            let epoch = self.state.epoch;
            let steps_before = self.state.step;
            let lr = lr_at(&self.cfg, epoch, self.state.step);
            let train_loss = self.run_epoch(samples, aug)?;
            self.state.epoch += 1;
            let last = self.done() || opts.stop_after_epoch == Some(epoch);
            let mut record = EpochRecord {
                epoch,
                lr,
                train_loss,
                val_mdice: None,
                val_miou: None,
                train_mdice: None,
                train_miou: None,
                steps: self.state.step - steps_before,
                wall_s: 0.0,
                afb_enabled: self.model.config().afb_enabled,
                pretrained: self.pretrained,
            };
            if last || (epoch + 1).is_multiple_of(self.cfg.eval_every) {
                let bs = self.cfg.batch_size;
                if !val.is_empty() {
                    let (d, i) = scores(&evaluate(&self.model, val, bs, self.cfg.ignore_index)?)?;
                    record.val_mdice = Some(d);
                    record.val_miou = Some(i);
                }
                if self.cfg.eval_train || val.is_empty() {
                    let (d, i) = scores(&evaluate(&self.model, train, bs, self.cfg.ignore_index)?)?;
                    record.train_mdice = Some(d);
                    record.train_miou = Some(i);
                }
            }
            record.wall_s = t0.elapsed().as_secs_f64();
            if opts.verbose {
                eprintln!(
                    "epoch {:>4} step {:>6} lr {:.3e} loss {:.6} val mDice {} train mDice {}",
                    epoch,
                    self.state.step,
                    lr,
                    train_loss,
                    fmt_opt(record.val_mdice),
                    fmt_opt(record.train_mdice)
                );
            }
            let score = record.val_mdice.or(record.train_mdice).filter(|s| s.is_finite());
            let improved = score.is_some_and(|s| self.state.best_mdice.is_none_or(|b| s > b));
            if improved {
                self.state.best_mdice = score;
                self.state.best_epoch = Some(epoch);
            }
            if let Some(dir) = &opts.out_dir {
                let p = history_path.as_ref().expect("set with out_dir");
                let mut f = OpenOptions::new()
                    .append(true)
                    .create(true)
                    .open(p)
                    .map_err(|e| Error::io(p, e))?;
                let line = serde_json::to_string(&record).expect("record serializes");
                writeln!(f, "{line}").map_err(|e| Error::io(p, e))?;
                if improved {
                    self.model.save_weights(&dir.join("best.lwaw"))?;
                }
                self.save_checkpoint(&dir.join("checkpoint.lwaw"))?;
            }
            history.push(record);
            if last {
                break;
            }
        }
        Ok(history)
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}
