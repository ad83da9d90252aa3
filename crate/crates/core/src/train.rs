//! SGD with momentum, reduce-on-plateau learning-rate decay, and the epoch
//! loop for plain training and distillation.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph};
use crate::data::{batch, hflip, Sample, Split};
use crate::distill::{combined_loss, cross_entropy, DistillConfig};
use crate::error::{Error, Result};
use crate::nn::{Ctx, Param, ParamKind};
use crate::tensor::{Scalar, Tensor};
use crate::zoo::Model;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlateauMetric {
    ValLoss,
    ValAccuracy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub plateau_threshold: f64,
    pub min_lr: f64,
    pub plateau_metric: PlateauMetric,
    pub seed: u64,
    /// Horizontal-flip probability for training batches.
    pub flip_prob: f64,
    pub deterministic: bool,
    /// Inverse-frequency class weights from the training split; uniform otherwise.
    pub class_weighting: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            epochs: 80,
            lr: 1e-3,
            momentum: 0.9,
            plateau_factor: 0.1,
            plateau_patience: 5,
            plateau_threshold: 1e-4,
            min_lr: 1e-7,
            plateau_metric: PlateauMetric::ValLoss,
            seed: 0,
            flip_prob: 0.5,
            deterministic: true,
            class_weighting: true,
        }
    }
}

impl TrainConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.batch_size == 0 {
            p.push("batch_size must be at least 1".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            p.push(format!(
                "lr {} must be a finite non-negative number",
                self.lr
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            p.push(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            p.push(format!(
                "plateau_factor {} outside (0, 1)",
                self.plateau_factor
            ));
        }
        if self.plateau_patience == 0 {
            p.push("plateau_patience must be at least 1".into());
        }
        if self.plateau_threshold.is_nan()
            || self.plateau_threshold < 0.0
            || self.min_lr.is_nan()
            || self.min_lr < 0.0
        {
            p.push("plateau_threshold and min_lr must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            p.push(format!("flip_prob {} outside [0, 1]", self.flip_prob));
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::TrainConfig(p.join("; ")))
        }
    }

    pub fn scheduler(&self) -> PlateauScheduler {
        PlateauScheduler {
            lr: self.lr,
            factor: self.plateau_factor,
            patience: self.plateau_patience,
            threshold: self.plateau_threshold,
            min_lr: self.min_lr,
            maximize: self.plateau_metric == PlateauMetric::ValAccuracy,
            best: None,
            bad_epochs: 0,
        }
    }
}

/// Copy gradients from a backward pass onto the trainable parameters.
pub fn attach_gradients<'a, T: Scalar + 'a>(
    params: impl IntoIterator<Item = &'a mut Param<T>>,
    grads: &Gradients<T>,
) {
    for p in params {
        if p.kind == ParamKind::Trainable {
            p.grad = grads.param(&p.name).cloned();
        }
    }
}

/// `v ← momentum·v + g`, `p ← p − lr·v`, then clear `g`. Fails without
/// touching anything if any trainable parameter lacks a gradient.
pub fn sgd_step<'a, T: Scalar + 'a>(
    params: impl IntoIterator<Item = &'a mut Param<T>>,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    let mut params: Vec<&mut Param<T>> = params
        .into_iter()
        .filter(|p| p.kind == ParamKind::Trainable)
        .collect();
    if let Some(p) = params.iter().find(|p| p.grad.is_none()) {
        return Err(Error::MissingGradient(p.name.clone()));
    }
    let (lr, m) = (T::from_f64(lr), T::from_f64(momentum));
    for p in params.iter_mut() {
        let g = p.grad.take().expect("checked above");
        let v = match p.velocity.take() {
            Some(mut v) => {
                for (vi, &gi) in v.data_mut().iter_mut().zip(g.data()) {
                    *vi = m * *vi + gi;
                }
                v
            }
            None => g,
        };
        for (pi, &vi) in p.value.data_mut().iter_mut().zip(v.data()) {
            *pi -= lr * vi;
        }
        p.velocity = Some(v);
    }
    Ok(())
}

/// Multiply the learning rate by `factor` after `patience` consecutive
/// epochs without an improvement larger than `threshold`; never below `min_lr`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub threshold: f64,
    pub min_lr: f64,
    pub maximize: bool,
    best: Option<f64>,
    bad_epochs: usize,
}

impl PlateauScheduler {
    /// Record one epoch's metric; returns the learning rate for the next epoch.
    pub fn step(&mut self, metric: f64) -> f64 {
        let improved = match self.best {
            None => true,
            Some(b) if self.maximize => metric > b + self.threshold,
            Some(b) => metric < b - self.threshold,
        };
        if improved {
            self.best = Some(metric);
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                let next = (self.lr * self.factor).max(self.min_lr);
                if next < self.lr * (1.0 - 1e-9) {
                    self.lr = next;
                }
                self.bad_epochs = 0;
            }
        }
        self.lr
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }
}

/// The frozen teacher and the loss binding used for distillation.
pub struct Teacher<'a> {
    pub model: &'a Model<f32>,
    pub distill: DistillConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub total: f32,
    pub ce: f32,
    pub kl: f32,
    pub correct: usize,
}

/// One forward/backward/update on a prepared batch.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &mut Model<f32>,
    images: &Tensor<f32>,
    labels: &[usize],
    weights: &[f64],
    teacher: Option<&Teacher>,
    lr: f64,
    momentum: f64,
    dropout_seed: u64,
) -> Result<StepLoss> {
    let g = Graph::<f32>::new();
    let ctx = Ctx::train(&g, dropout_seed);
    let x = g.constant(images.clone());
    let logits = model.forward(&ctx, x)?;
    let (loss, ce, kl) = match teacher {
        Some(t) => {
            let cfg = match &t.distill.class_weights {
                Some(_) => t.distill.clone(),
                None => t.distill.clone().with_class_weights(weights.to_vec()),
            };
            let teacher_logits = if cfg.alpha == 0.0 {
                None
            } else {
                Some(t.model.logits(images)?)
            };
            let parts = combined_loss(&g, logits, teacher_logits.as_ref(), labels, &cfg)?;
            (parts.total, parts.ce, parts.kl)
        }
        None => {
            let w: Vec<f32> = weights.iter().map(|&v| v as f32).collect();
            let ce = cross_entropy(&g, logits, labels, &w)?;
            let v = g.value(ce).item();
            (ce, v, 0.0)
        }
    };
    let total = g.value(loss).item();
    let correct = g
        .value(logits)
        .argmax_rows()
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count();
    if !total.is_finite() {
        return Err(Error::NonFiniteLoss { epoch: 0, step: 0 });
    }
    let updates = g.take_running_stats();
    let grads = g.backward(loss)?;
    attach_gradients(model.params_mut(), &grads);
    sgd_step(model.params_mut(), lr, momentum)?;
    model.apply_running_stats(&updates);
    Ok(StepLoss {
        total,
        ce,
        kl,
        correct,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_ce: f64,
    pub train_kl: f64,
    pub train_accuracy: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub mode: String,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub class_weights: Vec<f64>,
    pub distill: Option<DistillConfig>,
    pub checkpoint: Option<String>,
    /// Wall-clock seconds per epoch; excluded from serialized reports.
    #[serde(skip)]
    pub epoch_seconds: Vec<f64>,
}

impl TrainReport {
    /// Per-epoch CSV, one row per epoch.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "epoch,lr,train_loss,train_ce,train_kl,train_accuracy,val_loss,val_accuracy\n",
        );
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for e in &self.epochs {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                e.epoch,
                e.lr,
                e.train_loss,
                e.train_ce,
                e.train_kl,
                e.train_accuracy,
                opt(e.val_loss),
                opt(e.val_accuracy)
            ));
        }
        s
    }
}

pub struct FitOutput {
    pub report: TrainReport,
    /// Snapshot of the model at the best monitored epoch.
    pub best: Model<f32>,
}

fn epoch_rng(seed: u64, epoch: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((epoch as u64) << 8 | stream);
    rng
}

pub fn class_weights_for(train: &[Sample], num_classes: usize, enabled: bool) -> Result<Vec<f64>> {
    if !enabled {
        return Ok(vec![1.0; num_classes]);
    }
    let mut counts = vec![0usize; num_classes];
    for s in train {
        if s.label >= num_classes {
            return Err(Error::LabelOutOfRange {
                label: s.label,
                classes: num_classes,
            });
        }
        counts[s.label] += 1;
    }
    let total = train.len() as f64;
    counts
        .iter()
        .enumerate()
        .map(|(c, &n)| {
            if n == 0 {
                Err(Error::EmptyClass {
                    class: crate::data::Emotion::from_index(c)
                        .map_or(c.to_string(), |e| e.to_string()),
                    split: Split::Training.to_string(),
                })
            } else {
                Ok(total / (num_classes as f64 * n as f64))
            }
        })
        .collect()
}

/// Uniform-weight cross-entropy and accuracy of eval-mode logits.
pub fn validate_model(
    model: &Model<f32>,
    samples: &[Sample],
    batch_size: usize,
) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut correct = 0usize;
    for chunk in samples.chunks(batch_size.max(1)) {
        let (x, labels) = batch(chunk)?;
        let logits = model.logits(&x)?;
        let g = Graph::<f32>::inference();
        let z = g.constant(logits.clone());
        let ce = cross_entropy(&g, z, &labels, &vec![1.0; model.config.num_classes])?;
        loss += g.value(ce).item() as f64 * chunk.len() as f64;
        correct += logits
            .argmax_rows()
            .iter()
            .zip(&labels)
            .filter(|(p, y)| p == y)
            .count();
    }
    let n = samples.len() as f64;
    Ok((loss / n, 100.0 * correct as f64 / n))
}

/// Train `model` on `train`, monitoring `val` (or the training loss when
/// `val` is empty). With a teacher the loss is the distillation objective;
/// the teacher is only ever evaluated, never updated.
pub fn fit(
    model: &mut Model<f32>,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    teacher: Option<&Teacher>,
) -> Result<FitOutput> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if let Some(t) = teacher {
        t.distill.validate(model.config.num_classes)?;
    }
    let weights = class_weights_for(train, model.config.num_classes, cfg.class_weighting)?;
    let mut sched = cfg.scheduler();
    let mut lr = cfg.lr;
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut seconds = Vec::with_capacity(cfg.epochs);
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut best_metric = f64::NAN;
    let width = model.config.input_shape[2];
    let mut step = 0usize;

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut epoch_rng(cfg.seed, epoch, 1));
        let mut aug = epoch_rng(cfg.seed, epoch, 2);
        let (mut sum_total, mut sum_ce, mut sum_kl, mut correct) = (0.0, 0.0, 0.0, 0usize);
        for idx in order.chunks(cfg.batch_size) {
            step += 1;
            let (mut images, labels) = batch(idx.iter().map(|&i| &train[i]))?;
            if cfg.flip_prob > 0.0 {
                let per = images.numel() / idx.len();
                for img in images.data_mut().chunks_exact_mut(per) {
                    if aug.gen::<f64>() < cfg.flip_prob {
                        hflip(img, width);
                    }
                }
            }
            let dropout_seed = cfg.seed ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            let out = train_step(
                model,
                &images,
                &labels,
                &weights,
                teacher,
                lr,
                cfg.momentum,
                dropout_seed,
            )
            .map_err(|e| match e {
                Error::NonFiniteLoss { .. } => Error::NonFiniteLoss { epoch, step },
                other => other,
            })?;
            let n = idx.len() as f64;
            sum_total += out.total as f64 * n;
            sum_ce += out.ce as f64 * n;
            sum_kl += out.kl as f64 * n;
            correct += out.correct;
        }
        let n = train.len() as f64;
        let (val_loss, val_accuracy) = if val.is_empty() {
            (None, None)
        } else {
            let (l, a) = validate_model(model, val, cfg.batch_size)?;
            (Some(l), Some(a))
        };
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: sum_total / n,
            train_ce: sum_ce / n,
            train_kl: sum_kl / n,
            train_accuracy: 100.0 * correct as f64 / n,
            val_loss,
            val_accuracy,
        };
        let metric = match cfg.plateau_metric {
            PlateauMetric::ValLoss => val_loss.unwrap_or(record.train_loss),
            PlateauMetric::ValAccuracy => val_accuracy.unwrap_or(record.train_accuracy),
        };
        let better = best_epoch == 0
            || match cfg.plateau_metric {
                PlateauMetric::ValLoss => metric < best_metric,
                PlateauMetric::ValAccuracy => metric > best_metric,
            };
        if better {
            best = model.clone();
            best_epoch = epoch;
            best_metric = metric;
        }
        lr = sched.step(metric);
        records.push(record);
        seconds.push(started.elapsed().as_secs_f64());
    }
    for p in best.params_mut() {
        p.velocity = None;
        p.grad = None;
    }
    Ok(FitOutput {
        report: TrainReport {
            mode: if teacher.is_some() {
                "distill"
            } else {
                "train"
            }
            .into(),
            epochs: records,
            best_epoch,
            best_metric,
            class_weights: weights,
            distill: teacher.map(|t| t.distill.clone()),
            checkpoint: None,
            epoch_seconds: seconds,
        },
        best,
    })
}
