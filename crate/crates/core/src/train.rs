//! Three-way split training with final weight averaging.
//!
//! The sample list is cut into three parts (remainder to the last). Each
//! part trains its own full detector copy from the same initialization with
//! plain mini-batch SGD; the result is the elementwise mean of the copies.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{self, EpochGradients, GradStatRow, NetError};
use crate::detector::{self, derive_seed, DetectorError, DetectorParams, Model, ModelConfig, Sample};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training needs at least 3 samples, got {0}")]
    TooFewSamples(usize),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch} (non-finite loss or parameters)")]
    Diverged { epoch: usize },
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Net(#[from] NetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    /// `lr_start` for the first half of all steps, `lr_end` afterwards.
    Step,
    /// Straight line from `lr_start` at the first step to `lr_end` at the last.
    Linear,
}

impl FromStr for LrSchedule {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "step" => Ok(Self::Step),
            "linear" => Ok(Self::Linear),
            _ => Err(TrainError::Config(format!("unknown lr schedule '{s}'"))),
        }
    }
}

impl fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Step => "step",
            Self::Linear => "linear",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub schedule: LrSchedule,
    pub seed: u64,
    /// Record per-step gradients of the first copy for [`backbone::grad_stats`].
    pub grad_stats: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 1,
            lr_start: 0.01,
            lr_end: 0.005,
            schedule: LrSchedule::Step,
            seed: 1,
            grad_stats: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::Config("epochs and batch size must be positive".into()));
        }
        if !(self.lr_end > 0.0 && self.lr_start >= self.lr_end) {
            return Err(TrainError::Config(format!(
                "need lr_start >= lr_end > 0, got {} and {}",
                self.lr_start, self.lr_end
            )));
        }
        Ok(())
    }

    /// Learning rate of update `step` out of `total` (0-based).
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        match self.schedule {
            LrSchedule::Step => {
                if 2 * step < total {
                    self.lr_start
                } else {
                    self.lr_end
                }
            }
            LrSchedule::Linear => {
                if total <= 1 {
                    return self.lr_end;
                }
                let t = step as f64 / (total - 1) as f64;
                self.lr_start + (self.lr_end - self.lr_start) * t
            }
        }
    }
}

/// Sizes of the three parts: equal, remainder to the last.
pub fn split_sizes(n: usize) -> [usize; 3] {
    let k = n / 3;
    [k, k, n - 2 * k]
}

/// One metrics row per epoch, averaged over the three copies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    /// Fraction of ground-truth ROIs the head classified correctly during the epoch.
    pub accuracy: f64,
    /// Learning rate of the epoch's last update.
    pub lr: f64,
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut s = String::from("epoch,loss,accuracy,lr\n");
    for r in rows {
        s.push_str(&format!("{},{:.6},{:.6},{}\n", r.epoch, r.loss, r.accuracy, r.lr));
    }
    s
}

#[derive(Debug, Clone)]
pub struct CopyResult {
    pub params: DetectorParams,
    pub losses: Vec<f64>,
    pub correct: Vec<usize>,
    pub total: Vec<usize>,
    pub lrs: Vec<f64>,
    pub grad_rows: Vec<GradStatRow>,
}

/// Trains one copy on `samples` starting from `init`. The shuffle order
/// depends only on `(seed, epoch)`, so equal inputs give equal copies.
pub fn train_copy(
    init: &DetectorParams,
    model_cfg: &ModelConfig,
    samples: &[Sample],
    cfg: &TrainConfig,
    record_grads: bool,
) -> Result<CopyResult, TrainError> {
    cfg.validate()?;
    let mut params = init.clone();
    let batches = samples.len().div_ceil(cfg.batch_size);
    let total_steps = batches * cfg.epochs;
    let mut res = CopyResult {
        params: init.clone(),
        losses: Vec::new(),
        correct: Vec::new(),
        total: Vec::new(),
        lrs: Vec::new(),
        grad_rows: Vec::new(),
    };
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1000 + epoch as u64)));
        let (mut loss_sum, mut correct, mut total) = (0.0, 0, 0);
        let mut lr = cfg.lr_start;
        let mut history = Vec::new();
        for batch in order.chunks(cfg.batch_size) {
            let mut grad = params.zeros_like();
            for &i in batch {
                let r = detector::training_step(&params, model_cfg, &samples[i])?;
                loss_sum += r.loss;
                correct += r.gt_correct;
                total += r.gt_total;
                grad.add_scaled(r.grads.as_ref().expect("gradient requested"), 1.0 / batch.len() as f64);
            }
            lr = cfg.lr_at(step, total_steps);
            step += 1;
            params.add_scaled(&grad, -lr);
            if record_grads {
                history.push(grad.combined(model_cfg));
            }
        }
        let mean_loss = loss_sum / samples.len() as f64;
        if !mean_loss.is_finite() || !params.is_finite() {
            return Err(TrainError::Diverged { epoch });
        }
        if record_grads {
            let ep = EpochGradients {
                epoch,
                steps: history,
                weights: params.combined(model_cfg),
            };
            res.grad_rows.extend(backbone::grad_stats(&[ep])?);
        }
        log::debug!("epoch {epoch}: loss {mean_loss:.4} acc {correct}/{total} lr {lr}");
        res.losses.push(mean_loss);
        res.correct.push(correct);
        res.total.push(total);
        res.lrs.push(lr);
    }
    res.params = params;
    Ok(res)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub copies: Vec<DetectorParams>,
    pub metrics: Vec<EpochMetrics>,
    pub grad_stats: Vec<GradStatRow>,
}

/// Splits `samples` in three, trains a copy per part from one shared
/// initialization and averages the copies.
pub fn train_three_way(samples: &[Sample], model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    if samples.len() < 3 {
        return Err(TrainError::TooFewSamples(samples.len()));
    }
    cfg.validate()?;
    let init = DetectorParams::init(model_cfg, cfg.seed)?;
    let sizes = split_sizes(samples.len());
    let mut start = 0;
    let mut results = Vec::with_capacity(3);
    for (k, &n) in sizes.iter().enumerate() {
        let part = &samples[start..start + n];
        start += n;
        log::info!("training copy {} on {} images", k + 1, part.len());
        results.push(train_copy(&init, model_cfg, part, cfg, cfg.grad_stats && k == 0)?);
    }
    let copies: Vec<DetectorParams> = results.iter().map(|r| r.params.clone()).collect();
    let params = detector::average_detectors(&copies)?;
    let metrics = (0..cfg.epochs)
        .map(|e| {
            let correct: usize = results.iter().map(|r| r.correct[e]).sum();
            let total: usize = results.iter().map(|r| r.total[e]).sum();
            EpochMetrics {
                epoch: e,
                loss: results.iter().map(|r| r.losses[e]).sum::<f64>() / 3.0,
                accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
                lr: results[0].lrs[e],
            }
        })
        .collect();
    let grad_stats = std::mem::take(&mut results[0].grad_rows);
    Ok(TrainOutcome {
        model: Model {
            config: model_cfg.clone(),
            params,
        },
        copies,
        metrics,
        grad_stats,
    })
}

/// ROI classification accuracy of a model over ground-truth boxes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub correct: usize,
    pub total: usize,
    /// `(class name, correct, total)` per object class.
    pub per_class: Vec<(String, usize, usize)>,
}

impl Accuracy {
    pub fn overall(&self) -> Option<f64> {
        (self.total > 0).then(|| self.correct as f64 / self.total as f64)
    }
}

/// Classifies every ground-truth box; predicting background counts as wrong.
pub fn roi_accuracy(model: &Model, samples: &[Sample]) -> Result<Accuracy, DetectorError> {
    let cfg = &model.config;
    let mut per_class: Vec<(String, usize, usize)> = cfg.classes.iter().map(|c| (c.clone(), 0, 0)).collect();
    for s in samples {
        let boxes: Vec<_> = s.objects.iter().map(|o| o.bbox).collect();
        if boxes.is_empty() {
            continue;
        }
        let probs = detector::classify_boxes(&model.params, cfg, &s.inputs, &boxes)?;
        for (o, p) in s.objects.iter().zip(probs) {
            per_class[o.label].2 += 1;
            if crate::nn::argmax(&p) == o.label + 1 {
                per_class[o.label].1 += 1;
            }
        }
    }
    Ok(Accuracy {
        correct: per_class.iter().map(|c| c.1).sum(),
        total: per_class.iter().map(|c| c.2).sum(),
        per_class,
    })
}

/// Flattened ROI-pooled fused features and class label for every
/// ground-truth box.
pub fn extract_features(model: &Model, samples: &[Sample]) -> Result<Vec<(Vec<f64>, usize)>, DetectorError> {
    let mut out = Vec::new();
    for s in samples {
        let boxes: Vec<_> = s.objects.iter().map(|o| o.bbox).collect();
        if boxes.is_empty() {
            continue;
        }
        let feats = detector::pooled_features(&model.params, &model.config, &s.inputs, &boxes)?;
        out.extend(feats.into_iter().zip(s.objects.iter().map(|o| o.label)));
    }
    Ok(out)
}
