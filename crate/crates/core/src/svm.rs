//! One-vs-rest linear SVM trained by subgradient descent on the hinge loss.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SvmError {
    #[error("need samples from at least two classes")]
    SingleClass,
    #[error("sample {index} has {got} features, expected {expected}")]
    Dimension { index: usize, expected: usize, got: usize },
    #[error("labels and samples differ in count ({samples} vs {labels})")]
    LabelCount { samples: usize, labels: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvmParams {
    pub epochs: usize,
    pub lr: f64,
    /// L2 weight on `||w||^2 / 2`.
    pub reg: f64,
}

impl Default for SvmParams {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 0.01,
            reg: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    /// One weight vector per class.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<f64>,
}

impl SvmModel {
    pub fn classes(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }

    pub fn margins(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + b)
            .collect()
    }
}

/// Labels are `0..classes`; `classes` is one more than the largest label.
/// Each full pass averages the hinge subgradient over all samples.
pub fn svm_train(samples: &[Vec<f64>], labels: &[usize], params: &SvmParams) -> Result<SvmModel, SvmError> {
    if samples.len() != labels.len() {
        return Err(SvmError::LabelCount {
            samples: samples.len(),
            labels: labels.len(),
        });
    }
    let mut seen: Vec<usize> = labels.to_vec();
    seen.sort_unstable();
    seen.dedup();
    if seen.len() < 2 {
        return Err(SvmError::SingleClass);
    }
    let dim = samples[0].len();
    for (i, s) in samples.iter().enumerate() {
        if s.len() != dim {
            return Err(SvmError::Dimension {
                index: i,
                expected: dim,
                got: s.len(),
            });
        }
    }
    let classes = seen[seen.len() - 1] + 1;
    let n = samples.len() as f64;
    let mut model = SvmModel {
        weights: vec![vec![0.0; dim]; classes],
        biases: vec![0.0; classes],
    };
    for _ in 0..params.epochs {
        for c in 0..classes {
            let w = &model.weights[c];
            let b = model.biases[c];
            let mut gw: Vec<f64> = w.iter().map(|v| params.reg * v).collect();
            let mut gb = 0.0;
            for (x, &l) in samples.iter().zip(labels) {
                let y = if l == c { 1.0 } else { -1.0 };
                let m = y * (w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + b);
                if m < 1.0 {
                    for (g, xi) in gw.iter_mut().zip(x) {
                        *g -= y * xi / n;
                    }
                    gb -= y / n;
                }
            }
            for (wi, g) in model.weights[c].iter_mut().zip(&gw) {
                *wi -= params.lr * g;
            }
            model.biases[c] -= params.lr * gb;
        }
    }
    Ok(model)
}

/// Class with the largest margin, lowest index on ties.
pub fn svm_predict(model: &SvmModel, x: &[f64]) -> usize {
    crate::nn::argmax(&model.margins(x))
}

pub fn svm_accuracy(model: &SvmModel, samples: &[Vec<f64>], labels: &[usize]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let ok = samples.iter().zip(labels).filter(|(x, &l)| svm_predict(model, x) == l).count();
    ok as f64 / samples.len() as f64
}
