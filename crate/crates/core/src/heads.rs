//! The two ROI classification heads.
//!
//! `CNN_0C` is three dense layers over the flattened pooled ROI; `CNN_1C`
//! puts one 3x3 conv + ReLU in front of the same dense stack. Both end in a
//! softmax over `C + 1` outputs, index 0 being background.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{self, Arch, ForwardCache, LayerSpec, NetError, NetworkParams};
use crate::nn;
use crate::tensor::FeatureMap;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HeadError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("pooled map shape {got:?} does not match head input {expected:?}")]
    InputShape {
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },
    #[error("unknown head variant '{0}' (expected cnn0c or cnn1c)")]
    UnknownVariant(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HeadVariant {
    #[serde(rename = "CNN_0C")]
    Cnn0C,
    #[serde(rename = "CNN_1C")]
    Cnn1C,
}

impl FromStr for HeadVariant {
    type Err = HeadError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('_', "").as_str() {
            "cnn0c" => Ok(Self::Cnn0C),
            "cnn1c" => Ok(Self::Cnn1C),
            _ => Err(HeadError::UnknownVariant(s.to_string())),
        }
    }
}

impl fmt::Display for HeadVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Cnn0C => "CNN_0C",
            Self::Cnn1C => "CNN_1C",
        })
    }
}

/// Layer shapes of a head for a `channels x pool_h x pool_w` pooled ROI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadShape {
    pub variant: HeadVariant,
    pub channels: usize,
    pub pool_h: usize,
    pub pool_w: usize,
    pub hidden: [usize; 2],
    /// Object classes, excluding background.
    pub classes: usize,
}

impl HeadShape {
    pub fn input_shape(&self) -> (usize, usize, usize) {
        (self.channels, self.pool_h, self.pool_w)
    }

    pub fn outputs(&self) -> usize {
        self.classes + 1
    }

    pub fn arch(&self) -> Arch {
        let mut layers = Vec::new();
        if self.variant == HeadVariant::Cnn1C {
            layers.push((
                "conv".to_string(),
                LayerSpec::Conv {
                    in_channels: self.channels,
                    out_channels: self.channels,
                    kernel: 3,
                    relu: true,
                    pool: false,
                },
            ));
        }
        let flat = self.channels * self.pool_h * self.pool_w;
        let dims = [flat, self.hidden[0], self.hidden[1], self.outputs()];
        for i in 0..3 {
            layers.push((
                format!("fc{}", i + 1),
                LayerSpec::Dense {
                    inputs: dims[i],
                    outputs: dims[i + 1],
                    relu: i < 2,
                },
            ));
        }
        Arch { layers }
    }
}

/// Head parameters tagged with their variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub shape: HeadShape,
    pub net: NetworkParams,
}

impl HeadParams {
    pub fn init(shape: HeadShape, seed: u64) -> Result<Self, HeadError> {
        Ok(Self {
            shape,
            net: backbone::init_params(&shape.arch(), seed)?,
        })
    }

    pub fn variant(&self) -> HeadVariant {
        self.shape.variant
    }
}

/// Forward output of a head: logits, probabilities and the cache for backward.
#[derive(Debug, Clone)]
pub struct HeadOutput {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub cache: ForwardCache,
}

pub fn head_forward(params: &HeadParams, pooled: &FeatureMap) -> Result<HeadOutput, HeadError> {
    if pooled.shape() != params.shape.input_shape() {
        return Err(HeadError::InputShape {
            expected: params.shape.input_shape(),
            got: pooled.shape(),
        });
    }
    let (out, cache) = backbone::forward(&params.net, pooled)?;
    let logits = out.into_vec();
    let probs = nn::softmax(&logits);
    Ok(HeadOutput { logits, probs, cache })
}

/// Cross-entropy of one ROI and its gradients `(loss, d params, d pooled)`.
pub fn head_loss_backward(
    params: &HeadParams,
    out: &HeadOutput,
    target: usize,
) -> Result<(f64, NetworkParams, FeatureMap), HeadError> {
    let loss = nn::cross_entropy(&out.logits, target);
    let mut g = out.probs.clone();
    g[target] -= 1.0;
    let n = g.len();
    let upstream = FeatureMap::from_vec(n, 1, 1, g).expect("logit shape");
    let (grads, dx) = backbone::backward(&params.net, &out.cache, &upstream)?;
    Ok((loss, grads, dx))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(variant: HeadVariant) -> HeadShape {
        HeadShape {
            variant,
            channels: 4,
            pool_h: 3,
            pool_w: 3,
            hidden: [16, 8],
            classes: 3,
        }
    }

    #[test]
    fn architecture_audit() {
        let a0 = shape(HeadVariant::Cnn0C).arch();
        let a1 = shape(HeadVariant::Cnn1C).arch();
        let convs = |a: &Arch| a.layers.iter().filter(|l| matches!(l.1, LayerSpec::Conv { .. })).count();
        let dense = |a: &Arch| {
            a.layers
                .iter()
                .filter(|l| matches!(l.1, LayerSpec::Dense { .. }))
                .map(|l| l.1)
                .collect::<Vec<_>>()
        };
        assert_eq!(convs(&a0), 0);
        assert_eq!(convs(&a1), 1);
        assert_eq!(dense(&a0).len(), 3);
        assert_eq!(dense(&a0), dense(&a1));
    }

    #[test]
    fn probabilities_sum_to_one() {
        for v in [HeadVariant::Cnn0C, HeadVariant::Cnn1C] {
            let p = HeadParams::init(shape(v), 9).unwrap();
            let x = FeatureMap::from_vec(4, 3, 3, (0..36).map(|i| (i as f64 * 0.3).sin()).collect()).unwrap();
            let out = head_forward(&p, &x).unwrap();
            assert_eq!(out.probs.len(), 4);
            assert!((out.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(out.probs.iter().all(|&p| p > 0.0 && p <= 1.0));
        }
    }

    #[test]
    fn zero_input_gives_uniform() {
        let p = HeadParams::init(shape(HeadVariant::Cnn1C), 1).unwrap();
        let out = head_forward(&p, &FeatureMap::zeros(4, 3, 3)).unwrap();
        for &q in &out.probs {
            assert!((q - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_mismatch() {
        let p = HeadParams::init(shape(HeadVariant::Cnn0C), 1).unwrap();
        assert!(matches!(
            head_forward(&p, &FeatureMap::zeros(4, 2, 2)),
            Err(HeadError::InputShape { .. })
        ));
    }

    #[test]
    fn variant_names() {
        assert_eq!("cnn1c".parse::<HeadVariant>().unwrap(), HeadVariant::Cnn1C);
        assert_eq!("CNN_0C".parse::<HeadVariant>().unwrap(), HeadVariant::Cnn0C);
        assert!("cnn2c".parse::<HeadVariant>().is_err());
    }
}
