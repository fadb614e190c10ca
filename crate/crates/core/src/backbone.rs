//! Sequential trainable networks with exact analytic gradients.
//!
//! One executor serves every network in the pipeline: the per-modality
//! backbone columns (conv -> ReLU -> 2x2 max-pool blocks), the objectness
//! layer and the classification heads (optional conv followed by dense
//! layers). Parameters live in [`NetworkParams`], which also carries the
//! gradient of the same shape and supports the elementwise arithmetic used
//! for SGD and weight averaging.

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn;
use crate::tensor::FeatureMap;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("input has {got} channels/features, layer '{layer}' expects {expected}")]
    ChannelMismatch {
        layer: String,
        expected: usize,
        got: usize,
    },
    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),
    #[error("forward cache does not belong to these parameters")]
    CacheMismatch,
    #[error("nothing to average")]
    EmptyList,
    #[error("layer '{0}' has zero weight norm")]
    ZeroWeightNorm(String),
    #[error("gradient history is empty")]
    EmptyHistory,
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
}

/// Shape of one parameterised layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum LayerSpec {
    /// Same-padded stride-1 convolution, optionally followed by ReLU and a
    /// 2x2 stride-2 max pool.
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        relu: bool,
        pool: bool,
    },
    /// Fully connected layer over the flattened input.
    Dense {
        inputs: usize,
        outputs: usize,
        relu: bool,
    },
}

impl LayerSpec {
    pub fn weight_len(&self) -> usize {
        match *self {
            Self::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => out_channels * in_channels * kernel * kernel,
            Self::Dense { inputs, outputs, .. } => inputs * outputs,
        }
    }

    pub fn bias_len(&self) -> usize {
        match *self {
            Self::Conv { out_channels, .. } => out_channels,
            Self::Dense { outputs, .. } => outputs,
        }
    }

    pub fn fans(&self) -> (usize, usize) {
        match *self {
            Self::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => (in_channels * kernel * kernel, out_channels * kernel * kernel),
            Self::Dense { inputs, outputs, .. } => (inputs, outputs),
        }
    }
}

/// Ordered, named layer shapes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub layers: Vec<(String, LayerSpec)>,
}

impl Arch {
    /// Desk-scale conv5 stand-in: three conv(3x3)/ReLU/max-pool blocks with
    /// 8, 16 and 32 channels.
    pub fn desk_backbone(in_channels: usize) -> Self {
        Self::conv_blocks(in_channels, &[8, 16, 32])
    }

    pub fn conv_blocks(in_channels: usize, widths: &[usize]) -> Self {
        let mut layers = Vec::with_capacity(widths.len());
        let mut c = in_channels;
        for (i, &w) in widths.iter().enumerate() {
            layers.push((
                format!("conv{}", i + 1),
                LayerSpec::Conv {
                    in_channels: c,
                    out_channels: w,
                    kernel: 3,
                    relu: true,
                    pool: true,
                },
            ));
            c = w;
        }
        Self { layers }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.layers.is_empty() {
            return Err(NetError::InvalidArch("no layers".into()));
        }
        let mut seen_dense = false;
        for (name, spec) in &self.layers {
            match *spec {
                LayerSpec::Conv { kernel, .. } => {
                    if kernel % 2 == 0 {
                        return Err(NetError::InvalidArch(format!("{name}: even kernel {kernel}")));
                    }
                    if seen_dense {
                        return Err(NetError::InvalidArch(format!("{name}: conv after dense")));
                    }
                }
                LayerSpec::Dense { .. } => seen_dense = true,
            }
        }
        Ok(())
    }

    pub fn input_channels(&self) -> usize {
        match self.layers[0].1 {
            LayerSpec::Conv { in_channels, .. } => in_channels,
            LayerSpec::Dense { inputs, .. } => inputs,
        }
    }

    /// Spatial size after the network for an `h x w` input.
    pub fn output_hw(&self, mut h: usize, mut w: usize) -> (usize, usize) {
        for (_, spec) in &self.layers {
            match *spec {
                LayerSpec::Conv { pool: true, .. } => {
                    h = (h / 2).max(1);
                    w = (w / 2).max(1);
                }
                LayerSpec::Conv { .. } => {}
                LayerSpec::Dense { .. } => {
                    h = 1;
                    w = 1;
                }
            }
        }
        (h, w)
    }

    pub fn output_channels(&self) -> usize {
        match self.layers.last().map(|l| l.1) {
            Some(LayerSpec::Conv { out_channels, .. }) => out_channels,
            Some(LayerSpec::Dense { outputs, .. }) => outputs,
            None => 0,
        }
    }
}

/// Weights and bias of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub name: String,
    pub spec: LayerSpec,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Ordered parameter blocks of one network. Also used for gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    pub layers: Vec<Layer>,
}

/// Glorot/Xavier uniform bound `sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Uniform Glorot weights, zero biases; deterministic in `seed`.
pub fn init_params(arch: &Arch, seed: u64) -> Result<NetworkParams, NetError> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = arch
        .layers
        .iter()
        .map(|(name, spec)| {
            let (fan_in, fan_out) = spec.fans();
            let a = glorot_bound(fan_in, fan_out);
            let dist = Uniform::new(-a, a);
            Layer {
                name: name.clone(),
                spec: *spec,
                weights: (0..spec.weight_len()).map(|_| dist.sample(&mut rng)).collect(),
                bias: vec![0.0; spec.bias_len()],
            }
        })
        .collect();
    Ok(NetworkParams { layers })
}

impl NetworkParams {
    pub fn arch(&self) -> Arch {
        Arch {
            layers: self.layers.iter().map(|l| (l.name.clone(), l.spec)).collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    name: l.name.clone(),
                    spec: l.spec,
                    weights: vec![0.0; l.weights.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn check_same_arch(&self, other: &NetworkParams) -> Result<(), NetError> {
        if self.layers.len() != other.layers.len() {
            return Err(NetError::ArchitectureMismatch(format!(
                "{} vs {} layers",
                self.layers.len(),
                other.layers.len()
            )));
        }
        for (a, b) in self.layers.iter().zip(&other.layers) {
            if a.spec != b.spec || a.weights.len() != b.weights.len() || a.bias.len() != b.bias.len() {
                return Err(NetError::ArchitectureMismatch(format!(
                    "layer '{}' differs from '{}'",
                    a.name, b.name
                )));
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Flat parameter views in declared order (weights then bias per layer).
    pub fn blocks(&self) -> impl Iterator<Item = &[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
    }

    pub fn blocks_mut(&mut self) -> impl Iterator<Item = &mut Vec<f64>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weights, &mut l.bias])
    }

    pub fn get_flat(&self, mut i: usize) -> f64 {
        for b in self.blocks() {
            if i < b.len() {
                return b[i];
            }
            i -= b.len();
        }
        panic!("parameter index out of range");
    }

    pub fn set_flat(&mut self, mut i: usize, v: f64) {
        for b in self.blocks_mut() {
            if i < b.len() {
                b[i] = v;
                return;
            }
            i -= b.len();
        }
        panic!("parameter index out of range");
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, other: &NetworkParams, alpha: f64) {
        for (a, b) in self.blocks_mut().zip(other.blocks()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += alpha * y;
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for b in self.blocks_mut() {
            b.iter_mut().for_each(|v| *v *= alpha);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().all(|b| b.iter().all(|v| v.is_finite()))
    }
}

/// Elementwise mean of identically shaped parameter sets.
pub fn average_params(list: &[NetworkParams]) -> Result<NetworkParams, NetError> {
    let first = list.first().ok_or(NetError::EmptyList)?;
    for other in &list[1..] {
        first.check_same_arch(other)?;
    }
    let n = list.len() as f64;
    let mut out = first.zeros_like();
    let mut vals = Vec::with_capacity(list.len());
    for (bi, dst) in out.blocks_mut().enumerate() {
        let srcs: Vec<&[f64]> = list.iter().map(|p| p.blocks().nth(bi).expect("same arch")).collect();
        for (k, d) in dst.iter_mut().enumerate() {
            vals.clear();
            vals.extend(srcs.iter().map(|b| b[k]));
            vals.sort_by(f64::total_cmp);
            // offsets from the smallest value: identical inputs average to
            // themselves exactly and argument order does not matter
            let lo = vals[0];
            let spread: f64 = vals.iter().map(|v| v - lo).sum();
            *d = lo + spread / n;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
enum LayerCache {
    Conv {
        input: FeatureMap,
        pre: FeatureMap,
        pool: Option<((usize, usize, usize), Vec<usize>)>,
    },
    Dense {
        input_shape: (usize, usize, usize),
        input: Vec<f64>,
        pre: Vec<f64>,
    },
}

/// Activations retained by [`forward`] for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    arch: Arch,
    layers: Vec<LayerCache>,
}

impl ForwardCache {
    /// Compact fingerprint of every piecewise-linear switch taken in the
    /// forward pass (ReLU on/off, pool winners). Two passes with equal
    /// signatures lie on the same linear piece.
    pub fn switch_signature(&self, out: &mut Vec<u64>) {
        for l in &self.layers {
            match l {
                LayerCache::Conv { pre, pool, .. } => {
                    push_bits(out, pre.data().iter().map(|&v| v > 0.0));
                    if let Some((_, arg)) = pool {
                        out.extend(arg.iter().map(|&i| i as u64));
                    }
                }
                LayerCache::Dense { pre, .. } => push_bits(out, pre.iter().map(|&v| v > 0.0)),
            }
        }
    }
}

pub(crate) fn push_bits(out: &mut Vec<u64>, bits: impl Iterator<Item = bool>) {
    let mut word = 0u64;
    let mut n = 0;
    for b in bits {
        word = (word << 1) | u64::from(b);
        n += 1;
        if n == 64 {
            out.push(word);
            word = 0;
            n = 0;
        }
    }
    out.push(word);
    out.push(n);
}

/// Runs the network, caching what [`backward`] needs.
pub fn forward(params: &NetworkParams, input: &FeatureMap) -> Result<(FeatureMap, ForwardCache), NetError> {
    let mut x = input.clone();
    let mut caches = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        match layer.spec {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                relu,
                pool,
            } => {
                if x.channels() != in_channels {
                    return Err(NetError::ChannelMismatch {
                        layer: layer.name.clone(),
                        expected: in_channels,
                        got: x.channels(),
                    });
                }
                let pre = nn::conv_forward(&x, &layer.weights, &layer.bias, out_channels, kernel);
                let act = if relu { nn::relu(&pre) } else { pre.clone() };
                let (out, pool_cache) = if pool {
                    let shape = act.shape();
                    let (p, arg) = nn::maxpool2_forward(&act);
                    (p, Some((shape, arg)))
                } else {
                    (act, None)
                };
                caches.push(LayerCache::Conv {
                    input: std::mem::replace(&mut x, out),
                    pre,
                    pool: pool_cache,
                });
            }
            LayerSpec::Dense { inputs, outputs, relu } => {
                if x.len() != inputs {
                    return Err(NetError::ChannelMismatch {
                        layer: layer.name.clone(),
                        expected: inputs,
                        got: x.len(),
                    });
                }
                let input_shape = x.shape();
                let flat = x.data().to_vec();
                let pre = nn::dense_forward(&flat, &layer.weights, &layer.bias);
                let act: Vec<f64> = if relu { pre.iter().map(|v| v.max(0.0)).collect() } else { pre.clone() };
                x = FeatureMap::from_vec(outputs, 1, 1, act).expect("dense output shape");
                caches.push(LayerCache::Dense {
                    input_shape,
                    input: flat,
                    pre,
                });
            }
        }
    }
    Ok((
        x,
        ForwardCache {
            arch: params.arch(),
            layers: caches,
        },
    ))
}

/// Exact gradients of the forward pass: `(parameter gradients, input gradient)`.
pub fn backward(
    params: &NetworkParams,
    cache: &ForwardCache,
    upstream: &FeatureMap,
) -> Result<(NetworkParams, FeatureMap), NetError> {
    if cache.arch != params.arch() || cache.layers.len() != params.layers.len() {
        return Err(NetError::CacheMismatch);
    }
    let mut grads = params.zeros_like();
    let mut g = upstream.clone();
    for (i, (layer, lc)) in params.layers.iter().zip(&cache.layers).enumerate().rev() {
        match (layer.spec, lc) {
            (LayerSpec::Conv { relu, kernel, .. }, LayerCache::Conv { input, pre, pool }) => {
                if let Some((shape, arg)) = pool {
                    if g.len() != arg.len() {
                        return Err(NetError::CacheMismatch);
                    }
                    g = nn::maxpool2_backward(*shape, arg, &g);
                }
                if g.shape() != pre.shape() {
                    return Err(NetError::CacheMismatch);
                }
                if relu {
                    g = nn::relu_backward(pre, &g);
                }
                let (dw, db, dx) = nn::conv_backward(input, &layer.weights, &g, kernel);
                grads.layers[i].weights = dw;
                grads.layers[i].bias = db;
                g = dx;
            }
            (LayerSpec::Dense { relu, .. }, LayerCache::Dense { input_shape, input, pre }) => {
                if g.len() != pre.len() {
                    return Err(NetError::CacheMismatch);
                }
                let mut gv = g.data().to_vec();
                if relu {
                    for (gi, &p) in gv.iter_mut().zip(pre) {
                        if p <= 0.0 {
                            *gi = 0.0;
                        }
                    }
                }
                let (dw, db, dx) = nn::dense_backward(input, &layer.weights, &gv);
                grads.layers[i].weights = dw;
                grads.layers[i].bias = db;
                let (c, h, w) = *input_shape;
                g = FeatureMap::from_vec(c, h, w, dx).expect("dense input shape");
            }
            _ => return Err(NetError::CacheMismatch),
        }
    }
    Ok((grads, g))
}

/// One row of the per-layer gradient diagnostics table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradStatRow {
    pub epoch: usize,
    pub layer: String,
    /// `||mean over steps of dW||_2 / ||W||_2`
    pub mean_norm: f64,
    /// `||std over steps of dW||_2 / ||W||_2` (population std)
    pub std_norm: f64,
}

/// Weight gradients recorded over one epoch plus the weights they are normalized by.
#[derive(Debug, Clone)]
pub struct EpochGradients {
    pub epoch: usize,
    pub steps: Vec<NetworkParams>,
    pub weights: NetworkParams,
}

/// Per-epoch, per-layer norms of the gradient mean and standard deviation over
/// steps, each divided by the layer's weight norm. Biases are not included.
pub fn grad_stats(history: &[EpochGradients]) -> Result<Vec<GradStatRow>, NetError> {
    if history.is_empty() {
        return Err(NetError::EmptyHistory);
    }
    let mut rows = Vec::new();
    for ep in history {
        if ep.steps.is_empty() {
            return Err(NetError::EmptyHistory);
        }
        for s in &ep.steps {
            ep.weights.check_same_arch(s)?;
        }
        let n = ep.steps.len() as f64;
        for (li, layer) in ep.weights.layers.iter().enumerate() {
            let wnorm = l2(&layer.weights);
            if wnorm == 0.0 {
                return Err(NetError::ZeroWeightNorm(layer.name.clone()));
            }
            let len = layer.weights.len();
            let mut mean = vec![0.0; len];
            for s in &ep.steps {
                for (m, g) in mean.iter_mut().zip(&s.layers[li].weights) {
                    *m += g;
                }
            }
            mean.iter_mut().for_each(|m| *m /= n);
            let mut var = vec![0.0; len];
            for s in &ep.steps {
                for ((v, g), m) in var.iter_mut().zip(&s.layers[li].weights).zip(&mean) {
                    *v += (g - m) * (g - m);
                }
            }
            let std: Vec<f64> = var.iter().map(|v| (v / n).sqrt()).collect();
            rows.push(GradStatRow {
                epoch: ep.epoch,
                layer: layer.name.clone(),
                mean_norm: l2(&mean) / wnorm,
                std_norm: l2(&std) / wnorm,
            });
        }
    }
    Ok(rows)
}

/// `epoch,layer,mean_norm,std_norm` with a header line.
pub fn grad_stats_csv(rows: &[GradStatRow]) -> String {
    let mut s = String::from("epoch,layer,mean_norm,std_norm\n");
    for r in rows {
        s.push_str(&format!("{},{},{:e},{:e}\n", r.epoch, r.layer, r.mean_norm, r.std_norm));
    }
    s
}

pub(crate) fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::rel_error;
    use rand::Rng;

    fn random_map(c: usize, h: usize, w: usize, seed: u64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap::from_vec(c, h, w, (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn init_is_deterministic_with_zero_bias() {
        let arch = Arch::desk_backbone(1);
        let a = init_params(&arch, 7).unwrap();
        let b = init_params(&arch, 7).unwrap();
        assert_eq!(a, b);
        assert!(a.layers.iter().all(|l| l.bias.iter().all(|&v| v == 0.0)));
        let c = init_params(&arch, 8).unwrap();
        assert_ne!(a, c);
        assert_eq!(glorot_bound(3, 3), 1.0);
        for l in &a.layers {
            let (fi, fo) = l.spec.fans();
            let bound = glorot_bound(fi, fo);
            assert!(l.weights.iter().all(|w| w.abs() < bound));
        }
    }

    #[test]
    fn zero_input_zero_output() {
        let p = init_params(&Arch::desk_backbone(1), 3).unwrap();
        let (out, _) = forward(&p, &FeatureMap::zeros(1, 16, 16)).unwrap();
        assert_eq!(out.shape(), (32, 2, 2));
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn desk_shape_arithmetic() {
        let p = init_params(&Arch::desk_backbone(1), 3).unwrap();
        let (out, _) = forward(&p, &random_map(1, 8, 8, 1)).unwrap();
        assert_eq!(out.shape(), (32, 1, 1));
        assert_eq!(Arch::desk_backbone(1).output_hw(64, 64), (8, 8));
    }

    #[test]
    fn channel_mismatch_is_reported() {
        let p = init_params(&Arch::desk_backbone(1), 3).unwrap();
        assert!(matches!(
            forward(&p, &FeatureMap::zeros(2, 8, 8)),
            Err(NetError::ChannelMismatch { expected: 1, got: 2, .. })
        ));
    }

    #[test]
    fn positive_regime_is_linear() {
        let arch = Arch {
            layers: vec![(
                "c".into(),
                LayerSpec::Conv {
                    in_channels: 1,
                    out_channels: 2,
                    kernel: 3,
                    relu: true,
                    pool: false,
                },
            )],
        };
        let mut p = init_params(&arch, 1).unwrap();
        p.layers[0].weights.iter_mut().for_each(|w| *w = w.abs());
        let x = random_map(1, 5, 5, 2).map(|v| v.abs() + 0.1);
        let (y1, _) = forward(&p, &x).unwrap();
        let (y2, _) = forward(&p, &x.scaled(2.0)).unwrap();
        for (a, b) in y1.data().iter().zip(y2.data()) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_upstream_zero_gradients() {
        let p = init_params(&Arch::desk_backbone(1), 3).unwrap();
        let (out, cache) = forward(&p, &random_map(1, 8, 8, 4)).unwrap();
        let (g, dx) = backward(&p, &cache, &FeatureMap::zeros(out.channels(), out.height(), out.width())).unwrap();
        assert!(g.blocks().all(|b| b.iter().all(|&v| v == 0.0)));
        assert!(dx.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_by_one_conv_closed_form() {
        let arch = Arch {
            layers: vec![(
                "c".into(),
                LayerSpec::Conv {
                    in_channels: 1,
                    out_channels: 1,
                    kernel: 1,
                    relu: false,
                    pool: false,
                },
            )],
        };
        let p = init_params(&arch, 5).unwrap();
        let x = random_map(1, 4, 3, 6);
        let up = random_map(1, 4, 3, 7);
        let (_, cache) = forward(&p, &x).unwrap();
        let (g, _) = backward(&p, &cache, &up).unwrap();
        let expected: f64 = x.data().iter().zip(up.data()).map(|(a, b)| a * b).sum();
        assert!((g.layers[0].weights[0] - expected).abs() < 1e-12);
        assert!((g.layers[0].bias[0] - up.data().iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn cache_mismatch_detected() {
        let p = init_params(&Arch::desk_backbone(1), 3).unwrap();
        let q = init_params(&Arch::conv_blocks(1, &[4]), 3).unwrap();
        let (_, cache) = forward(&q, &random_map(1, 8, 8, 4)).unwrap();
        assert!(matches!(
            backward(&p, &cache, &FeatureMap::zeros(32, 1, 1)),
            Err(NetError::CacheMismatch)
        ));
    }

    /// Finite-difference check of the backbone on a random 5-channel 6x6 input,
    /// against `L = sum(out * r)` for a fixed random `r`.
    #[test]
    fn backbone_gradients_match_finite_differences() {
        let arch = Arch::conv_blocks(5, &[4, 6]);
        let mut p = init_params(&arch, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for b in p.blocks_mut() {
            b.iter_mut().for_each(|v| *v += rng.gen_range(-0.05..0.05));
        }
        let x = random_map(5, 6, 6, 13);
        let (out, cache) = forward(&p, &x).unwrap();
        let r = random_map(out.channels(), out.height(), out.width(), 14);
        let (g, dx) = backward(&p, &cache, &r).unwrap();
        let loss = |p: &NetworkParams, x: &FeatureMap| -> (f64, Vec<u64>) {
            let (o, c) = forward(p, x).unwrap();
            let mut sig = Vec::new();
            c.switch_signature(&mut sig);
            (o.data().iter().zip(r.data()).map(|(a, b)| a * b).sum(), sig)
        };
        let mut base_sig = Vec::new();
        cache.switch_signature(&mut base_sig);
        let eps = 1e-4;
        let mut checked = 0;
        for i in 0..p.param_count() {
            let v = p.get_flat(i);
            let mut q = p.clone();
            q.set_flat(i, v + eps);
            let (lp, sp) = loss(&q, &x);
            q.set_flat(i, v - eps);
            let (lm, sm) = loss(&q, &x);
            if sp != base_sig || sm != base_sig {
                continue;
            }
            let num = (lp - lm) / (2.0 * eps);
            let err = rel_error(g.get_flat(i), num);
            assert!(err < 1e-4, "param {i}: analytic {} numeric {num} err {err}", g.get_flat(i));
            checked += 1;
        }
        assert!(checked > p.param_count() * 9 / 10, "only {checked} coordinates smooth");
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += eps;
            let mut xm = x.clone();
            xm.data_mut()[i] -= eps;
            let ((lp, sp), (lm, sm)) = (loss(&p, &xp), loss(&p, &xm));
            if sp != base_sig || sm != base_sig {
                continue;
            }
            let num = (lp - lm) / (2.0 * eps);
            assert!(rel_error(dx.data()[i], num) < 1e-4);
        }
    }

    #[test]
    fn dense_gradients_match_finite_differences() {
        let arch = Arch {
            layers: vec![
                ("fc1".into(), LayerSpec::Dense { inputs: 12, outputs: 7, relu: true }),
                ("fc2".into(), LayerSpec::Dense { inputs: 7, outputs: 3, relu: false }),
            ],
        };
        let p = init_params(&arch, 2).unwrap();
        let x = random_map(3, 2, 2, 3);
        let r = random_map(3, 1, 1, 4);
        let (_, cache) = forward(&p, &x).unwrap();
        let (g, _) = backward(&p, &cache, &r).unwrap();
        let eps = 1e-4;
        for i in 0..p.param_count() {
            let mut q = p.clone();
            q.set_flat(i, p.get_flat(i) + eps);
            let lp: f64 = forward(&q, &x).unwrap().0.data().iter().zip(r.data()).map(|(a, b)| a * b).sum();
            q.set_flat(i, p.get_flat(i) - eps);
            let lm: f64 = forward(&q, &x).unwrap().0.data().iter().zip(r.data()).map(|(a, b)| a * b).sum();
            assert!(rel_error(g.get_flat(i), (lp - lm) / (2.0 * eps)) < 1e-4);
        }
    }

    #[test]
    fn averaging_rules() {
        let arch = Arch::conv_blocks(1, &[3]);
        let n = init_params(&arch, 1).unwrap();
        let avg = average_params(&[n.clone(), n.clone(), n.clone()]).unwrap();
        assert_eq!(avg, n);
        let mut neg = n.clone();
        neg.scale(-1.0);
        let z = average_params(&[n.clone(), neg]).unwrap();
        assert!(z.blocks().all(|b| b.iter().all(|&v| v == 0.0)));
        let mut a = n.clone();
        let mut b = n.clone();
        let mut c = n.clone();
        a.layers[0].weights[0] = 0.1;
        b.layers[0].weights[0] = 0.2;
        c.layers[0].weights[0] = 0.6;
        let m = average_params(&[a, b, c]).unwrap();
        assert!((m.layers[0].weights[0] - 0.3).abs() < 1e-15);
        assert!(matches!(average_params(&[]), Err(NetError::EmptyList)));
        let other = init_params(&Arch::conv_blocks(1, &[4]), 1).unwrap();
        assert!(matches!(
            average_params(&[n, other]),
            Err(NetError::ArchitectureMismatch(_))
        ));
    }

    fn single_layer(weights: Vec<f64>) -> NetworkParams {
        let len = weights.len();
        NetworkParams {
            layers: vec![Layer {
                name: "fc".into(),
                spec: LayerSpec::Dense { inputs: len, outputs: 1, relu: false },
                weights,
                bias: vec![0.0],
            }],
        }
    }

    #[test]
    fn grad_stats_reference_cases() {
        let w = single_layer(vec![0.6, 0.8, 0.0]);
        let zero = EpochGradients {
            epoch: 0,
            steps: vec![w.zeros_like(), w.zeros_like()],
            weights: w.clone(),
        };
        let rows = grad_stats(&[zero]).unwrap();
        assert_eq!((rows[0].mean_norm, rows[0].std_norm), (0.0, 0.0));

        let same = EpochGradients {
            epoch: 0,
            steps: vec![w.clone()],
            weights: w.clone(),
        };
        let rows = grad_stats(&[same]).unwrap();
        assert!((rows[0].mean_norm - 1.0).abs() < 1e-15);
        assert_eq!(rows[0].std_norm, 0.0);

        // one-weight layer with ||w|| = 2 and gradients {1, 3} across two steps:
        // mean 2, population std 1
        let w2 = single_layer(vec![2.0]);
        let ep = EpochGradients {
            epoch: 3,
            steps: vec![single_layer(vec![1.0]), single_layer(vec![3.0])],
            weights: w2,
        };
        let rows = grad_stats(&[ep]).unwrap();
        let mean: f64 = (1.0 + 3.0) / 2.0;
        let std = (((1.0 - mean).powi(2) + (3.0 - mean).powi(2)) / 2.0f64).sqrt();
        assert_eq!(rows[0].epoch, 3);
        assert!((rows[0].mean_norm - mean / 2.0).abs() < 1e-15);
        assert!((rows[0].std_norm - std / 2.0).abs() < 1e-15);
    }

    #[test]
    fn grad_stats_guards() {
        let w = single_layer(vec![0.0, 0.0]);
        let ep = EpochGradients {
            epoch: 0,
            steps: vec![w.clone()],
            weights: w,
        };
        assert!(matches!(grad_stats(&[ep]), Err(NetError::ZeroWeightNorm(_))));
        assert!(matches!(grad_stats(&[]), Err(NetError::EmptyHistory)));
    }
}
