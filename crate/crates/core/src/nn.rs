//! Forward/backward kernels for the layer types used by every network in the
//! pipeline: same-padded stride-1 convolution, ReLU, 2x2 max pooling, dense
//! layers and softmax.

use crate::tensor::FeatureMap;

/// Same-padded, stride-1 convolution.
///
/// `weights` are laid out `[out][in][ky][kx]`.
pub fn conv_forward(
    input: &FeatureMap,
    weights: &[f64],
    bias: &[f64],
    out_channels: usize,
    kernel: usize,
) -> FeatureMap {
    let (in_c, h, w) = input.shape();
    debug_assert_eq!(weights.len(), out_channels * in_c * kernel * kernel);
    let r = (kernel / 2) as isize;
    let mut out = FeatureMap::zeros(out_channels, h, w);
    for oc in 0..out_channels {
        let plane = out.plane_mut(oc);
        plane.iter_mut().for_each(|v| *v = bias[oc]);
        for ic in 0..in_c {
            let src = input.plane(ic);
            for ky in 0..kernel {
                let dy = ky as isize - r;
                let (y0, y1) = valid_range(h, dy);
                for kx in 0..kernel {
                    let dx = kx as isize - r;
                    let wv = weights[((oc * in_c + ic) * kernel + ky) * kernel + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (x0, x1) = valid_range(w, dx);
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let dst = &mut plane[y * w + x0..y * w + x1];
                        let s0 = (x0 as isize + dx) as usize;
                        let s = &src[sy * w + s0..sy * w + s0 + (x1 - x0)];
                        for (d, v) in dst.iter_mut().zip(s) {
                            *d += wv * v;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of [`conv_forward`]: `(d weights, d bias, d input)`.
pub fn conv_backward(
    input: &FeatureMap,
    weights: &[f64],
    grad_out: &FeatureMap,
    kernel: usize,
) -> (Vec<f64>, Vec<f64>, FeatureMap) {
    let (in_c, h, w) = input.shape();
    let out_c = grad_out.channels();
    let r = (kernel / 2) as isize;
    let mut dw = vec![0.0; weights.len()];
    let mut db = vec![0.0; out_c];
    let mut dx_map = FeatureMap::zeros(in_c, h, w);
    for oc in 0..out_c {
        let g = grad_out.plane(oc);
        db[oc] = g.iter().sum();
        for ic in 0..in_c {
            let src = input.plane(ic);
            for ky in 0..kernel {
                let dy = ky as isize - r;
                let (y0, y1) = valid_range(h, dy);
                for kx in 0..kernel {
                    let dx = kx as isize - r;
                    let (x0, x1) = valid_range(w, dx);
                    let wi = ((oc * in_c + ic) * kernel + ky) * kernel + kx;
                    let wv = weights[wi];
                    let mut acc = 0.0;
                    let dst = dx_map.plane_mut(ic);
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let s0 = (x0 as isize + dx) as usize;
                        let n = x1 - x0;
                        let grow = &g[y * w + x0..y * w + x1];
                        let srow = &src[sy * w + s0..sy * w + s0 + n];
                        for (gv, sv) in grow.iter().zip(srow) {
                            acc += gv * sv;
                        }
                        let drow = &mut dst[sy * w + s0..sy * w + s0 + n];
                        for (d, gv) in drow.iter_mut().zip(grow) {
                            *d += wv * gv;
                        }
                    }
                    dw[wi] += acc;
                }
            }
        }
    }
    (dw, db, dx_map)
}

/// Output rows `y` for which `y + offset` stays inside `[0, len)`.
#[inline]
fn valid_range(len: usize, offset: isize) -> (usize, usize) {
    let lo = (-offset).max(0) as usize;
    let hi = (len as isize - offset).clamp(0, len as isize) as usize;
    (lo.min(hi), hi)
}

pub fn relu(x: &FeatureMap) -> FeatureMap {
    x.map(|v| v.max(0.0))
}

/// Passes `grad` where the pre-activation was strictly positive.
pub fn relu_backward(pre: &FeatureMap, grad: &FeatureMap) -> FeatureMap {
    let mut out = grad.clone();
    for (g, &p) in out.data_mut().iter_mut().zip(pre.data()) {
        if p <= 0.0 {
            *g = 0.0;
        }
    }
    out
}

/// 2x2 stride-2 max pooling (floor semantics). Returns the pooled map and,
/// per output cell, the flat input index that won (first in scan order on ties).
pub fn maxpool2_forward(x: &FeatureMap) -> (FeatureMap, Vec<usize>) {
    let (c, h, w) = x.shape();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = FeatureMap::zeros(c, oh.max(1), ow.max(1));
    let mut arg = Vec::with_capacity(out.len());
    if oh == 0 || ow == 0 {
        // degenerate input smaller than the window: pool whatever is there
        for ch in 0..c {
            let mut best = x.index(ch, 0, 0);
            for y in 0..h {
                for xx in 0..w {
                    let i = x.index(ch, y, xx);
                    if x.data()[i] > x.data()[best] {
                        best = i;
                    }
                }
            }
            out.set(ch, 0, 0, x.data()[best]);
            arg.push(best);
        }
        return (out, arg);
    }
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = x.index(ch, 2 * oy, 2 * ox);
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = x.index(ch, 2 * oy + dy, 2 * ox + dx);
                    if x.data()[i] > x.data()[best] {
                        best = i;
                    }
                }
                out.set(ch, oy, ox, x.data()[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward(input_shape: (usize, usize, usize), argmax: &[usize], grad: &FeatureMap) -> FeatureMap {
    let (c, h, w) = input_shape;
    let mut out = FeatureMap::zeros(c, h, w);
    for (&i, &g) in argmax.iter().zip(grad.data()) {
        out.data_mut()[i] += g;
    }
    out
}

/// `y = W x + b` with `W` stored row-major `[outputs][inputs]`.
pub fn dense_forward(x: &[f64], weights: &[f64], bias: &[f64]) -> Vec<f64> {
    let n_in = x.len();
    bias.iter()
        .enumerate()
        .map(|(o, &b)| {
            let row = &weights[o * n_in..(o + 1) * n_in];
            b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
        })
        .collect()
}

/// Gradients of [`dense_forward`]: `(d weights, d bias, d input)`.
pub fn dense_backward(x: &[f64], weights: &[f64], grad: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n_in = x.len();
    let mut dw = vec![0.0; weights.len()];
    let mut dx = vec![0.0; n_in];
    for (o, &g) in grad.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let row = &weights[o * n_in..(o + 1) * n_in];
        let drow = &mut dw[o * n_in..(o + 1) * n_in];
        for i in 0..n_in {
            drow[i] = g * x[i];
            dx[i] += g * row[i];
        }
    }
    (dw, grad.to_vec(), dx)
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `-log softmax(logits)[target]`, computed via log-sum-exp.
pub fn cross_entropy(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    lse - logits[target]
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
