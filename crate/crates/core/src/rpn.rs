//! Region proposal machinery: anchors, IoU, the three-way anchor label,
//! proposal selection with greedy NMS, and ROI max pooling.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn;
use crate::tensor::FeatureMap;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RpnError {
    #[error("invalid box ({x1}, {y1}, {x2}, {y2}): need finite x1 < x2 and y1 < y2")]
    InvalidBox { x1: f64, y1: f64, x2: f64, y2: f64 },
    #[error("anchor scales and ratios must be non-empty")]
    EmptyAnchorSet,
    #[error("stride must be at least 1")]
    BadStride,
    #[error("top_k must be at least 1")]
    BadTopK,
    #[error("objectness map has {channels} channels, expected {expected}")]
    ObjectnessShape { channels: usize, expected: usize },
    #[error("{scores} scores for {anchors} anchors")]
    ScoreCount { scores: usize, anchors: usize },
    #[error("ROI lies entirely outside the feature map")]
    RoiOutside,
    #[error("ROI output grid must be at least 1x1")]
    BadPoolSize,
}

/// Axis-aligned box in image pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, RpnError> {
        let ok = [x1, y1, x2, y2].iter().all(|v| v.is_finite()) && x1 < x2 && y1 < y2;
        if !ok {
            return Err(RpnError::InvalidBox { x1, y1, x2, y2 });
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    /// Intersection with `[0, w] x [0, h]`; `None` if nothing is left.
    pub fn clip(&self, w: f64, h: f64) -> Option<BBox> {
        BBox::new(self.x1.max(0.0), self.y1.max(0.0), self.x2.min(w), self.y2.min(h)).ok()
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub bbox: BBox,
    /// Feature cell `(row, col)` the anchor is centred on.
    pub cell: (usize, usize),
    pub scale_index: usize,
    pub ratio_index: usize,
    /// Set when the box extends past the image implied by the map and stride.
    pub crosses_boundary: bool,
}

/// Anchor geometry. Defaults suit 64-128 px images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorConfig {
    pub scales: Vec<f64>,
    pub ratios: Vec<f64>,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            scales: vec![16.0, 32.0, 64.0],
            ratios: vec![0.5, 1.0, 2.0],
        }
    }
}

impl AnchorConfig {
    pub fn per_cell(&self) -> usize {
        self.scales.len() * self.ratios.len()
    }
}

/// `|scales| * |ratios|` anchors per cell, ordered cell-major (row, col), then
/// scale, then ratio. Width is `s * sqrt(r)`, height `s / sqrt(r)`.
pub fn generate_anchors(
    map_h: usize,
    map_w: usize,
    stride: usize,
    scales: &[f64],
    ratios: &[f64],
) -> Result<Vec<Anchor>, RpnError> {
    if scales.is_empty() || ratios.is_empty() {
        return Err(RpnError::EmptyAnchorSet);
    }
    if stride == 0 {
        return Err(RpnError::BadStride);
    }
    let (img_w, img_h) = ((map_w * stride) as f64, (map_h * stride) as f64);
    let s = stride as f64;
    let mut out = Vec::with_capacity(map_h * map_w * scales.len() * ratios.len());
    for cy in 0..map_h {
        for cx in 0..map_w {
            let (ccx, ccy) = ((cx as f64 + 0.5) * s, (cy as f64 + 0.5) * s);
            for (si, &scale) in scales.iter().enumerate() {
                for (ri, &ratio) in ratios.iter().enumerate() {
                    let w = scale * ratio.sqrt();
                    let h = scale / ratio.sqrt();
                    let bbox = BBox::new(ccx - w / 2.0, ccy - h / 2.0, ccx + w / 2.0, ccy + h / 2.0)?;
                    let crosses_boundary = bbox.x1 < 0.0 || bbox.y1 < 0.0 || bbox.x2 > img_w || bbox.y2 > img_h;
                    out.push(Anchor {
                        bbox,
                        cell: (cy, cx),
                        scale_index: si,
                        ratio_index: ri,
                        crosses_boundary,
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Three-way anchor label: positive above 0.7 IoU, negative below 0.3, ignored between.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AnchorLabel {
    Positive,
    Negative,
    Ignore,
}

impl AnchorLabel {
    pub const POSITIVE_IOU: f64 = 0.7;
    pub const NEGATIVE_IOU: f64 = 0.3;

    pub fn value(self) -> i8 {
        match self {
            Self::Positive => 1,
            Self::Negative => -1,
            Self::Ignore => 0,
        }
    }

    pub fn from_iou(m: f64) -> Self {
        if m > Self::POSITIVE_IOU {
            Self::Positive
        } else if m < Self::NEGATIVE_IOU {
            Self::Negative
        } else {
            Self::Ignore
        }
    }
}

/// Best IoU against any ground-truth box (0 with no ground truth).
pub fn max_iou(b: &BBox, gt: &[BBox]) -> f64 {
    gt.iter().map(|g| iou(b, g)).fold(0.0, f64::max)
}

pub fn label_anchor(anchor: &Anchor, gt: &[BBox]) -> AnchorLabel {
    AnchorLabel::from_iou(max_iou(&anchor.bbox, gt))
}

/// Labels every anchor. With `gt_fallback`, each ground-truth box also
/// promotes its best-overlapping anchor (first on ties) to positive, so that
/// every object has at least one positive anchor.
pub fn label_anchors(anchors: &[Anchor], gt: &[BBox], gt_fallback: bool) -> Vec<AnchorLabel> {
    let mut labels: Vec<AnchorLabel> = anchors.iter().map(|a| label_anchor(a, gt)).collect();
    if gt_fallback {
        for g in gt {
            let mut best: Option<(usize, f64)> = None;
            for (i, a) in anchors.iter().enumerate() {
                let v = iou(&a.bbox, g);
                if v > 0.0 && best.map_or(true, |(_, b)| v > b) {
                    best = Some((i, v));
                }
            }
            if let Some((i, _)) = best {
                labels[i] = AnchorLabel::Positive;
            }
        }
    }
    labels
}

/// A proposal: box (clipped to the image) and objectness score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Roi {
    pub bbox: BBox,
    pub score: f64,
    pub anchor_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProposalConfig {
    pub top_k: usize,
    pub nms_iou: f64,
    /// Anchors scoring below this are not proposed.
    pub min_score: f64,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self {
            top_k: 32,
            nms_iou: 0.7,
            min_score: 0.0,
        }
    }
}

/// Object probability per anchor from a `2A x H x W` logit map laid out as
/// `(background, object)` channel pairs per anchor.
pub fn objectness_scores(logits: &FeatureMap, per_cell: usize) -> Result<Vec<f64>, RpnError> {
    let (c, h, w) = logits.shape();
    if c != 2 * per_cell {
        return Err(RpnError::ObjectnessShape {
            channels: c,
            expected: 2 * per_cell,
        });
    }
    let mut out = Vec::with_capacity(h * w * per_cell);
    for y in 0..h {
        for x in 0..w {
            for a in 0..per_cell {
                let p = nn::softmax(&[logits.get(2 * a, y, x), logits.get(2 * a + 1, y, x)]);
                out.push(p[1]);
            }
        }
    }
    Ok(out)
}

pub fn propose_rois(
    objectness: &FeatureMap,
    anchors: &[Anchor],
    cfg: &ProposalConfig,
    image_w: f64,
    image_h: f64,
) -> Result<Vec<Roi>, RpnError> {
    let (_, h, w) = objectness.shape();
    let per_cell = if h * w == 0 { 0 } else { anchors.len() / (h * w) };
    let scores = objectness_scores(objectness, per_cell)?;
    propose_from_scores(&scores, anchors, cfg, image_w, image_h)
}

/// Clip, sort by descending score (stable), greedy NMS, keep `top_k`.
pub fn propose_from_scores(
    scores: &[f64],
    anchors: &[Anchor],
    cfg: &ProposalConfig,
    image_w: f64,
    image_h: f64,
) -> Result<Vec<Roi>, RpnError> {
    if cfg.top_k < 1 {
        return Err(RpnError::BadTopK);
    }
    if scores.len() != anchors.len() {
        return Err(RpnError::ScoreCount {
            scores: scores.len(),
            anchors: anchors.len(),
        });
    }
    let mut cands: Vec<Roi> = anchors
        .iter()
        .zip(scores)
        .enumerate()
        .filter(|(_, (_, &s))| s >= cfg.min_score)
        .filter_map(|(i, (a, &s))| {
            a.bbox.clip(image_w, image_h).map(|bbox| Roi {
                bbox,
                score: s,
                anchor_index: i,
            })
        })
        .collect();
    cands.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut keep: Vec<Roi> = Vec::new();
    for c in cands {
        if keep.len() == cfg.top_k {
            break;
        }
        if keep.iter().all(|k| iou(&k.bbox, &c.bbox) <= cfg.nms_iou) {
            keep.push(c);
        }
    }
    Ok(keep)
}

/// Argmax bookkeeping from [`roi_pool`] for the backward pass.
#[derive(Debug, Clone)]
pub struct RoiPoolTrace {
    input_shape: (usize, usize, usize),
    /// Flat input index per output element, `None` for empty bins.
    argmax: Vec<Option<usize>>,
}

impl RoiPoolTrace {
    pub fn backward(&self, grad: &FeatureMap) -> FeatureMap {
        let (c, h, w) = self.input_shape;
        let mut out = FeatureMap::zeros(c, h, w);
        for (a, &g) in self.argmax.iter().zip(grad.data()) {
            if let Some(i) = a {
                out.data_mut()[*i] += g;
            }
        }
        out
    }

    pub fn argmax(&self) -> &[Option<usize>] {
        &self.argmax
    }
}

/// Feature-grid extent `[start, end)` of an image interval.
fn grid_span(lo: f64, hi: f64, stride: f64, len: usize) -> (usize, usize) {
    let s = (lo / stride).floor().max(0.0).min(len as f64) as usize;
    let e = (hi / stride).ceil().max(0.0).min(len as f64) as usize;
    (s, e)
}

/// Bin `i` of `n` over `[start, start + len)` with proportional rounding.
#[inline]
fn bin(i: usize, n: usize, start: usize, len: usize) -> (usize, usize) {
    (start + i * len / n, start + ((i + 1) * len).div_ceil(n))
}

/// Max-pools the part of `fmap` under `roi` (image pixels) into an
/// `out_h x out_w` grid.
pub fn roi_pool(
    fmap: &FeatureMap,
    roi: &BBox,
    out_h: usize,
    out_w: usize,
    stride: usize,
) -> Result<(FeatureMap, RoiPoolTrace), RpnError> {
    if out_h == 0 || out_w == 0 {
        return Err(RpnError::BadPoolSize);
    }
    if stride == 0 {
        return Err(RpnError::BadStride);
    }
    let (c, h, w) = fmap.shape();
    let (ys, ye) = grid_span(roi.y1, roi.y2, stride as f64, h);
    let (xs, xe) = grid_span(roi.x1, roi.x2, stride as f64, w);
    if ys >= ye || xs >= xe {
        return Err(RpnError::RoiOutside);
    }
    let (lh, lw) = (ye - ys, xe - xs);
    let mut out = FeatureMap::zeros(c, out_h, out_w);
    let mut argmax = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        for by in 0..out_h {
            let (y0, y1) = bin(by, out_h, ys, lh);
            for bx in 0..out_w {
                let (x0, x1) = bin(bx, out_w, xs, lw);
                let mut best: Option<usize> = None;
                for y in y0..y1 {
                    for x in x0..x1 {
                        let i = fmap.index(ch, y, x);
                        if best.map_or(true, |b| fmap.data()[i] > fmap.data()[b]) {
                            best = Some(i);
                        }
                    }
                }
                out.set(ch, by, bx, best.map_or(0.0, |b| fmap.data()[b]));
                argmax.push(best);
            }
        }
    }
    Ok((
        out,
        RoiPoolTrace {
            input_shape: (c, h, w),
            argmax,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn anchor(bbox: BBox) -> Anchor {
        Anchor {
            bbox,
            cell: (0, 0),
            scale_index: 0,
            ratio_index: 0,
            crosses_boundary: false,
        }
    }

    #[test]
    fn anchor_counts_and_geometry() {
        let one = generate_anchors(1, 1, 16, &[32.0], &[1.0]).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].bbox.width(), 32.0);
        assert_eq!(one[0].bbox.height(), 32.0);
        let many = generate_anchors(2, 2, 16, &[16.0, 32.0, 64.0], &[0.5, 1.0, 2.0]).unwrap();
        assert_eq!(many.len(), 36);
        let near = |a: (f64, f64), b: (f64, f64)| (a.0 - b.0).abs() < 1e-12 && (a.1 - b.1).abs() < 1e-12;
        assert!(near(many[0].bbox.center(), (8.0, 8.0)));
        // all anchors of a cell share the centre
        for a in many.iter().filter(|a| a.cell == (1, 0)) {
            assert!(near(a.bbox.center(), (8.0, 24.0)));
        }
        let r2 = many.iter().find(|a| a.scale_index == 1 && a.ratio_index == 2).unwrap();
        assert!((r2.bbox.width() / r2.bbox.height() - 2.0).abs() < 1e-12);
        assert!(many.iter().any(|a| a.crosses_boundary));
        assert!(matches!(generate_anchors(1, 1, 16, &[], &[1.0]), Err(RpnError::EmptyAnchorSet)));
        assert!(matches!(generate_anchors(1, 1, 16, &[8.0], &[]), Err(RpnError::EmptyAnchorSet)));
    }

    #[test]
    fn iou_examples() {
        let a = b(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &b(20.0, 20.0, 30.0, 30.0)), 0.0);
        assert!((iou(&a, &b(5.0, 0.0, 15.0, 10.0)) - 1.0 / 3.0).abs() < 1e-15);
        // touching edges do not overlap
        assert_eq!(iou(&a, &b(10.0, 0.0, 20.0, 10.0)), 0.0);
    }

    #[test]
    fn label_branches() {
        assert_eq!(AnchorLabel::from_iou(0.8), AnchorLabel::Positive);
        assert_eq!(AnchorLabel::from_iou(0.2), AnchorLabel::Negative);
        assert_eq!(AnchorLabel::from_iou(0.5), AnchorLabel::Ignore);
        assert_eq!(AnchorLabel::from_iou(0.7), AnchorLabel::Ignore);
        assert_eq!(AnchorLabel::from_iou(0.3), AnchorLabel::Ignore);
        assert_eq!(label_anchor(&anchor(b(0.0, 0.0, 4.0, 4.0)), &[]), AnchorLabel::Negative);
        assert_eq!(AnchorLabel::Positive.value(), 1);
        assert_eq!(AnchorLabel::Negative.value(), -1);
        assert_eq!(AnchorLabel::Ignore.value(), 0);
    }

    #[test]
    fn fallback_promotes_best_anchor() {
        let anchors = vec![anchor(b(0.0, 0.0, 10.0, 10.0)), anchor(b(2.0, 0.0, 12.0, 10.0))];
        let gt = [b(5.0, 0.0, 15.0, 10.0)];
        let plain = label_anchors(&anchors, &gt, false);
        assert!(plain.iter().all(|&l| l != AnchorLabel::Positive));
        let fb = label_anchors(&anchors, &gt, true);
        assert_eq!(fb[1], AnchorLabel::Positive);
        assert_ne!(fb[0], AnchorLabel::Positive);
    }

    #[test]
    fn proposal_examples() {
        let cfg = ProposalConfig { top_k: 8, nms_iou: 0.5, min_score: 0.0 };
        let one = [anchor(b(1.0, 1.0, 5.0, 5.0))];
        assert_eq!(propose_from_scores(&[0.01], &one, &cfg, 10.0, 10.0).unwrap().len(), 1);

        let twins = [anchor(b(1.0, 1.0, 5.0, 5.0)), anchor(b(1.0, 1.0, 5.0, 5.0))];
        let r = propose_from_scores(&[0.8, 0.9], &twins, &cfg, 10.0, 10.0).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].score, 0.9);

        let apart = [
            anchor(b(0.0, 0.0, 2.0, 2.0)),
            anchor(b(3.0, 3.0, 5.0, 5.0)),
            anchor(b(6.0, 6.0, 8.0, 8.0)),
        ];
        let r = propose_from_scores(&[0.2, 0.7, 0.5], &apart, &cfg, 10.0, 10.0).unwrap();
        assert_eq!(r.iter().map(|r| r.anchor_index).collect::<Vec<_>>(), vec![1, 2, 0]);

        let bad = ProposalConfig { top_k: 0, ..cfg };
        assert!(matches!(propose_from_scores(&[0.1], &one, &bad, 10.0, 10.0), Err(RpnError::BadTopK)));
    }

    #[test]
    fn proposals_are_clipped() {
        let cfg = ProposalConfig::default();
        let a = [anchor(b(-4.0, -4.0, 6.0, 6.0))];
        let r = propose_from_scores(&[0.5], &a, &cfg, 5.0, 5.0).unwrap();
        assert_eq!(r[0].bbox, b(0.0, 0.0, 5.0, 5.0));
    }

    #[test]
    fn objectness_layout() {
        let mut logits = FeatureMap::zeros(4, 1, 2);
        logits.set(1, 0, 1, 10.0); // anchor 0 at cell (0,1) confidently object
        let s = objectness_scores(&logits, 2).unwrap();
        assert_eq!(s.len(), 4);
        assert_eq!(s[0], 0.5);
        assert!(s[2] > 0.99);
        assert!(objectness_scores(&logits, 3).is_err());
    }

    #[test]
    fn roi_pool_examples() {
        let m = FeatureMap::from_vec(1, 4, 4, (1..=16).map(f64::from).collect()).unwrap();
        let whole = b(0.0, 0.0, 4.0, 4.0);
        let (p, _) = roi_pool(&m, &whole, 2, 2, 1).unwrap();
        assert_eq!(p.data(), &[6.0, 8.0, 14.0, 16.0]);
        let (g, _) = roi_pool(&m, &whole, 1, 1, 1).unwrap();
        assert_eq!(g.data(), &[16.0]);
        let c = FeatureMap::filled(2, 3, 3, 0.25);
        let (p, _) = roi_pool(&c, &b(0.0, 0.0, 3.0, 3.0), 4, 4, 1).unwrap();
        assert!(p.data().iter().all(|&v| v == 0.25));
        assert!(matches!(
            roi_pool(&m, &b(40.0, 40.0, 50.0, 50.0), 2, 2, 1),
            Err(RpnError::RoiOutside)
        ));
    }

    #[test]
    fn roi_pool_maps_with_stride() {
        let m = FeatureMap::from_vec(1, 4, 4, (1..=16).map(f64::from).collect()).unwrap();
        // pixels [9, 23) with stride 8 -> cells [1, 3)
        let (p, _) = roi_pool(&m, &b(9.0, 9.0, 23.0, 23.0), 1, 1, 8).unwrap();
        assert_eq!(p.data(), &[11.0]);
    }

    #[test]
    fn roi_pool_backward_scatters_to_winners() {
        let m = FeatureMap::from_vec(1, 2, 2, vec![1.0, 4.0, 3.0, 2.0]).unwrap();
        let (_, t) = roi_pool(&m, &b(0.0, 0.0, 2.0, 2.0), 1, 1, 1).unwrap();
        let g = t.backward(&FeatureMap::filled(1, 1, 1, 2.5));
        assert_eq!(g.data(), &[0.0, 2.5, 0.0, 0.0]);
    }
}
