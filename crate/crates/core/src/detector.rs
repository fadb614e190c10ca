//! The full multi-column detector: modality columns -> fusion -> objectness
//! layer -> ROI pooling -> classification head, with its training loss and
//! exact gradient.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{self, Arch, ForwardCache, LayerSpec, NetError, NetworkParams};
use crate::fusion::{self, FusionError, FusionMode, FusionTrace, Modality};
use crate::heads::{self, HeadError, HeadParams, HeadShape, HeadVariant};
use crate::imaging::{self, CannyParams, EdgeMethod, HornSchunckParams, Image, ImageError};
use crate::nn;
use crate::rpn::{self, AnchorConfig, AnchorLabel, BBox, ProposalConfig, RpnError};
use crate::tensor::FeatureMap;

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Rpn(#[from] RpnError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("sample has {got} inputs, fusion mode {mode} needs {expected}")]
    InputCount {
        mode: FusionMode,
        expected: usize,
        got: usize,
    },
    #[error("class index {class} out of range for {classes} classes")]
    ClassOutOfRange { class: usize, classes: usize },
    #[error("model parameters do not match the configuration: {0}")]
    ParamMismatch(String),
}

/// How ROIs for the head are drawn from proposals during training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoiSampling {
    /// Proposals at or above this IoU with a ground-truth box take its class.
    pub fg_iou: f64,
    /// Proposals below this IoU with every ground-truth box are background.
    pub bg_iou: f64,
    pub max_fg: usize,
    pub max_bg: usize,
}

impl Default for RoiSampling {
    fn default() -> Self {
        Self {
            fg_iou: 0.5,
            bg_iou: 0.3,
            max_fg: 4,
            max_bg: 2,
        }
    }
}

/// Everything needed to rebuild a detector besides its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub fusion: FusionMode,
    pub head: HeadVariant,
    /// Object class names; head index `i + 1` is `classes[i]`, 0 is background.
    pub classes: Vec<String>,
    pub backbone_widths: Vec<usize>,
    pub anchors: AnchorConfig,
    pub pool: [usize; 2],
    pub hidden: [usize; 2],
    pub canny: CannyParams,
    pub flow: HornSchunckParams,
    pub scales: [f64; 2],
    pub gt_fallback: bool,
    pub roi_sampling: RoiSampling,
    pub proposals: ProposalConfig,
}

impl ModelConfig {
    pub fn new(fusion: FusionMode, head: HeadVariant, classes: Vec<String>) -> Self {
        Self {
            fusion,
            head,
            classes,
            backbone_widths: vec![8, 16, 32],
            anchors: AnchorConfig::default(),
            pool: [4, 4],
            hidden: [128, 64],
            canny: CannyParams::default(),
            flow: HornSchunckParams::default(),
            scales: [3.0, 5.0],
            gt_fallback: true,
            roi_sampling: RoiSampling::default(),
            proposals: ProposalConfig::default(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn column_arch(&self) -> Arch {
        Arch::conv_blocks(1, &self.backbone_widths)
    }

    pub fn feature_channels(&self) -> usize {
        *self.backbone_widths.last().unwrap_or(&1)
    }

    /// Image pixels per feature cell.
    pub fn stride(&self) -> usize {
        1 << self.backbone_widths.len()
    }

    pub fn rpn_arch(&self) -> Arch {
        Arch {
            layers: vec![(
                "obj".to_string(),
                LayerSpec::Conv {
                    in_channels: self.feature_channels(),
                    out_channels: 2 * self.anchors.per_cell(),
                    kernel: 3,
                    relu: false,
                    pool: false,
                },
            )],
        }
    }

    pub fn head_shape(&self) -> HeadShape {
        HeadShape {
            variant: self.head,
            channels: self.feature_channels(),
            pool_h: self.pool[0],
            pool_w: self.pool[1],
            hidden: self.hidden,
            classes: self.num_classes(),
        }
    }

    pub fn class_name(&self, head_index: usize) -> &str {
        if head_index == 0 {
            "background"
        } else {
            &self.classes[head_index - 1]
        }
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }
}

/// All trainable parameters: one backbone per modality column, the
/// objectness layer and the head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorParams {
    pub columns: Vec<NetworkParams>,
    pub rpn: NetworkParams,
    pub head: HeadParams,
}

impl DetectorParams {
    /// Columns share the architecture but are seeded independently.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self, DetectorError> {
        let arch = cfg.column_arch();
        let columns = (0..cfg.fusion.modalities().len())
            .map(|k| backbone::init_params(&arch, derive_seed(seed, k as u64)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            columns,
            rpn: backbone::init_params(&cfg.rpn_arch(), derive_seed(seed, 100))?,
            head: HeadParams::init(cfg.head_shape(), derive_seed(seed, 200))?,
        })
    }

    pub fn nets(&self) -> impl Iterator<Item = &NetworkParams> {
        self.columns.iter().chain([&self.rpn, &self.head.net])
    }

    pub fn nets_mut(&mut self) -> impl Iterator<Item = &mut NetworkParams> {
        self.columns.iter_mut().chain([&mut self.rpn, &mut self.head.net])
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            columns: self.columns.iter().map(NetworkParams::zeros_like).collect(),
            rpn: self.rpn.zeros_like(),
            head: HeadParams {
                shape: self.head.shape,
                net: self.head.net.zeros_like(),
            },
        }
    }

    pub fn check_matches(&self, cfg: &ModelConfig) -> Result<(), DetectorError> {
        let n = cfg.fusion.modalities().len();
        if self.columns.len() != n {
            return Err(DetectorError::ParamMismatch(format!(
                "{} columns for fusion {} (needs {n})",
                self.columns.len(),
                cfg.fusion
            )));
        }
        let col = cfg.column_arch();
        if self.columns.iter().any(|c| c.arch() != col) {
            return Err(DetectorError::ParamMismatch("column architecture".into()));
        }
        if self.rpn.arch() != cfg.rpn_arch() {
            return Err(DetectorError::ParamMismatch("objectness layer".into()));
        }
        if self.head.shape != cfg.head_shape() || self.head.net.arch() != cfg.head_shape().arch() {
            return Err(DetectorError::ParamMismatch("head".into()));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.nets().map(NetworkParams::param_count).sum()
    }

    pub fn add_scaled(&mut self, other: &DetectorParams, alpha: f64) {
        for (a, b) in self.nets_mut().zip(other.nets()) {
            a.add_scaled(b, alpha);
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for n in self.nets_mut() {
            n.scale(alpha);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.nets().all(NetworkParams::is_finite)
    }

    /// Every layer of every sub-network as one network with
    /// `<part>/<layer>` names; used for diagnostics.
    pub fn combined(&self, cfg: &ModelConfig) -> NetworkParams {
        let mut layers = Vec::new();
        for (m, c) in cfg.fusion.modalities().iter().zip(&self.columns) {
            for l in &c.layers {
                let mut l = l.clone();
                l.name = format!("{}/{}", m.name(), l.name);
                layers.push(l);
            }
        }
        for (prefix, net) in [("rpn", &self.rpn), ("head", &self.head.net)] {
            for l in &net.layers {
                let mut l = l.clone();
                l.name = format!("{prefix}/{}", l.name);
                layers.push(l);
            }
        }
        NetworkParams { layers }
    }

    /// Parameter blocks in declared order, with labels `<net>.<layer>.<weights|bias>`.
    pub fn labelled_blocks(&self, cfg: &ModelConfig) -> Vec<(String, &[f64])> {
        self.combined_names(cfg)
            .into_iter()
            .zip(self.nets().flat_map(|n| n.blocks()))
            .collect()
    }

    fn combined_names(&self, cfg: &ModelConfig) -> Vec<String> {
        let mut names = Vec::new();
        for l in self.combined(cfg).layers {
            names.push(format!("{}.weights", l.name));
            names.push(format!("{}.bias", l.name));
        }
        names
    }

    pub fn get_flat(&self, mut i: usize) -> f64 {
        for n in self.nets() {
            let c = n.param_count();
            if i < c {
                return n.get_flat(i);
            }
            i -= c;
        }
        panic!("parameter index out of range");
    }

    pub fn set_flat(&mut self, mut i: usize, v: f64) {
        for n in self.nets_mut() {
            let c = n.param_count();
            if i < c {
                n.set_flat(i, v);
                return;
            }
            i -= c;
        }
        panic!("parameter index out of range");
    }
}

/// Elementwise mean of detectors with identical architectures.
pub fn average_detectors(list: &[DetectorParams]) -> Result<DetectorParams, DetectorError> {
    let first = list.first().ok_or(NetError::EmptyList)?;
    let columns = (0..first.columns.len())
        .map(|k| {
            let nets: Vec<NetworkParams> = list.iter().map(|d| d.columns.get(k).cloned()).collect::<Option<_>>()
                .ok_or_else(|| NetError::ArchitectureMismatch("column count".into()))?;
            backbone::average_params(&nets)
        })
        .collect::<Result<Vec<_>, _>>()?;
    if list.iter().any(|d| d.columns.len() != first.columns.len() || d.head.shape != first.head.shape) {
        return Err(NetError::ArchitectureMismatch("detector layout".into()).into());
    }
    let rpn = backbone::average_params(&list.iter().map(|d| d.rpn.clone()).collect::<Vec<_>>())?;
    let head = backbone::average_params(&list.iter().map(|d| d.head.net.clone()).collect::<Vec<_>>())?;
    Ok(DetectorParams {
        columns,
        rpn,
        head: HeadParams {
            shape: first.head.shape,
            net: head,
        },
    })
}

pub(crate) fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A model: configuration plus trained parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub params: DetectorParams,
}

/// Ground-truth object; `label` indexes [`ModelConfig::classes`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtObject {
    pub bbox: BBox,
    pub label: usize,
}

/// Precomputed column inputs and annotations for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub inputs: Vec<FeatureMap>,
    pub objects: Vec<GtObject>,
    pub height: usize,
    pub width: usize,
}

/// Single-channel modality image for one column.
pub fn modality_image(
    gray: &Image,
    prev: Option<&Image>,
    modality: Modality,
    cfg: &ModelConfig,
) -> Result<Image, ImageError> {
    Ok(match modality {
        Modality::Intensity => gray.clone(),
        Modality::Canny => imaging::edge_detect_with(gray, EdgeMethod::Canny, &cfg.canny),
        Modality::Sobel => imaging::edge_detect_with(gray, EdgeMethod::Sobel, &cfg.canny),
        Modality::Prewitt => imaging::edge_detect_with(gray, EdgeMethod::Prewitt, &cfg.canny),
        Modality::Gauss3 => imaging::gaussian_scale(gray, cfg.scales[0])?,
        Modality::Gauss5 => imaging::gaussian_scale(gray, cfg.scales[1])?,
        Modality::FlowOrientation => {
            // still images get a synthetic diagonal one-pixel motion
            let (a, b) = match prev {
                Some(p) => (imaging::to_grayscale(p), gray.clone()),
                None => (gray.clone(), imaging::diagonal_shift(gray)),
            };
            let flow = imaging::optical_flow_with(&a, &b, &cfg.flow)?;
            imaging::flow_orientation(&flow)
        }
    })
}

/// Builds the column inputs for `img` in fusion order.
pub fn prepare_inputs(img: &Image, prev: Option<&Image>, cfg: &ModelConfig) -> Result<Vec<FeatureMap>, ImageError> {
    let gray = imaging::to_grayscale(img);
    let (h, w) = gray.dims();
    cfg.fusion
        .modalities()
        .iter()
        .map(|&m| {
            let im = modality_image(&gray, prev, m, cfg)?;
            Ok(FeatureMap::from_vec(1, h, w, im.data().to_vec()).expect("image dims"))
        })
        .collect()
}

pub fn prepare_sample(img: &Image, objects: Vec<GtObject>, cfg: &ModelConfig) -> Result<Sample, DetectorError> {
    for o in &objects {
        if o.label >= cfg.num_classes() {
            return Err(DetectorError::ClassOutOfRange {
                class: o.label,
                classes: cfg.num_classes(),
            });
        }
    }
    Ok(Sample {
        inputs: prepare_inputs(img, None, cfg)?,
        objects,
        height: img.height(),
        width: img.width(),
    })
}

/// Shared trunk of one pass: columns, fusion and objectness logits.
pub struct Trunk {
    pub column_out: Vec<FeatureMap>,
    column_cache: Vec<ForwardCache>,
    pub fused: FeatureMap,
    trace: FusionTrace,
    pub logits: FeatureMap,
    rpn_cache: ForwardCache,
}

impl Trunk {
    pub fn switch_signature(&self, out: &mut Vec<u64>) {
        for c in &self.column_cache {
            c.switch_signature(out);
        }
        out.extend(self.trace.route().iter().map(|&r| u64::from(r)));
        self.rpn_cache.switch_signature(out);
    }
}

pub fn run_trunk(params: &DetectorParams, cfg: &ModelConfig, inputs: &[FeatureMap]) -> Result<Trunk, DetectorError> {
    let expected = cfg.fusion.modalities().len();
    if inputs.len() != expected || params.columns.len() != expected {
        return Err(DetectorError::InputCount {
            mode: cfg.fusion,
            expected,
            got: inputs.len(),
        });
    }
    let mut column_out = Vec::with_capacity(expected);
    let mut column_cache = Vec::with_capacity(expected);
    for (p, x) in params.columns.iter().zip(inputs) {
        let (o, c) = backbone::forward(p, x)?;
        column_out.push(o);
        column_cache.push(c);
    }
    let (fused, trace) = fusion::fuse(cfg.fusion, &column_out)?;
    let (logits, rpn_cache) = backbone::forward(&params.rpn, &fused)?;
    Ok(Trunk {
        column_out,
        column_cache,
        fused,
        trace,
        logits,
        rpn_cache,
    })
}

pub fn anchors_for(cfg: &ModelConfig, fused: &FeatureMap) -> Result<Vec<rpn::Anchor>, RpnError> {
    rpn::generate_anchors(
        fused.height(),
        fused.width(),
        cfg.stride(),
        &cfg.anchors.scales,
        &cfg.anchors.ratios,
    )
}

/// An ROI fed to the head during training; `target` is a head index (0 = background).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingRoi {
    pub bbox: BBox,
    pub target: usize,
}

/// Ground-truth boxes plus proposals labelled by IoU: at least `fg_iou`
/// takes the overlapping object's class, below `bg_iou` is background,
/// anything between is skipped.
pub fn select_training_rois(
    cfg: &ModelConfig,
    scores: &[f64],
    anchors: &[rpn::Anchor],
    sample: &Sample,
) -> Result<Vec<TrainingRoi>, RpnError> {
    let mut rois: Vec<TrainingRoi> = sample
        .objects
        .iter()
        .map(|o| TrainingRoi {
            bbox: o.bbox,
            target: o.label + 1,
        })
        .collect();
    let props = rpn::propose_from_scores(scores, anchors, &cfg.proposals, sample.width as f64, sample.height as f64)?;
    let s = cfg.roi_sampling;
    let (mut fg, mut bg) = (0, 0);
    for p in props {
        let mut best = (0.0, None);
        for o in &sample.objects {
            let v = rpn::iou(&p.bbox, &o.bbox);
            if v > best.0 {
                best = (v, Some(o.label));
            }
        }
        match best {
            (m, Some(label)) if m >= s.fg_iou && fg < s.max_fg => {
                rois.push(TrainingRoi {
                    bbox: p.bbox,
                    target: label + 1,
                });
                fg += 1;
            }
            (m, _) if m < s.bg_iou && bg < s.max_bg => {
                rois.push(TrainingRoi {
                    bbox: p.bbox,
                    target: 0,
                });
                bg += 1;
            }
            _ => {}
        }
    }
    Ok(rois)
}

/// Loss terms, optional gradient and bookkeeping of one image.
#[derive(Debug, Clone)]
pub struct StepResult {
    pub loss: f64,
    pub rpn_loss: f64,
    pub head_loss: f64,
    pub grads: Option<DetectorParams>,
    /// Ground-truth ROIs whose head argmax equals their class.
    pub gt_correct: usize,
    pub gt_total: usize,
    pub signature: Vec<u64>,
}

/// Objectness cross-entropy over anchors labelled +1/-1 (ignored anchors
/// excluded) plus head cross-entropy averaged over `rois`.
pub fn evaluate(
    params: &DetectorParams,
    cfg: &ModelConfig,
    sample: &Sample,
    rois: &[TrainingRoi],
    want_grad: bool,
) -> Result<StepResult, DetectorError> {
    let trunk = run_trunk(params, cfg, &sample.inputs)?;
    let anchors = anchors_for(cfg, &trunk.fused)?;
    let gt: Vec<BBox> = sample.objects.iter().map(|o| o.bbox).collect();
    let labels = rpn::label_anchors(&anchors, &gt, cfg.gt_fallback);
    let mut signature = Vec::new();
    trunk.switch_signature(&mut signature);

    // objectness loss
    let per_cell = cfg.anchors.per_cell();
    let (_, fh, fw) = trunk.logits.shape();
    let mut dlogits = FeatureMap::zeros(2 * per_cell, fh, fw);
    let pos = labels.iter().filter(|l| **l == AnchorLabel::Positive).count();
    let neg = labels.iter().filter(|l| **l == AnchorLabel::Negative).count();
    let mut rpn_loss = 0.0;
    if pos + neg > 0 {
        let inv = 1.0 / (pos + neg) as f64;
        for (i, label) in labels.iter().enumerate() {
            let target = match label {
                AnchorLabel::Positive => 1,
                AnchorLabel::Negative => 0,
                AnchorLabel::Ignore => continue,
            };
            let cell = i / per_cell;
            let a = i % per_cell;
            let (y, x) = (cell / fw, cell % fw);
            let l = [trunk.logits.get(2 * a, y, x), trunk.logits.get(2 * a + 1, y, x)];
            rpn_loss += nn::cross_entropy(&l, target) * inv;
            let p = nn::softmax(&l);
            for k in 0..2 {
                let g = (p[k] - if k == target { 1.0 } else { 0.0 }) * inv;
                dlogits.set(2 * a + k, y, x, g);
            }
        }
    }

    // head loss
    let stride = cfg.stride();
    let [ph, pw] = cfg.pool;
    let mut dfused = FeatureMap::zeros(trunk.fused.channels(), fh, fw);
    let mut head_grads = params.head.net.zeros_like();
    let mut head_loss = 0.0;
    let mut gt_correct = 0;
    let n_gt = sample.objects.len();
    if !rois.is_empty() {
        let inv = 1.0 / rois.len() as f64;
        for (ri, roi) in rois.iter().enumerate() {
            if roi.target > cfg.num_classes() {
                return Err(DetectorError::ClassOutOfRange {
                    class: roi.target,
                    classes: cfg.num_classes() + 1,
                });
            }
            let (pooled, ptrace) = rpn::roi_pool(&trunk.fused, &roi.bbox, ph, pw, stride)?;
            let out = heads::head_forward(&params.head, &pooled)?;
            out.cache.switch_signature(&mut signature);
            signature.extend(ptrace.argmax().iter().map(|a| a.map_or(u64::MAX, |v| v as u64)));
            if ri < n_gt && nn::argmax(&out.probs) == roi.target {
                gt_correct += 1;
            }
            if want_grad {
                let (loss, g, dpooled) = heads::head_loss_backward(&params.head, &out, roi.target)?;
                head_loss += loss * inv;
                head_grads.add_scaled(&g, inv);
                dfused.add_assign(&ptrace.backward(&dpooled.scaled(inv))).expect("fused shape");
            } else {
                head_loss += nn::cross_entropy(&out.logits, roi.target) * inv;
            }
        }
    }

    let grads = if want_grad {
        let (rpn_grads, dfused_rpn) = backbone::backward(&params.rpn, &trunk.rpn_cache, &dlogits)?;
        dfused.add_assign(&dfused_rpn).expect("fused shape");
        let col_up = trunk.trace.backward(&dfused);
        let columns = params
            .columns
            .iter()
            .zip(&trunk.column_cache)
            .zip(&col_up)
            .map(|((p, c), g)| backbone::backward(p, c, g).map(|r| r.0))
            .collect::<Result<Vec<_>, _>>()?;
        Some(DetectorParams {
            columns,
            rpn: rpn_grads,
            head: HeadParams {
                shape: params.head.shape,
                net: head_grads,
            },
        })
    } else {
        None
    };

    Ok(StepResult {
        loss: rpn_loss + head_loss,
        rpn_loss,
        head_loss,
        grads,
        gt_correct,
        gt_total: n_gt,
        signature,
    })
}

/// One training step's view of an image: pick ROIs from the current
/// proposals, then evaluate loss and gradient.
pub fn training_step(params: &DetectorParams, cfg: &ModelConfig, sample: &Sample) -> Result<StepResult, DetectorError> {
    let rois = training_rois(params, cfg, sample)?;
    evaluate(params, cfg, sample, &rois, true)
}

pub fn training_rois(params: &DetectorParams, cfg: &ModelConfig, sample: &Sample) -> Result<Vec<TrainingRoi>, DetectorError> {
    let trunk = run_trunk(params, cfg, &sample.inputs)?;
    let anchors = anchors_for(cfg, &trunk.fused)?;
    let scores = rpn::objectness_scores(&trunk.logits, cfg.anchors.per_cell())?;
    Ok(select_training_rois(cfg, &scores, &anchors, sample)?)
}

/// Head class probabilities for given boxes on a prepared input.
pub fn classify_boxes(
    params: &DetectorParams,
    cfg: &ModelConfig,
    inputs: &[FeatureMap],
    boxes: &[BBox],
) -> Result<Vec<Vec<f64>>, DetectorError> {
    let trunk = run_trunk(params, cfg, inputs)?;
    boxes
        .iter()
        .map(|b| {
            let (pooled, _) = rpn::roi_pool(&trunk.fused, b, cfg.pool[0], cfg.pool[1], cfg.stride())?;
            Ok(heads::head_forward(&params.head, &pooled)?.probs)
        })
        .collect()
}

/// Flattened ROI-pooled fused features for given boxes.
pub fn pooled_features(
    params: &DetectorParams,
    cfg: &ModelConfig,
    inputs: &[FeatureMap],
    boxes: &[BBox],
) -> Result<Vec<Vec<f64>>, DetectorError> {
    let trunk = run_trunk(params, cfg, inputs)?;
    boxes
        .iter()
        .map(|b| {
            let (pooled, _) = rpn::roi_pool(&trunk.fused, b, cfg.pool[0], cfg.pool[1], cfg.stride())?;
            Ok(pooled.into_vec())
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectOptions {
    /// Minimum objectness for an anchor to become a proposal.
    pub min_objectness: f64,
    /// Minimum head probability of the winning class.
    pub min_score: f64,
    /// Class-agnostic NMS over final detections.
    pub final_nms_iou: f64,
}

impl Default for DetectOptions {
    fn default() -> Self {
        Self {
            min_objectness: 0.0,
            min_score: 0.5,
            final_nms_iou: 0.3,
        }
    }
}

/// A classified proposal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawDetection {
    pub bbox: BBox,
    /// Head index (never 0).
    pub class: usize,
    pub score: f64,
    pub objectness: f64,
}

pub fn detect(model: &Model, inputs: &[FeatureMap], width: usize, height: usize, opts: &DetectOptions) -> Result<Vec<RawDetection>, DetectorError> {
    let cfg = &model.config;
    let trunk = run_trunk(&model.params, cfg, inputs)?;
    let anchors = anchors_for(cfg, &trunk.fused)?;
    let scores = rpn::objectness_scores(&trunk.logits, cfg.anchors.per_cell())?;
    let pcfg = ProposalConfig {
        min_score: opts.min_objectness,
        ..cfg.proposals
    };
    let props = rpn::propose_from_scores(&scores, &anchors, &pcfg, width as f64, height as f64)?;
    let mut dets = Vec::new();
    for p in props {
        let (pooled, _) = rpn::roi_pool(&trunk.fused, &p.bbox, cfg.pool[0], cfg.pool[1], cfg.stride())?;
        let probs = heads::head_forward(&model.params.head, &pooled)?.probs;
        let class = nn::argmax(&probs);
        if class == 0 || probs[class] < opts.min_score {
            continue;
        }
        dets.push(RawDetection {
            bbox: p.bbox,
            class,
            score: probs[class],
            objectness: p.score,
        });
    }
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut keep: Vec<RawDetection> = Vec::new();
    for d in dets {
        if keep.iter().all(|k| rpn::iou(&k.bbox, &d.bbox) <= opts.final_nms_iou) {
            keep.push(d);
        }
    }
    Ok(keep)
}
