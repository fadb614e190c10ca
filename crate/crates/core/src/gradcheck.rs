//! Central finite-difference checks of the analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::detector::{self, DetectorError, DetectorParams, GtObject, ModelConfig, Sample, TrainingRoi};
use crate::fusion::FusionMode;
use crate::heads::HeadVariant;
use crate::imaging::Image;
use crate::rpn::{AnchorConfig, BBox};

pub const EPSILON: f64 = 1e-4;

/// `|a - n| / max(|a|, |n|, floor)`; the floor keeps coordinates whose
/// true gradient is (numerically) zero from dividing by nothing.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-7);
    (analytic - numeric).abs() / denom
}

#[derive(Debug, Clone, Serialize)]
pub struct CoordCheck {
    pub block: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub fusion: FusionMode,
    pub head: HeadVariant,
    pub checked: Vec<CoordCheck>,
    /// Draws rejected because a perturbation crossed a ReLU, pool or max kink.
    pub skipped_kinks: usize,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.checked.iter().map(|c| c.rel_error).fold(0.0, f64::max)
    }

    pub fn nonzero(&self) -> usize {
        self.checked.iter().filter(|c| c.analytic != 0.0).count()
    }
}

/// Small detector used for composed checks: 32x32 input, two conv blocks.
pub fn check_config(fusion: FusionMode, head: HeadVariant) -> ModelConfig {
    let mut cfg = ModelConfig::new(fusion, head, vec!["disc".into(), "rect".into(), "tri".into()]);
    cfg.backbone_widths = vec![4, 6];
    cfg.anchors = AnchorConfig {
        scales: vec![8.0, 16.0],
        ratios: vec![0.5, 1.0, 2.0],
    };
    cfg.pool = [2, 2];
    cfg.hidden = [12, 8];
    cfg
}

/// Textured 32x32 scene with two objects.
pub fn check_sample(cfg: &ModelConfig, seed: u64) -> Result<Sample, DetectorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<f64> = (0..32 * 32).map(|_| rng.gen_range(0.0..0.3)).collect();
    let img = Image::from_fn(32, 32, |y, x| {
        let mut v = noise[y * 32 + x];
        if (6..18).contains(&y) && (4..14).contains(&x) {
            v += 0.6;
        }
        let (dy, dx) = (y as f64 - 22.0, x as f64 - 22.0);
        if dy * dy + dx * dx < 36.0 {
            v += 0.5;
        }
        v
    });
    let objects = vec![
        GtObject {
            bbox: BBox::new(4.0, 6.0, 14.0, 18.0)?,
            label: 1,
        },
        GtObject {
            bbox: BBox::new(16.0, 16.0, 28.0, 28.0)?,
            label: 0,
        },
    ];
    detector::prepare_sample(&img, objects, cfg)
}

/// Compares the full detector gradient (columns, fusion, objectness layer,
/// ROI pooling, head) against central differences on `coords` coordinates.
///
/// The ROI set is frozen from the unperturbed parameters. Coordinates are
/// drawn round-robin over parameter blocks so every layer is exercised; a
/// draw whose +/- perturbation changes any switch (ReLU mask, pool argmax,
/// fusion route, ROI argmax) is rejected and redrawn.
pub fn check_detector(
    params: &DetectorParams,
    cfg: &ModelConfig,
    sample: &Sample,
    coords: usize,
    seed: u64,
) -> Result<GradcheckReport, DetectorError> {
    let rois: Vec<TrainingRoi> = detector::training_rois(params, cfg, sample)?;
    let base = detector::evaluate(params, cfg, sample, &rois, true)?;
    let grads = base.grads.expect("gradient requested");

    let labels: Vec<(String, usize)> = params
        .labelled_blocks(cfg)
        .into_iter()
        .map(|(name, b)| (name, b.len()))
        .collect();
    let mut offsets = Vec::with_capacity(labels.len());
    let mut acc = 0;
    for (_, len) in &labels {
        offsets.push(acc);
        acc += len;
    }
    let blocks: Vec<usize> = (0..labels.len()).filter(|&b| labels[b].1 > 0).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = params.clone();
    let mut checked = Vec::with_capacity(coords);
    let mut skipped = 0;
    let mut attempts = 0;
    while checked.len() < coords && attempts < coords * 50 {
        let b = blocks[attempts % blocks.len()];
        attempts += 1;
        let local = rng.gen_range(0..labels[b].1);
        let flat = offsets[b] + local;
        let orig = p.get_flat(flat);
        p.set_flat(flat, orig + EPSILON);
        let plus = detector::evaluate(&p, cfg, sample, &rois, false)?;
        p.set_flat(flat, orig - EPSILON);
        let minus = detector::evaluate(&p, cfg, sample, &rois, false)?;
        p.set_flat(flat, orig);
        if plus.signature != base.signature || minus.signature != base.signature {
            skipped += 1;
            continue;
        }
        let numeric = (plus.loss - minus.loss) / (2.0 * EPSILON);
        let analytic = grads.get_flat(flat);
        checked.push(CoordCheck {
            block: labels[b].0.clone(),
            index: local,
            analytic,
            numeric,
            rel_error: rel_error(analytic, numeric),
        });
    }
    Ok(GradcheckReport {
        fusion: cfg.fusion,
        head: cfg.head,
        checked,
        skipped_kinks: skipped,
    })
}

/// Builds the small check detector for a fusion mode and runs [`check_detector`].
pub fn check_mode(fusion: FusionMode, head: HeadVariant, coords: usize, seed: u64) -> Result<GradcheckReport, DetectorError> {
    let cfg = check_config(fusion, head);
    let params = DetectorParams::init(&cfg, seed)?;
    let sample = check_sample(&cfg, seed ^ 0x5eed)?;
    check_detector(&params, &cfg, &sample, coords, seed.wrapping_add(1))
}
