//! Synthetic shape scenes and the text manifest format.
//!
//! Manifest lines are `image_path label x1 y1 x2 y2`; an image holding
//! several objects appears on several lines, and a line with only a path
//! lists an image without objects. Paths are relative to the manifest's
//! directory unless absolute. `#` starts a comment.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::detector::{self, DetectorError, GtObject, ModelConfig, Sample};
use crate::imaging::{self, Image, ImageError};
use crate::rpn::{self, BBox};

/// Shape proxies: disc for person, rectangle for car, triangle for sign.
pub const DEFAULT_CLASSES: [&str; 3] = ["person", "car", "sign"];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("unknown class '{0}'")]
    UnknownClass(String),
    #[error("manifest lists no images")]
    Empty,
    #[error("need at least {needed} images per class, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub label: String,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub objects: Vec<Annotation>,
}

/// Groups manifest lines by image, keeping first-appearance order.
pub fn parse_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>, DatasetError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut entries: Vec<ManifestEntry> = Vec::new();
    let mut index: HashMap<PathBuf, usize> = HashMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let parse_err = |msg: String| DatasetError::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            msg,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 1 && fields.len() != 6 {
            return Err(parse_err(format!("expected 1 or 6 fields, found {}", fields.len())));
        }
        let image = base.join(fields[0]);
        let slot = *index.entry(image.clone()).or_insert_with(|| {
            entries.push(ManifestEntry {
                image,
                objects: Vec::new(),
            });
            entries.len() - 1
        });
        if fields.len() == 6 {
            let mut c = [0.0; 4];
            for (k, f) in fields[2..].iter().enumerate() {
                c[k] = f.parse().map_err(|_| parse_err(format!("bad coordinate '{f}'")))?;
            }
            let bbox = BBox::new(c[0], c[1], c[2], c[3]).map_err(|e| parse_err(e.to_string()))?;
            entries[slot].objects.push(Annotation {
                label: fields[1].to_string(),
                bbox,
            });
        }
    }
    if entries.is_empty() {
        return Err(DatasetError::Empty);
    }
    Ok(entries)
}

/// Manifest text, one line per object.
pub fn manifest_text(entries: &[ManifestEntry]) -> String {
    let mut s = String::new();
    for e in entries {
        let p = e.image.display();
        if e.objects.is_empty() {
            s.push_str(&format!("{p}\n"));
        }
        for o in &e.objects {
            let b = o.bbox;
            s.push_str(&format!("{p} {} {} {} {} {}\n", o.label, b.x1, b.y1, b.x2, b.y2));
        }
    }
    s
}

/// Loads every manifest image and prepares its column inputs.
pub fn load_samples(entries: &[ManifestEntry], cfg: &ModelConfig) -> Result<Vec<Sample>, DatasetError> {
    entries
        .iter()
        .map(|e| {
            let img = imaging::load_image(&e.image)?;
            let objects = e
                .objects
                .iter()
                .map(|o| {
                    let label = cfg
                        .class_index(&o.label)
                        .ok_or_else(|| DatasetError::UnknownClass(o.label.clone()))?;
                    Ok(GtObject { bbox: o.bbox, label })
                })
                .collect::<Result<Vec<_>, DatasetError>>()?;
            Ok(detector::prepare_sample(&img, objects, cfg)?)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Disc,
    Rect,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [Self::Disc, Self::Rect, Self::Triangle];

    /// Membership test for a shape inscribed in `b`.
    pub fn contains(self, b: &BBox, px: f64, py: f64) -> bool {
        match self {
            Self::Rect => px >= b.x1 && px < b.x2 && py >= b.y1 && py < b.y2,
            Self::Disc => {
                let (cx, cy) = b.center();
                let (rx, ry) = (b.width() / 2.0, b.height() / 2.0);
                let (dx, dy) = ((px - cx) / rx, (py - cy) / ry);
                dx * dx + dy * dy <= 1.0
            }
            Self::Triangle => {
                // apex at top centre, base along the bottom edge
                if py < b.y1 || py >= b.y2 {
                    return false;
                }
                let t = (py - b.y1) / b.height();
                let (cx, _) = b.center();
                (px - cx).abs() <= t * b.width() / 2.0
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub images: usize,
    pub width: usize,
    pub height: usize,
    pub max_objects: usize,
    pub min_size: f64,
    pub max_size: f64,
    pub classes: Vec<String>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            images: 240,
            width: 64,
            height: 64,
            max_objects: 2,
            min_size: 24.0,
            max_size: 40.0,
            classes: DEFAULT_CLASSES.iter().map(|s| s.to_string()).collect(),
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthScene {
    pub image: Image,
    pub objects: Vec<Annotation>,
}

/// Class `i` is drawn as `ShapeKind::ALL[i % 3]`.
pub fn shape_of(class_index: usize) -> ShapeKind {
    ShapeKind::ALL[class_index % 3]
}

/// Renders colored shapes over a dim noisy background and converts to gray.
pub fn render_scene(width: usize, height: usize, shapes: &[(ShapeKind, BBox, [f64; 3])], rng: &mut impl Rng) -> Image {
    let bg: [f64; 3] = [rng.gen_range(0.05..0.3), rng.gen_range(0.05..0.3), rng.gen_range(0.05..0.3)];
    let mut data = Vec::with_capacity(width * height * 3);
    for y in 0..height {
        for x in 0..width {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut c = bg;
            for (kind, b, color) in shapes {
                if kind.contains(b, px, py) {
                    c = *color;
                }
            }
            for v in c {
                data.push((v + rng.gen_range(-0.03..0.03)).clamp(0.0, 1.0));
            }
        }
    }
    let rgb = Image::new(height, width, 3, data).expect("values clamped to [0,1]");
    imaging::to_grayscale(&rgb)
}

fn bright_color(rng: &mut impl Rng) -> [f64; 3] {
    loop {
        let c = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
        let lum = 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2];
        if lum >= 0.55 {
            return c;
        }
    }
}

pub fn synth_scene(cfg: &SynthConfig, rng: &mut impl Rng) -> SynthScene {
    let count = rng.gen_range(1..=cfg.max_objects.max(1));
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let mut placed: Vec<(ShapeKind, BBox, [f64; 3])> = Vec::new();
    let mut objects = Vec::new();
    for _ in 0..count {
        let class = rng.gen_range(0..cfg.classes.len());
        let kind = shape_of(class);
        for _attempt in 0..50 {
            let s = rng.gen_range(cfg.min_size..=cfg.max_size).min(w).min(h);
            let (bw, bh) = match kind {
                ShapeKind::Disc => (s, s),
                ShapeKind::Rect => {
                    let a = rng.gen_range(0.55..0.8);
                    (s, (s * a).round())
                }
                ShapeKind::Triangle => (s, s),
            };
            let x1 = rng.gen_range(0.0..=(w - bw)).floor();
            let y1 = rng.gen_range(0.0..=(h - bh)).floor();
            let bbox = BBox::new(x1, y1, x1 + bw, y1 + bh).expect("positive size");
            if placed.iter().all(|(_, o, _)| rpn::iou(o, &bbox) == 0.0) {
                placed.push((kind, bbox, bright_color(rng)));
                objects.push(Annotation {
                    label: cfg.classes[class].clone(),
                    bbox,
                });
                break;
            }
        }
    }
    let image = render_scene(cfg.width, cfg.height, &placed, rng);
    SynthScene { image, objects }
}


pub fn synth_dataset(cfg: &SynthConfig) -> Vec<SynthScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.images).map(|_| synth_scene(cfg, &mut rng)).collect()
}

/// Objects per class name.
pub fn class_counts(scenes: &[SynthScene]) -> HashMap<String, usize> {
    let mut m = HashMap::new();
    for s in scenes {
        for o in &s.objects {
            *m.entry(o.label.clone()).or_insert(0) += 1;
        }
    }
    m
}

/// Writes `img_NNNN.pgm` files plus `train.txt` (first `train_fraction`
/// of the scenes) and `test.txt` (the rest) into `dir`.
pub fn write_dataset(dir: &Path, scenes: &[SynthScene], train_fraction: f64) -> Result<(PathBuf, PathBuf), DatasetError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut entries = Vec::with_capacity(scenes.len());
    for (i, s) in scenes.iter().enumerate() {
        let name = format!("img_{i:04}.pgm");
        s.image.save(dir.join(&name))?;
        entries.push(ManifestEntry {
            image: PathBuf::from(name),
            objects: s.objects.clone(),
        });
    }
    let split = ((scenes.len() as f64) * train_fraction).round() as usize;
    let split = split.min(scenes.len());
    let train = dir.join("train.txt");
    let test = dir.join("test.txt");
    fs::write(&train, manifest_text(&entries[..split])).map_err(io_err(&train))?;
    fs::write(&test, manifest_text(&entries[split..])).map_err(io_err(&test))?;
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_deterministic_and_in_bounds() {
        let cfg = SynthConfig {
            images: 20,
            ..SynthConfig::default()
        };
        let a = synth_dataset(&cfg);
        let b = synth_dataset(&cfg);
        assert_eq!(a, b);
        for s in &a {
            assert!(!s.objects.is_empty());
            for o in &s.objects {
                assert!(o.bbox.x1 >= 0.0 && o.bbox.y1 >= 0.0);
                assert!(o.bbox.x2 <= 64.0 && o.bbox.y2 <= 64.0);
            }
        }
    }

    #[test]
    fn shapes_fill_their_boxes_differently() {
        let b = BBox::new(0.0, 0.0, 20.0, 20.0).unwrap();
        let area = |k: ShapeKind| {
            let mut n = 0;
            for y in 0..20 {
                for x in 0..20 {
                    n += usize::from(k.contains(&b, x as f64 + 0.5, y as f64 + 0.5));
                }
            }
            n
        };
        assert_eq!(area(ShapeKind::Rect), 400);
        let disc = area(ShapeKind::Disc);
        let tri = area(ShapeKind::Triangle);
        assert!((300..330).contains(&disc), "{disc}");
        assert!((190..215).contains(&tri), "{tri}");
    }

    #[test]
    fn manifest_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            images: 6,
            ..SynthConfig::default()
        };
        let scenes = synth_dataset(&cfg);
        let (train, test) = write_dataset(dir.path(), &scenes, 0.5).unwrap();
        let tr = parse_manifest(&train).unwrap();
        let te = parse_manifest(&test).unwrap();
        assert_eq!(tr.len() + te.len(), 6);
        let lines = fs::read_to_string(&train).unwrap().lines().count();
        assert_eq!(lines, scenes[..3].iter().map(|s| s.objects.len()).sum::<usize>());
        assert_eq!(tr[0].objects, scenes[0].objects);
        assert!(tr[0].image.starts_with(dir.path()));
    }

    #[test]
    fn manifest_errors_and_empty_images() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.txt");
        fs::write(&p, "a.pgm\n# comment\nb.pgm car 1 2 3 4\n").unwrap();
        let m = parse_manifest(&p).unwrap();
        assert_eq!(m.len(), 2);
        assert!(m[0].objects.is_empty());
        fs::write(&p, "a.pgm car 1 2 3\n").unwrap();
        assert!(matches!(parse_manifest(&p), Err(DatasetError::Parse { line: 1, .. })));
        fs::write(&p, "a.pgm car 5 2 3 4\n").unwrap();
        assert!(matches!(parse_manifest(&p), Err(DatasetError::Parse { .. })));
        fs::write(&p, "\n").unwrap();
        assert!(matches!(parse_manifest(&p), Err(DatasetError::Empty)));
    }
}
