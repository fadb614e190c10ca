//! Laser ranges for detections.
//!
//! A 2-D scan covers a 240 degree arc in 0.36 degree steps. The arc is cut
//! into angular bands (laser cells); a calibration table maps every camera
//! grid cell to one band, and the distance of a detection is the nearest
//! valid return inside its band. Angles are in the sensor frame: x forward,
//! y to the left, positive angles to the left.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MIN_RANGE_MM: f64 = 20.0;
pub const MAX_RANGE_MM: f64 = 5600.0;
pub const ARC_DEG: f64 = 240.0;
pub const STEP_DEG: f64 = 0.36;
pub const BEAMS: usize = 667;

#[derive(Debug, Error)]
pub enum DepthError {
    #[error("sample is invalid (range {0} mm outside the sensor limits)")]
    InvalidSample(f64),
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("scan spans {0:.2} degrees, more than the 240 degree arc")]
    ArcSpan(f64),
    #[error("scan angles must be strictly increasing (duplicate at {0} degrees)")]
    DuplicateAngle(f64),
    #[error("scan is empty")]
    EmptyScan,
    #[error("pixel ({q}, {r}) outside a {width}x{height} image")]
    PixelOutOfBounds { q: usize, r: usize, width: usize, height: usize },
    #[error("camera cell ({0}, {1}) has no laser cell")]
    Uncalibrated(usize, usize),
    #[error("laser cell {0} does not exist")]
    UnknownBand(usize),
    #[error("grid dimensions must be positive")]
    EmptyGrid,
}

/// One laser return.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolarSample {
    /// Range in millimetres.
    pub rho: f64,
    /// Beam angle in radians.
    pub alpha: f64,
    pub valid: bool,
}

impl PolarSample {
    /// Valid iff the range lies within the sensor limits; out-of-range
    /// values are kept as they are, never clamped.
    pub fn new(rho: f64, alpha: f64) -> Self {
        Self {
            rho,
            alpha,
            valid: rho.is_finite() && (MIN_RANGE_MM..=MAX_RANGE_MM).contains(&rho),
        }
    }

    pub fn angle_deg(&self) -> f64 {
        self.alpha.to_degrees()
    }
}

pub fn polar_to_cartesian(s: &PolarSample) -> Result<(f64, f64), DepthError> {
    if !s.valid {
        return Err(DepthError::InvalidSample(s.rho));
    }
    Ok((s.rho * s.alpha.cos(), s.rho * s.alpha.sin()))
}

pub fn cartesian_to_polar(x: f64, y: f64) -> PolarSample {
    PolarSample::new(x.hypot(y), y.atan2(x))
}

/// Angle of beam `i` of a full scan, centred on straight ahead.
pub fn beam_angle_deg(i: usize) -> f64 {
    (i as f64 - (BEAMS / 2) as f64) * STEP_DEG
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaserScan {
    samples: Vec<PolarSample>,
}

impl LaserScan {
    /// Sorts by angle and checks that angles are distinct and span at most 240 degrees.
    pub fn new(mut samples: Vec<PolarSample>) -> Result<Self, DepthError> {
        samples.sort_by(|a, b| a.alpha.total_cmp(&b.alpha));
        for w in samples.windows(2) {
            if w[0].alpha == w[1].alpha {
                return Err(DepthError::DuplicateAngle(w[0].angle_deg()));
            }
        }
        if let (Some(first), Some(last)) = (samples.first(), samples.last()) {
            let span = last.angle_deg() - first.angle_deg();
            if span > ARC_DEG + 1e-9 {
                return Err(DepthError::ArcSpan(span));
            }
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[PolarSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `angle_deg,range_mm` lines with a header.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("angle_deg,range_mm\n");
        for p in &self.samples {
            s.push_str(&format!("{},{}\n", p.angle_deg(), p.rho));
        }
        s
    }
}

/// Parses `angle_deg,range_mm` lines; a non-numeric first line is a header.
pub fn parse_scan_str(text: &str) -> Result<LaserScan, DepthError> {
    let mut samples = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| DepthError::Parse { line: n + 1, msg };
        let mut parts = line.split(',').map(str::trim);
        let (a, r) = match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(r), None) => (a, r),
            _ => return Err(err(format!("expected 'angle_deg,range_mm', got '{line}'"))),
        };
        let (a, r) = match (a.parse::<f64>(), r.parse::<f64>()) {
            (Ok(a), Ok(r)) if a.is_finite() => (a, r),
            _ if samples.is_empty() && n == 0 => continue,
            _ => return Err(err(format!("unparseable values in '{line}'"))),
        };
        samples.push(PolarSample::new(r, a.to_radians()));
    }
    LaserScan::new(samples)
}

pub fn parse_scan(path: impl AsRef<Path>) -> Result<LaserScan, DepthError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| DepthError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_scan_str(&text)
}

/// Camera grid, laser bands and the table between them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCalibration {
    pub camera_rows: usize,
    pub camera_cols: usize,
    /// `[lo, hi)` in degrees; the last band also includes its upper edge.
    pub bands: Vec<(f64, f64)>,
    /// Row-major camera cell -> band index.
    pub table: Vec<Option<usize>>,
}

/// `n` equal bands across the arc, lowest angles first.
pub fn equal_bands(n: usize) -> Vec<(f64, f64)> {
    let w = ARC_DEG / n as f64;
    (0..n)
        .map(|k| (-ARC_DEG / 2.0 + k as f64 * w, -ARC_DEG / 2.0 + (k + 1) as f64 * w))
        .collect()
}

impl Default for GridCalibration {
    /// 3x3 camera grid over three 80 degree bands. The left camera column
    /// looks at positive angles, so columns map to bands in reverse.
    fn default() -> Self {
        let mut table = Vec::with_capacity(9);
        for _row in 0..3 {
            for col in 0..3 {
                table.push(Some(2 - col));
            }
        }
        Self {
            camera_rows: 3,
            camera_cols: 3,
            bands: equal_bands(3),
            table,
        }
    }
}

impl GridCalibration {
    pub fn laser_cell(&self, cell: (usize, usize)) -> Result<usize, DepthError> {
        let (r, c) = cell;
        if r >= self.camera_rows || c >= self.camera_cols {
            return Err(DepthError::Uncalibrated(r, c));
        }
        let band = self.table[r * self.camera_cols + c].ok_or(DepthError::Uncalibrated(r, c))?;
        if band >= self.bands.len() {
            return Err(DepthError::UnknownBand(band));
        }
        Ok(band)
    }

    pub fn is_total(&self) -> bool {
        self.table.iter().all(|t| t.is_some_and(|b| b < self.bands.len()))
    }

    /// `row col -> band` lines, one per camera cell.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in 0..self.camera_rows {
            for c in 0..self.camera_cols {
                if let Some(b) = self.table[r * self.camera_cols + c] {
                    s.push_str(&format!("{r} {c} -> {b}\n"));
                }
            }
        }
        s
    }
}

/// Reads `row col -> band` lines. Grid sizes are one more than the largest
/// indices seen; bands split the arc equally. Every camera cell must appear.
pub fn parse_calibration_str(text: &str) -> Result<GridCalibration, DepthError> {
    let mut entries = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = || DepthError::Parse {
            line: n + 1,
            msg: format!("expected 'row col -> band', got '{line}'"),
        };
        let (lhs, rhs) = line.split_once("->").ok_or_else(err)?;
        let cell: Vec<usize> = lhs
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| err()))
            .collect::<Result<_, _>>()?;
        let band: usize = rhs.trim().parse().map_err(|_| err())?;
        if cell.len() != 2 {
            return Err(err());
        }
        entries.push((cell[0], cell[1], band));
    }
    if entries.is_empty() {
        return Err(DepthError::EmptyGrid);
    }
    let rows = entries.iter().map(|e| e.0).max().unwrap_or(0) + 1;
    let cols = entries.iter().map(|e| e.1).max().unwrap_or(0) + 1;
    let nbands = entries.iter().map(|e| e.2).max().unwrap_or(0) + 1;
    let mut table = vec![None; rows * cols];
    for (r, c, b) in entries {
        table[r * cols + c] = Some(b);
    }
    if let Some(i) = table.iter().position(Option::is_none) {
        return Err(DepthError::Uncalibrated(i / cols, i % cols));
    }
    Ok(GridCalibration {
        camera_rows: rows,
        camera_cols: cols,
        bands: equal_bands(nbands),
        table,
    })
}

pub fn parse_calibration(path: impl AsRef<Path>) -> Result<GridCalibration, DepthError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| DepthError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_calibration_str(&text)
}

/// Camera cell `(floor(r*rows/H), floor(q*cols/W))` of pixel column `q`, row `r`.
pub fn pixel_to_camera_cell(
    q: usize,
    r: usize,
    image: (usize, usize),
    grid: (usize, usize),
) -> Result<(usize, usize), DepthError> {
    let (height, width) = image;
    let (rows, cols) = grid;
    if rows == 0 || cols == 0 {
        return Err(DepthError::EmptyGrid);
    }
    if q >= width || r >= height {
        return Err(DepthError::PixelOutOfBounds { q, r, width, height });
    }
    Ok(((r * rows / height).min(rows - 1), (q * cols / width).min(cols - 1)))
}

/// A laser distance, or the absence of any valid return.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Range {
    Millimeters(f64),
    NoReturn,
}

impl Range {
    /// Integer millimetres for reporting.
    pub fn rounded_mm(&self) -> Option<i64> {
        match self {
            Self::Millimeters(v) => Some(v.round() as i64),
            Self::NoReturn => None,
        }
    }
}

impl fmt::Display for Range {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.rounded_mm() {
            Some(v) => write!(f, "{v}"),
            None => f.write_str("unknown"),
        }
    }
}

/// Nearest valid return with an angle inside `band`.
pub fn band_distance(scan: &LaserScan, band: (f64, f64), last: bool) -> Range {
    let (lo, hi) = band;
    scan.samples
        .iter()
        .filter(|s| s.valid)
        .filter(|s| {
            let a = s.angle_deg();
            a >= lo && (a < hi || (last && a <= hi))
        })
        .map(|s| s.rho)
        .min_by(f64::total_cmp)
        .map_or(Range::NoReturn, Range::Millimeters)
}

/// Distance for pixel `(q, r)`: camera cell -> laser cell -> nearest return.
pub fn map_to_distance(
    q: usize,
    r: usize,
    image: (usize, usize),
    calib: &GridCalibration,
    scan: &LaserScan,
) -> Result<(Range, usize), DepthError> {
    if scan.is_empty() {
        return Err(DepthError::EmptyScan);
    }
    let cell = pixel_to_camera_cell(q, r, image, (calib.camera_rows, calib.camera_cols))?;
    let band = calib.laser_cell(cell)?;
    let last = band + 1 == calib.bands.len();
    Ok((band_distance(scan, calib.bands[band], last), band))
}

/// World obstacle in millimetres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Obstacle {
    /// Axis-aligned box.
    Box { x1: f64, y1: f64, x2: f64, y2: f64 },
    Circle { cx: f64, cy: f64, r: f64 },
}

impl Obstacle {
    /// Smallest positive distance along the unit ray `(ox,oy) + t (dx,dy)`.
    fn hit(&self, ox: f64, oy: f64, dx: f64, dy: f64) -> Option<f64> {
        match *self {
            Obstacle::Box { x1, y1, x2, y2 } => {
                // slab method
                let mut t0 = f64::NEG_INFINITY;
                let mut t1 = f64::INFINITY;
                for (o, d, lo, hi) in [(ox, dx, x1, x2), (oy, dy, y1, y2)] {
                    if d == 0.0 {
                        if o < lo || o > hi {
                            return None;
                        }
                    } else {
                        let (a, b) = ((lo - o) / d, (hi - o) / d);
                        t0 = t0.max(a.min(b));
                        t1 = t1.min(a.max(b));
                    }
                }
                if t1 < t0 || t1 <= 0.0 {
                    None
                } else if t0 > 0.0 {
                    Some(t0)
                } else {
                    Some(t1)
                }
            }
            Obstacle::Circle { cx, cy, r } => {
                let (fx, fy) = (ox - cx, oy - cy);
                let b = fx * dx + fy * dy;
                let c = fx * fx + fy * fy - r * r;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                let (t0, t1) = (-b - s, -b + s);
                if t0 > 0.0 {
                    Some(t0)
                } else if t1 > 0.0 {
                    Some(t1)
                } else {
                    None
                }
            }
        }
    }
}

/// Sensor position (mm) and heading (radians) in the world.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

/// Ray-casts all 667 beams. Beams without a hit read 0 mm (invalid);
/// hits beyond the sensor limits keep their true range but are invalid.
pub fn simulate_scan(scene: &[Obstacle], pose: Pose) -> LaserScan {
    let samples = (0..BEAMS)
        .map(|i| {
            let alpha = beam_angle_deg(i).to_radians();
            let theta = pose.heading + alpha;
            let (dx, dy) = (theta.cos(), theta.sin());
            let t = scene
                .iter()
                .filter_map(|o| o.hit(pose.x, pose.y, dx, dy))
                .min_by(f64::total_cmp);
            PolarSample::new(t.unwrap_or(0.0), alpha)
        })
        .collect();
    LaserScan::new(samples).expect("beam angles are distinct and span 239.76 degrees")
}

/// A wall perpendicular to the heading at `distance` mm, wide enough to
/// cover every forward beam.
pub fn wall(distance: f64) -> Obstacle {
    Obstacle::Box {
        x1: distance,
        y1: -1e6,
        x2: distance + 100.0,
        y2: 1e6,
    }
}
