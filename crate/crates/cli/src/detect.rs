//! `detect`: images in, JSON-lines detections and announcements out.

use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::thread;
use std::time::{Duration, Instant};

use fusionsight::annunciator::{self, Announcement, Direction, Scheduler, Sighting, Sink};
use fusionsight::depth::{self, GridCalibration, LaserScan, Range};
use fusionsight::detector::{self, DetectOptions};
use fusionsight::imaging::{self, Image};
use fusionsight::model_io;
use fusionsight::{FusionMode, Model};
use serde_json::{json, Value};

use crate::fail::{self, usage, CliResult, Classify};
use crate::DetectArgs;

const POLL: Duration = Duration::from_millis(100);

fn distance_json(r: Range) -> Value {
    match r.rounded_mm() {
        Some(v) => json!(v),
        None => json!("unknown"),
    }
}

struct Pipeline<'a> {
    model: &'a Model,
    opts: DetectOptions,
    calib: GridCalibration,
    scan: Option<LaserScan>,
    scheduler: Scheduler,
    sink: Option<Sink>,
    out: Box<dyn Write + 'a>,
    frame_interval: f64,
    frame_pairs: bool,
    frame: usize,
    prev: Option<Image>,
    detections: usize,
    announcements: usize,
}

impl Pipeline<'_> {
    fn write(&mut self, v: &Value) -> CliResult<()> {
        writeln!(self.out, "{v}").data()
    }

    fn announce(&mut self, a: &Announcement, image: &Path) -> CliResult<()> {
        self.announcements += 1;
        let line = json!({
            "type": "announcement",
            "image": image.display().to_string(),
            "time": a.timestamp,
            "class": a.class,
            "text": a.text,
            "urgency": a.urgency,
            "distance_mm": distance_json(a.distance),
        });
        self.write(&line)?;
        if let Some(sink) = &self.sink {
            annunciator::emit(a, sink);
        }
        Ok(())
    }

    fn process(&mut self, path: &Path) -> CliResult<()> {
        let img = imaging::load_image(path).data()?;
        let time = self.frame as f64 * self.frame_interval;
        self.frame += 1;
        let prev = if self.frame_pairs { self.prev.as_ref() } else { None };
        if let Some(p) = prev {
            if p.dims() != img.dims() {
                return Err(fail::Failure {
                    kind: fail::Kind::Data,
                    error: anyhow::anyhow!("{}: frame size differs from the previous frame", path.display()),
                });
            }
        }
        let inputs = detector::prepare_inputs(&img, prev, &self.model.config).data()?;
        let (h, w) = img.dims();
        let dets = fail::from_detector(detector::detect(self.model, &inputs, w, h, &self.opts))?;
        log::info!("{}: {} detections", path.display(), dets.len());
        let grid = (self.calib.camera_rows, self.calib.camera_cols);
        for d in dets {
            let (cx, cy) = d.bbox.center();
            let q = (cx.max(0.0) as usize).min(w - 1);
            let r = (cy.max(0.0) as usize).min(h - 1);
            let cell = depth::pixel_to_camera_cell(q, r, (h, w), grid).invariant()?;
            let (distance, band) = match &self.scan {
                Some(scan) => {
                    let (z, band) = depth::map_to_distance(q, r, (h, w), &self.calib, scan).data()?;
                    (z, Some(band))
                }
                None => (Range::NoReturn, None),
            };
            let class = self.model.config.class_name(d.class).to_string();
            let b = d.bbox;
            let line = json!({
                "type": "detection",
                "image": path.display().to_string(),
                "time": time,
                "class": class,
                "score": d.score,
                "objectness": d.objectness,
                "box": [b.x1, b.y1, b.x2, b.y2],
                "grid_cell": [cell.0, cell.1],
                "laser_band": band,
                "distance_mm": distance_json(distance),
            });
            self.write(&line)?;
            self.detections += 1;
            let sighting = Sighting {
                time,
                class,
                direction: Direction::from_column(cell.1, grid.1),
                distance,
            };
            if let Some(a) = self.scheduler.push(&sighting).invariant()? {
                self.announce(&a, path)?;
            }
        }
        if self.frame_pairs {
            self.prev = Some(img);
        }
        Ok(())
    }
}

fn is_image(p: &Path) -> bool {
    p.is_file()
        && p.extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "pgm" | "ppm" | "pnm"))
}

/// Images in `dir` not yet seen, sorted by name.
fn new_images(dir: &Path, seen: &mut HashSet<PathBuf>) -> CliResult<Vec<PathBuf>> {
    let mut found: Vec<PathBuf> = fs::read_dir(dir)
        .data()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| is_image(p) && !seen.contains(p))
        .collect();
    found.sort();
    seen.extend(found.iter().cloned());
    Ok(found)
}

pub fn run(a: &DetectArgs) -> CliResult<()> {
    if a.images.is_empty() && a.watch_dir.is_none() {
        return Err(usage("give at least one image or --watch-dir"));
    }
    if !(a.frame_interval > 0.0) || !(a.idle_timeout >= 0.0) {
        return Err(usage("--frame-interval must be positive and --idle-timeout non-negative"));
    }
    let model = model_io::load_model(&a.model).data()?;
    if a.frame_pairs && model.config.fusion != FusionMode::Flow {
        log::warn!("--frame-pairs only affects flow models; model uses {}", model.config.fusion);
    }
    let calib = match &a.calib {
        Some(p) => depth::parse_calibration(p).data()?,
        None => GridCalibration::default(),
    };
    let scan = match &a.scan {
        Some(p) => {
            let s = depth::parse_scan(p).data()?;
            if s.is_empty() {
                return Err(fail::Failure {
                    kind: fail::Kind::Data,
                    error: anyhow::anyhow!("{}: scan has no samples", p.display()),
                });
            }
            Some(s)
        }
        None => None,
    };
    let out: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(BufWriter::new(File::create(p).data()?)),
        None => Box::new(io::stdout().lock()),
    };
    let sink = match (&a.speak_cmd, &a.announce_file) {
        (Some(cmd), _) => Some(Sink::Command(cmd.clone())),
        (None, Some(p)) => Some(Sink::File(p.clone())),
        // with detections on stdout the JSON lines already carry the announcements
        (None, None) if a.out.is_some() => Some(Sink::Stdout),
        (None, None) => None,
    };
    let mut p = Pipeline {
        model: &model,
        opts: DetectOptions {
            min_objectness: a.min_objectness,
            min_score: a.min_score,
            ..DetectOptions::default()
        },
        calib,
        scan,
        scheduler: Scheduler::new(a.policy).or_kind(fail::Kind::Usage)?,
        sink,
        out,
        frame_interval: a.frame_interval,
        frame_pairs: a.frame_pairs,
        frame: 0,
        prev: None,
        detections: 0,
        announcements: 0,
    };
    for img in &a.images {
        p.process(img)?;
    }
    if let Some(dir) = &a.watch_dir {
        if !dir.is_dir() {
            return Err(fail::Failure {
                kind: fail::Kind::Data,
                error: anyhow::anyhow!("{} is not a directory", dir.display()),
            });
        }
        let mut seen: HashSet<PathBuf> = a.images.iter().cloned().collect();
        let idle = Duration::from_secs_f64(a.idle_timeout);
        let mut last_new = Instant::now();
        loop {
            let batch = new_images(dir, &mut seen)?;
            if batch.is_empty() {
                if last_new.elapsed() >= idle {
                    break;
                }
                thread::sleep(POLL);
                continue;
            }
            for img in &batch {
                p.process(img)?;
            }
            p.out.flush().data()?;
            last_new = Instant::now();
        }
    }
    p.out.flush().data()?;
    log::info!("{} detections, {} announcements", p.detections, p.announcements);
    Ok(())
}
