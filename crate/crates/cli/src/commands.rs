use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use fusionsight::backbone;
use fusionsight::dataset::{self, SynthConfig};
use fusionsight::depth::{self, GridCalibration, Obstacle, Pose};
use fusionsight::detector::{ModelConfig, Sample};
use fusionsight::gradcheck;
use fusionsight::imaging::{CannyParams, HornSchunckParams};
use fusionsight::model_io;
use fusionsight::svm::{self, SvmParams};
use fusionsight::train::{self, TrainConfig};
use fusionsight::{FusionMode, Model};

use crate::fail::{self, invariant, usage, CliResult, Classify};
use crate::{EvalArgs, GradcheckArgs, ModelArgs, SimulateArgs, SynthArgs, TrainArgs};

/// Fewest objects of each class a synthetic dataset must contain.
const MIN_PER_CLASS: usize = 3;

pub fn synth(a: &SynthArgs, seed: u64) -> CliResult<()> {
    if a.classes.is_empty() || a.classes.iter().any(|c| c.is_empty() || c.contains(char::is_whitespace)) {
        return Err(usage("class names must be non-empty and contain no whitespace"));
    }
    if !(0.0..=1.0).contains(&a.train_fraction) {
        return Err(usage("--train-fraction must lie in [0, 1]"));
    }
    let cfg = SynthConfig {
        images: a.images,
        width: a.width,
        height: a.height,
        classes: a.classes.clone(),
        seed,
        ..SynthConfig::default()
    };
    if a.width < cfg.min_size as usize || a.height < cfg.min_size as usize {
        return Err(usage(format!("images must be at least {} pixels on each side", cfg.min_size)));
    }
    let scenes = dataset::synth_dataset(&cfg);
    let counts = dataset::class_counts(&scenes);
    for c in &a.classes {
        let n = counts.get(c).copied().unwrap_or(0);
        if n < MIN_PER_CLASS {
            return Err(fail::Failure {
                kind: fail::Kind::Data,
                error: anyhow::anyhow!("class '{c}' got {n} objects, need at least {MIN_PER_CLASS}; ask for more images"),
            });
        }
    }
    let (tr, te) = dataset::write_dataset(&a.out, &scenes, a.train_fraction).data()?;
    let objects: usize = counts.values().sum();
    println!("wrote {} images with {} objects to {}", scenes.len(), objects, a.out.display());
    for c in &a.classes {
        println!("  {c}: {}", counts[c]);
    }
    println!("manifests: {} {}", tr.display(), te.display());
    Ok(())
}

fn model_config(m: &ModelArgs) -> CliResult<ModelConfig> {
    if !(0.0 < m.canny_low && m.canny_low <= m.canny_high && m.canny_high <= 1.0) {
        return Err(usage("need 0 < --canny-low <= --canny-high <= 1"));
    }
    if !(m.hs_alpha2 > 0.0) || m.hs_iters == 0 {
        return Err(usage("--hs-alpha2 and --hs-iters must be positive"));
    }
    if m.classes.is_empty() {
        return Err(usage("--classes must name at least one class"));
    }
    let mut cfg = ModelConfig::new(m.fusion, m.head, m.classes.clone());
    cfg.canny = CannyParams {
        low: m.canny_low,
        high: m.canny_high,
        ..CannyParams::default()
    };
    cfg.flow = HornSchunckParams {
        alpha2: m.hs_alpha2,
        iterations: m.hs_iters,
    };
    cfg.gt_fallback = m.gt_fallback;
    Ok(cfg)
}

fn load_manifest(path: &Path, cfg: &ModelConfig) -> CliResult<Vec<Sample>> {
    let entries = dataset::parse_manifest(path).data()?;
    dataset::load_samples(&entries, cfg).data()
}

fn sibling(model: &Path, suffix: &str) -> PathBuf {
    let stem = model.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into());
    model.with_file_name(format!("{stem}.{suffix}"))
}

pub fn model_tag(cfg: &ModelConfig) -> String {
    let fusion = cfg.fusion.tag().map_or_else(|| "intensity".to_string(), |t| t.to_string());
    format!("{{{fusion}, {}}}", cfg.head)
}

pub fn train(a: &TrainArgs, seed: u64) -> CliResult<()> {
    let cfg = model_config(&a.model)?;
    let samples = load_manifest(&a.manifest, &cfg)?;
    let tcfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        schedule: a.lr_schedule,
        seed,
        ..TrainConfig::default()
    };
    tcfg.validate().or_kind(fail::Kind::Usage)?;
    log::info!("training on {} images, model {}", samples.len(), model_tag(&cfg));
    let out = fail::from_train(train::train_three_way(&samples, &cfg, &tcfg))?;
    if !out.model.params.is_finite() {
        return Err(invariant("averaged model has non-finite parameters"));
    }
    let metrics_path = a.metrics.clone().unwrap_or_else(|| sibling(&a.out, "metrics.csv"));
    let grads_path = a.grad_stats.clone().unwrap_or_else(|| sibling(&a.out, "gradstats.csv"));
    model_io::save_model(&a.out, &out.model).data()?;
    fs::write(&metrics_path, train::metrics_csv(&out.metrics)).data()?;
    fs::write(&grads_path, backbone::grad_stats_csv(&out.grad_stats)).data()?;
    let acc = fail::from_detector(train::roi_accuracy(&out.model, &samples))?;
    println!("model {} saved to {}", model_tag(&cfg), a.out.display());
    if let Some(last) = out.metrics.last() {
        println!("final epoch {}: loss {:.4}, lr {}", last.epoch, last.loss, last.lr);
    }
    match acc.overall() {
        Some(v) => println!("training-split ROI accuracy of averaged model: {:.4} ({}/{})", v, acc.correct, acc.total),
        None => println!("training split has no positive ROIs"),
    }
    println!("metrics: {}", metrics_path.display());
    println!("gradient statistics: {}", grads_path.display());
    Ok(())
}

pub fn eval(a: &EvalArgs) -> CliResult<()> {
    let model = model_io::load_model(&a.model).data()?;
    let samples = load_manifest(&a.manifest, &model.config)?;
    let acc = fail::from_detector(train::roi_accuracy(&model, &samples))?;
    println!("model {}", model_tag(&model.config));
    let Some(overall) = acc.overall() else {
        println!("no positive ROIs: the manifest lists no labelled objects");
        return Ok(());
    };
    println!("ROI classification accuracy: {:.4} ({}/{})", overall, acc.correct, acc.total);
    for (name, ok, n) in &acc.per_class {
        if *n == 0 {
            println!("  {name}: no ROIs");
        } else {
            println!("  {name}: {:.4} ({ok}/{n})", *ok as f64 / *n as f64);
        }
    }
    let svm_source = if a.svm_on_test {
        Some(None)
    } else {
        a.svm_train.as_ref().map(Some)
    };
    if let Some(src) = svm_source {
        svm_compare(&model, &samples, src)?;
    }
    Ok(())
}

fn svm_compare(model: &Model, test: &[Sample], train_manifest: Option<&PathBuf>) -> CliResult<()> {
    let train_feats = match train_manifest {
        Some(p) => {
            let s = load_manifest(p, &model.config)?;
            fail::from_detector(train::extract_features(model, &s))?
        }
        None => fail::from_detector(train::extract_features(model, test))?,
    };
    let test_feats = fail::from_detector(train::extract_features(model, test))?;
    let (xs, ys): (Vec<_>, Vec<_>) = train_feats.into_iter().unzip();
    let svm_model = svm::svm_train(&xs, &ys, &SvmParams::default()).data()?;
    let (tx, ty): (Vec<_>, Vec<_>) = test_feats.into_iter().unzip();
    let which = if train_manifest.is_some() { "training manifest" } else { "evaluated manifest" };
    println!(
        "linear SVM on pooled features (trained on the {which}): {:.4}",
        svm::svm_accuracy(&svm_model, &tx, &ty)
    );
    Ok(())
}

pub fn simulate_scan(a: &SimulateArgs) -> CliResult<()> {
    let mut scene: Vec<Obstacle> = Vec::new();
    for &w in &a.wall {
        if !(w > 0.0) {
            return Err(usage("--wall distance must be positive"));
        }
        // boxes are axis-aligned, so a wall across the heading needs heading 0
        if a.pose[2] != 0.0 {
            return Err(usage("--wall needs heading 0; use --box for other layouts"));
        }
        let Obstacle::Box { x1, y1, x2, y2 } = depth::wall(w) else {
            return Err(invariant("wall is not a box"));
        };
        scene.push(Obstacle::Box {
            x1: x1 + a.pose[0],
            y1: y1 + a.pose[1],
            x2: x2 + a.pose[0],
            y2: y2 + a.pose[1],
        });
    }
    for b in &a.boxes {
        scene.push(Obstacle::Box {
            x1: b[0],
            y1: b[1],
            x2: b[2],
            y2: b[3],
        });
    }
    for c in &a.circles {
        scene.push(Obstacle::Circle {
            cx: c[0],
            cy: c[1],
            r: c[2],
        });
    }
    let pose = Pose {
        x: a.pose[0],
        y: a.pose[1],
        heading: a.pose[2].to_radians(),
    };
    let scan = depth::simulate_scan(&scene, pose);
    let csv = scan.to_csv();
    match &a.out {
        Some(p) => fs::write(p, csv).data()?,
        None => std::io::stdout().lock().write_all(csv.as_bytes()).data()?,
    }
    if let Some(p) = &a.write_calib {
        fs::write(p, GridCalibration::default().to_text()).data()?;
    }
    let valid = scan.samples().iter().filter(|s| s.valid).count();
    log::info!("{} beams, {} valid returns", scan.len(), valid);
    Ok(())
}

pub fn gradcheck(a: &GradcheckArgs, seed: u64) -> CliResult<()> {
    if a.coords == 0 {
        return Err(usage("--coords must be positive"));
    }
    let modes: Vec<FusionMode> = match a.fusion {
        Some(m) => vec![m],
        None => vec![FusionMode::Edges, FusionMode::Flow, FusionMode::Scale],
    };
    let mut failed = Vec::new();
    for mode in modes {
        let r = fail::from_detector(gradcheck::check_mode(mode, a.head, a.coords, seed))?;
        let worst = r.max_rel_error();
        let ok = worst < a.tolerance && r.checked.len() == a.coords;
        let name = mode.tag().map_or_else(|| "intensity".to_string(), |t| t.to_string());
        println!(
            "{name} {}: {} coordinates ({} nonzero), max relative error {:.3e}, {} draws skipped at kinks: {}",
            a.head,
            r.checked.len(),
            r.nonzero(),
            worst,
            r.skipped_kinks,
            if ok { "ok" } else { "FAILED" }
        );
        if !ok {
            failed.push(name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(invariant(format!("gradient check failed for {}", failed.join(", "))))
    }
}
