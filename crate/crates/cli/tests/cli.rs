use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use fusionsight::dataset::{self, ShapeKind};
use fusionsight::detector::{self, DetectOptions};
use fusionsight::imaging::Image;
use fusionsight::{model_io, BBox};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fusionsight"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(args: &[&str]) -> String {
    let o = run(args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}\n{}",
        stdout(&o),
        String::from_utf8_lossy(&o.stderr)
    );
    stdout(&o)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn json_lines(text: &str) -> Vec<Value> {
    text.lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn of_type<'a>(lines: &'a [Value], t: &str) -> Vec<&'a Value> {
    lines.iter().filter(|v| v["type"] == t).collect()
}

/// A dataset and an intensity-only model trained on it, shared by the tests.
struct Trained {
    _dir: tempfile::TempDir,
    root: PathBuf,
    model: PathBuf,
    train_out: String,
}

fn trained() -> &'static Trained {
    static T: OnceLock<Trained> = OnceLock::new();
    T.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let data = root.join("data");
        ok(&["synth", "--out", p(&data), "--images", "210", "--train-fraction", "1.0", "--seed", "5"]);
        let model = root.join("model.fsm");
        let train_out = ok(&[
            "train",
            "--manifest",
            p(&data.join("train.txt")),
            "--out",
            p(&model),
            "--fusion",
            "none",
            "--head",
            "cnn1c",
            "--seed",
            "2",
        ]);
        Trained {
            _dir: dir,
            root,
            model,
            train_out,
        }
    })
}

/// One car-proxy rectangle in the middle of a 64x64 frame.
fn centered_car(path: &Path) {
    let b = BBox::new(16.0, 22.0, 48.0, 42.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let img: Image = dataset::render_scene(64, 64, &[(ShapeKind::Rect, b, [0.9, 0.8, 0.3])], &mut rng);
    img.save(path).unwrap();
}

#[test]
fn synth_is_deterministic_and_in_bounds() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        ok(&["synth", "--out", p(d), "--images", "24", "--seed", "3"]);
    }
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 26);
    for n in &names {
        assert_eq!(fs::read(a.join(n)).unwrap(), fs::read(b.join(n)).unwrap(), "{n:?} differs");
    }
    let mut objects = 0;
    for m in ["train.txt", "test.txt"] {
        for e in dataset::parse_manifest(a.join(m)).unwrap() {
            for o in &e.objects {
                let bb = o.bbox;
                assert!(bb.x1 >= 0.0 && bb.y1 >= 0.0 && bb.x2 <= 64.0 && bb.y2 <= 64.0);
                objects += 1;
            }
        }
        let lines = fs::read_to_string(a.join(m)).unwrap().lines().count();
        let listed: usize = dataset::parse_manifest(a.join(m)).unwrap().iter().map(|e| e.objects.len()).sum();
        assert_eq!(lines, listed);
    }
    assert!(objects >= 24);
}

#[test]
fn synth_other_seed_differs() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["synth", "--out", p(&a), "--images", "12", "--seed", "3"]);
    ok(&["synth", "--out", p(&b), "--images", "12", "--seed", "4"]);
    assert_ne!(fs::read(a.join("img_0000.pgm")).unwrap(), fs::read(b.join("img_0000.pgm")).unwrap());
}

#[test]
fn exit_codes() {
    assert_eq!(run(&[]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["--version"]).status.code(), Some(0));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["train", "--manifest", "x.txt"]).status.code(), Some(1));
    assert_eq!(run(&["detect", "--model", "m", "--scan", "s.csv", "img.pgm"]).status.code(), Some(1));
    assert_eq!(run(&["detect", "--model", "m", "--policy", "sometimes", "img.pgm"]).status.code(), Some(1));

    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.txt");
    let model = dir.path().join("m.fsm");
    assert_eq!(run(&["train", "--manifest", p(&missing), "--out", p(&model)]).status.code(), Some(2));
    fs::write(&model, b"not a model").unwrap();
    let manifest = dir.path().join("list.txt");
    fs::write(&manifest, "a.pgm\n").unwrap();
    assert_eq!(run(&["eval", "--model", p(&model), "--manifest", p(&manifest)]).status.code(), Some(2));
    let few = dir.path().join("few");
    assert_eq!(run(&["synth", "--out", p(&few), "--images", "2"]).status.code(), Some(2));
}

#[test]
fn train_is_deterministic_and_tagged() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    ok(&["synth", "--out", p(&data), "--images", "15", "--train-fraction", "1.0", "--seed", "8"]);
    let manifest = data.join("train.txt");
    let mut bytes = Vec::new();
    for name in ["a.fsm", "b.fsm"] {
        let out = dir.path().join(name);
        let text = ok(&[
            "train", "--manifest", p(&manifest), "--out", p(&out), "--fusion", "scale", "--head", "cnn1c", "--epochs", "2",
            "--seed", "4",
        ]);
        assert!(text.contains("{F_G, CNN_1C}"), "{text}");
        bytes.push(fs::read(&out).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);
    let model = model_io::load_model(dir.path().join("a.fsm")).unwrap();
    assert_eq!(model.config.fusion.to_string(), "scale");
    assert_eq!(model.config.head.to_string(), "CNN_1C");
}

#[test]
fn train_writes_metrics_and_gradient_stats() {
    let t = trained();
    assert!(t.train_out.contains("{intensity, CNN_1C}"), "{}", t.train_out);
    let metrics = fs::read_to_string(t.root.join("model.metrics.csv")).unwrap();
    let rows: Vec<&str> = metrics.lines().collect();
    assert_eq!(rows[0], "epoch,loss,accuracy,lr");
    // header plus the default 40 epochs
    assert_eq!(rows.len(), 41);
    assert!(rows[40].ends_with(",0.005"), "{}", rows[40]);
    let grads = fs::read_to_string(t.root.join("model.gradstats.csv")).unwrap();
    assert!(grads.starts_with("epoch,layer,mean_norm,std_norm\n"));
    for line in grads.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        assert!(f[2].parse::<f64>().unwrap().is_finite() && f[3].parse::<f64>().unwrap().is_finite());
    }
}

fn accuracy_line(report: &str) -> String {
    report.lines().find(|l| l.starts_with("ROI classification accuracy")).unwrap().to_string()
}

#[test]
fn eval_reports_and_is_order_invariant() {
    let t = trained();
    let manifest = t.root.join("data/train.txt");
    let report = ok(&["eval", "--model", p(&t.model), "--manifest", p(&manifest)]);
    let line = accuracy_line(&report);
    let acc: f64 = line.split_whitespace().nth(3).unwrap().parse().unwrap();
    assert!(acc >= 0.25, "{report}");
    for c in ["person", "car", "sign"] {
        assert!(report.contains(&format!("  {c}: ")), "{report}");
    }

    let mut lines: Vec<String> = fs::read_to_string(&manifest).unwrap().lines().map(String::from).collect();
    lines.reverse();
    let shuffled = t.root.join("data/reversed.txt");
    fs::write(&shuffled, lines.join("\n") + "\n").unwrap();
    let again = ok(&["eval", "--model", p(&t.model), "--manifest", p(&shuffled)]);
    assert_eq!(line, accuracy_line(&again));

    let background = t.root.join("data/background.txt");
    fs::write(&background, "img_0000.pgm\nimg_0001.pgm\n").unwrap();
    let none = ok(&["eval", "--model", p(&t.model), "--manifest", p(&background)]);
    assert!(none.contains("no positive ROIs"), "{none}");

    let svm = ok(&["eval", "--model", p(&t.model), "--manifest", p(&manifest), "--svm-on-test"]);
    assert!(svm.contains("linear SVM on pooled features (trained on the evaluated manifest)"), "{svm}");
}

#[test]
fn detect_with_simulated_wall_reports_distance() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("car.pgm");
    centered_car(&img);
    let scan = dir.path().join("scan.csv");
    let calib = dir.path().join("calib.txt");
    ok(&["simulate-scan", "--wall", "900", "--out", p(&scan), "--write-calib", p(&calib)]);
    assert_eq!(fs::read_to_string(&scan).unwrap().lines().count(), 668);
    assert_eq!(fs::read_to_string(&calib).unwrap().lines().count(), 9);

    let out = ok(&["detect", "--model", p(&t.model), "--scan", p(&scan), "--calib", p(&calib), p(&img)]);
    let lines = json_lines(&out);
    let dets = of_type(&lines, "detection");
    assert_eq!(dets.len(), 1, "{out}");
    let d = dets[0];
    assert_eq!(d["class"], "car", "{out}");
    assert_eq!(d["distance_mm"], 900, "{out}");
    assert_eq!(d["grid_cell"][1], 1);
    let ann = of_type(&lines, "announcement");
    assert_eq!(ann.len(), 1);
    assert_eq!(ann[0]["text"], "car ahead at 900 millimeters");
    assert_eq!(ann[0]["urgency"], "urgent");
}

#[test]
fn detect_without_scan_reports_unknown() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("car.pgm");
    centered_car(&img);
    let out_file = dir.path().join("dets.jsonl");
    let printed = ok(&["detect", "--model", p(&t.model), "--out", p(&out_file), p(&img)]);
    let lines = json_lines(&fs::read_to_string(&out_file).unwrap());
    let dets = of_type(&lines, "detection");
    assert!(!dets.is_empty());
    assert!(dets.iter().all(|d| d["distance_mm"] == "unknown" && d["laser_band"].is_null()));
    // with a JSON-lines file, announcements also go to standard output
    assert!(printed.contains("distance unknown"), "{printed}");
}

#[test]
fn detect_matches_library_for_intensity_only_model() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("car.pgm");
    centered_car(&img);
    let out = ok(&["detect", "--model", p(&t.model), p(&img)]);
    let lines = json_lines(&out);
    let dets = of_type(&lines, "detection");

    let model = model_io::load_model(&t.model).unwrap();
    assert_eq!(model.config.fusion.to_string(), "none");
    let image = fusionsight::imaging::load_image(&img).unwrap();
    let inputs = detector::prepare_inputs(&image, None, &model.config).unwrap();
    assert_eq!(inputs.len(), 1);
    let lib = detector::detect(&model, &inputs, 64, 64, &DetectOptions::default()).unwrap();
    assert_eq!(dets.len(), lib.len());
    for (d, l) in dets.iter().zip(&lib) {
        assert_eq!(d["score"].as_f64().unwrap(), l.score);
        let b: Vec<f64> = d["box"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
        assert_eq!(b, l.bbox.as_array());
    }
}

#[test]
fn detect_with_no_proposals_is_empty_and_succeeds() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("car.pgm");
    centered_car(&img);
    let o = run(&["detect", "--model", p(&t.model), "--min-objectness", "1.5", p(&img)]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).trim().is_empty());
}

#[test]
fn detect_survives_failing_speech_command_and_watches_dirs() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let watch = dir.path().join("frames");
    fs::create_dir(&watch).unwrap();
    centered_car(&watch.join("f1.pgm"));
    centered_car(&watch.join("f2.pgm"));
    let out = ok(&[
        "detect",
        "--model",
        p(&t.model),
        "--watch-dir",
        p(&watch),
        "--idle-timeout",
        "0.3",
        "--policy",
        "interval:5",
        "--speak-cmd",
        "false",
    ]);
    let lines = json_lines(&out);
    let dets = of_type(&lines, "detection");
    assert!(dets.len() >= 2, "{out}");
    assert!(dets.iter().any(|d| d["image"].as_str().unwrap().ends_with("f2.pgm")));
    // the second frame comes one second later, inside the five second window
    assert_eq!(of_type(&lines, "announcement").len(), 1);
}

#[test]
fn gradcheck_and_simulate_scan_run() {
    let out = ok(&["gradcheck", "--fusion", "flow", "--coords", "12", "--seed", "2"]);
    assert!(out.contains("F_O CNN_1C: 12 coordinates") && out.contains(": ok"), "{out}");
    let csv = ok(&["simulate-scan", "--circle", "0,0,500"]);
    let ranges: Vec<f64> = csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(ranges.len(), 667);
    assert!(ranges.iter().all(|&r| (r - 500.0).abs() < 1e-9));
    assert_eq!(run(&["simulate-scan", "--box", "5,1,2,3"]).status.code(), Some(1));
}
