use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dynshift::dynshift::{BandwidthBank, IterationSchedule, ModelFile, ShiftModel};
use dynshift::experiment::{training_samples, ModelSpec};
use dynshift::fusion::PanopticPrediction;
use dynshift::metrics::panoptic_quality;
use dynshift::scene::{labels_to_bytes, points_to_bytes};
use dynshift::synth::{load_frame, FEATURE_WIDTH};
use dynshift::{PointCloud, SceneLabels, SemanticScheme};
use serde_json::Value;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dynshift"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> Value {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

fn err(args: &[&str]) -> (i32, Value) {
    let out = run(args);
    assert!(!out.status.success());
    let v: Value = serde_json::from_slice(&out.stderr).unwrap();
    (out.status.code().unwrap(), v["error"].clone())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("run.toml");
    fs::write(&p, text).unwrap();
    p
}

fn read_json(p: &Path) -> Value {
    serde_json::from_slice(&fs::read(p).unwrap()).unwrap()
}

/// Every file under `dir` with its bytes, sorted by relative path.
fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn gen(dir: &Path, name: &str, scenes: usize) -> PathBuf {
    let cfg = write_config(dir, &format!("[data]\nscenes = {scenes}\n"));
    let out = dir.join(name);
    ok(&["gen", "--config", s(&cfg), "--seed", "3", "--out", s(&out)]);
    out
}

/// Writes frame `stem` of a hand-made dataset without a sidecar.
fn write_frame(root: &Path, stem: &str, points: Vec<[f64; 3]>, labels: &SceneLabels) {
    for d in ["velodyne", "labels"] {
        fs::create_dir_all(root.join(d)).unwrap();
    }
    let n = points.len();
    let cloud = PointCloud::new(points, vec![0.0; n]).unwrap();
    fs::write(
        root.join("velodyne").join(format!("{stem}.bin")),
        points_to_bytes(&cloud),
    )
    .unwrap();
    fs::write(
        root.join("labels").join(format!("{stem}.label")),
        labels_to_bytes(labels),
    )
    .unwrap();
}

#[test]
fn gen_single_scene_manifest_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen(dir.path(), "a", 1);
    let m = read_json(&a.join("manifest.json"));
    let scenes = m["scenes"].as_array().unwrap();
    assert_eq!(scenes.len(), 1);
    assert_eq!(scenes[0]["seed"], 3);
    assert_eq!(m["config"]["synth"]["seed"], 3);

    let b = gen(dir.path(), "b", 1);
    assert_eq!(tree(&a), tree(&b));
}

#[test]
fn gen_into_unwritable_location_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, b"x").unwrap();
    let (code, e) = err(&["gen", "--out", s(&blocker.join("sub"))]);
    assert_eq!(e["category"], "io");
    assert_eq!(code, 4);
}

#[test]
fn meanshift_separates_two_blobs() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("blobs");
    let mut pts = Vec::new();
    for c in [[10.0, 0.0, 0.0], [20.0, 0.0, 0.0]] {
        for k in 0..20 {
            pts.push([c[0] + 0.05 * (k % 5) as f64, c[1] + 0.05 * (k / 5) as f64, c[2]]);
        }
    }
    let inst: Vec<u16> = (0..40).map(|i| if i < 20 { 1 } else { 2 }).collect();
    write_frame(&root, "000000", pts, &SceneLabels::new(vec![10; 40], inst).unwrap());
    let out = dir.path().join("pred");
    let r = ok(&["cluster", "--data", s(&root), "--algo", "meanshift", "--out", s(&out)]);
    assert_eq!(r["instances"], 2);
    let e = ok(&[
        "eval",
        "--data",
        s(&root),
        "--pred",
        s(&out),
        "--out",
        s(&dir.path().join("e")),
    ]);
    assert_eq!(e["report"]["pq_th"], 1.0);
}

#[test]
fn dynshift_without_model_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d", 1);
    let (code, e) = err(&[
        "cluster",
        "--data",
        s(&data),
        "--algo",
        "dynshift",
        "--out",
        s(&dir.path().join("p")),
    ]);
    assert_eq!(e["category"], "config");
    assert_eq!(code, 2);
    let (_, e) = err(&[
        "cluster",
        "--data",
        s(&data),
        "--algo",
        "nonsense",
        "--out",
        s(&dir.path().join("p")),
    ]);
    assert_eq!(e["category"], "config");
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[cluster]\nbandwith = 0.5\n");
    let (code, e) = err(&["gen", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(e["category"], "config");
    assert_eq!(code, 2);
    assert!(!dir.path().join("o").exists());
}

#[test]
fn training_pipeline_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d", 4);
    let cfg = write_config(
        dir.path(),
        "[train]\nepochs = 2\n[model]\nhidden = [8]\niterations = 2\n",
    );
    let m1 = dir.path().join("m1");
    let m2 = dir.path().join("m2");
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&m1)]);
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&m2)]);
    assert_eq!(
        fs::read(m1.join("model.dsm")).unwrap(),
        fs::read(m2.join("model.dsm")).unwrap()
    );
    let curve = fs::read_to_string(m1.join("loss_curve.csv")).unwrap();
    assert_eq!(curve.lines().next().unwrap(), "epoch,total,l1,l2");
    assert_eq!(curve.lines().count(), 4);

    let model = m1.join("model.dsm");
    let p1 = dir.path().join("p1");
    let r = ok(&[
        "cluster",
        "--data",
        s(&data),
        "--algo",
        "dynshift",
        "--model",
        s(&model),
        "--out",
        s(&p1),
    ]);
    assert!(r["timing"]["cluster_ms_per_frame"].as_f64().unwrap() >= 0.0);
    // Rerunning from the embedded config reproduces the predictions.
    let report = p1.join("cluster_report.json");
    let p2 = dir.path().join("p2");
    ok(&[
        "cluster",
        "--config",
        s(&report),
        "--data",
        s(&data),
        "--model",
        s(&model),
        "--out",
        s(&p2),
    ]);
    assert_eq!(tree(&p1.join("predictions")), tree(&p2.join("predictions")));

    let (_, e) = err(&[
        "cluster",
        "--data",
        s(&data),
        "--algo",
        "direct",
        "--model",
        s(&model),
        "--out",
        s(&p2),
    ]);
    assert_eq!(e["category"], "config");
}

#[test]
fn zero_epochs_keeps_initialisation() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d", 3);
    let cfg = write_config(dir.path(), "[train]\nepochs = 0\n[model]\nhidden = [8]\n");
    let out = dir.path().join("m");
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&out)]);

    let scheme = SemanticScheme::from_file(&data.join("scheme.txt")).unwrap();
    let frames: Vec<_> = ["000000", "000001", "000002"]
        .iter()
        .map(|st| load_frame(&data, st, &scheme).unwrap())
        .collect();
    let samples = training_samples(&frames, 10_000, 3).unwrap();
    let spec = ModelSpec {
        hidden: vec![8],
        seed: 3,
        ..ModelSpec::default()
    };
    let expected = ModelFile::Weighted(spec.init_weighted(&samples).unwrap());
    // The dataset was generated with seed 3; training ran with the config's seed 0.
    let spec0 = ModelSpec { seed: 0, ..spec };
    let samples0 = training_samples(&frames, 10_000, 0).unwrap();
    let expected0 = ModelFile::Weighted(spec0.init_weighted(&samples0).unwrap());
    let got = ModelFile::load(&out.join("model.dsm")).unwrap();
    assert_eq!(got, expected0);
    assert_ne!(got, expected);
}

#[test]
fn default_training_halves_the_loss() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d", 20);
    let r = ok(&["train", "--data", s(&data), "--out", s(&dir.path().join("m"))]);
    let initial = r["initial_loss"]["total"].as_f64().unwrap();
    let last = r["final_loss"]["total"].as_f64().unwrap();
    assert!(last < 0.5 * initial, "initial {initial} final {last}");
}

#[test]
fn eval_ground_truth_and_alignment() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d", 2);
    let e = ok(&[
        "eval",
        "--data",
        s(&data),
        "--pred",
        s(&data.join("labels")),
        "--out",
        s(&dir.path().join("e")),
    ]);
    for k in ["pq", "sq", "rq", "pq_dagger", "pq_th", "pq_st", "miou"] {
        assert_eq!(e["report"][k], 1.0, "{k}");
    }
    let csv = fs::read_to_string(dir.path().join("e").join("eval.csv")).unwrap();
    assert_eq!(
        csv.lines().next().unwrap(),
        "class_id,class_name,kind,tp,fp,fn,pq,sq,rq,iou"
    );

    let partial = dir.path().join("partial");
    fs::create_dir_all(&partial).unwrap();
    fs::copy(data.join("labels/000000.label"), partial.join("000000.label")).unwrap();
    let (code, e) = err(&[
        "eval",
        "--data",
        s(&data),
        "--pred",
        s(&partial),
        "--out",
        s(&dir.path().join("e2")),
    ]);
    assert_eq!(e["category"], "data");
    assert_eq!(code, 3);
}

#[test]
fn eval_matches_library_on_micro_scenes() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("micro");
    let pred_dir = dir.path().join("pred");
    fs::create_dir_all(&pred_dir).unwrap();
    let scheme = SemanticScheme::synthetic();
    let mut gts = Vec::new();
    let mut preds = Vec::new();
    for f in 0..6u16 {
        let n = 12 + f as usize;
        let sem: Vec<u16> = (0..n).map(|i| [10, 30, 40, 0][(i + f as usize) % 4]).collect();
        let inst: Vec<u16> = (0..n)
            .map(|i| {
                if sem[i] == 10 || sem[i] == 30 {
                    1 + (i % 2) as u16
                } else {
                    0
                }
            })
            .collect();
        let gt = SceneLabels::new(sem.clone(), inst).unwrap();
        let pinst: Vec<u16> = (0..n)
            .map(|i| {
                if sem[i] == 10 || sem[i] == 30 {
                    1 + (i + f as usize).is_multiple_of(3) as u16
                } else {
                    0
                }
            })
            .collect();
        let psem: Vec<u16> = sem
            .iter()
            .enumerate()
            .map(|(i, &c)| if i == 0 { 50 } else { c })
            .collect();
        let pred = SceneLabels::new(psem, pinst).unwrap();
        let stem = format!("{f:06}");
        write_frame(&root, &stem, (0..n).map(|i| [i as f64, 0.0, 0.0]).collect(), &gt);
        fs::write(pred_dir.join(format!("{stem}.label")), labels_to_bytes(&pred)).unwrap();
        gts.push(gt);
        preds.push(PanopticPrediction::from_labels(&pred));
    }
    let expected = panoptic_quality(&gts, &preds, &scheme).unwrap();
    let e = ok(&[
        "eval",
        "--data",
        s(&root),
        "--pred",
        s(&pred_dir),
        "--out",
        s(&dir.path().join("e")),
    ]);
    assert_eq!(e["report"], serde_json::to_value(&expected).unwrap());
}

fn bandwidth_rows(path: &Path) -> Vec<(String, f64)> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[1].to_string(), f[3].parse().unwrap())
        })
        .collect()
}

const NO_SWEEPS: &str = "[analyze]\ncandidate_sets = []\niterations = []\nmeanshift_grid = [0.65]\n";

#[test]
fn analyze_with_uniform_head_and_one_class() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &format!(
            "{NO_SWEEPS}[data]\nscenes = 2\n[[synth.things]]\nid = 10\nname = \"vehicle\"\nlength = [3.5, 5.0]\nwidth = [1.6, 2.0]\nheight = [1.4, 1.7]\ncount = 3\n"
        ),
    );
    let data = dir.path().join("d");
    ok(&["gen", "--config", s(&cfg), "--out", s(&data)]);
    let bank = BandwidthBank::new(vec![0.2, 1.7, 3.2]).unwrap();
    let model = ShiftModel::uniform(bank, IterationSchedule::uniform(4).unwrap(), FEATURE_WIDTH, &[4]).unwrap();
    let mpath = dir.path().join("uniform.dsm");
    ModelFile::Weighted(model).save(&mpath).unwrap();
    let out = dir.path().join("a");
    ok(&[
        "analyze",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--model",
        s(&mpath),
        "--out",
        s(&out),
    ]);
    let rows = bandwidth_rows(&out.join("bandwidth_by_class.csv"));
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].0, "vehicle");
    assert!((rows[0].1 - 1.7).abs() < 1e-12);
    let iters = fs::read_to_string(out.join("bandwidth_by_iteration.csv")).unwrap();
    assert_eq!(iters.lines().count(), 5);
    for f in [
        "density_profile.csv",
        "meanshift_sweep.csv",
        "candidate_sweep.csv",
        "iteration_sweep.csv",
        "analyze_report.json",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn analyze_trained_vehicle_bandwidth_exceeds_pedestrian() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d", 20);
    let cfg = write_config(dir.path(), NO_SWEEPS);
    let out = dir.path().join("a");
    ok(&["analyze", "--config", s(&cfg), "--data", s(&data), "--out", s(&out)]);
    let rows = bandwidth_rows(&out.join("bandwidth_by_class.csv"));
    let get = |n: &str| rows.iter().find(|r| r.0 == n).unwrap().1;
    assert!(get("vehicle") > get("pedestrian"), "{rows:?}");
}
