use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use dynshift::dynshift::{train, ModelFile, ShiftModel, Trainable};
use dynshift::experiment::{
    bandwidth_by_class, candidate_sweep, cluster_frame, iteration_sweep, mean_shift_sweep, predict_frame,
    training_samples, Bench, Clusterer, SweepRow,
};
use dynshift::fusion::PanopticPrediction;
use dynshift::metrics::panoptic_quality;
use dynshift::scene::{decode_label, labels_to_bytes, points_to_bytes, read_labels, read_raw_labels};
use dynshift::synth::{density_profile, gen_scene, load_frame, sidecar_to_bytes, write_atomic, Frame, FramePaths};
use dynshift::SemanticScheme;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::{Algo, ModelKind, RunConfig};
use crate::error::{CliError, CliResult};

const SCHEME_FILE: &str = "scheme.txt";
const MANIFEST_FILE: &str = "manifest.json";
const PREDICTIONS_DIR: &str = "predictions";
pub const MODEL_FILE: &str = "model.dsm";

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes()).map_err(Into::into)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::io(path, e))?;
    write_atomic(path, &bytes).map_err(Into::into)
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn stem(index: u64) -> String {
    format!("{index:06}")
}

#[derive(Serialize)]
struct ManifestEntry {
    index: u64,
    stem: String,
    seed: u64,
    points: usize,
    instances: usize,
    sha256: FileHashes,
}

#[derive(Serialize)]
struct FileHashes {
    points: String,
    labels: String,
    aux: String,
}

/// Generates `data.scenes` scenes starting at `data.start`. Each scene is
/// built in memory before any of its files is written.
pub fn gen(cfg: &RunConfig, out: &Path) -> CliResult<serde_json::Value> {
    let scheme = cfg.synth.scheme()?;
    for sub in ["velodyne", "labels", "aux"] {
        create_dir(&out.join(sub))?;
    }
    let start = cfg.data.start;
    let entries = (start..start + cfg.data.scenes as u64)
        .into_par_iter()
        .map(|index| -> CliResult<ManifestEntry> {
            let scene = gen_scene(&cfg.synth, index)?;
            let s = stem(index);
            let paths = FramePaths::new(out, &s);
            let points = points_to_bytes(&scene.cloud);
            let labels = labels_to_bytes(&scene.labels);
            let aux = sidecar_to_bytes(&scene.sidecar());
            write_atomic(&paths.points, &points)?;
            write_atomic(&paths.labels, &labels)?;
            write_atomic(&paths.aux, &aux)?;
            Ok(ManifestEntry {
                index,
                stem: s,
                seed: cfg.synth.seed,
                points: scene.cloud.len(),
                instances: scene.instances.len(),
                sha256: FileHashes {
                    points: hex_digest(&points),
                    labels: hex_digest(&labels),
                    aux: hex_digest(&aux),
                },
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    let scheme_path = out.join(SCHEME_FILE);
    write_atomic(&scheme_path, scheme.to_text().as_bytes())?;
    let manifest = json!({ "command": "gen", "config": cfg, "scenes": entries });
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    Ok(json!({ "command": "gen", "scenes": entries.len(), "out": out }))
}

/// Frame stems of a dataset, from its point files, in sorted order.
fn list_stems(root: &Path) -> CliResult<Vec<String>> {
    let dir = root.join("velodyne");
    let mut stems = Vec::new();
    for entry in fs::read_dir(&dir).map_err(|e| CliError::io(&dir, e))? {
        let path = entry.map_err(|e| CliError::io(&dir, e))?.path();
        if path.extension().is_some_and(|e| e == "bin") {
            if let Some(s) = path.file_stem().and_then(|s| s.to_str()) {
                stems.push(s.to_string());
            }
        }
    }
    stems.sort();
    if stems.is_empty() {
        return Err(CliError::data(format!("{}: no frames", dir.display())));
    }
    Ok(stems)
}

fn load_scheme(root: &Path) -> CliResult<SemanticScheme> {
    let path = root.join(SCHEME_FILE);
    if path.exists() {
        Ok(SemanticScheme::from_file(&path)?)
    } else {
        Ok(SemanticScheme::synthetic())
    }
}

struct Dataset {
    scheme: SemanticScheme,
    stems: Vec<String>,
    frames: Vec<Frame>,
}

fn load_dataset(root: &Path) -> CliResult<Dataset> {
    let scheme = load_scheme(root)?;
    let stems = list_stems(root)?;
    let frames = stems
        .par_iter()
        .map(|s| load_frame(root, s, &scheme).map_err(CliError::from))
        .collect::<CliResult<Vec<_>>>()?;
    Ok(Dataset { scheme, stems, frames })
}

fn load_model(path: Option<&Path>) -> CliResult<Option<ModelFile>> {
    path.map(|p| ModelFile::load(p).map_err(CliError::from)).transpose()
}

fn clusterer<'a>(cfg: &RunConfig, algo: Algo, model: Option<&'a ModelFile>) -> CliResult<Clusterer<'a>> {
    let c = &cfg.cluster;
    Ok(match (algo, model) {
        (Algo::Bfs, _) => Clusterer::Bfs { radius: c.bfs_radius },
        (Algo::Dbscan, _) => Clusterer::Dbscan {
            eps: c.dbscan_eps,
            min_pts: c.dbscan_min_pts,
        },
        (Algo::Meanshift, _) => Clusterer::MeanShift(c.mean_shift(c.bandwidth)),
        (Algo::Dynshift, Some(ModelFile::Weighted(m))) => Clusterer::DynShift {
            model: m,
            forward: c.forward(),
        },
        (Algo::Direct, Some(ModelFile::Direct(m))) => Clusterer::Direct {
            model: m,
            forward: c.forward(),
        },
        (Algo::Dynshift | Algo::Direct, None) => {
            return Err(CliError::config(format!("algorithm {} needs --model", algo.name())));
        }
        (Algo::Dynshift | Algo::Direct, Some(_)) => {
            return Err(CliError::config(format!(
                "model file does not match algorithm {}",
                algo.name()
            )));
        }
    })
}

/// Clusters every frame of `data` and writes one prediction label file per frame.
pub fn cluster(
    cfg: &RunConfig,
    algo: Algo,
    model_path: Option<&Path>,
    data: &Path,
    out: &Path,
) -> CliResult<serde_json::Value> {
    if algo.needs_model() && model_path.is_none() {
        return Err(CliError::config(format!("algorithm {} needs --model", algo.name())));
    }
    let model = load_model(model_path)?;
    let method = clusterer(cfg, algo, model.as_ref())?;
    let ds = load_dataset(data)?;
    let pred_dir = out.join(PREDICTIONS_DIR);
    create_dir(&pred_dir)?;
    let started = Instant::now();
    let stats = ds
        .frames
        .par_iter()
        .zip(&ds.stems)
        .map(|(frame, s)| -> CliResult<(f64, usize)> {
            let t = Instant::now();
            let assignment = cluster_frame(frame, &method, cfg.cluster.min_instance_points)?;
            let seconds = t.elapsed().as_secs_f64();
            let pred = predict_frame(frame, &assignment, &ds.scheme)?;
            let labels = pred.to_labels()?;
            write_atomic(&pred_dir.join(format!("{s}.label")), &labels_to_bytes(&labels))?;
            Ok((seconds, assignment.num_clusters()))
        })
        .collect::<CliResult<Vec<_>>>()?;
    let total: f64 = stats.iter().map(|s| s.0).sum();
    let report = json!({
        "command": "cluster",
        "config": cfg,
        "algo": algo,
        "model": model_path,
        "data": data,
        "frames": stats.len(),
        "instances": stats.iter().map(|s| s.1).sum::<usize>(),
        "timing": {
            "wall_seconds": started.elapsed().as_secs_f64(),
            "cluster_seconds_total": total,
            "cluster_ms_per_frame": 1e3 * total / stats.len() as f64,
            "cluster_ms_max": 1e3 * stats.iter().map(|s| s.0).fold(0.0, f64::max),
        },
    });
    write_json(&out.join("cluster_report.json"), &report)?;
    Ok(report)
}

fn curve_rows(curve: &[dynshift::dynshift::EpochStats]) -> Vec<Vec<String>> {
    let mut rows = Vec::with_capacity(curve.len() + 1);
    let width = curve.first().map_or(0, |e| e.loss.per_iteration.len());
    let mut header = vec!["epoch".to_string(), "total".to_string()];
    header.extend((1..=width).map(|i| format!("l{i}")));
    rows.push(header);
    for e in curve {
        let mut r = vec![e.epoch.to_string(), e.loss.total.to_string()];
        r.extend(e.loss.per_iteration.iter().map(|v| v.to_string()));
        rows.push(r);
    }
    rows
}

fn write_rows(path: &Path, rows: &[Vec<String>]) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.write_record(r)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::io(path, e))?;
    write_atomic(path, &bytes).map_err(Into::into)
}

fn fit<T: Trainable>(
    init: &T,
    cfg: &RunConfig,
    samples: &[dynshift::dynshift::TrainingSample],
) -> CliResult<(T, Vec<dynshift::dynshift::EpochStats>)> {
    Ok(train(init, samples, &cfg.train)?)
}

/// Trains a model on the frames of `data`; writes the model and its loss curve.
pub fn train_cmd(cfg: &RunConfig, data: &Path, out: &Path) -> CliResult<serde_json::Value> {
    let ds = load_dataset(data)?;
    let samples = training_samples(&ds.frames, cfg.cluster.seed_count, cfg.cluster.seed)?;
    let spec = cfg.model.spec();
    let (model, curve) = match cfg.model.kind {
        ModelKind::Weighted => {
            let (m, c) = fit(&spec.init_weighted(&samples)?, cfg, &samples)?;
            (ModelFile::Weighted(m), c)
        }
        ModelKind::Direct => {
            let (m, c) = fit(&spec.init_direct(&samples)?, cfg, &samples)?;
            (ModelFile::Direct(m), c)
        }
    };
    create_dir(out)?;
    let model_path = out.join(MODEL_FILE);
    let bytes = model.to_bytes();
    write_atomic(&model_path, &bytes)?;
    write_rows(&out.join("loss_curve.csv"), &curve_rows(&curve))?;
    let report = json!({
        "command": "train",
        "config": cfg,
        "data": data,
        "frames": ds.frames.len(),
        "samples": samples.len(),
        "model": model_path,
        "model_sha256": hex_digest(&bytes),
        "initial_loss": curve.first().map(|e| &e.loss),
        "final_loss": curve.last().map(|e| &e.loss),
        "curve": curve,
    });
    write_json(&out.join("train_report.json"), &report)?;
    Ok(report)
}

/// Scores the prediction label files under `pred` against the ground truth of `data`.
pub fn eval(cfg: &RunConfig, data: &Path, pred: &Path, out: &Path) -> CliResult<serde_json::Value> {
    let scheme = load_scheme(data)?;
    let stems = list_stems(data)?;
    let pred_dir = if pred.join(PREDICTIONS_DIR).is_dir() {
        pred.join(PREDICTIONS_DIR)
    } else {
        pred.to_path_buf()
    };
    let mut pred_stems: Vec<String> = fs::read_dir(&pred_dir)
        .map_err(|e| CliError::io(&pred_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "label"))
        .filter_map(|p| p.file_stem().and_then(|s| s.to_str()).map(String::from))
        .collect();
    pred_stems.sort();
    if pred_stems != stems {
        return Err(CliError::data(format!(
            "alignment: {} ground-truth frames but {} prediction files (or differing names)",
            stems.len(),
            pred_stems.len()
        )));
    }
    let pairs = stems
        .par_iter()
        .map(|s| -> CliResult<_> {
            let gt = read_labels(&FramePaths::new(data, s).labels, &scheme)?;
            let raw = read_raw_labels(&pred_dir.join(format!("{s}.label")))?;
            let (semantic, instance) = raw.iter().map(|&r| decode_label(r)).map(|(c, i)| (c, i as u32)).unzip();
            Ok((gt, PanopticPrediction::new(semantic, instance)?))
        })
        .collect::<CliResult<Vec<_>>>()?;
    let (gt, preds): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    let report = panoptic_quality(&gt, &preds, &scheme)?;
    create_dir(out)?;
    write_csv(&out.join("eval.csv"), &report.class_rows())?;
    let doc = json!({ "command": "eval", "config": cfg, "data": data, "pred": pred, "report": report });
    write_json(&out.join("eval.json"), &doc)?;
    Ok(doc)
}

#[derive(Serialize)]
struct ClassBandwidthRow {
    class_id: u16,
    class_name: String,
    points: usize,
    mean_bandwidth: f64,
}

#[derive(Serialize)]
struct IterationBandwidthRow {
    iteration: usize,
    class_id: u16,
    class_name: String,
    points: usize,
    mean_bandwidth: f64,
}

#[derive(Serialize)]
struct SweepCsvRow {
    label: String,
    pq: f64,
    sq: f64,
    rq: f64,
    pq_th: f64,
    sq_th: f64,
    rq_th: f64,
    per_iteration_loss: String,
}

fn sweep_csv(rows: &[SweepRow]) -> Vec<SweepCsvRow> {
    rows.iter()
        .map(|r| SweepCsvRow {
            label: r.label.clone(),
            pq: r.pq,
            sq: r.sq,
            rq: r.rq,
            pq_th: r.pq_th,
            sq_th: r.sq_th,
            rq_th: r.rq_th,
            per_iteration_loss: r
                .per_iteration_loss
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(";"),
        })
        .collect()
}

/// Writes the analysis tables. Models are trained on `data` and scored on
/// `val`; the bandwidth tables use `--model` when given, else a freshly
/// trained model of the configured spec.
pub fn analyze(
    cfg: &RunConfig,
    data: &Path,
    val: &Path,
    model_path: Option<&Path>,
    out: &Path,
) -> CliResult<serde_json::Value> {
    let train_ds = load_dataset(data)?;
    let val_ds = if val == data { None } else { Some(load_dataset(val)?) };
    let val_ds = val_ds.as_ref().unwrap_or(&train_ds);
    let scheme = &val_ds.scheme;
    let seeds = cfg.cluster.seed_count;
    let train_samples = training_samples(&train_ds.frames, seeds, cfg.cluster.seed)?;
    let val_samples = training_samples(&val_ds.frames, seeds, cfg.cluster.seed)?;
    let bench = Bench {
        train: &train_samples,
        val_frames: &val_ds.frames,
        val_samples: &val_samples,
        train_cfg: cfg.train,
        forward: cfg.cluster.forward(),
        min_instance_points: cfg.cluster.min_instance_points,
        scheme,
    };
    create_dir(out)?;
    let mut files: Vec<PathBuf> = Vec::new();
    let mut emit = |name: &str| {
        let p = out.join(name);
        files.push(p.clone());
        p
    };

    write_csv(
        &emit("density_profile.csv"),
        &density_profile(&val_ds.frames, cfg.analyze.bin_width)?,
    )?;

    let model: ShiftModel = match load_model(model_path)? {
        Some(ModelFile::Weighted(m)) => m,
        Some(ModelFile::Direct(_)) => {
            return Err(CliError::config("bandwidth analysis needs a weighted model"));
        }
        None => bench.run(&cfg.model.spec())?.model,
    };
    let rows = bandwidth_by_class(&model, &val_ds.frames, scheme)?;
    let by_class: Vec<_> = rows
        .iter()
        .filter(|r| r.iteration.is_none())
        .map(|r| ClassBandwidthRow {
            class_id: r.class_id,
            class_name: r.class_name.clone(),
            points: r.points,
            mean_bandwidth: r.mean_bandwidth,
        })
        .collect();
    let mut by_iter: Vec<_> = rows
        .iter()
        .filter_map(|r| {
            r.iteration.map(|it| IterationBandwidthRow {
                iteration: it,
                class_id: r.class_id,
                class_name: r.class_name.clone(),
                points: r.points,
                mean_bandwidth: r.mean_bandwidth,
            })
        })
        .collect();
    by_iter.sort_by_key(|r| (r.iteration, r.class_id));
    write_csv(&emit("bandwidth_by_class.csv"), &by_class)?;
    write_csv(&emit("bandwidth_by_iteration.csv"), &by_iter)?;

    let ms = mean_shift_sweep(
        &val_ds.frames,
        &cfg.analyze.meanshift_grid,
        cfg.cluster.min_instance_points,
        scheme,
    )?;
    write_csv(&emit("meanshift_sweep.csv"), &sweep_csv(&ms))?;
    let spec = cfg.model.spec();
    let cand = candidate_sweep(&bench, &spec, &cfg.analyze.candidate_sets)?;
    write_csv(&emit("candidate_sweep.csv"), &sweep_csv(&cand))?;
    let iters = iteration_sweep(&bench, &spec, &cfg.analyze.iterations)?;
    write_csv(&emit("iteration_sweep.csv"), &sweep_csv(&iters))?;

    let report = json!({
        "command": "analyze",
        "config": cfg,
        "data": data,
        "val": val,
        "model": model_path,
        "files": files,
    });
    write_json(&out.join("analyze_report.json"), &report)?;
    Ok(report)
}
