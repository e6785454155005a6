//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Every oracle below is written independently of the library code it
//! checks; tolerances and time limits are pinned as constants.

#![allow(clippy::needless_range_loop)]

use std::collections::{BTreeMap, BTreeSet};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use dynshift::dynshift::{
    ds_backward, ds_iteration, shift_seeds, BandwidthBank, DirectModel, FeatureMatrix, FeatureNorm, ForwardConfig,
    IterationSchedule, ModelFile, ShiftModel, TrainConfig, Trainable, DEFAULT_SEED_COUNT,
};
use dynshift::experiment::{
    bandwidth_by_class, generate_frames, mean_shift_sweep, training_samples, Bench, ModelSpec, Trained,
    DEFAULT_MIN_INSTANCE_POINTS, DEFAULT_VAL_START,
};
use dynshift::scene::{decode_label, encode_label, labels_to_bytes, read_raw_labels, SceneLabels, SemanticScheme};
use dynshift::spatial::{fps, fps_from, GridIndex};
use dynshift::synth::SynthConfig;
use dynshift::{consensus_fusion, panoptic_quality, PanopticPrediction, PanopticReport, Point3};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FD_STEP: f64 = 1e-5;
const FD_REL_TOL: f64 = 1e-4;
/// Denominator floor of the relative error, so parameters whose true gradient
/// is zero are judged by an absolute error of `FD_REL_TOL * FD_REL_FLOOR`.
const FD_REL_FLOOR: f64 = 1e-6;
const DEGENERATE_ABS_TOL: f64 = 1e-9;
const TREND_MARGIN_BEST: f64 = 0.5;
const TREND_MARGIN_WORST: f64 = 2.0;
const CANDIDATE_SPREAD: f64 = 1.5;

const MEAN_SHIFT_GRID: [f64; 5] = [0.2, 0.65, 1.2, 1.7, 3.2];
const CANDIDATE_SETS: [[f64; 3]; 3] = [[0.2, 1.1, 2.0], [0.2, 1.7, 3.2], [0.2, 2.1, 4.0]];
const TRAIN_SCENES: usize = 100;
const VAL_SCENES: usize = 200;

const VEHICLE: u16 = 10;
const PEDESTRIAN: u16 = 30;

struct Outcome {
    pass: bool,
    detail: String,
}

fn timed(limit: Option<Duration>, f: impl FnOnce() -> Outcome) -> Outcome {
    let t = Instant::now();
    let mut o = f();
    let el = t.elapsed();
    match limit {
        Some(l) => {
            o.detail = format!("{}; {:.2}s of {}s", o.detail, el.as_secs_f64(), l.as_secs());
            o.pass &= el < l;
        }
        None => o.detail = format!("{}; {:.2}s", o.detail, el.as_secs_f64()),
    }
    o
}

fn d2(a: &Point3, b: &Point3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

fn cloud(n: usize, extent: f64, rng: &mut ChaCha8Rng) -> Vec<Point3> {
    (0..n)
        .map(|_| {
            [
                rng.random_range(0.0..extent),
                rng.random_range(0.0..extent),
                rng.random_range(0.0..extent),
            ]
        })
        .collect()
}

fn features(m: usize, d: usize, rng: &mut ChaCha8Rng) -> FeatureMatrix {
    FeatureMatrix::new(Array2::from_shape_fn((m, d), |_| rng.random_range(-2.0..2.0))).unwrap()
}

fn random_bank(l: usize, rng: &mut ChaCha8Rng) -> BandwidthBank {
    let mut c: Vec<f64> = (0..l).map(|_| rng.random_range(0.2..2.5)).collect();
    c.sort_by(f64::total_cmp);
    BandwidthBank::new(c).unwrap()
}

fn random_hidden(rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..rng.random_range(1..=2)).map(|_| rng.random_range(3..=8)).collect()
}

/// Mean of every point of `data` within `delta` of `q`, by exhaustive scan.
fn brute_flat_mean(data: &[Point3], q: &Point3, delta: f64) -> Point3 {
    let mut s = [0.0; 3];
    let mut n = 0.0;
    for p in data {
        if d2(p, q) <= delta * delta {
            s[0] += p[0];
            s[1] += p[1];
            s[2] += p[2];
            n += 1.0;
        }
    }
    [s[0] / n, s[1] / n, s[2] / n]
}

fn max_abs_diff(a: &[Point3], b: &[Point3]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(p, q)| (0..3).map(move |k| (p[k] - q[k]).abs()))
        .fold(if a.len() == b.len() { 0.0 } else { f64::INFINITY }, f64::max)
}

// Criterion 1. The loss is re-evaluated with every iteration's inputs and
// candidate targets held at their recorded values, which is the quantity the
// analytic backward pass differentiates.
fn gradient_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for _ in 0..20 {
        let m = rng.random_range(4..=32);
        let width = rng.random_range(2..=8);
        let iterations = rng.random_range(1..=3);
        let eta = rng.random_range(0.5..=1.0);
        let loss_weights: Vec<f64> = (0..iterations).map(|_| rng.random_range(0.2..1.5)).collect();
        let norm = FeatureNorm {
            mean: (0..width).map(|_| rng.random_range(-1.0..1.0)).collect(),
            scale: (0..width).map(|_| rng.random_range(0.5..2.0)).collect(),
        };
        let mut model = ShiftModel::init(
            random_bank(3, &mut rng),
            IterationSchedule::new(eta, loss_weights.clone()).unwrap(),
            norm,
            &random_hidden(&mut rng),
            rng.random(),
        )
        .unwrap();
        // Freshly initialised biases are zero, which puts units fed only by
        // dead units exactly on the ReLU kink. Jitter moves every instance off it.
        let jittered: Vec<f64> = model.params().iter().map(|v| v + rng.random_range(-0.1..0.1)).collect();
        model.set_params(&jittered).unwrap();
        let x0 = cloud(m, 2.5, &mut rng);
        let gt = cloud(m, 2.5, &mut rng);
        let feats = features(m, width, &mut rng);
        let records = shift_seeds(x0, &feats, &model).unwrap();
        let analytic = ds_backward(&records, &feats, &model, &gt).unwrap().heads.concat();

        let frozen_loss = |params: &[f64]| -> f64 {
            let mut probe = model.clone();
            probe.set_params(params).unwrap();
            let weights = probe.weights(&feats).unwrap();
            let mut total = 0.0;
            for ((rec, w), &li) in records.iter().zip(&weights).zip(&loss_weights) {
                let mut sum = 0.0;
                for x in 0..m {
                    for k in 0..3 {
                        let xi = rec.input[x][k];
                        let step: f64 = (0..rec.targets.len())
                            .map(|j| w[[x, j]] * (rec.targets[j][x][k] - xi))
                            .sum();
                        sum += (xi + eta * step - gt[x][k]).abs();
                    }
                }
                total += li * sum / m as f64;
            }
            total
        };

        let theta = model.params();
        for p in 0..theta.len() {
            let mut hi = theta.clone();
            let mut lo = theta.clone();
            hi[p] += FD_STEP;
            lo[p] -= FD_STEP;
            let numeric = (frozen_loss(&hi) - frozen_loss(&lo)) / (hi[p] - lo[p]);
            let a = analytic[p];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FD_REL_FLOOR);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    Outcome {
        pass: worst <= FD_REL_TOL,
        detail: format!("{checked} parameters, max relative error {worst:.3e} (tol {FD_REL_TOL:e})"),
    }
}

// Criterion 2.
fn degenerate_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        // One candidate: softmax over a single logit is exactly 1.
        let m = rng.random_range(5..=120);
        let width = rng.random_range(1..=6);
        let iterations = rng.random_range(1..=4);
        let delta = rng.random_range(0.2..2.0);
        let model = ShiftModel::init(
            BandwidthBank::new(vec![delta]).unwrap(),
            IterationSchedule::uniform(iterations).unwrap(),
            FeatureNorm::identity(width),
            &random_hidden(&mut rng),
            rng.random(),
        )
        .unwrap();
        let x0 = cloud(m, 4.0, &mut rng);
        let records = shift_seeds(x0.clone(), &features(m, width, &mut rng), &model).unwrap();
        let mut expected_input = x0;
        for rec in &records {
            worst = worst.max(max_abs_diff(&rec.input, &expected_input));
            let expected: Vec<Point3> = rec
                .input
                .iter()
                .map(|q| brute_flat_mean(&rec.input, q, delta))
                .collect();
            worst = worst.max(max_abs_diff(&rec.output, &expected));
            expected_input = rec.output.clone();
        }

        // One-hot weights over several candidates.
        let bank = random_bank(rng.random_range(2..=4), &mut rng);
        let x = cloud(m, 4.0, &mut rng);
        let picks: Vec<usize> = (0..m).map(|_| rng.random_range(0..bank.len())).collect();
        let mut w = Array2::zeros((m, bank.len()));
        for (i, &j) in picks.iter().enumerate() {
            w[[i, j]] = 1.0;
        }
        let out = ds_iteration(&x, &w, &bank, 1.0).unwrap();
        let expected: Vec<Point3> = (0..m)
            .map(|i| brute_flat_mean(&x, &x[i], bank.candidates()[picks[i]]))
            .collect();
        worst = worst.max(max_abs_diff(&out, &expected));
    }
    Outcome {
        pass: worst <= DEGENERATE_ABS_TOL,
        detail: format!("100 cases, max abs difference {worst:.3e} (tol {DEGENERATE_ABS_TOL:e})"),
    }
}

// Criterion 3.
#[derive(Default, Clone)]
struct OracleClass {
    tp: u64,
    fp: u64,
    fn_: u64,
    iou_sum: f64,
    inter: u64,
    union: u64,
}

fn metrics_scheme() -> SemanticScheme {
    SemanticScheme::parse("thing 1 a\nthing 2 b\nthing 3 c\nstuff 7 road\nstuff 8 wall\nignore 0 none\n").unwrap()
}

/// All-pairs matching over explicit point sets, summing IoUs in frame order and
/// ascending ground-truth segment order.
fn oracle_frame(
    gt: &SceneLabels,
    pred: &PanopticPrediction,
    scheme: &SemanticScheme,
    acc: &mut BTreeMap<u16, OracleClass>,
) {
    let keep: Vec<usize> = (0..gt.len()).filter(|&i| !scheme.is_ignored(gt.semantic[i])).collect();
    let mut gt_seg: BTreeMap<(u16, u32), BTreeSet<usize>> = BTreeMap::new();
    let mut pred_seg: BTreeMap<(u16, u32), BTreeSet<usize>> = BTreeMap::new();
    for &i in &keep {
        let (gc, gi) = (gt.semantic[i], gt.instance[i] as u32);
        if scheme.is_stuff(gc) {
            gt_seg.entry((gc, 0)).or_default().insert(i);
        } else if scheme.is_thing(gc) && gi != 0 {
            gt_seg.entry((gc, gi)).or_default().insert(i);
        }
        let (pc, pi) = (pred.semantic[i], pred.instance[i]);
        if scheme.is_stuff(pc) {
            pred_seg.entry((pc, 0)).or_default().insert(i);
        } else if scheme.is_thing(pc) && pi != 0 {
            pred_seg.entry((pc, pi)).or_default().insert(i);
        }
    }
    let mut pred_matched = BTreeSet::new();
    for (g, gs) in &gt_seg {
        let mut hit = None;
        for (p, ps) in &pred_seg {
            if p.0 != g.0 {
                continue;
            }
            let inter = gs.intersection(ps).count() as u64;
            let union = gs.union(ps).count() as u64;
            let iou = inter as f64 / union as f64;
            if iou > 0.5 {
                assert!(hit.is_none(), "two matches for one segment");
                hit = Some((*p, iou));
            }
        }
        let a = acc.entry(g.0).or_default();
        match hit {
            Some((p, iou)) => {
                a.tp += 1;
                a.iou_sum += iou;
                pred_matched.insert(p);
            }
            None => a.fn_ += 1,
        }
    }
    for p in pred_seg.keys().filter(|p| !pred_matched.contains(*p)) {
        acc.entry(p.0).or_default().fp += 1;
    }
    for c in scheme.things().chain(scheme.stuff()) {
        let g = keep.iter().filter(|&&i| gt.semantic[i] == c).count() as u64;
        let p = keep.iter().filter(|&&i| pred.semantic[i] == c).count() as u64;
        let both = keep
            .iter()
            .filter(|&&i| gt.semantic[i] == c && pred.semantic[i] == c)
            .count() as u64;
        if g + p > 0 {
            let a = acc.entry(c).or_default();
            a.inter += both;
            a.union += g + p - both;
        }
    }
}

/// `(is_thing, pq, sq, rq, pq_dagger)` of a populated class.
type Populated = (bool, f64, f64, f64, f64);

fn compare_report(
    report: &PanopticReport,
    acc: &BTreeMap<u16, OracleClass>,
    scheme: &SemanticScheme,
) -> Result<(), String> {
    let mut populated: Vec<Populated> = Vec::new();
    let mut ious = Vec::new();
    for c in scheme.things().chain(scheme.stuff()).collect::<BTreeSet<_>>() {
        let o = acc.get(&c).cloned().unwrap_or_default();
        let got = &report.classes[&c];
        let sq = if o.tp > 0 { o.iou_sum / o.tp as f64 } else { 0.0 };
        let denom = o.tp as f64 + 0.5 * o.fp as f64 + 0.5 * o.fn_ as f64;
        let rq = if denom > 0.0 { o.tp as f64 / denom } else { 0.0 };
        let pq = sq * rq;
        let iou = (o.union > 0).then(|| o.inter as f64 / o.union as f64);
        if (got.tp, got.fp, got.fn_) != (o.tp, o.fp, o.fn_)
            || got.sq != sq
            || got.rq != rq
            || got.pq != pq
            || got.iou != iou
        {
            return Err(format!(
                "class {c}: got {got:?}, oracle tp {} fp {} fn {} sq {sq} rq {rq} iou {iou:?}",
                o.tp, o.fp, o.fn_
            ));
        }
        if got.pq != got.sq * got.rq {
            return Err(format!("class {c}: PQ != SQ*RQ"));
        }
        if o.tp + o.fp + o.fn_ > 0 {
            let dagger = if scheme.is_stuff(c) { iou.unwrap_or(0.0) } else { pq };
            populated.push((scheme.is_thing(c), pq, sq, rq, dagger));
        }
        ious.extend(iou);
    }
    let mean = |v: Vec<f64>| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().fold(0.0, |s, x| s + x) / v.len() as f64
        }
    };
    let col = |f: &dyn Fn(&Populated) -> Option<f64>| mean(populated.iter().filter_map(f).collect());
    let expected = [
        ("pq", report.pq, col(&|c| Some(c.1))),
        ("sq", report.sq, col(&|c| Some(c.2))),
        ("rq", report.rq, col(&|c| Some(c.3))),
        ("pq_dagger", report.pq_dagger, col(&|c| Some(c.4))),
        ("pq_th", report.pq_th, col(&|c| c.0.then_some(c.1))),
        ("sq_th", report.sq_th, col(&|c| c.0.then_some(c.2))),
        ("rq_th", report.rq_th, col(&|c| c.0.then_some(c.3))),
        ("pq_st", report.pq_st, col(&|c| (!c.0).then_some(c.1))),
        ("sq_st", report.sq_st, col(&|c| (!c.0).then_some(c.2))),
        ("rq_st", report.rq_st, col(&|c| (!c.0).then_some(c.3))),
        ("miou", report.miou, mean(ious)),
    ];
    for (name, got, want) in expected {
        if got != want {
            return Err(format!("{name}: got {got}, oracle {want}"));
        }
    }
    Ok(())
}

fn micro_frame(rng: &mut ChaCha8Rng) -> (SceneLabels, PanopticPrediction) {
    let classes = [0u16, 1, 2, 3, 7, 8];
    let n = rng.random_range(1..=60);
    let mut gs = Vec::with_capacity(n);
    let mut gi = Vec::with_capacity(n);
    let mut ps = Vec::with_capacity(n);
    let mut pi = Vec::with_capacity(n);
    let agree = rng.random_range(0.0..1.0);
    for _ in 0..n {
        let c = classes[rng.random_range(0..classes.len())];
        let id = rng.random_range(0..4u16);
        gs.push(c);
        gi.push(id);
        if rng.random_bool(agree) {
            ps.push(c);
            pi.push(id as u32 * 3);
        } else {
            ps.push(classes[rng.random_range(0..classes.len())]);
            pi.push(rng.random_range(0..6u32));
        }
    }
    (
        SceneLabels::new(gs, gi).unwrap(),
        PanopticPrediction::new(ps, pi).unwrap(),
    )
}

fn metrics_oracle() -> Outcome {
    let scheme = metrics_scheme();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for scene in 0..100 {
        let frames: Vec<_> = (0..rng.random_range(1..=4)).map(|_| micro_frame(&mut rng)).collect();
        let gt: Vec<_> = frames.iter().map(|f| f.0.clone()).collect();
        let pred: Vec<_> = frames.iter().map(|f| f.1.clone()).collect();
        let report = panoptic_quality(&gt, &pred, &scheme).unwrap();
        let mut acc = BTreeMap::new();
        for (g, p) in gt.iter().zip(&pred) {
            oracle_frame(g, p, &scheme, &mut acc);
        }
        if let Err(e) = compare_report(&report, &acc, &scheme) {
            return Outcome {
                pass: false,
                detail: format!("scene {scene}: {e}"),
            };
        }
    }
    Outcome {
        pass: true,
        detail: "100 scenes exactly equal, PQ = SQ*RQ per class".into(),
    }
}

// Criterion 4.
fn greedy_trace(points: &[Point3], k: usize, start: usize) -> Vec<usize> {
    let mut sel = vec![start];
    while sel.len() < k.min(points.len()) {
        let mut best: Option<(f64, usize)> = None;
        for i in 0..points.len() {
            if sel.contains(&i) {
                continue;
            }
            let d = sel
                .iter()
                .map(|&s| d2(&points[i], &points[s]))
                .fold(f64::INFINITY, f64::min);
            if best.is_none_or(|(bd, _)| d > bd) {
                best = Some((d, i));
            }
        }
        sel.push(best.unwrap().1);
    }
    sel
}

fn spatial_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut points = cloud(1000, 10.0, &mut rng);
    // Exact duplicates exercise the nearest-neighbor tie rule.
    for i in 0..50 {
        points[999 - i] = points[i * 7];
    }
    let mut failures = Vec::new();
    for (round, cell) in [0.3, 1.0, 2.5].into_iter().enumerate() {
        let index = GridIndex::build(&points, cell).unwrap();
        for q in 0..100 {
            let query = if q % 4 == 0 {
                points[rng.random_range(0..1000)]
            } else {
                cloud(1, 11.0, &mut rng)[0]
            };
            let r = rng.random_range(0.05..3.0);
            let mut got = index.radius_query(&query, r);
            got.sort_unstable();
            let want: Vec<usize> = (0..points.len()).filter(|&j| d2(&points[j], &query) <= r * r).collect();
            if got != want {
                failures.push(format!("radius cell {cell} query {q}"));
            }
            let nearest = (0..points.len())
                .min_by(|&a, &b| {
                    d2(&points[a], &query)
                        .total_cmp(&d2(&points[b], &query))
                        .then(a.cmp(&b))
                })
                .unwrap();
            if index.nearest(&query).unwrap() != nearest {
                failures.push(format!("nearest cell {cell} query {q}"));
            }
        }
        for run in 0..4 {
            let k = rng.random_range(1..=120);
            let start = rng.random_range(0..1000);
            if fps_from(&points, k, start).indices() != greedy_trace(&points, k, start) {
                failures.push(format!("fps_from round {round} run {run}"));
            }
            let seed: u64 = rng.random();
            let seeded_start = ChaCha8Rng::seed_from_u64(seed).random_range(0..points.len());
            if fps(&points, k, seed).indices() != greedy_trace(&points, k, seeded_start) {
                failures.push(format!("fps round {round} run {run}"));
            }
        }
    }
    let all: Vec<usize> = (0..points.len()).collect();
    if fps(&points, 1000, 9).indices() != all || fps(&points, 5000, 9).indices() != all {
        failures.push("fps with k >= n".into());
    }
    Outcome {
        pass: failures.is_empty(),
        detail: if failures.is_empty() {
            "300 radius and nearest queries over 3 grids, 24 sampling traces exact".into()
        } else {
            format!("mismatches: {}", failures.join(", "))
        },
    }
}

// Criteria 5 to 8 share one data set and the default-configuration model.
struct Study {
    ms: Vec<(f64, f64)>,
    default: Trained,
    others: Vec<(String, Trained)>,
    single: Trained,
    vehicle_bw: f64,
    pedestrian_bw: f64,
    elapsed_default: Duration,
}

fn run_study() -> Study {
    let t = Instant::now();
    let cfg = SynthConfig::default();
    let scheme = cfg.scheme().unwrap();
    let train = generate_frames(&cfg, 0, TRAIN_SCENES).unwrap();
    let val = generate_frames(&cfg, DEFAULT_VAL_START, VAL_SCENES).unwrap();
    let train_samples = training_samples(&train, DEFAULT_SEED_COUNT, 0).unwrap();
    let val_samples = training_samples(&val, DEFAULT_SEED_COUNT, 0).unwrap();
    let train_cfg = TrainConfig::default();
    assert!(train_cfg.epochs <= 20);
    let bench = Bench {
        train: &train_samples,
        val_frames: &val,
        val_samples: &val_samples,
        train_cfg,
        forward: ForwardConfig::default(),
        min_instance_points: DEFAULT_MIN_INSTANCE_POINTS,
        scheme: &scheme,
    };
    let ms = mean_shift_sweep(&val, &MEAN_SHIFT_GRID, DEFAULT_MIN_INSTANCE_POINTS, &scheme)
        .unwrap()
        .into_iter()
        .zip(MEAN_SHIFT_GRID)
        .map(|(r, b)| (b, r.pq_th))
        .collect();
    let spec = ModelSpec::default();
    let default = bench.run(&spec).unwrap();
    let elapsed_default = t.elapsed();

    let others = CANDIDATE_SETS
        .iter()
        .filter(|c| c.as_slice() != spec.candidates.as_slice())
        .map(|c| {
            let t = bench
                .run(&ModelSpec {
                    candidates: c.to_vec(),
                    ..spec.clone()
                })
                .unwrap();
            (format!("{c:?}"), t)
        })
        .collect();
    let single = bench
        .run(&ModelSpec {
            iterations: 1,
            ..spec.clone()
        })
        .unwrap();
    let rows = bandwidth_by_class(&default.model, &val, &scheme).unwrap();
    let bw = |id| {
        rows.iter()
            .find(|r| r.class_id == id && r.iteration.is_none())
            .unwrap()
            .mean_bandwidth
    };
    Study {
        ms,
        vehicle_bw: bw(VEHICLE),
        pedestrian_bw: bw(PEDESTRIAN),
        default,
        others,
        single,
        elapsed_default,
    }
}

fn clustering_trend(s: &Study) -> Outcome {
    let ds = 100.0 * s.default.report.pq_th;
    let best = s.ms.iter().map(|m| 100.0 * m.1).fold(f64::NEG_INFINITY, f64::max);
    let worst = s.ms.iter().map(|m| 100.0 * m.1).fold(f64::INFINITY, f64::min);
    let grid: Vec<String> = s.ms.iter().map(|(b, v)| format!("{b}:{:.2}", 100.0 * v)).collect();
    let limit = Duration::from_secs(600);
    Outcome {
        pass: ds >= best - TREND_MARGIN_BEST && ds >= worst + TREND_MARGIN_WORST && s.elapsed_default < limit,
        detail: format!(
            "PQ^Th dynamic {ds:.2}, mean shift [{}], best {best:.2}, worst {worst:.2}; {:.1}s of {}s including training",
            grid.join(" "),
            s.elapsed_default.as_secs_f64(),
            limit.as_secs()
        ),
    }
}

fn candidate_robustness(s: &Study) -> Outcome {
    let mut pqs = vec![(
        format!("{:?}", ModelSpec::default().candidates),
        100.0 * s.default.report.pq,
    )];
    pqs.extend(s.others.iter().map(|(l, t)| (l.clone(), 100.0 * t.report.pq)));
    let hi = pqs.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let lo = pqs.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let list: Vec<String> = pqs.iter().map(|(l, v)| format!("{l}:{v:.2}")).collect();
    Outcome {
        pass: pqs.len() == CANDIDATE_SETS.len() && hi - lo <= CANDIDATE_SPREAD,
        detail: format!(
            "PQ {}, spread {:.2} (limit {CANDIDATE_SPREAD})",
            list.join(" "),
            hi - lo
        ),
    }
}

fn iteration_trend(s: &Study) -> Outcome {
    let pq4 = 100.0 * s.default.report.pq;
    let pq1 = 100.0 * s.single.report.pq;
    let l = &s.default.val_loss.per_iteration;
    let (l1, l4) = (l[0], l[l.len() - 1]);
    Outcome {
        pass: l.len() == 4 && pq4 >= pq1 && l4 <= l1,
        detail: format!("PQ I=4 {pq4:.2} vs I=1 {pq1:.2}; validation l_1 {l1:.4}, l_4 {l4:.4}"),
    }
}

fn bandwidth_trend(s: &Study) -> Outcome {
    Outcome {
        pass: s.vehicle_bw > s.pedestrian_bw,
        detail: format!(
            "mean effective bandwidth vehicle {:.3}, pedestrian {:.3}",
            s.vehicle_bw, s.pedestrian_bw
        ),
    }
}

// Criterion 9.
fn fusion_fuzz() -> Outcome {
    let scheme = SynthConfig::default().scheme().unwrap();
    let things: Vec<u16> = scheme.things().collect();
    let stuff: Vec<u16> = scheme.stuff().collect();
    let all: Vec<u16> = things
        .iter()
        .chain(&stuff)
        .copied()
        .chain(scheme.ignore_ids())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut failures = 0usize;
    for scene in 0..1000 {
        // Even scenes put instances on things points only, as clustering does;
        // odd scenes also give ids to stuff and ignored points.
        let mixed = scene % 2 == 1;
        let n = rng.random_range(1..=200);
        let sem: Vec<u16> = (0..n).map(|_| all[rng.random_range(0..all.len())]).collect();
        let ids: Vec<u32> = sem
            .iter()
            .map(|&s| {
                if scheme.is_thing(s) || (mixed && rng.random_bool(0.3)) {
                    rng.random_range(0..6)
                } else {
                    0
                }
            })
            .collect();
        let out = consensus_fusion(&sem, &ids, &scheme).unwrap();
        let mut class_of: BTreeMap<u32, u16> = BTreeMap::new();
        let mut ok = out.semantic.len() == n;
        for i in 0..n {
            let (s, id) = (out.semantic[i], out.instance[i]);
            if id != 0 {
                ok &= scheme.is_thing(s) && *class_of.entry(id).or_insert(s) == s;
            }
            if ids[i] == 0 {
                ok &= s == sem[i] && id == 0;
            }
            if scheme.is_stuff(s) {
                ok &= sem[i] == s;
            }
            if !mixed && scheme.is_stuff(sem[i]) {
                ok &= s == sem[i];
            }
        }
        ok &= consensus_fusion(&out.semantic, &out.instance, &scheme).unwrap() == out;
        if !ok {
            failures += 1;
        }
    }
    Outcome {
        pass: failures == 0,
        detail: format!("1000 scenes, {failures} violations"),
    }
}

// Criterion 10.
fn fuzz_f64(rng: &mut ChaCha8Rng) -> f64 {
    match rng.random_range(0..6) {
        0 => 0.0,
        1 => -0.0,
        2 => f64::from_bits(rng.random_range(1..(1u64 << 52))),
        3 => f64::MIN_POSITIVE,
        _ => loop {
            let v = f64::from_bits(rng.random());
            if v.is_finite() {
                break v;
            }
        },
    }
}

fn round_trips() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut failures = Vec::new();
    for _ in 0..100_000 {
        let raw: u32 = rng.random();
        let (s, i) = decode_label(raw);
        if encode_label(s, i) != raw || decode_label(encode_label(s, i)) != (s, i) {
            failures.push(format!("label {raw:#x}"));
        }
    }
    let dir = tempfile::tempdir().unwrap();
    for f in 0..20 {
        let n = rng.random_range(0..500);
        let labels = SceneLabels::new(
            (0..n).map(|_| rng.random()).collect(),
            (0..n).map(|_| rng.random()).collect(),
        )
        .unwrap();
        let path = dir.path().join(format!("{f}.label"));
        std::fs::write(&path, labels_to_bytes(&labels)).unwrap();
        if read_raw_labels(&path).unwrap() != labels.encode() {
            failures.push(format!("label file {f}"));
        }
    }

    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    for case in 0..200 {
        let width = rng.random_range(1..=8);
        let iterations = rng.random_range(1..=4);
        let schedule = IterationSchedule::new(
            fuzz_f64(&mut rng).abs(),
            (0..iterations).map(|_| fuzz_f64(&mut rng).abs()).collect(),
        )
        .unwrap();
        let norm = FeatureNorm {
            mean: (0..width).map(|_| fuzz_f64(&mut rng)).collect(),
            scale: (0..width).map(|_| rng.random_range(0.1..10.0)).collect(),
        };
        let hidden = random_hidden(&mut rng);
        let file = if case % 2 == 0 {
            let mut m = ShiftModel::init(
                random_bank(rng.random_range(1..=5), &mut rng),
                schedule,
                norm,
                &hidden,
                rng.random(),
            )
            .unwrap();
            let p: Vec<f64> = (0..m.params().len()).map(|_| fuzz_f64(&mut rng)).collect();
            m.set_params(&p).unwrap();
            ModelFile::Weighted(m)
        } else {
            let mut m = DirectModel::init(schedule, norm, &hidden, rng.random_range(0.01..0.5), rng.random()).unwrap();
            let p: Vec<f64> = (0..m.params().len()).map(|_| fuzz_f64(&mut rng)).collect();
            m.set_params(&p).unwrap();
            ModelFile::Direct(m)
        };
        let bytes = file.to_bytes();
        let back = ModelFile::from_bytes(&bytes).unwrap();
        let same = back.to_bytes() == bytes
            && match (&file, &back) {
                (ModelFile::Weighted(a), ModelFile::Weighted(b)) => {
                    bits(&a.params()) == bits(&b.params())
                        && bits(a.bank.candidates()) == bits(b.bank.candidates())
                        && bits(&a.norm.mean) == bits(&b.norm.mean)
                        && bits(&a.norm.scale) == bits(&b.norm.scale)
                        && bits(a.schedule.loss_weights()) == bits(b.schedule.loss_weights())
                        && a.schedule.eta().to_bits() == b.schedule.eta().to_bits()
                }
                (ModelFile::Direct(a), ModelFile::Direct(b)) => {
                    bits(&a.params()) == bits(&b.params())
                        && bits(&a.norm.mean) == bits(&b.norm.mean)
                        && bits(&a.norm.scale) == bits(&b.norm.scale)
                        && bits(a.schedule.loss_weights()) == bits(b.schedule.loss_weights())
                        && a.schedule.eta().to_bits() == b.schedule.eta().to_bits()
                        && a.min_bandwidth.to_bits() == b.min_bandwidth.to_bits()
                }
                _ => false,
            };
        if !same {
            failures.push(format!("model {case}"));
        }
    }
    Outcome {
        pass: failures.is_empty(),
        detail: if failures.is_empty() {
            "100000 raw labels, 20 label files, 200 model files bitwise identical".into()
        } else {
            format!("mismatches: {}", failures.join(", "))
        },
    }
}

fn main() -> ExitCode {
    let secs = |s| Some(Duration::from_secs(s));
    let mut results: Vec<(usize, &str, Outcome)> = vec![
        (1, "gradient", timed(secs(30), gradient_check)),
        (2, "degenerate", timed(secs(5), degenerate_equivalence)),
        (3, "metrics", timed(secs(10), metrics_oracle)),
        (4, "spatial", timed(secs(10), spatial_oracle)),
    ];
    let study = run_study();
    results.push((5, "clustering-trend", clustering_trend(&study)));
    results.push((6, "candidate-robustness", candidate_robustness(&study)));
    results.push((7, "iteration-trend", iteration_trend(&study)));
    results.push((8, "bandwidth-trend", bandwidth_trend(&study)));
    results.push((9, "fusion", timed(secs(5), fusion_fuzz)));
    results.push((10, "round-trip", timed(None, round_trips)));

    let mut failed = 0;
    for (n, name, o) in &results {
        println!("{} {n:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
