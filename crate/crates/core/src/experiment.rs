//! Desk-scale experiments on synthetic data: dataset preparation, clustering
//! evaluation, training wrappers and the analysis tables built on them.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::{bfs_cluster, dbscan, mean_shift, ClusterAssignment, MeanShiftParams};
use crate::dynshift::{
    direct_forward, ds_forward, effective_bandwidths, train, BandwidthBank, DirectModel, EpochStats, FeatureNorm,
    ForwardConfig, IterationSchedule, LossReport, ShiftModel, TrainConfig, Trainable, TrainingSample,
    DEFAULT_CANDIDATES, DEFAULT_ITERATIONS, DEFAULT_MIN_BANDWIDTH,
};
use crate::error::{Error, Result};
use crate::fusion::{consensus_fusion, PanopticPrediction};
use crate::metrics::{panoptic_quality, PanopticReport};
use crate::scene::SemanticScheme;
use crate::spatial::fps;
use crate::synth::{gen_scene, Frame, SynthConfig};

/// Minimum instance size for sparse synthetic scenes.
pub const DEFAULT_MIN_INSTANCE_POINTS: usize = 5;
/// First scene index of the validation stream; training uses `0..`.
pub const DEFAULT_VAL_START: u64 = 1 << 20;

/// Scenes `start..start + count` of the generator stream.
pub fn generate_frames(cfg: &SynthConfig, start: u64, count: usize) -> Result<Vec<Frame>> {
    (0..count as u64)
        .into_par_iter()
        .map(|i| gen_scene(cfg, start + i).map(Frame::from))
        .collect()
}

/// One sample per frame with things points: FPS seeds over the raw points,
/// starting at their regressed centers.
pub fn training_samples(frames: &[Frame], seed_count: usize, seed: u64) -> Result<Vec<TrainingSample>> {
    if seed_count == 0 {
        return Err(Error::invalid("seed_count must be at least 1"));
    }
    frames
        .par_iter()
        .filter(|f| !f.things.is_empty())
        .map(|f| {
            let points = f.things_points();
            let mask = fps(&points, seed_count, seed);
            TrainingSample::new(
                mask.gather(&f.regressed_centers()),
                f.features.gather(&mask),
                mask.gather(&f.gt_centers()),
            )
        })
        .collect()
}

/// Architecture and initialisation of a shift model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub candidates: Vec<f64>,
    pub iterations: usize,
    pub eta: f64,
    /// Per-iteration loss weights; uniform when empty.
    pub loss_weights: Vec<f64>,
    pub hidden: Vec<usize>,
    pub seed: u64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            candidates: DEFAULT_CANDIDATES.to_vec(),
            iterations: DEFAULT_ITERATIONS,
            eta: 1.0,
            loss_weights: Vec::new(),
            hidden: vec![64, 64],
            seed: 0,
        }
    }
}

impl ModelSpec {
    pub fn schedule(&self) -> Result<IterationSchedule> {
        let weights = if self.loss_weights.is_empty() {
            vec![1.0; self.iterations]
        } else if self.loss_weights.len() == self.iterations {
            self.loss_weights.clone()
        } else {
            return Err(Error::invalid(format!(
                "{} loss weights for {} iterations",
                self.loss_weights.len(),
                self.iterations
            )));
        };
        IterationSchedule::new(self.eta, weights)
    }

    pub fn bank(&self) -> Result<BandwidthBank> {
        BandwidthBank::new(self.candidates.clone())
    }

    /// Weighted model with feature normalisation fitted on `samples`.
    pub fn init_weighted(&self, samples: &[TrainingSample]) -> Result<ShiftModel> {
        let norm = fit_norm(samples)?;
        ShiftModel::init(self.bank()?, self.schedule()?, norm, &self.hidden, self.seed)
    }

    /// Direct-regression model with feature normalisation fitted on `samples`.
    pub fn init_direct(&self, samples: &[TrainingSample]) -> Result<DirectModel> {
        let norm = fit_norm(samples)?;
        DirectModel::init(self.schedule()?, norm, &self.hidden, DEFAULT_MIN_BANDWIDTH, self.seed)
    }
}

fn fit_norm(samples: &[TrainingSample]) -> Result<FeatureNorm> {
    let width = samples.first().ok_or(Error::Empty("training set"))?.features.width();
    Ok(FeatureNorm::fit(samples.iter().map(|s| &s.features), width))
}

/// Instance clustering applied to the things points of a frame.
#[derive(Debug, Clone, Copy)]
pub enum Clusterer<'a> {
    Bfs {
        radius: f64,
    },
    Dbscan {
        eps: f64,
        min_pts: usize,
    },
    MeanShift(MeanShiftParams),
    DynShift {
        model: &'a ShiftModel,
        forward: ForwardConfig,
    },
    Direct {
        model: &'a DirectModel,
        forward: ForwardConfig,
    },
}

impl Clusterer<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Clusterer::Bfs { .. } => "bfs",
            Clusterer::Dbscan { .. } => "dbscan",
            Clusterer::MeanShift(_) => "meanshift",
            Clusterer::DynShift { .. } => "dynshift",
            Clusterer::Direct { .. } => "direct",
        }
    }
}

/// Instance ids for `frame.things`. Heuristics group the regressed centers;
/// shift models run their full forward pass. Clusters smaller than
/// `min_instance_points` become id 0.
pub fn cluster_frame(
    frame: &Frame,
    clusterer: &Clusterer<'_>,
    min_instance_points: usize,
) -> Result<ClusterAssignment> {
    let centers = frame.regressed_centers();
    if centers.is_empty() {
        return Ok(ClusterAssignment::default());
    }
    let raw = match clusterer {
        Clusterer::Bfs { radius } => bfs_cluster(&centers, *radius)?,
        Clusterer::Dbscan { eps, min_pts } => dbscan(&centers, *eps, *min_pts)?,
        Clusterer::MeanShift(p) => mean_shift(&centers, p)?.0,
        Clusterer::DynShift { model, forward } => {
            let cfg = ForwardConfig {
                min_instance_points,
                ..*forward
            };
            return Ok(ds_forward(&frame.things_points(), &frame.features, &centers, model, &cfg)?.0);
        }
        Clusterer::Direct { model, forward } => {
            let cfg = ForwardConfig {
                min_instance_points,
                ..*forward
            };
            return Ok(direct_forward(&frame.things_points(), &frame.features, &centers, model, &cfg)?.0);
        }
    };
    Ok(raw.filter_small(min_instance_points))
}

/// Ground-truth semantics with predicted instances, after majority fusion.
pub fn predict_frame(
    frame: &Frame,
    assignment: &ClusterAssignment,
    scheme: &SemanticScheme,
) -> Result<PanopticPrediction> {
    let raw = PanopticPrediction::from_assignment(frame.labels.semantic.clone(), &frame.things, assignment)?;
    consensus_fusion(&raw.semantic, &raw.instance, scheme)
}

pub fn predict_all(
    frames: &[Frame],
    clusterer: &Clusterer<'_>,
    min_instance_points: usize,
    scheme: &SemanticScheme,
) -> Result<Vec<PanopticPrediction>> {
    frames
        .par_iter()
        .map(|f| predict_frame(f, &cluster_frame(f, clusterer, min_instance_points)?, scheme))
        .collect()
}

pub fn evaluate(
    frames: &[Frame],
    clusterer: &Clusterer<'_>,
    min_instance_points: usize,
    scheme: &SemanticScheme,
) -> Result<PanopticReport> {
    let preds = predict_all(frames, clusterer, min_instance_points, scheme)?;
    let gt: Vec<_> = frames.iter().map(|f| f.labels.clone()).collect();
    panoptic_quality(&gt, &preds, scheme)
}

/// Mean loss of `model` over `samples`.
pub fn mean_loss<T: Trainable>(model: &T, samples: &[TrainingSample]) -> Result<LossReport> {
    let reports = samples.par_iter().map(|s| model.loss(s)).collect::<Result<Vec<_>>>()?;
    Ok(LossReport::mean(&reports))
}

/// Mean effective bandwidth of the things points of one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandwidthRow {
    pub class_id: u16,
    pub class_name: String,
    /// 1-based iteration, or `None` for the average over all iterations.
    pub iteration: Option<usize>,
    pub points: usize,
    pub mean_bandwidth: f64,
}

/// Effective bandwidths grouped by ground-truth class, per iteration and
/// averaged over iterations. Weights depend on features only, so every
/// things point is scored without running the shift.
pub fn bandwidth_by_class(model: &ShiftModel, frames: &[Frame], scheme: &SemanticScheme) -> Result<Vec<BandwidthRow>> {
    let iterations = model.schedule.iterations();
    let per_frame = frames
        .par_iter()
        .map(|f| -> Result<BTreeMap<(u16, usize), (usize, f64)>> {
            let mut acc = BTreeMap::new();
            if f.things.is_empty() {
                return Ok(acc);
            }
            for (it, w) in model.weights(&f.features)?.iter().enumerate() {
                for (row, b) in effective_bandwidths(w, &model.bank)?.into_iter().enumerate() {
                    let class = f.labels.semantic[f.things[row]];
                    let e: &mut (usize, f64) = acc.entry((class, it)).or_default();
                    e.0 += 1;
                    e.1 += b;
                }
            }
            Ok(acc)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total: BTreeMap<(u16, usize), (usize, f64)> = BTreeMap::new();
    for m in per_frame {
        for (k, (n, s)) in m {
            let e = total.entry(k).or_default();
            e.0 += n;
            e.1 += s;
        }
    }
    let name = |c: u16| scheme.name(c).unwrap_or("unknown").to_string();
    let mut rows = Vec::new();
    let classes: Vec<u16> = total
        .keys()
        .map(|k| k.0)
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    for c in classes {
        let (mut n_all, mut s_all) = (0, 0.0);
        for it in 0..iterations {
            if let Some(&(n, s)) = total.get(&(c, it)) {
                n_all += n;
                s_all += s;
                rows.push(BandwidthRow {
                    class_id: c,
                    class_name: name(c),
                    iteration: Some(it + 1),
                    points: n,
                    mean_bandwidth: s / n as f64,
                });
            }
        }
        rows.push(BandwidthRow {
            class_id: c,
            class_name: name(c),
            iteration: None,
            points: n_all / iterations.max(1),
            mean_bandwidth: s_all / n_all.max(1) as f64,
        });
    }
    Ok(rows)
}

/// Everything shared by train-then-evaluate runs.
#[derive(Debug, Clone)]
pub struct Bench<'a> {
    pub train: &'a [TrainingSample],
    pub val_frames: &'a [Frame],
    pub val_samples: &'a [TrainingSample],
    pub train_cfg: TrainConfig,
    pub forward: ForwardConfig,
    pub min_instance_points: usize,
    pub scheme: &'a SemanticScheme,
}

/// Outcome of training one model and scoring it on validation.
#[derive(Debug, Clone)]
pub struct Trained {
    pub model: ShiftModel,
    pub curve: Vec<EpochStats>,
    pub report: PanopticReport,
    pub val_loss: LossReport,
}

impl Bench<'_> {
    pub fn run(&self, spec: &ModelSpec) -> Result<Trained> {
        let init = spec.init_weighted(self.train)?;
        let (model, curve) = train(&init, self.train, &self.train_cfg)?;
        let report = evaluate(
            self.val_frames,
            &Clusterer::DynShift {
                model: &model,
                forward: self.forward,
            },
            self.min_instance_points,
            self.scheme,
        )?;
        let val_loss = mean_loss(&model, self.val_samples)?;
        Ok(Trained {
            model,
            curve,
            report,
            val_loss,
        })
    }
}

/// One row of a candidate, iteration or bandwidth sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: String,
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub pq_th: f64,
    pub sq_th: f64,
    pub rq_th: f64,
    /// Mean validation loss of each iteration; empty for heuristics.
    pub per_iteration_loss: Vec<f64>,
}

impl SweepRow {
    pub fn new(label: impl Into<String>, report: &PanopticReport, loss: Option<&LossReport>) -> Self {
        Self {
            label: label.into(),
            pq: report.pq,
            sq: report.sq,
            rq: report.rq,
            pq_th: report.pq_th,
            sq_th: report.sq_th,
            rq_th: report.rq_th,
            per_iteration_loss: loss.map(|l| l.per_iteration.clone()).unwrap_or_default(),
        }
    }
}

pub fn candidates_label(c: &[f64]) -> String {
    c.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("/")
}

/// Trains and scores one model per candidate set.
pub fn candidate_sweep(bench: &Bench<'_>, base: &ModelSpec, sets: &[Vec<f64>]) -> Result<Vec<SweepRow>> {
    sets.iter()
        .map(|c| {
            let t = bench.run(&ModelSpec {
                candidates: c.clone(),
                ..base.clone()
            })?;
            Ok(SweepRow::new(candidates_label(c), &t.report, Some(&t.val_loss)))
        })
        .collect()
}

/// Trains and scores one model per iteration count.
pub fn iteration_sweep(bench: &Bench<'_>, base: &ModelSpec, counts: &[usize]) -> Result<Vec<SweepRow>> {
    counts
        .iter()
        .map(|&i| {
            let t = bench.run(&ModelSpec {
                iterations: i,
                loss_weights: Vec::new(),
                ..base.clone()
            })?;
            Ok(SweepRow::new(format!("I={i}"), &t.report, Some(&t.val_loss)))
        })
        .collect()
}

/// Scores single-bandwidth mean shift at every grid point.
pub fn mean_shift_sweep(
    frames: &[Frame],
    grid: &[f64],
    min_instance_points: usize,
    scheme: &SemanticScheme,
) -> Result<Vec<SweepRow>> {
    grid.iter()
        .map(|&b| {
            let r = evaluate(
                frames,
                &Clusterer::MeanShift(MeanShiftParams::with_bandwidth(b)),
                min_instance_points,
                scheme,
            )?;
            Ok(SweepRow::new(format!("meanshift {b}"), &r, None))
        })
        .collect()
}
