//! Panoptic quality and semantic IoU.
//!
//! Segments are per frame: a things segment is a `(class, instance)` pair with
//! a nonzero instance id, a stuff segment is the whole mask of one class.
//! A ground-truth and a predicted segment of the same class match when their
//! IoU exceeds 0.5, which makes matches unique. Counts are accumulated over
//! all frames before any ratio is taken. Ground-truth points of an ignored
//! class are removed before anything is counted.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::PanopticPrediction;
use crate::scene::{ClassKind, SceneLabels, SemanticScheme};

#[derive(Debug, Clone, Default, PartialEq)]
struct ClassAccum {
    tp: u64,
    fp: u64,
    fn_: u64,
    iou_sum: f64,
    /// IoUs of one frame's matches, by ground-truth segment.
    ious: Vec<f64>,
    inter: u64,
    union: u64,
}

impl ClassAccum {
    /// Matched IoUs are summed one by one, so the total is the plain
    /// left-to-right sum over frames and segments.
    fn add(&mut self, o: &ClassAccum) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        for v in &o.ious {
            self.iou_sum += v;
        }
        self.inter += o.inter;
        self.union += o.union;
    }
}

/// Per-class numbers; `pq`, `sq`, `rq` are 0 when the class has no TP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub name: String,
    pub kind: String,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    /// Semantic IoU; `None` when the class appears in neither labeling.
    pub iou: Option<f64>,
}

impl ClassMetrics {
    /// Whether the class has at least one ground-truth or predicted segment.
    pub fn populated(&self) -> bool {
        self.tp + self.fp + self.fn_ > 0
    }
}

/// Dataset-level panoptic and semantic report.
///
/// Aggregates are unweighted means over populated classes; `pq_dagger`
/// replaces each stuff class's PQ by its semantic IoU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanopticReport {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub pq_dagger: f64,
    pub pq_th: f64,
    pub sq_th: f64,
    pub rq_th: f64,
    pub pq_st: f64,
    pub sq_st: f64,
    pub rq_st: f64,
    pub miou: f64,
    pub frames: usize,
    pub classes: BTreeMap<u16, ClassMetrics>,
}

/// One CSV row per class. Column names are part of the output format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub class_id: u16,
    pub class_name: String,
    pub kind: String,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub iou: Option<f64>,
}

impl PanopticReport {
    pub fn class_rows(&self) -> Vec<ClassRow> {
        self.classes
            .iter()
            .map(|(&id, c)| ClassRow {
                class_id: id,
                class_name: c.name.clone(),
                kind: c.kind.clone(),
                tp: c.tp,
                fp: c.fp,
                fn_: c.fn_,
                pq: c.pq,
                sq: c.sq,
                rq: c.rq,
                iou: c.iou,
            })
            .collect()
    }
}

/// Accumulates frames one at a time.
#[derive(Debug, Clone)]
pub struct PanopticEvaluator<'a> {
    scheme: &'a SemanticScheme,
    acc: BTreeMap<u16, ClassAccum>,
    frames: usize,
}

impl<'a> PanopticEvaluator<'a> {
    pub fn new(scheme: &'a SemanticScheme) -> Self {
        Self {
            scheme,
            acc: BTreeMap::new(),
            frames: 0,
        }
    }

    pub fn add_frame(&mut self, gt: &SceneLabels, pred: &PanopticPrediction) -> Result<()> {
        let stats = frame_stats(gt, pred, self.scheme)?;
        self.merge(stats);
        Ok(())
    }

    fn merge(&mut self, stats: BTreeMap<u16, ClassAccum>) {
        for (c, a) in stats {
            self.acc.entry(c).or_default().add(&a);
        }
        self.frames += 1;
    }

    pub fn finish(&self) -> PanopticReport {
        let mut classes = BTreeMap::new();
        for info in self.scheme.classes() {
            let a = self.acc.get(&info.id).cloned().unwrap_or_default();
            let sq = if a.tp > 0 { a.iou_sum / a.tp as f64 } else { 0.0 };
            let denom = a.tp as f64 + 0.5 * a.fp as f64 + 0.5 * a.fn_ as f64;
            let rq = if denom > 0.0 { a.tp as f64 / denom } else { 0.0 };
            classes.insert(
                info.id,
                ClassMetrics {
                    name: info.name.clone(),
                    kind: match info.kind {
                        ClassKind::Thing => "thing".into(),
                        ClassKind::Stuff => "stuff".into(),
                    },
                    tp: a.tp,
                    fp: a.fp,
                    fn_: a.fn_,
                    pq: sq * rq,
                    sq,
                    rq,
                    iou: (a.union > 0).then(|| a.inter as f64 / a.union as f64),
                },
            );
        }
        let mean = |vals: Vec<f64>| {
            if vals.is_empty() {
                0.0
            } else {
                vals.iter().sum::<f64>() / vals.len() as f64
            }
        };
        let pick = |kind: Option<&str>, f: &dyn Fn(&ClassMetrics) -> f64| {
            mean(
                classes
                    .values()
                    .filter(|c| c.populated() && kind.is_none_or(|k| c.kind == k))
                    .map(f)
                    .collect(),
            )
        };
        PanopticReport {
            pq: pick(None, &|c| c.pq),
            sq: pick(None, &|c| c.sq),
            rq: pick(None, &|c| c.rq),
            pq_dagger: pick(None, &|c| if c.kind == "stuff" { c.iou.unwrap_or(0.0) } else { c.pq }),
            pq_th: pick(Some("thing"), &|c| c.pq),
            sq_th: pick(Some("thing"), &|c| c.sq),
            rq_th: pick(Some("thing"), &|c| c.rq),
            pq_st: pick(Some("stuff"), &|c| c.pq),
            sq_st: pick(Some("stuff"), &|c| c.sq),
            rq_st: pick(Some("stuff"), &|c| c.rq),
            miou: mean(classes.values().filter_map(|c| c.iou).collect()),
            frames: self.frames,
            classes,
        }
    }
}

fn check_class(scheme: &SemanticScheme, c: u16) -> Result<()> {
    if scheme.contains(c) {
        Ok(())
    } else {
        Err(Error::UnknownClass(c))
    }
}

/// Segment key: class plus instance id, 0 for stuff masks.
type Segment = (u16, u32);

fn frame_stats(
    gt: &SceneLabels,
    pred: &PanopticPrediction,
    scheme: &SemanticScheme,
) -> Result<BTreeMap<u16, ClassAccum>> {
    if gt.len() != pred.len() {
        return Err(Error::SizeMismatch {
            points: gt.len(),
            labels: pred.len(),
        });
    }
    let mut acc: BTreeMap<u16, ClassAccum> = BTreeMap::new();
    let mut gt_sizes: HashMap<Segment, u64> = HashMap::new();
    let mut pred_sizes: HashMap<Segment, u64> = HashMap::new();
    let mut overlaps: HashMap<(Segment, Segment), u64> = HashMap::new();
    let mut sem_gt: HashMap<u16, u64> = HashMap::new();
    let mut sem_pred: HashMap<u16, u64> = HashMap::new();
    let mut sem_inter: HashMap<u16, u64> = HashMap::new();

    let segment = |class: u16, id: u32| -> Option<Segment> {
        match scheme.kind(class) {
            Some(ClassKind::Stuff) => Some((class, 0)),
            Some(ClassKind::Thing) if id != 0 => Some((class, id)),
            _ => None,
        }
    };
    for i in 0..gt.len() {
        let (gc, gi) = (gt.semantic[i], gt.instance[i] as u32);
        let (pc, pi) = (pred.semantic[i], pred.instance[i]);
        check_class(scheme, gc)?;
        check_class(scheme, pc)?;
        if scheme.is_ignored(gc) {
            continue;
        }
        *sem_gt.entry(gc).or_default() += 1;
        if scheme.kind(pc).is_some() {
            *sem_pred.entry(pc).or_default() += 1;
        }
        if gc == pc {
            *sem_inter.entry(gc).or_default() += 1;
        }
        let gs = segment(gc, gi);
        let ps = if scheme.kind(pc).is_some() {
            segment(pc, pi)
        } else {
            None
        };
        if let Some(g) = gs {
            *gt_sizes.entry(g).or_default() += 1;
        }
        if let Some(p) = ps {
            *pred_sizes.entry(p).or_default() += 1;
        }
        if let (Some(g), Some(p)) = (gs, ps) {
            if g.0 == p.0 {
                *overlaps.entry((g, p)).or_default() += 1;
            }
        }
    }

    let mut matched_gt: HashMap<Segment, ()> = HashMap::new();
    let mut matched_pred: HashMap<Segment, ()> = HashMap::new();
    // Matched GT segments are unique, so sorting fixes the order of the IoU sums
    // independently of predicted ids.
    let mut pairs: Vec<_> = overlaps.into_iter().collect();
    pairs.sort_unstable();
    for ((g, p), inter) in pairs {
        let union = gt_sizes[&g] + pred_sizes[&p] - inter;
        let iou = inter as f64 / union as f64;
        if iou > 0.5 {
            let a = acc.entry(g.0).or_default();
            a.tp += 1;
            a.ious.push(iou);
            matched_gt.insert(g, ());
            matched_pred.insert(p, ());
        }
    }
    for g in gt_sizes.keys().filter(|g| !matched_gt.contains_key(g)) {
        acc.entry(g.0).or_default().fn_ += 1;
    }
    for p in pred_sizes.keys().filter(|p| !matched_pred.contains_key(p)) {
        acc.entry(p.0).or_default().fp += 1;
    }
    for c in sem_gt.keys().chain(sem_pred.keys()) {
        let inter = sem_inter.get(c).copied().unwrap_or(0);
        let a = acc.entry(*c).or_default();
        a.inter = inter;
        a.union = sem_gt.get(c).copied().unwrap_or(0) + sem_pred.get(c).copied().unwrap_or(0) - inter;
    }
    Ok(acc)
}

/// Panoptic report over aligned frames. Frames are evaluated in parallel and
/// merged in order.
pub fn panoptic_quality(
    gt: &[SceneLabels],
    pred: &[PanopticPrediction],
    scheme: &SemanticScheme,
) -> Result<PanopticReport> {
    if gt.len() != pred.len() {
        return Err(Error::shape(format!(
            "{} ground-truth frames but {} predictions",
            gt.len(),
            pred.len()
        )));
    }
    let stats = gt
        .par_iter()
        .zip(pred)
        .map(|(g, p)| frame_stats(g, p, scheme))
        .collect::<Result<Vec<_>>>()?;
    let mut eval = PanopticEvaluator::new(scheme);
    for s in stats {
        eval.merge(s);
    }
    Ok(eval.finish())
}

/// Per-class semantic IoU and their mean over classes present in either labeling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    pub per_class: BTreeMap<u16, f64>,
    pub miou: f64,
}

pub fn miou(gt: &[Vec<u16>], pred: &[Vec<u16>], scheme: &SemanticScheme) -> Result<IouReport> {
    if gt.len() != pred.len() {
        return Err(Error::shape(format!(
            "{} ground-truth frames but {} predictions",
            gt.len(),
            pred.len()
        )));
    }
    let mut inter: BTreeMap<u16, u64> = BTreeMap::new();
    let mut gt_n: BTreeMap<u16, u64> = BTreeMap::new();
    let mut pred_n: BTreeMap<u16, u64> = BTreeMap::new();
    for (g, p) in gt.iter().zip(pred) {
        if g.len() != p.len() {
            return Err(Error::SizeMismatch {
                points: g.len(),
                labels: p.len(),
            });
        }
        for (&gc, &pc) in g.iter().zip(p) {
            check_class(scheme, gc)?;
            check_class(scheme, pc)?;
            if scheme.is_ignored(gc) {
                continue;
            }
            *gt_n.entry(gc).or_default() += 1;
            if scheme.kind(pc).is_some() {
                *pred_n.entry(pc).or_default() += 1;
            }
            if gc == pc {
                *inter.entry(gc).or_default() += 1;
            }
        }
    }
    let mut per_class = BTreeMap::new();
    for c in gt_n.keys().chain(pred_n.keys()) {
        let i = inter.get(c).copied().unwrap_or(0);
        let u = gt_n.get(c).copied().unwrap_or(0) + pred_n.get(c).copied().unwrap_or(0) - i;
        per_class.insert(*c, i as f64 / u as f64);
    }
    let miou = if per_class.is_empty() {
        0.0
    } else {
        per_class.values().sum::<f64>() / per_class.len() as f64
    };
    Ok(IouReport { per_class, miou })
}
