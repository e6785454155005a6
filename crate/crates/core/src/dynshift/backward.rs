//! Per-iteration L1 supervision and its gradient.
//!
//! Candidate targets `S_j` and each iteration's input seeds are constants of
//! the backward pass. The chain for iteration `i` is therefore
//! `dL/dX_i -> dL/dW_i[x, j] = η Σ_c S_j[x, c] dL/dX_i[x, c] -> softmax -> MLP_i`.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::forward::IterationRecord;
use super::mlp::softmax_backward;
use super::model::ShiftModel;
use super::{FeatureMatrix, IterationSchedule};
use crate::error::{Error, Result};
use crate::geom::Point3;

/// Per-iteration mean L1 losses and their weighted total.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub per_iteration: Vec<f64>,
    pub total: f64,
}

impl LossReport {
    /// Elementwise mean of several reports with the same iteration count.
    pub fn mean(reports: &[LossReport]) -> LossReport {
        if reports.is_empty() {
            return LossReport::default();
        }
        let n = reports.len() as f64;
        let iters = reports[0].per_iteration.len();
        let mut per_iteration = vec![0.0; iters];
        let mut total = 0.0;
        for r in reports {
            for (acc, v) in per_iteration.iter_mut().zip(&r.per_iteration) {
                *acc += v;
            }
            total += r.total;
        }
        per_iteration.iter_mut().for_each(|v| *v /= n);
        LossReport {
            per_iteration,
            total: total / n,
        }
    }
}

/// Gradients for every head (flat parameter layout) and for the raw seed features.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub heads: Vec<Vec<f64>>,
    pub features: Array2<f64>,
}

fn check_gt(records: &[IterationRecord], gt: &[Point3], schedule: &IterationSchedule) -> Result<usize> {
    if records.len() != schedule.iterations() {
        return Err(Error::shape(format!(
            "trace has {} iterations, schedule {}",
            records.len(),
            schedule.iterations()
        )));
    }
    let m = gt.len();
    if m == 0 {
        return Err(Error::Empty("dynamic shifting loss over zero seeds"));
    }
    if records.iter().any(|r| r.output.len() != m) {
        return Err(Error::shape(format!("{m} ground-truth centers do not match the trace")));
    }
    Ok(m)
}

pub fn ds_loss(records: &[IterationRecord], gt: &[Point3], schedule: &IterationSchedule) -> Result<LossReport> {
    let m = check_gt(records, gt, schedule)?;
    let per_iteration: Vec<f64> = records
        .iter()
        .map(|r| {
            let s: f64 = r
                .output
                .iter()
                .zip(gt)
                .map(|(x, c)| (x[0] - c[0]).abs() + (x[1] - c[1]).abs() + (x[2] - c[2]).abs())
                .sum();
            s / m as f64
        })
        .collect();
    let total = per_iteration
        .iter()
        .zip(schedule.loss_weights())
        .map(|(l, w)| l * w)
        .sum();
    Ok(LossReport { per_iteration, total })
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Gradient of the total loss with respect to every head's parameters and the
/// raw seed features, for a trace produced by `model` on `features`.
pub fn ds_backward(
    records: &[IterationRecord],
    features: &FeatureMatrix,
    model: &ShiftModel,
    gt: &[Point3],
) -> Result<Gradients> {
    let m = check_gt(records, gt, &model.schedule)?;
    if features.rows() != m {
        return Err(Error::shape(format!("{m} seeds but {} feature rows", features.rows())));
    }
    let normed = model.norm.apply(features)?;
    let eta = model.schedule.eta();
    let l = model.bank.len();
    let mut heads = Vec::with_capacity(records.len());
    let mut d_features = Array2::<f64>::zeros((m, features.width()));

    for ((rec, head), &w_i) in records.iter().zip(&model.heads).zip(model.schedule.loss_weights()) {
        let (weights, cache) = head.forward_cached(normed.view())?;
        if weights != rec.weights || rec.targets.len() != l {
            return Err(Error::shape("trace was not produced by this model and these features"));
        }
        let scale = w_i / m as f64;
        let mut d_weights = Array2::<f64>::zeros((m, l));
        for x in 0..m {
            let out = &rec.output[x];
            let g = [
                scale * sign(out[0] - gt[x][0]),
                scale * sign(out[1] - gt[x][1]),
                scale * sign(out[2] - gt[x][2]),
            ];
            for (j, s) in rec.targets.iter().enumerate() {
                d_weights[[x, j]] = eta * (s[x][0] * g[0] + s[x][1] * g[1] + s[x][2] * g[2]);
            }
        }
        let d_logits = softmax_backward(&weights, &d_weights);
        let (grad, mut d_in) = head.mlp().backward(&cache, d_logits.view());
        heads.push(grad);
        for mut row in d_in.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v /= model.norm.scale[j];
            }
        }
        d_features += &d_in;
    }
    Ok(Gradients {
        heads,
        features: d_features,
    })
}
