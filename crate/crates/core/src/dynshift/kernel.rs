use ndarray::Array2;
use rayon::prelude::*;

use super::BandwidthBank;
use crate::cluster::flat_kernel_mean;
use crate::error::{Error, Result};
use crate::geom::Point3;
use crate::spatial::GridIndex;

/// Mean of all rows of `x` within `delta` of each row. Every row sees itself,
/// so the divisor is at least one.
pub fn flat_kernel_shift(x: &[Point3], delta: f64) -> Result<Vec<Point3>> {
    if !(delta > 0.0) {
        return Err(Error::invalid(format!("bandwidth must be positive, got {delta}")));
    }
    let index = GridIndex::build(x, delta)?;
    Ok(x.par_iter()
        .map(|q| {
            flat_kernel_mean(&index, q, delta)
                .expect("ball contains its own center")
                .0
        })
        .collect())
}

/// Flat-kernel targets for every candidate, `targets[j][i]` for seed `i`.
pub(crate) fn candidate_targets(x: &[Point3], bank: &BandwidthBank) -> Result<Vec<Vec<Point3>>> {
    bank.candidates().iter().map(|&d| flat_kernel_shift(x, d)).collect()
}

/// `X + η Σ_j W[:, j] ⊙ (S_j − X)`, equal to the blend of targets since the
/// weights sum to one. With `η = 1` a row whose weight is entirely on one
/// candidate takes that target verbatim.
pub(crate) fn blend(x: &[Point3], weights: &Array2<f64>, targets: &[Vec<Point3>], eta: f64) -> Vec<Point3> {
    (0..x.len())
        .map(|i| {
            let p = x[i];
            if eta == 1.0 {
                if let Some(j) = (0..targets.len()).find(|&j| weights[[i, j]] == 1.0) {
                    return targets[j][i];
                }
            }
            let mut acc = [0.0; 3];
            for (j, s) in targets.iter().enumerate() {
                let w = weights[[i, j]];
                acc[0] += w * (s[i][0] - p[0]);
                acc[1] += w * (s[i][1] - p[1]);
                acc[2] += w * (s[i][2] - p[2]);
            }
            [p[0] + eta * acc[0], p[1] + eta * acc[1], p[2] + eta * acc[2]]
        })
        .collect()
}

fn check_weights(x: &[Point3], weights: &Array2<f64>, bank: &BandwidthBank) -> Result<()> {
    if weights.dim() != (x.len(), bank.len()) {
        return Err(Error::shape(format!(
            "weights are {:?}, expected ({}, {})",
            weights.dim(),
            x.len(),
            bank.len()
        )));
    }
    Ok(())
}

/// One dynamic shifting step with precomputed weights.
pub fn ds_iteration(x: &[Point3], weights: &Array2<f64>, bank: &BandwidthBank, eta: f64) -> Result<Vec<Point3>> {
    check_weights(x, weights, bank)?;
    let targets = candidate_targets(x, bank)?;
    Ok(blend(x, weights, &targets, eta))
}

/// Weighted average of the candidates per row: `W[i, :] · L`.
pub fn effective_bandwidths(weights: &Array2<f64>, bank: &BandwidthBank) -> Result<Vec<f64>> {
    if weights.ncols() != bank.len() {
        return Err(Error::shape(format!(
            "weights have {} columns for {} candidates",
            weights.ncols(),
            bank.len()
        )));
    }
    Ok(weights
        .rows()
        .into_iter()
        .map(|r| r.iter().zip(bank.candidates()).map(|(w, d)| w * d).sum())
        .collect())
}
