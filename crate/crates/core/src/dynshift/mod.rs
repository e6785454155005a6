//! Dynamic shifting: mean-shift iterations whose flat-kernel bandwidth is
//! chosen per seed by blending several candidate bandwidths with learned
//! weights.
//!
//! One iteration computes, for every candidate `δ_j`, the flat-kernel target
//! `S_j` (mean of the seeds within `δ_j`), then moves each seed to
//! `X + η (Σ_j W[:, j] ⊙ S_j − X)`. The weights `W` come from a softmax over an
//! MLP applied to per-seed features; each iteration owns its own MLP.
//!
//! Training supervises every iteration with the mean L1 distance between the
//! shifted seeds and their instance centers. Candidate targets are treated as
//! constants during backpropagation, so the loss of iteration `i` only reaches
//! iteration `i`'s weight network.

mod adam;
mod backward;
mod forward;
mod gaussian;
mod kernel;
mod mlp;
mod model;
mod train;

pub use adam::{adam_step, AdamHyper, AdamState};
pub use backward::{ds_backward, ds_loss, Gradients, LossReport};
pub use forward::{ds_forward, shift_seeds, FinalClustering, ForwardConfig, ForwardTrace, IterationRecord};
pub use gaussian::{
    direct_forward, gaussian_direct_shift, gaussian_shift_targets, DirectModel, DirectRegressionHead, DirectTrace,
    DEFAULT_MIN_BANDWIDTH,
};
pub use kernel::{ds_iteration, effective_bandwidths, flat_kernel_shift};
pub use mlp::{param_count, softmax_backward, softmax_rows, Mlp, MlpCache};
pub use model::{FeatureNorm, ModelFile, ShiftModel, WeightHead};
pub use train::{train, EpochStats, TrainConfig, Trainable, TrainingSample};

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spatial::SampleMask;

/// Bandwidth candidates used throughout the reference configuration (meters).
pub const DEFAULT_CANDIDATES: [f64; 3] = [0.2, 1.7, 3.2];
pub const DEFAULT_ITERATIONS: usize = 4;
pub const DEFAULT_SEED_COUNT: usize = 10_000;
pub const DEFAULT_FINAL_BANDWIDTH: f64 = 0.65;
pub const DEFAULT_FINAL_BFS_RADIUS: f64 = 1.2;

/// Strictly increasing, positive bandwidth candidates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct BandwidthBank(Vec<f64>);

impl BandwidthBank {
    pub fn new(candidates: Vec<f64>) -> Result<Self> {
        if candidates.is_empty() {
            return Err(Error::invalid("bandwidth bank needs at least one candidate"));
        }
        if candidates.iter().any(|&d| !(d > 0.0) || !d.is_finite()) {
            return Err(Error::invalid(format!(
                "bandwidths must be positive and finite: {candidates:?}"
            )));
        }
        if candidates.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid(format!(
                "bandwidths must be strictly increasing: {candidates:?}"
            )));
        }
        Ok(Self(candidates))
    }

    pub fn candidates(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl Default for BandwidthBank {
    fn default() -> Self {
        Self(DEFAULT_CANDIDATES.to_vec())
    }
}

impl TryFrom<Vec<f64>> for BandwidthBank {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<BandwidthBank> for Vec<f64> {
    fn from(b: BandwidthBank) -> Self {
        b.0
    }
}

/// Iteration count, step scale and per-iteration loss weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationSchedule {
    eta: f64,
    loss_weights: Vec<f64>,
}

impl IterationSchedule {
    pub fn new(eta: f64, loss_weights: Vec<f64>) -> Result<Self> {
        if loss_weights.is_empty() {
            return Err(Error::invalid("schedule needs at least one iteration"));
        }
        if !(eta >= 0.0) || !eta.is_finite() {
            return Err(Error::invalid(format!("step scale must be nonnegative, got {eta}")));
        }
        if loss_weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return Err(Error::invalid(format!(
                "loss weights must be nonnegative: {loss_weights:?}"
            )));
        }
        Ok(Self { eta, loss_weights })
    }

    /// `iterations` steps with unit step scale and unit loss weights.
    pub fn uniform(iterations: usize) -> Result<Self> {
        Self::new(1.0, vec![1.0; iterations])
    }

    pub fn iterations(&self) -> usize {
        self.loss_weights.len()
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn loss_weights(&self) -> &[f64] {
        &self.loss_weights
    }
}

impl Default for IterationSchedule {
    fn default() -> Self {
        Self::uniform(DEFAULT_ITERATIONS).unwrap()
    }
}

/// Per-point feature rows (finite, at least one column).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix(Array2<f64>);

impl FeatureMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.ncols() == 0 {
            return Err(Error::invalid("feature matrix needs at least one column"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("feature matrix has non-finite entries"));
        }
        Ok(Self(values))
    }

    pub fn from_rows(rows: &[Vec<f64>], width: usize) -> Result<Self> {
        let mut a = Array2::zeros((rows.len(), width));
        for (i, r) in rows.iter().enumerate() {
            if r.len() != width {
                return Err(Error::shape(format!(
                    "feature row {i} has {} values, expected {width}",
                    r.len()
                )));
            }
            for (j, &v) in r.iter().enumerate() {
                a[[i, j]] = v;
            }
        }
        Self::new(a)
    }

    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn width(&self) -> usize {
        self.0.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn gather(&self, mask: &SampleMask) -> Self {
        Self(self.0.select(ndarray::Axis(0), mask.indices()))
    }
}
