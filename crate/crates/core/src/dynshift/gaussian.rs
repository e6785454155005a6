//! Gaussian-kernel variant that regresses one bandwidth per seed instead of
//! weighting fixed candidates.

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;

use super::backward::{Gradients, LossReport};
use super::forward::{assign_from_seeds, ForwardConfig};
use super::mlp::{Mlp, MlpCache};
use super::model::{layer_dims, FeatureNorm};
use super::{FeatureMatrix, IterationSchedule};
use crate::cluster::ClusterAssignment;
use crate::error::{Error, Result};
use crate::geom::{dist2, Point3};
use crate::spatial::fps;

pub const DEFAULT_MIN_BANDWIDTH: f64 = 0.05;

fn softplus(r: f64) -> f64 {
    if r > 30.0 {
        r
    } else {
        r.exp().ln_1p()
    }
}

fn sigmoid(r: f64) -> f64 {
    1.0 / (1.0 + (-r).exp())
}

/// MLP with a single output `r`, mapped to `softplus(r) + min_bandwidth`.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectRegressionHead {
    mlp: Mlp,
    min_bandwidth: f64,
}

impl DirectRegressionHead {
    pub fn new(mlp: Mlp, min_bandwidth: f64) -> Result<Self> {
        if mlp.output_width() != 1 {
            return Err(Error::shape(format!(
                "bandwidth regressor must have one output, has {}",
                mlp.output_width()
            )));
        }
        if !(min_bandwidth > 0.0) || !min_bandwidth.is_finite() {
            return Err(Error::invalid(format!(
                "minimum bandwidth must be positive, got {min_bandwidth}"
            )));
        }
        Ok(Self { mlp, min_bandwidth })
    }

    pub fn init(features: usize, hidden: &[usize], min_bandwidth: f64, seed: u64) -> Result<Self> {
        Self::new(Mlp::init(&layer_dims(features, hidden, 1), seed)?, min_bandwidth)
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn mlp_mut(&mut self) -> &mut Mlp {
        &mut self.mlp
    }

    pub fn bandwidths(&self, features: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        Ok(self.forward_cached(features)?.0)
    }

    /// Bandwidths, raw outputs and the network cache.
    fn forward_cached(&self, features: ArrayView2<'_, f64>) -> Result<(Vec<f64>, Vec<f64>, MlpCache)> {
        let (out, cache) = self.mlp.forward_cached(features)?;
        let raw: Vec<f64> = out.column(0).to_vec();
        let deltas = raw.iter().map(|&r| softplus(r) + self.min_bandwidth).collect();
        Ok((deltas, raw, cache))
    }
}

/// Row `i` is the Gaussian-weighted mean of all rows with bandwidth `deltas[i]`.
pub fn gaussian_shift_targets(x: &[Point3], deltas: &[f64]) -> Result<Vec<Point3>> {
    if deltas.len() != x.len() {
        return Err(Error::shape(format!(
            "{} seeds but {} bandwidths",
            x.len(),
            deltas.len()
        )));
    }
    if deltas.iter().any(|&d| !(d > 0.0)) {
        return Err(Error::invalid("Gaussian bandwidths must be positive"));
    }
    Ok(x.par_iter()
        .zip(deltas)
        .map(|(q, &d)| {
            let inv = 1.0 / (2.0 * d * d);
            let mut acc = [0.0; 3];
            let mut sum = 0.0;
            for p in x {
                let k = (-dist2(q, p) * inv).exp();
                sum += k;
                acc[0] += k * p[0];
                acc[1] += k * p[1];
                acc[2] += k * p[2];
            }
            // The self term keeps sum >= 1.
            [acc[0] / sum, acc[1] / sum, acc[2] / sum]
        })
        .collect())
}

/// One full Gaussian step (`η = 1`) with bandwidths regressed from `features`.
pub fn gaussian_direct_shift(
    x: &[Point3],
    features: &FeatureMatrix,
    head: &DirectRegressionHead,
) -> Result<Vec<Point3>> {
    if features.rows() != x.len() {
        return Err(Error::shape(format!(
            "{} seeds but {} feature rows",
            x.len(),
            features.rows()
        )));
    }
    gaussian_shift_targets(x, &head.bandwidths(features.view())?)
}

/// Per-iteration seeds, regressed bandwidths and outputs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DirectTrace {
    pub inputs: Vec<Vec<Point3>>,
    pub bandwidths: Vec<Vec<f64>>,
    pub outputs: Vec<Vec<Point3>>,
}

/// Direct-regression counterpart of [`super::ShiftModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct DirectModel {
    pub schedule: IterationSchedule,
    pub norm: FeatureNorm,
    pub heads: Vec<DirectRegressionHead>,
    pub min_bandwidth: f64,
}

impl DirectModel {
    pub fn new(
        schedule: IterationSchedule,
        norm: FeatureNorm,
        heads: Vec<DirectRegressionHead>,
        min_bandwidth: f64,
    ) -> Result<Self> {
        if heads.len() != schedule.iterations() {
            return Err(Error::shape(format!(
                "{} heads for {} iterations",
                heads.len(),
                schedule.iterations()
            )));
        }
        if norm.mean.len() != norm.scale.len() {
            return Err(Error::shape("feature normalisation mean/scale lengths differ"));
        }
        for (i, h) in heads.iter().enumerate() {
            if h.mlp.input_width() != norm.width() {
                return Err(Error::shape(format!(
                    "head {i} takes {} features, normalisation has {}",
                    h.mlp.input_width(),
                    norm.width()
                )));
            }
            if h.min_bandwidth != min_bandwidth {
                return Err(Error::invalid(format!("head {i} has a different minimum bandwidth")));
            }
        }
        Ok(Self {
            schedule,
            norm,
            heads,
            min_bandwidth,
        })
    }

    pub fn init(
        schedule: IterationSchedule,
        norm: FeatureNorm,
        hidden: &[usize],
        min_bandwidth: f64,
        seed: u64,
    ) -> Result<Self> {
        let heads = (0..schedule.iterations())
            .map(|i| DirectRegressionHead::init(norm.width(), hidden, min_bandwidth, seed.wrapping_add(i as u64)))
            .collect::<Result<_>>()?;
        Self::new(schedule, norm, heads, min_bandwidth)
    }

    pub fn feature_width(&self) -> usize {
        self.norm.width()
    }

    pub fn shift(&self, x0: Vec<Point3>, features: &FeatureMatrix) -> Result<DirectTrace> {
        if features.rows() != x0.len() {
            return Err(Error::shape(format!(
                "{} seeds but {} feature rows",
                x0.len(),
                features.rows()
            )));
        }
        let normed = self.norm.apply(features)?;
        let eta = self.schedule.eta();
        let mut trace = DirectTrace::default();
        let mut x = x0;
        for head in &self.heads {
            let deltas = head.bandwidths(normed.view())?;
            let f = gaussian_shift_targets(&x, &deltas)?;
            let out: Vec<Point3> = if eta == 1.0 {
                f
            } else {
                x.iter()
                    .zip(&f)
                    .map(|(p, t)| {
                        [
                            p[0] + eta * (t[0] - p[0]),
                            p[1] + eta * (t[1] - p[1]),
                            p[2] + eta * (t[2] - p[2]),
                        ]
                    })
                    .collect()
            };
            trace.inputs.push(x);
            trace.bandwidths.push(deltas);
            trace.outputs.push(out.clone());
            x = out;
        }
        Ok(trace)
    }

    pub fn loss(&self, trace: &DirectTrace, gt: &[Point3]) -> Result<LossReport> {
        let m = gt.len();
        if m == 0 {
            return Err(Error::Empty("dynamic shifting loss over zero seeds"));
        }
        if trace.outputs.len() != self.schedule.iterations() || trace.outputs.iter().any(|o| o.len() != m) {
            return Err(Error::shape("trace does not match schedule or ground truth"));
        }
        let per_iteration: Vec<f64> = trace
            .outputs
            .iter()
            .map(|o| {
                o.iter()
                    .zip(gt)
                    .map(|(x, c)| crate::geom::l1(&crate::geom::sub(x, c)))
                    .sum::<f64>()
                    / m as f64
            })
            .collect();
        let total = per_iteration
            .iter()
            .zip(self.schedule.loss_weights())
            .map(|(l, w)| l * w)
            .sum();
        Ok(LossReport { per_iteration, total })
    }

    /// Gradient of the total loss; iteration inputs are constants, the
    /// bandwidth dependence of the Gaussian weights is differentiated exactly.
    pub fn backward(&self, trace: &DirectTrace, features: &FeatureMatrix, gt: &[Point3]) -> Result<Gradients> {
        let m = gt.len();
        self.loss(trace, gt)?;
        if features.rows() != m {
            return Err(Error::shape(format!("{m} seeds but {} feature rows", features.rows())));
        }
        let normed = self.norm.apply(features)?;
        let eta = self.schedule.eta();
        let mut heads = Vec::with_capacity(self.heads.len());
        let mut d_features = Array2::<f64>::zeros((m, features.width()));
        for (i, head) in self.heads.iter().enumerate() {
            let (deltas, raw, cache) = head.forward_cached(normed.view())?;
            if deltas != trace.bandwidths[i] {
                return Err(Error::shape("trace was not produced by this model and these features"));
            }
            let x = &trace.inputs[i];
            let out = &trace.outputs[i];
            let scale = self.schedule.loss_weights()[i] / m as f64;
            let d_raw: Vec<f64> = (0..m)
                .into_par_iter()
                .map(|a| {
                    let g: [f64; 3] = std::array::from_fn(|c| eta * scale * sign(out[a][c] - gt[a][c]));
                    let d = deltas[a];
                    let inv = 1.0 / (2.0 * d * d);
                    let mut sum = 0.0;
                    let mut f = [0.0; 3];
                    for p in x {
                        let k = (-dist2(&x[a], p) * inv).exp();
                        sum += k;
                        for c in 0..3 {
                            f[c] += k * p[c];
                        }
                    }
                    for v in &mut f {
                        *v /= sum;
                    }
                    let mut df = [0.0; 3];
                    for p in x {
                        let d2 = dist2(&x[a], p);
                        let dk = (-d2 * inv).exp() * d2 / (d * d * d);
                        for c in 0..3 {
                            df[c] += dk * (p[c] - f[c]);
                        }
                    }
                    let d_delta: f64 = (0..3).map(|c| g[c] * df[c] / sum).sum();
                    d_delta * sigmoid(raw[a])
                })
                .collect();
            let d_out = Array2::from_shape_vec((m, 1), d_raw).expect("column vector");
            let (grad, mut d_in) = head.mlp.backward(&cache, d_out.view());
            for mut row in d_in.rows_mut() {
                for (j, v) in row.iter_mut().enumerate() {
                    *v /= self.norm.scale[j];
                }
            }
            d_features += &d_in;
            heads.push(grad);
        }
        Ok(Gradients {
            heads,
            features: d_features,
        })
    }
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

/// Clustering pass with the direct-regression model; mirrors [`super::ds_forward`].
pub fn direct_forward(
    points: &[Point3],
    features: &FeatureMatrix,
    centers: &[Point3],
    model: &DirectModel,
    config: &ForwardConfig,
) -> Result<(ClusterAssignment, DirectTrace)> {
    let m = points.len();
    if features.rows() != m || centers.len() != m {
        return Err(Error::shape(format!(
            "{m} points, {} feature rows, {} centers",
            features.rows(),
            centers.len()
        )));
    }
    if config.seed_count == 0 {
        return Err(Error::invalid("seed_count must be at least 1"));
    }
    if m == 0 {
        return Ok((ClusterAssignment::default(), DirectTrace::default()));
    }
    let mask = fps(points, config.seed_count, config.seed);
    let trace = model.shift(mask.gather(centers), &features.gather(&mask))?;
    let converged = trace.outputs.last().expect("at least one iteration");
    let assignment = assign_from_seeds(points, &mask, converged, config)?;
    Ok((assignment, trace))
}
