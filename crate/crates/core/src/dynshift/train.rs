use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamHyper, AdamState};
use super::backward::{ds_backward, ds_loss, LossReport};
use super::forward::shift_seeds;
use super::gaussian::DirectModel;
use super::model::ShiftModel;
use super::FeatureMatrix;
use crate::error::{Error, Result};
use crate::geom::Point3;

/// One scene reduced to its seeds: starting positions (regressed centers),
/// raw features and ground-truth centers, all row-aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub x0: Vec<Point3>,
    pub features: FeatureMatrix,
    pub gt: Vec<Point3>,
}

impl TrainingSample {
    pub fn new(x0: Vec<Point3>, features: FeatureMatrix, gt: Vec<Point3>) -> Result<Self> {
        if x0.is_empty() {
            return Err(Error::Empty("training sample has no seeds"));
        }
        if features.rows() != x0.len() || gt.len() != x0.len() {
            return Err(Error::shape(format!(
                "{} seeds, {} feature rows, {} ground-truth centers",
                x0.len(),
                features.rows(),
                gt.len()
            )));
        }
        Ok(Self { x0, features, gt })
    }
}

/// A model whose parameters can be flattened and optimised.
pub trait Trainable: Clone + Send + Sync {
    fn params(&self) -> Vec<f64>;
    fn set_params(&mut self, params: &[f64]) -> Result<()>;
    fn loss(&self, sample: &TrainingSample) -> Result<LossReport>;
    fn loss_and_grad(&self, sample: &TrainingSample) -> Result<(LossReport, Vec<f64>)>;
}

fn set_flat<'a>(params: &[f64], slots: impl Iterator<Item = &'a mut [f64]>) -> Result<()> {
    let mut off = 0;
    let mut slots: Vec<&mut [f64]> = slots.collect();
    let total: usize = slots.iter().map(|s| s.len()).sum();
    if total != params.len() {
        return Err(Error::shape(format!(
            "model has {total} parameters, got {}",
            params.len()
        )));
    }
    for s in slots.iter_mut() {
        let n = s.len();
        s.copy_from_slice(&params[off..off + n]);
        off += n;
    }
    Ok(())
}

impl Trainable for ShiftModel {
    fn params(&self) -> Vec<f64> {
        self.heads
            .iter()
            .flat_map(|h| h.mlp().params().iter().copied())
            .collect()
    }

    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        set_flat(params, self.heads.iter_mut().map(|h| h.mlp_mut().params_mut()))
    }

    fn loss(&self, s: &TrainingSample) -> Result<LossReport> {
        let recs = shift_seeds(s.x0.clone(), &s.features, self)?;
        ds_loss(&recs, &s.gt, &self.schedule)
    }

    fn loss_and_grad(&self, s: &TrainingSample) -> Result<(LossReport, Vec<f64>)> {
        let recs = shift_seeds(s.x0.clone(), &s.features, self)?;
        let loss = ds_loss(&recs, &s.gt, &self.schedule)?;
        let g = ds_backward(&recs, &s.features, self, &s.gt)?;
        Ok((loss, g.heads.concat()))
    }
}

impl Trainable for DirectModel {
    fn params(&self) -> Vec<f64> {
        self.heads
            .iter()
            .flat_map(|h| h.mlp().params().iter().copied())
            .collect()
    }

    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        set_flat(params, self.heads.iter_mut().map(|h| h.mlp_mut().params_mut()))
    }

    fn loss(&self, s: &TrainingSample) -> Result<LossReport> {
        let trace = self.shift(s.x0.clone(), &s.features)?;
        DirectModel::loss(self, &trace, &s.gt)
    }

    fn loss_and_grad(&self, s: &TrainingSample) -> Result<(LossReport, Vec<f64>)> {
        let trace = self.shift(s.x0.clone(), &s.features)?;
        let loss = DirectModel::loss(self, &trace, &s.gt)?;
        let g = self.backward(&trace, &s.features, &s.gt)?;
        Ok((loss, g.heads.concat()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Scenes per optimiser step. One step per scene keeps small synthetic
    /// sets from being under-trained at the default learning rate.
    pub batch_size: usize,
    pub adam: AdamHyper,
    /// Seeds the per-epoch shuffle.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 1,
            adam: AdamHyper::default(),
            seed: 0,
        }
    }
}

/// Mean loss over the dataset. Entry 0 of a training curve is measured
/// before any update; entry `e` averages the losses seen during epoch `e`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: LossReport,
}

/// Minimises the mean total loss over `data` with mini-batch Adam.
///
/// Scenes of a batch are evaluated in parallel; their gradients are averaged
/// in batch order, so results do not depend on the thread count.
pub fn train<T: Trainable>(model: &T, data: &[TrainingSample], cfg: &TrainConfig) -> Result<(T, Vec<EpochStats>)> {
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch_size must be at least 1"));
    }
    cfg.adam.validate()?;
    let mut model = model.clone();
    let mut theta = model.params();
    let mut state = AdamState::new(theta.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let initial = data.par_iter().map(|s| model.loss(s)).collect::<Result<Vec<_>>>()?;
    let mut curve = vec![EpochStats {
        epoch: 0,
        loss: LossReport::mean(&initial),
    }];
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut seen = Vec::with_capacity(data.len());
        for batch in order.chunks(cfg.batch_size) {
            let results = batch
                .par_iter()
                .map(|&i| model.loss_and_grad(&data[i]))
                .collect::<Result<Vec<_>>>()?;
            let mut grad = vec![0.0; theta.len()];
            for (loss, g) in results {
                for (a, b) in grad.iter_mut().zip(&g) {
                    *a += b;
                }
                seen.push(loss);
            }
            let n = batch.len() as f64;
            grad.iter_mut().for_each(|g| *g /= n);
            adam_step(&mut theta, &grad, &mut state, &cfg.adam)?;
            model.set_params(&theta)?;
        }
        curve.push(EpochStats {
            epoch,
            loss: LossReport::mean(&seen),
        });
    }
    Ok((model, curve))
}
