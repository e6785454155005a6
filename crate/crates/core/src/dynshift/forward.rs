use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::kernel::{blend, candidate_targets};
use super::model::ShiftModel;
use super::{FeatureMatrix, DEFAULT_FINAL_BANDWIDTH, DEFAULT_SEED_COUNT};
use crate::cluster::{bfs_cluster, mean_shift, ClusterAssignment, MeanShiftParams};
use crate::error::{Error, Result};
use crate::geom::Point3;
use crate::spatial::{fps, GridIndex, SampleMask};

/// Heuristic used to group the converged seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum FinalClustering {
    MeanShift(MeanShiftParams),
    Bfs { radius: f64 },
}

impl Default for FinalClustering {
    fn default() -> Self {
        FinalClustering::MeanShift(MeanShiftParams::with_bandwidth(DEFAULT_FINAL_BANDWIDTH))
    }
}

impl FinalClustering {
    pub fn run(&self, points: &[Point3]) -> Result<ClusterAssignment> {
        match self {
            FinalClustering::MeanShift(p) => Ok(mean_shift(points, p)?.0),
            FinalClustering::Bfs { radius } => bfs_cluster(points, *radius),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForwardConfig {
    pub seed_count: usize,
    pub seed: u64,
    pub final_clustering: FinalClustering,
    /// Clusters with fewer points than this become id 0 after assignment.
    pub min_instance_points: usize,
}

impl Default for ForwardConfig {
    fn default() -> Self {
        Self {
            seed_count: DEFAULT_SEED_COUNT,
            seed: 0,
            final_clustering: FinalClustering::default(),
            min_instance_points: 1,
        }
    }
}

/// State of one iteration: the seeds it started from, each candidate's
/// flat-kernel targets, the blend weights and the resulting seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub input: Vec<Point3>,
    pub targets: Vec<Vec<Point3>>,
    pub weights: Array2<f64>,
    pub output: Vec<Point3>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ForwardTrace {
    /// Seed indices into the things points.
    pub mask: SampleMask,
    pub iterations: Vec<IterationRecord>,
}

impl ForwardTrace {
    pub fn seeds(&self) -> usize {
        self.mask.len()
    }

    /// Seed positions after the last iteration.
    pub fn converged(&self) -> Option<&[Point3]> {
        self.iterations.last().map(|r| r.output.as_slice())
    }
}

/// Runs the model's iterations on seed positions `x0` with seed features.
pub fn shift_seeds(x0: Vec<Point3>, features: &FeatureMatrix, model: &ShiftModel) -> Result<Vec<IterationRecord>> {
    if features.rows() != x0.len() {
        return Err(Error::shape(format!(
            "{} seeds but {} feature rows",
            x0.len(),
            features.rows()
        )));
    }
    let all_weights = model.weights(features)?;
    let eta = model.schedule.eta();
    let mut x = x0;
    let mut records = Vec::with_capacity(all_weights.len());
    for weights in all_weights {
        let targets = candidate_targets(&x, &model.bank)?;
        let output = blend(&x, &weights, &targets, eta);
        records.push(IterationRecord {
            input: x,
            targets,
            weights,
            output: output.clone(),
        });
        x = output;
    }
    Ok(records)
}

/// Full clustering pass over the things points of one scene.
///
/// Seeds are farthest-point samples of `points`; they start at the matching
/// regressed `centers`, run every model iteration, are grouped by the final
/// heuristic, and each things point inherits the id of its nearest seed
/// (nearest in raw point space).
pub fn ds_forward(
    points: &[Point3],
    features: &FeatureMatrix,
    centers: &[Point3],
    model: &ShiftModel,
    config: &ForwardConfig,
) -> Result<(ClusterAssignment, ForwardTrace)> {
    let m = points.len();
    if features.rows() != m || centers.len() != m {
        return Err(Error::shape(format!(
            "{m} points, {} feature rows, {} centers",
            features.rows(),
            centers.len()
        )));
    }
    if features.width() != model.feature_width() {
        return Err(Error::shape(format!(
            "model expects {} features, got {}",
            model.feature_width(),
            features.width()
        )));
    }
    if config.seed_count == 0 {
        return Err(Error::invalid("seed_count must be at least 1"));
    }
    if m == 0 {
        return Ok((ClusterAssignment::default(), ForwardTrace::default()));
    }
    let mask = fps(points, config.seed_count, config.seed);
    let x0 = mask.gather(centers);
    let seed_features = features.gather(&mask);
    let iterations = shift_seeds(x0, &seed_features, model)?;
    let converged = &iterations.last().expect("at least one iteration").output;
    let assignment = assign_from_seeds(points, &mask, converged, config)?;
    Ok((assignment, ForwardTrace { mask, iterations }))
}

/// Groups converged seeds with the final heuristic and gives every point the
/// id of its nearest seed (nearest in raw point space), then filters small
/// clusters.
pub(crate) fn assign_from_seeds(
    points: &[Point3],
    mask: &SampleMask,
    converged: &[Point3],
    config: &ForwardConfig,
) -> Result<ClusterAssignment> {
    let seed_ids = config.final_clustering.run(converged)?;
    let raw = if mask.len() == points.len() {
        // Every point seeds itself; the mask is a permutation.
        let mut raw = vec![0; points.len()];
        for (s, &p) in mask.indices().iter().enumerate() {
            raw[p] = seed_ids.ids()[s];
        }
        raw
    } else {
        let seed_points = mask.gather(points);
        let cell = nearest_cell_size(&seed_points);
        let index = GridIndex::build(&seed_points, cell)?;
        points
            .iter()
            .map(|p| index.nearest(p).map(|s| seed_ids.ids()[s]))
            .collect::<Result<Vec<_>>>()?
    };
    Ok(ClusterAssignment::from_raw(&raw).filter_small(config.min_instance_points))
}

/// Grid cell giving a handful of seeds per occupied cell.
fn nearest_cell_size(points: &[Point3]) -> f64 {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        for k in 0..3 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let extent = (0..3).map(|k| hi[k] - lo[k]).fold(0.0f64, f64::max);
    (extent / (points.len() as f64).cbrt()).max(0.05)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynshift::{flat_kernel_shift, BandwidthBank, IterationSchedule};
    use crate::geom::dist2;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn features(n: usize, d: usize, seed: u64) -> FeatureMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMatrix::new(Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0))).unwrap()
    }

    #[test]
    fn empty_input_gives_empty_assignment() {
        let model = ShiftModel::uniform(BandwidthBank::default(), IterationSchedule::default(), 4, &[8]).unwrap();
        let f = FeatureMatrix::new(Array2::zeros((0, 4))).unwrap();
        let (a, t) = ds_forward(&[], &f, &[], &model, &ForwardConfig::default()).unwrap();
        assert!(a.is_empty());
        assert!(t.iterations.is_empty());
    }

    #[test]
    fn shape_errors() {
        let model = ShiftModel::uniform(BandwidthBank::default(), IterationSchedule::default(), 4, &[8]).unwrap();
        let pts = vec![[0.0; 3]; 3];
        assert!(ds_forward(&pts, &features(2, 4, 0), &pts, &model, &ForwardConfig::default()).is_err());
        assert!(ds_forward(&pts, &features(3, 5, 0), &pts, &model, &ForwardConfig::default()).is_err());
        assert!(ds_forward(&pts, &features(3, 4, 0), &pts[..2], &model, &ForwardConfig::default()).is_err());
    }

    #[test]
    fn pre_converged_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut pts = Vec::new();
        let mut centers = Vec::new();
        let mut truth = Vec::new();
        for (id, c) in [[0.0, 0.0, 0.0], [20.0, 5.0, 0.0]].iter().enumerate() {
            for _ in 0..30 {
                pts.push([
                    c[0] + rng.random_range(-1.0..1.0),
                    c[1] + rng.random_range(-1.0..1.0),
                    c[2],
                ]);
                centers.push(*c);
                truth.push(id as u32 + 1);
            }
        }
        let model = ShiftModel::uniform(BandwidthBank::default(), IterationSchedule::default(), 3, &[8]).unwrap();
        for seed_count in [10_000, 12] {
            let cfg = ForwardConfig {
                seed_count,
                ..ForwardConfig::default()
            };
            let (a, _) = ds_forward(&pts, &features(60, 3, 2), &centers, &model, &cfg).unwrap();
            assert_eq!(a.num_clusters(), 2);
            assert_eq!(a.ids(), truth.as_slice());
        }
    }

    #[test]
    fn uniform_heads_average_candidates() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0: Vec<Point3> = (0..40)
            .map(|_| [rng.random_range(0.0..5.0), rng.random_range(0.0..5.0), 0.0])
            .collect();
        let bank = BandwidthBank::new(vec![0.5, 1.5]).unwrap();
        let model = ShiftModel::uniform(bank, IterationSchedule::uniform(2).unwrap(), 3, &[4]).unwrap();
        let recs = shift_seeds(x0.clone(), &features(40, 3, 4), &model).unwrap();
        let mut x = x0;
        for r in &recs {
            let a = flat_kernel_shift(&x, 0.5).unwrap();
            let b = flat_kernel_shift(&x, 1.5).unwrap();
            let expect: Vec<Point3> = (0..x.len())
                .map(|i| {
                    [
                        0.5 * a[i][0] + 0.5 * b[i][0],
                        0.5 * a[i][1] + 0.5 * b[i][1],
                        0.5 * a[i][2] + 0.5 * b[i][2],
                    ]
                })
                .collect();
            for (p, q) in r.output.iter().zip(&expect) {
                assert!(dist2(p, q) < 1e-24);
            }
            x = r.output.clone();
        }
    }

    #[test]
    fn min_instance_filter_sends_small_clusters_to_noise() {
        let mut pts = vec![[0.0, 0.0, 0.0]; 10];
        for (i, p) in pts.iter_mut().enumerate() {
            p[0] = i as f64 * 0.01;
        }
        pts.push([50.0, 0.0, 0.0]);
        let model = ShiftModel::uniform(BandwidthBank::default(), IterationSchedule::default(), 2, &[4]).unwrap();
        let cfg = ForwardConfig {
            min_instance_points: 5,
            ..ForwardConfig::default()
        };
        let (a, _) = ds_forward(&pts, &features(11, 2, 5), &pts.clone(), &model, &cfg).unwrap();
        assert_eq!(a.num_clusters(), 1);
        assert_eq!(a.ids()[10], 0);
    }
}
