//! Point-cloud instance clustering for LiDAR panoptic segmentation.
//!
//! The centerpiece is [`dynshift`], a learnable mean-shift variant that blends
//! flat-kernel shift targets from several bandwidth candidates with per-point
//! weights predicted by a small MLP. Around it sit the pieces needed to train
//! and judge it: a uniform-grid [`spatial`] index, heuristic [`cluster`]
//! baselines, majority-vote [`fusion`], panoptic [`metrics`], a synthetic
//! scene generator ([`synth`]) and SemanticKITTI-style IO ([`scene`]).

// `!(x > 0.0)` is used on purpose so NaN fails validation along with
// out-of-range values; indexed loops mirror the per-coordinate formulas.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cluster;
pub mod dynshift;
pub mod error;
pub mod experiment;
pub mod fusion;
pub mod geom;
pub mod metrics;
pub mod scene;
pub mod spatial;
pub mod synth;

pub use cluster::{bfs_cluster, dbscan, mean_shift, ClusterAssignment, MeanShiftParams, ModeSet};
pub use error::{Error, Result};
pub use fusion::{consensus_fusion, PanopticPrediction};
pub use geom::Point3;
pub use metrics::{miou, panoptic_quality, PanopticReport};
pub use scene::{
    compute_instance_centers, decode_label, encode_label, offset_loss, read_scene, InstanceSummary, Offsets,
    PointCloud, SceneLabels, SemanticScheme,
};
pub use spatial::{fps, GridIndex, SampleMask};
