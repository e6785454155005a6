//! Synthetic LiDAR-like scenes with simulated center regression.
//!
//! The sensor sits at the origin and the ground plane at `z = GROUND_Z`.
//! Instances are boxes resting on the ground; points are sampled on the faces
//! that face the sensor with a density falling off as `(10 m / d)^decay`.
//! Regressed centers are the tight-box center of the sampled points plus
//! Gaussian noise elongated along the sensor ray, with spread proportional to
//! the instance size.

use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, SymmetricEigen};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dynshift::FeatureMatrix;
use crate::error::{Error, Result};
use crate::geom::{add, norm, sub, Point3};
use crate::scene::{
    compute_instance_centers, labels_to_bytes, points_to_bytes, read_scene, InstanceSummary, Offsets, PointCloud,
    SceneLabels, SemanticScheme,
};
use crate::spatial::GridIndex;

pub const GROUND_Z: f64 = -1.8;
/// Distance at which `reference_density` applies.
pub const REFERENCE_DISTANCE: f64 = 10.0;
pub const FEATURE_NAMES: [&str; 7] = [
    "distance",
    "count_0.5m",
    "count_2m",
    "eigen_ratio_21",
    "eigen_ratio_31",
    "height",
    "offset_norm",
];
pub const FEATURE_WIDTH: usize = FEATURE_NAMES.len();

const ROAD: u16 = 40;
const BUILDING: u16 = 50;
const UNLABELED: u16 = 0;

/// One things class of the generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThingClass {
    pub id: u16,
    pub name: String,
    /// Box extents `[min, max]` in meters.
    pub length: [f64; 2],
    pub width: [f64; 2],
    pub height: [f64; 2],
    /// Instances per scene.
    pub count: usize,
    /// Probability that an instance is placed next to the previous instance of
    /// the same class instead of at a fresh location.
    #[serde(default)]
    pub group_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub things: Vec<ThingClass>,
    /// Sensor distance range of instance centers, meters.
    pub distance: [f64; 2],
    pub density_decay: f64,
    /// Points per square meter of sensor-facing surface at the reference distance.
    pub reference_density: f64,
    /// Lower clamp on the points sampled per instance.
    pub min_points: usize,
    /// Regressed-center noise along the ray, as a fraction of instance length.
    pub noise_scale: f64,
    /// Ratio of along-ray to across-ray noise.
    pub strip_anisotropy: f64,
    /// Center-to-center gap range for grouped instances, meters.
    pub group_gap: [f64; 2],
    pub road_points: usize,
    pub building_points: usize,
    pub unlabeled_points: usize,
    pub max_attempts: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            things: vec![
                ThingClass {
                    id: 10,
                    name: "vehicle".into(),
                    length: [3.5, 5.0],
                    width: [1.6, 2.0],
                    height: [1.4, 1.7],
                    count: 4,
                    group_prob: 0.0,
                },
                ThingClass {
                    id: 30,
                    name: "pedestrian".into(),
                    length: [0.4, 0.8],
                    width: [0.4, 0.6],
                    height: [1.5, 1.9],
                    count: 6,
                    group_prob: 0.6,
                },
                ThingClass {
                    id: 31,
                    name: "cyclist".into(),
                    length: [1.5, 2.0],
                    width: [0.5, 0.8],
                    height: [1.5, 1.8],
                    count: 3,
                    group_prob: 0.0,
                },
            ],
            distance: [6.0, 30.0],
            density_decay: 2.0,
            reference_density: 25.0,
            min_points: 8,
            noise_scale: 0.15,
            strip_anisotropy: 5.0,
            group_gap: [0.6, 1.5],
            road_points: 600,
            building_points: 300,
            unlabeled_points: 20,
            max_attempts: 200,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let range_ok = |r: &[f64; 2]| r[0] > 0.0 && r[1] >= r[0] && r[1].is_finite();
        for c in &self.things {
            if !range_ok(&c.length) || !range_ok(&c.width) || !range_ok(&c.height) {
                return Err(Error::invalid(format!("class {} has an invalid size range", c.name)));
            }
            if !(0.0..=1.0).contains(&c.group_prob) {
                return Err(Error::invalid(format!("class {} group_prob must be in [0, 1]", c.name)));
            }
            if matches!(c.id, ROAD | BUILDING | UNLABELED) {
                return Err(Error::invalid(format!("class id {} is reserved", c.id)));
            }
        }
        if self.things.iter().all(|c| c.count == 0) {
            return Err(Error::invalid("generator needs at least one instance per scene"));
        }
        if !range_ok(&self.distance) || !range_ok(&self.group_gap) {
            return Err(Error::invalid(
                "distance and group_gap ranges must be positive and ordered",
            ));
        }
        if !(self.density_decay >= 0.0) || !(self.reference_density > 0.0) {
            return Err(Error::invalid("density_decay must be >= 0 and reference_density > 0"));
        }
        if !(self.noise_scale >= 0.0) || !(self.strip_anisotropy >= 1.0) {
            return Err(Error::invalid("noise_scale must be >= 0 and strip_anisotropy >= 1"));
        }
        if self.min_points == 0 || self.max_attempts == 0 {
            return Err(Error::invalid("min_points and max_attempts must be at least 1"));
        }
        Ok(())
    }

    /// Class table matching this generator's ids.
    pub fn scheme(&self) -> Result<SemanticScheme> {
        let mut b = SemanticScheme::builder();
        for c in &self.things {
            b = b.thing(c.id, &c.name)?;
        }
        b.stuff(ROAD, "road")?
            .stuff(BUILDING, "building")?
            .ignore(UNLABELED, "unlabeled")?
            .finish()
    }
}

/// Oriented box standing on the ground.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlacedBox {
    pub class: u16,
    pub center: Point3,
    pub yaw: f64,
    pub length: f64,
    pub width: f64,
    pub height: f64,
}

impl PlacedBox {
    fn axes(&self) -> ([f64; 2], [f64; 2]) {
        let (s, c) = self.yaw.sin_cos();
        ([c, s], [-s, c])
    }

    fn corners(&self) -> [[f64; 2]; 4] {
        let (u, v) = self.axes();
        let (hl, hw) = (self.length / 2.0, self.width / 2.0);
        let mut out = [[0.0; 2]; 4];
        for (k, (a, b)) in [(hl, hw), (hl, -hw), (-hl, -hw), (-hl, hw)].into_iter().enumerate() {
            out[k] = [
                self.center[0] + a * u[0] + b * v[0],
                self.center[1] + a * u[1] + b * v[1],
            ];
        }
        out
    }

    /// Footprint overlap test by separating axes, with both boxes grown by `margin`.
    fn overlaps(&self, other: &PlacedBox, margin: f64) -> bool {
        let grow = |b: &PlacedBox| PlacedBox {
            length: b.length + margin,
            width: b.width + margin,
            ..*b
        };
        let (a, b) = (grow(self), grow(other));
        let (ca, cb) = (a.corners(), b.corners());
        let (au, av) = a.axes();
        let (bu, bv) = b.axes();
        for axis in [au, av, bu, bv] {
            let proj = |c: &[[f64; 2]; 4]| {
                c.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                    let d = p[0] * axis[0] + p[1] * axis[1];
                    (lo.min(d), hi.max(d))
                })
            };
            let (a0, a1) = proj(&ca);
            let (b0, b1) = proj(&cb);
            if a1 < b0 || b1 < a0 {
                return false;
            }
        }
        true
    }

    pub fn diagonal(&self) -> f64 {
        (self.length * self.length + self.width * self.width + self.height * self.height).sqrt()
    }
}

/// A generated frame. `things`, `offsets` and `features` are row-aligned and
/// cover the things points in ascending point order.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthScene {
    pub cloud: PointCloud,
    pub labels: SceneLabels,
    pub things: Vec<usize>,
    pub offsets: Offsets,
    pub features: FeatureMatrix,
    pub instances: Vec<InstanceSummary>,
    /// `boxes[k]` belongs to instance id `k + 1`.
    pub boxes: Vec<PlacedBox>,
}

impl SynthScene {
    pub fn things_points(&self) -> Vec<Point3> {
        self.things.iter().map(|&i| self.cloud.points()[i]).collect()
    }

    /// Simulated regressed centers `P + O` of the things points.
    pub fn regressed_centers(&self) -> Vec<Point3> {
        self.things
            .iter()
            .zip(&self.offsets.0)
            .map(|(&i, o)| add(&self.cloud.points()[i], o))
            .collect()
    }

    /// Tight-box center of each things point's instance.
    pub fn gt_centers(&self) -> Vec<Point3> {
        gt_centers_for(&self.labels, &self.things, &self.instances)
    }

    /// Semantic class of every instance id.
    pub fn instance_class(&self, id: u16) -> Option<u16> {
        self.boxes.get(id as usize - 1).map(|b| b.class)
    }
}

pub(crate) fn gt_centers_for(labels: &SceneLabels, things: &[usize], instances: &[InstanceSummary]) -> Vec<Point3> {
    things
        .iter()
        .map(|&i| {
            let id = labels.instance[i];
            instances
                .iter()
                .find(|s| s.id == id)
                .map(|s| s.center)
                .unwrap_or([0.0; 3])
        })
        .collect()
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.random_range(r[0]..r[1])
    } else {
        r[0]
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Rounds `x` up or down at random so the expectation is `x`.
fn stochastic_round(rng: &mut ChaCha8Rng, x: f64) -> usize {
    let f = x.floor();
    f as usize + usize::from(rng.random::<f64>() < x - f)
}

fn place(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Vec<PlacedBox>> {
    let mut boxes: Vec<PlacedBox> = Vec::new();
    for class in &cfg.things {
        let mut previous: Option<PlacedBox> = None;
        for _ in 0..class.count {
            let length = uniform(rng, class.length);
            let width = uniform(rng, class.width).min(length);
            let height = uniform(rng, class.height);
            let grouped = previous.is_some() && rng.random::<f64>() < class.group_prob;
            let mut placed = None;
            for _ in 0..cfg.max_attempts {
                let (x, y, yaw) = match previous {
                    Some(p) if grouped => {
                        let gap = uniform(rng, cfg.group_gap);
                        let a = rng.random_range(0.0..TAU);
                        (
                            p.center[0] + gap * a.cos(),
                            p.center[1] + gap * a.sin(),
                            p.yaw + rng.random_range(-0.5..0.5),
                        )
                    }
                    _ => {
                        let d = uniform(rng, cfg.distance);
                        let a = rng.random_range(0.0..TAU);
                        (d * a.cos(), d * a.sin(), rng.random_range(0.0..TAU))
                    }
                };
                let d = x.hypot(y);
                if d < cfg.distance[0] || d > cfg.distance[1] {
                    continue;
                }
                let b = PlacedBox {
                    class: class.id,
                    center: [x, y, GROUND_Z + height / 2.0],
                    yaw,
                    length,
                    width,
                    height,
                };
                if boxes.iter().all(|o| !o.overlaps(&b, 0.1)) {
                    placed = Some(b);
                    break;
                }
            }
            let b = placed.ok_or(Error::Placement {
                attempts: cfg.max_attempts,
            })?;
            boxes.push(b);
            previous = Some(b);
        }
    }
    Ok(boxes)
}

/// Points on the sensor-facing faces of `b`.
fn sample_box(cfg: &SynthConfig, b: &PlacedBox, rng: &mut ChaCha8Rng) -> Vec<Point3> {
    let (u, v) = b.axes();
    let (hl, hw, hh) = (b.length / 2.0, b.width / 2.0, b.height / 2.0);
    let c = b.center;
    // (face center, normal, in-face axis 1 with half extent, in-face axis 2 with half extent)
    let faces: [(Point3, Point3, Point3, f64, Point3, f64); 5] = [
        (
            [c[0] + hl * u[0], c[1] + hl * u[1], c[2]],
            [u[0], u[1], 0.0],
            [v[0], v[1], 0.0],
            hw,
            [0.0, 0.0, 1.0],
            hh,
        ),
        (
            [c[0] - hl * u[0], c[1] - hl * u[1], c[2]],
            [-u[0], -u[1], 0.0],
            [v[0], v[1], 0.0],
            hw,
            [0.0, 0.0, 1.0],
            hh,
        ),
        (
            [c[0] + hw * v[0], c[1] + hw * v[1], c[2]],
            [v[0], v[1], 0.0],
            [u[0], u[1], 0.0],
            hl,
            [0.0, 0.0, 1.0],
            hh,
        ),
        (
            [c[0] - hw * v[0], c[1] - hw * v[1], c[2]],
            [-v[0], -v[1], 0.0],
            [u[0], u[1], 0.0],
            hl,
            [0.0, 0.0, 1.0],
            hh,
        ),
        (
            [c[0], c[1], c[2] + hh],
            [0.0, 0.0, 1.0],
            [u[0], u[1], 0.0],
            hl,
            [v[0], v[1], 0.0],
            hw,
        ),
    ];
    let falloff = (REFERENCE_DISTANCE / norm(&c).max(1e-6)).powf(cfg.density_decay);
    let mut counts = [0usize; 5];
    let mut best = (0usize, 0.0f64);
    for (k, (fc, n, _, e1, _, e2)) in faces.iter().enumerate() {
        let dist = norm(fc).max(1e-6);
        let cos = -(n[0] * fc[0] + n[1] * fc[1] + n[2] * fc[2]) / dist;
        if cos <= 0.0 {
            continue;
        }
        let area = 4.0 * e1 * e2;
        let expected = cfg.reference_density * area * cos * falloff;
        counts[k] = stochastic_round(rng, expected);
        if expected > best.1 {
            best = (k, expected);
        }
    }
    let total: usize = counts.iter().sum();
    if total < cfg.min_points {
        counts[best.0] += cfg.min_points - total;
    }
    let mut pts = Vec::new();
    for (k, (fc, _, a1, e1, a2, e2)) in faces.iter().enumerate() {
        for _ in 0..counts[k] {
            let s = rng.random_range(-1.0..=1.0) * e1;
            let t = rng.random_range(-1.0..=1.0) * e2;
            pts.push([
                fc[0] + s * a1[0] + t * a2[0],
                fc[1] + s * a1[1] + t * a2[1],
                fc[2] + s * a1[2] + t * a2[2],
            ]);
        }
    }
    pts
}

/// Noise for one regressed center: `σ` along the ray from the sensor to
/// `center`, `σ / anisotropy` across it, truncated to `limit`.
fn strip_noise(rng: &mut ChaCha8Rng, center: &Point3, sigma: f64, anisotropy: f64, limit: f64) -> Point3 {
    if sigma == 0.0 {
        return [0.0; 3];
    }
    let d = norm(center).max(1e-9);
    let ray = [center[0] / d, center[1] / d, center[2] / d];
    // Horizontal and remaining directions orthogonal to the ray.
    let h = {
        let (x, y) = (-ray[1], ray[0]);
        let n = x.hypot(y);
        if n > 1e-9 {
            [x / n, y / n, 0.0]
        } else {
            [1.0, 0.0, 0.0]
        }
    };
    let w = [
        ray[1] * h[2] - ray[2] * h[1],
        ray[2] * h[0] - ray[0] * h[2],
        ray[0] * h[1] - ray[1] * h[0],
    ];
    let (a, b, c) = (
        sigma * normal(rng),
        sigma / anisotropy * normal(rng),
        sigma / anisotropy * normal(rng),
    );
    let mut n = [
        a * ray[0] + b * h[0] + c * w[0],
        a * ray[1] + b * h[1] + c * w[1],
        a * ray[2] + b * h[2] + c * w[2],
    ];
    let len = norm(&n);
    if len > limit {
        let s = limit / len;
        n = [n[0] * s, n[1] * s, n[2] * s];
    }
    n
}

/// Scene `index` of the stream defined by `cfg.seed`.
pub fn gen_scene(cfg: &SynthConfig, index: u64) -> Result<SynthScene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);

    let boxes = place(cfg, &mut rng)?;
    let mut points = Vec::new();
    let mut semantic = Vec::new();
    let mut instance = Vec::new();
    for (k, b) in boxes.iter().enumerate() {
        for p in sample_box(cfg, b, &mut rng) {
            points.push(p);
            semantic.push(b.class);
            instance.push(k as u16 + 1);
        }
    }
    let far = cfg.distance[1] + 10.0;
    for _ in 0..cfg.road_points {
        let d = rng.random_range(2.0..far);
        let a = rng.random_range(0.0..TAU);
        points.push([d * a.cos(), d * a.sin(), GROUND_Z + 0.02 * normal(&mut rng)]);
        semantic.push(ROAD);
        instance.push(0);
    }
    let walls = 3;
    for w in 0..walls {
        let n = cfg.building_points / walls + usize::from(w < cfg.building_points % walls);
        let a0 = rng.random_range(0.0..TAU);
        let d = rng.random_range(far..far + 8.0);
        let (u, v) = ([a0.cos(), a0.sin()], [-a0.sin(), a0.cos()]);
        for _ in 0..n {
            let s = rng.random_range(-10.0..10.0);
            let z = rng.random_range(GROUND_Z..GROUND_Z + 6.0);
            points.push([d * u[0] + s * v[0], d * u[1] + s * v[1], z]);
            semantic.push(BUILDING);
            instance.push(0);
        }
    }
    for _ in 0..cfg.unlabeled_points {
        let d = rng.random_range(2.0..far);
        let a = rng.random_range(0.0..TAU);
        points.push([d * a.cos(), d * a.sin(), rng.random_range(GROUND_Z..GROUND_Z + 3.0)]);
        semantic.push(UNLABELED);
        instance.push(0);
    }

    let intensity = vec![0.0; points.len()];
    let cloud = PointCloud::new(points, intensity)?;
    let labels = SceneLabels::new(semantic, instance)?;
    let instances = compute_instance_centers(&cloud, &labels);
    let things: Vec<usize> = (0..labels.len()).filter(|&i| labels.instance[i] != 0).collect();
    let offsets = Offsets(
        things
            .iter()
            .map(|&i| {
                let id = labels.instance[i];
                let b = &boxes[id as usize - 1];
                let s = instances.iter().find(|s| s.id == id).expect("instance has points");
                let sigma = cfg.noise_scale * b.length;
                let noise = strip_noise(&mut rng, &s.center, sigma, cfg.strip_anisotropy, 3.0 * b.diagonal());
                sub(&add(&s.center, &noise), &cloud.points()[i])
            })
            .collect(),
    );
    let things_points: Vec<Point3> = things.iter().map(|&i| cloud.points()[i]).collect();
    let features = compute_features(&things_points, &offsets)?;
    Ok(SynthScene {
        cloud,
        labels,
        things,
        offsets,
        features,
        instances,
        boxes,
    })
}

/// The per-point features of a generated scene's things points.
pub fn gen_features(scene: &SynthScene) -> Result<FeatureMatrix> {
    compute_features(&scene.things_points(), &scene.offsets)
}

/// Per-point features, in [`FEATURE_NAMES`] order, for things points and
/// their regressed offsets. Neighborhoods are taken over `points` only.
pub fn compute_features(points: &[Point3], offsets: &Offsets) -> Result<FeatureMatrix> {
    if offsets.len() != points.len() {
        return Err(Error::shape(format!(
            "{} points but {} offsets",
            points.len(),
            offsets.len()
        )));
    }
    let mut f = Array2::<f64>::zeros((points.len(), FEATURE_WIDTH));
    if points.is_empty() {
        return FeatureMatrix::new(f);
    }
    let index = GridIndex::build(points, 2.0)?;
    for (i, p) in points.iter().enumerate() {
        let mut near = 0usize;
        let mut far = 0usize;
        let mut mean = [0.0; 3];
        index.for_each_within(p, 2.0, |j, d2| {
            far += 1;
            if d2 <= 0.25 {
                near += 1;
            }
            let q = &points[j];
            for k in 0..3 {
                mean[k] += q[k] - p[k];
            }
        });
        for m in &mut mean {
            *m /= far as f64;
        }
        let mut cov = Matrix3::<f64>::zeros();
        index.for_each_within(p, 2.0, |j, _| {
            let q = &points[j];
            let d = [q[0] - p[0] - mean[0], q[1] - p[1] - mean[1], q[2] - p[2] - mean[2]];
            for a in 0..3 {
                for b in 0..3 {
                    cov[(a, b)] += d[a] * d[b];
                }
            }
        });
        let mut ev: Vec<f64> = SymmetricEigen::new(cov / far as f64)
            .eigenvalues
            .iter()
            .map(|v| v.max(0.0))
            .collect();
        ev.sort_by(|a, b| b.total_cmp(a));
        let (r21, r31) = if ev[0] > 1e-12 {
            (ev[1] / ev[0], ev[2] / ev[0])
        } else {
            (0.0, 0.0)
        };
        let row = [
            norm(p),
            near as f64,
            far as f64,
            r21,
            r31,
            p[2] - GROUND_Z,
            norm(&offsets.0[i]),
        ];
        for (k, v) in row.into_iter().enumerate() {
            f[[i, k]] = v;
        }
    }
    FeatureMatrix::new(f)
}

/// One distance bin of a density profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityBin {
    pub lo: f64,
    pub hi: f64,
    pub instances: usize,
    pub voxels: usize,
    /// Mean number of regressed centers per occupied voxel.
    pub mean_count: f64,
}

pub const DENSITY_VOXEL: f64 = 0.2;

/// Regressed centers per occupied 0.2 m voxel, grouped by the sensor
/// distance of each instance's true center. Empty bins are omitted.
pub fn density_profile(scenes: &[Frame], bin_width: f64) -> Result<Vec<DensityBin>> {
    if scenes.is_empty() {
        return Err(Error::Empty("density profile needs at least one scene"));
    }
    if !(bin_width > 0.0) {
        return Err(Error::invalid("bin width must be positive"));
    }
    let mut bins: std::collections::BTreeMap<i64, (usize, usize, usize)> = Default::default();
    for scene in scenes {
        let centers = scene.regressed_centers();
        for summary in &scene.instances {
            let mut voxels: std::collections::HashMap<[i64; 3], usize> = Default::default();
            for (row, &i) in scene.things.iter().enumerate() {
                if scene.labels.instance[i] == summary.id {
                    let c = centers[row];
                    let key = [0, 1, 2].map(|k| (c[k] / DENSITY_VOXEL).floor() as i64);
                    *voxels.entry(key).or_default() += 1;
                }
            }
            let d = norm(&[summary.center[0], summary.center[1], 0.0]);
            let e = bins.entry((d / bin_width).floor() as i64).or_default();
            e.0 += 1;
            e.1 += voxels.len();
            e.2 += voxels.values().sum::<usize>();
        }
    }
    Ok(bins
        .into_iter()
        .map(|(b, (instances, voxels, points))| DensityBin {
            lo: b as f64 * bin_width,
            hi: (b + 1) as f64 * bin_width,
            instances,
            voxels,
            mean_count: points as f64 / voxels.max(1) as f64,
        })
        .collect())
}

const AUX_MAGIC: &[u8; 8] = b"DSHFTAUX";
const AUX_VERSION: u32 = 1;

/// Per-point regressed offsets and features for a whole frame (rows of
/// points without an instance are zero).
#[derive(Debug, Clone, PartialEq)]
pub struct Sidecar {
    pub offsets: Vec<Point3>,
    pub features: Array2<f64>,
}

/// Layout: magic `DSHFTAUX`, `u32` version, `u32` point count `n`, `u32`
/// feature width `d`, then `n x 3` offsets and `n x d` features, all `f32`
/// little-endian.
pub fn sidecar_to_bytes(s: &Sidecar) -> Vec<u8> {
    let n = s.offsets.len();
    let d = s.features.ncols();
    let mut out = Vec::with_capacity(20 + 4 * n * (3 + d));
    out.extend_from_slice(AUX_MAGIC);
    out.extend_from_slice(&AUX_VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for o in &s.offsets {
        for v in o {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    for v in s.features.iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn sidecar_from_bytes(bytes: &[u8], path: &Path) -> Result<Sidecar> {
    let fail = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    };
    if bytes.len() < 20 || &bytes[..8] != AUX_MAGIC {
        return Err(fail("not a sidecar file"));
    }
    let word = |k: usize| u32::from_le_bytes(bytes[k..k + 4].try_into().unwrap()) as usize;
    if word(8) != AUX_VERSION as usize {
        return Err(fail("unsupported sidecar version"));
    }
    let (n, d) = (word(12), word(16));
    let expected = n
        .checked_mul(3 + d)
        .and_then(|v| v.checked_mul(4))
        .and_then(|v| v.checked_add(20));
    if expected != Some(bytes.len()) {
        return Err(fail("sidecar size does not match its header"));
    }
    let vals: Vec<f64> = bytes[20..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let offsets = vals[..3 * n].chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    let features = Array2::from_shape_vec((n, d), vals[3 * n..].to_vec()).expect("sized above");
    Ok(Sidecar { offsets, features })
}

impl SynthScene {
    pub fn sidecar(&self) -> Sidecar {
        let n = self.cloud.len();
        let mut offsets = vec![[0.0; 3]; n];
        let mut features = Array2::zeros((n, FEATURE_WIDTH));
        for (row, &i) in self.things.iter().enumerate() {
            offsets[i] = self.offsets.0[row];
            features.row_mut(i).assign(&self.features.values().row(row));
        }
        Sidecar { offsets, features }
    }
}

/// Writes `bytes` to a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

/// Paths of one frame under a dataset root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FramePaths {
    pub points: PathBuf,
    pub labels: PathBuf,
    pub aux: PathBuf,
}

impl FramePaths {
    pub fn new(root: &Path, stem: &str) -> Self {
        Self {
            points: root.join("velodyne").join(format!("{stem}.bin")),
            labels: root.join("labels").join(format!("{stem}.label")),
            aux: root.join("aux").join(format!("{stem}.aux")),
        }
    }
}

/// Writes a frame as points, labels and sidecar; each file appears atomically.
pub fn export_scene(root: &Path, stem: &str, scene: &SynthScene) -> Result<FramePaths> {
    let paths = FramePaths::new(root, stem);
    for p in [&paths.points, &paths.labels, &paths.aux] {
        let dir = p.parent().expect("frame paths have a parent");
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_atomic(&paths.points, &points_to_bytes(&scene.cloud))?;
    write_atomic(&paths.labels, &labels_to_bytes(&scene.labels))?;
    write_atomic(&paths.aux, &sidecar_to_bytes(&scene.sidecar()))?;
    Ok(paths)
}

/// A frame loaded from disk, reduced to what clustering and evaluation need.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub cloud: PointCloud,
    pub labels: SceneLabels,
    /// Points clustered: ground-truth things points.
    pub things: Vec<usize>,
    pub offsets: Offsets,
    pub features: FeatureMatrix,
    pub instances: Vec<InstanceSummary>,
}

impl Frame {
    pub fn things_points(&self) -> Vec<Point3> {
        self.things.iter().map(|&i| self.cloud.points()[i]).collect()
    }

    pub fn regressed_centers(&self) -> Vec<Point3> {
        self.things
            .iter()
            .zip(&self.offsets.0)
            .map(|(&i, o)| add(&self.cloud.points()[i], o))
            .collect()
    }

    pub fn gt_centers(&self) -> Vec<Point3> {
        gt_centers_for(&self.labels, &self.things, &self.instances)
    }
}

impl From<SynthScene> for Frame {
    fn from(s: SynthScene) -> Self {
        Self {
            cloud: s.cloud,
            labels: s.labels,
            things: s.things,
            offsets: s.offsets,
            features: s.features,
            instances: s.instances,
        }
    }
}

/// Loads a frame. Without a sidecar, offsets are zero and features are
/// computed from the points.
pub fn load_frame(root: &Path, stem: &str, scheme: &SemanticScheme) -> Result<Frame> {
    let paths = FramePaths::new(root, stem);
    let (cloud, labels) = read_scene(&paths.points, &paths.labels, scheme)?;
    let things = labels.things_indices(scheme);
    let instances = compute_instance_centers(&cloud, &labels);
    let things_points: Vec<Point3> = things.iter().map(|&i| cloud.points()[i]).collect();
    let (offsets, features) = if paths.aux.exists() {
        let bytes = fs::read(&paths.aux).map_err(|e| Error::io(&paths.aux, e))?;
        let aux = sidecar_from_bytes(&bytes, &paths.aux)?;
        if aux.offsets.len() != cloud.len() {
            return Err(Error::Format {
                path: paths.aux.clone(),
                reason: format!("sidecar has {} rows for {} points", aux.offsets.len(), cloud.len()),
            });
        }
        let offsets = Offsets(things.iter().map(|&i| aux.offsets[i]).collect());
        let features = FeatureMatrix::new(aux.features.select(ndarray::Axis(0), &things))?;
        (offsets, features)
    } else {
        let offsets = Offsets(vec![[0.0; 3]; things.len()]);
        let features = compute_features(&things_points, &offsets)?;
        (offsets, features)
    };
    Ok(Frame {
        cloud,
        labels,
        things,
        offsets,
        features,
        instances,
    })
}
