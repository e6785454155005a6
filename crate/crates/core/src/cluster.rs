//! Heuristic clustering baselines: BFS connected components, DBSCAN and
//! flat-kernel mean shift. All three produce a [`ClusterAssignment`] whose ids
//! are numbered by first appearance in point order.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{dist2, Point3};
use crate::spatial::{fps, GridIndex};

/// Per-point cluster ids; 0 marks noise, other ids span `1..=num_clusters`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ClusterAssignment {
    ids: Vec<u32>,
    num_clusters: usize,
}

impl ClusterAssignment {
    /// Renumbers arbitrary labels to `1..=K` in first-touch order. Zero stays noise.
    pub fn from_raw(raw: &[u32]) -> Self {
        let mut map = std::collections::HashMap::new();
        let ids: Vec<u32> = raw
            .iter()
            .map(|&r| {
                if r == 0 {
                    0
                } else {
                    let next = map.len() as u32 + 1;
                    *map.entry(r).or_insert(next)
                }
            })
            .collect();
        Self {
            ids,
            num_clusters: map.len(),
        }
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn num_clusters(&self) -> usize {
        self.num_clusters
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of points in each cluster, indexed by `id - 1`.
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.num_clusters];
        for &id in &self.ids {
            if id > 0 {
                sizes[id as usize - 1] += 1;
            }
        }
        sizes
    }

    /// Sends clusters smaller than `min_points` to noise and renumbers the rest.
    pub fn filter_small(&self, min_points: usize) -> Self {
        let sizes = self.sizes();
        let raw: Vec<u32> = self
            .ids
            .iter()
            .map(|&id| {
                if id > 0 && sizes[id as usize - 1] < min_points {
                    0
                } else {
                    id
                }
            })
            .collect();
        Self::from_raw(&raw)
    }
}

/// Converged mean-shift modes, ordered to match cluster ids (mode `k` is id `k + 1`).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModeSet {
    pub modes: Vec<Point3>,
    pub counts: Vec<usize>,
}

/// Connected components of the graph linking points at distance `<= radius`.
pub fn bfs_cluster(points: &[Point3], radius: f64) -> Result<ClusterAssignment> {
    if !(radius > 0.0) {
        return Err(Error::invalid(format!("BFS radius must be positive, got {radius}")));
    }
    let index = GridIndex::build(points, radius)?;
    let mut ids = vec![0u32; points.len()];
    let mut next = 0u32;
    let mut queue = Vec::new();
    for seed in 0..points.len() {
        if ids[seed] != 0 {
            continue;
        }
        next += 1;
        ids[seed] = next;
        queue.push(seed);
        while let Some(p) = queue.pop() {
            index.for_each_within(&points[p], radius, |q, _| {
                if ids[q] == 0 {
                    ids[q] = next;
                    queue.push(q);
                }
            });
        }
    }
    Ok(ClusterAssignment::from_raw(&ids))
}

/// Density-based clustering. A point is core when at least `min_pts` points
/// (itself included) lie within `eps`; border points join the first cluster
/// that reaches them, unreachable points are noise.
pub fn dbscan(points: &[Point3], eps: f64, min_pts: usize) -> Result<ClusterAssignment> {
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("DBSCAN eps must be positive, got {eps}")));
    }
    if min_pts == 0 {
        return Err(Error::invalid("DBSCAN min_pts must be at least 1"));
    }
    let index = GridIndex::build(points, eps)?;
    let core: Vec<bool> = points
        .par_iter()
        .map(|p| index.count_within(p, eps) >= min_pts)
        .collect();
    let mut ids = vec![0u32; points.len()];
    let mut next = 0u32;
    let mut queue = Vec::new();
    for seed in 0..points.len() {
        if ids[seed] != 0 || !core[seed] {
            continue;
        }
        next += 1;
        ids[seed] = next;
        queue.push(seed);
        while let Some(p) = queue.pop() {
            index.for_each_within(&points[p], eps, |q, _| {
                if ids[q] == 0 {
                    ids[q] = next;
                    if core[q] {
                        queue.push(q);
                    }
                }
            });
        }
    }
    Ok(ClusterAssignment::from_raw(&ids))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeanShiftParams {
    pub bandwidth: f64,
    pub max_iters: usize,
    pub convergence_tol: f64,
    pub merge_radius: f64,
    pub seed_count: usize,
    pub seed: u64,
}

impl MeanShiftParams {
    /// Defaults: 30 iterations, 1e-4 m tolerance, merge radius of half a bandwidth,
    /// up to 10000 seeds.
    pub fn with_bandwidth(bandwidth: f64) -> Self {
        Self {
            bandwidth,
            max_iters: 30,
            convergence_tol: 1e-4,
            merge_radius: bandwidth / 2.0,
            seed_count: 10_000,
            seed: 0,
        }
    }
}

/// Mean of the points of `index` within `bandwidth` of `q`, or `None` when the
/// ball is empty.
pub(crate) fn flat_kernel_mean(index: &GridIndex<'_>, q: &Point3, bandwidth: f64) -> Option<(Point3, usize)> {
    let pts = index.points();
    // Accumulated relative to `q`, so a ball of copies of `q` returns `q` exactly.
    let mut acc = [0.0; 3];
    let mut n = 0usize;
    index.for_each_within(q, bandwidth, |j, _| {
        let p = &pts[j];
        acc[0] += p[0] - q[0];
        acc[1] += p[1] - q[1];
        acc[2] += p[2] - q[2];
        n += 1;
    });
    if n == 0 {
        return None;
    }
    let inv = 1.0 / n as f64;
    Some(([q[0] + acc[0] * inv, q[1] + acc[1] * inv, q[2] + acc[2] * inv], n))
}

/// Flat-kernel mean shift. Seeds are farthest-point samples of `points` (all
/// points when `seed_count >= len`) shifted over the fixed data until they move
/// less than the tolerance; converged seeds closer than `merge_radius` collapse
/// into one mode, and each point joins its nearest mode.
pub fn mean_shift(points: &[Point3], params: &MeanShiftParams) -> Result<(ClusterAssignment, ModeSet)> {
    let MeanShiftParams {
        bandwidth,
        max_iters,
        convergence_tol,
        merge_radius,
        seed_count,
        seed,
    } = *params;
    if !(bandwidth > 0.0) {
        return Err(Error::invalid(format!(
            "mean-shift bandwidth must be positive, got {bandwidth}"
        )));
    }
    if max_iters == 0 {
        return Err(Error::invalid("mean-shift max_iters must be at least 1"));
    }
    if !(merge_radius >= 0.0) {
        return Err(Error::invalid("mean-shift merge radius must be nonnegative"));
    }
    if points.is_empty() {
        return Ok((ClusterAssignment::default(), ModeSet::default()));
    }
    let index = GridIndex::build(points, bandwidth)?;
    let mask = fps(points, seed_count.max(1), seed);

    let converged: Vec<(Point3, usize)> = mask
        .indices()
        .par_iter()
        .map(|&s| {
            let mut x = points[s];
            for _ in 0..max_iters {
                let Some((next, _)) = flat_kernel_mean(&index, &x, bandwidth) else {
                    break;
                };
                let moved = dist2(&next, &x).sqrt();
                x = next;
                if moved < convergence_tol {
                    break;
                }
            }
            (x, index.count_within(&x, bandwidth))
        })
        .collect();

    let mut order: Vec<usize> = (0..converged.len()).collect();
    order.sort_by(|&a, &b| converged[b].1.cmp(&converged[a].1).then(a.cmp(&b)));
    let merge2 = merge_radius * merge_radius;
    let mut kept: Vec<Point3> = Vec::new();
    for &s in &order {
        let x = converged[s].0;
        if kept.iter().all(|m| dist2(m, &x) > merge2) {
            kept.push(x);
        }
    }

    let mode_index = GridIndex::build(&kept, bandwidth)?;
    let raw: Vec<u32> = points
        .par_iter()
        .map(|p| mode_index.nearest(p).map(|m| m as u32 + 1))
        .collect::<Result<_>>()?;
    let assignment = ClusterAssignment::from_raw(&raw);

    // Reorder modes to follow the compacted ids; modes owning no points drop out.
    let mut modes = vec![[0.0; 3]; assignment.num_clusters()];
    for (r, &id) in raw.iter().zip(assignment.ids()) {
        modes[id as usize - 1] = kept[*r as usize - 1];
    }
    let counts = assignment.sizes();
    Ok((assignment, ModeSet { modes, counts }))
}
