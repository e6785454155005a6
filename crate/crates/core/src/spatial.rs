//! Uniform-grid spatial index and farthest point sampling.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geom::{dist2, Point3};

type CellKey = [i64; 3];

/// Hash grid over a borrowed point set. Every point lives in exactly one cell.
#[derive(Debug, Clone)]
pub struct GridIndex<'a> {
    points: &'a [Point3],
    cell: f64,
    inv: f64,
    cells: HashMap<CellKey, Vec<u32>>,
    /// Occupied cells in sorted order, for full scans with a fixed visit order.
    keys: Vec<CellKey>,
    lo: CellKey,
    hi: CellKey,
}

impl<'a> GridIndex<'a> {
    pub fn build(points: &'a [Point3], cell_size: f64) -> Result<Self> {
        if !(cell_size > 0.0) || !cell_size.is_finite() {
            return Err(Error::invalid(format!("cell size must be positive, got {cell_size}")));
        }
        if points.len() > u32::MAX as usize {
            return Err(Error::invalid("too many points for a grid index"));
        }
        let inv = 1.0 / cell_size;
        let mut cells: HashMap<CellKey, Vec<u32>> = HashMap::new();
        let mut lo = [i64::MAX; 3];
        let mut hi = [i64::MIN; 3];
        for (i, p) in points.iter().enumerate() {
            if !p.iter().all(|c| c.is_finite()) {
                return Err(Error::invalid(format!("point {i} has a non-finite coordinate")));
            }
            let key = key_of(p, inv);
            for k in 0..3 {
                lo[k] = lo[k].min(key[k]);
                hi[k] = hi[k].max(key[k]);
            }
            cells.entry(key).or_default().push(i as u32);
        }
        let mut keys: Vec<CellKey> = cells.keys().copied().collect();
        keys.sort_unstable();
        Ok(Self {
            points,
            cell: cell_size,
            inv,
            cells,
            keys,
            lo,
            hi,
        })
    }

    pub fn points(&self) -> &'a [Point3] {
        self.points
    }

    pub fn cell_size(&self) -> f64 {
        self.cell
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn occupied_cells(&self) -> usize {
        self.cells.len()
    }

    /// Calls `f(index, squared_distance)` for every point within `r` of `q`
    /// (closed ball). Visit order is deterministic but not sorted.
    pub fn for_each_within(&self, q: &Point3, r: f64, mut f: impl FnMut(usize, f64)) {
        if self.points.is_empty() || r < 0.0 {
            return;
        }
        let r2 = r * r;
        let slack = 1e-9 * (1.0 + r + q.iter().fold(0.0f64, |m, c| m.max(c.abs())));
        let mut lo = [0i64; 3];
        let mut hi = [0i64; 3];
        let mut span: u128 = 1;
        for k in 0..3 {
            lo[k] = (((q[k] - r - slack) * self.inv).floor() as i64).max(self.lo[k]);
            hi[k] = (((q[k] + r + slack) * self.inv).floor() as i64).min(self.hi[k]);
            if lo[k] > hi[k] {
                return;
            }
            span *= (hi[k] - lo[k] + 1) as u128;
        }
        let mut visit = |bucket: &Vec<u32>| {
            for &j in bucket {
                let j = j as usize;
                let d2 = dist2(&self.points[j], q);
                if d2 <= r2 {
                    f(j, d2);
                }
            }
        };
        if span > self.cells.len() as u128 {
            for key in &self.keys {
                if (0..3).all(|k| key[k] >= lo[k] && key[k] <= hi[k]) {
                    visit(&self.cells[key]);
                }
            }
        } else {
            for x in lo[0]..=hi[0] {
                for y in lo[1]..=hi[1] {
                    for z in lo[2]..=hi[2] {
                        if let Some(bucket) = self.cells.get(&[x, y, z]) {
                            visit(bucket);
                        }
                    }
                }
            }
        }
    }

    /// Indices within `r` of `q`, ascending.
    pub fn radius_query(&self, q: &Point3, r: f64) -> Vec<usize> {
        let mut out = Vec::new();
        self.for_each_within(q, r, |j, _| out.push(j));
        out.sort_unstable();
        out
    }

    /// Number of points within `r` of `q`.
    pub fn count_within(&self, q: &Point3, r: f64) -> usize {
        let mut n = 0;
        self.for_each_within(q, r, |_, _| n += 1);
        n
    }

    /// Index of the closest point; ties go to the smallest index.
    pub fn nearest(&self, q: &Point3) -> Result<usize> {
        if self.points.is_empty() {
            return Err(Error::Empty("nearest-neighbor query on an empty index"));
        }
        let c = key_of(q, self.inv);
        let mut best: Option<(f64, usize)> = None;
        let consider = |bucket: &Vec<u32>, best: &mut Option<(f64, usize)>| {
            for &j in bucket {
                let j = j as usize;
                let d2 = dist2(&self.points[j], q);
                match best {
                    Some((bd, bj)) if d2 > *bd || (d2 == *bd && j > *bj) => {}
                    _ => *best = Some((d2, j)),
                }
            }
        };

        // Chebyshev distance (in cells) from the query cell to the occupied box.
        let mut k0 = 0i64;
        let mut kmax = 0i64;
        for k in 0..3 {
            let below = self.lo[k] - c[k];
            let above = c[k] - self.hi[k];
            k0 = k0.max(below).max(above);
            kmax = kmax.max((c[k] - self.lo[k]).abs()).max((self.hi[k] - c[k]).abs());
        }
        let budget = 8 * self.cells.len() as i128 + 64;
        for ring in k0..=kmax {
            let side = (2 * ring + 1) as i128;
            if side * side * side > budget {
                // Rings this wide touch more cells than exist; finish with a scan.
                for bucket in self.keys.iter().map(|k| &self.cells[k]) {
                    consider(bucket, &mut best);
                }
                break;
            }
            for x in (c[0] - ring).max(self.lo[0])..=(c[0] + ring).min(self.hi[0]) {
                for y in (c[1] - ring).max(self.lo[1])..=(c[1] + ring).min(self.hi[1]) {
                    for z in (c[2] - ring).max(self.lo[2])..=(c[2] + ring).min(self.hi[2]) {
                        let cheb = (x - c[0]).abs().max((y - c[1]).abs()).max((z - c[2]).abs());
                        if cheb != ring {
                            continue;
                        }
                        if let Some(bucket) = self.cells.get(&[x, y, z]) {
                            consider(bucket, &mut best);
                        }
                    }
                }
            }
            if let Some((bd, _)) = best {
                // Anything outside this ring is strictly farther than (ring - 1) cells.
                let reach = (ring - 1).max(0) as f64 * self.cell;
                if bd <= reach * reach {
                    break;
                }
            }
        }
        Ok(best.expect("non-empty index yields a neighbor").1)
    }
}

#[inline]
fn key_of(p: &Point3, inv: f64) -> CellKey {
    [
        (p[0] * inv).floor() as i64,
        (p[1] * inv).floor() as i64,
        (p[2] * inv).floor() as i64,
    ]
}

/// Ordered, duplicate-free point indices chosen by farthest point sampling.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SampleMask(pub Vec<usize>);

impl SampleMask {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn gather<T: Clone>(&self, values: &[T]) -> Vec<T> {
        self.0.iter().map(|&i| values[i].clone()).collect()
    }
}

/// Greedy max-min sampling of `k` points. The first point is drawn from a
/// ChaCha8 stream seeded with `seed`; when `k >= len` all indices are returned
/// in ascending order.
pub fn fps(points: &[Point3], k: usize, seed: u64) -> SampleMask {
    let m = points.len();
    if k >= m {
        return SampleMask((0..m).collect());
    }
    if k == 0 {
        return SampleMask(Vec::new());
    }
    let start = ChaCha8Rng::seed_from_u64(seed).random_range(0..m);
    fps_from(points, k, start)
}

/// Farthest point sampling from a fixed start index. Ties go to the smallest index.
pub fn fps_from(points: &[Point3], k: usize, start: usize) -> SampleMask {
    let m = points.len();
    let k = k.min(m);
    if k == 0 {
        return SampleMask(Vec::new());
    }
    assert!(start < m, "start index {start} out of range for {m} points");
    let mut selected = Vec::with_capacity(k);
    let mut min_d2 = vec![f64::INFINITY; m];
    let mut taken = vec![false; m];
    let mut current = start;
    loop {
        selected.push(current);
        taken[current] = true;
        if selected.len() == k {
            break;
        }
        let anchor = points[current];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, p) in points.iter().enumerate() {
            if taken[i] {
                continue;
            }
            let d = dist2(p, &anchor);
            if d < min_d2[i] {
                min_d2[i] = d;
            }
            if min_d2[i] > best_d {
                best_d = min_d2[i];
                best = i;
            }
        }
        current = best;
    }
    SampleMask(selected)
}
