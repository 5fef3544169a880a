//! Point-set distances backed by a uniform grid, plus skeleton extraction.

mod skeleton;

pub use skeleton::{branch_points, skeletonize, thin, BranchPath, Skeleton, VoxelClass};

use crate::raster::{neighbor_offsets, Connectivity, Point};
use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GeometryError {
    #[error("point set is empty")]
    EmptyPointSet,
}

/// Default grid cell edge used when no pruning threshold is at hand.
pub const DEFAULT_CELL: i32 = 16;

#[inline]
pub fn dist_sq(a: Point, b: Point) -> i64 {
    (0..3)
        .map(|k| {
            let d = (a[k] - b[k]) as i64;
            d * d
        })
        .sum()
}

/// Uniform grid over a point set. A point `p` lives in cell `floor(p / cell)`.
#[derive(Debug, Clone)]
pub struct SpatialIndex {
    cell: i32,
    points: Vec<Point>,
    cells: HashMap<Point, Vec<u32>>,
    lo: Point,
    hi: Point,
}

impl SpatialIndex {
    pub fn new(points: &[Point], cell: i32) -> Self {
        assert!(cell > 0, "cell size must be positive");
        let mut cells: HashMap<Point, Vec<u32>> = HashMap::new();
        let mut lo = [i32::MAX; 3];
        let mut hi = [i32::MIN; 3];
        for (i, &p) in points.iter().enumerate() {
            let c = cell_of(p, cell);
            for k in 0..3 {
                lo[k] = lo[k].min(c[k]);
                hi[k] = hi[k].max(c[k]);
            }
            cells.entry(c).or_default().push(i as u32);
        }
        Self {
            cell,
            points: points.to_vec(),
            cells,
            lo,
            hi,
        }
    }

    pub fn cell_size(&self) -> i32 {
        self.cell
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn cell_of(&self, p: Point) -> Point {
        cell_of(p, self.cell)
    }

    /// Nearest indexed point to `q` as `(squared distance, index)`; ties go to the lower index.
    pub fn nearest(&self, q: Point) -> Option<(i64, usize)> {
        if self.points.is_empty() {
            return None;
        }
        let qc = self.cell_of(q);
        let max_ring = (0..3)
            .map(|k| (qc[k] - self.lo[k]).abs().max((self.hi[k] - qc[k]).abs()))
            .max()
            .unwrap_or(0);
        let mut best: Option<(i64, usize)> = None;
        for r in 0..=max_ring {
            self.visit_shell(qc, r, |idx| {
                let d = dist_sq(q, self.points[idx]);
                if best.is_none_or(|b| (d, idx) < b) {
                    best = Some((d, idx));
                }
            });
            // anything in shell r+1 or beyond is at least r * cell away
            let reach = r as i64 * self.cell as i64;
            if let Some((d, _)) = best {
                if d <= reach * reach {
                    break;
                }
            }
        }
        best
    }

    /// Indices of points within `radius` of `q` (inclusive), ascending.
    pub fn within(&self, q: Point, radius: f64) -> Vec<usize> {
        let r2 = radius * radius;
        let span = (radius / self.cell as f64).ceil() as i32 + 1;
        let qc = self.cell_of(q);
        let mut out = Vec::new();
        for r in 0..=span {
            self.visit_shell(qc, r, |idx| {
                if (dist_sq(q, self.points[idx]) as f64) <= r2 {
                    out.push(idx);
                }
            });
        }
        out.sort_unstable();
        out
    }

    /// Calls `f` for every point in cells at Chebyshev cell distance exactly `r` from `qc`.
    fn visit_shell(&self, qc: Point, r: i32, mut f: impl FnMut(usize)) {
        let lo: Vec<i32> = (0..3).map(|k| (qc[k] - r).max(self.lo[k])).collect();
        let hi: Vec<i32> = (0..3).map(|k| (qc[k] + r).min(self.hi[k])).collect();
        for z in lo[0]..=hi[0] {
            for y in lo[1]..=hi[1] {
                for x in lo[2]..=hi[2] {
                    let cheb = (z - qc[0]).abs().max((y - qc[1]).abs()).max((x - qc[2]).abs());
                    if cheb != r {
                        continue;
                    }
                    if let Some(list) = self.cells.get(&[z, y, x]) {
                        for &i in list {
                            f(i as usize);
                        }
                    }
                }
            }
        }
    }
}

fn cell_of(p: Point, cell: i32) -> Point {
    [p[0].div_euclid(cell), p[1].div_euclid(cell), p[2].div_euclid(cell)]
}

/// Realizing pair of a minimum point-set distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClosestPair {
    pub dist_sq: i64,
    /// Index into the first set.
    pub a: usize,
    /// Index into the second set.
    pub b: usize,
}

impl ClosestPair {
    pub fn distance(&self) -> f64 {
        (self.dist_sq as f64).sqrt()
    }
}

/// Minimum-distance pair between `a` and `b`, lexicographically smallest `(dist², a, b)`.
pub fn closest_pair_indexed(a: &[Point], index_b: &SpatialIndex) -> Result<ClosestPair, GeometryError> {
    if a.is_empty() || index_b.points().is_empty() {
        return Err(GeometryError::EmptyPointSet);
    }
    let mut best: Option<ClosestPair> = None;
    for (i, &p) in a.iter().enumerate() {
        let (d, j) = index_b.nearest(p).expect("non-empty index");
        let cand = ClosestPair { dist_sq: d, a: i, b: j };
        if best.is_none_or(|b| (d, i, j) < (b.dist_sq, b.a, b.b)) {
            best = Some(cand);
        }
        if d == 0 {
            break;
        }
    }
    Ok(best.expect("non-empty set"))
}

pub fn closest_pair(a: &[Point], b: &[Point], cell: i32) -> Result<ClosestPair, GeometryError> {
    if a.is_empty() || b.is_empty() {
        return Err(GeometryError::EmptyPointSet);
    }
    closest_pair_indexed(a, &SpatialIndex::new(b, cell))
}

/// Minimum Euclidean distance between two point sets.
pub fn min_component_distance(a: &[Point], b: &[Point]) -> Result<f64, GeometryError> {
    min_component_distance_with_cell(a, b, DEFAULT_CELL)
}

pub fn min_component_distance_with_cell(a: &[Point], b: &[Point], cell: i32) -> Result<f64, GeometryError> {
    // index the larger set; the result is exact either way
    let pair = if a.len() >= b.len() {
        closest_pair(b, a, cell)?
    } else {
        closest_pair(a, b, cell)?
    };
    Ok(pair.distance())
}

/// Integer Bresenham line from `a` to `b`, both endpoints included, 2D or 3D.
pub fn bresenham(a: Point, b: Point) -> Vec<Point> {
    let d: Vec<i32> = (0..3).map(|k| (b[k] - a[k]).abs()).collect();
    let s: Vec<i32> = (0..3).map(|k| (b[k] - a[k]).signum()).collect();
    let major = (0..3).max_by_key(|&k| (d[k], std::cmp::Reverse(k))).unwrap();
    let n = d[major];
    let mut p = a;
    let mut err = [0i32; 3];
    for k in 0..3 {
        err[k] = 2 * d[k] - n;
    }
    let mut out = Vec::with_capacity(n as usize + 1);
    out.push(p);
    for _ in 0..n {
        p[major] += s[major];
        for k in 0..3 {
            if k == major {
                continue;
            }
            if err[k] > 0 {
                p[k] += s[k];
                err[k] -= 2 * n;
            }
            err[k] += 2 * d[k];
        }
        out.push(p);
    }
    out
}

/// Squared distance from `p` to the infinite line through `a` and `b`.
fn line_offset_sq(p: Point, a: Point, b: Point) -> f64 {
    let d: Vec<f64> = (0..3).map(|k| (b[k] - a[k]) as f64).collect();
    let v: Vec<f64> = (0..3).map(|k| (p[k] - a[k]) as f64).collect();
    let dd: f64 = d.iter().map(|x| x * x).sum();
    let vv: f64 = v.iter().map(|x| x * x).sum();
    if dd == 0.0 {
        return vv;
    }
    let vd: f64 = v.iter().zip(&d).map(|(x, y)| x * y).sum();
    (vv - vd * vd / dd).max(0.0)
}

/// Weight of the squared offset from the reference line in [`minimal_path`].
pub const STRAIGHTNESS_WEIGHT: f64 = 1e-3;

/// Minimum-cost 8/26-connected path inside a box of `shape` from any of
/// `sources` to the nearest voxel accepted by `is_target`, both ends included.
///
/// A step into voxel `q` costs its Euclidean length times
/// `weight(q) + STRAIGHTNESS_WEIGHT * offset²`, where the offset is measured from
/// the line through `line.0` and `line.1`; with a constant weight this is the
/// straightest shortest path. Returns `None` when no target is reachable.
pub fn minimal_path(
    shape: [usize; 3],
    ndim: usize,
    sources: &[Point],
    is_target: impl Fn(Point) -> bool,
    weight: impl Fn(Point) -> f64,
    line: (Point, Point),
) -> Option<Vec<Point>> {
    let [d, h, w] = shape;
    let inside = |p: Point| {
        p[0] >= 0 && p[1] >= 0 && p[2] >= 0 && (p[0] as usize) < d && (p[1] as usize) < h && (p[2] as usize) < w
    };
    let index = |p: Point| (p[0] as usize * h + p[1] as usize) * w + p[2] as usize;
    let point = |i: usize| [(i / (h * w)) as i32, ((i / w) % h) as i32, (i % w) as i32];
    let steps: Vec<(Point, f64)> = neighbor_offsets(Connectivity::Full, ndim)
        .into_iter()
        .map(|s| (s, ((s[0] * s[0] + s[1] * s[1] + s[2] * s[2]) as f64).sqrt()))
        .collect();
    let mut dist = vec![f64::INFINITY; d * h * w];
    let mut prev = vec![usize::MAX; d * h * w];
    // non-negative f64 bit patterns order like the values
    let mut heap = BinaryHeap::new();
    for &s in sources.iter().filter(|&&s| inside(s)) {
        let i = index(s);
        dist[i] = 0.0;
        heap.push(Reverse((0u64, i)));
    }
    while let Some(Reverse((bits, i))) = heap.pop() {
        let c = f64::from_bits(bits);
        if c > dist[i] {
            continue;
        }
        let p = point(i);
        if is_target(p) {
            let mut path = vec![p];
            let mut k = i;
            while prev[k] != usize::MAX {
                k = prev[k];
                path.push(point(k));
            }
            path.reverse();
            return Some(path);
        }
        for &(s, len) in &steps {
            let q = [p[0] + s[0], p[1] + s[1], p[2] + s[2]];
            if !inside(q) {
                continue;
            }
            let j = index(q);
            let nc = c + len * (weight(q) + STRAIGHTNESS_WEIGHT * line_offset_sq(q, line.0, line.1));
            if nc < dist[j] {
                dist[j] = nc;
                prev[j] = i;
                heap.push(Reverse((nc.to_bits(), j)));
            }
        }
    }
    None
}

/// Length of the polyline through every `stride`-th voxel of a chain (last voxel always kept).
///
/// Sampling the chain at a stride suppresses the staircase bias of summing raw
/// 8/26-neighbor steps, which overestimates the length of oblique curves.
pub fn polyline_length(chain: &[Point], stride: usize) -> f64 {
    let pts = resample(chain, stride);
    pts.windows(2).map(|w| (dist_sq(w[0], w[1]) as f64).sqrt()).sum()
}

/// Every `stride`-th voxel of `chain`, always including both ends.
pub fn resample(chain: &[Point], stride: usize) -> Vec<Point> {
    let stride = stride.max(1);
    let mut out: Vec<Point> = chain.iter().step_by(stride).copied().collect();
    if let Some(&last) = chain.last() {
        if !(chain.len() - 1).is_multiple_of(stride) {
            out.push(last);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distance_fixtures() {
        assert_eq!(min_component_distance(&[[0, 0, 0]], &[[0, 3, 4]]).unwrap(), 5.0);
        let shared = [[0, 2, 2], [0, 9, 9]];
        assert_eq!(min_component_distance(&shared, &[[0, 9, 9]]).unwrap(), 0.0);
        assert_eq!(min_component_distance(&[], &shared), Err(GeometryError::EmptyPointSet));
    }

    #[test]
    fn nearest_search_crosses_many_empty_cells() {
        let idx = SpatialIndex::new(&[[0, 0, 0], [0, 200, 3]], 4);
        assert_eq!(idx.nearest([0, 150, 0]), Some((50 * 50 + 9, 1)));
        assert_eq!(idx.within([0, 1, 1], 2.0), vec![0]);
    }

    #[test]
    fn bresenham_endpoints_and_connectivity() {
        let line = bresenham([0, 0, 0], [0, 3, 7]);
        assert_eq!(line.first(), Some(&[0, 0, 0]));
        assert_eq!(line.last(), Some(&[0, 3, 7]));
        assert_eq!(line.len(), 8);
        for w in line.windows(2) {
            assert!(dist_sq(w[0], w[1]) <= 2);
        }
        let line3 = bresenham([2, 0, 5], [0, 4, 0]);
        assert_eq!(line3.last(), Some(&[0, 4, 0]));
        for w in line3.windows(2) {
            assert!(dist_sq(w[0], w[1]) <= 3);
        }
        assert_eq!(bresenham([0, 1, 1], [0, 1, 1]), vec![[0, 1, 1]]);
    }
}
