//! Fixed-length geometric descriptor of one rupture.
//!
//! Slot layout (length [`FEATURE_LEN`]):
//!
//! | slots  | content                                                      |
//! |--------|--------------------------------------------------------------|
//! | 0      | main skeleton path length in voxels (1 for a single voxel)   |
//! | 1      | voxel count                                                  |
//! | 2      | box aspect, smallest over largest extent                     |
//! | 3      | mean absolute turning angle per voxel of path                |
//! | 4      | tortuosity of the main path (1 when the chord is 0)          |
//! | 5..13  | one-hot outward direction at the first path end              |
//! | 13..21 | one-hot outward direction at the second path end             |
//! | 21..24 | centroid offset from box center over box extent, `(z, y, x)` |
//! | 24     | skeleton endpoint count                                      |
//! | 25     | junction cluster count                                       |
//! | 26..29 | box extents `(z, y, x)`                                      |
//! | 29     | fill ratio, voxels over box volume                           |
//! | 30     | chord between the main path ends                             |
//! | 31     | mean thickness, voxels over path length                      |
//!
//! Everything is measured inside the component's own box, so the descriptor
//! does not change when the component is translated.

use crate::geometry::{dist_sq, polyline_length, resample, skeletonize, Skeleton};
use crate::raster::{neighbor_offsets, BinaryMask, Component, Connectivity, Point};
use std::collections::VecDeque;

pub const FEATURE_LEN: usize = 32;
pub const SLOT_LENGTH: usize = 0;
pub const SLOT_TORTUOSITY: usize = 4;
pub const SLOT_DIR_A: usize = 5;
pub const SLOT_DIR_B: usize = 13;

/// Sampling stride for path lengths and turning angles.
pub const PATH_STRIDE: usize = 4;

/// The component's MER crop holding only its own voxels.
pub fn curvilinear_roi(component: &Component) -> BinaryMask {
    let b = component.bbox;
    let mut roi = BinaryMask::zeros(&b.dims()).expect("component box is non-empty");
    for p in &component.points {
        roi.set([p[0] - b.min[0], p[1] - b.min[1], p[2] - b.min[2]], true);
    }
    roi
}

/// Longest geodesic chain through the skeleton (double BFS sweep), ends ordered in raster order.
pub fn main_path(skel: &Skeleton) -> Vec<Point> {
    if skel.voxels.is_empty() {
        return Vec::new();
    }
    let offsets = neighbor_offsets(Connectivity::Full, skel.mask.ndim());
    let sweep = |start: Point| -> (Point, Vec<Option<Point>>) {
        let mut parent: Vec<Option<Point>> = vec![None; skel.mask.len()];
        let mut seen = vec![false; skel.mask.len()];
        let mut queue = VecDeque::from([start]);
        seen[skel.mask.index(start)] = true;
        let mut last = start;
        while let Some(p) = queue.pop_front() {
            last = p;
            for o in &offsets {
                let q = [p[0] + o[0], p[1] + o[1], p[2] + o[2]];
                if skel.mask.get(q) && !seen[skel.mask.index(q)] {
                    seen[skel.mask.index(q)] = true;
                    parent[skel.mask.index(q)] = Some(p);
                    queue.push_back(q);
                }
            }
        }
        (last, parent)
    };
    let (a, _) = sweep(skel.voxels[0]);
    let (b, parent) = sweep(a);
    let mut path = vec![b];
    let mut cur = b;
    while let Some(p) = parent[skel.mask.index(cur)] {
        path.push(p);
        cur = p;
    }
    if path[0] > *path.last().unwrap() {
        path.reverse();
    }
    path
}

/// Outward direction bin at `path[0]`, or `None` for a degenerate path.
fn direction_bin(path: &[Point], ndim: usize) -> Option<usize> {
    if path.len() < 2 {
        return None;
    }
    let inner = path[(PATH_STRIDE).min(path.len() - 1)];
    let d = [path[0][0] - inner[0], path[0][1] - inner[1], path[0][2] - inner[2]];
    if ndim == 2 {
        let angle = (d[1] as f64).atan2(d[2] as f64);
        let bin = ((angle + std::f64::consts::PI) / std::f64::consts::FRAC_PI_4).floor() as usize;
        Some(bin % 8)
    } else {
        Some(((d[0] >= 0) as usize) << 2 | ((d[1] >= 0) as usize) << 1 | (d[2] >= 0) as usize)
    }
}

fn mean_turning(path: &[Point], length: f64) -> f64 {
    let pts = resample(path, PATH_STRIDE);
    if pts.len() < 3 || length <= 0.0 {
        return 0.0;
    }
    let mut total = 0.0;
    for w in pts.windows(3) {
        let u: Vec<f64> = (0..3).map(|k| (w[1][k] - w[0][k]) as f64).collect();
        let v: Vec<f64> = (0..3).map(|k| (w[2][k] - w[1][k]) as f64).collect();
        let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nu == 0.0 || nv == 0.0 {
            continue;
        }
        let c = (u.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() / (nu * nv)).clamp(-1.0, 1.0);
        total += c.acos();
    }
    total / length
}

/// Geometric descriptor of a rupture; see the module docs for the slot layout.
pub fn describe_component(component: &Component, ndim: usize) -> Vec<f64> {
    let roi = curvilinear_roi(component);
    let skel = skeletonize(&roi);
    let path = main_path(&skel);
    let arc = polyline_length(&path, PATH_STRIDE);
    let chord = match (path.first(), path.last()) {
        (Some(&a), Some(&b)) => (dist_sq(a, b) as f64).sqrt(),
        _ => 0.0,
    };
    let b = component.bbox;
    let axes = 3 - ndim..3;
    let extents: Vec<f64> = (0..3).map(|k| b.extent(k) as f64).collect();
    let (lo, hi) = axes.clone().fold((f64::MAX, 0.0f64), |(lo, hi), k| {
        (lo.min(extents[k]), hi.max(extents[k]))
    });
    let count = component.voxel_count() as f64;
    let length = arc + 1.0;

    let mut f = vec![0.0; FEATURE_LEN];
    f[SLOT_LENGTH] = length;
    f[1] = count;
    f[2] = lo / hi;
    f[3] = mean_turning(&path, arc);
    f[SLOT_TORTUOSITY] = if chord > 0.0 { arc / chord } else { 1.0 };
    if let Some(bin) = direction_bin(&path, ndim) {
        f[SLOT_DIR_A + bin] = 1.0;
    }
    let reversed: Vec<Point> = path.iter().rev().copied().collect();
    if let Some(bin) = direction_bin(&reversed, ndim) {
        f[SLOT_DIR_B + bin] = 1.0;
    }
    let centroid = component.centroid();
    for k in axes {
        let center = (b.min[k] + b.max[k]) as f64 / 2.0;
        f[21 + k] = (centroid[k] - center) / extents[k];
    }
    f[24] = skel.endpoints().len() as f64;
    f[25] = skel.junctions.len() as f64;
    f[26..29].copy_from_slice(&extents);
    f[29] = count / b.volume() as f64;
    f[30] = chord;
    f[31] = count / length;
    f
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{label_components, BoundingBox};

    fn component(points: Vec<Point>) -> Component {
        let mut points = points;
        points.sort_unstable();
        let bbox = crate::raster::minimum_enclosing_box(&points, 2).unwrap();
        Component { id: 1, points, bbox }
    }

    #[test]
    fn single_voxel_descriptor() {
        let f = describe_component(&component(vec![[0, 4, 4]]), 2);
        assert_eq!(f.len(), FEATURE_LEN);
        assert_eq!(f[SLOT_LENGTH], 1.0);
        assert_eq!(f[SLOT_TORTUOSITY], 1.0);
        assert!(f[SLOT_DIR_A..SLOT_DIR_B + 8].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn translation_invariant() {
        let pts: Vec<Point> = (0..12).map(|i| [0, 3 + i / 3, 2 + i]).collect();
        let shifted: Vec<Point> = pts.iter().map(|p| [0, p[1] + 3, p[2] + 5]).collect();
        assert_eq!(
            describe_component(&component(pts), 2),
            describe_component(&component(shifted), 2)
        );
    }

    #[test]
    fn straight_stroke_directions_point_outward() {
        let pts: Vec<Point> = (0..10).map(|i| [0, 5, i]).collect();
        let f = describe_component(&component(pts), 2);
        assert_eq!(f[SLOT_LENGTH], 10.0);
        assert!((f[SLOT_TORTUOSITY] - 1.0).abs() < 1e-12);
        // first end at x=0 points toward -x (angle π -> bin 0), second toward +x (angle 0 -> bin 4)
        assert_eq!(f[SLOT_DIR_A], 1.0);
        assert_eq!(f[SLOT_DIR_B + 4], 1.0);
    }

    #[test]
    fn roi_erases_other_components() {
        // an L-shaped neighbor sits inside the box of the diagonal stroke
        let mut m = BinaryMask::new_2d(12, 12);
        for i in 0..10 {
            m.set([0, i, i], true);
        }
        m.set([0, 6, 2], true);
        m.set([0, 7, 2], true);
        let l = label_components(&m, Connectivity::Full);
        let diag = l.components.iter().find(|c| c.points.len() == 10).unwrap();
        let alone = label_components(
            &BinaryMask::from_points(&[12, 12], &diag.points).unwrap(),
            Connectivity::Full,
        );
        assert_eq!(describe_component(diag, 2), describe_component(&alone.components[0], 2));
        let roi = curvilinear_roi(diag);
        assert_eq!(roi.count_ones(), 10);
        let _: BoundingBox = diag.bbox;
    }
}
