//! Topology-preserving thinning and skeleton graph analysis.
//!
//! 2D masks are thinned with the two alternating sub-iterations of the
//! Zhang–Suen scheme; 3D masks with six directional sub-iterations. In both
//! cases a voxel is only removed when it is a simple point (its deletion does
//! not change the foreground or background topology) and not a curve end.
//! Deletions are applied sequentially, which makes every single removal
//! topology-preserving on its own.

use crate::raster::{neighbor_offsets, BinaryMask, Connectivity, Point};
use std::collections::{HashSet, VecDeque};
use std::sync::OnceLock;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VoxelClass {
    /// No skeletal neighbor.
    Isolated,
    /// Exactly one skeletal neighbor.
    Endpoint,
    /// Exactly two.
    Regular,
    /// Three or more.
    Branch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchPath {
    /// Ordered chain, both terminal voxels included.
    pub voxels: Vec<Point>,
    /// Sum of step lengths (1, √2 or √3 per step).
    pub arc_length: f64,
    /// Starts and ends at the same node (or is a pure cycle).
    pub closed: bool,
}

impl BranchPath {
    pub fn chord(&self) -> f64 {
        let a = self.voxels[0];
        let b = *self.voxels.last().unwrap();
        (super::dist_sq(a, b) as f64).sqrt()
    }
}

#[derive(Debug, Clone)]
pub struct Skeleton {
    pub mask: BinaryMask,
    /// Skeletal voxels in raster order.
    pub voxels: Vec<Point>,
    /// Class of `voxels[i]`.
    pub classes: Vec<VoxelClass>,
    /// Branch-point voxels grouped by full adjacency.
    pub junctions: Vec<Vec<Point>>,
    pub paths: Vec<BranchPath>,
}

/// Thins `mask` and analyzes the result.
pub fn skeletonize(mask: &BinaryMask) -> Skeleton {
    Skeleton::from_thin(thin(mask))
}

/// Number of junction clusters (bifurcations) of a skeleton.
pub fn branch_points(skel: &Skeleton) -> usize {
    skel.junctions.len()
}

/// Iterative topology-preserving thinning until no voxel can be removed.
pub fn thin(mask: &BinaryMask) -> BinaryMask {
    let mut m = mask.clone();
    if m.ndim() == 2 {
        thin_2d(&mut m);
    } else {
        thin_3d(&mut m);
    }
    m
}

/// Neighbors of a 2D pixel in Zhang–Suen order p2..p9: N, NE, E, SE, S, SW, W, NW.
fn ring8(m: &BinaryMask, p: Point) -> [u8; 8] {
    let [z, y, x] = p;
    [
        m.get([z, y - 1, x]) as u8,
        m.get([z, y - 1, x + 1]) as u8,
        m.get([z, y, x + 1]) as u8,
        m.get([z, y + 1, x + 1]) as u8,
        m.get([z, y + 1, x]) as u8,
        m.get([z, y + 1, x - 1]) as u8,
        m.get([z, y, x - 1]) as u8,
        m.get([z, y - 1, x - 1]) as u8,
    ]
}

/// Yokoi 8-connectivity number; a border pixel is simple iff this equals 1.
fn yokoi8(n: &[u8; 8]) -> u8 {
    let c = |i: usize| 1 - n[i % 8];
    [0usize, 2, 4, 6]
        .iter()
        .map(|&k| c(k) - c(k) * c(k + 1) * c(k + 2))
        .sum()
}

fn thin_2d(m: &mut BinaryMask) {
    loop {
        let mut changed = false;
        for sub in 0..2 {
            for p in m.points() {
                if !m.get(p) {
                    continue;
                }
                let n = ring8(m, p);
                let count: u8 = n.iter().sum();
                if count < 2 {
                    continue;
                }
                let [p2, _, p4, _, p6, _, p8, _] = n;
                let border = if sub == 0 {
                    p2 * p4 * p6 == 0 && p4 * p6 * p8 == 0
                } else {
                    p2 * p4 * p8 == 0 && p2 * p6 * p8 == 0
                };
                if border && yokoi8(&n) == 1 {
                    m.set(p, false);
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
}

struct CubeTables {
    /// 26-adjacency between cells of the 3×3×3 cube, center excluded.
    adj26: Vec<Vec<usize>>,
    /// 6-adjacency restricted to the 18-neighborhood.
    adj6_n18: Vec<Vec<usize>>,
    in_n18: [bool; 27],
    face: [bool; 27],
}

fn cube_tables() -> &'static CubeTables {
    static TABLES: OnceLock<CubeTables> = OnceLock::new();
    TABLES.get_or_init(|| {
        let coord = |i: usize| [(i / 9) as i32 - 1, ((i / 3) % 3) as i32 - 1, (i % 3) as i32 - 1];
        let manhattan = |c: [i32; 3]| c[0].abs() + c[1].abs() + c[2].abs();
        let mut in_n18 = [false; 27];
        let mut face = [false; 27];
        for i in 0..27 {
            let m = manhattan(coord(i));
            in_n18[i] = (1..=2).contains(&m);
            face[i] = m == 1;
        }
        let mut adj26 = vec![Vec::new(); 27];
        let mut adj6_n18 = vec![Vec::new(); 27];
        for i in 0..27 {
            for j in 0..27 {
                if i == j || i == 13 || j == 13 {
                    continue;
                }
                let (a, b) = (coord(i), coord(j));
                let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
                if d.iter().all(|v| v.abs() <= 1) {
                    adj26[i].push(j);
                }
                if manhattan(d) == 1 && in_n18[i] && in_n18[j] {
                    adj6_n18[i].push(j);
                }
            }
        }
        CubeTables {
            adj26,
            adj6_n18,
            in_n18,
            face,
        }
    })
}

fn cube(m: &BinaryMask, p: Point) -> [bool; 27] {
    let mut c = [false; 27];
    for (i, v) in c.iter_mut().enumerate() {
        let q = [
            p[0] + (i / 9) as i32 - 1,
            p[1] + ((i / 3) % 3) as i32 - 1,
            p[2] + (i % 3) as i32 - 1,
        ];
        *v = i != 13 && m.get(q);
    }
    c
}

/// 26/6 simple-point test on a 3×3×3 neighborhood.
fn is_simple_3d(c: &[bool; 27]) -> bool {
    let t = cube_tables();
    // one 26-component of foreground in N26
    let mut seen = [false; 27];
    let mut fg_components = 0;
    for s in 0..27 {
        if s == 13 || !c[s] || seen[s] {
            continue;
        }
        fg_components += 1;
        if fg_components > 1 {
            return false;
        }
        flood(s, &mut seen, |j| c[j], &t.adj26);
    }
    if fg_components != 1 {
        return false;
    }
    // one 6-component of background in N18 that touches a face neighbor
    let mut seen = [false; 27];
    let mut bg_components = 0;
    for s in 0..27 {
        if !t.face[s] || c[s] || seen[s] {
            continue;
        }
        bg_components += 1;
        if bg_components > 1 {
            return false;
        }
        flood(s, &mut seen, |j| t.in_n18[j] && !c[j], &t.adj6_n18);
    }
    bg_components == 1
}

fn flood(start: usize, seen: &mut [bool; 27], member: impl Fn(usize) -> bool, adj: &[Vec<usize>]) {
    let mut stack = vec![start];
    seen[start] = true;
    while let Some(i) = stack.pop() {
        for &j in &adj[i] {
            if !seen[j] && member(j) {
                seen[j] = true;
                stack.push(j);
            }
        }
    }
}

fn thin_3d(m: &mut BinaryMask) {
    const DIRS: [Point; 6] = [[-1, 0, 0], [1, 0, 0], [0, -1, 0], [0, 1, 0], [0, 0, -1], [0, 0, 1]];
    loop {
        let mut changed = false;
        for d in DIRS {
            for p in m.points() {
                if !m.get(p) || m.get([p[0] + d[0], p[1] + d[1], p[2] + d[2]]) {
                    continue;
                }
                let c = cube(m, p);
                if c.iter().filter(|&&v| v).count() < 2 {
                    continue;
                }
                if is_simple_3d(&c) {
                    m.set(p, false);
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
}

impl Skeleton {
    /// Classifies an already thin mask and traces its branch paths.
    pub fn from_thin(mask: BinaryMask) -> Skeleton {
        let offsets = neighbor_offsets(Connectivity::Full, mask.ndim());
        let voxels = mask.points();
        let neighbors = |p: Point| -> Vec<Point> {
            offsets
                .iter()
                .map(|o| [p[0] + o[0], p[1] + o[1], p[2] + o[2]])
                .filter(|&q| mask.get(q))
                .collect()
        };
        let classes: Vec<VoxelClass> = voxels
            .iter()
            .map(|&p| match neighbors(p).len() {
                0 => VoxelClass::Isolated,
                1 => VoxelClass::Endpoint,
                2 => VoxelClass::Regular,
                _ => VoxelClass::Branch,
            })
            .collect();

        // voxel index -> position in `voxels`
        let mut slot = vec![u32::MAX; mask.len()];
        for (i, &p) in voxels.iter().enumerate() {
            slot[mask.index(p)] = i as u32;
        }
        let at = |p: Point| slot[mask.index(p)] as usize;

        // node id per skeletal voxel: endpoints own one, branch voxels share their cluster's
        let mut node = vec![usize::MAX; voxels.len()];
        let mut junctions = Vec::new();
        let mut next_node = 0;
        for i in 0..voxels.len() {
            if node[i] != usize::MAX {
                continue;
            }
            match classes[i] {
                VoxelClass::Endpoint | VoxelClass::Isolated => {
                    node[i] = next_node;
                    next_node += 1;
                }
                VoxelClass::Branch => {
                    let mut cluster = Vec::new();
                    let mut queue = VecDeque::from([i]);
                    node[i] = next_node;
                    while let Some(j) = queue.pop_front() {
                        cluster.push(voxels[j]);
                        for q in neighbors(voxels[j]) {
                            let k = at(q);
                            if classes[k] == VoxelClass::Branch && node[k] == usize::MAX {
                                node[k] = next_node;
                                queue.push_back(k);
                            }
                        }
                    }
                    cluster.sort_unstable();
                    junctions.push(cluster);
                    next_node += 1;
                }
                VoxelClass::Regular => {}
            }
        }

        let mut paths = Vec::new();
        let mut visited = vec![false; voxels.len()];
        let mut direct: HashSet<(usize, usize)> = HashSet::new();
        for u in 0..voxels.len() {
            if !matches!(classes[u], VoxelClass::Endpoint | VoxelClass::Branch) {
                continue;
            }
            for q in neighbors(voxels[u]) {
                let v = at(q);
                if node[v] != usize::MAX {
                    if node[v] != node[u] && direct.insert((u.min(v), u.max(v))) {
                        paths.push(make_path(vec![voxels[u], voxels[v]], false));
                    }
                    continue;
                }
                if visited[v] {
                    continue;
                }
                visited[v] = true;
                let mut chain = vec![voxels[u], voxels[v]];
                let (mut prev, mut cur) = (u, v);
                let mut closed = false;
                while let Some(next) = neighbors(voxels[cur]).into_iter().map(at).find(|&k| k != prev) {
                    chain.push(voxels[next]);
                    if node[next] != usize::MAX {
                        closed = node[next] == node[u];
                        break;
                    }
                    if visited[next] {
                        break;
                    }
                    visited[next] = true;
                    prev = cur;
                    cur = next;
                }
                paths.push(make_path(chain, closed));
            }
        }
        // cycles made only of regular voxels
        for s in 0..voxels.len() {
            if classes[s] != VoxelClass::Regular || visited[s] {
                continue;
            }
            visited[s] = true;
            let mut chain = vec![voxels[s]];
            let (mut prev, mut cur) = (usize::MAX, s);
            while let Some(next) = neighbors(voxels[cur]).into_iter().map(at).find(|&k| k != prev) {
                chain.push(voxels[next]);
                if visited[next] {
                    break;
                }
                visited[next] = true;
                prev = cur;
                cur = next;
            }
            paths.push(make_path(chain, true));
        }

        Skeleton {
            mask,
            voxels,
            classes,
            junctions,
            paths,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn endpoints(&self) -> Vec<Point> {
        self.voxels
            .iter()
            .zip(&self.classes)
            .filter(|(_, c)| **c == VoxelClass::Endpoint)
            .map(|(p, _)| *p)
            .collect()
    }

    pub fn count(&self, class: VoxelClass) -> usize {
        self.classes.iter().filter(|&&c| c == class).count()
    }
}

fn make_path(voxels: Vec<Point>, closed: bool) -> BranchPath {
    let arc_length = voxels
        .windows(2)
        .map(|w| (super::dist_sq(w[0], w[1]) as f64).sqrt())
        .sum();
    BranchPath {
        voxels,
        arc_length,
        closed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::bresenham;
    use crate::raster::count_components;

    fn draw(dims: &[usize], segments: &[(Point, Point)]) -> BinaryMask {
        let mut m = BinaryMask::zeros(dims).unwrap();
        for &(a, b) in segments {
            for p in bresenham(a, b) {
                m.set(p, true);
            }
        }
        m
    }

    #[test]
    fn thin_line_is_unchanged() {
        let m = draw(&[20, 20], &[([0, 10, 2], [0, 10, 17])]);
        assert_eq!(thin(&m), m);
        let d = draw(&[20, 20], &[([0, 2, 2], [0, 15, 15])]);
        assert_eq!(thin(&d), d);
    }

    #[test]
    fn filled_disk_collapses_to_small_connected_skeleton() {
        let mut m = BinaryMask::new_2d(15, 15);
        for y in 0..15 {
            for x in 0..15 {
                let (dy, dx) = (y - 7, x - 7);
                if dy * dy + dx * dx <= 16 {
                    m.set([0, y, x], true);
                }
            }
        }
        let skel = skeletonize(&m);
        assert!(skel.voxels.len() <= 9, "{} voxels", skel.voxels.len());
        assert_eq!(count_components(&skel.mask, Connectivity::Full), 1);
    }

    #[test]
    fn disjoint_strokes_keep_two_components() {
        let mut m = BinaryMask::new_2d(30, 30);
        for y in 2..6 {
            for x in 2..25 {
                m.set([0, y, x], true);
            }
        }
        for y in 15..19 {
            for x in 4..28 {
                m.set([0, y, x], true);
            }
        }
        let skel = skeletonize(&m);
        assert_eq!(count_components(&skel.mask, Connectivity::Full), 2);
        assert!(skel.mask.is_subset_of(&m));
    }

    #[test]
    fn branch_point_counts() {
        let line = draw(&[30, 30], &[([0, 5, 3], [0, 5, 25])]);
        assert_eq!(branch_points(&skeletonize(&line)), 0);

        let y = draw(
            &[40, 40],
            &[
                ([0, 20, 20], [0, 3, 20]),
                ([0, 20, 20], [0, 35, 5]),
                ([0, 20, 20], [0, 35, 35]),
            ],
        );
        let skel = skeletonize(&y);
        assert_eq!(branch_points(&skel), 1);
        assert_eq!(skel.paths.len(), 3);

        let h = draw(
            &[30, 30],
            &[
                ([0, 2, 5], [0, 26, 5]),
                ([0, 2, 20], [0, 26, 20]),
                ([0, 14, 5], [0, 14, 20]),
            ],
        );
        let skel = skeletonize(&h);
        assert_eq!(branch_points(&skel), 2);
        // tree: paths = endpoints + junction clusters - 1
        assert_eq!(skel.paths.len(), skel.endpoints().len() + 2 - 1);
    }

    #[test]
    fn path_arc_lengths() {
        let m = draw(&[20, 20], &[([0, 1, 1], [0, 1, 11])]);
        let skel = skeletonize(&m);
        assert_eq!(skel.paths.len(), 1);
        assert!((skel.paths[0].arc_length - 10.0).abs() < 1e-12);
        let d = draw(&[20, 20], &[([0, 1, 1], [0, 6, 6])]);
        let skel = skeletonize(&d);
        assert!((skel.paths[0].arc_length - 5.0 * 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn ring_is_one_closed_path() {
        let mut m = BinaryMask::new_2d(20, 20);
        for y in 4..14 {
            for x in 4..14 {
                let border = y == 4 || y == 13 || x == 4 || x == 13;
                m.set([0, y, x], border);
            }
        }
        let skel = skeletonize(&m);
        assert_eq!(branch_points(&skel), 0);
        assert_eq!(skel.paths.len(), 1);
        assert!(skel.paths[0].closed);
    }

    #[test]
    fn thin_3d_bar_to_curve() {
        let mut m = BinaryMask::new_3d(12, 12, 30);
        for z in 4..7 {
            for y in 4..7 {
                for x in 3..27 {
                    m.set([z, y, x], true);
                }
            }
        }
        let skel = skeletonize(&m);
        assert_eq!(count_components(&skel.mask, Connectivity::Full), 1);
        assert_eq!(branch_points(&skel), 0);
        assert_eq!(skel.endpoints().len(), 2);
        assert!(skel.voxels.len() < 40);
    }

    #[test]
    fn simple_point_3d_table() {
        let mut c = [false; 27];
        // isolated voxel: not simple
        assert!(!is_simple_3d(&c));
        // one face neighbor: simple (curve end, kept by the caller)
        c[4] = true;
        assert!(is_simple_3d(&c));
        // two opposite face neighbors: removing disconnects
        c[22] = true;
        assert!(!is_simple_3d(&c));
    }
}
