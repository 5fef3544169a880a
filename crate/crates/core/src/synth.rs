//! Synthetic curvilinear trees and rupture injection.
//!
//! All randomness comes from `ChaCha8Rng` seeded with the config seed, with the
//! sample index selecting the stream, so every sample is reproducible on its own.

use crate::geometry::{bresenham, skeletonize, VoxelClass};
use crate::raster::{
    label_components, neighbor_offsets, BinaryMask, Connectivity, GrayImage, PatchLayout, Point, RasterError,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::VecDeque;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("degenerate synth config: {0}")]
    DegenerateConfig(String),
    #[error("could not place {wanted} disjoint gaps (placed {placed})")]
    MaskTooSmall { wanted: usize, placed: usize },
    #[error(transparent)]
    Raster(#[from] RasterError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    /// Public dims, `[rows, cols]` or `[depth, rows, cols]`.
    pub dims: Vec<usize>,
    /// Branch levels; 1 is a single stroke.
    pub depth: usize,
    /// Chance that a branch end forks into two children.
    pub branch_prob: f64,
    /// Centerline step in voxels.
    pub step: f64,
    /// Steps of the root branch.
    pub branch_steps: usize,
    /// Step-count factor per level.
    pub length_decay: f64,
    /// Per-step direction jitter in radians.
    pub jitter: f64,
    pub width: usize,
    /// Minimum distance kept between non-adjacent branches.
    pub clearance: f64,
    pub ruptures: usize,
    /// Inclusive range of erased centerline voxels per gap.
    pub gap_min: usize,
    pub gap_max: usize,
    /// Chance that a gap detaches a branch right at its bifurcation instead of
    /// cutting it mid-way.
    pub root_gap_prob: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            dims: vec![256, 256],
            depth: 4,
            branch_prob: 0.85,
            step: 3.0,
            branch_steps: 24,
            length_decay: 0.8,
            jitter: 0.12,
            width: 1,
            clearance: 12.0,
            ruptures: 4,
            gap_min: 3,
            gap_max: 8,
            root_gap_prob: 0.5,
            seed: 1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::DegenerateConfig(m.into()));
        if self.dims.len() != 2 && self.dims.len() != 3 || self.dims.iter().any(|&d| d < 16) {
            return bad("dims must be 2 or 3 extents of at least 16");
        }
        if self.depth == 0 || self.branch_steps == 0 || !(self.step > 0.0) {
            return bad("depth, branch_steps and step must be positive");
        }
        if self.width == 0 {
            return bad("width must be positive");
        }
        if !(0.0..=1.0).contains(&self.branch_prob) {
            return bad("branch_prob must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.root_gap_prob) {
            return bad("root_gap_prob must lie in [0, 1]");
        }
        if self.gap_min == 0 || self.gap_min > self.gap_max {
            return bad("gap range must satisfy 0 < gap_min <= gap_max");
        }
        Ok(())
    }

    fn ndim(&self) -> usize {
        self.dims.len()
    }

    fn shape(&self) -> [usize; 3] {
        match self.dims[..] {
            [h, w] => [1, h, w],
            [d, h, w] => [d, h, w],
            _ => unreachable!("validated"),
        }
    }

    /// Random generator for sample `index`.
    pub fn rng(&self, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub clean: BinaryMask,
    pub ruptured: BinaryMask,
    /// `assignment[f]` is the clean component id of ruptured fragment `f + 1`.
    pub assignment: Vec<u32>,
    /// Forks where both children were drawn.
    pub branchings: usize,
    /// Erased centerline voxels of each gap.
    pub gaps: Vec<Vec<Point>>,
}

type Vec3 = [f64; 3];

fn normalize(v: Vec3) -> Vec3 {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn round(v: Vec3) -> Point {
    [v[0].round() as i32, v[1].round() as i32, v[2].round() as i32]
}

struct TreeBuilder<'a, R: Rng> {
    cfg: &'a SynthConfig,
    rng: &'a mut R,
    mask: BinaryMask,
    stamp: Vec<Point>,
    branchings: usize,
}

impl<R: Rng> TreeBuilder<'_, R> {
    fn inside(&self, p: Vec3) -> bool {
        let shape = self.cfg.shape();
        let margin = self.cfg.width as f64 + 1.0;
        (3 - self.cfg.ndim()..3).all(|k| p[k] >= margin && p[k] <= shape[k] as f64 - 1.0 - margin)
    }

    fn jitter(&mut self, d: Vec3) -> Vec3 {
        let j = self.cfg.jitter;
        if j == 0.0 {
            return d;
        }
        if self.cfg.ndim() == 2 {
            let a = d[1].atan2(d[2]) + self.rng.gen_range(-j..=j);
            [0.0, a.sin(), a.cos()]
        } else {
            let u: Vec<f64> = (0..3).map(|_| self.rng.gen_range(-j..=j)).collect();
            normalize([d[0] + u[0], d[1] + u[1], d[2] + u[2]])
        }
    }

    /// Unit vector perpendicular to `d` (random orientation in 3D).
    fn perpendicular(&mut self, d: Vec3) -> Vec3 {
        if self.cfg.ndim() == 2 {
            return [0.0, -d[2], d[1]];
        }
        loop {
            let r: Vec3 = [
                self.rng.gen_range(-1.0..1.0),
                self.rng.gen_range(-1.0..1.0),
                self.rng.gen_range(-1.0..1.0),
            ];
            let dot = r[0] * d[0] + r[1] * d[1] + r[2] * d[2];
            let p = [r[0] - dot * d[0], r[1] - dot * d[1], r[2] - dot * d[2]];
            if p.iter().map(|v| v * v).sum::<f64>() > 1e-3 {
                return normalize(p);
            }
        }
    }

    fn too_close(&self, p: Point) -> bool {
        let c = self.cfg.clearance;
        let r = c.ceil() as i32;
        let zr = if self.cfg.ndim() == 3 { r } else { 0 };
        for dz in -zr..=zr {
            for dy in -r..=r {
                for dx in -r..=r {
                    if ((dz * dz + dy * dy + dx * dx) as f64) < c * c
                        && self.mask.get([p[0] + dz, p[1] + dy, p[2] + dx])
                    {
                        return true;
                    }
                }
            }
        }
        false
    }

    /// Draws one branch and its descendants; returns whether the branch was drawn.
    fn branch(&mut self, start: Vec3, dir: Vec3, level: usize) -> bool {
        let steps = ((self.cfg.branch_steps as f64) * self.cfg.length_decay.powi(level as i32)).round() as usize;
        let grace = self.cfg.clearance + self.cfg.width as f64 + 2.0;
        let min_len = (grace + 4.0) as usize;
        let mut centerline: Vec<Point> = vec![round(start)];
        let mut pos = start;
        let mut d = dir;
        let mut travelled = 0.0;
        for _ in 0..steps {
            d = self.jitter(d);
            let next = [
                pos[0] + self.cfg.step * d[0],
                pos[1] + self.cfg.step * d[1],
                pos[2] + self.cfg.step * d[2],
            ];
            if !self.inside(next) {
                break;
            }
            let seg = bresenham(round(pos), round(next));
            let added = &seg[1..];
            travelled += self.cfg.step;
            if travelled > grace && added.iter().any(|&v| self.too_close(v)) {
                break;
            }
            centerline.extend_from_slice(added);
            pos = next;
        }
        if centerline.len() < min_len {
            return false;
        }
        for &c in &centerline {
            for o in &self.stamp {
                self.mask.set([c[0] + o[0], c[1] + o[1], c[2] + o[2]], true);
            }
        }
        if level + 1 < self.cfg.depth && self.rng.gen_bool(self.cfg.branch_prob) {
            let perp = self.perpendicular(d);
            let mut drawn = 0;
            for side in [1.0, -1.0] {
                let s = side * self.rng.gen_range(0.55..1.0);
                let child = normalize([d[0] + s * perp[0], d[1] + s * perp[1], d[2] + s * perp[2]]);
                if self.branch(pos, child, level + 1) {
                    drawn += 1;
                }
            }
            if drawn == 2 {
                self.branchings += 1;
            }
        }
        true
    }
}

fn disk_offsets(width: usize, ndim: usize) -> Vec<Point> {
    let rho = (width as f64 - 1.0) / 2.0;
    let r = rho.ceil() as i32;
    let zr = if ndim == 3 { r } else { 0 };
    let mut out = Vec::new();
    for dz in -zr..=zr {
        for dy in -r..=r {
            for dx in -r..=r {
                if ((dz * dz + dy * dy + dx * dx) as f64) <= rho * rho + 1e-9 {
                    out.push([dz, dy, dx]);
                }
            }
        }
    }
    out
}

/// Random tree of jittered polyline branches; returns the mask and the number of forks.
pub fn generate_tree(cfg: &SynthConfig, rng: &mut impl Rng) -> Result<(BinaryMask, usize), SynthError> {
    cfg.validate()?;
    let shape = cfg.shape();
    let mask = BinaryMask::zeros(&cfg.dims)?;
    let margin = cfg.width as f64 + 2.0;
    let start = [
        (shape[0] / 2) as f64,
        shape[1] as f64 - 1.0 - margin,
        (shape[2] / 2) as f64 + rng.gen_range(-0.1..0.1) * shape[2] as f64,
    ];
    let mut b = TreeBuilder {
        cfg,
        rng,
        mask,
        stamp: disk_offsets(cfg.width, cfg.ndim()),
        branchings: 0,
    };
    if !b.branch(start, [0.0, -1.0, 0.0], 0) {
        return Err(SynthError::DegenerateConfig("root branch does not fit".into()));
    }
    Ok((b.mask, b.branchings))
}

/// Distance from coordinate `c` to the nearest patch seam along an axis of tile size `w`.
fn seam_distance(c: i32, w: usize) -> i32 {
    let r = c.rem_euclid(w as i32);
    r.min(w as i32 - 1 - r)
}

/// Multi-source BFS over the foreground: index of the nearest source for every voxel.
fn owners(mask: &BinaryMask, sources: &[Point]) -> Vec<u32> {
    let mut owner = vec![u32::MAX; mask.len()];
    let mut queue = VecDeque::new();
    for (i, &s) in sources.iter().enumerate() {
        owner[mask.index(s)] = i as u32;
        queue.push_back(s);
    }
    let offsets = neighbor_offsets(Connectivity::Full, mask.ndim());
    while let Some(p) = queue.pop_front() {
        let o = owner[mask.index(p)];
        for d in &offsets {
            let q = [p[0] + d[0], p[1] + d[1], p[2] + d[2]];
            if mask.get(q) && owner[mask.index(q)] == u32::MAX {
                owner[mask.index(q)] = o;
                queue.push_back(q);
            }
        }
    }
    owner
}

/// Erases `cfg.ruptures` disjoint gaps along skeleton branches of `clean`.
///
/// Gaps keep clear of branch ends, of each other and of patch seams, so each
/// one lies inside a single tile of the pipeline's patch layout.
pub fn inject_ruptures(clean: &BinaryMask, cfg: &SynthConfig, rng: &mut impl Rng) -> Result<SynthSample, SynthError> {
    cfg.validate()?;
    let labels = label_components(clean, Connectivity::Full);
    let mut ruptured = clean.clone();
    let mut gaps: Vec<Vec<Point>> = Vec::new();
    if cfg.ruptures > 0 {
        let skel = skeletonize(clean);
        let layout = PatchLayout::for_dims(clean.dims())?;
        let end_margin = cfg.width + 4;
        let seam_margin = cfg.width as i32 + 3;
        let spacing = (2 * cfg.gap_max + cfg.width + 4) as i64;
        let paths: Vec<&Vec<Point>> = skel
            .paths
            .iter()
            .filter(|p| !p.closed && p.voxels.len() >= cfg.gap_min + 2 * end_margin)
            .map(|p| &p.voxels)
            .collect();
        let total: usize = paths.iter().map(|p| p.len()).sum();
        let is_branch = |p: &Point| {
            let i = skel.voxels.binary_search(p).expect("path voxels are skeletal");
            skel.classes[i] == VoxelClass::Branch
        };
        // paths oriented to start at a bifurcation
        let rooted: Vec<Vec<Point>> = skel
            .paths
            .iter()
            .filter(|p| !p.closed)
            .flat_map(|p| {
                let fwd = is_branch(&p.voxels[0]).then(|| p.voxels.clone());
                let bwd = is_branch(&p.voxels[p.voxels.len() - 1]).then(|| p.voxels.iter().rev().copied().collect());
                fwd.into_iter().chain(bwd)
            })
            .collect();
        let axes = 3 - clean.ndim()..3;
        let mut attempts = 0;
        while gaps.len() < cfg.ruptures && attempts < 400 * cfg.ruptures && total > 0 {
            attempts += 1;
            let len = rng.gen_range(cfg.gap_min..=cfg.gap_max);
            let at_root = !rooted.is_empty() && rng.gen_bool(cfg.root_gap_prob);
            let window = if at_root {
                let path = &rooted[rng.gen_range(0..rooted.len())];
                if 1 + len + end_margin > path.len() {
                    continue;
                }
                &path[1..1 + len]
            } else {
                let mut pick = rng.gen_range(0..total);
                let path = paths
                    .iter()
                    .find(|p| {
                        if pick < p.len() {
                            true
                        } else {
                            pick -= p.len();
                            false
                        }
                    })
                    .expect("pick < total");
                if pick < end_margin || pick + len + end_margin > path.len() {
                    continue;
                }
                &path[pick..pick + len]
            };
            let near_seam = window.iter().any(|p| {
                axes.clone()
                    .any(|k| seam_distance(p[k], layout.window[k]) < seam_margin)
            });
            let near_gap = gaps.iter().flatten().any(|g| {
                window
                    .iter()
                    .any(|w| crate::geometry::dist_sq(*g, *w) < spacing * spacing)
            });
            if near_seam || near_gap {
                continue;
            }
            gaps.push(window.to_vec());
        }
        if gaps.len() < cfg.ruptures {
            return Err(SynthError::MaskTooSmall {
                wanted: cfg.ruptures,
                placed: gaps.len(),
            });
        }
        let owner = owners(clean, &skel.voxels);
        let mut erase = vec![false; skel.voxels.len()];
        for g in &gaps {
            for p in g {
                let i = skel.voxels.binary_search(p).expect("gap voxels are skeletal");
                erase[i] = true;
            }
        }
        for i in 0..clean.len() {
            if clean.get_index(i) && owner[i] != u32::MAX && erase[owner[i] as usize] {
                ruptured.set_index(i, false);
            }
        }
    }
    let fragments = label_components(&ruptured, Connectivity::Full);
    let assignment = fragments
        .components
        .iter()
        .map(|c| labels.label_at(c.points[0]))
        .collect();
    Ok(SynthSample {
        clean: clean.clone(),
        ruptured,
        assignment,
        branchings: 0,
        gaps,
    })
}

/// Grayscale rendering: bright clean structure, dimmer inside gaps, uniform noise.
pub fn synthesize_image(sample: &SynthSample, rng: &mut impl Rng) -> GrayImage {
    let mut img = GrayImage::zeros(sample.clean.dims()).expect("valid dims");
    for i in 0..sample.clean.len() {
        let p = sample.clean.point(i);
        let base = match (sample.clean.get_index(i), sample.ruptured.get_index(i)) {
            (true, true) => 0.75,
            (true, false) => 0.45,
            _ => 0.15,
        };
        let v: f64 = base + rng.gen_range(-0.08..0.08);
        img.set(p, v.clamp(0.0, 1.0) as f32);
    }
    img
}

/// Tree, ruptures and rendered image for sample `index`.
pub fn generate_sample(cfg: &SynthConfig, index: u64) -> Result<(SynthSample, GrayImage), SynthError> {
    let mut rng = cfg.rng(index);
    let (clean, branchings) = generate_tree(cfg, &mut rng)?;
    let mut sample = inject_ruptures(&clean, cfg, &mut rng)?;
    sample.branchings = branchings;
    let image = synthesize_image(&sample, &mut rng);
    Ok((sample, image))
}

/// Like [`generate_sample`], redrawing the tree (up to 64 times) when the gaps do not fit.
pub fn generate_sample_retrying(cfg: &SynthConfig, index: u64) -> Result<(SynthSample, GrayImage), SynthError> {
    let mut last = None;
    for attempt in 0..64u64 {
        match generate_sample(cfg, index + (attempt << 32)) {
            Ok(s) => return Ok(s),
            Err(e @ SynthError::MaskTooSmall { .. }) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{branch_points, min_component_distance};
    use crate::raster::count_components;

    fn small() -> SynthConfig {
        SynthConfig {
            dims: vec![128, 128],
            ruptures: 0,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn single_straight_stroke() {
        let cfg = SynthConfig {
            depth: 1,
            jitter: 0.0,
            ..small()
        };
        let (m, b) = generate_tree(&cfg, &mut cfg.rng(0)).unwrap();
        assert_eq!(b, 0);
        assert_eq!(count_components(&m, Connectivity::Full), 1);
        assert_eq!(branch_points(&skeletonize(&m)), 0);
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = SynthConfig {
            ruptures: 3,
            ..SynthConfig::default()
        };
        assert_eq!(
            generate_sample_retrying(&cfg, 5).unwrap(),
            generate_sample_retrying(&cfg, 5).unwrap()
        );
    }

    #[test]
    fn degenerate_configs_rejected() {
        let cfg = SynthConfig { depth: 0, ..small() };
        assert!(matches!(
            generate_tree(&cfg, &mut cfg.rng(0)),
            Err(SynthError::DegenerateConfig(_))
        ));
        let cfg = SynthConfig {
            branch_steps: 0,
            ..small()
        };
        assert!(matches!(
            generate_tree(&cfg, &mut cfg.rng(0)),
            Err(SynthError::DegenerateConfig(_))
        ));
    }

    #[test]
    fn no_ruptures_leaves_mask_intact() {
        let cfg = small();
        let (clean, _) = generate_tree(&cfg, &mut cfg.rng(1)).unwrap();
        let s = inject_ruptures(&clean, &cfg, &mut cfg.rng(2)).unwrap();
        assert_eq!(s.ruptured, clean);
        assert_eq!(s.assignment, vec![1]);
    }

    #[test]
    fn one_gap_on_a_straight_stroke() {
        let mut clean = BinaryMask::new_2d(64, 128);
        for x in 10..120 {
            clean.set([0, 24, x], true);
        }
        let cfg = SynthConfig {
            dims: vec![64, 128],
            ruptures: 1,
            gap_min: 5,
            gap_max: 5,
            ..SynthConfig::default()
        };
        let s = inject_ruptures(&clean, &cfg, &mut cfg.rng(0)).unwrap();
        let l = label_components(&s.ruptured, Connectivity::Full);
        assert_eq!(l.len(), 2);
        let d = min_component_distance(&l.components[0].points, &l.components[1].points).unwrap();
        assert_eq!(d, 6.0);
        assert!(s.ruptured.is_subset_of(&clean));
        assert_eq!(s.assignment, vec![1, 1]);
    }

    #[test]
    fn impossible_gaps_are_reported() {
        let mut clean = BinaryMask::new_2d(32, 32);
        for x in 10..16 {
            clean.set([0, 20, x], true);
        }
        let cfg = SynthConfig {
            dims: vec![32, 32],
            ruptures: 2,
            ..SynthConfig::default()
        };
        assert!(matches!(
            inject_ruptures(&clean, &cfg, &mut cfg.rng(0)),
            Err(SynthError::MaskTooSmall { wanted: 2, .. })
        ));
    }
}
