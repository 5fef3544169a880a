//! Built-in oracle checks: exhaustive edge search and metric fixtures.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;
use std::fmt;
use std::time::Instant;
use vsr_core::cmm::connectivity_loss;
use vsr_core::graph::{build_graph, softmax_inverse_distance, CcmConfig};
use vsr_core::metrics::{ece, fractal_dimension, tortuosity, vbn, ECE_BINS};
use vsr_core::raster::{label_components, BinaryMask, Component, Connectivity, Point};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.into(),
            passed,
            detail,
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

/// A random mask of short strokes (2D or 3D) with random `K` and `tau`.
pub fn random_instance(rng: &mut impl Rng) -> (BinaryMask, CcmConfig) {
    let three_d = rng.gen_bool(0.25);
    let dims: Vec<usize> = if three_d { vec![24, 40, 40] } else { vec![96, 96] };
    let strokes = rng.gen_range(1..=50);
    let mut mask = BinaryMask::zeros(&dims).expect("valid dims");
    let shape = mask.shape();
    for _ in 0..strokes {
        let mut p: Point = [0, 0, 0];
        for k in 0..3 {
            p[k] = rng.gen_range(0..shape[k] as i32);
        }
        let mut dir: Point = [0, rng.gen_range(-1..=1), rng.gen_range(-1..=1)];
        if three_d {
            dir[0] = rng.gen_range(-1..=1);
        }
        for _ in 0..rng.gen_range(1..=6) {
            if (0..3).all(|k| p[k] >= 0 && (p[k] as usize) < shape[k]) {
                mask.set(p, true);
            }
            for k in 0..3 {
                p[k] += dir[k];
            }
        }
    }
    let cfg = CcmConfig {
        k: rng.gen_range(1..=20),
        tau: rng.gen_range(5.0..=50.0),
        connectivity: Connectivity::Full,
    };
    (mask, cfg)
}

fn brute_distance(a: &Component, b: &Component) -> f64 {
    let mut best = i64::MAX;
    for p in &a.points {
        for q in &b.points {
            best = best.min((0..3).map(|k| ((p[k] - q[k]) as i64).pow(2)).sum());
        }
    }
    (best as f64).sqrt()
}

/// Exhaustive reference: every pair's exact distance, per-node top-K under tau, union.
pub fn brute_force_edges(components: &[Component], cfg: &CcmConfig) -> BTreeSet<(u32, u32)> {
    let n = components.len();
    let mut dist = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let d = brute_distance(&components[i], &components[j]);
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }
    let mut out = BTreeSet::new();
    for i in 0..n {
        let mut cands: Vec<(f64, u32)> = (0..n)
            .filter(|&j| j != i && dist[i][j] < cfg.tau)
            .map(|j| (dist[i][j], components[j].id))
            .collect();
        cands.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
        for &(_, id) in cands.iter().take(cfg.k) {
            let own = components[i].id;
            out.insert((own.min(id), own.max(id)));
        }
    }
    out
}

/// Graph edges against the exhaustive reference, plus weight normalization.
pub fn edge_oracle(instances: usize, seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = Instant::now();
    let (mut mismatches, mut max_components, mut worst_sum) = (0usize, 0usize, 0.0f64);
    for _ in 0..instances {
        let (mask, cfg) = random_instance(&mut rng);
        let labeling = label_components(&mask, cfg.connectivity);
        max_components = max_components.max(labeling.len());
        let graph = match build_graph(&labeling, &mask, &cfg) {
            Ok(g) => g,
            Err(_) => {
                mismatches += 1;
                continue;
            }
        };
        let got: BTreeSet<(u32, u32)> = graph
            .id_pairs()
            .into_iter()
            .map(|(a, b)| (a.min(b), a.max(b)))
            .collect();
        if got != brute_force_edges(&labeling.components, &cfg) {
            mismatches += 1;
        }
        if !graph.edges.is_empty() {
            let total: f64 = graph.edges.iter().map(|e| e.weight).sum();
            worst_sum = worst_sum.max((total - 1.0).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    vec![
        Check::new(
            "edge_oracle",
            mismatches == 0 && secs < 10.0,
            format!("{instances} instances, <= {max_components} components, {mismatches} mismatches, {secs:.2}s"),
        ),
        Check::new(
            "edge_weight_sum",
            worst_sum <= 1e-9,
            format!("max |sum - 1| = {worst_sum:.3e}"),
        ),
    ]
}

pub fn softmax_fixture() -> Check {
    let w = softmax_inverse_distance(&[1.0, 2.0]);
    let ok = (w[0] - 0.622459).abs() <= 1e-6 && (w[1] - 0.377541).abs() <= 1e-6;
    Check::new(
        "edge_weight_fixture",
        ok,
        format!("D=(1,2) -> ({:.6}, {:.6})", w[0], w[1]),
    )
}

fn mask_2d(h: usize, w: usize, mut keep: impl FnMut(i32, i32) -> bool) -> BinaryMask {
    let mut m = BinaryMask::new_2d(h, w);
    for y in 0..h as i32 {
        for x in 0..w as i32 {
            if keep(y, x) {
                m.set([0, y, x], true);
            }
        }
    }
    m
}

fn draw_line(m: &mut BinaryMask, a: (i32, i32), b: (i32, i32)) {
    let n = (b.0 - a.0).abs().max((b.1 - a.1).abs());
    for t in 0..=n {
        let f = t as f64 / n.max(1) as f64;
        let y = a.0 as f64 + f * (b.0 - a.0) as f64;
        let x = a.1 as f64 + f * (b.1 - a.1) as f64;
        m.set([0, y.round() as i32, x.round() as i32], true);
    }
}

pub fn line_mask() -> BinaryMask {
    mask_2d(512, 512, |y, _| y == 256)
}

pub fn square_mask() -> BinaryMask {
    mask_2d(512, 512, |_, _| true)
}

/// Sierpinski triangle of depth 7 on a 128 x 128 grid.
pub fn sierpinski_mask() -> BinaryMask {
    mask_2d(128, 128, |y, x| (x & y) == 0)
}

/// Half circle of radius `r`, one voxel thick.
pub fn semicircle_mask(r: f64) -> BinaryMask {
    let side = (2.0 * r) as usize + 24;
    let (cy, cx) = (r + 12.0, r + 12.0);
    let mut m = BinaryMask::new_2d(side, side);
    let steps = (8.0 * r) as usize;
    for i in 0..=steps {
        let t = std::f64::consts::PI * i as f64 / steps as f64;
        m.set(
            [0, (cy - r * t.sin()).round() as i32, (cx + r * t.cos()).round() as i32],
            true,
        );
    }
    m
}

pub fn y_mask() -> BinaryMask {
    let mut m = BinaryMask::new_2d(128, 128);
    draw_line(&mut m, (110, 64), (64, 64));
    draw_line(&mut m, (64, 64), (20, 24));
    draw_line(&mut m, (64, 64), (20, 104));
    m
}

pub fn morphology_oracles() -> Vec<Check> {
    let mut out = Vec::new();
    let mut fd = |name: &str, m: &BinaryMask, want: f64| {
        let got = fractal_dimension(m);
        let ok = got.as_ref().is_ok_and(|v| (v - want).abs() <= 0.1);
        out.push(Check::new(name, ok, format!("{got:?}, expected {want} +- 0.1")));
    };
    fd("fd_line", &line_mask(), 1.0);
    fd("fd_square", &square_mask(), 2.0);
    fd("fd_sierpinski", &sierpinski_mask(), 3f64.ln() / 2f64.ln());

    let straight = tortuosity(&mask_2d(64, 200, |y, x| y == 30 && (10..190).contains(&x)));
    out.push(Check::new(
        "vt_straight",
        straight.as_ref().is_ok_and(|v| (v - 1.0).abs() <= 1e-6),
        format!("{straight:?}, expected 1 +- 1e-6"),
    ));
    let half = std::f64::consts::FRAC_PI_2;
    let semi = tortuosity(&semicircle_mask(100.0));
    out.push(Check::new(
        "vt_semicircle",
        semi.as_ref().is_ok_and(|v| (v - half).abs() <= 0.05),
        format!("{semi:?}, expected {half:.4} +- 0.05"),
    ));

    let y = vbn(&y_mask());
    out.push(Check::new("vbn_y", y == 1, format!("{y}, expected 1")));
    let l = vbn(&mask_2d(64, 64, |y, x| y == 32 && (4..60).contains(&x)));
    out.push(Check::new("vbn_line", l == 0, format!("{l}, expected 0")));

    let cr: Vec<f64> = [1, 2, 4].iter().map(|&c| connectivity_loss(c)).collect();
    out.push(Check::new(
        "connectivity_loss",
        cr == [0.0, 0.5, 0.75],
        format!("C=1,2,4 -> {cr:?}"),
    ));
    out
}

pub fn ece_oracles(seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 200_000;
    let mut conf = Vec::with_capacity(n);
    let mut correct = Vec::with_capacity(n);
    for _ in 0..n {
        let c: f64 = rng.gen_range(0.5..=1.0);
        conf.push(c);
        correct.push(rng.gen_bool(c));
    }
    let calibrated = ece(&conf, &correct, ECE_BINS);
    let fixture = ece(
        &[1.0; 10],
        &[true, true, true, true, true, true, true, true, false, false],
        ECE_BINS,
    );
    vec![
        Check::new(
            "ece_calibrated",
            calibrated.as_ref().is_ok_and(|v| *v <= 0.01),
            format!("{calibrated:?} over {n} samples, expected <= 0.01"),
        ),
        Check::new(
            "ece_overconfident",
            fixture.as_ref().is_ok_and(|v| (v - 0.2).abs() <= 1e-9),
            format!("{fixture:?}, expected 0.2 +- 1e-9"),
        ),
    ]
}

/// Every check, in a fixed order.
pub fn run_all(seed: u64) -> Vec<Check> {
    let mut out = edge_oracle(200, seed);
    out.push(softmax_fixture());
    out.extend(morphology_oracles());
    out.extend(ece_oracles(seed));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn brute_force_matches_hand_count() {
        let m = mask_2d(20, 20, |y, x| y == 2 && (x == 0 || x == 3 || x == 10));
        let comps = label_components(&m, Connectivity::Full).components;
        let cfg = CcmConfig {
            k: 1,
            tau: 8.0,
            connectivity: Connectivity::Full,
        };
        assert_eq!(brute_force_edges(&comps, &cfg), BTreeSet::from([(1, 2), (2, 3)]));
        let cfg = CcmConfig { tau: 5.0, ..cfg };
        assert_eq!(brute_force_edges(&comps, &cfg), BTreeSet::from([(1, 2)]));
    }

    #[test]
    fn fixtures_are_well_formed() {
        assert_eq!(sierpinski_mask().count_ones(), 2187);
        assert_eq!(vbn(&line_mask()), 0);
    }
}
