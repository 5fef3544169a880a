use proptest::prelude::*;
use std::collections::BTreeSet;
use vsr_core::cmm::{polyline_distance, Merger};
use vsr_core::graph::{build_graph, search_edges, separate_clusters, CcmConfig};
use vsr_core::metrics::{ece, overlap_metrics};
use vsr_core::pipeline::{rehabilitate, Judge};
use vsr_core::raster::{label_components, BinaryMask, Component, Connectivity, Point};

fn mask_from(h: usize, w: usize, pts: &[(usize, usize)]) -> BinaryMask {
    let pts: Vec<Point> = pts.iter().map(|&(y, x)| [0, (y % h) as i32, (x % w) as i32]).collect();
    BinaryMask::from_points(&[h, w], &pts).unwrap()
}

fn components(pts: &[(usize, usize)]) -> Vec<Component> {
    label_components(&mask_from(48, 48, pts), Connectivity::Full).components
}

fn brute_distance(a: &Component, b: &Component) -> f64 {
    let mut best = i64::MAX;
    for p in &a.points {
        for q in &b.points {
            let d: i64 = (0..3).map(|k| ((p[k] - q[k]) as i64).pow(2)).sum();
            best = best.min(d);
        }
    }
    (best as f64).sqrt()
}

fn brute_edges(comps: &[Component], k: usize, tau: f64) -> BTreeSet<(u32, u32)> {
    let mut out = BTreeSet::new();
    for (i, a) in comps.iter().enumerate() {
        let mut cands: Vec<(f64, u32)> = comps
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, b)| (brute_distance(a, b), b.id))
            .filter(|c| c.0 < tau)
            .collect();
        cands.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
        for &(_, id) in cands.iter().take(k) {
            out.insert((a.id.min(id), a.id.max(id)));
        }
    }
    out
}

fn id_edges(comps: &[Component], k: usize, tau: f64) -> BTreeSet<(u32, u32)> {
    let cfg = CcmConfig {
        k,
        tau,
        ..CcmConfig::default()
    };
    search_edges(comps, &cfg)
        .unwrap()
        .iter()
        .map(|e| {
            let (a, b) = (comps[e.a].id, comps[e.b].id);
            (a.min(b), a.max(b))
        })
        .collect()
}

fn scatter() -> impl Strategy<Value = Vec<(usize, usize)>> {
    prop::collection::vec((0usize..48, 0usize..48), 1..60)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn edges_match_exhaustive_search(pts in scatter(), k in 1usize..8, tau in 2.0f64..30.0) {
        let comps = components(&pts);
        prop_assert_eq!(id_edges(&comps, k, tau), brute_edges(&comps, k, tau));
    }

    #[test]
    fn edges_ignore_component_order(pts in scatter(), k in 1usize..8, tau in 2.0f64..30.0, rot in 0usize..60) {
        let comps = components(&pts);
        let mut shuffled = comps.clone();
        shuffled.rotate_left(rot % comps.len().max(1));
        shuffled.reverse();
        prop_assert_eq!(id_edges(&comps, k, tau), id_edges(&shuffled, k, tau));
    }

    #[test]
    fn edges_grow_with_k_and_tau(pts in scatter(), k in 1usize..8, tau in 2.0f64..30.0, extra in 0.0f64..10.0) {
        let comps = components(&pts);
        let base = id_edges(&comps, k, tau);
        prop_assert!(base.is_subset(&id_edges(&comps, k + 1, tau)));
        prop_assert!(base.is_subset(&id_edges(&comps, k, tau + extra)));
    }

    #[test]
    fn clusters_match_union_find(pts in scatter(), flags in prop::collection::vec(any::<bool>(), 0..400)) {
        let mask = mask_from(48, 48, &pts);
        let labeling = label_components(&mask, Connectivity::Full);
        let graph = build_graph(&labeling, &mask, &CcmConfig::default()).unwrap();
        let keep: Vec<bool> = (0..graph.edges.len()).map(|i| flags.get(i).copied().unwrap_or(true)).collect();
        let clusters = separate_clusters(&graph, &keep);

        let n = graph.nodes.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut [usize], x: usize) -> usize {
            if p[x] != x {
                let r = find(p, p[x]);
                p[x] = r;
            }
            p[x]
        }
        for (e, &k) in graph.edges.iter().zip(&keep) {
            if k {
                let (ra, rb) = (find(&mut parent, e.a), find(&mut parent, e.b));
                parent[ra] = rb;
            }
        }
        let assignment = clusters.assignment(n);
        for a in 0..n {
            for b in 0..n {
                prop_assert_eq!(find(&mut parent, a) == find(&mut parent, b), assignment[a] == assignment[b]);
            }
        }
        let total: usize = clusters.clusters.iter().map(Vec::len).sum();
        prop_assert_eq!(total, n);
    }

    #[test]
    fn edge_weights_sum_to_one(pts in scatter()) {
        let mask = mask_from(48, 48, &pts);
        let labeling = label_components(&mask, Connectivity::Full);
        let graph = build_graph(&labeling, &mask, &CcmConfig::default()).unwrap();
        if !graph.edges.is_empty() {
            let total: f64 = graph.edges.iter().map(|e| e.weight).sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn dice_and_jaccard_agree(a in scatter(), b in scatter()) {
        let o = overlap_metrics(&mask_from(24, 24, &a), &mask_from(24, 24, &b)).unwrap();
        prop_assert!(o.dice >= o.jaccard - 1e-12);
        prop_assert!((o.dice - 2.0 * o.jaccard / (1.0 + o.jaccard)).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&o.pa));
    }

    #[test]
    fn ece_ignores_sample_order(
        samples in prop::collection::vec((0.0f64..=1.0, any::<bool>()), 1..200),
        rot in 0usize..200,
    ) {
        let (c, k): (Vec<f64>, Vec<bool>) = samples.iter().copied().unzip();
        let mut shuffled = samples.clone();
        shuffled.rotate_left(rot % samples.len());
        shuffled.reverse();
        let (c2, k2): (Vec<f64>, Vec<bool>) = shuffled.into_iter().unzip();
        let a = ece(&c, &k, 15).unwrap();
        let b = ece(&c2, &k2, 15).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn polyline_distance_is_symmetric(
        s in prop::collection::vec((0i32..40, 0i32..40), 1..30),
        q in prop::collection::vec((0i32..40, 0i32..40), 1..30),
    ) {
        let s: Vec<Point> = s.into_iter().map(|(y, x)| [0, y, x]).collect();
        let q: Vec<Point> = q.into_iter().map(|(y, x)| [0, y, x]).collect();
        prop_assert_eq!(polyline_distance(&s, &q), polyline_distance(&q, &s));
        prop_assert_eq!(polyline_distance(&s, &s), 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn rehabilitation_only_adds_voxels(pts in prop::collection::vec((0usize..64, 0usize..64), 1..40)) {
        let mask = mask_from(64, 64, &pts);
        let out = rehabilitate(&mask, None, Judge::KeepAll, Merger::Geometric, &CcmConfig::default(), 1).unwrap();
        prop_assert!(mask.is_subset_of(&out.mask));
        prop_assert!(out.probabilities.iter().all(|p| (0.0..=1.0).contains(p)));
    }
}
