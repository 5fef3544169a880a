//! Rupture graph: one node per connected component, edges between near neighbors.

mod features;
mod text;

pub use features::{
    curvilinear_roi, describe_component, main_path, FEATURE_LEN, PATH_STRIDE, SLOT_DIR_A, SLOT_DIR_B, SLOT_LENGTH,
    SLOT_TORTUOSITY,
};
pub use text::{parse_graph, write_graph};

/// Graph-context slots appended after the descriptor: distance to the nearest
/// linked component, and how squarely the facing end points at it.
pub const CONTEXT_LEN: usize = 2;
/// Length of a graph node's feature vector.
pub const NODE_FEATURE_LEN: usize = FEATURE_LEN + CONTEXT_LEN;
pub const SLOT_NN_DISTANCE: usize = FEATURE_LEN;
pub const SLOT_NN_ALIGNMENT: usize = FEATURE_LEN + 1;

use crate::geometry::{closest_pair, GeometryError, DEFAULT_CELL};
use crate::raster::{BinaryMask, BoundingBox, Component, ComponentLabeling, Connectivity, Point};
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("patch has no components")]
    NoComponents,
    #[error("component {0} has no voxels")]
    EmptyComponent(u32),
    #[error("graph text line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid graph config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Smallest raw distance fed to the weight softmax.
pub const MIN_WEIGHT_DISTANCE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CcmConfig {
    /// Neighbors selected per node.
    pub k: usize,
    /// Edges need a minimum distance strictly below this, in voxels.
    pub tau: f64,
    pub connectivity: Connectivity,
}

impl Default for CcmConfig {
    fn default() -> Self {
        Self {
            k: 15,
            tau: 25.0,
            connectivity: Connectivity::Full,
        }
    }
}

impl CcmConfig {
    pub fn validate(&self) -> Result<(), GraphError> {
        if self.k == 0 {
            return Err(GraphError::InvalidConfig("K must be at least 1".into()));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(GraphError::InvalidConfig(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphNode {
    /// Component id within the patch labeling.
    pub id: u32,
    pub features: Vec<f64>,
    pub centroid: [f64; 3],
    pub bbox: BoundingBox,
    /// Member voxels in patch coordinates; empty for graphs read from text.
    pub points: Vec<Point>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphEdge {
    /// Node index, always `a < b`.
    pub a: usize,
    pub b: usize,
    /// Minimum Euclidean distance between the two components.
    pub distance: f64,
    /// Softmax-normalized weight.
    pub weight: f64,
    /// Ground-truth "belong together" label, when known.
    pub label: Option<bool>,
    /// Predicted probability of the edge being kept.
    pub prob: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurvilinearGraph {
    pub ndim: usize,
    pub nodes: Vec<GraphNode>,
    /// Sorted by `(a, b)`.
    pub edges: Vec<GraphEdge>,
    /// Per node: `(neighbor, edge index)` ascending by neighbor.
    pub adjacency: Vec<Vec<(usize, usize)>>,
}

impl CurvilinearGraph {
    /// Sorts edges canonically, rebuilds adjacency.
    pub fn from_parts(ndim: usize, nodes: Vec<GraphNode>, mut edges: Vec<GraphEdge>) -> Self {
        for e in &mut edges {
            if e.a > e.b {
                std::mem::swap(&mut e.a, &mut e.b);
            }
        }
        edges.sort_by_key(|e| (e.a, e.b));
        let mut adjacency = vec![Vec::new(); nodes.len()];
        for (i, e) in edges.iter().enumerate() {
            adjacency[e.a].push((e.b, i));
            adjacency[e.b].push((e.a, i));
        }
        for list in &mut adjacency {
            list.sort_unstable();
        }
        Self {
            ndim,
            nodes,
            edges,
            adjacency,
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Edge endpoints as component-id pairs, smaller id first, sorted.
    pub fn id_pairs(&self) -> Vec<(u32, u32)> {
        let mut out: Vec<(u32, u32)> = self
            .edges
            .iter()
            .map(|e| {
                let (x, y) = (self.nodes[e.a].id, self.nodes[e.b].id);
                (x.min(y), x.max(y))
            })
            .collect();
        out.sort_unstable();
        out
    }

    pub fn node_index(&self, id: u32) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }
}

/// Descriptor of one rupture, computed on its erased MER crop.
pub fn featurize_node(component: &Component, patch: &BinaryMask) -> Result<Vec<f64>, GraphError> {
    if component.points.is_empty() {
        return Err(GraphError::EmptyComponent(component.id));
    }
    Ok(describe_component(component, patch.ndim()))
}

/// Graph over all components of a labeled patch.
pub fn build_graph(
    labeling: &ComponentLabeling,
    patch: &BinaryMask,
    cfg: &CcmConfig,
) -> Result<CurvilinearGraph, GraphError> {
    build_graph_from_components(&labeling.components, patch.ndim(), cfg)
}

/// Graph over `components` in the given node order.
pub fn build_graph_from_components(
    components: &[Component],
    ndim: usize,
    cfg: &CcmConfig,
) -> Result<CurvilinearGraph, GraphError> {
    cfg.validate()?;
    if components.is_empty() {
        return Err(GraphError::NoComponents);
    }
    if let Some(c) = components.iter().find(|c| c.points.is_empty()) {
        return Err(GraphError::EmptyComponent(c.id));
    }
    let edges = search_edges(components, cfg)?;
    let context = neighbor_context(components, &edges, cfg.tau);
    let nodes: Vec<GraphNode> = components
        .par_iter()
        .zip(context)
        .map(|(c, ctx)| {
            let mut features = describe_component(c, ndim);
            features.extend(ctx);
            GraphNode {
                id: c.id,
                features,
                centroid: c.centroid(),
                bbox: c.bbox,
                points: c.points.clone(),
            }
        })
        .collect();
    let mut graph = CurvilinearGraph::from_parts(ndim, nodes, edges);
    normalize_edge_weights(&mut graph);
    Ok(graph)
}

/// Radius of the neighborhood whose mean sets the outward direction at a voxel.
const TANGENT_RADIUS: i32 = 4;

/// Context slots of every node from its nearest edge partner (ties to the lower
/// node index). Nodes without edges get `(tau, 0)`.
pub fn neighbor_context(components: &[Component], edges: &[GraphEdge], tau: f64) -> Vec<[f64; CONTEXT_LEN]> {
    let mut nearest: Vec<Option<(f64, usize)>> = vec![None; components.len()];
    for e in edges {
        for (u, v) in [(e.a, e.b), (e.b, e.a)] {
            if nearest[u].is_none_or(|(d, w)| (e.distance, v) < (d, w)) {
                nearest[u] = Some((e.distance, v));
            }
        }
    }
    nearest
        .par_iter()
        .enumerate()
        .map(|(i, nn)| match *nn {
            None => [tau, 0.0],
            Some((d, j)) => {
                let own = &components[i].points;
                let cp = closest_pair(own, &components[j].points, DEFAULT_CELL).expect("components are non-empty");
                [d, end_alignment(own, own[cp.a], components[j].points[cp.b])]
            }
        })
        .collect()
}

/// Cosine between the outward direction of `own` at `p` and the step `p -> q`;
/// zero where the local neighborhood is balanced around `p`.
fn end_alignment(own: &[Point], p: Point, q: Point) -> f64 {
    let mut mean = [0.0; 3];
    let mut n = 0.0;
    for v in own {
        if (0..3).all(|k| (v[k] - p[k]).abs() <= TANGENT_RADIUS) {
            for k in 0..3 {
                mean[k] += v[k] as f64;
            }
            n += 1.0;
        }
    }
    let out: Vec<f64> = (0..3).map(|k| p[k] as f64 - mean[k] / n).collect();
    let step: Vec<f64> = (0..3).map(|k| (q[k] - p[k]) as f64).collect();
    let no = out.iter().map(|x| x * x).sum::<f64>().sqrt();
    let ns = step.iter().map(|x| x * x).sum::<f64>().sqrt();
    if no < 0.5 || ns == 0.0 {
        return 0.0;
    }
    out.iter().zip(&step).map(|(a, b)| a * b).sum::<f64>() / (no * ns)
}

/// Undirected edges from per-node top-K selection under the distance threshold.
///
/// Node `i` selects the `K` others with the smallest `(distance, component id)`
/// and keeps those closer than `tau`; an edge exists when either end keeps it.
/// Only pairs whose boxes are closer than `tau` get an exact distance, since the
/// box gap bounds the point-set distance from below.
pub fn search_edges(components: &[Component], cfg: &CcmConfig) -> Result<Vec<GraphEdge>, GraphError> {
    cfg.validate()?;
    let n = components.len();
    let tau_sq = cfg.tau * cfg.tau;
    let near: Vec<Vec<(f64, u32, usize)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut cands = Vec::new();
            for j in 0..n {
                if j == i || (components[i].bbox.gap_sq(&components[j].bbox) as f64) >= tau_sq {
                    continue;
                }
                let d = closest_pair(
                    &components[i].points,
                    &components[j].points,
                    cfg.tau.ceil().max(1.0) as i32,
                )?
                .distance();
                if d < cfg.tau {
                    cands.push((d, components[j].id, j));
                }
            }
            cands.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
            cands.truncate(cfg.k);
            Ok(cands)
        })
        .collect::<Result<_, GeometryError>>()?;
    let mut pairs: Vec<(usize, usize, f64)> = Vec::new();
    for (i, list) in near.iter().enumerate() {
        for &(d, _, j) in list {
            pairs.push((i.min(j), i.max(j), d));
        }
    }
    pairs.sort_by_key(|p| (p.0, p.1));
    pairs.dedup_by_key(|p| (p.0, p.1));
    Ok(pairs
        .into_iter()
        .map(|(a, b, d)| GraphEdge {
            a,
            b,
            distance: d,
            weight: 0.0,
            label: None,
            prob: None,
        })
        .collect())
}

/// Softmax of `exp(1 / max(D, 0.5))` over every edge of the graph.
pub fn normalize_edge_weights(graph: &mut CurvilinearGraph) {
    let w = softmax_inverse_distance(&graph.edges.iter().map(|e| e.distance).collect::<Vec<_>>());
    for (e, w) in graph.edges.iter_mut().zip(w) {
        e.weight = w;
    }
}

pub fn softmax_inverse_distance(distances: &[f64]) -> Vec<f64> {
    let logits: Vec<f64> = distances.iter().map(|d| 1.0 / d.max(MIN_WEIGHT_DISTANCE)).collect();
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Node partition induced by the kept edges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterSet {
    /// Node indices per cluster, each ascending; clusters ordered by their smallest node.
    pub clusters: Vec<Vec<usize>>,
}

impl ClusterSet {
    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    /// Cluster index of every node.
    pub fn assignment(&self, node_count: usize) -> Vec<usize> {
        let mut out = vec![usize::MAX; node_count];
        for (c, members) in self.clusters.iter().enumerate() {
            for &n in members {
                out[n] = c;
            }
        }
        out
    }
}

/// Connected components of the graph restricted to edges with `keep[i]`.
pub fn separate_clusters(graph: &CurvilinearGraph, keep: &[bool]) -> ClusterSet {
    assert_eq!(keep.len(), graph.edges.len(), "one keep flag per edge");
    let n = graph.nodes.len();
    let mut seen = vec![false; n];
    let mut clusters = Vec::new();
    for start in 0..n {
        if seen[start] {
            continue;
        }
        seen[start] = true;
        let mut members = vec![start];
        let mut stack = vec![start];
        while let Some(u) = stack.pop() {
            for &(v, e) in &graph.adjacency[u] {
                if keep[e] && !seen[v] {
                    seen[v] = true;
                    members.push(v);
                    stack.push(v);
                }
            }
        }
        members.sort_unstable();
        clusters.push(members);
    }
    ClusterSet { clusters }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::label_components;

    fn points_mask(w: usize, pts: &[Point]) -> BinaryMask {
        BinaryMask::from_points(&[1, w], pts).unwrap()
    }

    #[test]
    fn single_node_has_no_edges() {
        let m = points_mask(8, &[[0, 0, 3]]);
        let g = build_graph(&label_components(&m, Connectivity::Full), &m, &CcmConfig::default()).unwrap();
        assert_eq!((g.node_count(), g.edge_count()), (1, 0));
    }

    #[test]
    fn collinear_points_get_one_edge() {
        let m = points_mask(48, &[[0, 0, 0], [0, 0, 10], [0, 0, 40]]);
        let g = build_graph(&label_components(&m, Connectivity::Full), &m, &CcmConfig::default()).unwrap();
        assert_eq!(g.id_pairs(), vec![(1, 2)]);
        assert_eq!(g.edges[0].distance, 10.0);
        assert!((g.edges[0].weight - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_patch_is_an_error() {
        let m = BinaryMask::new_2d(4, 4);
        let err = build_graph(&label_components(&m, Connectivity::Full), &m, &CcmConfig::default());
        assert_eq!(err.unwrap_err(), GraphError::NoComponents);
    }

    #[test]
    fn config_validation() {
        let bad = CcmConfig {
            k: 0,
            ..CcmConfig::default()
        };
        assert!(matches!(bad.validate(), Err(GraphError::InvalidConfig(_))));
        let bad = CcmConfig {
            tau: 0.0,
            ..CcmConfig::default()
        };
        assert!(matches!(bad.validate(), Err(GraphError::InvalidConfig(_))));
    }

    #[test]
    fn softmax_weights() {
        assert_eq!(softmax_inverse_distance(&[3.0, 3.0]), vec![0.5, 0.5]);
        let w = softmax_inverse_distance(&[1.0, 2.0]);
        assert!((w[0] - 0.622459).abs() < 1e-6);
        assert!((w[1] - 0.377541).abs() < 1e-6);
        // sub-half distances are clamped
        assert_eq!(softmax_inverse_distance(&[0.1, 0.5]), vec![0.5, 0.5]);
    }

    #[test]
    fn top_k_limits_selection_with_id_tiebreak() {
        // center point with four neighbors at equal distance; K=1 selects the lowest id from the center,
        // but each neighbor also selects the center, so all four edges survive the union
        let comps: Vec<Component> = [[0, 5, 5], [0, 0, 5], [0, 5, 0], [0, 5, 10], [0, 10, 5]]
            .iter()
            .enumerate()
            .map(|(i, &p)| Component {
                id: i as u32 + 1,
                points: vec![p],
                bbox: BoundingBox {
                    ndim: 2,
                    min: p,
                    max: p,
                },
            })
            .collect();
        let cfg = CcmConfig {
            k: 1,
            tau: 6.0,
            ..CcmConfig::default()
        };
        let g = build_graph_from_components(&comps, 2, &cfg).unwrap();
        assert_eq!(g.id_pairs(), vec![(1, 2), (1, 3), (1, 4), (1, 5)]);
    }

    #[test]
    fn clusters_follow_kept_edges() {
        let m = points_mask(40, &[[0, 0, 0], [0, 0, 5], [0, 0, 10], [0, 0, 30]]);
        let cfg = CcmConfig {
            k: 15,
            tau: 8.0,
            ..CcmConfig::default()
        };
        let g = build_graph(&label_components(&m, Connectivity::Full), &m, &cfg).unwrap();
        assert_eq!(g.id_pairs(), vec![(1, 2), (2, 3)]);
        let all = separate_clusters(&g, &[true, true]);
        assert_eq!(all.clusters, vec![vec![0, 1, 2], vec![3]]);
        let none = separate_clusters(&g, &[false, false]);
        assert_eq!(none.len(), 4);
        assert_eq!(none.assignment(4), vec![0, 1, 2, 3]);
    }
}
