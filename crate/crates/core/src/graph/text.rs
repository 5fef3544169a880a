//! Line-oriented graph text format.
//!
//! ```text
//! G <ndim>
//! N <id> <L> <f1> .. <fL>
//! E <id a> <id b> <distance> <weight> [<label 0|1|->] [<prob>]
//! ```
//!
//! Node references in `E` lines are component ids. Blank lines and lines
//! starting with `#` are ignored. Node geometry is not stored, so parsed nodes
//! carry features only.

use super::{CurvilinearGraph, GraphEdge, GraphError, GraphNode};
use crate::raster::BoundingBox;
use std::collections::HashMap;
use std::fmt::Write;

pub fn write_graph(graph: &CurvilinearGraph) -> String {
    let mut out = format!("G {}\n", graph.ndim);
    for n in &graph.nodes {
        write!(out, "N {} {}", n.id, n.features.len()).unwrap();
        for f in &n.features {
            write!(out, " {f}").unwrap();
        }
        out.push('\n');
    }
    for e in &graph.edges {
        write!(
            out,
            "E {} {} {} {}",
            graph.nodes[e.a].id, graph.nodes[e.b].id, e.distance, e.weight
        )
        .unwrap();
        match (e.label, e.prob) {
            (None, None) => {}
            (label, prob) => {
                out.push_str(match label {
                    Some(true) => " 1",
                    Some(false) => " 0",
                    None => " -",
                });
                if let Some(p) = prob {
                    write!(out, " {p}").unwrap();
                }
            }
        }
        out.push('\n');
    }
    out
}

pub fn parse_graph(text: &str) -> Result<CurvilinearGraph, GraphError> {
    let mut ndim = 2;
    let mut nodes = Vec::new();
    let mut index: HashMap<u32, usize> = HashMap::new();
    let mut edges = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let err = |msg: String| GraphError::Parse { line, msg };
        let mut tok = raw.split_whitespace();
        let Some(tag) = tok.next() else { continue };
        if tag.starts_with('#') {
            continue;
        }
        let rest: Vec<&str> = tok.collect();
        let num = |i: usize| -> Result<f64, GraphError> {
            let s = rest.get(i).ok_or_else(|| err(format!("missing field {}", i + 1)))?;
            s.parse::<f64>().map_err(|_| err(format!("bad number {s:?}")))
        };
        let id = |i: usize| -> Result<u32, GraphError> {
            let s = rest.get(i).ok_or_else(|| err(format!("missing field {}", i + 1)))?;
            s.parse::<u32>().map_err(|_| err(format!("bad id {s:?}")))
        };
        match tag {
            "G" => {
                ndim = id(0)? as usize;
                if ndim != 2 && ndim != 3 {
                    return Err(err(format!("ndim must be 2 or 3, got {ndim}")));
                }
            }
            "N" => {
                let nid = id(0)?;
                let len = id(1)? as usize;
                if rest.len() != len + 2 {
                    return Err(err(format!("expected {len} features, found {}", rest.len() - 2)));
                }
                let features = (0..len).map(|i| num(i + 2)).collect::<Result<Vec<_>, _>>()?;
                if index.insert(nid, nodes.len()).is_some() {
                    return Err(err(format!("duplicate node {nid}")));
                }
                nodes.push(GraphNode {
                    id: nid,
                    features,
                    centroid: [0.0; 3],
                    bbox: BoundingBox {
                        ndim,
                        min: [0; 3],
                        max: [0; 3],
                    },
                    points: Vec::new(),
                });
            }
            "E" => {
                let lookup = |i: usize| -> Result<usize, GraphError> {
                    let nid = id(i)?;
                    index
                        .get(&nid)
                        .copied()
                        .ok_or_else(|| err(format!("unknown node {nid}")))
                };
                let (a, b) = (lookup(0)?, lookup(1)?);
                if a == b {
                    return Err(err("self edge".into()));
                }
                let label = match rest.get(4).copied() {
                    None | Some("-") => None,
                    Some("1") => Some(true),
                    Some("0") => Some(false),
                    Some(s) => return Err(err(format!("bad label {s:?}"))),
                };
                let prob = if rest.len() > 5 { Some(num(5)?) } else { None };
                edges.push(GraphEdge {
                    a,
                    b,
                    distance: num(2)?,
                    weight: num(3)?,
                    label,
                    prob,
                });
            }
            other => return Err(err(format!("unknown record {other:?}"))),
        }
    }
    let graph = CurvilinearGraph::from_parts(ndim, nodes, edges);
    if graph.edges.windows(2).any(|w| (w[0].a, w[0].b) == (w[1].a, w[1].b)) {
        return Err(GraphError::Parse {
            line: 0,
            msg: "duplicate edge".into(),
        });
    }
    Ok(graph)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_graph, CcmConfig};
    use crate::raster::{label_components, BinaryMask, Connectivity};

    #[test]
    fn round_trip_keeps_features_and_edges() {
        let m = BinaryMask::from_points(&[6, 30], &[[0, 1, 1], [0, 1, 2], [0, 4, 9], [0, 2, 20]]).unwrap();
        let mut g = build_graph(&label_components(&m, Connectivity::Full), &m, &CcmConfig::default()).unwrap();
        g.edges[0].label = Some(true);
        g.edges[1].prob = Some(0.25);
        let back = parse_graph(&write_graph(&g)).unwrap();
        assert_eq!(back.ndim, 2);
        assert_eq!(back.id_pairs(), g.id_pairs());
        for (x, y) in back.nodes.iter().zip(&g.nodes) {
            assert_eq!(x.features, y.features);
        }
        for (x, y) in back.edges.iter().zip(&g.edges) {
            assert_eq!(
                (x.distance, x.weight, x.label, x.prob),
                (y.distance, y.weight, y.label, y.prob)
            );
        }
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(matches!(
            parse_graph("N 1 2 0.5"),
            Err(GraphError::Parse { line: 1, .. })
        ));
        assert!(matches!(
            parse_graph("N 1 0\nE 1 2 3 1"),
            Err(GraphError::Parse { line: 2, .. })
        ));
        assert!(matches!(parse_graph("N 1 0\nE 1 1 3 1"), Err(GraphError::Parse { .. })));
        assert!(matches!(parse_graph("X"), Err(GraphError::Parse { .. })));
        let ok = parse_graph("# fixture\nN 1 0\n\nN 2 0\nE 2 1 3 1 - 0.5\n").unwrap();
        assert_eq!((ok.edges[0].a, ok.edges[0].b, ok.edges[0].prob), (0, 1, Some(0.5)));
    }
}
