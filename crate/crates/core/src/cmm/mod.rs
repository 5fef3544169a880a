//! Per-cluster merging of rupture fragments and patch rehabilitation.

mod neural;

pub use neural::{
    merge_training_pairs, reported_loss, train_merger, MergePair, MergerConfig, MergerModel, MergerTrainConfig,
    MergerTrainReport, MERGER_SIDE,
};

use crate::autodiff::AutodiffError;
use crate::geometry::{closest_pair_indexed, minimal_path, SpatialIndex, DEFAULT_CELL};
use crate::germ::{classify_edges, derive_edge_labels, prune_edges, GermError, GermModel};
use crate::graph::{build_graph, separate_clusters, CcmConfig, ClusterSet, CurvilinearGraph, GraphError};
use crate::raster::{
    count_components, label_components, BinaryMask, BoundingBox, ComponentLabeling, Connectivity, GrayImage, Point,
    RasterError,
};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CmmError {
    #[error("cluster {0} has no members")]
    EmptyCluster(usize),
    #[error("ground-truth crop has no foreground")]
    EmptyGtForeground,
    #[error("prediction has no foreground")]
    EmptyPrediction,
    #[error("learned merger has not been trained")]
    UntrainedModel,
    #[error("learned merger supports 2D crops only, got {0}D")]
    UnsupportedDims(usize),
    #[error("{found} probabilities for a crop of {expected} voxels")]
    ProbabilityCount { expected: usize, found: usize },
    #[error("no training pairs")]
    EmptyDataset,
    #[error("invalid merger config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Germ(#[from] GermError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Padding around the union of member boxes.
pub const ROI_PAD: i32 = 4;
/// Voxel threshold on merger probabilities.
pub const MERGE_THRESHOLD: f64 = 0.5;

/// Crops handed to a merger for one cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeInput {
    pub cluster: usize,
    /// Crop box in patch coordinates.
    pub bbox: BoundingBox,
    /// Member fragments only; other foreground in the box is erased.
    pub fragments: BinaryMask,
    /// Source intensities over the box, zero without a source image.
    pub image: GrayImage,
    pub connectivity: Connectivity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Geometric,
    Learned,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergeOutput {
    pub merged: BinaryMask,
    pub bbox: BoundingBox,
    pub provenance: Provenance,
    /// Foreground probability per crop voxel, when the merger produces one.
    pub probabilities: Option<Vec<f64>>,
}

/// Crops the cluster's fragments and image over the padded union of member boxes.
pub fn extract_cluster_rois(
    cluster: usize,
    members: &[usize],
    labeling: &ComponentLabeling,
    patch: &BinaryMask,
    image: Option<&GrayImage>,
) -> Result<MergeInput, CmmError> {
    let first = members.first().ok_or(CmmError::EmptyCluster(cluster))?;
    let mut bbox = labeling.components[*first].bbox;
    for &m in &members[1..] {
        bbox = bbox.union(&labeling.components[m].bbox);
    }
    let bbox = bbox.padded(ROI_PAD, patch.shape());
    let mut fragments = BinaryMask::zeros(&bbox.dims())?;
    let origin = bbox.min;
    for &m in members {
        for p in &labeling.components[m].points {
            fragments.set([p[0] - origin[0], p[1] - origin[1], p[2] - origin[2]], true);
        }
    }
    let image = match image {
        Some(img) => {
            if img.dims() != patch.dims() {
                return Err(RasterError::DimsMismatch(patch.dims().to_vec(), img.dims().to_vec()).into());
            }
            img.crop(&bbox)
        }
        None => GrayImage::zeros(&bbox.dims())?,
    };
    Ok(MergeInput {
        cluster,
        bbox,
        fragments,
        image,
        connectivity: labeling.connectivity,
    })
}

/// Darkness penalty of a voxel with normalized intensity `v`.
fn darkness(v: f32) -> f64 {
    let d = 1.0 - v.clamp(0.0, 1.0) as f64;
    d * d
}

/// Joins all fragments: repeatedly takes the closest pair of components and
/// bridges them with a one-voxel path of minimal darkness-weighted length, so
/// the bridge follows faint structure in the image and is straight on a blank one.
pub fn geometric_merge(input: &MergeInput) -> MergeOutput {
    let mut merged = input.fragments.clone();
    let shape = merged.shape();
    loop {
        let labeling = label_components(&merged, input.connectivity);
        let comps = &labeling.components;
        if comps.len() <= 1 {
            break;
        }
        let mut best: Option<(i64, usize, usize, Point, Point)> = None;
        for i in 0..comps.len() {
            let index = SpatialIndex::new(&comps[i].points, DEFAULT_CELL);
            for j in i + 1..comps.len() {
                let gap = comps[i].bbox.gap_sq(&comps[j].bbox);
                if best.is_some_and(|b| gap > b.0) {
                    continue;
                }
                let cp = closest_pair_indexed(&comps[j].points, &index).expect("components are non-empty");
                let (pa, pb) = (comps[i].points[cp.b], comps[j].points[cp.a]);
                if best.is_none_or(|b| (cp.dist_sq, i, j) < (b.0, b.1, b.2)) {
                    best = Some((cp.dist_sq, i, j, pa, pb));
                }
            }
        }
        let (_, i, j, pa, pb) = best.expect("at least two components");
        let target = (j + 1) as u32;
        let path = minimal_path(
            shape,
            merged.ndim(),
            &comps[i].points,
            |p| labeling.label_at(p) == target,
            |p| darkness(input.image.get(p)),
            (pa, pb),
        )
        .expect("the box is connected");
        for p in path {
            merged.set(p, true);
        }
    }
    MergeOutput {
        merged,
        bbox: input.bbox,
        provenance: Provenance::Geometric,
        probabilities: None,
    }
}

/// Terms of the merging objective on one crop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CmmLoss {
    pub total: f64,
    pub ce: f64,
    pub polyline: f64,
    pub connectivity: f64,
}

/// Symmetric mean nearest-point distance between two foreground sets.
pub fn polyline_distance(s: &[[i32; 3]], q: &[[i32; 3]]) -> f64 {
    let one_way = |from: &[[i32; 3]], to: &[[i32; 3]]| {
        let index = SpatialIndex::new(to, DEFAULT_CELL);
        from.iter()
            .map(|&p| (index.nearest(p).expect("non-empty").0 as f64).sqrt())
            .sum::<f64>()
            / from.len() as f64
    };
    one_way(q, s) + one_way(s, q)
}

/// `1 - 1/C` for `C` connected components.
pub fn connectivity_loss(components: usize) -> f64 {
    1.0 - 1.0 / components as f64
}

/// Cross-entropy on probabilities, plus polyline and connectivity terms of the
/// thresholded prediction.
pub fn cmm_loss(probabilities: &[f64], gt: &BinaryMask, connectivity: Connectivity) -> Result<CmmLoss, CmmError> {
    if probabilities.len() != gt.len() {
        return Err(CmmError::ProbabilityCount {
            expected: gt.len(),
            found: probabilities.len(),
        });
    }
    let q = gt.points();
    if q.is_empty() {
        return Err(CmmError::EmptyGtForeground);
    }
    let mut pred = BinaryMask::zeros(gt.dims())?;
    let mut ce = 0.0;
    for (i, &p) in probabilities.iter().enumerate() {
        let pc = p.clamp(crate::autodiff::PROB_EPS, 1.0 - crate::autodiff::PROB_EPS);
        ce -= if gt.get_index(i) { pc.ln() } else { (1.0 - pc).ln() };
        if p >= MERGE_THRESHOLD {
            pred.set_index(i, true);
        }
    }
    ce /= probabilities.len() as f64;
    let s = pred.points();
    if s.is_empty() {
        return Err(CmmError::EmptyPrediction);
    }
    let polyline = polyline_distance(&s, &q);
    let conn = connectivity_loss(count_components(&pred, connectivity));
    Ok(CmmLoss {
        total: ce + polyline + conn,
        ce,
        polyline,
        connectivity: conn,
    })
}

/// Source of keep/prune decisions for relationship-graph edges.
#[derive(Debug, Clone, Copy)]
pub enum EdgeJudge<'a> {
    Model {
        model: &'a GermModel,
        threshold: f64,
    },
    /// Reads labels derived from the ground-truth patch.
    Oracle(&'a BinaryMask),
    KeepAll,
}

#[derive(Debug, Clone, Copy)]
pub enum Merger<'a> {
    Geometric,
    Learned(&'a MergerModel),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchRehab {
    pub mask: BinaryMask,
    /// Per-voxel foreground probability; hard 0/1 outside learned merges.
    pub probabilities: Vec<f64>,
    pub clusters: usize,
}

/// Cluster set of a labeled patch under the given judge.
pub fn cluster_patch(
    labeling: &ComponentLabeling,
    patch: &BinaryMask,
    judge: &EdgeJudge,
    ccm: &CcmConfig,
) -> Result<(CurvilinearGraph, ClusterSet), CmmError> {
    let mut graph = build_graph(labeling, patch, ccm)?;
    let keep = match *judge {
        EdgeJudge::Model { model, threshold } => {
            classify_edges(&mut graph, model)?;
            prune_edges(&graph, threshold)?
        }
        EdgeJudge::Oracle(gt) => {
            derive_edge_labels(&mut graph, patch, gt, ccm.connectivity)?;
            graph.edges.iter().map(|e| e.label == Some(true)).collect()
        }
        EdgeJudge::KeepAll => vec![true; graph.edges.len()],
    };
    let clusters = separate_clusters(&graph, &keep);
    Ok((graph, clusters))
}

/// Clusters the patch's fragments and merges every multi-fragment cluster in place.
pub fn rehabilitate_patch(
    patch: &BinaryMask,
    image: Option<&GrayImage>,
    judge: &EdgeJudge,
    merger: &Merger,
    ccm: &CcmConfig,
) -> Result<PatchRehab, CmmError> {
    let hard = |m: &BinaryMask| (0..m.len()).map(|i| m.get_index(i) as u8 as f64).collect::<Vec<_>>();
    let labeling = label_components(patch, ccm.connectivity);
    if labeling.components.len() <= 1 {
        return Ok(PatchRehab {
            mask: patch.clone(),
            probabilities: hard(patch),
            clusters: labeling.components.len(),
        });
    }
    let (_, clusters) = cluster_patch(&labeling, patch, judge, ccm)?;
    let mut outputs = Vec::new();
    for (ci, members) in clusters.clusters.iter().enumerate() {
        if members.len() < 2 {
            continue;
        }
        let input = extract_cluster_rois(ci, members, &labeling, patch, image)?;
        outputs.push(match merger {
            Merger::Geometric => geometric_merge(&input),
            Merger::Learned(model) => model.merge(&input)?,
        });
    }
    let mut mask = patch.clone();
    let mut probabilities = hard(patch);
    for out in &outputs {
        mask.paste_or(&out.merged, out.bbox.min);
        for i in 0..out.merged.len() {
            let local = out.merged.point(i);
            let g = mask.index([
                local[0] + out.bbox.min[0],
                local[1] + out.bbox.min[1],
                local[2] + out.bbox.min[2],
            ]);
            let p = match &out.probabilities {
                Some(probs) => probs[i],
                None => out.merged.get_index(i) as u8 as f64,
            };
            probabilities[g] = probabilities[g].max(p);
        }
    }
    Ok(PatchRehab {
        mask,
        probabilities,
        clusters: clusters.len(),
    })
}
