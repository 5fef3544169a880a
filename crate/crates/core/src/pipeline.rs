//! Whole-mask rehabilitation: tile, rehabilitate each patch, recombine.

use crate::cmm::{rehabilitate_patch, CmmError, EdgeJudge, Merger, PatchRehab};
use crate::germ::{derive_edge_labels, GermModel};
use crate::graph::{build_graph, CcmConfig, CurvilinearGraph};
use crate::raster::{label_components, recombine, tile_patches, BinaryMask, GrayImage, PatchLayout, RasterError};
use log::debug;
use rayon::prelude::*;

/// Edge decisions over a whole mask.
#[derive(Debug, Clone, Copy)]
pub enum Judge<'a> {
    Model {
        model: &'a GermModel,
        threshold: f64,
    },
    /// Labels from the clean mask, read patch by patch.
    Oracle(&'a BinaryMask),
    KeepAll,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rehab {
    pub mask: BinaryMask,
    /// Per-voxel foreground probability in raster order.
    pub probabilities: Vec<f64>,
}

/// Writes per-patch values back to parent raster order, dropping padding.
fn recombine_values(layout: &PatchLayout, patches: &[Vec<f64>]) -> Vec<f64> {
    let [d, h, w] = layout.original;
    let [wz, wy, wx] = layout.window;
    let mut out = vec![0.0; d * h * w];
    for (values, o) in patches.iter().zip(&layout.origins) {
        for z in 0..wz.min(d.saturating_sub(o[0])) {
            for y in 0..wy.min(h.saturating_sub(o[1])) {
                for x in 0..wx.min(w.saturating_sub(o[2])) {
                    out[((o[0] + z) * h + o[1] + y) * w + o[2] + x] = values[(z * wy + y) * wx + x];
                }
            }
        }
    }
    out
}

/// Rehabilitates `mask` patch by patch on a pool of `threads` workers.
/// The result does not depend on the thread count.
pub fn rehabilitate(
    mask: &BinaryMask,
    image: Option<&GrayImage>,
    judge: Judge,
    merger: Merger,
    ccm: &CcmConfig,
    threads: usize,
) -> Result<Rehab, CmmError> {
    ccm.validate()?;
    if let Some(img) = image {
        if img.dims() != mask.dims() {
            return Err(RasterError::DimsMismatch(mask.dims().to_vec(), img.dims().to_vec()).into());
        }
    }
    if let Judge::Oracle(gt) = judge {
        mask.same_dims(gt)?;
    }
    let (layout, patches) = tile_patches(mask);
    let images = image.map(|img| layout.extract_gray(img));
    let gts = match judge {
        Judge::Oracle(gt) => Some(layout.extract(gt)),
        _ => None,
    };
    let run = |i: usize| -> Result<PatchRehab, CmmError> {
        let patch_judge = match judge {
            Judge::Model { model, threshold } => EdgeJudge::Model { model, threshold },
            Judge::Oracle(_) => EdgeJudge::Oracle(&gts.as_ref().expect("oracle patches")[i]),
            Judge::KeepAll => EdgeJudge::KeepAll,
        };
        let img = images.as_ref().map(|v| &v[i]);
        rehabilitate_patch(&patches[i], img, &patch_judge, &merger, ccm)
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .expect("thread pool");
    let results: Vec<PatchRehab> =
        pool.install(|| (0..patches.len()).into_par_iter().map(run).collect::<Result<_, _>>())?;
    debug!(
        "rehabilitated {} patches, {} clusters",
        results.len(),
        results.iter().map(|r| r.clusters).sum::<usize>()
    );
    let masks: Vec<BinaryMask> = results.iter().map(|r| r.mask.clone()).collect();
    let probs: Vec<Vec<f64>> = results.into_iter().map(|r| r.probabilities).collect();
    Ok(Rehab {
        mask: recombine(&layout, &masks)?,
        probabilities: recombine_values(&layout, &probs),
    })
}

/// Labeled relationship graphs of every patch of `ruptured` that has at least
/// one candidate edge, in patch order.
pub fn labeled_graphs(
    ruptured: &BinaryMask,
    clean: &BinaryMask,
    ccm: &CcmConfig,
) -> Result<Vec<CurvilinearGraph>, CmmError> {
    ruptured.same_dims(clean)?;
    let (layout, patches) = tile_patches(ruptured);
    let gts = layout.extract(clean);
    let mut graphs = Vec::new();
    for (patch, gt) in patches.iter().zip(&gts) {
        let labeling = label_components(patch, ccm.connectivity);
        if labeling.components.len() < 2 {
            continue;
        }
        let mut graph = build_graph(&labeling, patch, ccm)?;
        if graph.edges.is_empty() {
            continue;
        }
        derive_edge_labels(&mut graph, patch, gt, ccm.connectivity)?;
        graphs.push(graph);
    }
    Ok(graphs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::Point;

    #[test]
    fn values_follow_mask_layout() {
        let pts: Vec<Point> = [[0, 0, 0], [0, 5, 9], [0, 10, 10]].to_vec();
        let m = BinaryMask::from_points(&[11, 11], &pts).unwrap();
        let r = rehabilitate(&m, None, Judge::KeepAll, Merger::Geometric, &CcmConfig::default(), 2).unwrap();
        for i in 0..m.len() {
            assert_eq!(r.probabilities[i] >= 0.5, r.mask.get_index(i));
        }
        assert!(m.is_subset_of(&r.mask));
    }

    #[test]
    fn empty_mask_stays_empty() {
        let m = BinaryMask::new_2d(32, 32);
        let r = rehabilitate(&m, None, Judge::KeepAll, Merger::Geometric, &CcmConfig::default(), 1).unwrap();
        assert_eq!(r.mask, m);
    }
}
