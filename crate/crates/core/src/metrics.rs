//! Overlap, morphology and calibration metrics.

use crate::geometry::{dist_sq, polyline_length, skeletonize};
use crate::graph::PATH_STRIDE;
use crate::raster::{BinaryMask, RasterError};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("mask has no foreground")]
    EmptyMask,
    #[error("mask extent {0} is below the box-counting minimum of {MIN_FD_EXTENT}")]
    TooSmall(usize),
    #[error("skeleton has no open branch with a positive chord")]
    NoValidPath,
    #[error("no samples")]
    EmptyInput,
    #[error("confidence {0} is outside [0, 1]")]
    InvalidConfidence(f64),
    #[error("{found} probabilities for {expected} voxels")]
    ProbabilityCount { expected: usize, found: usize },
}

/// Smallest per-axis extent accepted by [`fractal_dimension`].
pub const MIN_FD_EXTENT: usize = 64;
pub const ECE_BINS: usize = 15;
const REL_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Overlap {
    pub pa: f64,
    pub dice: f64,
    pub jaccard: f64,
}

pub fn overlap_metrics(pred: &BinaryMask, gt: &BinaryMask) -> Result<Overlap, MetricsError> {
    pred.same_dims(gt)?;
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for i in 0..pred.len() {
        match (pred.get_index(i), gt.get_index(i)) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    let total = pred.len() as f64;
    let wrong = (fp + fn_) as f64;
    let (dice, jaccard) = if tp + fp + fn_ == 0 {
        (1.0, 1.0)
    } else {
        (
            2.0 * tp as f64 / (2.0 * tp as f64 + wrong),
            tp as f64 / (tp as f64 + wrong),
        )
    };
    Ok(Overlap {
        pa: (total - wrong) / total,
        dice,
        jaccard,
    })
}

/// Number of junction clusters of the skeleton.
pub fn vbn(mask: &BinaryMask) -> usize {
    skeletonize(mask).junctions.len()
}

/// Box sizes used for a mask whose smallest in-plane extent is `min_extent`.
pub fn box_sizes(min_extent: usize) -> Vec<usize> {
    let m = (min_extent as f64).log2().floor() as i32 - 1;
    let mut sizes: Vec<usize> = (0..=m.max(0)).map(|e| 1usize << e).collect();
    if sizes.len() >= 6 {
        sizes.truncate(sizes.len() - 2);
    }
    sizes
}

/// Box-counting dimension: negative least-squares slope of `ln N(s)` against `ln s`.
pub fn fractal_dimension(mask: &BinaryMask) -> Result<f64, MetricsError> {
    if mask.count_ones() == 0 {
        return Err(MetricsError::EmptyMask);
    }
    let min_extent = *mask.dims().iter().min().expect("mask has dims");
    if min_extent < MIN_FD_EXTENT {
        return Err(MetricsError::TooSmall(min_extent));
    }
    let points = mask.points();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for s in box_sizes(min_extent) {
        let mut boxes: Vec<[i32; 3]> = points.iter().map(|p| p.map(|c| c / s as i32)).collect();
        boxes.sort_unstable();
        boxes.dedup();
        xs.push((s as f64).ln());
        ys.push((boxes.len() as f64).ln());
    }
    Ok(-least_squares_slope(&xs, &ys))
}

fn least_squares_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

/// Length-weighted mean of arc over chord across open skeleton branches.
pub fn tortuosity(mask: &BinaryMask) -> Result<f64, MetricsError> {
    let skel = skeletonize(mask);
    let mut num = 0.0;
    let mut den = 0.0;
    for p in skel.paths.iter().filter(|p| !p.closed) {
        let (a, b) = (p.voxels[0], p.voxels[p.voxels.len() - 1]);
        let chord = (dist_sq(a, b) as f64).sqrt();
        if chord == 0.0 {
            continue;
        }
        let arc = polyline_length(&p.voxels, PATH_STRIDE);
        num += arc * (arc / chord);
        den += arc;
    }
    if den == 0.0 {
        return Err(MetricsError::NoValidPath);
    }
    Ok(num / den)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Morphology {
    Vbn,
    Fd,
    Vt,
}

pub fn morphology_value(mask: &BinaryMask, metric: Morphology) -> Result<f64, MetricsError> {
    match metric {
        Morphology::Vbn => Ok(vbn(mask) as f64),
        Morphology::Fd => fractal_dimension(mask),
        Morphology::Vt => tortuosity(mask),
    }
}

/// `|M(pred) - M(gt)| / max(M(gt), 1e-9)`.
///
/// When the metric is undefined on exactly one side the error is 1; when it is
/// undefined on both sides the error is 0.
pub fn morphology_error(pred: &BinaryMask, gt: &BinaryMask, metric: Morphology) -> Result<f64, MetricsError> {
    pred.same_dims(gt)?;
    let undefined = |e: &MetricsError| {
        matches!(
            e,
            MetricsError::EmptyMask | MetricsError::TooSmall(_) | MetricsError::NoValidPath
        )
    };
    match (morphology_value(pred, metric), morphology_value(gt, metric)) {
        (Ok(p), Ok(g)) => Ok(relative_error(p, g)),
        (Err(a), Err(b)) if undefined(&a) && undefined(&b) => Ok(0.0),
        (Err(e), _) | (_, Err(e)) if undefined(&e) => Ok(1.0),
        (Err(e), _) | (_, Err(e)) => Err(e),
    }
}

pub fn relative_error(pred: f64, gt: f64) -> f64 {
    (pred - gt).abs() / gt.max(REL_EPS)
}

/// Expected calibration error over equal-width confidence bins; empty bins are skipped.
pub fn ece(confidences: &[f64], correct: &[bool], bins: usize) -> Result<f64, MetricsError> {
    if confidences.is_empty() || confidences.len() != correct.len() || bins == 0 {
        return Err(MetricsError::EmptyInput);
    }
    let mut count = vec![0usize; bins];
    let mut conf = vec![0.0; bins];
    let mut hits = vec![0usize; bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        if !(0.0..=1.0).contains(&c) {
            return Err(MetricsError::InvalidConfidence(c));
        }
        let b = ((c * bins as f64) as usize).min(bins - 1);
        count[b] += 1;
        conf[b] += c;
        hits[b] += ok as usize;
    }
    let n = confidences.len() as f64;
    Ok((0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let k = count[b] as f64;
            (k / n) * (hits[b] as f64 / k - conf[b] / k).abs()
        })
        .sum())
}

/// Calibration of per-voxel foreground probabilities: each voxel predicts
/// foreground iff `p >= 0.5` with confidence `max(p, 1 - p)`.
pub fn voxel_ece(probabilities: &[f64], gt: &BinaryMask) -> Result<f64, MetricsError> {
    if probabilities.len() != gt.len() {
        return Err(MetricsError::ProbabilityCount {
            expected: gt.len(),
            found: probabilities.len(),
        });
    }
    let conf: Vec<f64> = probabilities.iter().map(|&p| p.max(1.0 - p)).collect();
    let correct: Vec<bool> = probabilities
        .iter()
        .enumerate()
        .map(|(i, &p)| (p >= 0.5) == gt.get_index(i))
        .collect();
    ece(&conf, &correct, ECE_BINS)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub pa: f64,
    pub dice: f64,
    pub jaccard: f64,
    pub vbn_err: f64,
    pub fd_err: f64,
    pub vt_err: f64,
    pub ece: f64,
}

impl MetricReport {
    pub const COLUMNS: [&'static str; 7] = ["PA", "Dice", "Jaccard", "VBN_err", "FD_err", "VT_err", "ECE"];

    pub fn values(&self) -> [f64; 7] {
        [
            self.pa,
            self.dice,
            self.jaccard,
            self.vbn_err,
            self.fd_err,
            self.vt_err,
            self.ece,
        ]
    }

    pub fn mean(reports: &[MetricReport]) -> Option<MetricReport> {
        if reports.is_empty() {
            return None;
        }
        let n = reports.len() as f64;
        let mut acc = [0.0; 7];
        for r in reports {
            for (a, v) in acc.iter_mut().zip(r.values()) {
                *a += v / n;
            }
        }
        Some(MetricReport {
            pa: acc[0],
            dice: acc[1],
            jaccard: acc[2],
            vbn_err: acc[3],
            fd_err: acc[4],
            vt_err: acc[5],
            ece: acc[6],
        })
    }
}

/// All metrics of one prediction. Without probabilities the mask itself is the
/// confidence source (1 on foreground, 0 on background).
pub fn evaluate(
    pred: &BinaryMask,
    gt: &BinaryMask,
    probabilities: Option<&[f64]>,
) -> Result<MetricReport, MetricsError> {
    let o = overlap_metrics(pred, gt)?;
    let hard: Vec<f64>;
    let probs = match probabilities {
        Some(p) => p,
        None => {
            hard = (0..pred.len()).map(|i| pred.get_index(i) as u8 as f64).collect();
            &hard
        }
    };
    Ok(MetricReport {
        pa: o.pa,
        dice: o.dice,
        jaccard: o.jaccard,
        vbn_err: morphology_error(pred, gt, Morphology::Vbn)?,
        fd_err: morphology_error(pred, gt, Morphology::Fd)?,
        vt_err: morphology_error(pred, gt, Morphology::Vt)?,
        ece: voxel_ece(probs, gt)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::Point;

    fn mask(h: usize, w: usize, pts: &[Point]) -> BinaryMask {
        BinaryMask::from_points(&[h, w], pts).unwrap()
    }

    #[test]
    fn overlap_fixtures() {
        let a = mask(4, 4, &[[0, 0, 0], [0, 0, 1]]);
        let b = mask(4, 4, &[[0, 0, 1], [0, 0, 2]]);
        let o = overlap_metrics(&a, &b).unwrap();
        assert!((o.dice - 0.5).abs() < 1e-12);
        assert!((o.jaccard - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(
            overlap_metrics(&a, &a).unwrap(),
            Overlap {
                pa: 1.0,
                dice: 1.0,
                jaccard: 1.0
            }
        );
        let c = mask(4, 4, &[[0, 3, 2], [0, 3, 3]]);
        let o = overlap_metrics(&a, &c).unwrap();
        assert_eq!((o.dice, o.jaccard), (0.0, 0.0));
        let e = BinaryMask::new_2d(4, 4);
        assert_eq!(overlap_metrics(&e, &e).unwrap().dice, 1.0);
        assert!(overlap_metrics(&e, &BinaryMask::new_2d(4, 5)).is_err());
    }

    #[test]
    fn box_sizes_drop_saturated_scales() {
        assert_eq!(box_sizes(512), vec![1, 2, 4, 8, 16, 32, 64]);
        assert_eq!(box_sizes(128), vec![1, 2, 4, 8, 16]);
    }

    #[test]
    fn fd_errors() {
        assert_eq!(
            fractal_dimension(&BinaryMask::new_2d(64, 64)),
            Err(MetricsError::EmptyMask)
        );
        assert_eq!(
            fractal_dimension(&mask(32, 64, &[[0, 1, 1]])),
            Err(MetricsError::TooSmall(32))
        );
    }

    #[test]
    fn vt_of_straight_line_and_error_cases() {
        let pts: Vec<Point> = (3..60).map(|x| [0, 10, x]).collect();
        assert!((tortuosity(&mask(20, 64, &pts)).unwrap() - 1.0).abs() < 1e-6);
        assert_eq!(tortuosity(&mask(8, 8, &[[0, 2, 2]])), Err(MetricsError::NoValidPath));
    }

    #[test]
    fn morphology_error_formula() {
        assert_eq!(relative_error(5.0, 10.0), 0.5);
        let pts: Vec<Point> = (3..60).map(|x| [0, 10, x]).collect();
        let m = mask(64, 64, &pts);
        for metric in [Morphology::Vbn, Morphology::Fd, Morphology::Vt] {
            assert_eq!(morphology_error(&m, &m, metric).unwrap(), 0.0);
        }
        let empty = BinaryMask::new_2d(64, 64);
        assert_eq!(morphology_error(&empty, &m, Morphology::Fd).unwrap(), 1.0);
        assert_eq!(morphology_error(&empty, &empty, Morphology::Vt).unwrap(), 0.0);
    }

    #[test]
    fn ece_fixtures() {
        assert!(ece(&[1.0; 5], &[true, true, true, true, false], ECE_BINS).unwrap() - 0.2 < 1e-9);
        let v = ece(&[0.1, 0.1, 0.9, 0.9], &[false, false, true, true], ECE_BINS).unwrap();
        assert!((v - 0.1).abs() < 1e-12);
        let conf = [0.9; 10];
        let ok = [true, true, true, true, true, true, true, true, true, false];
        assert!(ece(&conf, &ok, ECE_BINS).unwrap() < 1e-12);
        assert_eq!(ece(&[], &[], ECE_BINS), Err(MetricsError::EmptyInput));
        assert_eq!(
            ece(&[1.5], &[true], ECE_BINS),
            Err(MetricsError::InvalidConfidence(1.5))
        );
    }

    #[test]
    fn hard_mask_ece_is_error_rate() {
        let gt = mask(4, 4, &[[0, 1, 1], [0, 1, 2]]);
        let pred = mask(4, 4, &[[0, 1, 1]]);
        let r = evaluate(&pred, &gt, None).unwrap();
        assert!((r.ece - (1.0 - r.pa)).abs() < 1e-12);
    }
}
