//! Evaluation: segmentation scores (VOI, RI, SC), depth-gap plane recall,
//! the geometric tolerance protocol, and two-view plane AP.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crf::PlaneSegmentation;
use crate::geom::{angle_between_deg, plane_from_inliers, CameraIntrinsics, PlaneModel, Vec3};
use crate::raster::DepthMap;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("raster dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("no pixel to evaluate")]
    NoPixels,
}

/// Ground truth of one view. Planes and depth are metric, camera frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGroundTruth {
    pub intrinsics: CameraIntrinsics,
    /// Instance ids, 0 = non-planar, planes `1..=K` dense.
    pub labels: Vec<u32>,
    pub planes: Vec<PlaneModel>,
    pub depth: DepthMap,
}

impl SceneGroundTruth {
    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    pub fn as_segmentation(&self) -> PlaneSegmentation {
        PlaneSegmentation {
            width: self.width(),
            height: self.height(),
            labels: self.labels.clone(),
            planes: self.planes.clone(),
        }
    }

    fn check(&self, pred: &PlaneSegmentation) -> Result<(), MetricsError> {
        if pred.width != self.width() || pred.height != self.height() {
            return Err(MetricsError::DimensionMismatch(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.width,
                pred.height,
                self.width(),
                self.height()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentationScores {
    pub voi: f64,
    pub ri: f64,
    pub sc: f64,
}

/// Sparse contingency table between two labelings of the same pixels.
struct Contingency {
    n: f64,
    joint: BTreeMap<(u32, u32), f64>,
    pred: BTreeMap<u32, f64>,
    gt: BTreeMap<u32, f64>,
}

impl Contingency {
    fn new(pairs: impl Iterator<Item = (u32, u32)>) -> Self {
        let mut joint = BTreeMap::new();
        let mut pred = BTreeMap::new();
        let mut gt = BTreeMap::new();
        let mut n = 0.0;
        for (p, g) in pairs {
            *joint.entry((p, g)).or_insert(0.0) += 1.0;
            *pred.entry(p).or_insert(0.0) += 1.0;
            *gt.entry(g).or_insert(0.0) += 1.0;
            n += 1.0;
        }
        Self { n, joint, pred, gt }
    }
}

#[inline]
fn pairs(c: f64) -> f64 {
    c * (c - 1.0) / 2.0
}

/// Scores over the pixels that are planar in `gt`. Predicted label 0 is one
/// cluster for VOI and RI; SC only takes the best overlap among predicted
/// planes.
pub fn segmentation_scores(
    pred: &PlaneSegmentation,
    gt: &SceneGroundTruth,
) -> Result<SegmentationScores, MetricsError> {
    gt.check(pred)?;
    segmentation_scores_raw(&pred.labels, &gt.labels)
}

/// [`segmentation_scores`] on bare label rasters.
pub fn segmentation_scores_raw(
    pred: &[u32],
    gt: &[u32],
) -> Result<SegmentationScores, MetricsError> {
    if pred.len() != gt.len() {
        return Err(MetricsError::DimensionMismatch(format!(
            "{} vs {} pixels",
            pred.len(),
            gt.len()
        )));
    }
    let table = Contingency::new(
        pred.iter()
            .zip(gt)
            .filter(|(_, &g)| g != 0)
            .map(|(&p, &g)| (p, g)),
    );
    if table.n == 0.0 {
        return Err(MetricsError::NoPixels);
    }
    let n = table.n;
    // H(P|G) + H(G|P); identical labelings give exactly 0.
    let voi = table
        .joint
        .iter()
        .map(|(&(p, g), &c)| -(c / n) * ((c / table.gt[&g]).ln() + (c / table.pred[&p]).ln()))
        .sum::<f64>()
        .max(0.0);

    let total = pairs(n);
    let ri = if total == 0.0 {
        1.0
    } else {
        let same_both: f64 = table.joint.values().map(|&c| pairs(c)).sum();
        let same_pred: f64 = table.pred.values().map(|&c| pairs(c)).sum();
        let same_gt: f64 = table.gt.values().map(|&c| pairs(c)).sum();
        (total + 2.0 * same_both - same_pred - same_gt) / total
    };

    let mut sc = 0.0;
    for (&g, &size) in &table.gt {
        let mut best = 0.0f64;
        for (&(p, gg), &inter) in &table.joint {
            if gg != g || p == 0 {
                continue;
            }
            let union = size + table.pred[&p] - inter;
            best = best.max(inter / union);
        }
        sc += size / n * best;
    }
    Ok(SegmentationScores { voi, ri, sc })
}

/// Median of `gt / pred` over pixels valid in both with `gt <= cap`; returns
/// the scale and the scaled prediction. Missing predictions (zero or NaN)
/// are skipped.
pub fn median_scale_align(
    pred_depth: &DepthMap,
    gt_depth: &DepthMap,
    cap: f64,
) -> Result<(f64, DepthMap), MetricsError> {
    if !pred_depth.same_shape(gt_depth.width(), gt_depth.height()) {
        return Err(MetricsError::DimensionMismatch("depth maps".into()));
    }
    let mut ratios: Vec<f64> = (0..gt_depth.len())
        .filter_map(|i| {
            let g = gt_depth.valid(i).filter(|&g| g <= cap)?;
            let p = pred_depth.valid(i)?;
            Some(g / p)
        })
        .collect();
    if ratios.is_empty() {
        return Err(MetricsError::NoPixels);
    }
    ratios.sort_by(f64::total_cmp);
    let m = ratios.len();
    let scale = if m % 2 == 1 {
        ratios[m / 2]
    } else {
        0.5 * (ratios[m / 2 - 1] + ratios[m / 2])
    };
    Ok((scale, pred_depth.scaled(scale)))
}

/// Depth of each labeled pixel on its plane; 0 elsewhere or where the ray
/// does not meet the plane in front of the camera.
pub fn planar_depth(seg: &PlaneSegmentation, intrinsics: &CameraIntrinsics) -> DepthMap {
    let values = seg
        .labels
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            if l == 0 {
                return 0.0;
            }
            let ray = intrinsics.ray((i % seg.width) as f64, (i / seg.width) as f64);
            seg.planes[l as usize - 1].depth_along(&ray).unwrap_or(0.0)
        })
        .collect();
    DepthMap::new(seg.width, seg.height, values).expect("raster sized from segmentation")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecallParams {
    pub iou_threshold: f64,
    /// Ground-truth depths above this are ignored for scale alignment.
    pub depth_cap: f64,
    /// Median-scale align the planar depth before measuring gaps.
    pub align: bool,
}

impl Default for RecallParams {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            depth_cap: 10.0,
            align: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallCurve {
    pub thresholds: Vec<f64>,
    pub recall: Vec<f64>,
}

/// Instance pairs `(pred_id, gt_id, iou)` with IoU above `threshold`,
/// matched greedily one-to-one by descending IoU.
pub fn match_instances(pred: &[u32], gt: &[u32], threshold: f64) -> Vec<(u32, u32, f64)> {
    match_by_iou(pred, gt, threshold)
        .into_iter()
        .map(|(p, g, iou, _)| (p, g, iou))
        .collect()
}

/// Masks of two segmentations with IoU above `threshold`, matched greedily
/// one-to-one by descending IoU. Returns `(pred_id, gt_id, iou,
/// intersection pixels)`.
fn match_by_iou(pred: &[u32], gt: &[u32], threshold: f64) -> Vec<(u32, u32, f64, Vec<usize>)> {
    let mut inter: HashMap<(u32, u32), Vec<usize>> = HashMap::new();
    let mut pred_size: HashMap<u32, usize> = HashMap::new();
    let mut gt_size: HashMap<u32, usize> = HashMap::new();
    for (i, (&p, &g)) in pred.iter().zip(gt).enumerate() {
        if p != 0 {
            *pred_size.entry(p).or_default() += 1;
        }
        if g != 0 {
            *gt_size.entry(g).or_default() += 1;
        }
        if p != 0 && g != 0 {
            inter.entry((p, g)).or_default().push(i);
        }
    }
    let mut cands: Vec<(u32, u32, f64, Vec<usize>)> = inter
        .into_iter()
        .map(|((p, g), px)| {
            let union = pred_size[&p] + gt_size[&g] - px.len();
            (p, g, px.len() as f64 / union as f64, px)
        })
        .filter(|c| c.2 > threshold)
        .collect();
    cands.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    let mut used_p = BTreeSet::new();
    let mut used_g = BTreeSet::new();
    cands
        .into_iter()
        .filter(|c| {
            if used_p.contains(&c.0) || used_g.contains(&c.1) {
                return false;
            }
            used_p.insert(c.0);
            used_g.insert(c.1);
            true
        })
        .collect()
}

/// Fraction of ground-truth planes recovered at each depth-gap threshold
/// (metres).
pub fn plane_recall(
    pred: &PlaneSegmentation,
    gt: &SceneGroundTruth,
    thresholds: &[f64],
    params: &RecallParams,
) -> Result<RecallCurve, MetricsError> {
    gt.check(pred)?;
    let k_gt = gt
        .labels
        .iter()
        .filter(|&&l| l != 0)
        .collect::<BTreeSet<_>>()
        .len();
    let mut depth = planar_depth(pred, &gt.intrinsics);
    if params.align && pred.labels.iter().any(|&l| l != 0) {
        if let Ok((_, aligned)) = median_scale_align(&depth, &gt.depth, params.depth_cap) {
            depth = aligned;
        }
    }
    let matches = match_by_iou(&pred.labels, &gt.labels, params.iou_threshold);
    let gaps: Vec<f64> = matches
        .iter()
        .filter_map(|(_, _, _, px)| {
            let diffs: Vec<f64> = px
                .iter()
                .filter_map(|&i| Some((depth.valid(i)? - gt.depth.valid(i)?).abs()))
                .collect();
            (!diffs.is_empty()).then(|| diffs.iter().sum::<f64>() / diffs.len() as f64)
        })
        .collect();
    let recall = thresholds
        .iter()
        .map(|&t| {
            if k_gt == 0 {
                0.0
            } else {
                gaps.iter().filter(|&&g| g <= t).count() as f64 / k_gt as f64
            }
        })
        .collect();
    Ok(RecallCurve {
        thresholds: thresholds.to_vec(),
        recall,
    })
}

/// Share of a predicted mask that may lie on unlabeled ground truth before
/// the instance is examined geometrically.
pub const TOLERANCE_NONPLANAR_FRACTION: f64 = 0.5;
/// Mean depth gap (metres) under which such an instance counts as a real
/// plane.
pub const TOLERANCE_GAP: f64 = 0.2;

/// Predicted ids that sit mostly on unlabeled ground truth yet describe a
/// flat surface there. These are not counted as false positives.
pub fn geometric_tolerance_filter(
    pred: &PlaneSegmentation,
    gt: &SceneGroundTruth,
) -> Result<BTreeSet<u32>, MetricsError> {
    gt.check(pred)?;
    let k = &gt.intrinsics;
    let mut pardoned = BTreeSet::new();
    for id in 1..=pred.planes.len() as u32 {
        let pixels: Vec<usize> = (0..pred.labels.len())
            .filter(|&i| pred.labels[i] == id)
            .collect();
        if pixels.is_empty() {
            continue;
        }
        let off = pixels.iter().filter(|&&i| gt.labels[i] == 0).count();
        if off as f64 / pixels.len() as f64 <= TOLERANCE_NONPLANAR_FRACTION {
            continue;
        }
        let lifted: Vec<(Vec3, f64)> = pixels
            .iter()
            .filter_map(|&i| {
                let z = gt.depth.valid(i)?;
                let ray = k.ray((i % pred.width) as f64, (i / pred.width) as f64);
                Some((ray, z))
            })
            .collect();
        let points: Vec<Vec3> = lifted.iter().map(|(r, z)| r * *z).collect();
        let Ok(plane) = plane_from_inliers(points.iter()) else {
            continue;
        };
        let mut gap = 0.0;
        let mut count = 0usize;
        for (ray, z) in &lifted {
            match plane.depth_along(ray) {
                Some(zp) => gap += (zp - z).abs(),
                None => gap += f64::INFINITY,
            }
            count += 1;
        }
        if count > 0 && gap / (count as f64) < TOLERANCE_GAP {
            pardoned.insert(id);
        }
    }
    Ok(pardoned)
}

/// A world-frame plane with one mask per view.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedPlane {
    pub normal: Vec3,
    pub offset: f64,
    pub masks: Vec<Vec<bool>>,
    /// Ranking score; ignored for ground truth.
    pub score: f64,
    /// Excluded from false-positive accounting.
    pub pardoned: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ApParams {
    pub offset_thresh: f64,
    pub normal_thresh: f64,
    pub use_offset: bool,
    pub use_normal: bool,
    pub iou_threshold: f64,
}

impl Default for ApParams {
    fn default() -> Self {
        Self {
            offset_thresh: 1.0,
            normal_thresh: 30.0,
            use_offset: true,
            use_normal: true,
            iou_threshold: 0.5,
        }
    }
}

fn multi_view_iou(a: &MaskedPlane, b: &MaskedPlane) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (ma, mb) in a.masks.iter().zip(&b.masks) {
        for (&x, &y) in ma.iter().zip(mb) {
            inter += (x && y) as usize;
            union += (x || y) as usize;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Average precision of score-ranked predictions (all-point interpolated).
pub fn two_view_plane_ap(pred: &[MaskedPlane], gt: &[MaskedPlane], params: &ApParams) -> f64 {
    if gt.is_empty() {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..pred.len()).filter(|&i| !pred[i].pardoned).collect();
    order.sort_by(|&a, &b| pred[b].score.total_cmp(&pred[a].score).then(a.cmp(&b)));
    let mut taken = vec![false; gt.len()];
    let mut tp_flags = Vec::with_capacity(order.len());
    for &i in &order {
        let p = &pred[i];
        let candidate = gt
            .iter()
            .enumerate()
            .map(|(g, gp)| (g, multi_view_iou(p, gp)))
            .filter(|&(_, iou)| iou > params.iou_threshold)
            .max_by(|a, b| a.1.total_cmp(&b.1));
        let tp = match candidate {
            Some((g, _)) if !taken[g] => {
                let gp = &gt[g];
                let offset_ok =
                    !params.use_offset || (p.offset - gp.offset).abs() <= params.offset_thresh;
                let normal_ok = !params.use_normal
                    || angle_between_deg(&p.normal, &gp.normal) <= params.normal_thresh;
                if offset_ok && normal_ok {
                    taken[g] = true;
                    true
                } else {
                    false
                }
            }
            _ => false,
        };
        tp_flags.push(tp);
    }
    average_precision(&tp_flags, gt.len())
}

/// All-point interpolated AP for ranked true/false positive flags.
pub fn average_precision(tp_flags: &[bool], positives: usize) -> f64 {
    if positives == 0 || tp_flags.is_empty() {
        return 0.0;
    }
    let mut tp = 0.0;
    let mut recall = Vec::with_capacity(tp_flags.len());
    let mut precision = Vec::with_capacity(tp_flags.len());
    for (k, &f) in tp_flags.iter().enumerate() {
        if f {
            tp += 1.0;
        }
        recall.push(tp / positives as f64);
        precision.push(tp / (k + 1) as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev_r) * p;
        prev_r = *r;
    }
    ap
}
