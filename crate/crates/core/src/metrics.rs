//! IoU, grounding recall@1, average precision and mAP.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::geometry::{BoxPx, Detection};

/// Intersection over union under the half-open box convention.
pub fn iou(a: &BoxPx, b: &BoxPx) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    Ok(iou_unchecked(a, b))
}

pub(crate) fn iou_unchecked(a: &BoxPx, b: &BoxPx) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// How several ground-truth boxes of one phrase are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GtMerge {
    /// Compare against the box enclosing all of them.
    #[default]
    Union,
    /// A hit on any single box counts.
    AnyBox,
}

pub const GROUNDING_IOU: f64 = 0.5;

/// Fraction of phrases whose predicted box reaches IoU >= 0.5 with the ground truth.
pub fn recall_at_1(preds: &[BoxPx], gts: &[Vec<BoxPx>], merge: GtMerge) -> Result<f64> {
    if preds.len() != gts.len() {
        return Err(Error::Data(format!(
            "{} predictions for {} phrases",
            preds.len(),
            gts.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Data("no phrases to score".into()));
    }
    let mut hits = 0usize;
    for (k, (pred, gt)) in preds.iter().zip(gts).enumerate() {
        let Some(first) = gt.first() else {
            return Err(Error::Data(format!("phrase {k} has no ground-truth box")));
        };
        let hit = match merge {
            GtMerge::Union => {
                let hull = gt.iter().fold(*first, |acc, b| acc.union_hull(b));
                iou(pred, &hull)? >= GROUNDING_IOU
            }
            GtMerge::AnyBox => {
                let mut any = false;
                for b in gt {
                    any |= iou(pred, b)? >= GROUNDING_IOU;
                }
                any
            }
        };
        hits += usize::from(hit);
    }
    Ok(hits as f64 / preds.len() as f64)
}

/// Ground-truth boxes per image, labeled by category.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundTruthSet {
    pub images: BTreeMap<u64, Vec<(u64, BoxPx)>>,
}

impl GroundTruthSet {
    pub fn add(&mut self, image_id: u64, category_id: u64, bbox: BoxPx) {
        self.images.entry(image_id).or_default().push((category_id, bbox));
    }

    pub fn is_empty(&self) -> bool {
        self.images.values().all(Vec::is_empty)
    }

    pub fn categories(&self) -> BTreeSet<u64> {
        self.images
            .values()
            .flat_map(|v| v.iter().map(|(c, _)| *c))
            .collect()
    }

    pub fn count(&self, category_id: u64) -> usize {
        self.images
            .values()
            .flat_map(|v| v.iter())
            .filter(|(c, _)| *c == category_id)
            .count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    /// `(recall, precision)` after each ranked detection.
    pub points: Vec<(f64, f64)>,
    pub ap: f64,
}

/// Ranking order shared by AP and NMS: confidence descending, then `x_min` ascending.
/// Remaining keys only make the order total.
pub fn rank_order(a: &Detection, b: &Detection) -> Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then(a.bbox.x_min.total_cmp(&b.bbox.x_min))
        .then(a.image_id.cmp(&b.image_id))
        .then(a.bbox.y_min.total_cmp(&b.bbox.y_min))
        .then(a.bbox.x_max.total_cmp(&b.bbox.x_max))
        .then(a.bbox.y_max.total_cmp(&b.bbox.y_max))
}

/// Greedy matching in rank order; returns the TP flag of each ranked detection.
pub(crate) fn match_ranked(ranked: &[&Detection], gt: &GroundTruthSet, class_id: u64, iou_thresh: f64) -> Vec<bool> {
    let mut taken: BTreeMap<u64, Vec<bool>> = BTreeMap::new();
    ranked
        .iter()
        .map(|d| {
            let Some(boxes) = gt.images.get(&d.image_id) else {
                return false;
            };
            let used = taken
                .entry(d.image_id)
                .or_insert_with(|| vec![false; boxes.len()]);
            let mut best: Option<(usize, f64)> = None;
            for (j, (c, b)) in boxes.iter().enumerate() {
                if *c != class_id || used[j] {
                    continue;
                }
                let v = iou_unchecked(&d.bbox, b);
                if v >= iou_thresh && best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((j, v));
                }
            }
            match best {
                Some((j, _)) => {
                    used[j] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// All-point interpolated AP for one class. `None` when the class has no ground truth.
pub fn average_precision(dets: &[Detection], gt: &GroundTruthSet, class_id: u64, iou_thresh: f64) -> Option<PrCurve> {
    let n_gt = gt.count(class_id);
    if n_gt == 0 {
        return None;
    }
    let mut ranked: Vec<&Detection> = dets.iter().filter(|d| d.category_id == class_id).collect();
    ranked.sort_by(|a, b| rank_order(a, b));
    let tp = match_ranked(&ranked, gt, class_id, iou_thresh);

    let mut points = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &is_tp) in tp.iter().enumerate() {
        hits += usize::from(is_tp);
        points.push((hits as f64 / n_gt as f64, hits as f64 / (k + 1) as f64));
    }

    // precision envelope, right to left
    let mut envelope = vec![0.0; points.len()];
    let mut running = 0.0f64;
    for k in (0..points.len()).rev() {
        running = running.max(points[k].1);
        envelope[k] = running;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (k, &(r, _)) in points.iter().enumerate() {
        if r > prev_recall {
            ap += (r - prev_recall) * envelope[k];
            prev_recall = r;
        }
    }
    Some(PrCurve { points, ap })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapAt {
    pub iou: f64,
    pub map: f64,
    pub per_class: BTreeMap<u64, f64>,
    /// Classes with detections but no ground truth, left out of the mean.
    pub excluded: usize,
}

/// Mean AP over every class present in the ground truth.
pub fn map_at(dets: &[Detection], gt: &GroundTruthSet, iou_thresh: f64) -> Result<MapAt> {
    let classes = gt.categories();
    if classes.is_empty() {
        return Err(Error::Data("ground truth is empty".into()));
    }
    let per_class: BTreeMap<u64, f64> = classes
        .iter()
        .map(|&c| (c, average_precision(dets, gt, c, iou_thresh).map_or(0.0, |p| p.ap)))
        .collect();
    let excluded = dets
        .iter()
        .map(|d| d.category_id)
        .filter(|c| !classes.contains(c))
        .collect::<BTreeSet<_>>()
        .len();
    let map = per_class.values().sum::<f64>() / per_class.len() as f64;
    Ok(MapAt {
        iou: iou_thresh,
        map,
        per_class,
        excluded,
    })
}

/// The ten IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> [f64; 10] {
    std::array::from_fn(|k| (50 + 5 * k) as f64 / 100.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapRange {
    pub map50: f64,
    pub map5095: f64,
    pub classes_evaluated: usize,
    pub classes_excluded: usize,
}

pub fn map_range(dets: &[Detection], gt: &GroundTruthSet) -> Result<MapRange> {
    let per_thresh = coco_thresholds()
        .iter()
        .map(|&t| map_at(dets, gt, t))
        .collect::<Result<Vec<_>>>()?;
    let first = &per_thresh[0];
    Ok(MapRange {
        map50: first.map,
        map5095: per_thresh.iter().map(|m| m.map).sum::<f64>() / per_thresh.len() as f64,
        classes_evaluated: first.per_class.len(),
        classes_excluded: first.excluded,
    })
}
