//! Confidence gating and per-class greedy NMS for pseudo-label mining.

use std::collections::BTreeMap;

use crate::geometry::Detection;
use crate::metrics::{iou_unchecked, rank_order};

/// Output order for detection files: image, category, then rank.
pub fn sort_detections(dets: &mut [Detection]) {
    dets.sort_by(|a, b| {
        a.image_id
            .cmp(&b.image_id)
            .then(a.category_id.cmp(&b.category_id))
            .then_with(|| rank_order(a, b))
    });
}

/// Drop detections below `conf_thresh`, then within each (image, category) keep the
/// highest-ranked box and suppress any later box overlapping a kept one by IoU > `iou_thresh`.
pub fn nms_pseudo_labels(dets: &[Detection], conf_thresh: f64, iou_thresh: f64) -> Vec<Detection> {
    let mut groups: BTreeMap<(u64, u64), Vec<&Detection>> = BTreeMap::new();
    for d in dets.iter().filter(|d| d.confidence >= conf_thresh) {
        groups.entry((d.image_id, d.category_id)).or_default().push(d);
    }
    let mut out = Vec::new();
    for (_, mut group) in groups {
        group.sort_by(|a, b| rank_order(a, b));
        let mut suppressed = vec![false; group.len()];
        for i in 0..group.len() {
            if suppressed[i] {
                continue;
            }
            out.push(group[i].clone());
            for j in i + 1..group.len() {
                if !suppressed[j] && iou_unchecked(&group[i].bbox, &group[j].bbox) > iou_thresh {
                    suppressed[j] = true;
                }
            }
        }
    }
    sort_detections(&mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BoxPx;

    fn det(image_id: u64, category_id: u64, xywh: [f64; 4], confidence: f64) -> Detection {
        Detection {
            image_id,
            category_id,
            bbox: BoxPx::from_xywh(xywh).unwrap(),
            confidence,
        }
    }

    #[test]
    fn suppresses_overlap_above_threshold() {
        // IoU = 60 / 100 = 0.6
        let a = det(1, 1, [0.0, 0.0, 10.0, 10.0], 0.9);
        let b = det(1, 1, [0.0, 0.0, 10.0, 6.0], 0.8);
        let kept = nms_pseudo_labels(&[b, a.clone()], 0.2, 0.5);
        assert_eq!(kept, vec![a]);
    }

    #[test]
    fn confidence_gate_applies_first() {
        let low = det(1, 1, [0.0, 0.0, 10.0, 10.0], 0.15);
        assert!(nms_pseudo_labels(&[low], 0.2, 0.5).is_empty());
        let edge = det(1, 1, [0.0, 0.0, 10.0, 10.0], 0.2);
        assert_eq!(nms_pseudo_labels(&[edge], 0.2, 0.5).len(), 1);
    }

    #[test]
    fn disjoint_and_cross_class_boxes_survive() {
        let dets = [
            det(1, 1, [0.0, 0.0, 10.0, 10.0], 0.9),
            det(1, 1, [50.0, 50.0, 10.0, 10.0], 0.5),
            det(1, 2, [0.0, 0.0, 10.0, 10.0], 0.4),
            det(2, 1, [0.0, 0.0, 10.0, 10.0], 0.3),
        ];
        assert_eq!(nms_pseudo_labels(&dets, 0.2, 0.5).len(), 4);
    }

    #[test]
    fn iou_at_threshold_is_kept() {
        // IoU exactly 0.5
        let a = det(1, 1, [0.0, 0.0, 10.0, 10.0], 0.9);
        let b = det(1, 1, [0.0, 0.0, 10.0, 5.0], 0.8);
        assert_eq!(nms_pseudo_labels(&[a, b], 0.2, 0.5).len(), 2);
    }

    #[test]
    fn output_is_sorted() {
        let dets = [
            det(2, 1, [0.0, 0.0, 1.0, 1.0], 0.3),
            det(1, 3, [0.0, 0.0, 1.0, 1.0], 0.9),
            det(1, 1, [5.0, 0.0, 1.0, 1.0], 0.5),
            det(1, 1, [0.0, 0.0, 1.0, 1.0], 0.7),
        ];
        let out = nms_pseudo_labels(&dets, 0.0, 0.5);
        let keys: Vec<(u64, u64, f64)> = out.iter().map(|d| (d.image_id, d.category_id, d.confidence)).collect();
        assert_eq!(keys, vec![(1, 1, 0.7), (1, 1, 0.5), (1, 3, 0.9), (2, 1, 0.3)]);
    }
}
