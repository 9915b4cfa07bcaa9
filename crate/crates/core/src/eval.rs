//! Box geometry and ranking metrics: IoU, per-class NMS, greedy matching,
//! 101-point interpolated AP at IoU 0.50, and per-image precision.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Confidence floor for mAP evaluation.
pub const MAP_CONF_THRESH: f64 = 0.001;
/// Confidence threshold for counting detections.
pub const COUNT_CONF_THRESH: f64 = 0.25;
pub const NMS_IOU_THRESH: f64 = 0.65;
pub const MATCH_IOU_THRESH: f64 = 0.50;

/// Axis-aligned box in pixels: top-left corner plus extent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self {
            x,
            y,
            w: w.max(0.0),
            h: h.max(0.0),
        }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + 0.5 * self.w, self.y + 0.5 * self.h)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub confidence: f64,
    pub image_id: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub bbox: BBox,
    pub class_id: usize,
    pub image_id: u64,
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = ((a.x + a.w).min(b.x + b.w) - a.x.max(b.x)).max(0.0);
    let iy = ((a.y + a.h).min(b.y + b.h) - a.y.max(b.y)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Indices of `dets` by descending confidence; equal confidences keep
/// their input order.
fn rank(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence));
    order
}

/// Per-class greedy non-maximum suppression. Detections below
/// `conf_thresh` are dropped first; a kept box suppresses every
/// lower-ranked box of the same class and image with IoU above
/// `iou_thresh`. Output is in rank order.
pub fn nms(dets: &[Detection], conf_thresh: f64, iou_thresh: f64) -> Vec<Detection> {
    let mut kept: Vec<Detection> = Vec::new();
    for i in rank(dets) {
        let d = &dets[i];
        if d.confidence < conf_thresh {
            continue;
        }
        let suppressed = kept.iter().any(|k| {
            k.class_id == d.class_id && k.image_id == d.image_id && iou(&k.bbox, &d.bbox) > iou_thresh
        });
        if !suppressed {
            kept.push(*d);
        }
    }
    kept
}

/// Greedy matching within one image. Detections are visited by rank; each
/// claims the unclaimed same-class ground truth of highest IoU (ties to
/// the lower index) provided IoU >= `iou_thresh`. The result is indexed
/// like `dets`.
pub fn match_detections(dets: &[Detection], gts: &[GroundTruth], iou_thresh: f64) -> Vec<Option<usize>> {
    let mut claimed = vec![false; gts.len()];
    let mut out = vec![None; dets.len()];
    for i in rank(dets) {
        let d = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, gt) in gts.iter().enumerate() {
            if claimed[j] || gt.class_id != d.class_id || gt.image_id != d.image_id {
                continue;
            }
            let o = iou(&d.bbox, &gt.bbox);
            if o >= iou_thresh && best.is_none_or(|(_, b)| o > b) {
                best = Some((j, o));
            }
        }
        if let Some((j, _)) = best {
            claimed[j] = true;
            out[i] = Some(j);
        }
    }
    out
}

/// True-positive flags for every detection, matching image by image.
pub fn true_positives(dets: &[Detection], gts: &[GroundTruth], iou_thresh: f64) -> Vec<bool> {
    let mut by_image: BTreeMap<u64, (Vec<usize>, Vec<GroundTruth>)> = BTreeMap::new();
    for (i, d) in dets.iter().enumerate() {
        by_image.entry(d.image_id).or_default().0.push(i);
    }
    for g in gts {
        if let Some(entry) = by_image.get_mut(&g.image_id) {
            entry.1.push(*g);
        }
    }
    let mut tp = vec![false; dets.len()];
    for (idx, img_gts) in by_image.values() {
        let img_dets: Vec<Detection> = idx.iter().map(|&i| dets[i]).collect();
        for (k, m) in match_detections(&img_dets, img_gts, iou_thresh).into_iter().enumerate() {
            tp[idx[k]] = m.is_some();
        }
    }
    tp
}

/// 101-point interpolated AP for one class given ranked TP flags.
fn interpolated_ap(tp_ranked: &[bool], n_gt: usize) -> f64 {
    let mut precision = Vec::with_capacity(tp_ranked.len());
    let mut recall = Vec::with_capacity(tp_ranked.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &hit in tp_ranked {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    // Precision envelope, non-increasing in rank.
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut total = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        let idx = recall.partition_point(|&rc| rc < r);
        if idx < precision.len() {
            total += precision[idx];
        }
    }
    total / 101.0
}

/// Per-class AP@50 for every class that has ground truth.
pub fn ap50_per_class(dets: &[Detection], gts: &[GroundTruth]) -> BTreeMap<usize, f64> {
    let dets: Vec<Detection> = dets
        .iter()
        .filter(|d| d.confidence >= MAP_CONF_THRESH)
        .copied()
        .collect();
    let tp = true_positives(&dets, gts, MATCH_IOU_THRESH);
    let classes: BTreeSet<usize> = gts.iter().map(|g| g.class_id).collect();
    let order = rank(&dets);
    classes
        .into_iter()
        .map(|c| {
            let n_gt = gts.iter().filter(|g| g.class_id == c).count();
            let ranked: Vec<bool> = order
                .iter()
                .filter(|&&i| dets[i].class_id == c)
                .map(|&i| tp[i])
                .collect();
            (c, interpolated_ap(&ranked, n_gt))
        })
        .collect()
}

/// Mean AP@50 over classes present in the ground truth.
pub fn map50(dets: &[Detection], gts: &[GroundTruth]) -> Result<f64> {
    if gts.is_empty() {
        return Err(Error::Undefined("mAP", "no ground truth"));
    }
    let per_class = ap50_per_class(dets, gts);
    Ok(per_class.values().sum::<f64>() / per_class.len() as f64)
}

/// Fraction of `dets` matching a ground truth; `None` when there are no
/// detections.
pub fn per_image_precision(dets: &[Detection], gts: &[GroundTruth]) -> Option<f64> {
    if dets.is_empty() {
        return None;
    }
    let tp = true_positives(dets, gts, MATCH_IOU_THRESH);
    Some(tp.iter().filter(|&&t| t).count() as f64 / dets.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn det(x: f64, y: f64, w: f64, h: f64, class_id: usize, confidence: f64) -> Detection {
        Detection {
            bbox: BBox::new(x, y, w, h),
            class_id,
            confidence,
            image_id: 0,
        }
    }

    fn gt(x: f64, y: f64, w: f64, h: f64, class_id: usize) -> GroundTruth {
        GroundTruth {
            bbox: BBox::new(x, y, w, h),
            class_id,
            image_id: 0,
        }
    }

    #[test]
    fn iou_cases() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::new(5.0, 5.0, 1.0, 1.0)), 0.0);
        assert!((iou(&a, &BBox::new(1.0, 1.0, 2.0, 2.0)) - 1.0 / 7.0).abs() < 1e-15);
        let empty = BBox::new(0.0, 0.0, 0.0, 0.0);
        assert_eq!(iou(&empty, &empty), 0.0);
    }

    #[test]
    fn nms_suppresses_within_class_only() {
        // IoU of these two boxes: inter 9.5*10 = 95, union 105 -> 0.905
        let a = det(0.0, 0.0, 10.0, 10.0, 0, 0.9);
        let b = det(0.5, 0.0, 10.0, 10.0, 0, 0.8);
        assert!(iou(&a.bbox, &b.bbox) > 0.9);
        assert_eq!(nms(&[b, a], 0.25, 0.65), vec![a]);
        let b_other = Detection { class_id: 1, ..b };
        assert_eq!(nms(&[a, b_other], 0.25, 0.65).len(), 2);
        assert!(nms(&[], 0.25, 0.65).is_empty());
    }

    #[test]
    fn nms_tie_keeps_lower_index() {
        let a = det(0.0, 0.0, 10.0, 10.0, 0, 0.5);
        let b = det(1.0, 0.0, 10.0, 10.0, 0, 0.5);
        assert_eq!(nms(&[a, b], 0.25, 0.65), vec![a]);
        assert_eq!(nms(&[b, a], 0.25, 0.65), vec![b]);
    }

    #[test]
    fn matching_rules() {
        let g = gt(0.0, 0.0, 10.0, 10.0, 0);
        // IoU 0.6: shift so that inter/union = 0.6 -> 10*w' / (200 - 10w') with overlap 7.5
        let d = det(2.5, 0.0, 10.0, 10.0, 0, 0.9);
        assert!((iou(&d.bbox, &g.bbox) - 0.6).abs() < 1e-12);
        assert_eq!(match_detections(&[d], &[g], 0.5), vec![Some(0)]);
        let wrong = Detection { class_id: 1, ..d };
        assert_eq!(match_detections(&[wrong], &[g], 0.5), vec![None]);
        // Two detections on one GT: higher confidence wins.
        let lo = det(0.0, 0.0, 10.0, 10.0, 0, 0.3);
        let hi = det(1.0, 0.0, 10.0, 10.0, 0, 0.7);
        assert_eq!(match_detections(&[lo, hi], &[g], 0.5), vec![None, Some(0)]);
    }

    #[test]
    fn map_edge_cases() {
        let gts = vec![gt(0.0, 0.0, 10.0, 10.0, 0), gt(20.0, 20.0, 5.0, 5.0, 1)];
        let perfect: Vec<Detection> = gts
            .iter()
            .map(|g| Detection {
                bbox: g.bbox,
                class_id: g.class_id,
                confidence: 0.9,
                image_id: 0,
            })
            .collect();
        assert_eq!(map50(&perfect, &gts).unwrap(), 1.0);
        assert_eq!(map50(&[], &gts).unwrap(), 0.0);
        assert!(matches!(map50(&perfect, &[]), Err(Error::Undefined(..))));
    }

    #[test]
    fn map_tp_fp_tp_by_hand() {
        // One class, two GT; ranked TP, FP, TP.
        // precision 1, 1/2, 2/3 at recall 1/2, 1/2, 1 -> envelope 1, 2/3, 2/3.
        // r in [0, 0.5] (51 points) -> 1; r in (0.5, 1] (50 points) -> 2/3.
        let gts = vec![gt(0.0, 0.0, 10.0, 10.0, 0), gt(30.0, 30.0, 10.0, 10.0, 0)];
        let dets = vec![
            det(0.0, 0.0, 10.0, 10.0, 0, 0.9),
            det(60.0, 0.0, 10.0, 10.0, 0, 0.8),
            det(30.0, 30.0, 10.0, 10.0, 0, 0.7),
        ];
        let expected = (51.0 + 50.0 * 2.0 / 3.0) / 101.0;
        assert!((map50(&dets, &gts).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn per_image_precision_cases() {
        let gts = vec![gt(0.0, 0.0, 10.0, 10.0, 0), gt(30.0, 30.0, 10.0, 10.0, 1)];
        let misses: Vec<Detection> = (0..5)
            .map(|i| det(50.0 + i as f64, 50.0, 5.0, 5.0, 0, 0.9))
            .collect();
        assert_eq!(per_image_precision(&misses, &gts), Some(0.0));
        let hits = vec![det(0.0, 0.0, 10.0, 10.0, 0, 0.9), det(30.0, 30.0, 10.0, 10.0, 1, 0.8)];
        assert_eq!(per_image_precision(&hits, &gts), Some(1.0));
        let mut three = hits.clone();
        three.push(misses[0]);
        assert!((per_image_precision(&three, &gts).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(per_image_precision(&[], &gts), None);
    }

    fn arb_det() -> impl Strategy<Value = Detection> {
        (0.0f64..40.0, 0.0f64..40.0, 1.0f64..20.0, 1.0f64..20.0, 0usize..2, 0.0f64..1.0, 0u64..2)
            .prop_map(|(x, y, w, h, c, s, img)| Detection {
                bbox: BBox::new(x, y, w, h),
                class_id: c,
                confidence: s,
                image_id: img,
            })
    }

    fn arb_gt() -> impl Strategy<Value = GroundTruth> {
        (0.0f64..40.0, 0.0f64..40.0, 1.0f64..20.0, 1.0f64..20.0, 0usize..2, 0u64..2).prop_map(
            |(x, y, w, h, c, img)| GroundTruth {
                bbox: BBox::new(x, y, w, h),
                class_id: c,
                image_id: img,
            },
        )
    }

    proptest! {
        #[test]
        fn nms_subset_and_idempotent(dets in proptest::collection::vec(arb_det(), 0..25)) {
            let once = nms(&dets, 0.25, 0.65);
            prop_assert!(once.iter().all(|d| dets.contains(d)));
            prop_assert_eq!(nms(&once, 0.25, 0.65), once);
        }

        #[test]
        fn map_bounded_and_shuffle_invariant(
            dets in proptest::collection::vec(arb_det(), 0..15),
            gts in proptest::collection::vec(arb_gt(), 1..6),
            rot in 0usize..15,
        ) {
            let m = map50(&dets, &gts).unwrap();
            prop_assert!((0.0..=1.0).contains(&m));
            // Distinct confidences make the ranking order-independent.
            let mut uniq = dets.clone();
            for (i, d) in uniq.iter_mut().enumerate() {
                d.confidence = (d.confidence * 0.9 + i as f64 * 1e-4).min(1.0);
            }
            let base = map50(&uniq, &gts).unwrap();
            let mut shuffled = uniq.clone();
            if !shuffled.is_empty() {
                let k = rot % shuffled.len();
                shuffled.rotate_left(k);
                shuffled.reverse();
            }
            prop_assert!((map50(&shuffled, &gts).unwrap() - base).abs() < 1e-12);
        }

        #[test]
        fn deleting_a_true_positive_never_helps(
            dets in proptest::collection::vec(arb_det(), 1..15),
            gts in proptest::collection::vec(arb_gt(), 1..6),
        ) {
            let tp = true_positives(&dets, &gts, MATCH_IOU_THRESH);
            if let Some(i) = tp.iter().position(|&t| t) {
                let mut fewer = dets.clone();
                fewer.remove(i);
                prop_assert!(map50(&fewer, &gts).unwrap() <= map50(&dets, &gts).unwrap() + 1e-12);
            }
        }

        #[test]
        fn matching_is_injective(
            dets in proptest::collection::vec(arb_det(), 0..15),
            gts in proptest::collection::vec(arb_gt(), 0..6),
        ) {
            let m = match_detections(&dets, &gts, 0.5);
            let claimed: Vec<usize> = m.iter().flatten().copied().collect();
            let unique: BTreeSet<usize> = claimed.iter().copied().collect();
            prop_assert_eq!(claimed.len(), unique.len());
        }
    }
}
