//! Box overlap and greedy non-maximum suppression.

use std::cmp::Ordering;

use crate::types::{BoundingBox, Detection};

/// Intersection over union of two boxes, in `[0,1]`.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let [ax1, ay1, ax2, ay2] = a.corners();
    let [bx1, by1, bx2, by2] = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Total order used everywhere detections are ranked: confidence descending,
/// then lower cell index, then box coordinates.
pub fn rank_order(a: &Detection, b: &Detection) -> Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then(a.cell.cmp(&b.cell))
        .then(a.bbox.cx.total_cmp(&b.bbox.cx))
        .then(a.bbox.cy.total_cmp(&b.bbox.cy))
        .then(a.bbox.w.total_cmp(&b.bbox.w))
        .then(a.bbox.h.total_cmp(&b.bbox.h))
}

/// Greedy NMS. Survivors are returned in rank order and no two of them
/// overlap by more than `iou_threshold`.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut sorted = dets.to_vec();
    sorted.sort_by(rank_order);
    let mut keep: Vec<Detection> = Vec::with_capacity(sorted.len());
    for det in sorted {
        if keep.iter().all(|k| iou(&k.bbox, &det.bbox) <= iou_threshold) {
            keep.push(det);
        }
    }
    keep
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox::from_corners(x1, y1, x2, y2).unwrap()
    }

    fn det(b: BoundingBox, c: f64, cell: usize) -> Detection {
        Detection::new(b, c, cell)
    }

    #[test]
    fn iou_basic_cases() {
        let a = bx(0.1, 0.1, 0.4, 0.5);
        assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
        assert_eq!(iou(&a, &bx(0.6, 0.6, 0.9, 0.9)), 0.0);
        // (0,0)-(2,2) vs (1,1)-(3,3) in a 4-pixel frame: intersection 1, union 7
        let p = bx(0.0, 0.0, 0.5, 0.5);
        let q = bx(0.25, 0.25, 0.75, 0.75);
        assert!((iou(&p, &q) - 1.0 / 7.0).abs() < 1e-12);
        assert!((iou(&q, &p) - iou(&p, &q)).abs() < 1e-15);
    }

    #[test]
    fn nms_examples() {
        let a = bx(0.1, 0.1, 0.3, 0.3);
        let kept = nms(&[det(a, 0.8, 1), det(a, 0.9, 2)], 0.45);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].confidence, 0.9);

        let b = bx(0.6, 0.6, 0.8, 0.8);
        assert_eq!(nms(&[det(a, 0.8, 1), det(b, 0.9, 2)], 0.45).len(), 2);
        assert!(nms(&[], 0.45).is_empty());
    }

    #[test]
    fn equal_confidence_ties_prefer_lower_cell() {
        let a = bx(0.1, 0.1, 0.3, 0.3);
        let b = bx(0.11, 0.1, 0.31, 0.3);
        let kept = nms(&[det(b, 0.7, 9), det(a, 0.7, 3)], 0.45);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].cell, 3);
    }

    fn arb_det() -> impl Strategy<Value = Detection> {
        (0.05f64..0.95, 0.05f64..0.95, 0.05f64..0.5, 0.05f64..0.5, 0.0f64..1.0, 0usize..64)
            .prop_map(|(cx, cy, w, h, c, cell)| det(BoundingBox::new(cx, cy, w, h).unwrap(), c, cell))
    }

    proptest! {
        #[test]
        fn nms_is_idempotent(dets in prop::collection::vec(arb_det(), 0..20), thr in 0.0f64..1.0) {
            let once = nms(&dets, thr);
            prop_assert_eq!(nms(&once, thr), once.clone());
            for (i, a) in once.iter().enumerate() {
                for b in &once[i + 1..] {
                    prop_assert!(iou(&a.bbox, &b.bbox) <= thr);
                }
                if i > 0 {
                    prop_assert!(once[i - 1].confidence >= a.confidence);
                }
            }
        }

        #[test]
        fn nms_ignores_input_order(dets in prop::collection::vec(arb_det(), 0..20), seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut shuffled = dets.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(nms(&dets, 0.45), nms(&shuffled, 0.45));
        }

        #[test]
        fn iou_is_symmetric_and_bounded(a in arb_det(), b in arb_det()) {
            let x = iou(&a.bbox, &b.bbox);
            prop_assert!((0.0..=1.0).contains(&x));
            prop_assert!((x - iou(&b.bbox, &a.bbox)).abs() < 1e-15);
        }
    }
}
