//! Detection matching, average precision and dataset-level mAP.

use serde::{Deserialize, Serialize};

use crate::detector::{Detector, ParameterVector};
use crate::error::{invalid, Result};
use crate::nms::{iou, rank_order};
use crate::types::{BoundingBox, Detection, EvalConfig, VideoRecord};

/// Per-detection TP/FP flags for one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// `(confidence, true_positive)` in rank order.
    pub scored: Vec<(f64, bool)>,
    pub num_gt: usize,
}

impl MatchResult {
    pub fn true_positives(&self) -> usize {
        self.scored.iter().filter(|s| s.1).count()
    }
}

/// Greedy one-to-one matching in rank order. Each detection takes the
/// unmatched ground truth it overlaps most (lower index on ties) and is a
/// true positive when that overlap reaches `iou_thr`.
pub fn match_detections(dets: &[Detection], gts: &[BoundingBox], iou_thr: f64) -> MatchResult {
    let mut sorted = dets.to_vec();
    sorted.sort_by(rank_order);
    let mut taken = vec![false; gts.len()];
    let scored = sorted
        .iter()
        .map(|d| {
            let best = gts
                .iter()
                .enumerate()
                .filter(|(j, _)| !taken[*j])
                .map(|(j, g)| (j, iou(&d.bbox, g)))
                .fold(None::<(usize, f64)>, |acc, (j, o)| match acc {
                    Some((_, best)) if best >= o => acc,
                    _ => Some((j, o)),
                });
            match best {
                Some((j, o)) if o >= iou_thr => {
                    taken[j] = true;
                    (d.confidence, true)
                }
                _ => (d.confidence, false),
            }
        })
        .collect();
    MatchResult { scored, num_gt: gts.len() }
}

/// One point of the precision-recall curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub confidence: f64,
    pub recall: f64,
    pub precision: f64,
}

/// Precision-recall curve of pooled matches, one point per detection in
/// descending confidence (stable across frames on ties).
pub fn pr_curve(results: &[MatchResult]) -> Result<(Vec<PrPoint>, usize)> {
    let num_gt: usize = results.iter().map(|r| r.num_gt).sum();
    if num_gt == 0 {
        return Err(invalid("average precision is undefined without ground truth"));
    }
    let mut pooled: Vec<(f64, bool)> = results.iter().flat_map(|r| r.scored.iter().copied()).collect();
    pooled.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut tp = 0usize;
    let points = pooled
        .iter()
        .enumerate()
        .map(|(k, &(confidence, hit))| {
            tp += usize::from(hit);
            PrPoint { confidence, recall: tp as f64 / num_gt as f64, precision: tp as f64 / (k + 1) as f64 }
        })
        .collect();
    Ok((points, num_gt))
}

/// All-point interpolated AP: area under the precision envelope
/// `p(r) = max precision at recall >= r`.
pub fn average_precision(results: &[MatchResult]) -> Result<f64> {
    let (points, _) = pr_curve(results)?;
    Ok(ap_from_curve(&points))
}

fn ap_from_curve(points: &[PrPoint]) -> f64 {
    let mut envelope: Vec<f64> = points.iter().map(|p| p.precision).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, env) in points.iter().zip(&envelope) {
        ap += (p.recall - prev_recall) * env;
        prev_recall = p.recall;
    }
    ap
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map: f64,
    pub num_gt: usize,
    pub num_detections: usize,
    pub pr_curve: Vec<PrPoint>,
}

/// Runs the detector over every annotated frame and pools the matches.
pub fn evaluate_model(
    detector: &Detector,
    params: &ParameterVector,
    dataset: &[VideoRecord],
    eval: &EvalConfig,
) -> Result<EvalReport> {
    let mut results = Vec::new();
    for video in dataset {
        if video.annotations.is_none() {
            return Err(invalid(format!("video {} has no frame annotations", video.video_id)));
        }
        for (t, frame) in video.frames.iter().enumerate() {
            let dets = detector.detect(params, frame, eval.conf_floor, eval.nms_iou)?;
            results.push(match_detections(&dets, video.boxes_at(t), eval.match_iou));
        }
    }
    let (points, num_gt) = pr_curve(&results)?;
    Ok(EvalReport { map: ap_from_curve(&points), num_gt, num_detections: points.len(), pr_curve: points })
}

/// Single-number convenience wrapper around [`evaluate_model`].
pub fn evaluate_map(detector: &Detector, params: &ParameterVector, dataset: &[VideoRecord], eval: &EvalConfig) -> Result<f64> {
    evaluate_model(detector, params, dataset, eval).map(|r| r.map)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(cx: f64, cy: f64) -> BoundingBox {
        BoundingBox::new(cx, cy, 0.2, 0.2).unwrap()
    }

    #[test]
    fn matching_examples() {
        let g = bx(0.5, 0.5);
        let one = match_detections(&[Detection::new(g, 0.9, 0)], &[g], 0.5);
        assert_eq!(one.scored, vec![(0.9, true)]);

        let two = match_detections(&[Detection::new(g, 0.9, 0), Detection::new(g, 0.8, 1)], &[g], 0.5);
        assert_eq!(two.scored, vec![(0.9, true), (0.8, false)]);

        let p = BoundingBox::from_corners(0.0, 0.0, 0.5, 0.5).unwrap();
        let q = BoundingBox::from_corners(0.25, 0.25, 0.75, 0.75).unwrap();
        assert_eq!(match_detections(&[Detection::new(p, 0.9, 0)], &[q], 0.5).scored, vec![(0.9, false)]);
    }

    #[test]
    fn matching_prefers_better_overlap_then_lower_index() {
        let g0 = bx(0.5, 0.5);
        let g1 = bx(0.52, 0.5);
        let d = Detection::new(bx(0.52, 0.5), 0.9, 0);
        let r = match_detections(&[d, Detection::new(bx(0.5, 0.5), 0.8, 1)], &[g0, g1], 0.5);
        assert_eq!(r.scored, vec![(0.9, true), (0.8, true)]);
        let r = match_detections(&[Detection::new(g0, 0.9, 0)], &[g0, g0], 0.5);
        assert_eq!(r.true_positives(), 1);
    }

    #[test]
    fn ap_examples() {
        let perfect = MatchResult { scored: vec![(0.9, true), (0.6, true)], num_gt: 2 };
        assert_eq!(average_precision(&[perfect]).unwrap(), 1.0);

        let none = MatchResult { scored: vec![], num_gt: 3 };
        assert_eq!(average_precision(&[none]).unwrap(), 0.0);

        let worked = MatchResult { scored: vec![(0.9, true), (0.8, false), (0.7, true)], num_gt: 2 };
        assert!((average_precision(&[worked]).unwrap() - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);

        assert!(average_precision(&[MatchResult { scored: vec![(0.5, false)], num_gt: 0 }]).is_err());
    }

    #[test]
    fn pooling_across_frames_sorts_by_confidence() {
        let a = MatchResult { scored: vec![(0.7, true)], num_gt: 1 };
        let b = MatchResult { scored: vec![(0.9, true), (0.8, false)], num_gt: 1 };
        assert!((average_precision(&[a, b]).unwrap() - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
    }
}
