//! Teacher pseudo-labels, video-label filtering and soft confidence weights.

use serde::{Deserialize, Serialize};

use crate::detector::{Detector, ParameterVector};
use crate::error::Result;
use crate::nms::rank_order;
use crate::types::{BoundingBox, Detection, Frame, PseudoLabelConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub confidence: f64,
    /// Loss multiplier: squared confidence under soft weighting, else 1.
    pub weight: f64,
    #[serde(default)]
    pub cell: usize,
}

impl From<&Detection> for PseudoLabel {
    fn from(d: &Detection) -> Self {
        Self { bbox: d.bbox, confidence: d.confidence, weight: 1.0, cell: d.cell }
    }
}

/// Pseudo-labels for each frame of a sub-clip, in rank order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelSet {
    pub frames: Vec<Vec<PseudoLabel>>,
}

impl PseudoLabelSet {
    pub fn total(&self) -> usize {
        self.frames.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total() == 0
    }
}

/// Builds the candidate set from post-NMS teacher detections. Without weak
/// filtering only confidences above `beta` survive; with it, candidates down
/// to `beta_l` are retained so [`weak_filter`] can fall back on them.
pub fn from_detections(dets_per_frame: &[Vec<Detection>], config: &PseudoLabelConfig) -> PseudoLabelSet {
    let floor = config.candidate_floor();
    let frames = dets_per_frame
        .iter()
        .map(|dets| {
            let mut dets: Vec<&Detection> = dets.iter().filter(|d| d.confidence > floor).collect();
            dets.sort_by(|a, b| rank_order(a, b));
            dets.into_iter().map(PseudoLabel::from).collect()
        })
        .collect();
    PseudoLabelSet { frames }
}

/// Runs the teacher on every frame (forward, decode, NMS) and extracts candidates.
pub fn generate(
    detector: &Detector,
    teacher: &ParameterVector,
    subclip: &[&Frame],
    config: &PseudoLabelConfig,
    nms_iou: f64,
) -> Result<PseudoLabelSet> {
    let floor = config.candidate_floor();
    let dets = subclip
        .iter()
        .map(|f| detector.detect(teacher, f, floor, nms_iou))
        .collect::<Result<Vec<_>>>()?;
    Ok(from_detections(&dets, config))
}

/// Keeps only candidates strictly above `beta`.
pub fn threshold(labels: &PseudoLabelSet, beta: f64) -> PseudoLabelSet {
    PseudoLabelSet {
        frames: labels
            .frames
            .iter()
            .map(|f| f.iter().copied().filter(|l| l.confidence > beta).collect())
            .collect(),
    }
}

/// Applies the video label. Negative videos lose every pseudo-label. In a
/// positive video each frame keeps its candidates above `beta`; a frame with
/// none keeps its single best candidate when that exceeds `beta_l`.
pub fn weak_filter(labels: &PseudoLabelSet, video_label: bool, config: &PseudoLabelConfig) -> PseudoLabelSet {
    if !video_label {
        return PseudoLabelSet { frames: vec![Vec::new(); labels.frames.len()] };
    }
    let frames = labels
        .frames
        .iter()
        .map(|frame| {
            let above: Vec<PseudoLabel> = frame.iter().copied().filter(|l| l.confidence > config.beta).collect();
            if !above.is_empty() {
                return above;
            }
            frame
                .iter()
                .copied()
                .filter(|l| l.confidence > config.beta_l)
                .min_by(|a, b| b.confidence.total_cmp(&a.confidence).then(a.cell.cmp(&b.cell)))
                .into_iter()
                .collect()
        })
        .collect();
    PseudoLabelSet { frames }
}

/// Sets each weight to the squared confidence; boxes and confidences are untouched.
pub fn apply_soft_weights(labels: &PseudoLabelSet) -> PseudoLabelSet {
    PseudoLabelSet {
        frames: labels
            .frames
            .iter()
            .map(|f| f.iter().map(|l| PseudoLabel { weight: l.confidence * l.confidence, ..*l }).collect())
            .collect(),
    }
}

/// Candidate set to final labels: weak filtering when enabled and the
/// video label is known, plain `beta` thresholding otherwise, then soft
/// weights when enabled.
pub fn finalize(candidates: &PseudoLabelSet, video_label: Option<bool>, config: &PseudoLabelConfig) -> PseudoLabelSet {
    let filtered = match (config.use_weak_filtering, video_label) {
        (true, Some(z)) => weak_filter(candidates, z, config),
        _ => threshold(candidates, config.beta),
    };
    if config.use_soft_weights {
        apply_soft_weights(&filtered)
    } else {
        filtered
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn det(c: f64, cell: usize) -> Detection {
        let b = BoundingBox::new(0.1 + 0.1 * (cell % 8) as f64, 0.5, 0.05, 0.05).unwrap();
        Detection::new(b, c, cell)
    }

    fn confs(set: &PseudoLabelSet) -> Vec<Vec<f64>> {
        set.frames.iter().map(|f| f.iter().map(|l| l.confidence).collect()).collect()
    }

    #[test]
    fn plain_thresholding() {
        let cfg = PseudoLabelConfig::default();
        let set = from_detections(&[vec![det(0.7, 1), det(0.4, 2)]], &cfg);
        assert_eq!(confs(&set), vec![vec![0.7]]);

        let all_low = from_detections(&[vec![det(0.3, 1)], vec![det(0.45, 2)]], &cfg);
        assert!(all_low.is_empty());

        let off = PseudoLabelConfig { beta: 0.0, beta_l: 0.0, ..cfg };
        assert_eq!(from_detections(&[vec![det(0.7, 1), det(0.01, 2)]], &off).total(), 2);
    }

    #[test]
    fn weak_filter_examples() {
        let cfg = PseudoLabelConfig { beta: 0.5, beta_l: 0.1, use_weak_filtering: true, use_soft_weights: false };
        let cands = from_detections(&[vec![det(0.9, 1), det(0.3, 2)], vec![det(0.4, 3), det(0.3, 4)]], &cfg);
        assert!(weak_filter(&cands, false, &cfg).is_empty());
        assert_eq!(weak_filter(&cands, false, &cfg).frames.len(), 2);

        let pos = weak_filter(&cands, true, &cfg);
        assert_eq!(confs(&pos), vec![vec![0.9], vec![0.4]]);

        let low = from_detections(&[vec![det(0.05, 1)]], &cfg);
        assert!(weak_filter(&low, true, &cfg).is_empty());
    }

    #[test]
    fn fallback_ties_prefer_lower_cell() {
        let cfg = PseudoLabelConfig { beta: 0.5, beta_l: 0.1, use_weak_filtering: true, use_soft_weights: false };
        let cands = from_detections(&[vec![det(0.3, 6), det(0.3, 2)]], &cfg);
        let kept = weak_filter(&cands, true, &cfg);
        assert_eq!(kept.frames[0].len(), 1);
        assert_eq!(kept.frames[0][0].cell, 2);
    }

    #[test]
    fn soft_weights_are_squared_confidences() {
        let set = from_detections(&[vec![det(0.9, 1), det(0.3, 2)], vec![det(0.5, 0), det(1.0, 4)]], &PseudoLabelConfig {
            beta: 0.0,
            ..Default::default()
        });
        let soft = apply_soft_weights(&set);
        let w: Vec<Vec<f64>> = soft.frames.iter().map(|f| f.iter().map(|l| l.weight).collect()).collect();
        assert!((w[0][0] - 0.81).abs() < 1e-12 && (w[0][1] - 0.09).abs() < 1e-12);
        assert_eq!(w[1], vec![1.0, 0.25]);
    }

    #[test]
    fn finalize_without_label_falls_back_to_threshold() {
        let cfg = PseudoLabelConfig { beta: 0.5, beta_l: 0.1, use_weak_filtering: true, use_soft_weights: true };
        let cands = from_detections(&[vec![det(0.8, 1), det(0.3, 2)], vec![det(0.3, 3)]], &cfg);
        let out = finalize(&cands, None, &cfg);
        assert_eq!(confs(&out), vec![vec![0.8], vec![]]);
        assert!((out.frames[0][0].weight - 0.64).abs() < 1e-12);
    }

    fn arb_frames() -> impl Strategy<Value = Vec<Vec<Detection>>> {
        prop::collection::vec(prop::collection::vec((0.0f64..1.0, 0usize..64).prop_map(|(c, k)| det(c, k)), 0..6), 1..6)
    }

    proptest! {
        #[test]
        fn negative_videos_never_keep_labels(frames in arb_frames(), beta in 0.0f64..1.0, frac in 0.0f64..1.0) {
            let cfg = PseudoLabelConfig { beta, beta_l: beta * frac, use_weak_filtering: true, use_soft_weights: false };
            prop_assert!(weak_filter(&from_detections(&frames, &cfg), false, &cfg).is_empty());
        }

        #[test]
        fn positive_filter_count_rule(frames in arb_frames(), beta in 0.0f64..1.0, frac in 0.0f64..1.0) {
            let cfg = PseudoLabelConfig { beta, beta_l: beta * frac, use_weak_filtering: true, use_soft_weights: false };
            let cands = from_detections(&frames, &cfg);
            let plain = threshold(&cands, beta);
            let filtered = weak_filter(&cands, true, &cfg);
            for (p, f) in plain.frames.iter().zip(&filtered.frames) {
                if p.is_empty() {
                    prop_assert!(f.len() <= 1);
                } else {
                    prop_assert_eq!(p.len(), f.len());
                }
            }
        }

        #[test]
        fn soft_weights_touch_only_weights(frames in arb_frames()) {
            let cfg = PseudoLabelConfig { beta: 0.0, beta_l: 0.0, ..Default::default() };
            let set = from_detections(&frames, &cfg);
            let soft = apply_soft_weights(&set);
            for (a, b) in set.frames.iter().flatten().zip(soft.frames.iter().flatten()) {
                prop_assert_eq!(a.bbox, b.bbox);
                prop_assert_eq!(a.confidence, b.confidence);
            }
        }
    }
}
