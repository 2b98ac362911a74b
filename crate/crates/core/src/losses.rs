//! Detection, pseudo-label and video-level losses.
//!
//! A ground-truth (or pseudo-label) box supervises only the grid cell that
//! contains its center; every other cell is background for the confidence
//! term. When two boxes land in the same cell the first one wins, so callers
//! pass pseudo-labels in rank order.
//!
//! The box term is the complete-IoU loss of the decoded cell box `p` against
//! its target `t`, using unclipped corner geometry:
//!
//! ```text
//! iou   = |p ∩ t| / |p ∪ t|
//! rho2  = (p.cx - t.cx)^2 + (p.cy - t.cy)^2
//! diag2 = squared diagonal of the smallest box enclosing p and t
//! v     = 4/pi^2 * (atan(t.w / t.h) - atan(p.w / p.h))^2
//! loss  = 1 - iou + rho2 / diag2 + v^2 / (1 - iou + v)
//! ```
//!
//! The last term is `alpha * v` with `alpha = v / (1 - iou + v)`, taken as
//! zero when both `v` and `1 - iou` vanish. It is differentiated in full,
//! `alpha` included.

use std::f64::consts::PI;
use std::ops::Range;

use crate::detector::{decode_cell, Detector, LossValue, ParameterVector, RawPrediction, CELL_OUTPUTS};
use crate::dual::{Dual, Scalar};
use crate::error::{invalid, Result};
use crate::nms::nms;
use crate::pseudo_labels::PseudoLabel;
use crate::types::{BoundingBox, Detection, EvalConfig, Frame, FrameAnnotation, LossWeights};

/// Clamp applied to every probability entering a log.
pub const BCE_EPS: f64 = 1e-7;

/// A target bound to the grid cell responsible for it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AssignedTarget {
    pub cell: usize,
    pub target: BoundingBox,
    /// Multiplier on this target's box and confidence terms.
    pub weight: f64,
}

/// Binds each box to the cell containing its center; later boxes that hit
/// an occupied cell are dropped.
pub fn assign_targets<I>(grid_w: usize, grid_h: usize, boxes: I) -> Vec<AssignedTarget>
where
    I: IntoIterator<Item = (BoundingBox, f64)>,
{
    let probe = RawPrediction { grid_w, grid_h, values: Vec::new() };
    let mut out: Vec<AssignedTarget> = Vec::new();
    for (target, weight) in boxes {
        let cell = probe.cell_of(target.cx, target.cy);
        if out.iter().all(|a| a.cell != cell) {
            out.push(AssignedTarget { cell, target, weight });
        }
    }
    out
}

/// Unit-weight targets from a frame annotation.
pub fn annotation_targets(pred: &RawPrediction, ann: &FrameAnnotation) -> Vec<AssignedTarget> {
    assign_targets(pred.grid_w, pred.grid_h, ann.boxes.iter().map(|b| (*b, 1.0)))
}

/// Complete-IoU loss between a predicted `[cx, cy, w, h]` and a target box.
pub fn ciou_loss<S: Scalar>(p: [S; 4], t: &BoundingBox) -> S {
    let half = |v: S| v * 0.5;
    let (px1, px2) = (p[0] - half(p[2]), p[0] + half(p[2]));
    let (py1, py2) = (p[1] - half(p[3]), p[1] + half(p[3]));
    let (tx1, tx2) = (t.cx - t.w / 2.0, t.cx + t.w / 2.0);
    let (ty1, ty2) = (t.cy - t.h / 2.0, t.cy + t.h / 2.0);
    let c = S::constant;
    let zero = c(0.0);

    let iw = (px2.min(c(tx2)) - px1.max(c(tx1))).max(zero);
    let ih = (py2.min(c(ty2)) - py1.max(c(ty1))).max(zero);
    let inter = iw * ih;
    let union = p[2] * p[3] + t.w * t.h - inter;
    let iou = inter / union;

    let ew = px2.max(c(tx2)) - px1.min(c(tx1));
    let eh = py2.max(c(ty2)) - py1.min(c(ty1));
    let diag2 = ew * ew + eh * eh;
    let dx = p[0] - t.cx;
    let dy = p[1] - t.cy;
    let rho2 = dx * dx + dy * dy;

    let da = c((t.w / t.h).atan()) - (p[2] / p[3]).atan();
    let v = da * da * (4.0 / (PI * PI));
    let gap = -iou + 1.0;
    let denom = gap + v;
    let aspect = if denom.value() > 0.0 { v * v / denom } else { zero };

    gap + rho2 / diag2 + aspect
}

/// Weighted mean box loss over assigned cells, accumulating `scale * d/dpred`
/// into `grad` when given.
pub fn coord_term(
    pred: &RawPrediction,
    targets: &[AssignedTarget],
    prior: f64,
    mut grad: Option<(&mut [f64], f64)>,
) -> f64 {
    if targets.is_empty() {
        return 0.0;
    }
    let n = targets.len() as f64;
    let mut total = 0.0;
    for a in targets {
        let raw = pred.cell(a.cell);
        let t = [0, 1, 2, 3].map(|k| Dual::<4>::var(raw[k + 1], k));
        let decoded = decode_cell(a.cell, pred.grid_w, pred.grid_h, prior, t);
        let loss = ciou_loss(decoded, &a.target);
        total += a.weight * loss.v;
        if let Some((g, scale)) = grad.as_mut() {
            let base = a.cell * CELL_OUTPUTS;
            for k in 0..4 {
                g[base + 1 + k] += *scale * a.weight * loss.d[k] / n;
            }
        }
    }
    total / n
}

/// Mean binary cross-entropy over all cells; assigned cells have label 1 and
/// carry their target weight, background cells have label 0 and weight 1.
pub fn conf_term(pred: &RawPrediction, targets: &[AssignedTarget], mut grad: Option<(&mut [f64], f64)>) -> f64 {
    let cells = pred.num_cells();
    let mut total = 0.0;
    for cell in 0..cells {
        let (label, weight) = match targets.iter().find(|a| a.cell == cell) {
            Some(a) => (1.0, a.weight),
            None => (0.0, 1.0),
        };
        let raw = pred.confidence(cell);
        let conf = raw.clamp(BCE_EPS, 1.0 - BCE_EPS);
        total += weight * bce(conf, label);
        if let Some((g, scale)) = grad.as_mut() {
            if conf == raw {
                g[cell * CELL_OUTPUTS] += *scale * weight * (conf - label) / cells as f64;
            }
        }
    }
    total / cells as f64
}

#[inline]
fn bce(p: f64, label: f64) -> f64 {
    -(label * p.ln() + (1.0 - label) * (1.0 - p).ln())
}

/// Box loss for a frame's annotation.
pub fn loss_coord(pred: &RawPrediction, targets: &FrameAnnotation, prior: f64) -> f64 {
    coord_term(pred, &annotation_targets(pred, targets), prior, None)
}

/// Confidence loss for a frame's annotation.
pub fn loss_conf(pred: &RawPrediction, targets: &FrameAnnotation) -> f64 {
    conf_term(pred, &annotation_targets(pred, targets), None)
}

/// `lambda_coord * coord + lambda_conf * conf` for one frame, with its
/// gradient scaled by `scale` accumulated into `grad`.
pub fn frame_detection_loss(
    pred: &RawPrediction,
    targets: &[AssignedTarget],
    weights: &LossWeights,
    prior: f64,
    grad: Option<(&mut [f64], f64)>,
) -> f64 {
    match grad {
        Some((g, scale)) => {
            let coord = coord_term(pred, targets, prior, Some((&mut *g, scale * weights.lambda_coord)));
            let conf = conf_term(pred, targets, Some((g, scale * weights.lambda_conf)));
            weights.lambda_coord * coord + weights.lambda_conf * conf
        }
        None => {
            weights.lambda_coord * coord_term(pred, targets, prior, None)
                + weights.lambda_conf * conf_term(pred, targets, None)
        }
    }
}

/// Frame-level supervised loss, averaged over a labeled batch.
pub fn loss_f_sup(
    detector: &Detector,
    params: &ParameterVector,
    batch: &[(&Frame, &FrameAnnotation)],
    weights: &LossWeights,
) -> Result<f64> {
    let mut total = 0.0;
    for (frame, ann) in batch {
        let pred = detector.forward(params, frame)?;
        let targets = annotation_targets(&pred, ann);
        total += frame_detection_loss(&pred, &targets, weights, detector.size_prior(), None);
    }
    Ok(total / batch.len().max(1) as f64)
}

/// Targets from a frame's pseudo-labels; with `soft` each label is weighted
/// by its squared teacher confidence.
pub fn pseudo_targets(grid_w: usize, grid_h: usize, labels: &[PseudoLabel], soft: bool) -> Vec<AssignedTarget> {
    assign_targets(
        grid_w,
        grid_h,
        labels.iter().map(|l| (l.bbox, if soft { l.confidence * l.confidence } else { 1.0 })),
    )
}

/// Pseudo-label loss averaged over the frames of one or more sub-clips.
/// `labels[i]` holds the pseudo-labels of `frames[i]`.
pub fn loss_f_semi(
    detector: &Detector,
    params: &ParameterVector,
    frames: &[&Frame],
    labels: &[Vec<PseudoLabel>],
    weights: &LossWeights,
    soft: bool,
) -> Result<f64> {
    if frames.len() != labels.len() {
        return Err(invalid("one pseudo-label list is needed per frame"));
    }
    let mut total = 0.0;
    for (frame, frame_labels) in frames.iter().zip(labels) {
        let pred = detector.forward(params, frame)?;
        let targets = pseudo_targets(pred.grid_w, pred.grid_h, frame_labels, soft);
        total += frame_detection_loss(&pred, &targets, weights, detector.size_prior(), None);
    }
    Ok(total / frames.len().max(1) as f64)
}

/// Per-frame maximum detection confidence and its sub-clip mean.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoConfidence {
    pub per_frame_max: Vec<f64>,
    pub video_score: f64,
}

/// Frames without detections contribute 0.
pub fn aggregate_video_confidence(dets_per_frame: &[Vec<Detection>]) -> Result<VideoConfidence> {
    if dets_per_frame.is_empty() {
        return Err(invalid("video confidence needs at least one frame"));
    }
    let per_frame_max: Vec<f64> =
        dets_per_frame.iter().map(|d| d.iter().map(|x| x.confidence).fold(0.0, f64::max)).collect();
    let video_score = per_frame_max.iter().sum::<f64>() / per_frame_max.len() as f64;
    Ok(VideoConfidence { per_frame_max, video_score })
}

/// Video-level binary cross-entropy, summed over videos.
pub fn loss_v_weak(video_scores: &[f64], labels: &[bool]) -> Result<f64> {
    if video_scores.len() != labels.len() {
        return Err(invalid(format!(
            "{} video scores but {} labels",
            video_scores.len(),
            labels.len()
        )));
    }
    Ok(video_scores
        .iter()
        .zip(labels)
        .map(|(&s, &z)| bce(s.clamp(BCE_EPS, 1.0 - BCE_EPS), if z { 1.0 } else { 0.0 }))
        .sum())
}

/// d(loss_v_weak)/d(score) for one video; zero where the clamp is active.
pub fn loss_v_weak_grad(score: f64, label: bool) -> f64 {
    let s = score.clamp(BCE_EPS, 1.0 - BCE_EPS);
    if s != score {
        return 0.0;
    }
    if label {
        -1.0 / s
    } else {
        1.0 / (1.0 - s)
    }
}

pub fn loss_combined(l_sup: f64, l_semi: f64, l_weak: f64, weights: &LossWeights) -> f64 {
    weights.lambda_f_sup * l_sup + weights.lambda_f_semi * l_semi + weights.lambda_v_weak * l_weak
}

/// Student detections on a sub-clip, reduced to per-frame maxima. Returns
/// the aggregate and, per frame, the cell of the top surviving detection.
pub fn student_video_confidence(
    preds: &[RawPrediction],
    prior: f64,
    eval: &EvalConfig,
) -> Result<(VideoConfidence, Vec<Option<usize>>)> {
    let dets: Vec<Vec<Detection>> = preds
        .iter()
        .map(|p| nms(&crate::detector::decode(p, eval.conf_floor, prior), eval.nms_iou))
        .collect();
    let top = dets.iter().map(|d| d.first().map(|x| x.cell)).collect();
    Ok((aggregate_video_confidence(&dets)?, top))
}

/// Role of one frame within a training batch.
#[derive(Debug, Clone)]
pub enum FrameRole {
    /// Labeled frame, supervised by its annotation.
    Supervised(Vec<AssignedTarget>),
    /// Weak-video frame, supervised by teacher pseudo-labels.
    PseudoLabeled(Vec<AssignedTarget>),
    /// Weak-video frame used only by the video-level loss.
    Unsupervised,
}

/// A sub-clip inside the batch together with its video label.
#[derive(Debug, Clone)]
pub struct WeakClip {
    pub frames: Range<usize>,
    pub label: bool,
}

/// Loss values per component, before the combination weights.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub sup: f64,
    pub semi: f64,
    pub weak: f64,
    pub total: f64,
}

/// Combined objective over a mixed batch: supervised frames, pseudo-labeled
/// frames and video-labeled sub-clips. Each component is the mean over its
/// own frames (or clips), so the weights set their relative scale
/// independently of batch composition.
#[derive(Debug, Clone)]
pub struct CompositeLoss {
    pub weights: LossWeights,
    pub prior: f64,
    pub eval: EvalConfig,
    pub roles: Vec<FrameRole>,
    pub clips: Vec<WeakClip>,
}

impl CompositeLoss {
    /// Value, per-component breakdown and gradient with respect to the predictions.
    ///
    /// The video-level term routes its gradient through each frame's top
    /// post-NMS detection to that cell's objectness logit; the selection
    /// itself is held fixed.
    pub fn evaluate(&self, preds: &[RawPrediction]) -> Result<(LossValue, LossBreakdown)> {
        if preds.len() != self.roles.len() {
            return Err(invalid("batch size does not match frame roles"));
        }
        let w = &self.weights;
        let mut grads: Vec<Vec<f64>> = preds.iter().map(|p| vec![0.0; p.values.len()]).collect();
        let mut parts = LossBreakdown::default();

        let n_sup = self.roles.iter().filter(|r| matches!(r, FrameRole::Supervised(_))).count().max(1) as f64;
        let n_semi = self.roles.iter().filter(|r| matches!(r, FrameRole::PseudoLabeled(_))).count().max(1) as f64;
        for ((pred, role), g) in preds.iter().zip(&self.roles).zip(grads.iter_mut()) {
            match role {
                FrameRole::Supervised(t) => {
                    parts.sup += frame_detection_loss(pred, t, w, self.prior, Some((g, w.lambda_f_sup / n_sup))) / n_sup;
                }
                FrameRole::PseudoLabeled(t) => {
                    parts.semi += frame_detection_loss(pred, t, w, self.prior, Some((g, w.lambda_f_semi / n_semi))) / n_semi;
                }
                FrameRole::Unsupervised => {}
            }
        }

        let n_clips = self.clips.len().max(1) as f64;
        for clip in &self.clips {
            if clip.frames.is_empty() || clip.frames.end > preds.len() {
                return Err(invalid("weak clip outside batch"));
            }
            let (vc, top) = student_video_confidence(&preds[clip.frames.clone()], self.prior, &self.eval)?;
            parts.weak += loss_v_weak(&[vc.video_score], &[clip.label])? / n_clips;
            let ds = w.lambda_v_weak * loss_v_weak_grad(vc.video_score, clip.label) / (top.len() as f64 * n_clips);
            for (offset, cell) in top.iter().enumerate() {
                if let Some(cell) = *cell {
                    let i = clip.frames.start + offset;
                    let c = preds[i].confidence(cell);
                    grads[i][cell * CELL_OUTPUTS] += ds * c * (1.0 - c);
                }
            }
        }

        parts.total = loss_combined(parts.sup, parts.semi, parts.weak, w);
        Ok((LossValue { value: parts.total, wrt_predictions: grads, wrt_params: None }, parts))
    }
}
