//! Domain types shared across the pipeline.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentationSpec;
use crate::error::{invalid, Result};

/// Axis-aligned box in normalized image coordinates, center-size form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    /// Builds a box, rejecting centers outside `[0,1]` and sizes outside `(0,1]`.
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self { cx, cy, w, h };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(invalid(format!("invalid bounding box {b:?}")))
        }
    }

    pub fn is_valid(&self) -> bool {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        unit(self.cx) && unit(self.cy) && self.w > 0.0 && self.w <= 1.0 && self.h > 0.0 && self.h <= 1.0
    }

    /// Corner form `(x1, y1, x2, y2)`, clipped to the unit square.
    pub fn corners(&self) -> [f64; 4] {
        let c = |v: f64| v.clamp(0.0, 1.0);
        [
            c(self.cx - self.w / 2.0),
            c(self.cy - self.h / 2.0),
            c(self.cx + self.w / 2.0),
            c(self.cy + self.h / 2.0),
        ]
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        Self::new((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)
    }

    pub fn area(&self) -> f64 {
        let [x1, y1, x2, y2] = self.corners();
        (x2 - x1).max(0.0) * (y2 - y1).max(0.0)
    }

    /// Horizontal mirror image.
    pub fn flipped(&self) -> Self {
        Self { cx: 1.0 - self.cx, ..*self }
    }
}

/// A scored box. `cell` is the grid cell (row-major) that produced it and
/// breaks confidence ties deterministically.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub confidence: f64,
    #[serde(default)]
    pub cell: usize,
}

impl Detection {
    pub fn new(bbox: BoundingBox, confidence: f64, cell: usize) -> Self {
        debug_assert!((0.0..=1.0).contains(&confidence));
        Self { bbox, confidence, cell }
    }
}

/// Ground-truth boxes for one frame of a video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameAnnotation {
    pub frame_index: usize,
    pub boxes: Vec<BoundingBox>,
}

impl FrameAnnotation {
    pub fn new(frame_index: usize, boxes: Vec<BoundingBox>) -> Self {
        Self { frame_index, boxes }
    }

    pub fn empty(frame_index: usize) -> Self {
        Self { frame_index, boxes: Vec::new() }
    }
}

/// Single-channel image, row-major, values in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
}

impl Frame {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(invalid(format!(
                "frame buffer has {} pixels, expected {}x{}",
                pixels.len(),
                width,
                height
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self { width, height, pixels: vec![value; width * height] }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    /// Rounds every pixel to the nearest 8-bit level, matching what PGM storage keeps.
    pub fn quantize(&mut self) {
        for p in &mut self.pixels {
            *p = ((p.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32;
        }
    }
}

/// A video with frame-level boxes (fully labeled) and/or a binary presence label.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoRecord {
    pub video_id: String,
    pub frames: Vec<Frame>,
    pub annotations: Option<Vec<FrameAnnotation>>,
    pub video_label: Option<bool>,
}

impl VideoRecord {
    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    /// Boxes for a frame index; empty when unannotated.
    pub fn boxes_at(&self, frame_index: usize) -> &[BoundingBox] {
        self.annotations
            .as_ref()
            .and_then(|anns| anns.iter().find(|a| a.frame_index == frame_index))
            .map(|a| a.boxes.as_slice())
            .unwrap_or(&[])
    }

    /// Keeps frame boxes, drops the video label.
    pub fn as_fully_labeled(mut self) -> Self {
        self.video_label = None;
        self
    }

    /// Keeps the video label (derived from the boxes if missing), drops the boxes.
    pub fn as_weakly_labeled(mut self) -> Self {
        if self.video_label.is_none() {
            let positive = self
                .annotations
                .as_ref()
                .map(|anns| anns.iter().any(|a| !a.boxes.is_empty()))
                .unwrap_or(false);
            self.video_label = Some(positive);
        }
        self.annotations = None;
        self
    }
}

/// The four data partitions.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetSplit {
    pub fully_labeled: Vec<VideoRecord>,
    pub weakly_labeled: Vec<VideoRecord>,
    pub validation: Vec<VideoRecord>,
    pub test: Vec<VideoRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRole {
    FullyLabeled,
    WeaklyLabeled,
    Validation,
    Test,
}

impl SplitRole {
    pub const ALL: [SplitRole; 4] =
        [SplitRole::FullyLabeled, SplitRole::WeaklyLabeled, SplitRole::Validation, SplitRole::Test];

    pub fn name(self) -> &'static str {
        match self {
            SplitRole::FullyLabeled => "fully_labeled",
            SplitRole::WeaklyLabeled => "weakly_labeled",
            SplitRole::Validation => "validation",
            SplitRole::Test => "test",
        }
    }
}

/// One broken split invariant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub role: SplitRole,
    pub video_id: String,
    pub message: String,
}

impl DatasetSplit {
    pub fn videos(&self, role: SplitRole) -> &[VideoRecord] {
        match role {
            SplitRole::FullyLabeled => &self.fully_labeled,
            SplitRole::WeaklyLabeled => &self.weakly_labeled,
            SplitRole::Validation => &self.validation,
            SplitRole::Test => &self.test,
        }
    }

    pub fn videos_mut(&mut self, role: SplitRole) -> &mut Vec<VideoRecord> {
        match role {
            SplitRole::FullyLabeled => &mut self.fully_labeled,
            SplitRole::WeaklyLabeled => &mut self.weakly_labeled,
            SplitRole::Validation => &mut self.validation,
            SplitRole::Test => &mut self.test,
        }
    }

    pub fn total_videos(&self) -> usize {
        SplitRole::ALL.iter().map(|r| self.videos(*r).len()).sum()
    }

    /// Number of frames in the fully labeled pool.
    pub fn labeled_frame_count(&self) -> usize {
        self.fully_labeled.iter().map(VideoRecord::num_frames).sum()
    }
}

/// Checks every split invariant, returning one entry per violation.
pub fn validate_split(split: &DatasetSplit) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut seen: HashMap<&str, SplitRole> = HashMap::new();

    for role in SplitRole::ALL {
        for video in split.videos(role) {
            let mut push = |message: String| {
                out.push(Violation { role, video_id: video.video_id.clone(), message })
            };

            if let Some(prev) = seen.insert(video.video_id.as_str(), role) {
                push(format!("duplicate video_id (also in {})", prev.name()));
            }

            let weak = role == SplitRole::WeaklyLabeled;
            match (&video.annotations, video.video_label) {
                (Some(_), None) if !weak => {}
                (None, Some(_)) if weak => {}
                _ if weak => push("weakly labeled video must carry only a video_label".into()),
                _ => push("annotated video must carry only frame annotations".into()),
            }

            if video.frames.is_empty() {
                push("video has no frames".into());
                continue;
            }
            let (w, h) = (video.frames[0].width, video.frames[0].height);
            if video.frames.iter().any(|f| f.width != w || f.height != h) {
                push("frames differ in size".into());
            }
            if video.frames.iter().any(|f| f.pixels.iter().any(|p| !(0.0..=1.0).contains(p))) {
                push("pixel values outside [0,1]".into());
            }

            if let Some(anns) = &video.annotations {
                let mut indices = HashSet::new();
                for ann in anns {
                    if ann.frame_index >= video.frames.len() {
                        push(format!("annotation for missing frame {}", ann.frame_index));
                    }
                    if !indices.insert(ann.frame_index) {
                        push(format!("frame {} annotated twice", ann.frame_index));
                    }
                    if ann.boxes.iter().any(|b| !b.is_valid()) {
                        push(format!("invalid box in frame {}", ann.frame_index));
                    }
                    for (i, a) in ann.boxes.iter().enumerate() {
                        if ann.boxes[..i].contains(a) {
                            push(format!("duplicate box in frame {}", ann.frame_index));
                        }
                    }
                }
            }
        }
    }
    out
}

/// Loss balancing weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_coord: f64,
    pub lambda_conf: f64,
    pub lambda_f_sup: f64,
    pub lambda_f_semi: f64,
    pub lambda_v_weak: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_coord: 0.05, lambda_conf: 1.0, lambda_f_sup: 1.0, lambda_f_semi: 0.5, lambda_v_weak: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_coord, self.lambda_conf, self.lambda_f_sup, self.lambda_f_semi, self.lambda_v_weak];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(invalid("loss weights must be finite and nonnegative"))
        }
    }
}

/// Teacher pseudo-label thresholds and re-weighting switches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PseudoLabelConfig {
    /// Keep threshold.
    pub beta: f64,
    /// Fallback threshold for positive videos with nothing above `beta`.
    pub beta_l: f64,
    pub use_weak_filtering: bool,
    pub use_soft_weights: bool,
}

impl Default for PseudoLabelConfig {
    fn default() -> Self {
        Self { beta: 0.5, beta_l: 0.1, use_weak_filtering: false, use_soft_weights: false }
    }
}

impl PseudoLabelConfig {
    /// Weak filtering plus squared-confidence weights, with both thresholds at 0.1.
    pub fn weighted() -> Self {
        Self { beta: 0.1, beta_l: 0.1, use_weak_filtering: true, use_soft_weights: true }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| v >= 0.0 && v <= 1.0;
        if !unit(self.beta) || !unit(self.beta_l) {
            return Err(invalid("pseudo-label thresholds must lie in [0,1]"));
        }
        if self.beta_l > self.beta {
            return Err(invalid("beta_l must not exceed beta"));
        }
        Ok(())
    }

    /// Lowest confidence a candidate needs to survive generation.
    pub fn candidate_floor(&self) -> f64 {
        if self.use_weak_filtering {
            self.beta.min(self.beta_l)
        } else {
            self.beta
        }
    }
}

/// EMA keep rates and the adaptive schedule shape.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TsmrConfig {
    /// Iteration-level keep rate (burn-in and mutual learning).
    pub alpha_i: f64,
    /// Epoch-level keep rate used during burn-in.
    pub alpha_e_burn_in: f64,
    /// Burn-in keep rates ramp up as `alpha * (1 - exp(-n / warmup))` over
    /// the first updates so the averages do not drag the random
    /// initialization along; 0 disables the ramp.
    pub warmup_iters: f64,
    pub warmup_epochs: f64,
    /// Teacher keep rate when the adaptive schedule is off.
    pub alpha_e_fixed: f64,
    pub alpha_e_min: f64,
    pub alpha_e_max: f64,
    pub alpha_inv_min: f64,
    pub tau0: f64,
    pub tau1: f64,
    pub tau2: f64,
    pub adaptive: bool,
}

impl Default for TsmrConfig {
    fn default() -> Self {
        Self {
            alpha_i: 0.99,
            alpha_e_burn_in: 0.6,
            warmup_iters: 150.0,
            warmup_epochs: 3.0,
            alpha_e_fixed: 0.95,
            alpha_e_min: 0.75,
            alpha_e_max: 0.99,
            alpha_inv_min: 0.85,
            tau0: 180.0,
            tau1: 3.0,
            tau2: 180.0,
            adaptive: false,
        }
    }
}

impl TsmrConfig {
    pub fn adaptive() -> Self {
        Self { adaptive: true, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [
            self.alpha_i,
            self.alpha_e_burn_in,
            self.alpha_e_fixed,
            self.alpha_e_min,
            self.alpha_e_max,
            self.alpha_inv_min,
        ];
        if rates.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(invalid("EMA keep rates must lie in [0,1]"));
        }
        if self.alpha_e_min >= self.alpha_e_max {
            return Err(invalid("alpha_e_min must be below alpha_e_max"));
        }
        if !(self.warmup_iters >= 0.0 && self.warmup_epochs >= 0.0) || !self.warmup_iters.is_finite() || !self.warmup_epochs.is_finite() {
            return Err(invalid("EMA warmup lengths must be finite and nonnegative"));
        }
        if ![self.tau0, self.tau1, self.tau2].iter().all(|t| t.is_finite()) {
            return Err(invalid("schedule temperatures must be finite"));
        }
        Ok(())
    }
}

/// Thresholds used whenever detections are produced for scoring.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub conf_floor: f64,
    pub nms_iou: f64,
    pub match_iou: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { conf_floor: 0.001, nms_iou: 0.45, match_iou: 0.5 }
    }
}

/// Update rule for the raw weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    /// Adam with beta1 0.9, beta2 0.999, eps 1e-8.
    Adam,
}

/// Optimization and sampling settings for both stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    /// Frames sampled from each weak video.
    pub frames_per_video: usize,
    pub epochs_burn_in: usize,
    pub epochs_mutual: usize,
    pub batch_size: usize,
    /// Weak sub-clips drawn per mutual-learning iteration.
    pub weak_clips_per_iter: usize,
    pub optimizer: OptimizerKind,
    /// Burn-in step size.
    pub learning_rate: f64,
    pub mutual_learning_rate: f64,
    /// Per-iteration gradient L2 norm cap; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    /// Student detections at or below this confidence are ignored by the
    /// video-level loss; a frame without any contributes 0.
    pub video_conf_threshold: f64,
    pub strong_aug: AugmentationSpec,
    pub reduced_aug: AugmentationSpec,
    pub eval: EvalConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            frames_per_video: 8,
            epochs_burn_in: 15,
            epochs_mutual: 10,
            batch_size: 16,
            weak_clips_per_iter: 2,
            optimizer: OptimizerKind::Adam,
            learning_rate: 0.01,
            mutual_learning_rate: 0.003,
            grad_clip: 0.0,
            seed: 0,
            video_conf_threshold: 0.001,
            strong_aug: AugmentationSpec::strong(),
            reduced_aug: AugmentationSpec::identity(),
            eval: EvalConfig::default(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames_per_video == 0 {
            return Err(invalid("frames_per_video must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be at least 1"));
        }
        if ![self.learning_rate, self.mutual_learning_rate].iter().all(|r| r.is_finite() && *r >= 0.0) {
            return Err(invalid("learning rates must be finite and nonnegative"));
        }
        self.strong_aug.validate()?;
        self.reduced_aug.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn video(id: &str, annotated: bool) -> VideoRecord {
        VideoRecord {
            video_id: id.into(),
            frames: vec![Frame::filled(8, 8, 0.5)],
            annotations: annotated.then(|| vec![FrameAnnotation::empty(0)]),
            video_label: (!annotated).then_some(true),
        }
    }

    fn well_formed() -> DatasetSplit {
        DatasetSplit {
            fully_labeled: vec![video("f0", true)],
            weakly_labeled: vec![video("w0", false)],
            validation: vec![video("v0", true)],
            test: vec![video("t0", true)],
        }
    }

    #[test]
    fn well_formed_split_has_no_violations() {
        assert!(validate_split(&well_formed()).is_empty());
    }

    #[test]
    fn weak_video_with_annotations_is_flagged() {
        let mut split = well_formed();
        split.weakly_labeled[0] = video("w0", true);
        let v = validate_split(&split);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].role, SplitRole::WeaklyLabeled);
    }

    #[test]
    fn duplicate_id_across_validation_and_test_is_flagged() {
        let mut split = well_formed();
        split.test[0].video_id = "v0".into();
        let v = validate_split(&split);
        assert_eq!(v.len(), 1);
        assert!(v[0].message.contains("duplicate"));
    }

    #[test]
    fn corner_conversion_round_trips() {
        let b = BoundingBox::new(0.31, 0.62, 0.2, 0.14).unwrap();
        let [x1, y1, x2, y2] = b.corners();
        let back = BoundingBox::from_corners(x1, y1, x2, y2).unwrap();
        for (a, b) in [(b.cx, back.cx), (b.cy, back.cy), (b.w, back.w), (b.h, back.h)] {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn box_bounds_are_enforced() {
        assert!(BoundingBox::new(0.5, 0.5, 0.0, 0.1).is_err());
        assert!(BoundingBox::new(1.1, 0.5, 0.1, 0.1).is_err());
        assert!(BoundingBox::new(0.5, 0.5, 1.0, 1.0).is_ok());
    }

    #[test]
    fn threshold_ordering_is_checked() {
        let bad = PseudoLabelConfig { beta: 0.1, beta_l: 0.3, ..Default::default() };
        assert!(bad.validate().is_err());
        assert!(PseudoLabelConfig::weighted().validate().is_ok());
    }
}
