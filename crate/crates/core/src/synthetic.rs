//! Deterministic synthetic videos with a drifting bright target.
//!
//! Positive videos contain one bright Gaussian ellipse that drifts across a
//! speckled background and is visible over a contiguous run of at least
//! `min_visible_fraction` of the frames. Every video, positive or not, also
//! carries distractors: dimmer round blobs, bright thin streaks and dark
//! blobs. Recorded boxes are the axis-aligned extent of the target's
//! 2-sigma ellipse.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::types::{BoundingBox, DatasetSplit, Frame, FrameAnnotation, SplitRole, VideoRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub image_size: usize,
    pub frames_per_video: usize,
    pub fully_labeled: usize,
    pub weakly_labeled: usize,
    pub validation: usize,
    pub test: usize,
    /// Share of positive videos in every split.
    pub positive_fraction: f64,
    /// Target standard deviation range along each principal axis, pixels.
    pub target_sigma: (f64, f64),
    /// Target peak brightness range above background.
    pub target_contrast: (f64, f64),
    pub min_visible_fraction: f64,
    /// Distractors per video, inclusive range.
    pub distractors: (usize, usize),
    /// Peak brightness range of bright distractors.
    pub distractor_contrast: (f64, f64),
    /// Drift speed, pixels per frame.
    pub drift_speed: f64,
    /// Per-frame positional jitter, pixels.
    pub jitter: f64,
    pub background_level: f64,
    pub speckle_sigma: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            frames_per_video: 30,
            fully_labeled: 40,
            weakly_labeled: 200,
            validation: 30,
            test: 50,
            positive_fraction: 0.5,
            target_sigma: (2.0, 4.0),
            target_contrast: (0.35, 0.6),
            min_visible_fraction: 0.6,
            distractors: (1, 3),
            distractor_contrast: (0.15, 0.3),
            drift_speed: 0.5,
            jitter: 0.3,
            background_level: 0.3,
            speckle_sigma: 0.06,
            seed: 2023,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames_per_video == 0 {
            return Err(invalid("frames_per_video must be at least 1"));
        }
        if self.image_size < 16 {
            return Err(invalid("image_size must be at least 16"));
        }
        if !(0.0..=1.0).contains(&self.positive_fraction) || !(0.0..=1.0).contains(&self.min_visible_fraction) {
            return Err(invalid("fractions must lie in [0,1]"));
        }
        let ordered = |r: (f64, f64)| r.0 <= r.1 && r.0 >= 0.0;
        if !ordered(self.target_sigma) || !ordered(self.target_contrast) || !ordered(self.distractor_contrast) {
            return Err(invalid("ranges must be ordered and nonnegative"));
        }
        if self.target_sigma.0 <= 0.0 || 4.0 * self.target_sigma.1 >= self.image_size as f64 {
            return Err(invalid("target sigma must be positive and fit the frame"));
        }
        if self.distractors.0 > self.distractors.1 {
            return Err(invalid("distractor range must be ordered"));
        }
        Ok(())
    }

    pub fn count(&self, role: SplitRole) -> usize {
        match role {
            SplitRole::FullyLabeled => self.fully_labeled,
            SplitRole::WeaklyLabeled => self.weakly_labeled,
            SplitRole::Validation => self.validation,
            SplitRole::Test => self.test,
        }
    }
}

/// Rotated Gaussian ellipse, pixel units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub sigma_u: f64,
    pub sigma_v: f64,
    /// Rotation of the `u` axis, radians.
    pub angle: f64,
    pub amplitude: f64,
}

impl Ellipse {
    /// Half-extents of the 2-sigma level set along x and y.
    pub fn half_extent(&self) -> (f64, f64) {
        let (s, c) = self.angle.sin_cos();
        let hx = 2.0 * (self.sigma_u.powi(2) * c * c + self.sigma_v.powi(2) * s * s).sqrt();
        let hy = 2.0 * (self.sigma_u.powi(2) * s * s + self.sigma_v.powi(2) * c * c).sqrt();
        (hx, hy)
    }

    /// Squared Mahalanobis distance of a point from the center.
    pub fn mahalanobis2(&self, x: f64, y: f64) -> f64 {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.sigma_u).powi(2) + (v / self.sigma_v).powi(2)
    }

    /// Normalized box of the 2-sigma extent, clipped to the frame.
    pub fn bounding_box(&self, size: usize) -> Option<BoundingBox> {
        let s = size as f64;
        let (hx, hy) = self.half_extent();
        let x1 = (self.cx - hx).clamp(0.0, s);
        let x2 = (self.cx + hx).clamp(0.0, s);
        let y1 = (self.cy - hy).clamp(0.0, s);
        let y2 = (self.cy + hy).clamp(0.0, s);
        BoundingBox::from_corners(x1 / s, y1 / s, x2 / s, y2 / s).ok()
    }

    fn render(&self, pixels: &mut [f64], size: usize) {
        let (hx, hy) = self.half_extent();
        // 2-sigma box times 2 covers everything above exp(-8)
        let x0 = (self.cx - 2.0 * hx).floor().max(0.0) as usize;
        let x1 = ((self.cx + 2.0 * hx).ceil().max(0.0) as usize).min(size);
        let y0 = (self.cy - 2.0 * hy).floor().max(0.0) as usize;
        let y1 = ((self.cy + 2.0 * hy).ceil().max(0.0) as usize).min(size);
        for y in y0..y1 {
            for x in x0..x1 {
                let d2 = self.mahalanobis2(x as f64 + 0.5, y as f64 + 0.5);
                pixels[y * size + x] += self.amplitude * (-0.5 * d2).exp();
            }
        }
    }
}

struct Mover {
    shape: Ellipse,
    vx: f64,
    vy: f64,
    margin: (f64, f64),
}

impl Mover {
    fn new<R: Rng>(shape: Ellipse, speed: f64, size: usize, rng: &mut R) -> Self {
        let heading = rng.gen_range(0.0..std::f64::consts::TAU);
        let (hx, hy) = shape.half_extent();
        let margin = (hx.min(size as f64 / 2.0 - 1.0), hy.min(size as f64 / 2.0 - 1.0));
        Self { shape, vx: speed * heading.cos(), vy: speed * heading.sin(), margin }
    }

    /// Moves one frame, bouncing so the 2-sigma box stays inside the frame.
    fn step<R: Rng>(&mut self, jitter: f64, size: usize, rng: &mut R) {
        let s = size as f64;
        let jx = if jitter > 0.0 { rng.gen_range(-jitter..=jitter) } else { 0.0 };
        let jy = if jitter > 0.0 { rng.gen_range(-jitter..=jitter) } else { 0.0 };
        self.shape.cx += self.vx + jx;
        self.shape.cy += self.vy + jy;
        let (mx, my) = self.margin;
        if self.shape.cx < mx || self.shape.cx > s - mx {
            self.vx = -self.vx;
            self.shape.cx = self.shape.cx.clamp(mx, s - mx);
        }
        if self.shape.cy < my || self.shape.cy > s - my {
            self.vy = -self.vy;
            self.shape.cy = self.shape.cy.clamp(my, s - my);
        }
    }
}

fn place<R: Rng>(shape: &mut Ellipse, size: usize, rng: &mut R) {
    let (hx, hy) = shape.half_extent();
    let s = size as f64;
    let (mx, my) = (hx.min(s / 2.0 - 1.0), hy.min(s / 2.0 - 1.0));
    shape.cx = rng.gen_range(mx..=s - mx);
    shape.cy = rng.gen_range(my..=s - my);
}

fn range<R: Rng>(r: (f64, f64), rng: &mut R) -> f64 {
    if r.0 < r.1 {
        rng.gen_range(r.0..=r.1)
    } else {
        r.0
    }
}

/// The drawn target for each frame of a video, `None` where it is hidden.
#[derive(Debug, Clone)]
pub struct GeneratedVideo {
    pub record: VideoRecord,
    pub targets: Vec<Option<Ellipse>>,
}

/// One synthetic video. The record carries both the frame annotations and
/// the video label; [`generate_splits`] drops whichever a split does not use.
pub fn generate_video<R: Rng>(cfg: &GeneratorConfig, video_id: &str, positive: bool, rng: &mut R) -> GeneratedVideo {
    let size = cfg.image_size;
    let t_len = cfg.frames_per_video;
    let speckle = Normal::new(0.0, cfg.speckle_sigma.max(0.0)).expect("finite sigma");

    let mut target = positive.then(|| {
        let mut shape = Ellipse {
            cx: 0.0,
            cy: 0.0,
            sigma_u: range(cfg.target_sigma, rng),
            sigma_v: range(cfg.target_sigma, rng),
            angle: rng.gen_range(0.0..std::f64::consts::PI),
            amplitude: range(cfg.target_contrast, rng),
        };
        place(&mut shape, size, rng);
        Mover::new(shape, cfg.drift_speed, size, rng)
    });
    let visible = if positive {
        let min_len = ((cfg.min_visible_fraction * t_len as f64).ceil() as usize).clamp(1, t_len);
        let len = rng.gen_range(min_len..=t_len);
        let start = rng.gen_range(0..=t_len - len);
        start..start + len
    } else {
        0..0
    };

    let n_distractors = rng.gen_range(cfg.distractors.0..=cfg.distractors.1);
    let mut distractors: Vec<Mover> = (0..n_distractors)
        .map(|_| {
            let kind = rng.gen_range(0..3);
            let mut shape = match kind {
                // dim blob, similar in size to the target
                0 => Ellipse {
                    cx: 0.0,
                    cy: 0.0,
                    sigma_u: range(cfg.target_sigma, rng),
                    sigma_v: range(cfg.target_sigma, rng),
                    angle: rng.gen_range(0.0..std::f64::consts::PI),
                    amplitude: range(cfg.distractor_contrast, rng),
                },
                // bright thin streak
                1 => Ellipse {
                    cx: 0.0,
                    cy: 0.0,
                    sigma_u: range((cfg.target_sigma.1 * 1.5, cfg.target_sigma.1 * 2.5), rng),
                    sigma_v: rng.gen_range(0.7..1.3),
                    angle: rng.gen_range(-0.3..0.3),
                    amplitude: range((cfg.distractor_contrast.1, cfg.target_contrast.1), rng),
                },
                // dark blob
                _ => Ellipse {
                    cx: 0.0,
                    cy: 0.0,
                    sigma_u: range(cfg.target_sigma, rng) * 1.2,
                    sigma_v: range(cfg.target_sigma, rng) * 1.2,
                    angle: rng.gen_range(0.0..std::f64::consts::PI),
                    amplitude: -range(cfg.distractor_contrast, rng),
                },
            };
            place(&mut shape, size, rng);
            Mover::new(shape, cfg.drift_speed * 0.5, size, rng)
        })
        .collect();

    // depth-dependent brightness falloff shared by all frames of the video
    let tilt = rng.gen_range(0.05..0.15);
    let mut frames = Vec::with_capacity(t_len);
    let mut annotations = Vec::with_capacity(t_len);
    let mut targets = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let mut px = vec![0.0f64; size * size];
        for y in 0..size {
            let level = cfg.background_level * (1.0 - tilt * y as f64 / size as f64);
            px[y * size..(y + 1) * size].fill(level);
        }
        for d in &distractors {
            d.shape.render(&mut px, size);
        }
        let shown = target.as_ref().filter(|_| visible.contains(&t)).map(|m| m.shape);
        if let Some(shape) = shown {
            shape.render(&mut px, size);
        }
        for p in &mut px {
            *p *= 1.0 + speckle.sample(rng);
            *p += 0.25 * speckle.sample(rng);
        }
        let mut frame = Frame {
            width: size,
            height: size,
            pixels: px.iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect(),
        };
        frame.quantize();
        frames.push(frame);

        let boxes = shown.and_then(|s| s.bounding_box(size)).into_iter().collect();
        annotations.push(FrameAnnotation::new(t, boxes));
        targets.push(shown);

        if let Some(m) = target.as_mut() {
            m.step(cfg.jitter, size, rng);
        }
        for d in &mut distractors {
            d.step(cfg.jitter, size, rng);
        }
    }

    GeneratedVideo {
        record: VideoRecord {
            video_id: video_id.to_string(),
            frames,
            annotations: Some(annotations),
            video_label: Some(positive),
        },
        targets,
    }
}

/// SplitMix64 finalizer, used to derive independent per-video seeds.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn role_prefix(role: SplitRole) -> &'static str {
    match role {
        SplitRole::FullyLabeled => "full",
        SplitRole::WeaklyLabeled => "weak",
        SplitRole::Validation => "val",
        SplitRole::Test => "test",
    }
}

/// Every video of every split with full ground truth, in split order. Each
/// split holds exactly `round(count * positive_fraction)` positives in
/// shuffled order, and every video draws from its own seed.
pub fn generate_ground_truth(cfg: &GeneratorConfig) -> Result<Vec<(SplitRole, Vec<GeneratedVideo>)>> {
    cfg.validate()?;
    let mut out = Vec::new();
    for (r, role) in SplitRole::ALL.into_iter().enumerate() {
        let n = cfg.count(role);
        let n_pos = (n as f64 * cfg.positive_fraction).round() as usize;
        let mut labels: Vec<bool> = (0..n).map(|i| i < n_pos).collect();
        labels.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 1000 + r as u64)));
        let videos = labels
            .into_iter()
            .enumerate()
            .map(|(i, positive)| {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, ((r as u64) << 32) | i as u64));
                generate_video(cfg, &format!("{}_{:04}", role_prefix(role), i), positive, &mut rng)
            })
            .collect();
        out.push((role, videos));
    }
    Ok(out)
}

/// Generates all four splits, keeping frame boxes or video labels as each
/// split's role requires.
pub fn generate_splits(cfg: &GeneratorConfig) -> Result<DatasetSplit> {
    let mut split = DatasetSplit::default();
    for (role, videos) in generate_ground_truth(cfg)? {
        *split.videos_mut(role) = videos
            .into_iter()
            .map(|g| match role {
                SplitRole::WeaklyLabeled => g.record.as_weakly_labeled(),
                _ => g.record.as_fully_labeled(),
            })
            .collect();
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nms::iou;
    use crate::types::validate_split;

    fn small_cfg() -> GeneratorConfig {
        GeneratorConfig { fully_labeled: 3, weakly_labeled: 4, validation: 2, test: 2, frames_per_video: 10, ..Default::default() }
    }

    #[test]
    fn negative_videos_have_no_boxes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = generate_video(&GeneratorConfig::default(), "n", false, &mut rng).record;
        assert_eq!(v.video_label, Some(false));
        assert!(v.annotations.unwrap().iter().all(|a| a.boxes.is_empty()));
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_video(&GeneratorConfig::default(), "a", true, &mut ChaCha8Rng::seed_from_u64(9));
        let b = generate_video(&GeneratorConfig::default(), "a", true, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a.record, b.record);
        assert_eq!(generate_splits(&small_cfg()).unwrap(), generate_splits(&small_cfg()).unwrap());
    }

    /// Bounding box of the 2-sigma ellipse found by sampling a fine grid.
    fn sampled_extent(e: &Ellipse, size: usize) -> Option<BoundingBox> {
        let steps = size * 16;
        let h = size as f64 / steps as f64;
        let (mut x1, mut y1, mut x2, mut y2) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
        for j in 0..steps {
            for i in 0..steps {
                let (x, y) = ((i as f64 + 0.5) * h, (j as f64 + 0.5) * h);
                if e.mahalanobis2(x, y) <= 4.0 {
                    x1 = x1.min(x);
                    y1 = y1.min(y);
                    x2 = x2.max(x);
                    y2 = y2.max(y);
                }
            }
        }
        let s = size as f64;
        (x2 > x1).then(|| BoundingBox::from_corners(x1 / s, y1 / s, x2 / s, y2 / s).unwrap())
    }

    #[test]
    fn positive_boxes_match_sampled_ellipse_extent() {
        let cfg = GeneratorConfig::default();
        for seed in 0..6 {
            let g = generate_video(&cfg, "p", true, &mut ChaCha8Rng::seed_from_u64(seed));
            let anns = g.record.annotations.as_ref().unwrap();
            let visible = anns.iter().filter(|a| !a.boxes.is_empty()).count();
            assert!(visible as f64 >= 0.6 * cfg.frames_per_video as f64);
            for (ann, target) in anns.iter().zip(&g.targets).step_by(5) {
                match target {
                    Some(e) => {
                        let oracle = sampled_extent(e, cfg.image_size).unwrap();
                        assert!(iou(&ann.boxes[0], &oracle) >= 0.9);
                    }
                    None => assert!(ann.boxes.is_empty()),
                }
            }
        }
    }

    #[test]
    fn split_roles_carry_the_right_labels() {
        let split = generate_splits(&small_cfg()).unwrap();
        assert!(validate_split(&split).is_empty());
        assert!(split.weakly_labeled.iter().all(|v| v.annotations.is_none() && v.video_label.is_some()));
        assert!(split.test.iter().all(|v| v.annotations.is_some() && v.video_label.is_none()));
    }

    #[test]
    fn zero_counts_give_an_empty_split() {
        let cfg = GeneratorConfig { fully_labeled: 0, weakly_labeled: 0, validation: 0, test: 0, ..Default::default() };
        assert_eq!(generate_splits(&cfg).unwrap().total_videos(), 0);
    }

    #[test]
    fn frames_are_quantized_and_in_range() {
        let v = generate_video(&GeneratorConfig::default(), "q", true, &mut ChaCha8Rng::seed_from_u64(3)).record;
        for f in &v.frames {
            for &p in &f.pixels {
                assert!((0.0..=1.0).contains(&p));
                let level = p * 255.0;
                assert!((level - level.round()).abs() < 1e-3);
            }
        }
    }
}
