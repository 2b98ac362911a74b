//! Frame augmentation: horizontal flip, brightness/contrast jitter, additive noise.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::types::{Frame, FrameAnnotation};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationSpec {
    pub flip_prob: f64,
    /// Additive brightness offset drawn from `[-brightness, brightness]`.
    pub brightness: f64,
    /// Contrast gain drawn from `[1 - contrast, 1 + contrast]`, applied around the frame mean.
    pub contrast: f64,
    pub noise_sigma: f64,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self::identity()
    }
}

impl AugmentationSpec {
    pub const fn identity() -> Self {
        Self { flip_prob: 0.0, brightness: 0.0, contrast: 0.0, noise_sigma: 0.0 }
    }

    pub const fn strong() -> Self {
        Self { flip_prob: 0.5, brightness: 0.2, contrast: 0.2, noise_sigma: 0.02 }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(invalid("flip probability must lie in [0,1]"));
        }
        if [self.brightness, self.contrast, self.noise_sigma].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(invalid("jitter ranges must be finite and nonnegative"));
        }
        Ok(())
    }
}

/// Mirrors a frame left to right.
pub fn flip_horizontal(frame: &Frame) -> Frame {
    let mut out = frame.clone();
    for (dst, src) in out.pixels.chunks_exact_mut(frame.width).zip(frame.pixels.chunks_exact(frame.width)) {
        for (d, s) in dst.iter_mut().zip(src.iter().rev()) {
            *d = *s;
        }
    }
    out
}

/// Applies `spec` to a frame and its boxes. Random draws happen in a fixed
/// order (flip, brightness, contrast, noise) and are skipped for disabled
/// transforms, so an identity spec consumes no randomness.
pub fn apply_augmentation<R: Rng + ?Sized>(
    frame: &Frame,
    ann: Option<&FrameAnnotation>,
    spec: &AugmentationSpec,
    rng: &mut R,
) -> (Frame, Option<FrameAnnotation>) {
    let mut out = frame.clone();
    let mut ann = ann.cloned();
    if spec.is_identity() {
        return (out, ann);
    }

    if spec.flip_prob > 0.0 && rng.gen_bool(spec.flip_prob) {
        out = flip_horizontal(&out);
        if let Some(a) = ann.as_mut() {
            for b in &mut a.boxes {
                *b = b.flipped();
            }
        }
    }

    let offset = if spec.brightness > 0.0 { rng.gen_range(-spec.brightness..=spec.brightness) } else { 0.0 };
    let gain = if spec.contrast > 0.0 { rng.gen_range(1.0 - spec.contrast..=1.0 + spec.contrast) } else { 1.0 };
    if offset != 0.0 || gain != 1.0 {
        let mean = out.pixels.iter().map(|&p| p as f64).sum::<f64>() / out.pixels.len() as f64;
        for p in &mut out.pixels {
            *p = ((*p as f64 - mean) * gain + mean + offset) as f32;
        }
    }

    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma).expect("validated sigma");
        for p in &mut out.pixels {
            *p += normal.sample(rng) as f32;
        }
    }

    for p in &mut out.pixels {
        *p = p.clamp(0.0, 1.0);
    }
    (out, ann)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::BoundingBox;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp() -> Frame {
        let pixels = (0..16 * 8).map(|i| (i % 16) as f32 / 15.0).collect();
        Frame::new(16, 8, pixels).unwrap()
    }

    fn ann(cx: f64) -> FrameAnnotation {
        FrameAnnotation::new(0, vec![BoundingBox::new(cx, 0.5, 0.2, 0.2).unwrap()])
    }

    #[test]
    fn identity_leaves_everything_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (f, a) = apply_augmentation(&ramp(), Some(&ann(0.3)), &AugmentationSpec::identity(), &mut rng);
        assert_eq!(f, ramp());
        assert_eq!(a.unwrap(), ann(0.3));
    }

    #[test]
    fn certain_flip_mirrors_boxes() {
        let spec = AugmentationSpec { flip_prob: 1.0, ..AugmentationSpec::identity() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (f, a) = apply_augmentation(&ramp(), Some(&ann(0.3)), &spec, &mut rng);
        assert!((a.as_ref().unwrap().boxes[0].cx - 0.7).abs() < 1e-12);
        assert_eq!(f.get(0, 0), ramp().get(15, 0));

        let (f2, a2) = apply_augmentation(&f, a.as_ref(), &spec, &mut rng);
        assert_eq!(f2, ramp());
        assert!((a2.unwrap().boxes[0].cx - 0.3).abs() < 1e-12);
    }

    #[test]
    fn photometric_jitter_keeps_boxes_and_clips_pixels() {
        let spec = AugmentationSpec { flip_prob: 0.0, brightness: 0.8, contrast: 0.9, noise_sigma: 0.3 };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let (f, a) = apply_augmentation(&ramp(), Some(&ann(0.3)), &spec, &mut rng);
            assert_eq!(a.unwrap(), ann(0.3));
            assert!(f.pixels.iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }
}
