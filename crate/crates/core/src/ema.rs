//! Parameter blending and keep-rate schedules.
//!
//! Burn-in keeps a per-iteration average of the raw weights and a
//! per-epoch average of that. During mutual learning the same two slots hold
//! the student and teacher; the teacher's keep rate adapts to the validation
//! gap between the two, and a teacher that pulls ahead is blended back into
//! the student.

use serde::{Deserialize, Serialize};

use crate::detector::ParameterVector;
use crate::error::{invalid, Result};
use crate::types::TsmrConfig;

/// `alpha * prev + (1 - alpha) * new`, elementwise.
pub fn blend(prev: &ParameterVector, new: &ParameterVector, alpha: f64) -> Result<ParameterVector> {
    if prev.len() != new.len() {
        return Err(invalid(format!("cannot blend vectors of length {} and {}", prev.len(), new.len())));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(invalid(format!("keep rate {alpha} outside [0,1]")));
    }
    Ok(ParameterVector(prev.0.iter().zip(&new.0).map(|(p, n)| alpha * p + (1.0 - alpha) * n).collect()))
}

/// Validation scores of teacher and student after an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub m_t: f64,
    pub m_s: f64,
}

impl EpochMetrics {
    pub fn new(m_t: f64, m_s: f64) -> Self {
        Self { m_t, m_s }
    }
}

#[inline]
fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Teacher keep rate: a logistic in the teacher-student gap between
/// `alpha_e_min` and `alpha_e_max`. A student ahead of the teacher lowers the
/// rate so the teacher catches up faster.
pub fn adaptive_alpha_e(m: &EpochMetrics, cfg: &TsmrConfig) -> f64 {
    let s = logistic(cfg.tau0 * (m.m_t - m.m_s) + cfg.tau1);
    cfg.alpha_e_min + (cfg.alpha_e_max - cfg.alpha_e_min) * s
}

/// Student keep rate for teacher-to-student transfer. 1 (no transfer) unless
/// the teacher is ahead; then it falls from 1 toward `alpha_inv_min` as the
/// gap widens.
pub fn inverse_alpha(m: &EpochMetrics, cfg: &TsmrConfig) -> f64 {
    if m.m_t <= m.m_s {
        return 1.0;
    }
    let s = logistic(cfg.tau2 * (m.m_s - m.m_t));
    cfg.alpha_inv_min + (2.0 - 2.0 * cfg.alpha_inv_min) * s
}

/// The raw, iteration-averaged and epoch-averaged weights. During mutual
/// learning `theta_iter` is the student and `theta_epoch` the teacher.
/// Optimization is plain SGD, so there is no further optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub theta: ParameterVector,
    pub theta_iter: ParameterVector,
    pub theta_epoch: ParameterVector,
}

impl ModelState {
    /// All three slots set to the same weights.
    pub fn uniform(params: ParameterVector) -> Self {
        Self { theta: params.clone(), theta_iter: params.clone(), theta_epoch: params }
    }

    pub fn is_finite(&self) -> bool {
        self.theta.is_finite() && self.theta_iter.is_finite() && self.theta_epoch.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmaEvent {
    Iteration,
    Epoch,
}

/// Keep rate after `updates` updates under an exponential warmup of
/// length `warmup`; the full rate once `warmup` is 0.
pub fn warmup_rate(alpha: f64, updates: usize, warmup: f64) -> f64 {
    if warmup <= 0.0 {
        alpha
    } else {
        alpha * (1.0 - (-(updates as f64) / warmup).exp())
    }
}

/// Hierarchical EMA: iterations move `theta_iter` toward `theta`, epochs
/// move `theta_epoch` toward `theta_iter`. The other slots are left as is.
pub fn burn_in_update(state: &mut ModelState, alpha_i: f64, alpha_e: f64, event: EmaEvent) -> Result<()> {
    match event {
        EmaEvent::Iteration => state.theta_iter = blend(&state.theta_iter, &state.theta, alpha_i)?,
        EmaEvent::Epoch => state.theta_epoch = blend(&state.theta_epoch, &state.theta_iter, alpha_e)?,
    }
    Ok(())
}

/// Keep rates applied by one [`tsmr_step`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleRecord {
    pub alpha_e: f64,
    pub alpha_inv: f64,
}

/// End-of-epoch transfer between student and teacher.
///
/// First the teacher absorbs the student at `alpha_e` (adaptive or fixed).
/// Then, in adaptive mode only, the updated teacher is blended into both the
/// student and the raw weights at `alpha_inv`.
pub fn tsmr_step(state: &mut ModelState, m: &EpochMetrics, cfg: &TsmrConfig) -> Result<ScheduleRecord> {
    let alpha_e = if cfg.adaptive { adaptive_alpha_e(m, cfg) } else { cfg.alpha_e_fixed };
    state.theta_epoch = blend(&state.theta_epoch, &state.theta_iter, alpha_e)?;

    let alpha_inv = if cfg.adaptive { inverse_alpha(m, cfg) } else { 1.0 };
    if alpha_inv < 1.0 {
        state.theta_iter = blend(&state.theta_iter, &state.theta_epoch, alpha_inv)?;
        state.theta = blend(&state.theta, &state.theta_epoch, alpha_inv)?;
    }
    Ok(ScheduleRecord { alpha_e, alpha_inv })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pv(v: &[f64]) -> ParameterVector {
        ParameterVector(v.to_vec())
    }

    #[test]
    fn blend_examples() {
        let a = pv(&[1.0, -2.0, 3.0]);
        let b = pv(&[0.5, 4.0, 7.0]);
        assert_eq!(blend(&a, &b, 1.0).unwrap(), a);
        assert_eq!(blend(&a, &b, 0.0).unwrap(), b);
        let got = blend(&pv(&[1.0; 4]), &pv(&[0.0; 4]), 0.95).unwrap();
        assert!(got.0.iter().all(|&x| (x - 0.95).abs() < 1e-15));
        assert!(blend(&a, &pv(&[1.0]), 0.5).is_err());
    }

    #[test]
    fn adaptive_alpha_e_examples() {
        let cfg = TsmrConfig::adaptive();
        let even = adaptive_alpha_e(&EpochMetrics::new(0.4, 0.4), &cfg);
        assert!((even - (0.75 + 0.24 / (1.0 + (-3f64).exp()))).abs() < 1e-12);
        assert!((even - 0.978618).abs() < 1e-6);
        assert!((adaptive_alpha_e(&EpochMetrics::new(0.5, 0.4), &cfg) - 0.99).abs() < 1e-6);
        assert!((adaptive_alpha_e(&EpochMetrics::new(0.4, 0.5), &cfg) - 0.75).abs() < 1e-6);
    }

    #[test]
    fn inverse_alpha_examples() {
        let cfg = TsmrConfig::adaptive();
        assert_eq!(inverse_alpha(&EpochMetrics::new(0.3, 0.3), &cfg), 1.0);
        assert_eq!(inverse_alpha(&EpochMetrics::new(0.2, 0.3), &cfg), 1.0);
        assert!((inverse_alpha(&EpochMetrics::new(0.3 + 1e-12, 0.3), &cfg) - 1.0).abs() < 1e-6);
        assert!((inverse_alpha(&EpochMetrics::new(0.5, 0.4), &cfg) - 0.85).abs() < 1e-6);
        assert!((inverse_alpha(&EpochMetrics::new(0.3 + 1e-6, 0.3), &cfg) - 1.0).abs() < 1e-3);
    }

    #[test]
    fn warmup_ramps_toward_the_full_rate() {
        assert_eq!(warmup_rate(0.99, 5, 0.0), 0.99);
        assert!((warmup_rate(0.6, 3, 3.0) - 0.6 * (1.0 - (-1.0f64).exp())).abs() < 1e-15);
        let r: Vec<f64> = (1..200).map(|n| warmup_rate(0.99, n, 20.0)).collect();
        assert!(r.windows(2).all(|w| w[1] > w[0]));
        assert!(r[0] < 0.05 && (0.99 - r[198]) < 1e-4);
    }

    #[test]
    fn burn_in_updates_are_isolated() {
        let mut s = ModelState::uniform(pv(&[0.3, 0.7]));
        let before = s.clone();
        burn_in_update(&mut s, 0.9, 0.5, EmaEvent::Iteration).unwrap();
        burn_in_update(&mut s, 0.9, 0.5, EmaEvent::Epoch).unwrap();
        assert_eq!(s, before);

        let mut s = ModelState { theta: pv(&[1.0; 3]), theta_iter: pv(&[0.0; 3]), theta_epoch: pv(&[5.0; 3]) };
        burn_in_update(&mut s, 0.99, 0.5, EmaEvent::Iteration).unwrap();
        assert_eq!(s.theta_epoch, pv(&[5.0; 3]));
        assert_eq!(s.theta, pv(&[1.0; 3]));
        assert!(s.theta_iter.0.iter().all(|&x| (x - 0.01).abs() < 1e-15));
    }

    fn distinct_state() -> ModelState {
        ModelState { theta: pv(&[2.0, 0.0]), theta_iter: pv(&[1.0, 1.0]), theta_epoch: pv(&[0.0, 3.0]) }
    }

    #[test]
    fn fixed_rate_step_only_moves_the_teacher() {
        let cfg = TsmrConfig::default();
        let mut s = distinct_state();
        let rec = tsmr_step(&mut s, &EpochMetrics::new(0.9, 0.1), &cfg).unwrap();
        assert_eq!(rec, ScheduleRecord { alpha_e: 0.95, alpha_inv: 1.0 });
        assert_eq!(s.theta_epoch, blend(&pv(&[0.0, 3.0]), &pv(&[1.0, 1.0]), 0.95).unwrap());
        assert_eq!(s.theta_iter, distinct_state().theta_iter);
        assert_eq!(s.theta, distinct_state().theta);
    }

    #[test]
    fn adaptive_step_transfers_back_when_teacher_leads() {
        let cfg = TsmrConfig::adaptive();
        let mut s = distinct_state();
        let rec = tsmr_step(&mut s, &EpochMetrics::new(0.3, 0.4), &cfg).unwrap();
        assert_eq!(rec.alpha_inv, 1.0);
        assert_eq!(s.theta_iter, distinct_state().theta_iter);

        let mut s = distinct_state();
        let rec = tsmr_step(&mut s, &EpochMetrics::new(0.5, 0.4), &cfg).unwrap();
        let teacher = blend(&distinct_state().theta_epoch, &distinct_state().theta_iter, rec.alpha_e).unwrap();
        assert_eq!(s.theta_epoch, teacher);
        for (k, (&before, &after)) in distinct_state().theta_iter.0.iter().zip(&s.theta_iter.0).enumerate() {
            let moved = (after - before) / (teacher.0[k] - before);
            assert!((moved - 0.15).abs() < 1e-6);
        }
    }

    #[test]
    fn unit_rates_make_the_step_an_identity() {
        let cfg = TsmrConfig { alpha_e_fixed: 1.0, ..TsmrConfig::default() };
        let mut s = distinct_state();
        tsmr_step(&mut s, &EpochMetrics::new(0.9, 0.1), &cfg).unwrap();
        assert_eq!(s, distinct_state());
    }

    proptest! {
        #[test]
        fn blend_is_affine(pairs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..20), alpha in 0.0f64..1.0) {
            let a = ParameterVector(pairs.iter().map(|p| p.0).collect());
            let b = ParameterVector(pairs.iter().map(|p| p.1).collect());
            let out = blend(&a, &b, alpha).unwrap();
            for i in 0..a.len() {
                prop_assert!(((out.0[i] - b.0[i]) - alpha * (a.0[i] - b.0[i])).abs() < 1e-12);
            }
        }
    }
}
