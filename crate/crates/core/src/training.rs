//! The two training stages.
//!
//! Burn-in trains the raw weights on annotated frames and maintains the
//! iteration and epoch averages. Mutual learning starts every slot from the
//! burn-in epoch average; each iteration the teacher labels a weak sub-clip,
//! the raw weights take one step on the combined loss and the student
//! tracks them, and each epoch ends with the teacher-student transfer.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::apply_augmentation;
use crate::detector::{Detector, ParameterVector};
use crate::ema::{burn_in_update, tsmr_step, warmup_rate, EmaEvent, EpochMetrics, ModelState};
use crate::error::{invalid, Error, Result};
use crate::evaluation::evaluate_map;
use crate::io::{save_params, write_csv, write_json, write_jsonl};
use crate::losses::{annotation_targets, pseudo_targets, CompositeLoss, FrameRole, LossBreakdown, WeakClip};
use crate::pseudo_labels::{finalize, generate, PseudoLabel, PseudoLabelSet};
use crate::synthetic::mix_seed;
use crate::types::{
    DatasetSplit, EvalConfig, Frame, FrameAnnotation, LossWeights, OptimizerKind, PseudoLabelConfig, TrainingConfig, TsmrConfig,
    VideoRecord,
};

/// Evenly spaced frame indices `round(t * (T - 1) / (n - 1))`.
pub fn subclip_indices(num_frames: usize, n_fpv: usize) -> Result<Vec<usize>> {
    if num_frames == 0 {
        return Err(invalid("cannot sample from an empty video"));
    }
    if n_fpv == 0 {
        return Err(invalid("n_fpv must be at least 1"));
    }
    if n_fpv == 1 {
        return Ok(vec![0]);
    }
    let span = (num_frames - 1) as f64;
    Ok((0..n_fpv).map(|t| (t as f64 * span / (n_fpv - 1) as f64).round() as usize).collect())
}

pub fn sample_subclip(video: &VideoRecord, n_fpv: usize) -> Result<Vec<&Frame>> {
    Ok(subclip_indices(video.num_frames(), n_fpv)?.into_iter().map(|i| &video.frames[i]).collect())
}

/// One row of `curves.csv`. Validation mAP columns are empty for models a
/// stage does not track.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub stage: String,
    pub epoch: usize,
    pub loss_sup: f64,
    pub loss_semi: f64,
    pub loss_weak: f64,
    pub loss_total: f64,
    pub val_map_theta: Option<f64>,
    pub val_map_iter: Option<f64>,
    pub val_map_epoch: Option<f64>,
    pub pseudo_labels: usize,
}

/// One row of `schedule.csv`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleRow {
    pub epoch: usize,
    pub m_t: f64,
    pub m_s: f64,
    pub alpha_e: f64,
    pub alpha_inv: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    pub state: ModelState,
    pub curves: Vec<CurveRow>,
    pub schedule: Vec<ScheduleRow>,
}

/// Where and how much a run writes. With no directory nothing touches disk.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub run_dir: Option<PathBuf>,
    /// Save every epoch's three parameter vectors under `checkpoints/`.
    pub checkpoint_every_epoch: bool,
    /// Write each epoch's final pseudo-labels under `pseudo_labels/`.
    pub dump_pseudo_labels: bool,
    pub verbose: bool,
}

fn save_state(dir: &Path, stem: &str, state: &ModelState) -> Result<()> {
    let ckpt = dir.join("checkpoints");
    fs::create_dir_all(&ckpt)?;
    save_params(&ckpt.join(format!("{stem}.theta")), &state.theta)?;
    save_params(&ckpt.join(format!("{stem}.theta_iter")), &state.theta_iter)?;
    save_params(&ckpt.join(format!("{stem}.theta_epoch")), &state.theta_epoch)
}

impl RunOptions {
    fn epoch_done(&self, stage: &str, epoch: usize, state: &ModelState) -> Result<()> {
        match &self.run_dir {
            Some(dir) if self.checkpoint_every_epoch => save_state(dir, &format!("{stage}_epoch_{epoch}"), state),
            _ => Ok(()),
        }
    }

    /// Persists the last good state before a numeric failure propagates.
    fn abort(&self, state: &ModelState, err: Error) -> Error {
        if let Some(dir) = &self.run_dir {
            if let Err(e) = save_state(dir, "last_good", state) {
                return Error::Numeric(format!("{err}; saving last good checkpoint also failed: {e}"));
            }
        }
        err
    }

    fn log(&self, row: &CurveRow) {
        if self.verbose {
            let fmt = |m: Option<f64>| m.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
            eprintln!(
                "[{}] epoch {:>3} loss {:.4} (sup {:.4} semi {:.4} weak {:.4}) val mAP theta {} iter {} epoch {}",
                row.stage,
                row.epoch,
                row.loss_total,
                row.loss_sup,
                row.loss_semi,
                row.loss_weak,
                fmt(row.val_map_theta),
                fmt(row.val_map_iter),
                fmt(row.val_map_epoch)
            );
        }
    }
}

/// Annotated frames of the given videos, one entry per frame.
pub fn labeled_frames(videos: &[VideoRecord]) -> Result<Vec<(&Frame, FrameAnnotation)>> {
    let mut out = Vec::new();
    for v in videos {
        if v.annotations.is_none() {
            return Err(invalid(format!("video {} has no frame annotations", v.video_id)));
        }
        for (t, f) in v.frames.iter().enumerate() {
            out.push((f, FrameAnnotation::new(t, v.boxes_at(t).to_vec())));
        }
    }
    Ok(out)
}

/// Raw-weight update rule with its moment estimates. Each stage starts
/// with fresh moments; the teacher-student transfer leaves them untouched.
struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    clip: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Optimizer {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(cfg: &TrainingConfig, lr: f64, n: usize) -> Self {
        let moments = if cfg.optimizer == OptimizerKind::Adam { n } else { 0 };
        Self { kind: cfg.optimizer, lr, clip: cfg.grad_clip, m: vec![0.0; moments], v: vec![0.0; moments], t: 0 }
    }

    fn step(&mut self, theta: &mut ParameterVector, grad: &ParameterVector) {
        let mut scale = 1.0;
        if self.clip > 0.0 {
            let norm = grad.norm();
            if norm > self.clip {
                scale = self.clip / norm;
            }
        }
        match self.kind {
            OptimizerKind::Sgd => theta.add_scaled(grad, -self.lr * scale),
            OptimizerKind::Adam => {
                self.t += 1;
                let c1 = 1.0 - Self::BETA1.powi(self.t);
                let c2 = 1.0 - Self::BETA2.powi(self.t);
                for (((p, &g), m), v) in theta.0.iter_mut().zip(&grad.0).zip(&mut self.m).zip(&mut self.v) {
                    let g = g * scale;
                    *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
                    *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
                    *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
                }
            }
        }
    }
}

/// Shuffled index order, refilled whenever it runs out.
struct Cycler {
    order: Vec<usize>,
    pos: usize,
}

impl Cycler {
    fn new(n: usize) -> Self {
        Self { order: (0..n).collect(), pos: n }
    }

    fn next<R: Rng>(&mut self, rng: &mut R) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

#[derive(Default)]
struct LossMeans {
    sum: LossBreakdown,
    n: usize,
}

impl LossMeans {
    fn add(&mut self, b: &LossBreakdown) {
        self.sum.sup += b.sup;
        self.sum.semi += b.semi;
        self.sum.weak += b.weak;
        self.sum.total += b.total;
        self.n += 1;
    }

    fn mean(&self) -> LossBreakdown {
        let n = self.n.max(1) as f64;
        LossBreakdown { sup: self.sum.sup / n, semi: self.sum.semi / n, weak: self.sum.weak / n, total: self.sum.total / n }
    }
}

fn iterations_per_epoch(labeled: usize, batch: usize) -> usize {
    labeled.div_ceil(batch)
}

/// Fresh weights for a detector, drawn from the run seed.
pub fn initial_state(detector: &Detector, seed: u64) -> ModelState {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0));
    ModelState::uniform(detector.init_params(&mut rng))
}

/// Supervised burn-in on the fully labeled split. Validation mAP of the raw
/// and epoch-averaged weights is recorded after every epoch.
pub fn run_burn_in(
    detector: &Detector,
    split: &DatasetSplit,
    init: ModelState,
    cfg: &TrainingConfig,
    tsmr: &TsmrConfig,
    weights: &LossWeights,
    opts: &RunOptions,
) -> Result<StageOutcome> {
    cfg.validate()?;
    tsmr.validate()?;
    let labeled = labeled_frames(&split.fully_labeled)?;
    if labeled.is_empty() {
        return Err(invalid("burn-in needs at least one fully labeled frame"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 1));
    let mut state = init;
    let mut opt = Optimizer::new(cfg, cfg.learning_rate, state.theta.len());
    let mut curves = Vec::new();
    let mut order: Vec<usize> = (0..labeled.len()).collect();
    let mut iters = 0usize;
    for epoch in 0..cfg.epochs_burn_in {
        order.shuffle(&mut rng);
        let mut means = LossMeans::default();
        for chunk in order.chunks(cfg.batch_size) {
            let (frames, anns): (Vec<Frame>, Vec<FrameAnnotation>) = chunk
                .iter()
                .map(|&i| {
                    let (f, a) = apply_augmentation(labeled[i].0, Some(&labeled[i].1), &cfg.strong_aug, &mut rng);
                    (f, a.expect("annotation passes through"))
                })
                .unzip();
            let refs: Vec<&Frame> = frames.iter().collect();
            let mut parts = LossBreakdown::default();
            let step = detector.gradient(&state.theta, &refs, |preds| {
                let roles = preds.iter().zip(&anns).map(|(p, a)| FrameRole::Supervised(annotation_targets(p, a))).collect();
                let loss = CompositeLoss { weights: *weights, prior: detector.size_prior(), eval: cfg.eval, roles, clips: Vec::new() };
                let (value, b) = loss.evaluate(preds)?;
                parts = b;
                Ok(value)
            });
            let (_, grad) = step.map_err(|e| opts.abort(&state, e))?;
            opt.step(&mut state.theta, &grad);
            iters += 1;
            burn_in_update(&mut state, warmup_rate(tsmr.alpha_i, iters, tsmr.warmup_iters), 1.0, EmaEvent::Iteration)?;
            means.add(&parts);
        }
        let alpha_e = warmup_rate(tsmr.alpha_e_burn_in, epoch + 1, tsmr.warmup_epochs);
        burn_in_update(&mut state, 1.0, alpha_e, EmaEvent::Epoch)?;
        if !state.is_finite() {
            return Err(opts.abort(&state, Error::Numeric("non-finite parameters after burn-in epoch".into())));
        }
        let m = means.mean();
        let row = CurveRow {
            stage: "burn_in".into(),
            epoch,
            loss_sup: m.sup,
            loss_semi: 0.0,
            loss_weak: 0.0,
            loss_total: m.total,
            val_map_theta: Some(evaluate_map(detector, &state.theta, &split.validation, &cfg.eval)?),
            val_map_iter: None,
            val_map_epoch: Some(evaluate_map(detector, &state.theta_epoch, &split.validation, &cfg.eval)?),
            pseudo_labels: 0,
        };
        opts.log(&row);
        curves.push(row);
        opts.epoch_done("burn_in", epoch, &state)?;
    }
    Ok(StageOutcome { state, curves, schedule: Vec::new() })
}

#[derive(Serialize)]
struct PseudoLabelDump<'a> {
    epoch: usize,
    video_id: &'a str,
    frame_index: usize,
    labels: &'a [PseudoLabel],
}

/// Teacher-student mutual learning over the fully and weakly labeled
/// splits. Weak videos whose `video_label` is `None` are treated as
/// unlabeled: they get plain-threshold pseudo-labels and no video loss.
#[allow(clippy::too_many_arguments)]
pub fn run_mutual_learning(
    detector: &Detector,
    split: &DatasetSplit,
    init: ModelState,
    cfg: &TrainingConfig,
    tsmr: &TsmrConfig,
    plcfg: &PseudoLabelConfig,
    weights: &LossWeights,
    opts: &RunOptions,
) -> Result<StageOutcome> {
    cfg.validate()?;
    tsmr.validate()?;
    plcfg.validate()?;
    weights.validate()?;
    let labeled = labeled_frames(&split.fully_labeled)?;
    if labeled.is_empty() || split.weakly_labeled.is_empty() {
        return Err(invalid("mutual learning needs fully and weakly labeled videos"));
    }
    let weak = &split.weakly_labeled;
    let subclips = weak
        .iter()
        .map(|v| subclip_indices(v.num_frames(), cfg.frames_per_video))
        .collect::<Result<Vec<_>>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 2));
    let mut weak_cycle = Cycler::new(weak.len());
    let mut state = init;
    let mut opt = Optimizer::new(cfg, cfg.mutual_learning_rate, state.theta.len());
    let mut curves = Vec::new();
    let mut schedule = Vec::new();
    let mut order: Vec<usize> = (0..labeled.len()).collect();
    let iters = iterations_per_epoch(labeled.len(), cfg.batch_size);
    let video_eval = EvalConfig { conf_floor: cfg.video_conf_threshold.max(cfg.eval.conf_floor), ..cfg.eval };

    for epoch in 0..cfg.epochs_mutual {
        order.shuffle(&mut rng);
        let mut means = LossMeans::default();
        let mut n_pseudo = 0usize;
        let mut dump = Vec::new();
        for it in 0..iters {
            let chunk = &order[it * cfg.batch_size..((it + 1) * cfg.batch_size).min(order.len())];
            let mut frames = Vec::with_capacity(chunk.len() + cfg.weak_clips_per_iter * cfg.frames_per_video);
            let mut anns = Vec::with_capacity(frames.capacity());
            for &i in chunk {
                let (f, a) = apply_augmentation(labeled[i].0, Some(&labeled[i].1), &cfg.strong_aug, &mut rng);
                frames.push(f);
                anns.push((true, a.expect("annotation passes through"), Vec::new()));
            }

            let mut clips = Vec::new();
            for _ in 0..cfg.weak_clips_per_iter {
                let j = weak_cycle.next(&mut rng);
                let video = &weak[j];
                let teacher_view: Vec<Frame> = subclips[j]
                    .iter()
                    .map(|&t| apply_augmentation(&video.frames[t], None, &cfg.reduced_aug, &mut rng).0)
                    .collect();
                let refs: Vec<&Frame> = teacher_view.iter().collect();
                let candidates =
                    generate(detector, &state.theta_epoch, &refs, plcfg, cfg.eval.nms_iou).map_err(|e| opts.abort(&state, e))?;
                let labels = if weights.lambda_f_semi > 0.0 {
                    finalize(&candidates, video.video_label, plcfg)
                } else {
                    PseudoLabelSet { frames: vec![Vec::new(); refs.len()] }
                };
                n_pseudo += labels.total();
                if opts.dump_pseudo_labels {
                    for (k, l) in labels.frames.iter().enumerate() {
                        dump.push((j, subclips[j][k], l.clone()));
                    }
                }
                let start = frames.len();
                for (k, &t) in subclips[j].iter().enumerate() {
                    let boxes = FrameAnnotation::new(t, labels.frames[k].iter().map(|l| l.bbox).collect());
                    let (f, a) = apply_augmentation(&video.frames[t], Some(&boxes), &cfg.strong_aug, &mut rng);
                    let moved: Vec<PseudoLabel> = labels.frames[k]
                        .iter()
                        .zip(a.expect("boxes pass through").boxes)
                        .map(|(l, b)| PseudoLabel { bbox: b, ..*l })
                        .collect();
                    frames.push(f);
                    anns.push((false, FrameAnnotation::empty(t), moved));
                }
                if let Some(z) = video.video_label {
                    if weights.lambda_v_weak > 0.0 {
                        clips.push(WeakClip { frames: start..frames.len(), label: z });
                    }
                }
            }

            let refs: Vec<&Frame> = frames.iter().collect();
            let mut parts = LossBreakdown::default();
            let soft = plcfg.use_soft_weights;
            let semi_on = weights.lambda_f_semi > 0.0;
            let step = detector.gradient(&state.theta, &refs, |preds| {
                let roles = preds
                    .iter()
                    .zip(&anns)
                    .map(|(p, (sup, a, pl))| match (sup, semi_on) {
                        (true, _) => FrameRole::Supervised(annotation_targets(p, a)),
                        (false, true) => FrameRole::PseudoLabeled(pseudo_targets(p.grid_w, p.grid_h, pl, soft)),
                        (false, false) => FrameRole::Unsupervised,
                    })
                    .collect();
                let loss = CompositeLoss { weights: *weights, prior: detector.size_prior(), eval: video_eval, roles, clips };
                let (value, b) = loss.evaluate(preds)?;
                parts = b;
                Ok(value)
            });
            let (_, grad) = step.map_err(|e| opts.abort(&state, e))?;
            opt.step(&mut state.theta, &grad);
            burn_in_update(&mut state, tsmr.alpha_i, 1.0, EmaEvent::Iteration)?;
            means.add(&parts);
        }

        let m_t = evaluate_map(detector, &state.theta_epoch, &split.validation, &cfg.eval)?;
        let m_s = evaluate_map(detector, &state.theta_iter, &split.validation, &cfg.eval)?;
        let rec = tsmr_step(&mut state, &EpochMetrics::new(m_t, m_s), tsmr)?;
        if !state.is_finite() {
            return Err(opts.abort(&state, Error::Numeric("non-finite parameters after mutual epoch".into())));
        }
        schedule.push(ScheduleRow { epoch, m_t, m_s, alpha_e: rec.alpha_e, alpha_inv: rec.alpha_inv });
        let mean = means.mean();
        let row = CurveRow {
            stage: "mutual".into(),
            epoch,
            loss_sup: mean.sup,
            loss_semi: mean.semi,
            loss_weak: mean.weak,
            loss_total: mean.total,
            val_map_theta: None,
            val_map_iter: Some(m_s),
            val_map_epoch: Some(evaluate_map(detector, &state.theta_epoch, &split.validation, &cfg.eval)?),
            pseudo_labels: n_pseudo,
        };
        opts.log(&row);
        curves.push(row);
        opts.epoch_done("mutual", epoch, &state)?;
        if let (true, Some(dir)) = (opts.dump_pseudo_labels, &opts.run_dir) {
            let pl_dir = dir.join("pseudo_labels");
            fs::create_dir_all(&pl_dir)?;
            let rows: Vec<PseudoLabelDump> = dump
                .iter()
                .map(|(j, t, l)| PseudoLabelDump { epoch, video_id: &weak[*j].video_id, frame_index: *t, labels: l })
                .collect();
            write_jsonl(&pl_dir.join(format!("epoch_{epoch}.jsonl")), &rows)?;
        }
    }
    Ok(StageOutcome { state, curves, schedule })
}

/// Weak split with video labels kept on a nested subset: the first
/// `round(fraction * n)` videos of a permutation fixed by `seed`. Larger
/// fractions therefore keep a superset of the labels of smaller ones.
pub fn mask_video_labels(videos: &[VideoRecord], fraction: f64, seed: u64) -> Result<Vec<VideoRecord>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(invalid(format!("label fraction {fraction} outside [0,1]")));
    }
    let mut perm: Vec<usize> = (0..videos.len()).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, 3)));
    let keep = (fraction * videos.len() as f64).round() as usize;
    let mut out = videos.to_vec();
    for &i in &perm[keep..] {
        out[i].video_label = None;
    }
    Ok(out)
}

/// Writes the resolved config, both logs and the final checkpoint.
pub fn write_run<C: Serialize>(dir: &Path, config: &C, outcome: &StageOutcome, stem: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_json(&dir.join("config.json"), config)?;
    write_csv(&dir.join("curves.csv"), &outcome.curves)?;
    write_csv(&dir.join("schedule.csv"), &outcome.schedule)?;
    save_state(dir, stem, &outcome.state)
}
