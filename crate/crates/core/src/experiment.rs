//! Named training variants, repeated runs over seeds and the ablation grid.
//!
//! Every run of a seed shares one burn-in. Mutual-learning variants start
//! from its epoch average; the two burn-in-only variants report either the
//! raw weights or the epoch average.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::detector::{Detector, ParameterVector};
use crate::ema::ModelState;
use crate::error::{invalid, Error, Result};
use crate::evaluation::evaluate_map;
use crate::training::{initial_state, mask_video_labels, run_burn_in, run_mutual_learning, write_run, RunOptions, StageOutcome};
use crate::types::{DatasetSplit, LossWeights, PseudoLabelConfig, TrainingConfig, TsmrConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "full")]
    Full,
    #[serde(rename = "full+he")]
    FullHe,
    #[serde(rename = "+unlabeled")]
    Unlabeled,
    #[serde(rename = "+weak")]
    Weak,
    #[serde(rename = "+weak+pseudo")]
    WeakPseudo,
    #[serde(rename = "+weak+tsmr")]
    WeakTsmr,
    #[serde(rename = "+weak+pseudo+tsmr")]
    WeakPseudoTsmr,
}

/// Which components a variant switches on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VariantFlags {
    /// Report the burn-in epoch average instead of the raw weights.
    pub hierarchical_ema: bool,
    pub mutual_stage: bool,
    /// Weak videos keep their labels and feed the video-level loss.
    pub video_labels: bool,
    pub weak_filtering: bool,
    pub soft_weights: bool,
    pub tsmr_adaptive: bool,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::FullHe,
        Variant::Unlabeled,
        Variant::Weak,
        Variant::WeakPseudo,
        Variant::WeakTsmr,
        Variant::WeakPseudoTsmr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::FullHe => "full+he",
            Variant::Unlabeled => "+unlabeled",
            Variant::Weak => "+weak",
            Variant::WeakPseudo => "+weak+pseudo",
            Variant::WeakTsmr => "+weak+tsmr",
            Variant::WeakPseudoTsmr => "+weak+pseudo+tsmr",
        }
    }

    pub fn flags(self) -> VariantFlags {
        let f = |he, mutual, labels, filter, soft, tsmr| VariantFlags {
            hierarchical_ema: he,
            mutual_stage: mutual,
            video_labels: labels,
            weak_filtering: filter,
            soft_weights: soft,
            tsmr_adaptive: tsmr,
        };
        match self {
            Variant::Full => f(false, false, false, false, false, false),
            Variant::FullHe => f(true, false, false, false, false, false),
            Variant::Unlabeled => f(true, true, false, false, false, false),
            Variant::Weak => f(true, true, true, false, false, false),
            Variant::WeakPseudo => f(true, true, true, true, true, false),
            Variant::WeakTsmr => f(true, true, true, false, false, true),
            Variant::WeakPseudoTsmr => f(true, true, true, true, true, true),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase();
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == key)
            .ok_or_else(|| invalid(format!("unknown variant {s:?}; expected one of {}", variant_names())))
    }
}

fn variant_names() -> String {
    Variant::ALL.map(Variant::name).join(", ")
}

/// Base settings shared by every variant; a variant only flips switches.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSettings {
    pub training: TrainingConfig,
    pub tsmr: TsmrConfig,
    pub pseudo: PseudoLabelConfig,
    pub weights: LossWeights,
}

impl ExperimentSettings {
    pub fn validate(&self) -> Result<()> {
        self.training.validate()?;
        self.tsmr.validate()?;
        self.pseudo.validate()?;
        self.weights.validate()
    }
}

/// One cell of a grid: a variant plus the knobs the ablations turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub label: String,
    pub variant: Variant,
    /// Share of weak videos that keep their label.
    pub fraction: f64,
    /// Fixed pseudo-label threshold replacing the base one.
    pub beta: Option<f64>,
    /// Fixed teacher keep rate replacing the base one.
    pub alpha_e: Option<f64>,
}

impl RunSpec {
    pub fn new(variant: Variant) -> Self {
        Self { label: variant.name().into(), variant, fraction: 1.0, beta: None, alpha_e: None }
    }

    pub fn with_fraction(variant: Variant, fraction: f64) -> Self {
        Self { label: format!("{}@f={fraction}", variant.name()), fraction, ..Self::new(variant) }
    }

    /// Mutual-stage configuration after applying the variant and overrides.
    pub fn configure(&self, base: &ExperimentSettings) -> (TsmrConfig, PseudoLabelConfig, LossWeights) {
        let flags = self.variant.flags();
        let mut pseudo = PseudoLabelConfig {
            use_weak_filtering: flags.weak_filtering,
            use_soft_weights: flags.soft_weights,
            ..base.pseudo
        };
        if flags.soft_weights {
            pseudo.beta = pseudo.beta_l;
        }
        if let Some(b) = self.beta {
            pseudo.beta = b;
            pseudo.beta_l = pseudo.beta_l.min(b);
        }
        let mut tsmr = TsmrConfig { adaptive: flags.tsmr_adaptive, ..base.tsmr };
        if let Some(a) = self.alpha_e {
            tsmr.alpha_e_fixed = a;
        }
        let mut weights = base.weights;
        if !flags.video_labels {
            weights.lambda_v_weak = 0.0;
        }
        (tsmr, pseudo, weights)
    }

    fn effective_fraction(&self) -> f64 {
        if self.variant.flags().video_labels {
            self.fraction
        } else {
            0.0
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.fraction) {
            return Err(invalid(format!("label fraction {} outside [0,1]", self.fraction)));
        }
        if self.beta.is_some_and(|b| !(0.0..=1.0).contains(&b)) {
            return Err(invalid("beta override outside [0,1]"));
        }
        if self.alpha_e.is_some_and(|a| !(0.0..=1.0).contains(&a)) {
            return Err(invalid("alpha_e override outside [0,1]"));
        }
        Ok(())
    }
}

/// A named variant repeated over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub variant: Variant,
    pub repeats: usize,
    /// Explicit seeds; when empty the plan uses `0..repeats`.
    pub seeds: Vec<u64>,
    pub video_label_fraction: f64,
}

impl ExperimentPlan {
    pub fn new(variant: Variant, repeats: usize) -> Self {
        Self { variant, repeats, seeds: Vec::new(), video_label_fraction: 1.0 }
    }

    pub fn seeds(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            (0..self.repeats as u64).collect()
        } else {
            self.seeds.clone()
        }
    }

    pub fn spec(&self) -> RunSpec {
        RunSpec { fraction: self.video_label_fraction, ..RunSpec::new(self.variant) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 && self.seeds.is_empty() {
            return Err(invalid("plan needs at least one seed"));
        }
        if !self.seeds.is_empty() && self.repeats != 0 && self.seeds.len() != self.repeats {
            return Err(invalid("seed list length differs from repeat count"));
        }
        self.spec().validate()
    }
}

/// Final mAP of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub label: String,
    pub variant: Variant,
    pub fraction: f64,
    pub seed: u64,
    pub val_map: f64,
    pub test_map: f64,
}

/// A finished run together with the model it reports and its logs.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub result: RunResult,
    pub reported: ParameterVector,
    /// Mutual-stage logs; `None` for burn-in-only variants.
    pub mutual: Option<StageOutcome>,
}

/// Runs the mutual stage of `spec` (if any) from a finished burn-in.
pub fn run_from_burn_in(
    detector: &Detector,
    split: &DatasetSplit,
    settings: &ExperimentSettings,
    spec: &RunSpec,
    seed: u64,
    burn_in: &StageOutcome,
    opts: &RunOptions,
) -> Result<RunArtifacts> {
    spec.validate()?;
    let flags = spec.variant.flags();
    let cfg = TrainingConfig { seed, ..settings.training.clone() };
    let (reported, mutual) = if flags.mutual_stage {
        let (tsmr, pseudo, weights) = spec.configure(settings);
        let masked = DatasetSplit {
            weakly_labeled: mask_video_labels(&split.weakly_labeled, spec.effective_fraction(), seed)?,
            ..split.clone()
        };
        let init = ModelState::uniform(burn_in.state.theta_epoch.clone());
        let out = run_mutual_learning(detector, &masked, init, &cfg, &tsmr, &pseudo, &weights, opts)?;
        (out.state.theta_epoch.clone(), Some(out))
    } else if flags.hierarchical_ema {
        (burn_in.state.theta_epoch.clone(), None)
    } else {
        (burn_in.state.theta.clone(), None)
    };
    let result = RunResult {
        label: spec.label.clone(),
        variant: spec.variant,
        fraction: spec.effective_fraction(),
        seed,
        val_map: evaluate_map(detector, &reported, &split.validation, &cfg.eval)?,
        test_map: evaluate_map(detector, &reported, &split.test, &cfg.eval)?,
    };
    Ok(RunArtifacts { result, reported, mutual })
}

pub fn burn_in_for_seed(
    detector: &Detector,
    split: &DatasetSplit,
    settings: &ExperimentSettings,
    seed: u64,
    opts: &RunOptions,
) -> Result<StageOutcome> {
    let cfg = TrainingConfig { seed, ..settings.training.clone() };
    run_burn_in(detector, split, initial_state(detector, seed), &cfg, &settings.tsmr, &settings.weights, opts)
}

/// Output layout of a grid: `<root>/burn_in/seed_<s>` and `<root>/<label>/seed_<s>`.
#[derive(Debug, Clone, Default)]
pub struct GridOutput {
    pub root: Option<PathBuf>,
    pub checkpoint_every_epoch: bool,
    pub verbose: bool,
}

impl GridOutput {
    fn options(&self, sub: &str, seed: u64) -> RunOptions {
        RunOptions {
            run_dir: self.root.as_ref().map(|r| seed_dir(r, sub, seed)),
            checkpoint_every_epoch: self.checkpoint_every_epoch,
            dump_pseudo_labels: false,
            verbose: self.verbose,
        }
    }
}

pub fn seed_dir(root: &Path, label: &str, seed: u64) -> PathBuf {
    root.join(sanitize(label)).join(format!("seed_{seed}"))
}

/// Directory-safe form of a run label.
pub fn sanitize(label: &str) -> String {
    label
        .chars()
        .map(|c| match c {
            'a'..='z' | 'A'..='Z' | '0'..='9' | '.' | '-' | '_' => c,
            '+' => 'p',
            _ => '_',
        })
        .collect()
}

/// Every spec for every seed, one burn-in per seed. Results come back
/// seed-major in spec order.
pub fn run_grid(
    detector: &Detector,
    split: &DatasetSplit,
    settings: &ExperimentSettings,
    specs: &[RunSpec],
    seeds: &[u64],
    output: &GridOutput,
) -> Result<Vec<RunResult>> {
    settings.validate()?;
    for s in specs {
        s.validate()?;
    }
    let mut results = Vec::with_capacity(specs.len() * seeds.len());
    for &seed in seeds {
        let opts = output.options("burn_in", seed);
        let burn_in = burn_in_for_seed(detector, split, settings, seed, &opts)?;
        if let Some(dir) = &opts.run_dir {
            write_run(dir, settings, &burn_in, "final")?;
        }
        for spec in specs {
            let opts = output.options(&spec.label, seed);
            let run = run_from_burn_in(detector, split, settings, spec, seed, &burn_in, &opts)?;
            if let Some(dir) = &opts.run_dir {
                let logs = run.mutual.clone().unwrap_or_else(|| burn_in.clone());
                write_run(dir, &(spec, settings), &logs, "final")?;
                crate::io::save_params(&dir.join("checkpoints").join("reported.params"), &run.reported)?;
                crate::io::write_json(&dir.join("result.json"), &run.result)?;
            }
            if output.verbose {
                eprintln!("seed {seed} {}: val {:.4} test {:.4}", spec.label, run.result.val_map, run.result.test_map);
            }
            results.push(run.result);
        }
    }
    Ok(results)
}

/// Mean and sample standard deviation of final mAP for one grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub label: String,
    pub variant: Variant,
    pub fraction: f64,
    pub runs: usize,
    pub val_mean: f64,
    pub val_std: f64,
    pub test_mean: f64,
    pub test_std: f64,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Half-width of the normal-approximation 95% interval of the mean.
pub fn ci95_half_width(std: f64, n: usize) -> f64 {
    if n < 2 {
        0.0
    } else {
        1.96 * std / (n as f64).sqrt()
    }
}

/// Groups results by label, keeping first-appearance order.
pub fn summarize(results: &[RunResult]) -> Vec<Summary> {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: BTreeMap<&str, Vec<&RunResult>> = BTreeMap::new();
    for r in results {
        if !groups.contains_key(r.label.as_str()) {
            order.push(&r.label);
        }
        groups.entry(&r.label).or_default().push(r);
    }
    order
        .into_iter()
        .map(|label| {
            let g = &groups[label];
            let (val_mean, val_std) = mean_std(&g.iter().map(|r| r.val_map).collect::<Vec<_>>());
            let (test_mean, test_std) = mean_std(&g.iter().map(|r| r.test_map).collect::<Vec<_>>());
            Summary {
                label: label.to_string(),
                variant: g[0].variant,
                fraction: g[0].fraction,
                runs: g.len(),
                val_mean,
                val_std,
                test_mean,
                test_std,
            }
        })
        .collect()
}

pub const ABLATION_BETAS: [f64; 4] = [0.1, 0.3, 0.5, 0.7];
pub const ABLATION_ALPHAS: [f64; 3] = [0.9, 0.95, 0.99];
pub const ABLATION_FRACTIONS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

/// Ablation grid row group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationGroup {
    /// Fixed pseudo-label thresholds without re-weighting.
    Beta,
    /// Fixed teacher keep rates.
    AlphaE,
    /// The adaptive keep-rate schedule.
    Adaptive,
    /// Share of weak videos with labels.
    Fraction,
}

/// The ablation grid: fixed thresholds on the weak variant with TSMR,
/// fixed keep rates on the weak variant with re-weighting, the adaptive
/// schedule with both, and the label-fraction sweep on the weak variant.
pub fn ablation_specs() -> Vec<(AblationGroup, RunSpec)> {
    let mut out = Vec::new();
    for b in ABLATION_BETAS {
        out.push((AblationGroup::Beta, RunSpec { label: format!("beta={b}"), beta: Some(b), ..RunSpec::new(Variant::WeakTsmr) }));
    }
    for a in ABLATION_ALPHAS {
        out.push((AblationGroup::AlphaE, RunSpec { label: format!("alpha_e={a}"), alpha_e: Some(a), ..RunSpec::new(Variant::WeakPseudo) }));
    }
    out.push((AblationGroup::Adaptive, RunSpec { label: "alpha_e=adaptive".into(), ..RunSpec::new(Variant::WeakPseudoTsmr) }));
    for f in ABLATION_FRACTIONS {
        out.push((AblationGroup::Fraction, RunSpec { label: format!("fraction={f}"), ..RunSpec::with_fraction(Variant::Weak, f) }));
    }
    out
}

/// One line of the ablation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub group: AblationGroup,
    pub label: String,
    pub variant: Variant,
    pub runs: usize,
    pub val_mean: f64,
    pub val_std: f64,
    pub test_mean: f64,
    pub test_std: f64,
}

pub fn ablation_rows(specs: &[(AblationGroup, RunSpec)], results: &[RunResult]) -> Vec<AblationRow> {
    let sums = summarize(results);
    specs
        .iter()
        .filter_map(|(group, spec)| {
            sums.iter().find(|s| s.label == spec.label).map(|s| AblationRow {
                group: *group,
                label: s.label.clone(),
                variant: s.variant,
                runs: s.runs,
                val_mean: s.val_mean,
                val_std: s.val_std,
                test_mean: s.test_mean,
                test_std: s.test_std,
            })
        })
        .collect()
}

pub fn ablation_markdown(rows: &[AblationRow]) -> String {
    let mut md = String::from("| group | setting | variant | runs | val mAP | test mAP |\n|---|---|---|---|---|---|\n");
    for r in rows {
        let group = serde_json::to_value(r.group).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
        md.push_str(&format!(
            "| {group} | {} | {} | {} | {:.4} ± {:.4} | {:.4} ± {:.4} |\n",
            r.label, r.variant, r.runs, r.val_mean, r.val_std, r.test_mean, r.test_std
        ));
    }
    md
}
