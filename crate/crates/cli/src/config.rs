use std::path::Path;

use clap::Args;
use serde::{Deserialize, Serialize};
use weakvid::detector::DetectorConfig;
use weakvid::experiment::ExperimentSettings;
use weakvid::synthetic::GeneratorConfig;
use weakvid::types::OptimizerKind;

use crate::Usage;

/// Everything a run can be configured with. Sections missing from a config
/// file keep their built-in defaults.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ProjectConfig {
    pub generator: GeneratorConfig,
    pub detector: DetectorConfig,
    #[serde(flatten)]
    pub experiment: ExperimentSettings,
}

impl ProjectConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).map_err(|e| Usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Usage(format!("config {}: {e}", path.display())).into())
    }
}

/// Hyperparameter overrides; each one wins over the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// Pseudo-label keep threshold.
    #[arg(long)]
    pub beta: Option<f64>,
    /// Fallback threshold for positive videos.
    #[arg(long = "beta-l")]
    pub beta_l: Option<f64>,
    /// Fixed teacher keep rate.
    #[arg(long = "alpha-e")]
    pub alpha_e: Option<f64>,
    #[arg(long = "alpha-i")]
    pub alpha_i: Option<f64>,
    /// Epoch keep rate during burn-in.
    #[arg(long = "alpha-e-burn-in")]
    pub alpha_e_burn_in: Option<f64>,
    /// Burn-in EMA warmup, iterations; 0 disables.
    #[arg(long = "warmup-iters")]
    pub warmup_iters: Option<f64>,
    /// Burn-in EMA warmup, epochs; 0 disables.
    #[arg(long = "warmup-epochs")]
    pub warmup_epochs: Option<f64>,
    #[arg(long = "alpha-e-min")]
    pub alpha_e_min: Option<f64>,
    #[arg(long = "alpha-e-max")]
    pub alpha_e_max: Option<f64>,
    #[arg(long = "alpha-inv-min")]
    pub alpha_inv_min: Option<f64>,
    #[arg(long)]
    pub tau0: Option<f64>,
    #[arg(long)]
    pub tau1: Option<f64>,
    #[arg(long)]
    pub tau2: Option<f64>,
    /// Frames sampled per weak video.
    #[arg(long = "n-fpv")]
    pub n_fpv: Option<usize>,
    #[arg(long = "lambda-coord")]
    pub lambda_coord: Option<f64>,
    #[arg(long = "lambda-conf")]
    pub lambda_conf: Option<f64>,
    #[arg(long = "lambda-f-sup")]
    pub lambda_f_sup: Option<f64>,
    #[arg(long = "lambda-f-semi")]
    pub lambda_f_semi: Option<f64>,
    #[arg(long = "lambda-v-weak")]
    pub lambda_v_weak: Option<f64>,
    #[arg(long = "epochs-burn-in")]
    pub epochs_burn_in: Option<usize>,
    #[arg(long = "epochs-mutual")]
    pub epochs_mutual: Option<usize>,
    #[arg(long = "batch-size")]
    pub batch_size: Option<usize>,
    /// Burn-in learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long = "mutual-lr")]
    pub mutual_lr: Option<f64>,
    /// `sgd` or `adam`.
    #[arg(long, value_parser = parse_optimizer)]
    pub optimizer: Option<OptimizerKind>,
    #[arg(long = "grad-clip")]
    pub grad_clip: Option<f64>,
}

fn parse_optimizer(s: &str) -> Result<OptimizerKind, String> {
    match s.to_ascii_lowercase().as_str() {
        "sgd" => Ok(OptimizerKind::Sgd),
        "adam" => Ok(OptimizerKind::Adam),
        _ => Err(format!("unknown optimizer {s:?}; expected sgd or adam")),
    }
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ProjectConfig) {
        let e = &mut cfg.experiment;
        let set = |dst: &mut f64, src: Option<f64>| {
            if let Some(v) = src {
                *dst = v;
            }
        };
        set(&mut e.pseudo.beta, self.beta);
        set(&mut e.pseudo.beta_l, self.beta_l);
        set(&mut e.tsmr.alpha_e_fixed, self.alpha_e);
        set(&mut e.tsmr.alpha_i, self.alpha_i);
        set(&mut e.tsmr.alpha_e_burn_in, self.alpha_e_burn_in);
        set(&mut e.tsmr.warmup_iters, self.warmup_iters);
        set(&mut e.tsmr.warmup_epochs, self.warmup_epochs);
        set(&mut e.tsmr.alpha_e_min, self.alpha_e_min);
        set(&mut e.tsmr.alpha_e_max, self.alpha_e_max);
        set(&mut e.tsmr.alpha_inv_min, self.alpha_inv_min);
        set(&mut e.tsmr.tau0, self.tau0);
        set(&mut e.tsmr.tau1, self.tau1);
        set(&mut e.tsmr.tau2, self.tau2);
        set(&mut e.weights.lambda_coord, self.lambda_coord);
        set(&mut e.weights.lambda_conf, self.lambda_conf);
        set(&mut e.weights.lambda_f_sup, self.lambda_f_sup);
        set(&mut e.weights.lambda_f_semi, self.lambda_f_semi);
        set(&mut e.weights.lambda_v_weak, self.lambda_v_weak);
        set(&mut e.training.learning_rate, self.lr);
        set(&mut e.training.mutual_learning_rate, self.mutual_lr);
        set(&mut e.training.grad_clip, self.grad_clip);
        if let Some(v) = self.n_fpv {
            e.training.frames_per_video = v;
        }
        if let Some(v) = self.epochs_burn_in {
            e.training.epochs_burn_in = v;
        }
        if let Some(v) = self.epochs_mutual {
            e.training.epochs_mutual = v;
        }
        if let Some(v) = self.batch_size {
            e.training.batch_size = v;
        }
        if let Some(v) = self.optimizer {
            e.training.optimizer = v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_beat_file_beat_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"pseudo": {"beta": 0.3}, "tsmr": {"tau0": 90.0}, "generator": {"test": 7}}"#).unwrap();
        let mut cfg = ProjectConfig::load(Some(&path)).unwrap();
        assert_eq!(cfg.experiment.pseudo.beta, 0.3);
        assert_eq!(cfg.experiment.pseudo.beta_l, 0.1);
        assert_eq!(cfg.generator.test, 7);
        Overrides { beta: Some(0.7), n_fpv: Some(4), ..Default::default() }.apply(&mut cfg);
        assert_eq!(cfg.experiment.pseudo.beta, 0.7);
        assert_eq!(cfg.experiment.tsmr.tau0, 90.0);
        assert_eq!(cfg.experiment.training.frames_per_video, 4);
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = ProjectConfig::default();
        let back: ProjectConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn malformed_config_is_a_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, "{ not json").unwrap();
        let err = ProjectConfig::load(Some(&path)).unwrap_err();
        assert!(err.downcast_ref::<Usage>().is_some());
    }
}
