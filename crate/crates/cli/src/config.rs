//! Run configuration: a flat JSON object with every knob of one experiment.
//! Unknown keys are rejected so typos fail instead of silently defaulting;
//! only `seed` is required.

use std::path::Path;

use corrmatch_core::data::DatasetSpec;
use corrmatch_core::engine::{EngineConfig, LossWeights, ThresholdState};
use serde::Deserialize;

use crate::error::{CliError, Result};

pub const ENV_SEED: &str = "CORRMATCH_SEED";

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,

    // Dataset recipe.
    #[serde(default = "d_n_labeled")]
    pub n_labeled: usize,
    #[serde(default = "d_n_unlabeled")]
    pub n_unlabeled: usize,
    #[serde(default = "d_side")]
    pub height: usize,
    #[serde(default = "d_side")]
    pub width: usize,
    #[serde(default = "d_channels")]
    pub channels: usize,
    #[serde(default = "d_classes")]
    pub classes: usize,
    #[serde(default = "d_noise_std")]
    pub noise_std: f64,
    #[serde(default = "d_shapes_min")]
    pub shapes_min: usize,
    #[serde(default = "d_shapes_max")]
    pub shapes_max: usize,

    // Model dimensions.
    #[serde(default = "d_feature_dim")]
    pub feature_dim: usize,

    // Loss weights for the hard, soft, and correlation consistency terms.
    #[serde(default = "d_lambda1")]
    pub lambda1: f64,
    #[serde(default = "d_lambda2")]
    pub lambda2: f64,
    #[serde(default = "d_lambda2")]
    pub lambda3: f64,

    // Confidence threshold. In fixed mode tau0 is the fixed value.
    #[serde(default = "d_tau0")]
    pub tau0: f64,
    #[serde(default = "d_lambda")]
    pub lambda: f64,
    #[serde(default = "d_threshold_mode")]
    pub threshold_mode: String,

    // Component toggles.
    #[serde(default = "d_true")]
    pub use_soft_loss: bool,
    #[serde(default = "d_true")]
    pub use_corr_loss: bool,
    #[serde(default = "d_true")]
    pub use_feature_perturb: bool,
    #[serde(default = "d_true")]
    pub use_cutmix: bool,
    #[serde(default)]
    pub supervised_only: bool,

    // Optimization.
    #[serde(default = "d_lr0")]
    pub lr0: f64,
    #[serde(default = "d_momentum")]
    pub momentum: f64,
    #[serde(default = "d_total_iters")]
    pub total_iters: u64,
    #[serde(default = "d_batch")]
    pub batch_labeled: usize,
    #[serde(default = "d_batch")]
    pub batch_unlabeled: usize,

    // Evaluation and output.
    #[serde(default = "d_eval_interval")]
    pub eval_interval: u64,
    #[serde(default = "d_n_val")]
    pub n_val: usize,
    #[serde(default = "d_out_dir")]
    pub out_dir: String,
}

fn d_n_labeled() -> usize {
    4
}
fn d_n_unlabeled() -> usize {
    256
}
fn d_side() -> usize {
    32
}
fn d_channels() -> usize {
    3
}
fn d_classes() -> usize {
    4
}
fn d_noise_std() -> f64 {
    0.08
}
fn d_shapes_min() -> usize {
    1
}
fn d_shapes_max() -> usize {
    3
}
fn d_feature_dim() -> usize {
    16
}
fn d_lambda1() -> f64 {
    0.5
}
fn d_lambda2() -> f64 {
    0.25
}
fn d_tau0() -> f64 {
    0.85
}
fn d_lambda() -> f64 {
    0.999
}
fn d_threshold_mode() -> String {
    "relaxed_global".to_string()
}
fn d_true() -> bool {
    true
}
fn d_lr0() -> f64 {
    0.05
}
fn d_momentum() -> f64 {
    0.9
}
fn d_total_iters() -> u64 {
    3000
}
fn d_batch() -> usize {
    8
}
fn d_eval_interval() -> u64 {
    100
}
fn d_n_val() -> usize {
    16
}
fn d_out_dir() -> String {
    "corrmatch-run".to_string()
}

impl RunConfig {
    /// Parses a config file, applies the `CORRMATCH_SEED` override, and
    /// validates the result.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("reading {}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        if let Ok(seed) = std::env::var(ENV_SEED) {
            cfg.seed = seed.parse().map_err(|_| {
                CliError::config(format!("{ENV_SEED}={seed} is not a valid seed"))
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset_spec().validate()?;
        self.engine_config().validate()?;
        self.threshold_state()?;
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(CliError::config(format!("lambda {} must lie in [0, 1]", self.lambda)));
        }
        if self.batch_labeled == 0 {
            return Err(CliError::config("batch_labeled must be at least 1"));
        }
        if self.batch_unlabeled == 0 && !self.supervised_only && self.n_unlabeled > 0 {
            return Err(CliError::config(
                "batch_unlabeled must be at least 1 unless the run is supervised-only",
            ));
        }
        if self.eval_interval == 0 {
            return Err(CliError::config("eval_interval must be at least 1"));
        }
        if self.n_val == 0 {
            return Err(CliError::config("n_val must be at least 1"));
        }
        Ok(())
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            seed: self.seed,
            n_labeled: self.n_labeled,
            n_unlabeled: self.n_unlabeled,
            height: self.height,
            width: self.width,
            channels: self.channels,
            classes: self.classes,
            noise_std: self.noise_std,
            shapes_min: self.shapes_min,
            shapes_max: self.shapes_max,
        }
    }

    pub fn engine_config(&self) -> EngineConfig {
        EngineConfig {
            classes: self.classes,
            feature_dim: self.feature_dim,
            weights: LossWeights {
                hard: self.lambda1,
                soft: self.lambda2,
                corr: self.lambda3,
            },
            use_soft_loss: self.use_soft_loss,
            use_corr_loss: self.use_corr_loss,
            use_feature_perturb: self.use_feature_perturb,
            use_cutmix: self.use_cutmix,
            supervised_only: self.supervised_only,
            base_lr: self.lr0,
            momentum: self.momentum,
            total_iters: self.total_iters,
            seed: self.seed,
            ..EngineConfig::default()
        }
    }

    pub fn threshold_state(&self) -> Result<ThresholdState> {
        let state = match self.threshold_mode.as_str() {
            "fixed" => ThresholdState::fixed(self.tau0),
            "relaxed_global" => ThresholdState::relaxed_global(self.tau0, self.lambda),
            "relaxed_per_class" => {
                ThresholdState::relaxed_per_class(self.tau0, self.lambda, self.classes)
            }
            other => {
                return Err(CliError::config(format!(
                    "threshold_mode {other:?} is not one of fixed, relaxed_global, relaxed_per_class"
                )))
            }
        };
        Ok(state?)
    }
}
