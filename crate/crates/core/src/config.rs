//! Run configuration: every knob of a training run in one TOML file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::error::{Error, Result};
use crate::model::ArchConfig;
use crate::objective::FocalParams;

/// Which pseudo-label refiner phase 2 uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Refiner {
    /// Two-view matching refinement plus global-view filtering.
    Mpr,
    /// Union-and-NMS flip ensemble (ablation baseline), plus
    /// global-view filtering.
    FlipEnsemble,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub ema_alpha: f64,
    /// Weight of the unsupervised loss.
    pub lambda: f64,
    pub sigma_reg: f64,
    pub sigma_cls: f64,
    pub sigma_g: f64,
    /// Two-view matching gate (strictly greater than).
    pub delta: f64,
    pub focal: FocalParams,
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub burnup_steps: usize,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub seed: u64,
    /// Steps between metric/pseudo-quality rows and dumps.
    pub eval_interval: usize,
    /// Steps between checkpoints; 0 keeps only the final one.
    pub checkpoint_interval: usize,
    /// Confidence floor for teacher candidate extraction.
    pub pseudo_conf_floor: f64,
    /// NMS IoU threshold used in decoding.
    pub nms_iou: f64,
    /// Whether multi-view refinement + global filtering run at all.
    pub mpr: bool,
    pub refiner: Refiner,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.01,
            momentum: 0.937,
            weight_decay: 0.0005,
            ema_alpha: 0.9996,
            lambda: 1.0,
            sigma_reg: 0.4,
            sigma_cls: 0.5,
            sigma_g: 0.25,
            delta: 0.45,
            focal: FocalParams::default(),
            total_steps: 20_000,
            warmup_steps: 200,
            burnup_steps: 1_000,
            batch_labeled: 8,
            batch_unlabeled: 8,
            seed: 0,
            eval_interval: 500,
            checkpoint_interval: 0,
            pseudo_conf_floor: 0.25,
            nms_iou: 0.5,
            mpr: true,
            refiner: Refiner::Mpr,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.burnup_steps > self.total_steps {
            return Err(Error::Config(format!(
                "burnup_steps {} exceeds total_steps {}",
                self.burnup_steps, self.total_steps
            )));
        }
        if !(0.0..1.0).contains(&self.ema_alpha) {
            return Err(Error::Config(format!("ema_alpha {} not in [0, 1)", self.ema_alpha)));
        }
        if self.batch_labeled == 0 || self.batch_unlabeled == 0 {
            return Err(Error::Config("batch sizes must be >= 1".into()));
        }
        if self.lambda < 0.0 {
            return Err(Error::Config("lambda must be non-negative".into()));
        }
        for (name, v) in [
            ("sigma_reg", self.sigma_reg),
            ("sigma_cls", self.sigma_cls),
            ("sigma_g", self.sigma_g),
            ("delta", self.delta),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} {v} not in [0, 1]")));
            }
        }
        if self.eval_interval == 0 {
            return Err(Error::Config("eval_interval must be >= 1".into()));
        }
        Ok(())
    }
}

/// Evaluation-time decoding knobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    pub conf_floor: f64,
    pub nms_iou: f64,
    /// Detections kept per image after NMS, by confidence.
    pub max_dets: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings { conf_floor: 0.05, nms_iou: 0.5, max_dets: 100 }
    }
}

/// The full run configuration file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub arch: ArchConfig,
    pub augment: AugmentConfig,
    pub eval: EvalSettings,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.arch.validate()
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("serializing config: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_roundtrip_through_toml() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn partial_files_fill_in_defaults() {
        let cfg: RunConfig = toml::from_str(
            r#"
            [train]
            seed = 7
            lambda = 0.5
            "#,
        )
        .unwrap();
        assert_eq!(cfg.train.seed, 7);
        assert_eq!(cfg.train.lambda, 0.5);
        assert_eq!(cfg.train.lr, 0.01);
        assert_eq!(cfg.arch.stride, 8);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = RunConfig::default();
        cfg.train.burnup_steps = cfg.train.total_steps + 1;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.train.ema_alpha = 1.0;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.train.batch_labeled = 0;
        assert!(cfg.validate().is_err());
    }
}
