use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::conditioning::{AdvFormulation, DiscriminatorConfig, EncoderConfig};
use crate::error::{Error, Result};
use crate::flow::FlowConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub phase1_iters: usize,
    pub phase2_iters: usize,
    /// Adam step size for the flow and encoder.
    pub lr: f64,
    /// Discriminator step size; defaults by scale when absent.
    pub disc_lr: Option<f64>,
    /// Weight of the adversarial term in phase 2; defaults by scale when absent.
    pub lambda_adv: Option<f64>,
    pub batch: usize,
    /// HR patch edge in pixels.
    pub patch: usize,
    /// Total width of the uniform dequantization noise, as a fraction of the [0, 1] range.
    pub noise: f64,
    pub adv: AdvFormulation,
    /// Sampling temperature for the fakes shown to the discriminator.
    pub train_temperature: f64,
    pub checkpoint_every: usize,
    pub val_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            phase1_iters: 2000,
            phase2_iters: 1000,
            lr: 1e-4,
            disc_lr: None,
            lambda_adv: None,
            batch: 8,
            patch: 32,
            noise: 1.0 / 32.0,
            adv: AdvFormulation::Plain,
            train_temperature: 1.0,
            checkpoint_every: 500,
            val_every: 250,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub scale: usize,
    /// Dataset manifest; a synthetic set is generated when absent.
    pub manifest: Option<PathBuf>,
    pub synthetic_count: usize,
    pub synthetic_size: usize,
    pub seed: u64,
    /// Trailing pairs held out for validation and evaluation.
    pub holdout: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            scale: 4,
            manifest: None,
            synthetic_count: 500,
            synthetic_size: 48,
            seed: 0,
            holdout: 20,
        }
    }
}

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub flow: FlowConfig,
    pub encoder: EncoderConfig,
    pub discriminator: DiscriminatorConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            flow: FlowConfig::default(),
            encoder: EncoderConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(vec![format!("config: cannot read {}: {e}", path.display())]))?;
        let mut cfg = Self::from_toml(&text)?;
        // a relative manifest path is relative to the config file; stored
        // absolute so checkpoints work from any directory
        if let (Some(m), Some(dir)) = (cfg.data.manifest.as_mut(), path.parent()) {
            if m.is_relative() {
                let joined = dir.join(&*m);
                *m = std::path::absolute(&joined).unwrap_or(joined);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is always representable")
    }

    /// `λ_adv`: 0.1 at 8× and above, 0.01 below.
    pub fn lambda_adv(&self) -> f64 {
        self.train
            .lambda_adv
            .unwrap_or(if self.data.scale >= 8 { 0.1 } else { 1e-2 })
    }

    /// Discriminator step size: 1e-4 at 8× and above, 1e-3 below.
    pub fn disc_lr(&self) -> f64 {
        self.train
            .disc_lr
            .unwrap_or(if self.data.scale >= 8 { 1e-4 } else { 1e-3 })
    }

    /// The same config with scale-dependent defaults written out.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.train.lambda_adv = Some(self.lambda_adv());
        c.train.disc_lr = Some(self.disc_lr());
        c
    }

    /// Every problem with the config, one message per field.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = self.flow.validate();
        errs.extend(self.encoder.validate());
        let t = &self.train;
        let d = &self.data;
        if d.scale == 0 {
            errs.push("data.scale: must be positive".into());
        }
        if t.batch == 0 {
            errs.push("train.batch: must be positive".into());
        }
        let flow_align = 1usize << self.flow.levels.min(16);
        if t.patch == 0 || t.patch % d.scale.max(1) != 0 || t.patch % flow_align != 0 {
            errs.push(format!(
                "train.patch: {} must be a positive multiple of the scale ({}) and of 2^levels ({flow_align})",
                t.patch, d.scale
            ));
        }
        if !(t.lr > 0.0) {
            errs.push("train.lr: must be positive".into());
        }
        if let Some(v) = t.disc_lr {
            if !(v > 0.0) {
                errs.push("train.disc_lr: must be positive".into());
            }
        }
        if let Some(v) = t.lambda_adv {
            if !(v >= 0.0) {
                errs.push("train.lambda_adv: must be non-negative".into());
            }
        }
        if !(0.0..1.0).contains(&t.noise) {
            errs.push("train.noise: must lie in [0, 1)".into());
        }
        if !(t.train_temperature >= 0.0) {
            errs.push("train.train_temperature: must be non-negative".into());
        }
        match &d.manifest {
            Some(m) if !m.exists() => {
                errs.push(format!("data.manifest: {} does not exist", m.display()));
            }
            Some(_) => {}
            None => {
                if d.synthetic_count == 0 {
                    errs.push("data.synthetic_count: must be positive".into());
                }
                if d.synthetic_size < t.patch {
                    errs.push(format!(
                        "data.synthetic_size: {} is smaller than train.patch {}",
                        d.synthetic_size, t.patch
                    ));
                }
                if d.scale > 0 && d.synthetic_size % d.scale != 0 {
                    errs.push("data.synthetic_size: must be a multiple of data.scale".into());
                }
                if d.holdout >= d.synthetic_count {
                    errs.push("data.holdout: must leave at least one training image".into());
                }
            }
        }
        errs
    }

    pub fn check(&self) -> Result<()> {
        let errs = self.validate();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_toml() {
        let c = RunConfig::default().resolved();
        let back = RunConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert!(c.validate().is_empty());
    }

    #[test]
    fn scale_dependent_defaults() {
        let mut c = RunConfig::default();
        assert_eq!((c.lambda_adv(), c.disc_lr()), (1e-2, 1e-3));
        c.data.scale = 8;
        assert_eq!((c.lambda_adv(), c.disc_lr()), (0.1, 1e-4));
        c.train.lambda_adv = Some(0.0);
        assert_eq!(c.lambda_adv(), 0.0);
    }

    #[test]
    fn errors_name_fields() {
        let mut c = RunConfig::default();
        c.data.manifest = Some("/nonexistent/manifest.toml".into());
        c.train.batch = 0;
        c.train.patch = 30;
        let errs = c.validate();
        assert_eq!(errs.len(), 3, "{errs:?}");
        assert!(errs.iter().any(|e| e.starts_with("data.manifest")));
        assert!(RunConfig::from_toml("[train]\nbogus = 1").is_err());
    }
}
