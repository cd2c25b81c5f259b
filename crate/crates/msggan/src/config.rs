//! Experiment configuration: one flat JSON object with strict unknown-key
//! rejection, validated into an architecture before any work starts. A
//! serialized copy is written into every run directory so a run can always be
//! reproduced from its artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::arch_spec::{ArchitectureSpec, CombineKind, ConnectionMode, LossKind};
use crate::data;
use crate::error::{Error, Result};
use crate::extractor;
use crate::losses::PenaltyOptions;

/// Everything a run needs, with defaults for every field so configs only
/// state what they change.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Dataset kind: synthetic | image_folder | cifar10.
    pub dataset: String,
    /// Directory for file-backed datasets.
    pub dataset_root: Option<PathBuf>,
    /// Image count for the synthetic dataset.
    pub dataset_size: usize,
    pub final_resolution: usize,
    pub latent_dim: usize,
    pub max_channels: usize,
    /// simple | lin_cat | cat_lin.
    pub combine_kind: String,
    /// none | coarse | middle | fine | all.
    pub connection_mode: String,
    /// wgan_gp | nonsat_gp.
    pub loss_kind: String,
    pub equalized_lr: bool,
    pub lr: f64,
    pub batch_size: usize,
    /// Total real images to show; 0 trains nothing and just writes the
    /// initial checkpoint.
    pub budget: u64,
    pub seed: u64,
    pub gp_lambda: f64,
    pub gp_drift_eps: f64,
    pub gp_gamma: f64,
    pub gp_per_scale_alpha: bool,
    pub gp_one_sided: bool,
    /// Maintain an exponential moving average of generator parameters.
    pub ema_generator: bool,
    pub ema_beta: f64,
    pub out_dir: PathBuf,
    /// Feature extractor for metric rows: fid_proxy | pooled_pixels.
    pub extractor: String,
    pub checkpoint_every_steps: u64,
    pub metrics_every_steps: u64,
    /// Generated/real sample count per metric evaluation.
    pub eval_samples: usize,
    /// Split count for the class-entropy score.
    pub is_splits: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: "synthetic".into(),
            dataset_root: None,
            dataset_size: 512,
            final_resolution: 32,
            latent_dim: 512,
            max_channels: 512,
            combine_kind: "simple".into(),
            connection_mode: "all".into(),
            loss_kind: "wgan_gp".into(),
            equalized_lr: true,
            lr: 0.003,
            batch_size: 16,
            budget: 0,
            seed: 0,
            gp_lambda: 10.0,
            gp_drift_eps: 0.001,
            gp_gamma: 10.0,
            gp_per_scale_alpha: false,
            gp_one_sided: false,
            ema_generator: false,
            ema_beta: 0.999,
            out_dir: PathBuf::from("runs/msggan"),
            extractor: "fid_proxy".into(),
            checkpoint_every_steps: 1000,
            metrics_every_steps: 50,
            eval_samples: 128,
            is_splits: 10,
        }
    }
}

pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {}", path.display(), e)))?;
        Self::from_json(&text)
            .map_err(|e| Error::InvalidConfig(format!("{}: {}", path.display(), e)))
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_pretty_json() + "\n")?;
        Ok(())
    }

    /// Stable digest of the canonical serialization; stored in checkpoints so
    /// resuming under a different config is detectable.
    pub fn hash(&self) -> u64 {
        fnv1a64(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    pub fn combine_kind(&self) -> Result<CombineKind> {
        self.combine_kind
            .parse()
            .map_err(|e| Error::InvalidConfig(format!("combine_kind: {}", e)))
    }

    pub fn connection_mode(&self) -> Result<ConnectionMode> {
        self.connection_mode
            .parse()
            .map_err(|e| Error::InvalidConfig(format!("connection_mode: {}", e)))
    }

    pub fn loss_kind(&self) -> Result<LossKind> {
        self.loss_kind
            .parse()
            .map_err(|e| Error::InvalidConfig(format!("loss_kind: {}", e)))
    }

    pub fn penalty_options(&self) -> PenaltyOptions {
        PenaltyOptions {
            lambda: self.gp_lambda,
            drift_eps: self.gp_drift_eps,
            gamma: self.gp_gamma,
            per_scale_alpha: self.gp_per_scale_alpha,
            one_sided: self.gp_one_sided,
        }
    }

    pub fn source_config(&self) -> data::SourceConfig {
        data::SourceConfig {
            root: self.dataset_root.clone(),
            size: self.dataset_size,
            resolution: self.final_resolution,
            seed: self.seed,
        }
    }

    /// Full structural validation; returns the resolved architecture.
    pub fn validate(&self) -> Result<ArchitectureSpec> {
        let spec = ArchitectureSpec::resolve(
            self.final_resolution,
            self.latent_dim,
            self.max_channels,
            self.combine_kind()?,
            self.connection_mode()?,
            self.loss_kind()?,
        )?;
        data::source_registry::<f32>().get(&self.dataset)?;
        extractor::extractor_registry::<f32>().get(&self.extractor)?;
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::InvalidConfig(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig(format!(
                "batch_size must be >= 2 (batch statistics need at least 2 samples), got {}",
                self.batch_size
            )));
        }
        if !(self.ema_beta > 0.0 && self.ema_beta < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "ema_beta must lie in (0, 1), got {}",
                self.ema_beta
            )));
        }
        for (name, v) in [
            ("gp_lambda", self.gp_lambda),
            ("gp_drift_eps", self.gp_drift_eps),
            ("gp_gamma", self.gp_gamma),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "{} must be finite and >= 0, got {}",
                    name, v
                )));
            }
        }
        if self.checkpoint_every_steps == 0 || self.metrics_every_steps == 0 {
            return Err(Error::InvalidConfig(
                "checkpoint_every_steps and metrics_every_steps must be >= 1".into(),
            ));
        }
        if self.eval_samples < 2 {
            return Err(Error::InvalidConfig(format!(
                "eval_samples must be >= 2 for covariance statistics, got {}",
                self.eval_samples
            )));
        }
        if self.is_splits == 0 {
            return Err(Error::InvalidConfig("is_splits must be >= 1".into()));
        }
        Ok(spec)
    }
}
