//! Dynamic adversarial adaptation network.
//!
//! A shared convolutional extractor feeds a location predictor, one global
//! domain discriminator and one local discriminator per reference point.
//! Discriminators sit behind a gradient-reversal node, so a single
//! minimization of `L_y + γ L_tar + L_adv` trains them to separate domains
//! while the extractor is pushed to confuse them.

mod checkpoint;
mod losses;
mod model;
mod predict;
mod train;

use std::fmt;
use std::str::FromStr;

use ndcore::LrSchedule;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use losses::{
    a_distance, adv_loss_dynamic, domain_targets, entropy, estimate_mu, loss_global, loss_label,
    loss_local, loss_target_entropy, total_objective, uncertainty_weight, uncertainty_weights,
    AdversarialLoss,
};
pub use model::{images_to_tensor, DaanModel, ParamGroup};
pub use predict::{locate, predict_location, predict_locations, Location, PredictMode};
pub use train::{accumulate_step, pretrain, train, EpochRecord, Phase, TrainState};

/// How μ evolves during training.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum MuMode {
    /// Re-estimated from discriminator statistics after every epoch.
    Dynamic,
    Fixed(f64),
}

impl FromStr for MuMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "dynamic" {
            return Ok(MuMode::Dynamic);
        }
        let value = s
            .strip_prefix("fixed:")
            .and_then(|v| v.parse::<f64>().ok())
            .ok_or_else(|| {
                Error::invalid(
                    "mu mode",
                    format!("'{s}' (expected 'dynamic' or 'fixed:<value>')"),
                )
            })?;
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::invalid(
                "mu mode",
                format!("fixed value {value} outside [0, 1]"),
            ));
        }
        Ok(MuMode::Fixed(value))
    }
}

impl fmt::Display for MuMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MuMode::Dynamic => f.write_str("dynamic"),
            MuMode::Fixed(v) => write!(f, "fixed:{v}"),
        }
    }
}

impl TryFrom<String> for MuMode {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<MuMode> for String {
    fn from(m: MuMode) -> String {
        m.to_string()
    }
}

/// Quantity plugged into `A = 2(1 - 2ε)` when estimating μ.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MuSource {
    /// Epoch-mean discriminator misclassification rate at threshold 0.5.
    ErrorRate,
    /// Epoch-mean discriminator loss, clamped like an error rate.
    RawLoss,
}

/// Architecture and training hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DaanConfig {
    /// Number of reference points (classes).
    pub num_rps: usize,
    pub feature_dim: usize,
    /// Output channels of the convolutional blocks; each block is two 3x3
    /// convolutions, leaky ReLU, 2x2 max pooling and batch normalization.
    pub conv_channels: Vec<usize>,
    pub leaky_alpha: f64,
    /// Hidden widths; the output layer is implied.
    pub predictor_hidden: Vec<usize>,
    pub global_disc_hidden: Vec<usize>,
    pub local_disc_hidden: Vec<usize>,
    pub lambda: f64,
    pub gamma: f64,
    pub mu_init: f64,
    pub mu_mode: MuMode,
    pub mu_source: MuSource,
    pub pus_enabled: bool,
    pub batch_size: usize,
    /// Supervised epochs on source batches alone before adaptation.
    pub pretrain_epochs: usize,
    /// Adaptation epochs.
    pub epochs: usize,
    pub eta0: f64,
    pub lr_alpha: f64,
    pub lr_beta: f64,
    pub momentum: f64,
    /// Learning-rate multiplier of the predictor.
    pub predictor_lr_scale: f64,
}

impl DaanConfig {
    pub fn new(num_rps: usize) -> Self {
        let lr = LrSchedule::default();
        Self {
            num_rps,
            feature_dim: 128,
            conv_channels: vec![4, 8, 8, 8],
            leaky_alpha: 0.1,
            predictor_hidden: vec![64],
            global_disc_hidden: vec![64],
            local_disc_hidden: vec![32],
            lambda: 1.0,
            gamma: 0.1,
            mu_init: 0.5,
            mu_mode: MuMode::Dynamic,
            mu_source: MuSource::ErrorRate,
            pus_enabled: true,
            batch_size: 64,
            pretrain_epochs: 10,
            epochs: 20,
            eta0: lr.eta0,
            lr_alpha: lr.alpha,
            lr_beta: lr.beta,
            momentum: 0.9,
            predictor_lr_scale: 10.0,
        }
    }

    /// Plain supervised training: no entropy or adversarial term.
    pub fn source_only(mut self) -> Self {
        self.gamma = 0.0;
        self.lambda = 0.0;
        self
    }

    pub fn lr_schedule(&self) -> LrSchedule {
        LrSchedule {
            eta0: self.eta0,
            alpha: self.lr_alpha,
            beta: self.lr_beta,
        }
    }

    /// μ at the start of training.
    pub fn initial_mu(&self) -> f64 {
        match self.mu_mode {
            MuMode::Dynamic => self.mu_init,
            MuMode::Fixed(v) => v,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(Error::invalid("model config", reason));
        if self.num_rps == 0 {
            return bad("at least one reference point is required".into());
        }
        if self.feature_dim == 0 || self.conv_channels.is_empty() || self.conv_channels.contains(&0)
        {
            return bad("feature_dim and every conv block width must be positive".into());
        }
        let widths = [
            &self.predictor_hidden,
            &self.global_disc_hidden,
            &self.local_disc_hidden,
        ];
        if widths.iter().any(|w| w.contains(&0)) {
            return bad("hidden widths must be positive".into());
        }
        if !(self.leaky_alpha > 0.0 && self.leaky_alpha < 1.0) {
            return bad(format!("leaky_alpha {} outside (0, 1)", self.leaky_alpha));
        }
        if !(0.0..).contains(&self.lambda) || !(0.0..).contains(&self.gamma) {
            return bad("lambda and gamma must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.mu_init) {
            return bad(format!("mu_init {} outside [0, 1]", self.mu_init));
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size {} below 2", self.batch_size));
        }
        if self.eta0.is_nan() || self.eta0 <= 0.0 || self.lr_alpha < 0.0 || self.lr_beta < 0.0 {
            return bad("learning-rate schedule must have eta0 > 0, alpha >= 0, beta >= 0".into());
        }
        if !(0.0..1.0).contains(&self.momentum)
            || self.predictor_lr_scale.is_nan()
            || self.predictor_lr_scale <= 0.0
        {
            return bad("momentum must lie in [0, 1) and predictor_lr_scale be positive".into());
        }
        Ok(())
    }

    /// Whether two configs describe the same parameter layout.
    pub fn same_architecture(&self, other: &DaanConfig) -> bool {
        self.num_rps == other.num_rps
            && self.feature_dim == other.feature_dim
            && self.conv_channels == other.conv_channels
            && self.predictor_hidden == other.predictor_hidden
            && self.global_disc_hidden == other.global_disc_hidden
            && self.local_disc_hidden == other.local_disc_hidden
    }
}
