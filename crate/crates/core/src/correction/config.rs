use serde::{Deserialize, Serialize};

use crate::error::{Result, UlcError};
use crate::network::{DEFAULT_DROPOUT, DEFAULT_HIDDEN};
use crate::noise_model::{noise_modelers, GmmOptions, DEFAULT_MIN_CLASS_SIZE, DEFAULT_R, DEFAULT_TAU};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixMatchConfig {
    /// Beta(alpha, alpha) mixing parameter.
    pub alpha: f64,
    /// Sharpening temperature.
    pub temperature: f64,
    /// Stochastic forward passes averaged for each pseudo-label.
    pub augmentations: usize,
}

impl Default for MixMatchConfig {
    fn default() -> Self {
        MixMatchConfig {
            alpha: 4.0,
            temperature: 0.5,
            augmentations: 2,
        }
    }
}

/// Components that can be switched off to reproduce ablation rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    /// Class-agnostic instead of class-specific mixtures.
    Csm,
    /// Loss posterior only, no epistemic fusion.
    Eum,
    /// No logit corruption during semi-supervised training.
    Aul,
}

impl std::str::FromStr for Ablation {
    type Err = UlcError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csm" => Ok(Ablation::Csm),
            "eum" => Ok(Ablation::Eum),
            "aul" => Ok(Ablation::Aul),
            _ => Err(UlcError::Config(format!("unknown ablation `{s}` (csm, eum, aul)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UlcConfig {
    pub hidden_width: usize,
    pub dropout: f64,
    pub warmup_epochs: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Learning rate is multiplied by 0.1 from this epoch on.
    pub lr_decay_epoch: Option<usize>,
    pub weight_decay: f64,
    pub lambda_u: f64,
    /// Epochs after warm-up over which `lambda_u` ramps linearly from 0.
    pub lambda_u_rampup: usize,
    pub mixmatch: MixMatchConfig,
    pub mc_passes: usize,
    pub aleatoric_samples: usize,
    pub r: f64,
    pub tau: f64,
    pub entropy_weight: f64,
    /// Name in [`noise_modelers`].
    pub noise_model: String,
    pub aleatoric: bool,
    /// Weight of the uniform-prior regularizer; 0 disables it.
    pub uniform_prior_reg: f64,
    pub gmm: GmmOptions,
    pub min_class_size: usize,
    pub seed: u64,
}

impl Default for UlcConfig {
    fn default() -> Self {
        UlcConfig {
            hidden_width: DEFAULT_HIDDEN,
            dropout: DEFAULT_DROPOUT,
            warmup_epochs: 10,
            max_epochs: 120,
            batch_size: 64,
            lr: 0.02,
            momentum: 0.9,
            lr_decay_epoch: None,
            weight_decay: 0.0,
            lambda_u: 25.0,
            lambda_u_rampup: 16,
            mixmatch: MixMatchConfig::default(),
            mc_passes: 10,
            aleatoric_samples: 10,
            r: DEFAULT_R,
            tau: DEFAULT_TAU,
            entropy_weight: 0.0,
            noise_model: "eucs".to_string(),
            aleatoric: true,
            uniform_prior_reg: 0.0,
            gmm: GmmOptions::default(),
            min_class_size: DEFAULT_MIN_CLASS_SIZE,
            seed: 0,
        }
    }
}

impl UlcConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hidden_width", self.hidden_width),
            ("warmup_epochs", self.warmup_epochs),
            ("max_epochs", self.max_epochs),
            ("batch_size", self.batch_size),
            ("mixmatch.augmentations", self.mixmatch.augmentations),
            ("mc_passes", self.mc_passes),
            ("aleatoric_samples", self.aleatoric_samples),
            ("gmm.max_iter", self.gmm.max_iter),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(UlcError::Config(format!("{name} must be >= 1")));
        }
        if self.warmup_epochs > self.max_epochs {
            return Err(UlcError::Config("warmup_epochs exceeds max_epochs".into()));
        }
        if !(self.lambda_u >= 0.0) || !(self.uniform_prior_reg >= 0.0) {
            return Err(UlcError::Config("loss weights must be >= 0".into()));
        }
        if !(self.mixmatch.alpha > 0.0) || !(self.mixmatch.temperature > 0.0) {
            return Err(UlcError::Config("mixmatch alpha and temperature must be > 0".into()));
        }
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(UlcError::Config("lr must be >= 0 and momentum in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.r) {
            return Err(UlcError::Config(format!("r = {} outside [0, 1]", self.r)));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(UlcError::Config(format!("tau = {} outside (0, 1)", self.tau)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(UlcError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        noise_modelers().create(&self.noise_model)?;
        Ok(())
    }

    /// Disables one component, as in the ablation rows.
    pub fn ablate(&mut self, ablation: Ablation) {
        match ablation {
            Ablation::Csm => {
                self.noise_model = match self.noise_model.as_str() {
                    "csm" => "cam",
                    _ => "eu-cam",
                }
                .to_string()
            }
            Ablation::Eum => {
                self.noise_model = match self.noise_model.as_str() {
                    "eu-cam" | "cam" => "cam",
                    _ => "csm",
                }
                .to_string()
            }
            Ablation::Aul => self.aleatoric = false,
        }
    }

    /// Every novel component off: class-agnostic mixture, no uncertainty
    /// fusion, no logit corruption.
    pub fn dividemix_reduction(mut self) -> Self {
        for a in [Ablation::Csm, Ablation::Eum, Ablation::Aul] {
            self.ablate(a);
        }
        self.r = 0.0;
        self
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_decay_epoch {
            Some(e) if epoch >= e => self.lr * 0.1,
            _ => self.lr,
        }
    }

    /// Linear ramp of the unsupervised weight over the first SSL epochs.
    pub fn lambda_u_at(&self, epoch: usize) -> f64 {
        if self.lambda_u_rampup == 0 {
            return self.lambda_u;
        }
        let since = epoch.saturating_sub(self.warmup_epochs) as f64 + 1.0;
        self.lambda_u * (since / self.lambda_u_rampup as f64).min(1.0)
    }
}
