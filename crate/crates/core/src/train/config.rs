use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::corruption::CorruptionPolicy;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objectives::{ComponentFlags, LossPositions};

/// Training variant. `Full` is the complete method; the others are the
/// ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Full,
    /// Skip the intra-modal denoising pass.
    NoIdae,
    /// Recompute translations from masked queries every epoch.
    NoIdp,
    /// Ignore the paired split: no warm-up, translations from the untrained model.
    NoPaired,
    /// Train on the paired split only, with clean cross-modal memory and no store.
    PairedOnly,
}

impl Mode {
    pub fn flags(self) -> ComponentFlags {
        ComponentFlags {
            idae: self != Mode::NoIdae,
            cdae_unpaired: self != Mode::PairedOnly,
            cdae_paired: self != Mode::NoPaired,
            warm: self != Mode::NoPaired,
        }
    }

    pub fn uses_paired(self) -> bool {
        self != Mode::NoPaired
    }

    pub fn uses_unpaired(self) -> bool {
        self != Mode::PairedOnly
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    /// Corpus directory (manifest.json, text/, audio/).
    pub corpus: PathBuf,
    /// Run directory; nothing is written when absent.
    pub out_dir: Option<PathBuf>,
    /// Main-stage epochs K.
    pub epochs: usize,
    /// Warm-up epochs T.
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Fraction of each stage's steps spent ramping up the learning rate.
    pub warmup_fraction: f64,
    pub seed: u64,
    pub mode: Mode,
    /// Write a checkpoint every this many epochs (the last epoch always).
    pub checkpoint_every: usize,
    pub loss_positions: LossPositions,
    pub idae_policy: CorruptionPolicy,
    pub cdae_policy: CorruptionPolicy,
    /// Replacement probability of the translation-noise imitator.
    pub imitate_prob: f64,
    pub grad_clip: f64,
    /// Examples per forward pass when refreshing translations.
    pub translate_batch: usize,
    /// Emit one metrics record per optimizer step as well as per epoch.
    pub log_steps: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::desk(),
            corpus: PathBuf::from("corpus"),
            out_dir: None,
            epochs: 30,
            warmup_epochs: 5,
            batch_size: 16,
            learning_rate: 1e-3,
            warmup_fraction: 0.05,
            seed: 0,
            mode: Mode::Full,
            checkpoint_every: 1,
            loss_positions: LossPositions::Selected,
            idae_policy: CorruptionPolicy::idae(),
            cdae_policy: CorruptionPolicy::cdae(),
            imitate_prob: 0.3,
            grad_clip: 1.0,
            translate_batch: 64,
            log_steps: true,
        }
    }
}

impl TrainConfig {
    /// Paper-scale preset (not a desk target).
    pub fn paper() -> Self {
        Self {
            model: ModelConfig::paper(),
            learning_rate: 2e-5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.idae_policy.validate()?;
        self.cdae_policy.validate()?;
        let positive = [
            ("epochs", self.epochs),
            ("warmup_epochs", self.warmup_epochs),
            ("batch_size", self.batch_size),
            ("checkpoint_every", self.checkpoint_every),
            ("translate_batch", self.translate_batch),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config("warmup_fraction must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.imitate_prob) {
            return Err(Error::Config("imitate_prob must lie in [0, 1]".into()));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        Ok(())
    }

    pub fn warmup_steps(&self, total: u64) -> u64 {
        (self.warmup_fraction * total as f64).round() as u64
    }
}
