//! Encoder pre-training, episodic meta-training, evaluation and the
//! fine-tuning protocols.

mod eval;
mod finetune;
mod meta;
mod pretrain;
mod pseudo;

pub use eval::{evaluate, EvalReport, MetaLearner, Predictor, UniformPredictor};
pub use finetune::{adapt_meta_finetune, finetune_baseline, AdaptOutcome, FinetuneConfig, FinetuneOutcome};
pub use meta::{meta_train, meta_train_with, plain_episodic_train, IterationRecord, TrainOutcome};
pub use pretrain::{pretrain_encoder, PretrainOutcome};
pub use pseudo::{augment_image, PseudoConfig};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::error::{Error, Result};
use crate::models::{EncoderConfig, HeadKind, Network};
use crate::tensor::OptimizerKind;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub encoder: EncoderConfig,
    pub head: HeadKind,
    /// Outer learning rate.
    pub lr: f64,
    pub optimizer: OptimizerKind,
    /// Only read by SGD.
    pub momentum: f64,
    /// Meta-training iterations, one task each.
    pub iterations: usize,
    pub way: usize,
    pub shot: usize,
    pub train_queries_per_class: usize,
    pub eval_queries_per_class: usize,
    pub eval_episodes: usize,
    pub validation_episodes: usize,
    /// Validate every this many iterations; 0 disables validation.
    pub validate_every: usize,
    /// Checkpoint every this many iterations; 0 disables checkpoints.
    pub checkpoint_every: usize,
    pub augment: AugmentConfig,
    pub pretrain_epochs: usize,
    pub pretrain_batch_size: usize,
    pub pretrain_lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            encoder: EncoderConfig::default(),
            head: HeadKind::Prototypical,
            lr: 1e-3,
            optimizer: OptimizerKind::Adam,
            momentum: 0.9,
            iterations: 1000,
            way: 5,
            shot: 1,
            train_queries_per_class: 8,
            eval_queries_per_class: 16,
            eval_episodes: 2000,
            validation_episodes: 200,
            validate_every: 0,
            checkpoint_every: 0,
            augment: AugmentConfig::default(),
            pretrain_epochs: 10,
            pretrain_batch_size: 32,
            pretrain_lr: 1e-3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn network(&self) -> Result<Network> {
        Network::new(self.encoder.clone(), self.head.clone())
    }

    pub fn validate(&self) -> Result<()> {
        self.network()?;
        self.augment.validate()?;
        for (field, v) in [("lr", self.lr), ("pretrain_lr", self.pretrain_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(field, format!("must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", format!("must lie in [0, 1), got {}", self.momentum)));
        }
        for (field, v) in [
            ("way", self.way),
            ("shot", self.shot),
            ("train_queries_per_class", self.train_queries_per_class),
            ("eval_queries_per_class", self.eval_queries_per_class),
            ("eval_episodes", self.eval_episodes),
            ("pretrain_batch_size", self.pretrain_batch_size),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.validate_every > 0 && self.validation_episodes == 0 {
            return Err(Error::config("validation_episodes", "must be positive when validation is enabled"));
        }
        Ok(())
    }
}
