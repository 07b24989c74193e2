use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::eval::accuracy;
use super::pseudo::{generate_pseudo, PseudoConfig};
use crate::error::{Error, Result};
use crate::models::Network;
use crate::params::ModelParams;
use crate::seed;
use crate::tasks::Task;
use crate::tensor::{Optimizer, OptimizerKind, Tape, Tensor};

const FC_W: &str = "finetune.fc.weight";
const FC_B: &str = "finetune.fc.bias";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    /// SGD learning rate of the fine-tuning baseline.
    pub lr: f64,
    pub momentum: f64,
    /// Adam learning rate when adapting a meta-learner.
    pub meta_lr: f64,
    /// `None` picks 30 epochs for 1-shot tasks and 50 otherwise.
    pub epochs: Option<usize>,
    pub pseudo: PseudoConfig,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            lr: 0.01,
            momentum: 0.9,
            meta_lr: 1e-3,
            epochs: None,
            pseudo: PseudoConfig::default(),
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn epochs_for(&self, shot: usize) -> usize {
        self.epochs.unwrap_or(if shot <= 1 { 30 } else { 50 })
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [("finetune.lr", self.lr), ("finetune.meta_lr", self.meta_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(field, format!("must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("finetune.momentum", "must lie in [0, 1)"));
        }
        self.pseudo.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneOutcome {
    pub accuracy: f64,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub pseudo_per_epoch: Vec<usize>,
    /// Support plus pseudo samples seen in each epoch.
    pub samples_per_epoch: Vec<usize>,
    /// Parameter updates actually applied by the optimizer.
    pub optimizer_steps: u64,
    pub epoch_losses: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptOutcome {
    pub accuracy: f64,
    pub lr: f64,
    pub epochs: usize,
    pub pseudo_per_epoch: Vec<usize>,
    pub epoch_losses: Vec<f64>,
}

/// Fine-tunes the encoder of `encoder` plus a fresh linear classifier on the
/// support set and, every epoch, a new batch of pseudo samples. One SGD step
/// per epoch over the whole batch. Returns query accuracy.
pub fn finetune_baseline(net: &Network, encoder: &ModelParams, task: &Task, cfg: &FinetuneConfig) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    task.validate()?;
    let mut outcome = FinetuneOutcome {
        accuracy: 0.0,
        optimizer: OptimizerKind::SgdMomentum,
        lr: cfg.lr,
        momentum: cfg.momentum,
        epochs: cfg.epochs_for(task.shot),
        pseudo_per_epoch: Vec::new(),
        samples_per_epoch: Vec::new(),
        optimizer_steps: 0,
        epoch_losses: Vec::new(),
    };
    // query labels stay out of training: only the images are passed on
    let predicted = finetune_predict(net, encoder, &task.support_x, &task.support_y, task.way, &task.query_x, cfg, &mut outcome)?;
    outcome.accuracy = accuracy(&predicted, &task.query_y);
    Ok(outcome)
}

#[allow(clippy::too_many_arguments)]
fn finetune_predict(
    net: &Network,
    encoder: &ModelParams,
    support_x: &Tensor,
    support_y: &[usize],
    way: usize,
    query_x: &Tensor,
    cfg: &FinetuneConfig,
    outcome: &mut FinetuneOutcome,
) -> Result<Vec<usize>> {
    let dim = net.feature_dim();
    let mut params = encoder.subset("encoder.");
    let normal = Normal::new(0.0, (2.0 / (dim + way) as f64).sqrt()).expect("positive std");
    let mut rng = seed::rng(seed::derive(cfg.seed, seed::INIT, 3000));
    params.insert(FC_W, Tensor::new(vec![dim, way], (0..dim * way).map(|_| normal.sample(&mut rng)).collect())?);
    params.insert(FC_B, Tensor::zeros(&[way])?);
    let mut optimizer = Optimizer::sgd(cfg.lr, cfg.momentum)?;
    for epoch in 0..outcome.epochs {
        let (pseudo, pseudo_y) = generate_pseudo(
            support_x,
            support_y,
            way,
            &cfg.pseudo,
            seed::derive(cfg.seed, seed::PSEUDO, epoch as u64),
        )?;
        let batch = Tensor::concat_rows(&[support_x, &pseudo])?;
        let labels: Vec<usize> = support_y.iter().chain(&pseudo_y).copied().collect();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, true);
        let x = tape.constant(&batch);
        let f = net.encode(&mut tape, &bound, x)?;
        let logits = tape.dense(f, bound.get(FC_W)?, bound.get(FC_B)?)?;
        let loss = tape.softmax_cross_entropy(logits, &labels)?;
        let value = tape.item(loss)?;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("fine-tuning loss at epoch {epoch}")));
        }
        tape.backward(loss)?;
        params.absorb_grads(&tape, &bound)?;
        optimizer.step(&mut params)?;
        outcome.pseudo_per_epoch.push(pseudo_y.len());
        outcome.samples_per_epoch.push(labels.len());
        outcome.epoch_losses.push(value);
    }
    outcome.optimizer_steps = optimizer.steps();
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let x = tape.constant(query_x);
    let f = net.encode(&mut tape, &bound, x)?;
    let logits = tape.dense(f, bound.get(FC_W)?, bound.get(FC_B)?)?;
    tape.tensor(logits).argmax_rows()
}

/// Adapts a meta-learner to one task: every epoch the true support set is
/// paired with a fresh pseudo set as query set and all parameters take one
/// Adam step. Returns accuracy on the true queries.
pub fn adapt_meta_finetune(net: &Network, params: &ModelParams, task: &Task, cfg: &FinetuneConfig) -> Result<AdaptOutcome> {
    cfg.validate()?;
    task.validate()?;
    net.check_params(params)?;
    let epochs = cfg.epochs_for(task.shot);
    let mut params = params.clone();
    let mut optimizer = Optimizer::adam(cfg.meta_lr)?;
    let mut outcome = AdaptOutcome {
        accuracy: 0.0,
        lr: cfg.meta_lr,
        epochs,
        pseudo_per_epoch: Vec::new(),
        epoch_losses: Vec::new(),
    };
    for epoch in 0..epochs {
        let (pseudo, pseudo_y) = generate_pseudo(
            &task.support_x,
            &task.support_y,
            task.way,
            &cfg.pseudo,
            seed::derive(cfg.seed, seed::PSEUDO, epoch as u64),
        )?;
        outcome.pseudo_per_epoch.push(pseudo_y.len());
        let inner = Task::new(task.support_x.clone(), task.support_y.clone(), pseudo, pseudo_y, task.way, task.shot)?;
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, true);
        let x = tape.constant(&inner.images());
        let loss = net.task_loss(&mut tape, &bound, x, &inner)?;
        let value = tape.item(loss)?;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("adaptation loss at epoch {epoch}")));
        }
        tape.backward(loss)?;
        params.absorb_grads(&tape, &bound)?;
        optimizer.step(&mut params)?;
        outcome.epoch_losses.push(value);
    }
    outcome.accuracy = accuracy(&net.predict(&params, task)?, &task.query_y);
    Ok(outcome)
}
