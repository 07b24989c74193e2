use serde::{Deserialize, Serialize};

use super::eval::{evaluate, MetaLearner};
use super::TrainConfig;
use crate::augment::{ascend_task, maybe_random_convolution, AugmentConfig};
use crate::error::{Error, Result};
use crate::models::Network;
use crate::params::ModelParams;
use crate::seed;
use crate::tasks::{sample_episode, DatasetHandle, Task};
use crate::tensor::{Optimizer, Tape};

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Task loss before the ascent (after the optional random convolution).
    pub loss_before: f64,
    /// Task loss of the task the parameters were updated on.
    pub loss_after: f64,
    pub random_conv: bool,
    /// Task loss at every ascent iterate; empty without ascent.
    pub ascent_losses: Vec<f64>,
    pub validation_accuracy: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Best-on-validation parameters, or the last ones when no validation ran.
    pub params: ModelParams,
    pub best_iteration: Option<usize>,
    pub best_validation_accuracy: Option<f64>,
    pub records: Vec<IterationRecord>,
}

/// Adversarial task augmentation. Per iteration: sample one task, apply a
/// random convolution with probability `1 - p`, run `t_max` ascent steps on
/// its pixels, then take one optimizer step on the loss of the ascended task.
pub fn meta_train(
    source: &DatasetHandle,
    validation: Option<&DatasetHandle>,
    init: &ModelParams,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    meta_train_with(source, validation, init, cfg, &mut |_, _| Ok(()))
}

/// [`meta_train`] with a callback that sees every record and the parameters
/// right after the update.
pub fn meta_train_with(
    source: &DatasetHandle,
    validation: Option<&DatasetHandle>,
    init: &ModelParams,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&IterationRecord, &ModelParams) -> Result<()>,
) -> Result<TrainOutcome> {
    run(source, validation, init, cfg, &cfg.augment, observer)
}

/// Episodic training without any task augmentation.
pub fn plain_episodic_train(
    source: &DatasetHandle,
    init: &ModelParams,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&IterationRecord, &ModelParams) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let net = cfg.network()?;
    net.check_params(init)?;
    let mut params = init.clone();
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.lr, cfg.momentum)?;
    let mut records = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let task = sample_episode(
            source,
            cfg.way,
            cfg.shot,
            cfg.train_queries_per_class,
            seed::derive(cfg.seed, seed::EPISODE, it as u64),
        )?;
        let loss = outer_step(&net, &mut params, &mut optimizer, &task, it)?;
        let record = IterationRecord {
            iteration: it,
            loss_before: loss,
            loss_after: loss,
            random_conv: false,
            ascent_losses: Vec::new(),
            validation_accuracy: None,
        };
        observer(&record, &params)?;
        records.push(record);
    }
    Ok(TrainOutcome {
        params,
        best_iteration: None,
        best_validation_accuracy: None,
        records,
    })
}

fn run(
    source: &DatasetHandle,
    validation: Option<&DatasetHandle>,
    init: &ModelParams,
    cfg: &TrainConfig,
    augment: &AugmentConfig,
    observer: &mut dyn FnMut(&IterationRecord, &ModelParams) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let net = cfg.network()?;
    net.check_params(init)?;
    let mut params = init.clone();
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.lr, cfg.momentum)?;
    let mut records = Vec::with_capacity(cfg.iterations);
    let mut best: Option<(f64, usize, ModelParams)> = None;
    let validation = validation.filter(|_| cfg.validate_every > 0);
    for it in 0..cfg.iterations {
        let task = sample_episode(
            source,
            cfg.way,
            cfg.shot,
            cfg.train_queries_per_class,
            seed::derive(cfg.seed, seed::EPISODE, it as u64),
        )?;
        let (task, random_conv) = maybe_random_convolution(&task, augment, seed::derive(cfg.seed, seed::AUGMENT, it as u64))?;
        let (task, ascent_losses) = if augment.t_max > 0 {
            let ascent = ascend_task(&net, &params, &task, augment)?;
            (ascent.task, ascent.losses)
        } else {
            (task, Vec::new())
        };
        let loss = outer_step(&net, &mut params, &mut optimizer, &task, it)?;
        let mut record = IterationRecord {
            iteration: it,
            loss_before: ascent_losses.first().copied().unwrap_or(loss),
            loss_after: loss,
            random_conv,
            ascent_losses,
            validation_accuracy: None,
        };
        if let Some(val) = validation {
            if (it + 1) % cfg.validate_every == 0 || it + 1 == cfg.iterations {
                let report = evaluate(
                    &MetaLearner { net: &net, params: &params },
                    val,
                    cfg.validation_episodes,
                    cfg.way,
                    cfg.shot,
                    cfg.eval_queries_per_class,
                    seed::derive(cfg.seed, seed::VALIDATION, 0),
                )?;
                let acc = report.mean_accuracy;
                record.validation_accuracy = Some(acc);
                log::info!("iteration {}: validation accuracy {acc:.4}", it + 1);
                if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
                    best = Some((acc, it, params.clone()));
                }
            }
        }
        observer(&record, &params)?;
        records.push(record);
    }
    Ok(match best {
        Some((acc, it, best_params)) => TrainOutcome {
            params: best_params,
            best_iteration: Some(it),
            best_validation_accuracy: Some(acc),
            records,
        },
        None => TrainOutcome {
            params,
            best_iteration: None,
            best_validation_accuracy: None,
            records,
        },
    })
}

/// One optimizer step on the task loss. Returns the loss before the step.
fn outer_step(net: &Network, params: &mut ModelParams, optimizer: &mut Optimizer, task: &Task, it: usize) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let x = tape.constant(&task.images());
    let loss = net.task_loss(&mut tape, &bound, x, task)?;
    let value = tape.item(loss)?;
    if !value.is_finite() {
        return Err(Error::Diverged {
            step: it,
            last_good: Box::new(params.clone()),
        });
    }
    tape.backward(loss)?;
    params.absorb_grads(&tape, &bound)?;
    let before = params.clone();
    optimizer.step(params)?;
    if !params.all_finite() {
        return Err(Error::Diverged {
            step: it,
            last_good: Box::new(before),
        });
    }
    Ok(value)
}
