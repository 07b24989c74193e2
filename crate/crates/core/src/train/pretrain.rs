use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::params::ModelParams;
use crate::seed;
use crate::tasks::DatasetHandle;
use crate::tensor::{Optimizer, Tape, Tensor};

const FC_W: &str = "pretrain.fc.weight";
const FC_B: &str = "pretrain.fc.bias";

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    /// Encoder tensors only; the classification layer is dropped.
    pub encoder: ModelParams,
    pub epoch_losses: Vec<f64>,
    /// Accuracy of encoder plus classification layer on the whole training set.
    pub train_accuracy: f64,
}

/// Trains the encoder with a temporary linear classifier over all classes of
/// `data` by mini-batch cross-entropy.
pub fn pretrain_encoder(data: &DatasetHandle, cfg: &TrainConfig) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if data.class_count() < 2 {
        return Err(Error::Insufficient(format!(
            "pre-training needs at least 2 classes, `{}` has {}",
            data.name,
            data.class_count()
        )));
    }
    let net = cfg.network()?;
    let dim = net.feature_dim();
    let classes = data.class_count();
    let mut params = net.init_params(cfg.seed).subset("encoder.");
    let mut rng = seed::rng(seed::derive(cfg.seed, seed::INIT, 2000));
    let std = (2.0 / (dim + classes) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let w = (0..dim * classes).map(|_| normal.sample(&mut rng)).collect();
    params.insert(FC_W, Tensor::new(vec![dim, classes], w)?);
    params.insert(FC_B, Tensor::zeros(&[classes])?);

    let samples: Vec<(usize, &[f64])> = data.labeled_images().collect();
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.pretrain_lr, cfg.momentum)?;
    let mut last_good = params.clone();
    let mut epoch_losses = Vec::with_capacity(cfg.pretrain_epochs);
    let mut step = 0;
    for epoch in 0..cfg.pretrain_epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut seed::rng(seed::derive(cfg.seed, seed::BATCH, epoch as u64)));
        let mut total = 0.0;
        for batch in order.chunks(cfg.pretrain_batch_size) {
            let images: Vec<&[f64]> = batch.iter().map(|&i| samples[i].1).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| samples[i].0).collect();
            let x = data.stack(&images)?;
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, true);
            let xv = tape.constant(&x);
            let f = net.encode(&mut tape, &bound, xv)?;
            let logits = tape.dense(f, bound.get(FC_W)?, bound.get(FC_B)?)?;
            let loss = tape.softmax_cross_entropy(logits, &labels)?;
            let value = tape.item(loss)?;
            if !value.is_finite() {
                return Err(Error::Diverged {
                    step,
                    last_good: Box::new(last_good.subset("encoder.")),
                });
            }
            tape.backward(loss)?;
            params.absorb_grads(&tape, &bound)?;
            optimizer.step(&mut params)?;
            if !params.all_finite() {
                return Err(Error::Diverged {
                    step,
                    last_good: Box::new(last_good.subset("encoder.")),
                });
            }
            last_good = params.clone();
            total += value * batch.len() as f64;
            step += 1;
        }
        let mean = total / samples.len() as f64;
        log::debug!("pretrain epoch {epoch}: loss {mean:.5}");
        epoch_losses.push(mean);
    }

    let mut hits = 0;
    for chunk in samples.chunks(cfg.pretrain_batch_size.max(64)) {
        let images: Vec<&[f64]> = chunk.iter().map(|s| s.1).collect();
        let x = data.stack(&images)?;
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let xv = tape.constant(&x);
        let f = net.encode(&mut tape, &bound, xv)?;
        let logits = tape.dense(f, bound.get(FC_W)?, bound.get(FC_B)?)?;
        let predicted = tape.tensor(logits).argmax_rows()?;
        hits += predicted.iter().zip(chunk).filter(|(p, s)| **p == s.0).count();
    }
    Ok(PretrainOutcome {
        encoder: params.subset("encoder."),
        epoch_losses,
        train_accuracy: hits as f64 / samples.len() as f64,
    })
}
