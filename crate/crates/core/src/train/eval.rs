use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Network;
use crate::params::ModelParams;
use crate::seed;
use crate::tasks::{sample_episode, DatasetHandle, Task};

/// Anything that labels the queries of a task.
pub trait Predictor: Sync {
    /// `episode_seed` is unique per evaluated episode, for stochastic predictors.
    fn predict(&self, task: &Task, episode_seed: u64) -> Result<Vec<usize>>;
}

/// A trained meta-learner.
pub struct MetaLearner<'a> {
    pub net: &'a Network,
    pub params: &'a ModelParams,
}

impl Predictor for MetaLearner<'_> {
    fn predict(&self, task: &Task, _episode_seed: u64) -> Result<Vec<usize>> {
        self.net.predict(self.params, task)
    }
}

/// Labels every query uniformly at random.
pub struct UniformPredictor;

impl Predictor for UniformPredictor {
    fn predict(&self, task: &Task, episode_seed: u64) -> Result<Vec<usize>> {
        let mut rng = seed::rng(episode_seed);
        Ok((0..task.query_count()).map(|_| rng.random_range(0..task.way)).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub episodes: usize,
    pub mean_accuracy: f64,
    /// `1.96 σ / √n` with the population standard deviation of the
    /// per-episode accuracies.
    pub ci95_halfwidth: f64,
    pub per_episode_accuracies: Vec<f64>,
}

impl EvalReport {
    pub fn from_accuracies(acc: Vec<f64>) -> Result<Self> {
        if acc.is_empty() {
            return Err(Error::invalid("an evaluation needs at least one episode"));
        }
        let n = acc.len() as f64;
        let mean = acc.iter().sum::<f64>() / n;
        let var = acc.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
        Ok(EvalReport {
            episodes: acc.len(),
            mean_accuracy: mean,
            ci95_halfwidth: 1.96 * var.sqrt() / n.sqrt(),
            per_episode_accuracies: acc,
        })
    }
}

pub(crate) fn accuracy(predicted: &[usize], labels: &[usize]) -> f64 {
    let hits = predicted.iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / labels.len() as f64
}

/// Accuracy over `episodes` sampled episodes. Episode `i` is drawn from a
/// seed derived from `(seed, i)`, so the report does not depend on how the
/// episodes are spread over threads.
pub fn evaluate(
    predictor: &dyn Predictor,
    data: &DatasetHandle,
    episodes: usize,
    way: usize,
    shot: usize,
    queries_per_class: usize,
    seed_value: u64,
) -> Result<EvalReport> {
    if episodes == 0 {
        return Err(Error::invalid("an evaluation needs at least one episode"));
    }
    let acc = (0..episodes)
        .into_par_iter()
        .map(|i| {
            let episode_seed = seed::derive(seed_value, seed::EPISODE, i as u64);
            let task = sample_episode(data, way, shot, queries_per_class, episode_seed)?;
            let predicted = predictor.predict(&task, seed::derive(episode_seed, seed::VALIDATION, 0))?;
            if predicted.len() != task.query_count() {
                return Err(Error::shape(format!(
                    "{} predictions for {} queries",
                    predicted.len(),
                    task.query_count()
                )));
            }
            Ok(accuracy(&predicted, &task.query_y))
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_accuracies(acc)
}
