//! Task-level augmentation: random convolutions and adversarial ascent on
//! task pixels.

mod distance;
mod randconv;

pub use distance::{feature_distance, task_distance, DistanceKind};
pub use randconv::{apply_random_kernel, random_convolution, sample_random_kernel};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Network;
use crate::params::ModelParams;
use crate::seed;
use crate::tasks::Task;
use crate::tensor::{Tape, Tensor};

/// Regulariser subtracted from the ascent objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegKind {
    #[default]
    None,
    Euclid,
    Mmd,
}

impl RegKind {
    pub fn distance(self) -> Option<DistanceKind> {
        match self {
            RegKind::None => None,
            RegKind::Euclid => Some(DistanceKind::Euclid),
            RegKind::Mmd => Some(DistanceKind::Mmd),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            RegKind::None => "none",
            RegKind::Euclid => "euclid",
            RegKind::Mmd => "mmd",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Ascent learning rate.
    pub beta: f64,
    /// Number of ascent steps.
    pub t_max: usize,
    /// Probability of keeping the original pixels instead of a random convolution.
    pub p: f64,
    pub filter_pool: Vec<usize>,
    pub gamma: f64,
    pub reg_kind: RegKind,
}

pub const DEFAULT_FILTER_POOL: [usize; 6] = [1, 3, 5, 7, 11, 15];

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            beta: 20.0,
            t_max: 5,
            p: 0.6,
            filter_pool: DEFAULT_FILTER_POOL.to_vec(),
            gamma: 1.0,
            reg_kind: RegKind::None,
        }
    }
}

impl AugmentConfig {
    /// No random convolution and no ascent.
    pub fn disabled() -> Self {
        AugmentConfig {
            t_max: 0,
            p: 1.0,
            ..AugmentConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::config("augment.beta", format!("must be positive, got {}", self.beta)));
        }
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::config("augment.p", format!("must lie in [0, 1], got {}", self.p)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::config("augment.gamma", format!("must be non-negative, got {}", self.gamma)));
        }
        randconv::validate_pool(&self.filter_pool)
    }
}

/// Result of [`ascend_task`]. `losses[i]` is the task loss at the `i`-th
/// iterate, so `losses[0]` is the input task and the last entry the output.
#[derive(Clone, Debug)]
pub struct Ascent {
    pub task: Task,
    pub losses: Vec<f64>,
}

impl Ascent {
    pub fn initial_loss(&self) -> f64 {
        self.losses[0]
    }

    pub fn final_loss(&self) -> f64 {
        *self.losses.last().expect("at least the initial loss")
    }
}

/// With probability `1 - p` replaces all samples of `task` by one shared
/// random convolution. Returns the (possibly) transformed task and whether
/// the convolution was applied.
pub fn maybe_random_convolution(task: &Task, cfg: &AugmentConfig, rng_seed: u64) -> Result<(Task, bool)> {
    let coin: f64 = seed::rng(seed::derive(rng_seed, seed::AUGMENT, 0)).random();
    if coin < cfg.p {
        return Ok((task.clone(), false));
    }
    let images = random_convolution(&task.images(), &cfg.filter_pool, rng_seed)?;
    Ok((task.with_images(&images)?, true))
}

/// Largest number of step halvings tried by the regularised ascent.
const MAX_HALVINGS: usize = 60;

/// Gradient ascent on the pixels of every sample (support and query) with the
/// parameters frozen: `X_i = X_{i-1} + β ∇_X J(X_{i-1})`. `J` is the task loss,
/// or `L - γ d(F, F0)` when a regulariser is configured, `F0` being the
/// features of the input task. Labels are never touched.
///
/// The unregularised ascent takes raw steps. With a regulariser the step is
/// halved until `J` does not decrease, since a large `γ` makes the raw step
/// overshoot.
pub fn ascend_task(net: &Network, params: &ModelParams, task: &Task, cfg: &AugmentConfig) -> Result<Ascent> {
    cfg.validate()?;
    let reg = cfg.reg_kind.distance().filter(|_| cfg.gamma > 0.0);
    let x0 = task.images();
    let f0 = match reg {
        Some(_) => Some(net.encode_tensor(params, &x0)?),
        None => None,
    };
    let mut x = x0;
    let mut losses = Vec::with_capacity(cfg.t_max + 1);
    for step in 0..cfg.t_max {
        let (loss, objective, grad) = objective_and_grad(net, params, task, &x, f0.as_ref(), reg, cfg.gamma)?;
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!(
                "ascent step {step}: gradient entry {i} is {}",
                grad[i]
            )));
        }
        losses.push(loss);
        let mut beta = cfg.beta;
        let mut next = advance(&x, &grad, beta)?;
        if reg.is_some() {
            let mut accepted = false;
            for _ in 0..MAX_HALVINGS {
                let (_, candidate) = objective_value(net, params, task, &next, f0.as_ref(), reg, cfg.gamma)?;
                if candidate >= objective {
                    accepted = true;
                    break;
                }
                beta *= 0.5;
                next = advance(&x, &grad, beta)?;
            }
            if !accepted {
                next = x.clone();
            }
        }
        if !next.is_finite() {
            return Err(Error::NonFinite(format!("ascent step {step}: pixels left the finite range")));
        }
        x = next;
    }
    let (last_loss, _) = objective_value(net, params, task, &x, None, None, 0.0)?;
    losses.push(last_loss);
    Ok(Ascent {
        task: task.with_images(&x)?,
        losses,
    })
}

fn advance(x: &Tensor, grad: &[f64], beta: f64) -> Result<Tensor> {
    let data = x.data().iter().zip(grad).map(|(v, g)| v + beta * g).collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// `(L, J)` at pixels `x`.
fn objective_value(
    net: &Network,
    params: &ModelParams,
    task: &Task,
    x: &Tensor,
    f0: Option<&Tensor>,
    reg: Option<DistanceKind>,
    gamma: f64,
) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let xv = tape.constant(x);
    let features = net.encode(&mut tape, &bound, xv)?;
    let logits = net.logits_from_features(&mut tape, &bound, features, task)?;
    let loss = tape.softmax_cross_entropy(logits, &task.query_y)?;
    let l = tape.item(loss)?;
    match (reg, f0) {
        (Some(kind), Some(f0)) => {
            let f0v = tape.constant(f0);
            let d = feature_distance(&mut tape, features, f0v, kind)?;
            Ok((l, l - gamma * tape.item(d)?))
        }
        _ => Ok((l, l)),
    }
}

/// `(L, J, ∇_X J)` at pixels `x`.
fn objective_and_grad(
    net: &Network,
    params: &ModelParams,
    task: &Task,
    x: &Tensor,
    f0: Option<&Tensor>,
    reg: Option<DistanceKind>,
    gamma: f64,
) -> Result<(f64, f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let xv = tape.variable(x);
    let features = net.encode(&mut tape, &bound, xv)?;
    let logits = net.logits_from_features(&mut tape, &bound, features, task)?;
    let loss = tape.softmax_cross_entropy(logits, &task.query_y)?;
    let l = tape.item(loss)?;
    let objective = match (reg, f0) {
        (Some(kind), Some(f0)) => {
            let f0v = tape.constant(f0);
            let d = feature_distance(&mut tape, features, f0v, kind)?;
            let penalty = tape.scale(d, gamma);
            tape.sub(loss, penalty)?
        }
        _ => loss,
    };
    let j = tape.item(objective)?;
    tape.backward(objective)?;
    let grad = tape
        .grad(xv)
        .ok_or_else(|| Error::MissingGrad("task pixels".into()))?
        .to_vec();
    Ok((l, j, grad))
}
