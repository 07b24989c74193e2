//! Convolutional encoder, meta-learner heads and the episodic task loss.

pub mod heads;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{BoundParams, ModelParams};
use crate::seed;
use crate::tasks::Task;
use crate::tensor::{Tape, Tensor, Var};

pub use heads::{label_propagation_logits, prototypes, prototypical_logits, relation_logits};

/// Stack of `conv(k×k, same padding) + bias → ReLU → 2×2 max-pool` blocks,
/// flattened into a feature vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub image_size: usize,
    pub channels: Vec<usize>,
    pub kernel_size: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            in_channels: 3,
            image_size: 16,
            channels: vec![32, 64, 64],
            kernel_size: 3,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) || self.in_channels == 0 {
            return Err(Error::config("encoder.channels", "need at least one block of positive width"));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::config("encoder.kernel_size", "must be odd"));
        }
        if self.image_size >> self.channels.len() == 0 {
            return Err(Error::config(
                "encoder.image_size",
                format!("{} pixels cannot be pooled {} times", self.image_size, self.channels.len()),
            ));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        let side = self.image_size >> self.channels.len();
        self.channels.last().copied().unwrap_or(0) * side * side
    }

    pub fn weight_name(block: usize) -> String {
        format!("encoder.conv{block}.weight")
    }

    pub fn bias_name(block: usize) -> String {
        format!("encoder.conv{block}.bias")
    }
}

/// Which inductive bias turns the support set into a classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum HeadKind {
    Prototypical,
    Relation {
        #[serde(default = "default_hidden")]
        hidden: usize,
    },
    LabelPropagation {
        #[serde(default = "default_alpha")]
        alpha: f64,
        #[serde(default = "default_sigma")]
        sigma: f64,
        #[serde(default)]
        k_neighbors: Option<usize>,
    },
}

fn default_hidden() -> usize {
    8
}
fn default_alpha() -> f64 {
    0.99
}
fn default_sigma() -> f64 {
    1.0
}

impl HeadKind {
    pub fn relation() -> Self {
        HeadKind::Relation { hidden: default_hidden() }
    }

    pub fn label_propagation() -> Self {
        HeadKind::LabelPropagation {
            alpha: default_alpha(),
            sigma: default_sigma(),
            k_neighbors: None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            HeadKind::Prototypical => "prototypical",
            HeadKind::Relation { .. } => "relation",
            HeadKind::LabelPropagation { .. } => "label_propagation",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            HeadKind::Prototypical => Ok(()),
            HeadKind::Relation { hidden } if hidden == 0 => Err(Error::config("head.hidden", "must be positive")),
            HeadKind::Relation { .. } => Ok(()),
            HeadKind::LabelPropagation { alpha, sigma, k_neighbors } => {
                if !(alpha > 0.0 && alpha < 1.0) {
                    return Err(Error::config("head.alpha", "must lie in (0, 1)"));
                }
                if !(sigma > 0.0) {
                    return Err(Error::config("head.sigma", "must be positive"));
                }
                if k_neighbors == Some(0) {
                    return Err(Error::config("head.k_neighbors", "must be positive"));
                }
                Ok(())
            }
        }
    }
}

/// Encoder plus head: the full meta-learner.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Network {
    #[serde(default)]
    pub encoder: EncoderConfig,
    pub head: HeadKind,
}

impl Network {
    pub fn new(encoder: EncoderConfig, head: HeadKind) -> Result<Self> {
        let net = Network { encoder, head };
        net.validate()?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.head.validate()
    }

    pub fn feature_dim(&self) -> usize {
        self.encoder.feature_dim()
    }

    /// Kaiming-normal convolution weights, zero biases; relation comparator
    /// layers use Xavier-normal weights.
    pub fn init_params(&self, seed_value: u64) -> ModelParams {
        let mut params = init_encoder(&self.encoder, seed_value);
        if let HeadKind::Relation { hidden } = self.head {
            let mut rng = seed::rng(seed::derive(seed_value, seed::INIT, 1000));
            let d2 = 2 * self.feature_dim();
            params.insert(heads::RELATION_FC1_W, xavier(&mut rng, vec![d2, hidden], d2, hidden));
            params.insert(heads::RELATION_FC1_B, Tensor::zeros(&[hidden]).expect("positive"));
            params.insert(heads::RELATION_FC2_W, xavier(&mut rng, vec![hidden, 1], hidden, 1));
            params.insert(heads::RELATION_FC2_B, Tensor::zeros(&[1]).expect("positive"));
        }
        params
    }

    /// Fresh parameters whose encoder tensors are taken from `encoder`.
    pub fn init_from_encoder(&self, encoder: &ModelParams, seed_value: u64) -> Result<ModelParams> {
        let mut params = self.init_params(seed_value);
        for name in params.subset("encoder.").names().map(str::to_owned).collect::<Vec<_>>() {
            let src = encoder.get(&name)?;
            let dst = params.get(&name)?;
            if src.shape() != dst.shape() {
                return Err(Error::shape(format!("`{name}` has shape {:?}, expected {:?}", src.shape(), dst.shape())));
            }
            params.insert(name, src.clone());
        }
        Ok(params)
    }

    /// Checks that `params` holds every tensor this network reads, with the right shape.
    pub fn check_params(&self, params: &ModelParams) -> Result<()> {
        for (name, t) in self.init_params(0).iter() {
            let have = params.get(name)?;
            if have.shape() != t.shape() {
                return Err(Error::shape(format!("`{name}` has shape {:?}, expected {:?}", have.shape(), t.shape())));
            }
        }
        Ok(())
    }

    /// Images `[N,C,H,W]` to features `[N,D]`.
    pub fn encode(&self, tape: &mut Tape, bound: &BoundParams, images: Var) -> Result<Var> {
        let s = tape.shape(images).to_vec();
        let e = &self.encoder;
        if s.len() != 4 || s[1] != e.in_channels || s[2] != e.image_size || s[3] != e.image_size {
            return Err(Error::shape(format!(
                "encoder expects [N, {}, {}, {}] images, got {s:?}",
                e.in_channels, e.image_size, e.image_size
            )));
        }
        let pad = (e.kernel_size - 1) / 2;
        let mut x = images;
        for block in 0..e.channels.len() {
            x = tape.conv2d(x, bound.get(&EncoderConfig::weight_name(block))?, 1, pad)?;
            x = tape.add(x, bound.get(&EncoderConfig::bias_name(block))?)?;
            x = tape.relu(x);
            x = tape.max_pool2d(x, 2)?;
        }
        tape.reshape(x, vec![s[0], self.feature_dim()])
    }

    /// Features of `images` with parameters held constant.
    pub fn encode_tensor(&self, params: &ModelParams, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let x = tape.constant(images);
        let f = self.encode(&mut tape, &bound, x)?;
        Ok(tape.tensor(f))
    }

    /// Query logits `[Q, way]` from support and query features.
    pub fn logits(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        support_f: Var,
        support_y: &[usize],
        query_f: Var,
        way: usize,
    ) -> Result<Var> {
        match self.head {
            HeadKind::Prototypical => prototypical_logits(tape, support_f, support_y, query_f, way),
            HeadKind::Relation { .. } => relation_logits(tape, bound, support_f, support_y, query_f, way),
            HeadKind::LabelPropagation { alpha, sigma, k_neighbors } => {
                label_propagation_logits(tape, support_f, support_y, query_f, way, alpha, sigma, k_neighbors)
            }
        }
    }

    /// Query logits for a task whose samples (support first) are `images`.
    pub fn task_logits(&self, tape: &mut Tape, bound: &BoundParams, images: Var, task: &Task) -> Result<Var> {
        let features = self.encode(tape, bound, images)?;
        self.logits_from_features(tape, bound, features, task)
    }

    /// Query logits from the `[N, D]` features of all task samples (support first).
    pub fn logits_from_features(&self, tape: &mut Tape, bound: &BoundParams, features: Var, task: &Task) -> Result<Var> {
        let ns = task.support_y.len();
        let n = task.sample_count();
        if tape.shape(features)[0] != n {
            return Err(Error::shape(format!("{} images for a task of {n} samples", tape.shape(features)[0])));
        }
        let support_f = tape.select_rows(features, &(0..ns).collect::<Vec<_>>())?;
        let query_f = tape.select_rows(features, &(ns..n).collect::<Vec<_>>())?;
        self.logits(tape, bound, support_f, &task.support_y, query_f, task.way)
    }

    /// Episodic task loss: cross-entropy of the head's query logits, with the
    /// classifier built from the support samples. Differentiable in the
    /// parameters and in every pixel of `images`.
    pub fn task_loss(&self, tape: &mut Tape, bound: &BoundParams, images: Var, task: &Task) -> Result<Var> {
        let logits = self.task_logits(tape, bound, images, task)?;
        tape.softmax_cross_entropy(logits, &task.query_y)
    }

    /// Value of the task loss.
    pub fn meta_loss(&self, params: &ModelParams, task: &Task) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let x = tape.constant(&task.images());
        let loss = self.task_loss(&mut tape, &bound, x, task)?;
        tape.item(loss)
    }

    /// Query logits as a tensor.
    pub fn query_logits(&self, params: &ModelParams, task: &Task) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let x = tape.constant(&task.images());
        let logits = self.task_logits(&mut tape, &bound, x, task)?;
        Ok(tape.tensor(logits))
    }

    /// Predicted query labels (ties resolved to the lowest class index).
    pub fn predict(&self, params: &ModelParams, task: &Task) -> Result<Vec<usize>> {
        self.query_logits(params, task)?.argmax_rows()
    }
}

fn init_encoder(cfg: &EncoderConfig, seed_value: u64) -> ModelParams {
    let mut params = ModelParams::new();
    let mut in_c = cfg.in_channels;
    let k = cfg.kernel_size;
    for (block, &out_c) in cfg.channels.iter().enumerate() {
        let mut rng = seed::rng(seed::derive(seed_value, seed::INIT, block as u64));
        let fan_in = in_c * k * k;
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let w = (0..out_c * fan_in).map(|_| normal.sample(&mut rng)).collect();
        params.insert(EncoderConfig::weight_name(block), Tensor::new(vec![out_c, in_c, k, k], w).expect("shape"));
        params.insert(EncoderConfig::bias_name(block), Tensor::zeros(&[out_c, 1, 1]).expect("shape"));
        in_c = out_c;
    }
    params
}

fn xavier(rng: &mut impl rand::Rng, shape: Vec<usize>, fan_in: usize, fan_out: usize) -> Tensor {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| normal.sample(rng)).collect()).expect("shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feature_dim_of_default_encoder() {
        let e = EncoderConfig::default();
        assert_eq!(e.feature_dim(), 64 * 2 * 2);
        assert!(EncoderConfig { channels: vec![4; 5], ..e }.validate().is_err());
    }

    #[test]
    fn init_is_deterministic() {
        let net = Network::new(EncoderConfig::default(), HeadKind::relation()).unwrap();
        let a = net.init_params(3);
        assert!(a.bit_identical(&net.init_params(3)));
        assert!(!a.bit_identical(&net.init_params(4)));
        assert!(a.contains(heads::RELATION_FC1_W));
        assert_eq!(a.get(heads::RELATION_FC1_W).unwrap().shape(), &[512, 8]);
    }

    #[test]
    fn head_json_forms() {
        let h: HeadKind = serde_json::from_str(r#"{"kind":"label_propagation"}"#).unwrap();
        assert_eq!(h, HeadKind::label_propagation());
        let h: HeadKind = serde_json::from_str(r#"{"kind":"relation","hidden":16}"#).unwrap();
        assert_eq!(h, HeadKind::Relation { hidden: 16 });
        assert!(serde_json::from_str::<HeadKind>(r#"{"kind":"gnn"}"#).is_err());
        assert!(HeadKind::LabelPropagation { alpha: 1.0, sigma: 1.0, k_neighbors: None }.validate().is_err());
    }
}
