#![allow(dead_code)]

use ata_core::models::{EncoderConfig, HeadKind, Network};
use ata_core::tasks::{generate_domain, sample_episode, DatasetHandle, DomainSpec, ShiftParams, Task};
use ata_core::tensor::Tape;
use ata_core::{seed, ModelParams, Result, Tensor};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub const HEADS: [&str; 3] = ["prototypical", "relation", "label_propagation"];

pub fn head(name: &str) -> HeadKind {
    match name {
        "prototypical" => HeadKind::Prototypical,
        "relation" => HeadKind::relation(),
        "label_propagation" => HeadKind::LabelPropagation {
            alpha: 0.5,
            sigma: 1.0,
            k_neighbors: None,
        },
        other => panic!("unknown head {other}"),
    }
}

/// Two conv blocks of width 4 on `size`² RGB images.
pub fn small_net(head_name: &str, size: usize) -> Network {
    Network::new(
        EncoderConfig {
            in_channels: 3,
            image_size: size,
            channels: vec![4, 4],
            kernel_size: 3,
        },
        head(head_name),
    )
    .unwrap()
}

pub fn normal_tensor(shape: &[usize], seed_value: u64) -> Tensor {
    let mut rng = seed::rng(seed_value);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap()
}

pub fn uniform_tensor(shape: &[usize], lo: f64, hi: f64, seed_value: u64) -> Tensor {
    let mut rng = seed::rng(seed_value);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

pub fn domain(name: &str, classes: usize, first: usize, size: usize, per_class: usize, shift: ShiftParams) -> DatasetHandle {
    let mut spec = DomainSpec::new(name, classes, 11).with_shift(shift);
    spec.first_class = first;
    spec.render.image_size = size;
    generate_domain(&spec, per_class).unwrap()
}

/// A 5-way 1-shot task with two queries per class from a small rendered domain.
pub fn small_task(size: usize, seed_value: u64) -> Task {
    let data = domain("small", 8, 0, size, 4, ShiftParams::default());
    sample_episode(&data, 5, 1, 2, seed_value).unwrap()
}

/// Analytic gradient of the task loss for every parameter tensor.
pub fn param_grads(net: &Network, params: &ModelParams, task: &Task) -> Result<Vec<(String, Vec<f64>)>> {
    let mut p = params.clone();
    p.zero_grad();
    let mut tape = Tape::new();
    let bound = p.bind(&mut tape, true);
    let x = tape.constant(&task.images());
    let loss = net.task_loss(&mut tape, &bound, x, task)?;
    tape.backward(loss)?;
    p.absorb_grads(&tape, &bound)?;
    Ok(p.iter()
        .map(|(name, t)| (name.to_string(), t.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()])))
        .collect())
}

/// Outcome of a parameter gradient check of `meta_loss`.
#[derive(Debug, Default)]
pub struct ParamCheck {
    pub max_error: f64,
    pub coordinates: usize,
    /// Coordinates whose `±eps` stencil straddles a ReLU or max-pool kink.
    pub kinked: usize,
}

/// Central differences at `eps` for every parameter entry. ReLU and max-pool
/// make the loss piecewise smooth. On a smooth piece central differences at
/// `eps` and `eps / 10` agree to `O(eps²)`; where they do not, the wider
/// stencil straddles a kink and the entry is checked with the narrow one.
pub fn meta_loss_grad_error(net: &Network, params: &ModelParams, task: &Task, eps: f64) -> Result<ParamCheck> {
    let grads = param_grads(net, params, task)?;
    let mut out = ParamCheck::default();
    for (name, grad) in grads {
        let n = params.get(&name)?.numel();
        for i in 0..n {
            let at = |h: f64| {
                let mut p = params.clone();
                p.get_mut(&name)?.data_mut()[i] += h;
                net.meta_loss(&p, task)
            };
            let mut numeric = (at(eps)? - at(-eps)?) / (2.0 * eps);
            let fine = eps / 10.0;
            let narrow = (at(fine)? - at(-fine)?) / (2.0 * fine);
            if (numeric - narrow).abs() > 1e-6 * narrow.abs().max(1.0) {
                out.kinked += 1;
                numeric = narrow;
            }
            out.max_error = out.max_error.max((grad[i] - numeric).abs() / grad[i].abs().max(1.0));
            out.coordinates += 1;
        }
    }
    Ok(out)
}

/// Independent label-propagation oracle: Gaussian affinities over all
/// samples with self-loops, symmetric normalisation, then `iterations` steps
/// of `F <- αSF + Y` from `F = Y`, the partial sums of `Σ (αS)^t Y`.
pub fn iterative_label_propagation(features: &[Vec<f64>], support_y: &[usize], way: usize, alpha: f64, sigma: f64, iterations: usize) -> Vec<Vec<f64>> {
    let n = features.len();
    let dim = features[0].len() as f64;
    let w: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    let d2: f64 = features[i].iter().zip(&features[j]).map(|(a, b)| (a - b).powi(2)).sum();
                    (-d2 / (2.0 * sigma * sigma * dim)).exp()
                })
                .collect()
        })
        .collect();
    let deg: Vec<f64> = w.iter().map(|r| r.iter().sum()).collect();
    let s: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| w[i][j] / (deg[i] * deg[j]).sqrt()).collect()).collect();
    let mut y = vec![vec![0.0; way]; n];
    for (i, &c) in support_y.iter().enumerate() {
        y[i][c] = 1.0;
    }
    let mut f = y.clone();
    for _ in 0..iterations {
        f = (0..n)
            .map(|i| {
                (0..way)
                    .map(|c| alpha * (0..n).map(|j| s[i][j] * f[j][c]).sum::<f64>() + y[i][c])
                    .collect()
            })
            .collect();
    }
    f
}

type OpCheck = fn(u64) -> Result<f64>;

fn check(x: &Tensor, f: impl Fn(&mut Tape, ata_core::Var) -> Result<ata_core::Var>) -> Result<f64> {
    ata_core::tensor::grad_check(f, x, 1e-4)
}

/// Weighted sum so that every output entry gets a distinct upstream gradient.
fn weighted(tape: &mut Tape, v: ata_core::Var) -> Result<ata_core::Var> {
    let shape = tape.shape(v).to_vec();
    let n: usize = shape.iter().product();
    let w = tape.constant_from(shape, (0..n).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect())?;
    let p = tape.mul(v, w)?;
    Ok(tape.sum(p))
}

/// Gradient-check error per differentiable op at one seed. Binary ops are
/// checked against each operand in turn.
pub fn op_checks() -> Vec<(&'static str, OpCheck)> {
    vec![
        ("add", |s| {
            let (a, b) = (normal_tensor(&[3, 4], s), normal_tensor(&[4], s + 1));
            let e1 = check(&a, |t, x| { let c = t.constant(&b); let y = t.add(x, c)?; weighted(t, y) })?;
            let e2 = check(&b, |t, x| { let c = t.constant(&a); let y = t.add(c, x)?; weighted(t, y) })?;
            Ok(e1.max(e2))
        }),
        ("sub", |s| {
            let (a, b) = (normal_tensor(&[2, 3, 2], s), normal_tensor(&[3, 1], s + 1));
            let e1 = check(&a, |t, x| { let c = t.constant(&b); let y = t.sub(x, c)?; weighted(t, y) })?;
            let e2 = check(&b, |t, x| { let c = t.constant(&a); let y = t.sub(c, x)?; weighted(t, y) })?;
            Ok(e1.max(e2))
        }),
        ("mul", |s| {
            let (a, b) = (normal_tensor(&[2, 3, 4], s), normal_tensor(&[3, 1], s + 1));
            let e1 = check(&a, |t, x| { let c = t.constant(&b); let y = t.mul(x, c)?; weighted(t, y) })?;
            let e2 = check(&b, |t, x| { let c = t.constant(&a); let y = t.mul(c, x)?; weighted(t, y) })?;
            Ok(e1.max(e2))
        }),
        ("scale", |s| check(&normal_tensor(&[5], s), |t, x| { let y = t.scale(x, -2.5); weighted(t, y) })),
        ("relu", |s| check(&normal_tensor(&[4, 4], s), |t, x| { let y = t.relu(x); weighted(t, y) })),
        ("square", |s| check(&normal_tensor(&[6], s), |t, x| { let y = t.square(x); weighted(t, y) })),
        ("sqrt", |s| check(&uniform_tensor(&[6], 0.5, 3.0, s), |t, x| { let y = t.sqrt(x)?; weighted(t, y) })),
        ("exp", |s| check(&normal_tensor(&[6], s), |t, x| { let y = t.exp(x); weighted(t, y) })),
        ("log", |s| check(&uniform_tensor(&[6], 0.5, 3.0, s), |t, x| { let y = t.log(x)?; weighted(t, y) })),
        ("powf", |s| check(&uniform_tensor(&[6], 0.5, 3.0, s), |t, x| { let y = t.powf(x, -0.5)?; weighted(t, y) })),
        ("sum", |s| check(&normal_tensor(&[3, 3], s), |t, x| { let y = t.sum(x); let y = t.square(y); Ok(t.sum(y)) })),
        ("mean", |s| check(&normal_tensor(&[3, 3], s), |t, x| { let y = t.mean(x); let y = t.square(y); Ok(t.sum(y)) })),
        ("sum_axis", |s| {
            let x = normal_tensor(&[3, 4], s);
            let e0 = check(&x, |t, x| { let y = t.sum_axis(x, 0)?; weighted(t, y) })?;
            let e1 = check(&x, |t, x| { let y = t.sum_axis(x, 1)?; weighted(t, y) })?;
            Ok(e0.max(e1))
        }),
        ("reshape", |s| check(&normal_tensor(&[2, 6], s), |t, x| { let y = t.reshape(x, vec![3, 4])?; weighted(t, y) })),
        ("transpose", |s| check(&normal_tensor(&[2, 5], s), |t, x| { let y = t.transpose(x)?; weighted(t, y) })),
        ("concat", |s| {
            let (a, b) = (normal_tensor(&[2, 3], s), normal_tensor(&[2, 2], s + 1));
            let e1 = check(&a, |t, x| { let c = t.constant(&b); let y = t.concat(&[x, c], 1)?; weighted(t, y) })?;
            let c0 = normal_tensor(&[1, 3], s + 2);
            let e2 = check(&a, |t, x| { let c = t.constant(&c0); let y = t.concat(&[c, x], 0)?; weighted(t, y) })?;
            Ok(e1.max(e2))
        }),
        ("select_rows", |s| check(&normal_tensor(&[4, 3], s), |t, x| { let y = t.select_rows(x, &[3, 0, 3, 1])?; weighted(t, y) })),
        ("matmul", |s| {
            let (a, b) = (normal_tensor(&[3, 4], s), normal_tensor(&[4, 2], s + 1));
            let e1 = check(&a, |t, x| { let c = t.constant(&b); let y = t.matmul(x, c)?; weighted(t, y) })?;
            let e2 = check(&b, |t, x| { let c = t.constant(&a); let y = t.matmul(c, x)?; weighted(t, y) })?;
            Ok(e1.max(e2))
        }),
        ("dense", |s| {
            let (x0, w0, b0) = (normal_tensor(&[3, 4], s), normal_tensor(&[4, 2], s + 1), normal_tensor(&[2], s + 2));
            let e1 = check(&x0, |t, x| { let (w, b) = (t.constant(&w0), t.constant(&b0)); let y = t.dense(x, w, b)?; weighted(t, y) })?;
            let e2 = check(&w0, |t, w| { let (x, b) = (t.constant(&x0), t.constant(&b0)); let y = t.dense(x, w, b)?; weighted(t, y) })?;
            let e3 = check(&b0, |t, b| { let (x, w) = (t.constant(&x0), t.constant(&w0)); let y = t.dense(x, w, b)?; weighted(t, y) })?;
            Ok(e1.max(e2).max(e3))
        }),
        ("solve", |s| {
            // diagonally dominant, so well conditioned
            let mut a0 = normal_tensor(&[4, 4], s);
            for i in 0..4 {
                a0.data_mut()[i * 5] += 6.0;
            }
            let b0 = normal_tensor(&[4, 2], s + 1);
            let e1 = check(&a0, |t, a| { let b = t.constant(&b0); let y = t.solve(a, b)?; weighted(t, y) })?;
            let e2 = check(&b0, |t, b| { let a = t.constant(&a0); let y = t.solve(a, b)?; weighted(t, y) })?;
            Ok(e1.max(e2))
        }),
        ("pairwise_sq_dist", |s| {
            let (a, b) = (normal_tensor(&[3, 4], s), normal_tensor(&[2, 4], s + 1));
            let e1 = check(&a, |t, x| { let c = t.constant(&b); let y = t.pairwise_sq_dist(x, c)?; weighted(t, y) })?;
            let e2 = check(&b, |t, x| { let c = t.constant(&a); let y = t.pairwise_sq_dist(c, x)?; weighted(t, y) })?;
            let e3 = check(&a, |t, x| { let y = t.pairwise_sq_dist(x, x)?; weighted(t, y) })?;
            Ok(e1.max(e2).max(e3))
        }),
        ("conv2d", |s| {
            let (x0, k0) = (normal_tensor(&[2, 2, 5, 5], s), normal_tensor(&[3, 2, 3, 3], s + 1));
            let mut worst: f64 = 0.0;
            for (stride, padding) in [(1, 1), (2, 0), (2, 1)] {
                worst = worst.max(check(&x0, |t, x| { let k = t.constant(&k0); let y = t.conv2d(x, k, stride, padding)?; weighted(t, y) })?);
                worst = worst.max(check(&k0, |t, k| { let x = t.constant(&x0); let y = t.conv2d(x, k, stride, padding)?; weighted(t, y) })?);
            }
            Ok(worst)
        }),
        // continuous inputs make ties in a pooling window vanishingly unlikely
        ("max_pool2d", |s| check(&normal_tensor(&[2, 2, 4, 4], s), |t, x| { let y = t.max_pool2d(x, 2)?; weighted(t, y) })),
        ("softmax_cross_entropy", |s| {
            check(&normal_tensor(&[4, 3], s), |t, x| t.softmax_cross_entropy(x, &[2, 0, 1, 2]))
        }),
    ]
}
