//! Meta-learner heads: each turns support features into query logits.

use crate::error::{Error, Result};
use crate::params::BoundParams;
use crate::tensor::{Tape, Var};

/// Class means of support features, `[way, D]`.
pub fn prototypes(tape: &mut Tape, support_f: Var, support_y: &[usize], way: usize) -> Result<Var> {
    let n = tape.shape(support_f)[0];
    if n != support_y.len() {
        return Err(Error::shape(format!("{} support features for {} labels", n, support_y.len())));
    }
    let mut counts = vec![0usize; way];
    for &y in support_y {
        *counts
            .get_mut(y)
            .ok_or_else(|| Error::invalid(format!("support label {y} >= way {way}")))? += 1;
    }
    if let Some(c) = counts.iter().position(|&c| c == 0) {
        return Err(Error::invalid(format!("class {c} has no support samples")));
    }
    let mut avg = vec![0.0; way * n];
    for (i, &y) in support_y.iter().enumerate() {
        avg[y * n + i] = 1.0 / counts[y] as f64;
    }
    let avg = tape.constant_from(vec![way, n], avg)?;
    tape.matmul(avg, support_f)
}

fn check_features(tape: &Tape, support_f: Var, query_f: Var) -> Result<()> {
    let (s, q) = (tape.shape(support_f), tape.shape(query_f));
    if s.len() != 2 || q.len() != 2 || s[1] != q[1] {
        return Err(Error::shape(format!("support features {s:?} and query features {q:?} disagree")));
    }
    Ok(())
}

/// `logit[q,c] = -‖query_f[q] - prototype_c‖²`.
pub fn prototypical_logits(tape: &mut Tape, support_f: Var, support_y: &[usize], query_f: Var, way: usize) -> Result<Var> {
    check_features(tape, support_f, query_f)?;
    let protos = prototypes(tape, support_f, support_y, way)?;
    let d = tape.pairwise_sq_dist(query_f, protos)?;
    Ok(tape.scale(d, -1.0))
}

pub const RELATION_FC1_W: &str = "relation.fc1.weight";
pub const RELATION_FC1_B: &str = "relation.fc1.bias";
pub const RELATION_FC2_W: &str = "relation.fc2.weight";
pub const RELATION_FC2_B: &str = "relation.fc2.bias";

/// Learned comparator `r(concat(prototype_c, query_q))`, a two-layer MLP
/// with a ReLU hidden layer and a scalar output.
pub fn relation_logits(
    tape: &mut Tape,
    head: &BoundParams,
    support_f: Var,
    support_y: &[usize],
    query_f: Var,
    way: usize,
) -> Result<Var> {
    check_features(tape, support_f, query_f)?;
    let protos = prototypes(tape, support_f, support_y, way)?;
    let q = tape.shape(query_f)[0];
    let query_rows: Vec<usize> = (0..q).flat_map(|i| std::iter::repeat_n(i, way)).collect();
    let proto_rows: Vec<usize> = (0..q).flat_map(|_| 0..way).collect();
    let p = tape.select_rows(protos, &proto_rows)?;
    let x = tape.select_rows(query_f, &query_rows)?;
    let pairs = tape.concat(&[p, x], 1)?;
    let h = tape.dense(pairs, head.get(RELATION_FC1_W)?, head.get(RELATION_FC1_B)?)?;
    let h = tape.relu(h);
    let score = tape.dense(h, head.get(RELATION_FC2_W)?, head.get(RELATION_FC2_B)?)?;
    tape.reshape(score, vec![q, way])
}

/// Transductive label propagation over support and query features.
///
/// Affinities are `W_ij = exp(-‖f_i - f_j‖² / (2σ²D))` over the full graph
/// (self-loops included), optionally truncated to the `k` strongest
/// neighbours per node and symmetrised. With `S = D^{-1/2} W D^{-1/2}` the
/// propagated scores are `F = (I - αS)^{-1} Y` where `Y` one-hot encodes
/// support labels and is zero on queries; the query rows of `F` are the logits.
#[allow(clippy::too_many_arguments)]
pub fn label_propagation_logits(
    tape: &mut Tape,
    support_f: Var,
    support_y: &[usize],
    query_f: Var,
    way: usize,
    alpha: f64,
    sigma: f64,
    k_neighbors: Option<usize>,
) -> Result<Var> {
    check_features(tape, support_f, query_f)?;
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha must lie in [0, 1), got {alpha}")));
    }
    if !(sigma > 0.0) {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    if let Some(&y) = support_y.iter().find(|&&y| y >= way) {
        return Err(Error::invalid(format!("support label {y} >= way {way}")));
    }
    let ns = tape.shape(support_f)[0];
    let nq = tape.shape(query_f)[0];
    let dim = tape.shape(support_f)[1];
    let n = ns + nq;
    let all = tape.concat(&[support_f, query_f], 0)?;
    let d2 = tape.pairwise_sq_dist(all, all)?;
    let scaled = tape.scale(d2, -1.0 / (2.0 * sigma * sigma * dim as f64));
    let mut w = tape.exp(scaled);
    if tape.value(w).iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("label-propagation affinities".into()));
    }
    if let Some(k) = k_neighbors.filter(|&k| k < n) {
        let mask = knn_mask(tape.value(w), n, k.max(1));
        let mask = tape.constant_from(vec![n, n], mask)?;
        w = tape.mul(w, mask)?;
    }
    let degree = tape.sum_axis(w, 1)?;
    let inv_sqrt = tape.powf(degree, -0.5)?;
    let inv_sqrt_row = tape.reshape(inv_sqrt, vec![1, n])?;
    let s = tape.mul(w, inv_sqrt)?;
    let s = tape.mul(s, inv_sqrt_row)?;
    let mut eye = vec![0.0; n * n];
    (0..n).for_each(|i| eye[i * n + i] = 1.0);
    let eye = tape.constant_from(vec![n, n], eye)?;
    let scaled_s = tape.scale(s, alpha);
    let system = tape.sub(eye, scaled_s)?;
    let mut onehot = vec![0.0; n * way];
    for (i, &y) in support_y.iter().enumerate() {
        onehot[i * way + y] = 1.0;
    }
    let y = tape.constant_from(vec![n, way], onehot)?;
    let f = tape.solve(system, y)?;
    let query_rows: Vec<usize> = (ns..n).collect();
    tape.select_rows(f, &query_rows)
}

/// Keeps the `k` largest affinities in each row, then symmetrises.
fn knn_mask(w: &[f64], n: usize, k: usize) -> Vec<f64> {
    let mut mask = vec![0.0; n * n];
    for i in 0..n {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| w[i * n + b].total_cmp(&w[i * n + a]).then(a.cmp(&b)));
        for &j in &order[..k] {
            mask[i * n + j] = 1.0;
            mask[j * n + i] = 1.0;
        }
    }
    mask
}
