use super::conv::{self, gemm, ConvGeometry};
use super::linalg::LuFactors;
use super::{broadcast_shape, softmax_in_place, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Square(usize),
    Sqrt(usize),
    Exp(usize),
    Log(usize),
    Powf(usize, f64),
    Sum(usize),
    Mean(usize),
    SumAxis { input: usize, axis: usize },
    Reshape(usize),
    Transpose(usize),
    MatMul(usize, usize),
    Dense { x: usize, w: usize, b: usize },
    Conv2d { input: usize, kernel: usize, geom: ConvGeometry, cols: Vec<f64> },
    MaxPool2d { input: usize, argmax: Vec<usize> },
    Concat { parts: Vec<usize>, axis: usize },
    SelectRows { input: usize, indices: Vec<usize> },
    PairwiseSqDist(usize, usize),
    SoftmaxCrossEntropy { logits: usize, labels: Vec<usize>, probs: Vec<f64> },
    Solve { a: usize, b: usize, lu: LuFactors },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of executed operations.
///
/// A tape is meant to live for one forward pass. Leaf gradients persist
/// across repeated [`Tape::backward`] calls and accumulate until
/// [`Tape::zero_grad`] or [`Tape::reset`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drops every recorded node and gradient.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Records a leaf. It participates in differentiation iff the tensor
    /// has `requires_grad` set.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, t.requires_grad)
    }

    /// Records a leaf that is differentiated regardless of the tensor's flag.
    pub fn variable(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, true)
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, false)
    }

    pub fn constant_from(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t.shape, t.data, Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn item(&self, v: Var) -> Result<f64> {
        let n = self.node(v);
        if n.value.len() != 1 {
            return Err(Error::shape(format!("item() on shape {:?}", n.shape)));
        }
        Ok(n.value[0])
    }

    /// Gradient accumulated on a leaf by previous backward passes.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Snapshot of a node as a tensor, with the leaf gradient attached when present.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor {
            shape: n.shape.clone(),
            data: n.value.clone(),
            requires_grad: n.needs_grad,
            grad: self.grads[v.0].clone(),
        }
    }

    // ---------------------------------------------------------------- elementwise

    fn binary(&mut self, a: Var, b: Var, kind: fn(usize, usize) -> Op, f: fn(f64, f64) -> f64) -> Result<Var> {
        let sa = self.node(a).shape.clone();
        let sb = self.node(b).shape.clone();
        let out_shape = broadcast_shape(&sa, &sb)?;
        let mut out = vec![0.0; out_shape.iter().product()];
        {
            let va = &self.node(a).value;
            let vb = &self.node(b).value;
            for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| out[o] = f(va[ia], vb[ib]));
        }
        let ng = self.needs(&[a, b]);
        Ok(self.push(out_shape, out, kind(a.0, b.0), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul, |x, y| x * y)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let n = self.node(a);
        let shape = n.shape.clone();
        let out = n.value.iter().map(|&x| f(x)).collect();
        let ng = n.needs_grad;
        self.push(shape, out, op, ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a.0, c), |x| c * x)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a.0), |x| x.max(0.0))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a.0), |x| x * x)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.node(a).value.iter().any(|&x| !(x >= 0.0)) {
            return Err(Error::invalid("sqrt of a negative value"));
        }
        Ok(self.unary(a, Op::Sqrt(a.0), f64::sqrt))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a.0), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.node(a).value.iter().any(|&x| !(x > 0.0)) {
            return Err(Error::invalid("log of a non-positive value"));
        }
        Ok(self.unary(a, Op::Log(a.0), f64::ln))
    }

    /// Elementwise `x^p`. Non-integer powers need strictly positive inputs.
    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var> {
        if p.fract() != 0.0 && self.node(a).value.iter().any(|&x| !(x > 0.0)) {
            return Err(Error::invalid(format!("x^{p} of a non-positive value")));
        }
        Ok(self.unary(a, Op::Powf(a.0, p), |x| x.powf(p)))
    }

    // ---------------------------------------------------------------- reductions

    pub fn sum(&mut self, a: Var) -> Var {
        let n = self.node(a);
        let total = n.value.iter().sum();
        let ng = n.needs_grad;
        self.push(vec![1], vec![total], Op::Sum(a.0), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.node(a);
        let m = n.value.iter().sum::<f64>() / n.value.len() as f64;
        let ng = n.needs_grad;
        self.push(vec![1], vec![m], Op::Mean(a.0), ng)
    }

    /// Sums over one axis, keeping it with size 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let n = self.node(a);
        if axis >= n.shape.len() {
            return Err(Error::shape(format!("axis {axis} out of range for {:?}", n.shape)));
        }
        let (outer, len, inner) = split_axis(&n.shape, axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &n.value[(o * len + l) * inner..][..inner];
                for (d, s) in out[o * inner..][..inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = n.shape.clone();
        shape[axis] = 1;
        let ng = n.needs_grad;
        Ok(self.push(shape, out, Op::SumAxis { input: a.0, axis }, ng))
    }

    // ---------------------------------------------------------------- structure

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let n = self.node(a);
        if shape.iter().product::<usize>() != n.value.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("cannot reshape {:?} into {shape:?}", n.shape)));
        }
        let value = n.value.clone();
        let ng = n.needs_grad;
        Ok(self.push(shape, value, Op::Reshape(a.0), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let n = self.node(a);
        let (r, c) = dims2(&n.shape, "transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = n.value[i * c + j];
            }
        }
        let ng = n.needs_grad;
        Ok(self.push(vec![c, r], out, Op::Transpose(a.0), ng))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let base = self.node(*first).shape.clone();
        if axis >= base.len() {
            return Err(Error::shape(format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = &self.node(*p).shape;
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::shape(format!("cannot concat {s:?} with {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let n = self.node(*p);
                let chunk = n.shape[axis] * inner;
                out.extend_from_slice(&n.value[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ng = self.needs(parts);
        Ok(self.push(shape, out, Op::Concat { parts: parts.iter().map(|p| p.0).collect(), axis }, ng))
    }

    /// Gathers rows along the leading axis (repeats allowed).
    pub fn select_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let n = self.node(a);
        let rows = n.shape[0];
        let stride = n.value.len() / rows;
        if indices.is_empty() {
            return Err(Error::shape("select_rows with no indices"));
        }
        let mut out = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            if i >= rows {
                return Err(Error::shape(format!("row {i} out of range for {rows} rows")));
            }
            out.extend_from_slice(&n.value[i * stride..(i + 1) * stride]);
        }
        let mut shape = n.shape.clone();
        shape[0] = indices.len();
        let ng = n.needs_grad;
        Ok(self.push(shape, out, Op::SelectRows { input: a.0, indices: indices.to_vec() }, ng))
    }

    // ---------------------------------------------------------------- linear algebra

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.shape(a), "matmul lhs")?;
        let (k2, n) = dims2(self.shape(b), "matmul rhs")?;
        if k != k2 {
            return Err(Error::shape(format!("matmul inner dimensions {k} and {k2} differ")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), (k as isize, 1), self.value(b), (n as isize, 1), &mut out, 0.0);
        let ng = self.needs(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul(a.0, b.0), ng))
    }

    /// `x·w + b` for `x: [N,D]`, `w: [D,M]`, `b: [M]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (rows, d) = dims2(self.shape(x), "dense input")?;
        let (d2, m) = dims2(self.shape(w), "dense weight")?;
        if d != d2 {
            return Err(Error::shape(format!("dense input has {d} features, weight expects {d2}")));
        }
        if self.shape(b) != [m] {
            return Err(Error::shape(format!("dense bias {:?} does not match {m} outputs", self.shape(b))));
        }
        let mut out = Vec::with_capacity(rows * m);
        for _ in 0..rows {
            out.extend_from_slice(self.value(b));
        }
        gemm(rows, d, m, self.value(x), (d as isize, 1), self.value(w), (m as isize, 1), &mut out, 1.0);
        let ng = self.needs(&[x, w, b]);
        Ok(self.push(vec![rows, m], out, Op::Dense { x: x.0, w: w.0, b: b.0 }, ng))
    }

    /// Solves `A X = B` for square `A: [n,n]` and `B: [n,m]`.
    pub fn solve(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, n2) = dims2(self.shape(a), "solve matrix")?;
        let (bn, m) = dims2(self.shape(b), "solve rhs")?;
        if n != n2 || bn != n {
            return Err(Error::shape(format!(
                "solve needs square [n,n] and [n,m], got {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let lu = LuFactors::factor(self.value(a), n)?;
        let out = lu.solve(self.value(b), m);
        let ng = self.needs(&[a, b]);
        Ok(self.push(vec![n, m], out, Op::Solve { a: a.0, b: b.0, lu }, ng))
    }

    /// Squared Euclidean distances between rows: `[A,D] x [B,D] -> [A,B]`.
    pub fn pairwise_sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, d) = dims2(self.shape(a), "pairwise lhs")?;
        let (rb, d2) = dims2(self.shape(b), "pairwise rhs")?;
        if d != d2 {
            return Err(Error::shape(format!("pairwise feature sizes {d} and {d2} differ")));
        }
        let va = self.value(a);
        let vb = self.value(b);
        let mut out = vec![0.0; ra * rb];
        for i in 0..ra {
            let x = &va[i * d..(i + 1) * d];
            for j in 0..rb {
                let y = &vb[j * d..(j + 1) * d];
                out[i * rb + j] = x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum();
            }
        }
        let ng = self.needs(&[a, b]);
        Ok(self.push(vec![ra, rb], out, Op::PairwiseSqDist(a.0, b.0), ng))
    }

    // ---------------------------------------------------------------- convolution

    /// 2-D convolution of `[N,C,H,W]` input with an `[O,C,k,k]` kernel, no bias.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let si = self.shape(input);
        let sk = self.shape(kernel);
        if si.len() != 4 || sk.len() != 4 {
            return Err(Error::shape(format!("conv2d needs 4-D input and kernel, got {si:?} and {sk:?}")));
        }
        if si[1] != sk[1] {
            return Err(Error::shape(format!(
                "conv2d input has {} channels but kernel expects {}",
                si[1], sk[1]
            )));
        }
        if sk[2] != sk[3] {
            return Err(Error::shape(format!("conv2d kernel must be square, got {sk:?}")));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be positive"));
        }
        let k = sk[2];
        if si[2] + 2 * padding < k || si[3] + 2 * padding < k {
            return Err(Error::shape(format!("kernel {k} larger than padded input {si:?}")));
        }
        let geom = ConvGeometry {
            n: si[0],
            c: si[1],
            h: si[2],
            w: si[3],
            o: sk[0],
            k,
            stride,
            padding,
            oh: (si[2] + 2 * padding - k) / stride + 1,
            ow: (si[3] + 2 * padding - k) / stride + 1,
        };
        let (out, cols) = conv::conv_forward(self.value(input), self.value(kernel), &geom);
        let ng = self.needs(&[input, kernel]);
        // The patch matrix is only needed for the kernel gradient.
        let cols = if self.node(kernel).needs_grad { cols } else { Vec::new() };
        Ok(self.push(
            vec![geom.n, geom.o, geom.oh, geom.ow],
            out,
            Op::Conv2d { input: input.0, kernel: kernel.0, geom, cols },
            ng,
        ))
    }

    /// Non-overlapping max pooling with window and stride `size`; trailing
    /// rows/columns that do not fill a window are dropped.
    pub fn max_pool2d(&mut self, input: Var, size: usize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 4 || size == 0 || s[2] < size || s[3] < size {
            return Err(Error::shape(format!("cannot max-pool {s:?} with window {size}")));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / size, w / size);
        let v = self.value(input);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * size * w + ox * size;
                    for dy in 0..size {
                        for dx in 0..size {
                            let idx = base + (oy * size + dy) * w + ox * size + dx;
                            if v[idx] > v[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(v[best]);
                    argmax.push(best);
                }
            }
        }
        let ng = self.needs(&[input]);
        Ok(self.push(vec![n, c, oh, ow], out, Op::MaxPool2d { input: input.0, argmax }, ng))
    }

    // ---------------------------------------------------------------- losses

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, c) = dims2(self.shape(logits), "cross-entropy logits")?;
        if labels.len() != n {
            return Err(Error::shape(format!("{} labels for {n} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::invalid(format!("label {bad} out of range for {c} classes")));
        }
        let mut probs = self.value(logits).to_vec();
        let mut loss = 0.0;
        for (row, &label) in probs.chunks_mut(c).zip(labels) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[label];
            softmax_in_place(row);
        }
        loss /= n as f64;
        let ng = self.needs(&[logits]);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::SoftmaxCrossEntropy { logits: logits.0, labels: labels.to_vec(), probs },
            ng,
        ))
    }

    // ---------------------------------------------------------------- backward

    /// Propagates adjoints from a scalar `loss` to every leaf that requires a
    /// gradient. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.node(loss).value.len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.node(loss).shape
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                match &mut self.grads[i] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            for (input, contrib) in self.local_grads(i, &g) {
                if !self.nodes[input].needs_grad {
                    continue;
                }
                match &mut adj[input] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        for (node, grad) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if matches!(node.op, Op::Leaf) && node.needs_grad && grad.is_none() {
                *grad = Some(vec![0.0; node.value.len()]);
            }
        }
        Ok(())
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    fn local_grads(&self, i: usize, g: &[f64]) -> Vec<(usize, Vec<f64>)> {
        let node = &self.nodes[i];
        let val = |j: usize| &self.nodes[j].value;
        let shp = |j: usize| &self.nodes[j].shape;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let mut ga = vec![0.0; val(*a).len()];
                let mut gb = vec![0.0; val(*b).len()];
                for_each_broadcast(&node.shape, shp(*a), shp(*b), |o, ia, ib| {
                    ga[ia] += g[o];
                    gb[ib] += sign * g[o];
                });
                vec![(*a, ga), (*b, gb)]
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let mut ga = vec![0.0; va.len()];
                let mut gb = vec![0.0; vb.len()];
                for_each_broadcast(&node.shape, shp(*a), shp(*b), |o, ia, ib| {
                    ga[ia] += g[o] * vb[ib];
                    gb[ib] += g[o] * va[ia];
                });
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale(a, c) => vec![(*a, g.iter().map(|x| x * c).collect())],
            Op::Relu(a) => vec![(*a, zip_map(g, val(*a), |gi, x| if x > 0.0 { gi } else { 0.0 }))],
            Op::Square(a) => vec![(*a, zip_map(g, val(*a), |gi, x| 2.0 * x * gi))],
            Op::Sqrt(a) => vec![(*a, zip_map(g, &node.value, |gi, y| gi * 0.5 / y))],
            Op::Exp(a) => vec![(*a, zip_map(g, &node.value, |gi, y| gi * y))],
            Op::Log(a) => vec![(*a, zip_map(g, val(*a), |gi, x| gi / x))],
            Op::Powf(a, p) => vec![(*a, zip_map(g, val(*a), |gi, x| gi * p * x.powf(p - 1.0)))],
            Op::Sum(a) => vec![(*a, vec![g[0]; val(*a).len()])],
            Op::Mean(a) => {
                let n = val(*a).len();
                vec![(*a, vec![g[0] / n as f64; n])]
            }
            Op::SumAxis { input, axis } => {
                let (outer, len, inner) = split_axis(shp(*input), *axis);
                let mut gi = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        gi[(o * len + l) * inner..][..inner].copy_from_slice(&g[o * inner..][..inner]);
                    }
                }
                vec![(*input, gi)]
            }
            Op::Reshape(a) => vec![(*a, g.to_vec())],
            Op::Transpose(a) => {
                let (r, c) = (shp(*a)[0], shp(*a)[1]);
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] = g[j * r + i];
                    }
                }
                vec![(*a, ga)]
            }
            Op::MatMul(a, b) => {
                let (m, k) = (shp(*a)[0], shp(*a)[1]);
                let n = shp(*b)[1];
                let mut out = Vec::new();
                if self.wants(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g, (n as isize, 1), val(*b), (1, n as isize), &mut ga, 0.0);
                    out.push((*a, ga));
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, val(*a), (1, k as isize), g, (n as isize, 1), &mut gb, 0.0);
                    out.push((*b, gb));
                }
                out
            }
            Op::Dense { x, w, b } => {
                let (rows, d) = (shp(*x)[0], shp(*x)[1]);
                let m = shp(*w)[1];
                let mut out = Vec::new();
                if self.wants(*x) {
                    let mut gx = vec![0.0; rows * d];
                    gemm(rows, m, d, g, (m as isize, 1), val(*w), (1, m as isize), &mut gx, 0.0);
                    out.push((*x, gx));
                }
                if self.wants(*w) {
                    let mut gw = vec![0.0; d * m];
                    gemm(d, rows, m, val(*x), (1, d as isize), g, (m as isize, 1), &mut gw, 0.0);
                    out.push((*w, gw));
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; m];
                    for row in g.chunks(m) {
                        gb.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                    }
                    out.push((*b, gb));
                }
                out
            }
            Op::Conv2d { input, kernel, geom, cols } => {
                let (gi, gk) = conv::conv_backward(
                    g,
                    val(*kernel),
                    cols,
                    geom,
                    self.wants(*input),
                    self.wants(*kernel),
                );
                gi.map(|v| (*input, v)).into_iter().chain(gk.map(|v| (*kernel, v))).collect()
            }
            Op::MaxPool2d { input, argmax } => {
                let mut gi = vec![0.0; val(*input).len()];
                for (&idx, gv) in argmax.iter().zip(g) {
                    gi[idx] += gv;
                }
                vec![(*input, gi)]
            }
            Op::Concat { parts, axis } => {
                let total = node.shape[*axis];
                let (outer, _, inner) = split_axis(&node.shape, *axis);
                let mut offset = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let len = shp(p)[*axis];
                    let mut gp = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        gp.extend_from_slice(&g[(o * total + offset) * inner..][..len * inner]);
                    }
                    offset += len;
                    out.push((p, gp));
                }
                out
            }
            Op::SelectRows { input, indices } => {
                let len = val(*input).len();
                let stride = len / shp(*input)[0];
                let mut gi = vec![0.0; len];
                for (r, &i) in indices.iter().enumerate() {
                    for (d, s) in gi[i * stride..(i + 1) * stride].iter_mut().zip(&g[r * stride..]) {
                        *d += s;
                    }
                }
                vec![(*input, gi)]
            }
            Op::PairwiseSqDist(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (ra, d) = (shp(*a)[0], shp(*a)[1]);
                let rb = shp(*b)[0];
                let mut ga = vec![0.0; va.len()];
                let mut gb = vec![0.0; vb.len()];
                for i in 0..ra {
                    for j in 0..rb {
                        let gij = 2.0 * g[i * rb + j];
                        if gij == 0.0 {
                            continue;
                        }
                        for t in 0..d {
                            let diff = va[i * d + t] - vb[j * d + t];
                            ga[i * d + t] += gij * diff;
                            gb[j * d + t] -= gij * diff;
                        }
                    }
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let n = labels.len();
                let c = probs.len() / n;
                let scale = g[0] / n as f64;
                let mut gl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    gl[r * c + l] -= scale;
                }
                vec![(*logits, gl)]
            }
            Op::Solve { a, b, lu } => {
                let m = shp(*b)[1];
                let n = shp(*a)[0];
                // X = A⁻¹B:  dB = A⁻ᵀ dX,  dA = -dB Xᵀ
                let gb = lu.solve_transposed(g, m);
                let mut out = Vec::new();
                if self.wants(*a) {
                    let mut ga = vec![0.0; n * n];
                    gemm(n, m, n, &gb, (m as isize, 1), &node.value, (1, m as isize), &mut ga, 0.0);
                    ga.iter_mut().for_each(|v| *v = -*v);
                    out.push((*a, ga));
                }
                out.push((*b, gb));
                out
            }
        }
    }
}

fn zip_map(g: &[f64], x: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    g.iter().zip(x).map(|(&gi, &xi)| f(gi, xi)).collect()
}

fn dims2(shape: &[usize], what: &str) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::shape(format!("{what} must be 2-D, got {shape:?}"))),
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn aligned_strides(shape: &[usize], rank: usize) -> Vec<usize> {
    let mut strides = vec![0; rank];
    let offset = rank - shape.len();
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        strides[offset + d] = if shape[d] == 1 { 0 } else { acc };
        acc *= shape[d];
    }
    strides
}

/// Visits every output element of a broadcast binary operation as
/// `(output index, lhs index, rhs index)`.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let total: usize = out.iter().product();
    if sa == sb {
        (0..total).for_each(|i| f(i, i, i));
        return;
    }
    let rank = out.len();
    let st_a = aligned_strides(sa, rank);
    let st_b = aligned_strides(sb, rank);
    let last = out[rank - 1];
    let (la, lb) = (st_a[rank - 1], st_b[rank - 1]);
    let mut counter = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    let mut o = 0;
    while o < total {
        for t in 0..last {
            f(o + t, ia + t * la, ib + t * lb);
        }
        o += last;
        // advance the odometer over all but the last axis
        let mut d = rank - 1;
        while d > 0 {
            d -= 1;
            counter[d] += 1;
            ia += st_a[d];
            ib += st_b[d];
            if counter[d] < out[d] {
                break;
            }
            ia -= st_a[d] * out[d];
            ib -= st_b[d] * out[d];
            counter[d] = 0;
        }
    }
}
