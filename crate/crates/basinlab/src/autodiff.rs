//! Reverse-mode automatic differentiation over an arena of tensor nodes.
//!
//! A `Graph` records operations eagerly (define-by-run); node indices form a
//! topological order by construction, so the backward pass is a single
//! reverse scan. Gradients are accumulated additively across fan-out and are
//! kept in f64 regardless of the tensor storage type.

use crate::error::{Error, Result};
use crate::tensor::{self, Scalar, Tensor};

/// Handle to a node inside one `Graph`. Only valid for the graph that
/// produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, eps: f64 },
    Softmax(NodeId),
    LogSoftmax(NodeId),
    SumAll(NodeId),
    CrossEntropy { logits: NodeId, labels: Vec<usize> },
    KlDiv { p: NodeId, q: NodeId },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    needs_grad: bool,
}

/// One computation graph. Tensors are immutable once recorded; a graph is
/// used by a single thread, but independent graphs may run concurrently.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<f64>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` root w.r.t. this node, if tracked.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor<T>, op: Op, needs_grad: bool, what: &str) -> Result<NodeId> {
        value.check_finite(what)?;
        self.nodes.push(Node { value, op, needs_grad });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Trainable leaf: gradients will be accumulated for it.
    pub fn parameter(&mut self, value: Tensor<T>) -> Result<NodeId> {
        self.push(value, Op::Leaf, true, "parameter")
    }

    /// Non-trainable leaf (inputs, teacher outputs, constants).
    pub fn constant(&mut self, value: Tensor<T>) -> Result<NodeId> {
        self.push(value, Op::Leaf, false, "constant")
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = tensor::matmul(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Matmul(a, b), ng, "matmul")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = tensor::add(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), ng, "add")
    }

    /// Broadcast a rank-1 bias over the rows of a rank-2 tensor.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let value = tensor::add_bias(self.value(a), self.value(bias))?;
        let ng = self.needs(a) || self.needs(bias);
        self.push(value, Op::AddBias(a, bias), ng, "add_bias")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = tensor::mul(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Mul(a, b), ng, "mul")
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let value = tensor::scale(self.value(a), c);
        let ng = self.needs(a);
        self.push(value, Op::Scale(a, c), ng, "scale")
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let value = tensor::relu(self.value(a));
        let ng = self.needs(a);
        self.push(value, Op::Relu(a), ng, "relu")
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let value = tensor::layer_norm(self.value(x), self.value(gain), self.value(bias), eps)?;
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(value, Op::LayerNorm { x, gain, bias, eps }, ng, "layer_norm")
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let value = tensor::softmax(self.value(a))?;
        let ng = self.needs(a);
        self.push(value, Op::Softmax(a), ng, "softmax")
    }

    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let value = tensor::log_softmax(self.value(a))?;
        let ng = self.needs(a);
        self.push(value, Op::LogSoftmax(a), ng, "log_softmax")
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let value = Tensor::scalar(T::from_f64(tensor::sum_all(self.value(a))));
        let ng = self.needs(a);
        self.push(value, Op::SumAll(a), ng, "sum_all")
    }

    /// Mean negative log-likelihood of `labels` under `logits`.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let value = Tensor::scalar(T::from_f64(tensor::cross_entropy(
            self.value(logits),
            labels,
        )?));
        let ng = self.needs(logits);
        self.push(
            value,
            Op::CrossEntropy { logits, labels: labels.to_vec() },
            ng,
            "cross_entropy",
        )
    }

    /// Mean row-wise `KL(p || q)`; both arguments must hold probability rows.
    pub fn kl_divergence(&mut self, p: NodeId, q: NodeId) -> Result<NodeId> {
        let value = Tensor::scalar(T::from_f64(tensor::kl_divergence(
            self.value(p),
            self.value(q),
        )?));
        let ng = self.needs(p) || self.needs(q);
        self.push(value, Op::KlDiv { p, q }, ng, "kl_divergence")
    }

    /// Reverse pass from a scalar root. Gradients for every reachable node
    /// that needs them are available via `grad` afterwards.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward root must be scalar, got {:?}",
                self.value(root).shape()
            )));
        }
        let mut reachable = vec![false; self.nodes.len()];
        let mut stack = vec![root.0];
        while let Some(i) = stack.pop() {
            if reachable[i] {
                continue;
            }
            reachable[i] = true;
            for p in parent_ids(&self.nodes[i].op) {
                stack.push(p.0);
            }
        }

        self.grads = vec![None; self.nodes.len()];
        self.grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            if !reachable[i] || !self.nodes[i].needs_grad {
                continue;
            }
            let Some(gout) = self.grads[i].take() else { continue };
            self.propagate(i, &gout)?;
            self.grads[i] = Some(gout);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, contribution: Vec<f64>) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut self.grads[id.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(&contribution) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    fn widened(&self, id: NodeId) -> Vec<f64> {
        self.value(id).data().iter().map(|v| v.to_f64()).collect()
    }

    fn propagate(&mut self, i: usize, gout: &[f64]) -> Result<()> {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (m, k) = self.value(a).dims2()?;
                let n = self.value(b).dims2()?.1;
                if self.needs(a) {
                    // dA = dC . B^T
                    let bv = self.widened(b);
                    let mut bt = vec![0.0; k * n];
                    for kk in 0..k {
                        for j in 0..n {
                            bt[j * k + kk] = bv[kk * n + j];
                        }
                    }
                    self.accumulate(a, tensor::matmul_slices(gout, &bt, m, n, k));
                }
                if self.needs(b) {
                    // dB = A^T . dC
                    let av = self.widened(a);
                    let mut at = vec![0.0; m * k];
                    for ii in 0..m {
                        for kk in 0..k {
                            at[kk * m + ii] = av[ii * k + kk];
                        }
                    }
                    self.accumulate(b, tensor::matmul_slices(&at, gout, k, m, n));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(a, gout.to_vec());
                self.accumulate(b, gout.to_vec());
            }
            Op::AddBias(a, bias) => {
                self.accumulate(a, gout.to_vec());
                if self.needs(bias) {
                    let (n, k) = self.value(a).dims2()?;
                    let mut db = vec![0.0; k];
                    for r in 0..n {
                        for j in 0..k {
                            db[j] += gout[r * k + j];
                        }
                    }
                    self.accumulate(bias, db);
                }
            }
            Op::Mul(a, b) => {
                if self.needs(a) {
                    let bv = self.widened(b);
                    self.accumulate(a, gout.iter().zip(&bv).map(|(g, v)| g * v).collect());
                }
                if self.needs(b) {
                    let av = self.widened(a);
                    self.accumulate(b, gout.iter().zip(&av).map(|(g, v)| g * v).collect());
                }
            }
            Op::Scale(a, c) => {
                self.accumulate(a, gout.iter().map(|g| g * c).collect());
            }
            Op::Relu(a) => {
                let av = self.widened(a);
                self.accumulate(
                    a,
                    gout.iter()
                        .zip(&av)
                        .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                        .collect(),
                );
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let xv = self.widened(x);
                let gv = self.widened(gain);
                let width = *self.value(x).shape().last().unwrap();
                let rows = xv.len() / width;
                let mut dx = vec![0.0; xv.len()];
                let mut dgain = vec![0.0; width];
                let mut dbias = vec![0.0; width];
                for r in 0..rows {
                    let row = &xv[r * width..(r + 1) * width];
                    let g_row = &gout[r * width..(r + 1) * width];
                    let (mean, inv_std) =
                        tensor::row_moments(&row.iter().copied().collect::<Vec<f64>>(), eps);
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv_std).collect();
                    let dxhat: Vec<f64> =
                        g_row.iter().zip(&gv).map(|(g, gw)| g * gw).collect();
                    let mean_dxhat = dxhat.iter().sum::<f64>() / width as f64;
                    let mean_dxhat_xhat = dxhat
                        .iter()
                        .zip(&xhat)
                        .map(|(d, h)| d * h)
                        .sum::<f64>()
                        / width as f64;
                    for j in 0..width {
                        dx[r * width + j] =
                            inv_std * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                        dgain[j] += g_row[j] * xhat[j];
                        dbias[j] += g_row[j];
                    }
                }
                self.accumulate(x, dx);
                self.accumulate(gain, dgain);
                self.accumulate(bias, dbias);
            }
            Op::Softmax(a) => {
                let y = self.widened(NodeId(i));
                let width = *self.value(a).shape().last().unwrap();
                let rows = y.len() / width;
                let mut dx = vec![0.0; y.len()];
                for r in 0..rows {
                    let ys = &y[r * width..(r + 1) * width];
                    let gs = &gout[r * width..(r + 1) * width];
                    let dot: f64 = ys.iter().zip(gs).map(|(y, g)| y * g).sum();
                    for j in 0..width {
                        dx[r * width + j] = ys[j] * (gs[j] - dot);
                    }
                }
                self.accumulate(a, dx);
            }
            Op::LogSoftmax(a) => {
                let y = self.widened(NodeId(i)); // log-probs
                let width = *self.value(a).shape().last().unwrap();
                let rows = y.len() / width;
                let mut dx = vec![0.0; y.len()];
                for r in 0..rows {
                    let gs = &gout[r * width..(r + 1) * width];
                    let gsum: f64 = gs.iter().sum();
                    for j in 0..width {
                        dx[r * width + j] = gs[j] - y[r * width + j].exp() * gsum;
                    }
                }
                self.accumulate(a, dx);
            }
            Op::SumAll(a) => {
                self.accumulate(a, vec![gout[0]; self.value(a).numel()]);
            }
            Op::CrossEntropy { logits, labels } => {
                let probs = tensor::softmax(self.value(logits))?;
                let (n, k) = self.value(logits).dims2()?;
                let mut dl = vec![0.0; n * k];
                let inv_n = 1.0 / n as f64;
                for (r, &y) in labels.iter().enumerate() {
                    for j in 0..k {
                        let p = probs.at2(r, j).to_f64();
                        let onehot = if j == y { 1.0 } else { 0.0 };
                        dl[r * k + j] = (p - onehot) * inv_n * gout[0];
                    }
                }
                self.accumulate(logits, dl);
            }
            Op::KlDiv { p, q } => {
                let pv = self.widened(p);
                let qv = self.widened(q);
                let width = *self.value(p).shape().last().unwrap();
                let rows = pv.len() / width;
                let inv_rows = 1.0 / rows as f64;
                if self.needs(q) {
                    let dq: Vec<f64> = pv
                        .iter()
                        .zip(&qv)
                        .map(|(pe, qe)| -pe / qe * inv_rows * gout[0])
                        .collect();
                    self.accumulate(q, dq);
                }
                if self.needs(p) {
                    // where p = 0 the 0 ln 0 = 0 convention gives a 0 subgradient
                    let dp: Vec<f64> = pv
                        .iter()
                        .zip(&qv)
                        .map(|(pe, qe)| {
                            if *pe > 0.0 {
                                ((pe / qe).ln() + 1.0) * inv_rows * gout[0]
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    self.accumulate(p, dp);
                }
            }
        }
        Ok(())
    }
}

fn parent_ids(op: &Op) -> Vec<NodeId> {
    match op {
        Op::Leaf => vec![],
        Op::Matmul(a, b) | Op::Add(a, b) | Op::AddBias(a, b) | Op::Mul(a, b) => vec![*a, *b],
        Op::Scale(a, _)
        | Op::Relu(a)
        | Op::Softmax(a)
        | Op::LogSoftmax(a)
        | Op::SumAll(a) => vec![*a],
        Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
        Op::CrossEntropy { logits, .. } => vec![*logits],
        Op::KlDiv { p, q } => vec![*p, *q],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn square_gradient() {
        // d/dx of x*x at 3 is 6, reaching x twice through fan-out
        let mut g = Graph::new();
        let x = g.parameter(Tensor::scalar(3.0f64)).unwrap();
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut g = Graph::new();
        let x = g
            .parameter(Tensor::new(vec![2], vec![1.0f64, 2.0]).unwrap())
            .unwrap();
        assert!(matches!(g.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let mut g = Graph::new();
        let logits_t = Tensor::from_rows(&[&[0.2f64, -0.4, 1.1], &[0.0, 0.5, -0.3]]).unwrap();
        let probs = tensor::softmax(&logits_t).unwrap();
        let logits = g.parameter(logits_t).unwrap();
        let labels = [2usize, 0];
        let loss = g.cross_entropy(logits, &labels).unwrap();
        g.backward(loss).unwrap();
        let grad = g.grad(logits).unwrap();
        for r in 0..2 {
            for j in 0..3 {
                let onehot = if labels[r] == j { 1.0 } else { 0.0 };
                let expect = (probs.at2(r, j) - onehot) / 2.0;
                assert!((grad[r * 3 + j] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn graph_evaluation_is_deterministic() {
        let build = || {
            let mut g = Graph::new();
            let x = g
                .parameter(Tensor::from_rows(&[&[0.5f32, -1.25], &[2.0, 0.75]]).unwrap())
                .unwrap();
            let w = g
                .parameter(Tensor::from_rows(&[&[0.1f32, 0.2], &[-0.3, 0.4]]).unwrap())
                .unwrap();
            let h = g.matmul(x, w).unwrap();
            let s = g.softmax(h).unwrap();
            g.value(s).data().to_vec()
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn softmax_rows_sum_to_one_after_graph_op() {
        let mut rng = crate::rng::rng_from(17);
        let mut g = Graph::new();
        let data: Vec<f32> = (0..30).map(|_| rng.gen_range(-8.0..8.0)).collect();
        let x = g.parameter(Tensor::new(vec![6, 5], data).unwrap()).unwrap();
        let s = g.softmax(x).unwrap();
        for r in 0..6 {
            let sum: f64 = g.value(s).row(r).iter().map(|v| v.to_f64()).sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    /// Central finite differences on a scalar-valued graph builder.
    fn finite_diff_check<F>(build: F, inputs: &[f64], tol: f64)
    where
        F: Fn(&mut Graph<f64>, &[f64]) -> (Vec<NodeId>, NodeId),
    {
        let h = 1e-5;
        let mut g = Graph::new();
        let (leaves, root) = build(&mut g, inputs);
        g.backward(root).unwrap();
        let grads: Vec<Vec<f64>> = leaves
            .iter()
            .map(|&l| g.grad(l).unwrap_or(&[]).to_vec())
            .collect();

        let eval = |vals: &[f64]| -> f64 {
            let mut g = Graph::new();
            let (_, root) = build(&mut g, vals);
            g.value(root).item().unwrap()
        };

        let mut offset = 0;
        for grad in &grads {
            for (j, &analytic) in grad.iter().enumerate() {
                let mut plus = inputs.to_vec();
                let mut minus = inputs.to_vec();
                plus[offset + j] += h;
                minus[offset + j] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let denom = analytic.abs().max(numeric.abs()).max(1e-6);
                assert!(
                    (analytic - numeric).abs() / denom < tol,
                    "grad mismatch: analytic {analytic}, numeric {numeric}"
                );
            }
            offset += grad.len();
        }
    }

    #[test]
    fn layer_norm_gradients_match_finite_differences() {
        let mut rng = crate::rng::rng_from(23);
        let inputs: Vec<f64> = (0..8 + 4 + 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        finite_diff_check(
            |g, vals| {
                let x = g
                    .parameter(Tensor::new(vec![2, 4], vals[..8].to_vec()).unwrap())
                    .unwrap();
                let gain = g
                    .parameter(Tensor::new(vec![4], vals[8..12].to_vec()).unwrap())
                    .unwrap();
                let bias = g
                    .parameter(Tensor::new(vec![4], vals[12..16].to_vec()).unwrap())
                    .unwrap();
                let ln = g.layer_norm(x, gain, bias, 1e-5).unwrap();
                let sq = g.mul(ln, ln).unwrap();
                let root = g.sum_all(sq).unwrap();
                (vec![x, gain, bias], root)
            },
            &inputs,
            1e-4,
        );
    }

    #[test]
    fn kl_gradients_match_finite_differences() {
        // differentiate through softmax into the q side of the divergence
        let mut rng = crate::rng::rng_from(29);
        let inputs: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let p = Tensor::from_rows(&[&[0.2f64, 0.3, 0.5], &[0.6, 0.3, 0.1]]).unwrap();
        finite_diff_check(
            |g, vals| {
                let logits = g
                    .parameter(Tensor::new(vec![2, 3], vals.to_vec()).unwrap())
                    .unwrap();
                let q = g.softmax(logits).unwrap();
                let pc = g.constant(p.clone()).unwrap();
                let root = g.kl_divergence(pc, q).unwrap();
                (vec![logits], root)
            },
            &inputs,
            1e-4,
        );
    }
}
