//! MLP and residual-MLP classifiers, their flat parameter representation,
//! and exact permutation symmetry application.
//!
//! Every architecture fixes a canonical parameter ordering through
//! [`ParamLayout`]: named tensors with offsets into one flat f32 vector, plus
//! the permutable unit group each tensor axis belongs to. Training, alignment
//! and serialization all work against that single layout, so flatten/
//! unflatten round-trips are bitwise and alignment code never hard-codes an
//! architecture.

use rand::distributions::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{self, Scalar, Tensor};

/// Epsilon added to the variance inside every LayerNorm.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Architecture descriptor. The canonical parameter ordering is a pure
/// function of this value.
///
/// * `PlainMlp`: per hidden layer `h <- relu(layer_norm(W h + b))`, canonical
///   order per layer is weight, bias, then (if present) norm gain, norm bias;
///   the output head follows last.
/// * `ResMlp`: an input embedding into a shared residual stream, then blocks
///   `h <- h + W2 relu(W1 layer_norm(h) + b1) + b2`, then the head. Canonical
///   block order: norm gain, norm bias, W1, b1, W2, b2.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    PlainMlp {
        input_dim: usize,
        num_classes: usize,
        hidden: Vec<usize>,
        layer_norm: bool,
    },
    ResMlp {
        input_dim: usize,
        num_classes: usize,
        stream_width: usize,
        block_widths: Vec<usize>,
        layer_norm: bool,
    },
}

impl ModelSpec {
    pub fn plain_mlp(input_dim: usize, num_classes: usize, hidden: &[usize]) -> Self {
        ModelSpec::PlainMlp {
            input_dim,
            num_classes,
            hidden: hidden.to_vec(),
            layer_norm: true,
        }
    }

    pub fn res_mlp(
        input_dim: usize,
        num_classes: usize,
        stream_width: usize,
        block_widths: &[usize],
    ) -> Self {
        ModelSpec::ResMlp {
            input_dim,
            num_classes,
            stream_width,
            block_widths: block_widths.to_vec(),
            layer_norm: true,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            ModelSpec::PlainMlp { input_dim, .. } | ModelSpec::ResMlp { input_dim, .. } => {
                *input_dim
            }
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            ModelSpec::PlainMlp { num_classes, .. } | ModelSpec::ResMlp { num_classes, .. } => {
                *num_classes
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (widths, label) = match self {
            ModelSpec::PlainMlp { hidden, .. } => (hidden.as_slice(), "hidden layer"),
            ModelSpec::ResMlp { block_widths, stream_width, .. } => {
                if *stream_width == 0 {
                    return Err(Error::Spec("stream width must be >= 1".into()));
                }
                (block_widths.as_slice(), "block")
            }
        };
        if widths.is_empty() {
            return Err(Error::Spec(format!("at least one {label} required")));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(Error::Spec(format!("{label} widths must be >= 1")));
        }
        if self.input_dim() == 0 || self.num_classes() == 0 {
            return Err(Error::Spec("input dim and class count must be >= 1".into()));
        }
        Ok(())
    }

    /// Canonical layout of this architecture's parameters.
    pub fn layout(&self) -> ParamLayout {
        let mut b = LayoutBuilder::default();
        match self {
            ModelSpec::PlainMlp { input_dim, num_classes, hidden, layer_norm } => {
                let mut fan_in = *input_dim;
                let mut prev_group = None;
                for (l, &width) in hidden.iter().enumerate() {
                    let group = b.group(format!("hidden{l}"), width);
                    b.tensor(format!("layer{l}.weight"), vec![fan_in, width], [prev_group, Some(group)]);
                    b.tensor(format!("layer{l}.bias"), vec![width], [Some(group), None]);
                    if *layer_norm {
                        b.tensor(format!("layer{l}.ln_gain"), vec![width], [Some(group), None]);
                        b.tensor(format!("layer{l}.ln_bias"), vec![width], [Some(group), None]);
                    }
                    fan_in = width;
                    prev_group = Some(group);
                }
                b.tensor("head.weight".into(), vec![fan_in, *num_classes], [prev_group, None]);
                b.tensor("head.bias".into(), vec![*num_classes], [None, None]);
            }
            ModelSpec::ResMlp { input_dim, num_classes, stream_width, block_widths, layer_norm } => {
                let stream = b.group("stream".into(), *stream_width);
                b.tensor("embed.weight".into(), vec![*input_dim, *stream_width], [None, Some(stream)]);
                b.tensor("embed.bias".into(), vec![*stream_width], [Some(stream), None]);
                for (l, &width) in block_widths.iter().enumerate() {
                    let inner = b.group(format!("block{l}"), width);
                    if *layer_norm {
                        b.tensor(format!("block{l}.ln_gain"), vec![*stream_width], [Some(stream), None]);
                        b.tensor(format!("block{l}.ln_bias"), vec![*stream_width], [Some(stream), None]);
                    }
                    b.tensor(format!("block{l}.w1"), vec![*stream_width, width], [Some(stream), Some(inner)]);
                    b.tensor(format!("block{l}.b1"), vec![width], [Some(inner), None]);
                    b.tensor(format!("block{l}.w2"), vec![width, *stream_width], [Some(inner), Some(stream)]);
                    b.tensor(format!("block{l}.b2"), vec![*stream_width], [Some(stream), None]);
                }
                b.tensor("head.weight".into(), vec![*stream_width, *num_classes], [Some(stream), None]);
                b.tensor("head.bias".into(), vec![*num_classes], [None, None]);
            }
        }
        b.finish()
    }
}

/// One parameter tensor inside the flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    /// Permutable unit group per axis (index into `ParamLayout::groups`).
    /// Rank-1 tensors use slot 0.
    pub axis_groups: [Option<usize>; 2],
}

impl ParamTensor {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A permutable group of hidden units.
#[derive(Debug, Clone, PartialEq)]
pub struct PermGroup {
    pub name: String,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    pub tensors: Vec<ParamTensor>,
    pub groups: Vec<PermGroup>,
    pub total_len: usize,
}

#[derive(Default)]
struct LayoutBuilder {
    tensors: Vec<ParamTensor>,
    groups: Vec<PermGroup>,
    offset: usize,
}

impl LayoutBuilder {
    fn group(&mut self, name: String, width: usize) -> usize {
        self.groups.push(PermGroup { name, width });
        self.groups.len() - 1
    }

    fn tensor(&mut self, name: String, shape: Vec<usize>, axis_groups: [Option<usize>; 2]) {
        let len = shape.iter().product::<usize>();
        self.tensors.push(ParamTensor { name, shape, offset: self.offset, axis_groups });
        self.offset += len;
    }

    fn finish(self) -> ParamLayout {
        ParamLayout { tensors: self.tensors, groups: self.groups, total_len: self.offset }
    }
}

impl ParamLayout {
    pub fn tensor_named(&self, name: &str) -> Option<&ParamTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Gather `values` according to `perms` (one permutation per group,
    /// `perm[new] = old`). Pure data movement: no arithmetic is performed.
    pub fn permute_values<V: Copy>(&self, values: &[V], perms: &PermutationSet) -> Vec<V> {
        let mut out = Vec::with_capacity(values.len());
        for t in &self.tensors {
            let src = &values[t.offset..t.offset + t.len()];
            match t.shape.as_slice() {
                [n] => {
                    if let Some(g) = t.axis_groups[0] {
                        let perm = &perms.perms[g];
                        out.extend((0..*n).map(|i| src[perm[i]]));
                    } else {
                        out.extend_from_slice(src);
                    }
                }
                [r, c] => {
                    for i in 0..*r {
                        let si = t.axis_groups[0].map_or(i, |g| perms.perms[g][i]);
                        for j in 0..*c {
                            let sj = t.axis_groups[1].map_or(j, |g| perms.perms[g][j]);
                            out.push(src[si * c + sj]);
                        }
                    }
                }
                other => unreachable!("rank {} parameter tensor", other.len()),
            }
        }
        out
    }
}

/// Flat, canonically ordered view of all parameters of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    spec: ModelSpec,
    values: Vec<f32>,
}

impl ParamVector {
    pub fn new(spec: ModelSpec, values: Vec<f32>) -> Result<Self> {
        spec.validate()?;
        let expect = spec.layout().total_len;
        if values.len() != expect {
            return Err(Error::Spec(format!(
                "parameter vector has {} values, spec implies {expect}",
                values.len()
            )));
        }
        Ok(ParamVector { spec, values })
    }

    pub fn zeros(spec: &ModelSpec) -> Result<Self> {
        let len = spec.layout().total_len;
        ParamVector::new(spec.clone(), vec![0.0; len])
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    /// View of one named tensor as (shape, slice).
    pub fn tensor<'a>(&'a self, t: &'a ParamTensor) -> (&'a [usize], &'a [f32]) {
        (&t.shape, &self.values[t.offset..t.offset + t.len()])
    }

    /// Split into per-tensor `(name, shape, values)` triples in canonical
    /// order; `ParamVector::from_tensors` reverses this bitwise.
    pub fn unflatten(&self) -> Vec<(String, Vec<usize>, Vec<f32>)> {
        let layout = self.spec.layout();
        layout
            .tensors
            .iter()
            .map(|t| {
                let (shape, vals) = self.tensor(t);
                (t.name.clone(), shape.to_vec(), vals.to_vec())
            })
            .collect()
    }

    pub fn from_tensors(
        spec: ModelSpec,
        tensors: &[(String, Vec<usize>, Vec<f32>)],
    ) -> Result<Self> {
        let layout = spec.layout();
        if tensors.len() != layout.tensors.len() {
            return Err(Error::Spec(format!(
                "expected {} tensors, got {}",
                layout.tensors.len(),
                tensors.len()
            )));
        }
        let mut values = Vec::with_capacity(layout.total_len);
        for (t, (name, shape, vals)) in layout.tensors.iter().zip(tensors) {
            if &t.name != name || &t.shape != shape {
                return Err(Error::Spec(format!(
                    "tensor {name} {shape:?} does not match canonical {} {:?}",
                    t.name, t.shape
                )));
            }
            values.extend_from_slice(vals);
        }
        ParamVector::new(spec, values)
    }

    pub fn l2_distance(&self, other: &ParamVector) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| {
                let d = (*a as f64) - (*b as f64);
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }
}

/// Glorot-uniform weights, zero biases, unit norm gains.
pub fn init_params(spec: &ModelSpec, seed: u64) -> Result<ParamVector> {
    spec.validate()?;
    let layout = spec.layout();
    let mut rng = rng::rng_from(seed);
    let mut values = vec![0.0f32; layout.total_len];
    for t in &layout.tensors {
        let dst = &mut values[t.offset..t.offset + t.len()];
        if let [fan_in, fan_out] = t.shape.as_slice() {
            let bound = (6.0 / (*fan_in as f64 + *fan_out as f64)).sqrt();
            let dist = Uniform::new(-bound, bound);
            for v in dst.iter_mut() {
                *v = dist.sample(&mut rng) as f32;
            }
        } else if t.name.ends_with("ln_gain") {
            dst.fill(1.0);
        }
        // biases and norm offsets stay zero
    }
    ParamVector::new(spec.clone(), values)
}

// ---- forward ----------------------------------------------------------------

fn leaf_tensor<T: Scalar>(params: &ParamVector, t: &ParamTensor) -> Tensor<T> {
    let (shape, vals) = params.tensor(t);
    Tensor::new(shape.to_vec(), vals.iter().map(|v| T::from_f64(*v as f64)).collect())
        .expect("layout shapes are consistent")
}

/// Deterministic logits for a batch. Read-only and safe to call from many
/// threads on shared parameters.
pub fn forward(spec: &ModelSpec, params: &ParamVector, batch: &Tensor<f32>) -> Result<Tensor<f32>> {
    if params.spec() != spec {
        return Err(Error::Spec("parameter vector belongs to a different spec".into()));
    }
    let (_, d) = batch.dims2()?;
    if d != spec.input_dim() {
        return Err(Error::Spec(format!(
            "batch width {d} does not match input dim {}",
            spec.input_dim()
        )));
    }
    let layout = spec.layout();
    let get = |name: &str| leaf_tensor::<f32>(params, layout.tensor_named(name).unwrap());
    let logits = match spec {
        ModelSpec::PlainMlp { hidden, layer_norm, .. } => {
            let mut h = batch.clone();
            for l in 0..hidden.len() {
                let z = tensor::add_bias(
                    &tensor::matmul(&h, &get(&format!("layer{l}.weight")))?,
                    &get(&format!("layer{l}.bias")),
                )?;
                let z = if *layer_norm {
                    tensor::layer_norm(
                        &z,
                        &get(&format!("layer{l}.ln_gain")),
                        &get(&format!("layer{l}.ln_bias")),
                        LAYER_NORM_EPS,
                    )?
                } else {
                    z
                };
                h = tensor::relu(&z);
            }
            tensor::add_bias(&tensor::matmul(&h, &get("head.weight"))?, &get("head.bias"))?
        }
        ModelSpec::ResMlp { block_widths, layer_norm, .. } => {
            let mut h = tensor::add_bias(
                &tensor::matmul(batch, &get("embed.weight"))?,
                &get("embed.bias"),
            )?;
            for l in 0..block_widths.len() {
                let u = if *layer_norm {
                    tensor::layer_norm(
                        &h,
                        &get(&format!("block{l}.ln_gain")),
                        &get(&format!("block{l}.ln_bias")),
                        LAYER_NORM_EPS,
                    )?
                } else {
                    h.clone()
                };
                let a = tensor::relu(&tensor::add_bias(
                    &tensor::matmul(&u, &get(&format!("block{l}.w1")))?,
                    &get(&format!("block{l}.b1")),
                )?);
                let delta = tensor::add_bias(
                    &tensor::matmul(&a, &get(&format!("block{l}.w2")))?,
                    &get(&format!("block{l}.b2")),
                )?;
                h = tensor::add(&h, &delta)?;
            }
            tensor::add_bias(&tensor::matmul(&h, &get("head.weight"))?, &get("head.bias"))?
        }
    };
    logits.check_finite("forward")?;
    Ok(logits)
}

/// Forward pass recorded on an autodiff graph. Returns the logits node plus
/// the parameter leaves in canonical tensor order (for gradient extraction).
pub fn forward_graph(
    g: &mut Graph<f32>,
    spec: &ModelSpec,
    params: &ParamVector,
    batch: Tensor<f32>,
) -> Result<(NodeId, Vec<NodeId>)> {
    if params.spec() != spec {
        return Err(Error::Spec("parameter vector belongs to a different spec".into()));
    }
    let layout = spec.layout();
    let mut leaves = Vec::with_capacity(layout.tensors.len());
    for t in &layout.tensors {
        leaves.push(g.parameter(leaf_tensor::<f32>(params, t))?);
    }
    let leaf = |name: &str| {
        let idx = layout.tensors.iter().position(|t| t.name == name).unwrap();
        leaves[idx]
    };
    let x = g.constant(batch)?;
    let logits = match spec {
        ModelSpec::PlainMlp { hidden, layer_norm, .. } => {
            let mut h = x;
            for l in 0..hidden.len() {
                let z0 = g.matmul(h, leaf(&format!("layer{l}.weight")))?;
                let mut z = g.add_bias(z0, leaf(&format!("layer{l}.bias")))?;
                if *layer_norm {
                    z = g.layer_norm(
                        z,
                        leaf(&format!("layer{l}.ln_gain")),
                        leaf(&format!("layer{l}.ln_bias")),
                        LAYER_NORM_EPS,
                    )?;
                }
                h = g.relu(z)?;
            }
            let z = g.matmul(h, leaf("head.weight"))?;
            g.add_bias(z, leaf("head.bias"))?
        }
        ModelSpec::ResMlp { block_widths, layer_norm, .. } => {
            let z = g.matmul(x, leaf("embed.weight"))?;
            let mut h = g.add_bias(z, leaf("embed.bias"))?;
            for l in 0..block_widths.len() {
                let u = if *layer_norm {
                    g.layer_norm(
                        h,
                        leaf(&format!("block{l}.ln_gain")),
                        leaf(&format!("block{l}.ln_bias")),
                        LAYER_NORM_EPS,
                    )?
                } else {
                    h
                };
                let a0 = g.matmul(u, leaf(&format!("block{l}.w1")))?;
                let a1 = g.add_bias(a0, leaf(&format!("block{l}.b1")))?;
                let a = g.relu(a1)?;
                let d0 = g.matmul(a, leaf(&format!("block{l}.w2")))?;
                let delta = g.add_bias(d0, leaf(&format!("block{l}.b2")))?;
                h = g.add(h, delta)?;
            }
            let z = g.matmul(h, leaf("head.weight"))?;
            g.add_bias(z, leaf("head.bias"))?
        }
    };
    Ok((logits, leaves))
}

// ---- permutations ------------------------------------------------------------

/// One permutation per permutable unit group, in layout group order.
/// Applying a set and then its inverse is the identity on parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PermutationSet {
    perms: Vec<Vec<usize>>,
}

impl PermutationSet {
    /// Validates that each array is a bijection on its group's width.
    pub fn new(layout: &ParamLayout, perms: Vec<Vec<usize>>) -> Result<Self> {
        if perms.len() != layout.groups.len() {
            return Err(Error::Spec(format!(
                "{} permutations supplied for {} groups",
                perms.len(),
                layout.groups.len()
            )));
        }
        for (perm, group) in perms.iter().zip(&layout.groups) {
            if perm.len() != group.width {
                return Err(Error::Spec(format!(
                    "permutation of length {} for group {} of width {}",
                    perm.len(),
                    group.name,
                    group.width
                )));
            }
            let mut seen = vec![false; perm.len()];
            for &p in perm {
                if p >= perm.len() || seen[p] {
                    return Err(Error::Spec(format!(
                        "permutation for group {} is not a bijection",
                        group.name
                    )));
                }
                seen[p] = true;
            }
        }
        Ok(PermutationSet { perms })
    }

    pub fn identity(layout: &ParamLayout) -> Self {
        PermutationSet {
            perms: layout.groups.iter().map(|g| (0..g.width).collect()).collect(),
        }
    }

    pub fn random(layout: &ParamLayout, seed: u64) -> Self {
        use rand::seq::SliceRandom;
        let mut rng = rng::rng_from(seed);
        PermutationSet {
            perms: layout
                .groups
                .iter()
                .map(|g| {
                    let mut p: Vec<usize> = (0..g.width).collect();
                    p.shuffle(&mut rng);
                    p
                })
                .collect(),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.perms
            .iter()
            .all(|p| p.iter().enumerate().all(|(i, &v)| i == v))
    }

    pub fn inverse(&self) -> Self {
        PermutationSet {
            perms: self
                .perms
                .iter()
                .map(|p| {
                    let mut inv = vec![0; p.len()];
                    for (i, &v) in p.iter().enumerate() {
                        inv[v] = i;
                    }
                    inv
                })
                .collect(),
        }
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.perms
    }

    pub(crate) fn set_group(&mut self, group: usize, perm: Vec<usize>) {
        self.perms[group] = perm;
    }
}

/// Permute hidden units without changing the network function. The forward
/// output is exactly unchanged for every input, up to float reassociation.
pub fn apply_permutation(params: &ParamVector, perm: &PermutationSet) -> Result<ParamVector> {
    let layout = params.spec().layout();
    // re-validate against this layout so corrupted sets are rejected early
    let perm = PermutationSet::new(&layout, perm.perms.clone())?;
    let values = layout.permute_values(params.values(), &perm);
    ParamVector::new(params.spec().clone(), values)
}

// ---- interpolation ------------------------------------------------------------

/// Elementwise convex combination of parameter vectors sharing one spec.
/// Weights must sum to 1 (within 1e-9); accumulation is in f64.
pub fn interpolate(params: &[&ParamVector], weights: &[f64]) -> Result<ParamVector> {
    if params.is_empty() || params.len() != weights.len() {
        return Err(Error::Usage(format!(
            "{} parameter vectors with {} weights",
            params.len(),
            weights.len()
        )));
    }
    let spec = params[0].spec();
    if params.iter().any(|p| p.spec() != spec) {
        return Err(Error::Spec("interpolation requires a shared model spec".into()));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Domain(format!("weights sum to {total}, not 1")));
    }
    let mut acc = vec![0.0f64; params[0].len()];
    for (p, &w) in params.iter().zip(weights) {
        for (a, v) in acc.iter_mut().zip(p.values()) {
            *a += w * (*v as f64);
        }
    }
    ParamVector::new(spec.clone(), acc.into_iter().map(|v| v as f32).collect())
}

// ---- evaluation ------------------------------------------------------------

/// Accuracy and mean log-loss of one model on a labelled set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Fraction correct, in [0, 1].
    pub accuracy: f64,
    /// Mean cross-entropy in nats.
    pub mean_nll: f64,
}

/// Row-wise argmax with smallest-index tie breaking.
pub fn argmax_rows(logits: &Tensor<f32>) -> Vec<usize> {
    let (n, k) = logits.dims2().expect("logits are rank 2");
    (0..n)
        .map(|i| {
            let mut best = 0;
            for j in 1..k {
                if logits.at2(i, j) > logits.at2(i, best) {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub fn evaluate(
    spec: &ModelSpec,
    params: &ParamVector,
    inputs: &Tensor<f32>,
    labels: &[usize],
) -> Result<Evaluation> {
    let logits = forward(spec, params, inputs)?;
    let predictions = argmax_rows(&logits);
    let correct = predictions
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count();
    let mean_nll = tensor::cross_entropy(&logits, labels)?;
    Ok(Evaluation {
        accuracy: correct as f64 / labels.len() as f64,
        mean_nll,
    })
}

/// Per-example class probabilities in f64 (softmax of the f32 logits).
pub fn class_probabilities(
    spec: &ModelSpec,
    params: &ParamVector,
    inputs: &Tensor<f32>,
) -> Result<Tensor<f64>> {
    let logits = forward(spec, params, inputs)?;
    tensor::softmax(&logits.cast::<f64>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_params(spec: &ModelSpec, seed: u64) -> ParamVector {
        let mut rng = rng::rng_from(seed);
        let len = spec.layout().total_len;
        ParamVector::new(
            spec.clone(),
            (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn random_batch(spec: &ModelSpec, n: usize, seed: u64) -> Tensor<f32> {
        let mut rng = rng::rng_from(seed);
        Tensor::new(
            vec![n, spec.input_dim()],
            (0..n * spec.input_dim()).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn zero_params_give_zero_logits() {
        let spec = ModelSpec::plain_mlp(3, 2, &[4]);
        let params = ParamVector::zeros(&spec).unwrap();
        let batch = random_batch(&spec, 5, 1);
        let logits = forward(&spec, &params, &batch).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_computed_tiny_net() {
        // 2 -> 1 -> 2 without layer norm, one example worked by hand:
        // z = 0.5*1 + (-1)*2 + 0.25 = -1.25 -> relu -> 0
        // logits = [0*2 + 0.1, 0*(-3) + (-0.2)] = [0.1, -0.2]
        let spec = ModelSpec::PlainMlp {
            input_dim: 2,
            num_classes: 2,
            hidden: vec![1],
            layer_norm: false,
        };
        let values = vec![
            0.5f32, -1.0, // layer0.weight [2x1]
            0.25, // layer0.bias
            2.0, -3.0, // head.weight [1x2]
            0.1, -0.2, // head.bias
        ];
        let params = ParamVector::new(spec.clone(), values).unwrap();
        let batch = Tensor::from_rows(&[&[1.0f32, 2.0]]).unwrap();
        let logits = forward(&spec, &params, &batch).unwrap();
        assert!((logits.at2(0, 0) - 0.1).abs() < 1e-6);
        assert!((logits.at2(0, 1) + 0.2).abs() < 1e-6);
        // positive pre-activation path: z = 0.5*1 - 1*(-1) + 0.25 = 1.75
        let batch = Tensor::from_rows(&[&[1.0f32, -1.0]]).unwrap();
        let logits = forward(&spec, &params, &batch).unwrap();
        assert!((logits.at2(0, 0) - (1.75 * 2.0 + 0.1)).abs() < 1e-5);
        assert!((logits.at2(0, 1) - (1.75 * -3.0 - 0.2)).abs() < 1e-5);
    }

    #[test]
    fn param_length_mismatch_is_spec_error() {
        let spec = ModelSpec::plain_mlp(2, 2, &[3]);
        assert!(matches!(
            ParamVector::new(spec, vec![0.0; 7]),
            Err(Error::Spec(_))
        ));
    }

    #[test]
    fn flatten_round_trip_is_bitwise() {
        let spec = ModelSpec::res_mlp(3, 4, 6, &[5, 5]);
        let params = random_params(&spec, 2);
        let rebuilt =
            ParamVector::from_tensors(spec.clone(), &params.unflatten()).unwrap();
        assert_eq!(params.values(), rebuilt.values());
    }

    #[test]
    fn graph_forward_matches_inference_forward() {
        for spec in [
            ModelSpec::plain_mlp(4, 3, &[8, 6]),
            ModelSpec::res_mlp(4, 3, 8, &[6, 6]),
        ] {
            let params = random_params(&spec, 3);
            let batch = random_batch(&spec, 7, 4);
            let direct = forward(&spec, &params, &batch).unwrap();
            let mut g = Graph::new();
            let (logits, _) = forward_graph(&mut g, &spec, &params, batch).unwrap();
            assert_eq!(direct.data(), g.value(logits).data());
        }
    }

    #[test]
    fn identity_permutation_is_bitwise_noop() {
        let spec = ModelSpec::plain_mlp(3, 2, &[5, 4]);
        let params = random_params(&spec, 5);
        let id = PermutationSet::identity(&spec.layout());
        let out = apply_permutation(&params, &id).unwrap();
        assert_eq!(params.values(), out.values());
    }

    #[test]
    fn random_permutation_preserves_function() {
        for (spec, seed) in [
            (ModelSpec::plain_mlp(3, 4, &[16, 12]), 11u64),
            (ModelSpec::res_mlp(3, 4, 10, &[8, 8]), 12u64),
        ] {
            let params = random_params(&spec, seed);
            let layout = spec.layout();
            let perm = PermutationSet::random(&layout, seed + 100);
            let permuted = apply_permutation(&params, &perm).unwrap();
            let batch = random_batch(&spec, 100, seed + 200);
            let a = forward(&spec, &params, &batch).unwrap();
            let b = forward(&spec, &permuted, &batch).unwrap();
            let max_dev = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0f32, f32::max);
            assert!(max_dev < 1e-5, "deviation {max_dev}");
        }
    }

    #[test]
    fn permutation_then_inverse_restores_bitwise() {
        let spec = ModelSpec::res_mlp(2, 3, 7, &[5]);
        let params = random_params(&spec, 21);
        let layout = spec.layout();
        let perm = PermutationSet::random(&layout, 22);
        let there = apply_permutation(&params, &perm).unwrap();
        let back = apply_permutation(&there, &perm.inverse()).unwrap();
        assert_eq!(params.values(), back.values());
    }

    #[test]
    fn corrupted_permutation_rejected() {
        let spec = ModelSpec::plain_mlp(2, 2, &[4]);
        let layout = spec.layout();
        assert!(PermutationSet::new(&layout, vec![vec![0, 0, 1, 2]]).is_err());
        assert!(PermutationSet::new(&layout, vec![vec![0, 1, 2]]).is_err());
    }

    #[test]
    fn interpolate_endpoints_and_symmetry() {
        let spec = ModelSpec::plain_mlp(2, 2, &[3]);
        let a = random_params(&spec, 31);
        let mut b = a.clone();
        for v in b.values_mut() {
            *v = -*v;
        }
        let first = interpolate(&[&a, &b], &[1.0, 0.0]).unwrap();
        assert_eq!(first.values(), a.values());
        let mid = interpolate(&[&a, &b], &[0.5, 0.5]).unwrap();
        assert!(mid.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn interpolate_matches_elementwise_oracle() {
        let spec = ModelSpec::plain_mlp(2, 2, &[3]);
        let vs: Vec<ParamVector> = (0..3).map(|i| random_params(&spec, 40 + i)).collect();
        let w = [0.2f64, 0.5, 0.3];
        let out = interpolate(&[&vs[0], &vs[1], &vs[2]], &w).unwrap();
        for i in 0..out.len() {
            let expect: f64 = (0..3).map(|j| w[j] * vs[j].values()[i] as f64).sum();
            assert!((out.values()[i] as f64 - expect).abs() < 1e-7);
        }
    }

    #[test]
    fn interpolate_rejects_bad_weights_and_specs() {
        let spec = ModelSpec::plain_mlp(2, 2, &[3]);
        let a = random_params(&spec, 50);
        assert!(interpolate(&[&a, &a], &[0.7, 0.7]).is_err());
        let other = random_params(&ModelSpec::plain_mlp(2, 2, &[4]), 51);
        assert!(matches!(
            interpolate(&[&a, &other], &[0.5, 0.5]),
            Err(Error::Spec(_))
        ));
    }

    #[test]
    fn init_is_deterministic_and_in_bounds() {
        let spec = ModelSpec::plain_mlp(4, 3, &[8]);
        let a = init_params(&spec, 9).unwrap();
        let b = init_params(&spec, 9).unwrap();
        assert_eq!(a.values(), b.values());
        let layout = spec.layout();
        let w = layout.tensor_named("layer0.weight").unwrap();
        let bound = (6.0f64 / (4.0 + 8.0)).sqrt() as f32;
        assert!(a.tensor(w).1.iter().all(|v| v.abs() <= bound));
        let gain = layout.tensor_named("layer0.ln_gain").unwrap();
        assert!(a.tensor(gain).1.iter().all(|&v| v == 1.0));
    }
}
