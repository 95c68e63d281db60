//! Connectivity and diversity measurement: pairwise interpolation curves,
//! joint connectivity under Dirichlet-weighted convex combinations, 2D
//! loss-plane grids, predictive variance, and one-vs-all Jensen-Shannon
//! divergence.
//!
//! Accuracies are reported in percentage points; all metric reductions run
//! in f64 with a fixed index order, so reported numbers are reproducible.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::ensemble::EnsembleBundle;
use crate::error::{Error, Result};
use crate::models::{self, ModelSpec, ParamVector};
use crate::rng;
use crate::tensor::Tensor;

/// Accuracy (in [0, 1]) of one parameter vector on an evaluation set.
fn accuracy(spec: &ModelSpec, params: &ParamVector, eval_set: &Dataset) -> Result<f64> {
    Ok(models::evaluate(spec, params, eval_set.inputs(), eval_set.labels())?.accuracy)
}

/// Accuracy along the straight line between two members, minus the linear
/// interpolation of their endpoint accuracies, per grid point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairCurve {
    pub member_i: usize,
    pub member_j: usize,
    pub lambdas: Vec<f64>,
    /// Accuracy at each lambda, percentage points.
    pub accuracy: Vec<f64>,
    /// `Acc(interp) - lerp(Acc_i, Acc_j)`, percentage points; exactly zero
    /// at both endpoints.
    pub q_pair: Vec<f64>,
}

/// Evenly spaced interpolation grid over [0, 1] including both endpoints.
pub fn lambda_grid(points: usize) -> Vec<f64> {
    assert!(points >= 2, "grid needs both endpoints");
    (0..points)
        .map(|i| i as f64 / (points - 1) as f64)
        .collect()
}

/// `q_pair(lambda) = Acc(lambda a + (1-lambda) b) - (lambda Acc(a) + (1-lambda) Acc(b))`.
pub fn q_pair_curve(
    params_i: &ParamVector,
    params_j: &ParamVector,
    lambdas: &[f64],
    eval_set: &Dataset,
    pair_ids: (usize, usize),
) -> Result<PairCurve> {
    if params_i.spec() != params_j.spec() {
        return Err(Error::Usage("pair curve requires a shared model spec".into()));
    }
    if !lambdas.contains(&0.0) || !lambdas.contains(&1.0) {
        return Err(Error::Usage("lambda grid must include 0 and 1".into()));
    }
    let spec = params_i.spec();
    let acc_i = accuracy(spec, params_i, eval_set)?;
    let acc_j = accuracy(spec, params_j, eval_set)?;
    let mut accs = Vec::with_capacity(lambdas.len());
    let mut q = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let interp = models::interpolate(&[params_i, params_j], &[lambda, 1.0 - lambda])?;
        let acc = accuracy(spec, &interp, eval_set)?;
        accs.push(acc * 100.0);
        q.push((acc - (lambda * acc_i + (1.0 - lambda) * acc_j)) * 100.0);
    }
    Ok(PairCurve {
        member_i: pair_ids.0,
        member_j: pair_ids.1,
        lambdas: lambdas.to_vec(),
        accuracy: accs,
        q_pair: q,
    })
}

/// Joint connectivity under random convex combinations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JointConnectivityReport {
    pub samples: usize,
    pub seed: u64,
    /// Dirichlet(1) weight vectors, one per sample.
    pub weights: Vec<Vec<f64>>,
    /// `q_joint` per sample, percentage points.
    pub q_joint: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    /// Which split the accuracies were computed on.
    pub eval_split: String,
}

/// One Dirichlet(1, ..., 1) draw via normalized unit-rate exponentials.
pub fn dirichlet_weights<R: Rng>(dims: usize, rng: &mut R) -> Vec<f64> {
    let exps: Vec<f64> = (0..dims)
        .map(|_| {
            let u: f64 = 1.0 - rng.gen::<f64>(); // (0, 1]
            -u.ln()
        })
        .collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `q_joint(w) = Acc(sum w_i theta_i) - sum w_i Acc(theta_i)` averaged over
/// `samples` Dirichlet(1) draws.
pub fn q_joint_report(
    bundle: &EnsembleBundle,
    samples: usize,
    seed: u64,
    eval_set: &Dataset,
) -> Result<JointConnectivityReport> {
    if samples == 0 {
        return Err(Error::Usage("need at least one sample".into()));
    }
    if bundle.len() < 2 {
        return Err(Error::Usage("joint connectivity needs at least 2 members".into()));
    }
    let spec = bundle.spec();
    let members = bundle.member_params();
    let member_accs: Vec<f64> = members
        .iter()
        .map(|p| accuracy(spec, p, eval_set))
        .collect::<Result<_>>()?;
    let mut rng = rng::rng_from(rng::mix(seed, rng::tag::DIRICHLET));
    let mut weights = Vec::with_capacity(samples);
    let mut q_joint = Vec::with_capacity(samples);
    for _ in 0..samples {
        let w = dirichlet_weights(members.len(), &mut rng);
        let combined = models::interpolate(&members, &w)?;
        let acc = accuracy(spec, &combined, eval_set)?;
        // anchored form of sum(w_i * acc_i): exact when all accuracies agree
        let baseline: f64 = member_accs[0]
            + w.iter()
                .zip(&member_accs)
                .map(|(wi, ai)| wi * (ai - member_accs[0]))
                .sum::<f64>();
        q_joint.push((acc - baseline) * 100.0);
        weights.push(w);
    }
    let mean = q_joint.iter().sum::<f64>() / samples as f64;
    let std = if samples > 1 {
        (q_joint.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (samples - 1) as f64)
            .sqrt()
    } else {
        0.0
    };
    Ok(JointConnectivityReport {
        samples,
        seed,
        weights,
        q_joint,
        mean,
        std,
        eval_split: format!("{:?}", eval_set.split()).to_lowercase(),
    })
}

/// Loss/accuracy over the 2D parameter plane spanned by three checkpoints.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlaneGrid {
    /// Plane coordinates of the three anchors.
    pub anchors: [PlanePoint; 3],
    pub resolution: usize,
    pub margin: f64,
    pub cells: Vec<PlanePoint>,
    /// Orthonormality residuals of the basis, for the record.
    pub basis_dot: f64,
    pub basis_norms: [f64; 2],
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PlanePoint {
    pub alpha: f64,
    pub beta: f64,
    pub loss: f64,
    /// Accuracy in percentage points.
    pub acc: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Construct the plane through three anchors: `u = theta2 - theta1` and the
/// component of `theta3 - theta1` orthogonal to it, both normalized in f64.
/// The grid covers the anchors' bounding box plus a relative margin, and the
/// anchor metrics are computed through the same reconstruction path as every
/// grid cell.
pub fn plane_grid(
    theta1: &ParamVector,
    theta2: &ParamVector,
    theta3: &ParamVector,
    resolution: usize,
    margin: f64,
    eval_set: &Dataset,
) -> Result<PlaneGrid> {
    if theta1.spec() != theta2.spec() || theta1.spec() != theta3.spec() {
        return Err(Error::Usage("plane anchors must share one model spec".into()));
    }
    if resolution < 2 {
        return Err(Error::Usage("resolution must be at least 2".into()));
    }
    let spec = theta1.spec();
    let base: Vec<f64> = theta1.values().iter().map(|&v| v as f64).collect();
    let u_raw: Vec<f64> = theta2
        .values()
        .iter()
        .zip(theta1.values())
        .map(|(a, b)| (*a as f64) - (*b as f64))
        .collect();
    let w_raw: Vec<f64> = theta3
        .values()
        .iter()
        .zip(theta1.values())
        .map(|(a, b)| (*a as f64) - (*b as f64))
        .collect();
    let u_norm = dot(&u_raw, &u_raw).sqrt();
    if u_norm == 0.0 {
        return Err(Error::Degenerate("first two anchors coincide".into()));
    }
    let u_hat: Vec<f64> = u_raw.iter().map(|v| v / u_norm).collect();
    let proj = dot(&w_raw, &u_hat);
    let v_raw: Vec<f64> = w_raw
        .iter()
        .zip(&u_hat)
        .map(|(w, u)| w - proj * u)
        .collect();
    let v_norm = dot(&v_raw, &v_raw).sqrt();
    let w_norm = dot(&w_raw, &w_raw).sqrt();
    if v_norm < 1e-9 * w_norm.max(1e-30) {
        return Err(Error::Degenerate(
            "third anchor is colinear with the first two".into(),
        ));
    }
    let v_hat: Vec<f64> = v_raw.iter().map(|v| v / v_norm).collect();

    // anchor coordinates in the (u_hat, v_hat) frame
    let coords = [(0.0, 0.0), (u_norm, 0.0), (proj, v_norm)];

    let evaluate_at = |alpha: f64, beta: f64| -> Result<PlanePoint> {
        let values: Vec<f32> = base
            .iter()
            .zip(&u_hat)
            .zip(&v_hat)
            .map(|((b, u), v)| (b + alpha * u + beta * v) as f32)
            .collect();
        let params = ParamVector::new(spec.clone(), values)?;
        let eval = models::evaluate(spec, &params, eval_set.inputs(), eval_set.labels())?;
        Ok(PlanePoint {
            alpha,
            beta,
            loss: eval.mean_nll,
            acc: eval.accuracy * 100.0,
        })
    };

    let anchors = [
        evaluate_at(coords[0].0, coords[0].1)?,
        evaluate_at(coords[1].0, coords[1].1)?,
        evaluate_at(coords[2].0, coords[2].1)?,
    ];

    let (mut alpha_min, mut alpha_max) = (0.0f64, 0.0f64);
    let (mut beta_min, mut beta_max) = (0.0f64, 0.0f64);
    for (a, b) in coords {
        alpha_min = alpha_min.min(a);
        alpha_max = alpha_max.max(a);
        beta_min = beta_min.min(b);
        beta_max = beta_max.max(b);
    }
    let alpha_pad = margin * (alpha_max - alpha_min);
    let beta_pad = margin * (beta_max - beta_min).max(1e-12);
    alpha_min -= alpha_pad;
    alpha_max += alpha_pad;
    beta_min -= beta_pad;
    beta_max += beta_pad;

    let mut cells = Vec::with_capacity(resolution * resolution);
    for row in 0..resolution {
        let beta = beta_min + (beta_max - beta_min) * row as f64 / (resolution - 1) as f64;
        for col in 0..resolution {
            let alpha =
                alpha_min + (alpha_max - alpha_min) * col as f64 / (resolution - 1) as f64;
            cells.push(evaluate_at(alpha, beta)?);
        }
    }

    Ok(PlaneGrid {
        anchors,
        resolution,
        margin,
        cells,
        basis_dot: dot(&u_hat, &v_hat),
        basis_norms: [dot(&u_hat, &u_hat).sqrt(), dot(&v_hat, &v_hat).sqrt()],
    })
}

/// Serialize a plane grid as CSV rows `alpha,beta,loss,acc`.
pub fn plane_to_csv(grid: &PlaneGrid) -> String {
    let mut out = String::from("alpha,beta,loss,acc\n");
    for cell in &grid.cells {
        out.push_str(&format!(
            "{:.8},{:.8},{:.8},{:.5}\n",
            cell.alpha, cell.beta, cell.loss, cell.acc
        ));
    }
    out
}

/// Diversity metrics over an ensemble's predictive distributions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiversityReport {
    /// Mean (over examples) unbiased variance (over members) of the
    /// true-class probability.
    pub predictive_variance: f64,
    /// Mean one-vs-all Jensen-Shannon divergence, natural log.
    pub one_vs_all_jsd: f64,
    pub member_accuracies: Vec<f64>,
    pub eval_split: String,
    /// Which JSD weighting this report uses (mean over members of the
    /// member-vs-rest divergence with a 50/50 mixture).
    pub jsd_variant: String,
}

fn member_probabilities(
    bundle: &EnsembleBundle,
    eval_set: &Dataset,
) -> Result<Vec<Tensor<f64>>> {
    let spec = bundle.spec();
    bundle
        .members
        .iter()
        .map(|m| models::class_probabilities(spec, &m.params, eval_set.inputs()))
        .collect()
}

/// Unbiased sample variance (divisor M-1) over members of the true-class
/// probability, averaged over the evaluation set.
pub fn predictive_variance(bundle: &EnsembleBundle, eval_set: &Dataset) -> Result<f64> {
    if bundle.len() < 2 {
        return Err(Error::Usage("variance needs at least 2 members".into()));
    }
    let probs = member_probabilities(bundle, eval_set)?;
    let m = probs.len() as f64;
    let mut total = 0.0;
    for (i, &y) in eval_set.labels().iter().enumerate() {
        let vals: Vec<f64> = probs.iter().map(|p| p.at2(i, y)).collect();
        let mean = vals.iter().sum::<f64>() / m;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1.0);
        total += var;
    }
    Ok(total / eval_set.len() as f64)
}

fn kl_rows(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(pk, qk)| if *pk > 0.0 { pk * (pk / qk).ln() } else { 0.0 })
        .sum()
}

/// For each example and member i, the Jensen-Shannon divergence between the
/// member's distribution and the mean of the remaining members', averaged
/// over members and examples. Bounded by ln 2.
pub fn one_vs_all_jsd(bundle: &EnsembleBundle, eval_set: &Dataset) -> Result<f64> {
    let m = bundle.len();
    if m < 2 {
        return Err(Error::Usage("one-vs-all JSD needs at least 2 members".into()));
    }
    let probs = member_probabilities(bundle, eval_set)?;
    let k = bundle.spec().num_classes();
    let n = eval_set.len();
    let mut total = 0.0;
    let mut sum_row = vec![0.0f64; k];
    let mut rest = vec![0.0f64; k];
    let mut mid = vec![0.0f64; k];
    for i in 0..n {
        sum_row.fill(0.0);
        for p in &probs {
            for (s, v) in sum_row.iter_mut().zip(p.row(i)) {
                *s += v;
            }
        }
        for member in &probs {
            let row = member.row(i);
            for j in 0..k {
                rest[j] = (sum_row[j] - row[j]) / (m as f64 - 1.0);
                mid[j] = 0.5 * (row[j] + rest[j]);
            }
            total += 0.5 * kl_rows(row, &mid) + 0.5 * kl_rows(&rest, &mid);
        }
    }
    Ok(total / (n * m) as f64)
}

pub fn diversity_report(bundle: &EnsembleBundle, eval_set: &Dataset) -> Result<DiversityReport> {
    let spec = bundle.spec();
    let member_accuracies = bundle
        .members
        .iter()
        .map(|m| {
            accuracy(spec, &m.params, eval_set).map(|a| a * 100.0)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DiversityReport {
        predictive_variance: predictive_variance(bundle, eval_set)?,
        one_vs_all_jsd: one_vs_all_jsd(bundle, eval_set)?,
        member_accuracies,
        eval_split: format!("{:?}", eval_set.split()).to_lowercase(),
        jsd_variant: "per-member vs mean-of-rest, equal-weight mixture, natural log".into(),
    })
}

/// Spearman rank correlation between two equal-length sequences; ties get
/// averaged ranks.
pub fn spearman_rho(xs: &[f64], ys: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
        let mut out = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let rank = (i + j) as f64 / 2.0 + 1.0;
            for &slot in &idx[i..=j] {
                out[slot] = rank;
            }
            i = j + 1;
        }
        out
    }
    let rx = ranks(xs);
    let ry = ranks(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sx: f64 = rx.iter().map(|a| (a - mx) * (a - mx)).sum::<f64>().sqrt();
    let sy: f64 = ry.iter().map(|b| (b - my) * (b - my)).sum::<f64>().sqrt();
    cov / (sx * sy)
}
