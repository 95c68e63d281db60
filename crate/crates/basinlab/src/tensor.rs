//! Dense row-major tensors and the forward kernels shared by training,
//! inference, and metric evaluation.
//!
//! Tensors are immutable values after creation. Kernels accumulate in f64
//! regardless of the storage type, which keeps reductions stable and makes
//! results insensitive to summation order at f32 storage precision (this is
//! what lets permuted networks reproduce logits to well below 1e-5).

use crate::error::{Error, Result};

/// Storage precision of a tensor, as encoded in checkpoint files.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            other => Err(Error::Format(format!("unknown dtype code {other}"))),
        }
    }
}

/// Element type usable in tensors: f32 for training, f64 for oracles.
pub trait Scalar: Copy + PartialOrd + std::fmt::Debug + Send + Sync + 'static {
    const DTYPE: Dtype;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn is_finite_value(self) -> bool;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn is_finite_value(self) -> bool {
        self.is_finite()
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn is_finite_value(self) -> bool {
        self.is_finite()
    }
}

/// Dense row-major tensor. The data length always equals the product of the
/// dims; a rank-0 tensor holds exactly one value.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(v: T) -> Self {
        Tensor { shape: vec![], data: vec![v] }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![T::from_f64(0.0); numel] }
    }

    /// Build a `rows x cols` matrix from nested slices (test convenience).
    pub fn from_rows(rows: &[&[T]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            data.extend_from_slice(row);
        }
        Tensor::new(vec![r, c], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// The single value of a rank-0 or one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(Error::Usage(format!(
                "item() on tensor with {} elements",
                self.numel()
            )));
        }
        Ok(self.data[0])
    }

    /// (rows, cols) of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::Dimension(format!("expected rank 2, got {other:?}"))),
        }
    }

    pub fn at2(&self, i: usize, j: usize) -> T {
        let cols = self.shape[1];
        self.data[i * cols + j]
    }

    pub fn row(&self, i: usize) -> &[T] {
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    /// Error if any element is NaN/Inf; `what` names the producing operation.
    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite_value()) {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }
}

fn from_f64_vec<T: Scalar>(shape: Vec<usize>, data: Vec<f64>) -> Tensor<T> {
    Tensor {
        shape,
        data: data.into_iter().map(T::from_f64).collect(),
    }
}

// ---- forward kernels -------------------------------------------------------
//
// Slice-level kernels below are the single implementation used by both the
// autodiff graph and plain inference, so the two paths agree bitwise.

/// `a [m x k] . b [k x n] -> [m x n]`, f64 accumulation.
pub fn matmul_slices(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn widen<T: Scalar>(x: &[T]) -> Vec<f64> {
    x.iter().map(|v| v.to_f64()).collect()
}

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, ka) = a.dims2()?;
    let (kb, n) = b.dims2()?;
    if ka != kb {
        return Err(Error::Dimension(format!(
            "matmul inner dims differ: {m}x{ka} . {kb}x{n}"
        )));
    }
    let out = matmul_slices(&widen(a.data()), &widen(b.data()), m, ka, n);
    Ok(from_f64_vec(vec![m, n], out))
}

pub fn transpose2<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = a.dims2()?;
    let mut data = Vec::with_capacity(r * c);
    for j in 0..c {
        for i in 0..r {
            data.push(a.data()[i * c + j]);
        }
    }
    Tensor::new(vec![c, r], data)
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "add shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| x.to_f64() + y.to_f64())
        .collect();
    Ok(from_f64_vec(a.shape().to_vec(), data))
}

/// `[n x k] + [k]`: broadcast a bias row over every matrix row.
pub fn add_bias<T: Scalar>(a: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, k) = a.dims2()?;
    if bias.shape() != [k] {
        return Err(Error::Dimension(format!(
            "bias shape {:?} does not match row width {k}",
            bias.shape()
        )));
    }
    let mut data = Vec::with_capacity(n * k);
    for i in 0..n {
        for j in 0..k {
            data.push(a.data()[i * k + j].to_f64() + bias.data()[j].to_f64());
        }
    }
    Ok(from_f64_vec(vec![n, k], data))
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "mul shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| x.to_f64() * y.to_f64())
        .collect();
    Ok(from_f64_vec(a.shape().to_vec(), data))
}

pub fn scale<T: Scalar>(a: &Tensor<T>, c: f64) -> Tensor<T> {
    let data = a.data().iter().map(|x| x.to_f64() * c).collect();
    from_f64_vec(a.shape().to_vec(), data)
}

pub fn relu<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let data = a
        .data()
        .iter()
        .map(|x| {
            let v = x.to_f64();
            if v > 0.0 {
                v
            } else {
                0.0
            }
        })
        .collect();
    from_f64_vec(a.shape().to_vec(), data)
}

/// Rows of the last axis of a rank >= 1 tensor, as (row_count, width).
fn last_axis_rows<T: Scalar>(a: &Tensor<T>) -> Result<(usize, usize)> {
    let width = *a
        .shape()
        .last()
        .ok_or_else(|| Error::Dimension("rank-0 tensor has no last axis".into()))?;
    if width == 0 {
        return Err(Error::Dimension("empty last axis".into()));
    }
    Ok((a.numel() / width, width))
}

/// Normalize each last-axis row to mean 0 / variance 1 (epsilon-regularized),
/// then apply the learnable gain and bias.
pub fn layer_norm<T: Scalar>(
    a: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let (rows, width) = last_axis_rows(a)?;
    if gain.shape() != [width] || bias.shape() != [width] {
        return Err(Error::Dimension(format!(
            "layer_norm gain/bias must be [{width}], got {:?}/{:?}",
            gain.shape(),
            bias.shape()
        )));
    }
    let mut data = Vec::with_capacity(a.numel());
    for r in 0..rows {
        let row = &a.data()[r * width..(r + 1) * width];
        let (mean, inv_std) = row_moments(row, eps);
        for (j, v) in row.iter().enumerate() {
            let xhat = (v.to_f64() - mean) * inv_std;
            data.push(gain.data()[j].to_f64() * xhat + bias.data()[j].to_f64());
        }
    }
    Ok(from_f64_vec(a.shape().to_vec(), data))
}

/// Mean and 1/sqrt(var + eps) of one row (population variance).
pub(crate) fn row_moments<T: Scalar>(row: &[T], eps: f64) -> (f64, f64) {
    let width = row.len() as f64;
    let mean = row.iter().map(|v| v.to_f64()).sum::<f64>() / width;
    let var = row
        .iter()
        .map(|v| {
            let d = v.to_f64() - mean;
            d * d
        })
        .sum::<f64>()
        / width;
    (mean, 1.0 / (var + eps).sqrt())
}

/// Row-wise softmax over the last axis, max-subtracted for overflow safety.
pub fn softmax<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (rows, width) = last_axis_rows(a)?;
    let mut data = Vec::with_capacity(a.numel());
    for r in 0..rows {
        let row = &a.data()[r * width..(r + 1) * width];
        let max = row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v.to_f64() - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        data.extend(exps.into_iter().map(|e| e / sum));
    }
    Ok(from_f64_vec(a.shape().to_vec(), data))
}

/// Row-wise log-softmax, computed stably as `x - max - ln(sum(exp(x - max)))`.
pub fn log_softmax<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (rows, width) = last_axis_rows(a)?;
    let mut data = Vec::with_capacity(a.numel());
    for r in 0..rows {
        let row = &a.data()[r * width..(r + 1) * width];
        let max = row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
        let log_sum = row
            .iter()
            .map(|v| (v.to_f64() - max).exp())
            .sum::<f64>()
            .ln();
        data.extend(row.iter().map(|v| v.to_f64() - max - log_sum));
    }
    Ok(from_f64_vec(a.shape().to_vec(), data))
}

/// Mean negative log-likelihood of integer labels under `logits [n x K]`.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    let (n, k) = logits.dims2()?;
    if labels.len() != n {
        return Err(Error::Dimension(format!(
            "{n} logit rows but {} labels",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Domain(format!("label {bad} out of range 0..{k}")));
    }
    let log_probs = log_softmax(logits)?;
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        total -= log_probs.at2(i, y).to_f64();
    }
    Ok(total / n as f64)
}

const PROB_ROW_SUM_TOL: f64 = 1e-6;

fn check_prob_rows<T: Scalar>(t: &Tensor<T>, name: &str) -> Result<()> {
    let (rows, width) = last_axis_rows(t)?;
    for r in 0..rows {
        let row = &t.data()[r * width..(r + 1) * width];
        if row.iter().any(|v| v.to_f64() < 0.0) {
            return Err(Error::Domain(format!("{name} row {r} has negative entries")));
        }
        let sum: f64 = row.iter().map(|v| v.to_f64()).sum();
        if (sum - 1.0).abs() > PROB_ROW_SUM_TOL {
            return Err(Error::Domain(format!(
                "{name} row {r} sums to {sum}, not 1"
            )));
        }
    }
    Ok(())
}

/// Mean over rows of `KL(p || q) = sum_k p_k ln(p_k / q_k)`, with the
/// `0 ln 0 = 0` convention. Rows must be probability vectors.
pub fn kl_divergence<T: Scalar>(p: &Tensor<T>, q: &Tensor<T>) -> Result<f64> {
    if p.shape() != q.shape() {
        return Err(Error::Dimension(format!(
            "kl shapes differ: {:?} vs {:?}",
            p.shape(),
            q.shape()
        )));
    }
    check_prob_rows(p, "p")?;
    check_prob_rows(q, "q")?;
    let (rows, width) = last_axis_rows(p)?;
    let mut total = 0.0;
    for r in 0..rows {
        for j in 0..width {
            let pv = p.data()[r * width + j].to_f64();
            let qv = q.data()[r * width + j].to_f64();
            if pv > 0.0 {
                if qv <= 0.0 {
                    return Err(Error::Domain(format!(
                        "q is zero at ({r},{j}) where p > 0"
                    )));
                }
                total += pv * (pv / qv).ln();
            }
        }
    }
    Ok(total / rows as f64)
}

pub fn sum_all<T: Scalar>(a: &Tensor<T>) -> f64 {
    a.data().iter().map(|v| v.to_f64()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn matmul_identity() {
        let eye = Tensor::from_rows(&[&[1.0f64, 0.0], &[0.0, 1.0]]).unwrap();
        let m = Tensor::from_rows(&[&[1.0f64, 2.0], &[3.0, 4.0]]).unwrap();
        assert_eq!(matmul(&eye, &m).unwrap(), m);
    }

    #[test]
    fn matmul_unit_vector_pick() {
        let a = Tensor::from_rows(&[&[1.0f64, 0.0]]).unwrap();
        let b = Tensor::from_rows(&[&[2.0f64], &[5.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[2.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = crate::rng::rng_from(11);
        let a_data: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b_data: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a = Tensor::new(vec![3, 4], a_data.clone()).unwrap();
        let b = Tensor::new(vec![4, 2], b_data.clone()).unwrap();
        let c = matmul(&a, &b).unwrap();
        // naive triple loop, independent of the kernel's loop order
        for i in 0..3 {
            for j in 0..2 {
                let mut expect = 0.0;
                for k in 0..4 {
                    expect += a_data[i * 4 + k] * b_data[k * 2 + j];
                }
                assert!((c.at2(i, j) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let a = Tensor::<f64>::zeros(vec![2, 3]);
        let b = Tensor::<f64>::zeros(vec![2, 3]);
        assert!(matches!(matmul(&a, &b), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_symmetry_and_sum() {
        let t = Tensor::from_rows(&[&[0.0f64, 0.0]]).unwrap();
        let s = softmax(&t).unwrap();
        assert!((s.at2(0, 0) - 0.5).abs() < 1e-15);
        assert!((s.at2(0, 1) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn softmax_is_stable_at_huge_logits() {
        let t = Tensor::from_rows(&[&[1000.0f64, 0.0]]).unwrap();
        let s = softmax(&t).unwrap();
        s.check_finite("softmax").unwrap();
        assert!((s.at2(0, 0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn relu_clamps() {
        let t = Tensor::new(vec![2], vec![-1.0f64, 2.0]).unwrap();
        assert_eq!(relu(&t).data(), &[0.0, 2.0]);
    }

    #[test]
    fn layer_norm_closed_form() {
        // [1, 3]: mean 2, var 1 -> normalized [-1, 1] up to the epsilon correction
        let t = Tensor::from_rows(&[&[1.0f64, 3.0]]).unwrap();
        let gain = Tensor::new(vec![2], vec![1.0f64, 1.0]).unwrap();
        let bias = Tensor::new(vec![2], vec![0.0f64, 0.0]).unwrap();
        let eps = 1e-5;
        let out = layer_norm(&t, &gain, &bias, eps).unwrap();
        let expect = 1.0 / (1.0f64 + eps).sqrt();
        assert!((out.at2(0, 0) + expect).abs() < 1e-12);
        assert!((out.at2(0, 1) - expect).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_rejects_empty_axis() {
        let t = Tensor::<f64>::zeros(vec![2, 0]);
        let g = Tensor::<f64>::zeros(vec![0]);
        assert!(layer_norm(&t, &g, &g, 1e-5).is_err());
    }

    #[test]
    fn cross_entropy_saturated_and_analytic() {
        let t = Tensor::from_rows(&[&[1000.0f64, 0.0]]).unwrap();
        assert!(cross_entropy(&t, &[0]).unwrap().abs() < 1e-12);
        let t = Tensor::from_rows(&[&[0.0f64, 0.0]]).unwrap();
        assert!((cross_entropy(&t, &[1]).unwrap() - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_matches_by_hand_oracle() {
        let mut rng = crate::rng::rng_from(3);
        let data: Vec<f64> = (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let logits = Tensor::new(vec![4, 3], data.clone()).unwrap();
        let labels = [2usize, 0, 1, 1];
        // oracle: softmax each row by hand, then -log of the label entry
        let mut expect = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = &data[i * 3..(i + 1) * 3];
            let denom: f64 = row.iter().map(|v| v.exp()).sum();
            expect -= (row[y].exp() / denom).ln();
        }
        expect /= 4.0;
        assert!((cross_entropy(&logits, &labels).unwrap() - expect).abs() < 1e-10);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let t = Tensor::<f64>::zeros(vec![1, 2]);
        assert!(matches!(cross_entropy(&t, &[2]), Err(Error::Domain(_))));
    }

    #[test]
    fn kl_identity_and_analytic() {
        let p = Tensor::from_rows(&[&[0.3f64, 0.7]]).unwrap();
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        let p = Tensor::from_rows(&[&[1.0f64, 0.0]]).unwrap();
        let q = Tensor::from_rows(&[&[0.5f64, 0.5]]).unwrap();
        assert!((kl_divergence(&p, &q).unwrap() - 2.0f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn kl_matches_elementwise_oracle() {
        let p = Tensor::from_rows(&[&[0.2f64, 0.5, 0.3], &[0.6, 0.1, 0.3]]).unwrap();
        let q = Tensor::from_rows(&[&[0.4f64, 0.4, 0.2], &[0.2, 0.5, 0.3]]).unwrap();
        let mut expect = 0.0;
        for (pv, qv) in p.data().iter().zip(q.data()) {
            expect += pv * (pv / qv).ln();
        }
        expect /= 2.0;
        assert!((kl_divergence(&p, &q).unwrap() - expect).abs() < 1e-10);
    }

    #[test]
    fn kl_rejects_zero_q_under_mass() {
        let p = Tensor::from_rows(&[&[1.0f64, 0.0]]).unwrap();
        let q = Tensor::from_rows(&[&[0.0f64, 1.0]]).unwrap();
        assert!(matches!(kl_divergence(&p, &q), Err(Error::Domain(_))));
    }

    #[test]
    fn kl_rejects_non_probability_rows() {
        let p = Tensor::from_rows(&[&[0.9f64, 0.3]]).unwrap();
        let q = Tensor::from_rows(&[&[0.5f64, 0.5]]).unwrap();
        assert!(matches!(kl_divergence(&p, &q), Err(Error::Domain(_))));
    }

    #[test]
    fn log_softmax_agrees_with_log_of_softmax() {
        let mut rng = crate::rng::rng_from(5);
        let data: Vec<f64> = (0..20).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let t = Tensor::new(vec![4, 5], data).unwrap();
        let ls = log_softmax(&t).unwrap();
        let s = softmax(&t).unwrap();
        for (a, b) in ls.data().iter().zip(s.data()) {
            assert!((a - b.ln()).abs() < 1e-6);
        }
    }

    #[test]
    fn finite_check_flags_overflow() {
        let t = Tensor::new(vec![1], vec![f32::INFINITY]).unwrap();
        assert!(matches!(
            t.check_finite("test"),
            Err(Error::NonFinite(_))
        ));
    }
}
