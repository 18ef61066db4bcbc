//! Deterministic numerical kernels: softmax, sparsemax and its
//! vector-Jacobian product, cosine similarity, scaled dot-product attention,
//! and a central finite-difference gradient estimator used as a test oracle.
//!
//! Everything here is a pure function over `f64` slices and [`Matrix`]
//! values. There is no broadcasting, no GPU path, and no interior
//! mutability; values are safe to share across threads once built.

use crate::error::{MadtpError, Result};
use serde::{Deserialize, Serialize};

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(MadtpError::invalid(format!(
                "matrix {}x{} needs {} entries, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(MadtpError::invalid("matrix entries must be finite"));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    /// Builds from per-row slices; all rows must share one length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(MadtpError::invalid("from_rows: no rows"));
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(MadtpError::invalid("from_rows: ragged rows"));
        }
        Matrix::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self * other`, erroring on an inner-dimension mismatch.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(MadtpError::invalid(format!(
                "matmul: {}x{} * {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[r * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let orow = &other.data[k * other.cols..(k + 1) * other.cols];
                let dst = &mut out.data[r * other.cols..(r + 1) * other.cols];
                for (d, &b) in dst.iter_mut().zip(orow) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    /// Adds a bias row to every row of `self`.
    pub fn add_row(&self, bias: &[f64]) -> Result<Matrix> {
        if bias.len() != self.cols {
            return Err(MadtpError::invalid("add_row: bias width mismatch"));
        }
        let mut out = self.clone();
        for r in 0..out.rows {
            for (v, b) in out.row_mut(r).iter_mut().zip(bias) {
                *v += b;
            }
        }
        Ok(out)
    }

    /// Elementwise sum; shapes must match.
    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(MadtpError::invalid("add: shape mismatch"));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Matrix::new(self.rows, self.cols, data)
    }

    /// Keeps the listed rows, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Matrix> {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            if i >= self.rows {
                return Err(MadtpError::invalid(format!("select_rows: row {i} out of range")));
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Matrix { rows: indices.len(), cols: self.cols, data })
    }

    pub fn push_row(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.cols {
            return Err(MadtpError::invalid("push_row: width mismatch"));
        }
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// A point on the probability simplex: non-negative weights summing to 1
/// within 1e-9. Construction validates the invariant.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution(Vec<f64>);

impl Distribution {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(MadtpError::invalid("distribution: empty weight vector"));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(MadtpError::invalid("distribution: weights must be finite and >= 0"));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(MadtpError::invalid(format!("distribution: sum {sum} not within 1e-9 of 1")));
        }
        Ok(Distribution(weights))
    }

    pub fn weights(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// Max-subtracted exponential normalization of a finite, nonempty vector.
/// Shift-invariant: adding a constant to every entry leaves the result unchanged.
pub fn softmax(v: &[f64]) -> Result<Distribution> {
    if v.is_empty() {
        return Err(MadtpError::invalid("softmax: empty input"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(MadtpError::invalid("softmax: non-finite input"));
    }
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Distribution::new(exps.into_iter().map(|e| e / sum).collect())
}

/// Euclidean projection of `v` onto the probability simplex via the
/// sort-threshold algorithm. Coordinates at or below the computed tau come
/// out exactly zero, so the result is typically sparse.
///
/// Support rule: after sorting z descending, index k (1-based) is inside the
/// support iff `1 + k*z_k > sum_{j<=k} z_j`. No extra tie-breaking is applied.
pub fn sparsemax(v: &[f64]) -> Result<Distribution> {
    if v.is_empty() {
        return Err(MadtpError::invalid("sparsemax: empty input"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(MadtpError::invalid("sparsemax: non-finite input"));
    }
    // Shift by the max first; the projection is translation-invariant and
    // this keeps cumulative sums well-scaled.
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = v.iter().map(|x| x - max).collect();

    let mut sorted = shifted.clone();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("finite values"));

    let mut cumsum = 0.0;
    let mut support = 0usize;
    let mut support_cumsum = 0.0;
    for (i, &z) in sorted.iter().enumerate() {
        cumsum += z;
        let k = (i + 1) as f64;
        if 1.0 + k * z > cumsum {
            support = i + 1;
            support_cumsum = cumsum;
        }
    }
    let tau = (support_cumsum - 1.0) / support as f64;
    Distribution::new(shifted.iter().map(|&z| (z - tau).max(0.0)).collect())
}

/// Vector-Jacobian product of [`sparsemax`] at `v`.
///
/// On the support S the Jacobian is `I - 11^T/|S|`; off-support rows and
/// columns are zero. The product is therefore `u_i - mean_S(u)` on S and 0
/// elsewhere.
pub fn sparsemax_vjp(v: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
    if v.len() != upstream.len() {
        return Err(MadtpError::invalid(format!(
            "sparsemax_vjp: value length {} vs upstream length {}",
            v.len(),
            upstream.len()
        )));
    }
    let p = sparsemax(v)?;
    let support: Vec<usize> =
        p.weights().iter().enumerate().filter(|(_, &w)| w > 0.0).map(|(i, _)| i).collect();
    let mean: f64 = support.iter().map(|&i| upstream[i]).sum::<f64>() / support.len() as f64;
    let mut out = vec![0.0; v.len()];
    for &i in &support {
        out[i] = upstream[i] - mean;
    }
    Ok(out)
}

/// `a.b / (|a||b|)`, clamped into [-1, 1]. Zero-norm inputs are rejected.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(MadtpError::invalid("cosine_similarity: length mismatch"));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(MadtpError::degenerate("cosine_similarity: zero-norm vector"));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Scaled dot-product attention: `attn = row_softmax(Q K^T / scale)`,
/// `output = attn * V`. Every attention row is a valid [`Distribution`].
pub fn scaled_dot_attention(
    queries: &Matrix,
    keys: &Matrix,
    values: &Matrix,
    scale: f64,
) -> Result<(Matrix, Matrix)> {
    if scale <= 0.0 || !scale.is_finite() {
        return Err(MadtpError::invalid("scaled_dot_attention: scale must be positive"));
    }
    if queries.cols() != keys.cols() {
        return Err(MadtpError::invalid("scaled_dot_attention: query/key width mismatch"));
    }
    if keys.rows() != values.rows() {
        return Err(MadtpError::invalid("scaled_dot_attention: key/value count mismatch"));
    }
    let mut attn = Matrix::zeros(queries.rows(), keys.rows());
    for q in 0..queries.rows() {
        let qrow = queries.row(q);
        let mut logits = Vec::with_capacity(keys.rows());
        for k in 0..keys.rows() {
            let dot: f64 = qrow.iter().zip(keys.row(k)).map(|(a, b)| a * b).sum();
            logits.push(dot / scale);
        }
        let dist = softmax(&logits)?;
        attn.row_mut(q).copy_from_slice(dist.weights());
    }
    let output = attn.matmul(values)?;
    Ok((output, attn))
}

/// Central-difference gradient estimate of a scalar function at `x`.
pub fn finite_diff_grad<F>(f: F, x: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if eps <= 0.0 {
        return Err(MadtpError::invalid("finite_diff_grad: eps must be positive"));
    }
    let mut grad = Vec::with_capacity(x.len());
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let hi = f(&probe)?;
        probe[i] = x[i] - eps;
        let lo = f(&probe)?;
        probe[i] = x[i];
        grad.push((hi - lo) / (2.0 * eps));
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{x} vs {y} beyond {tol}");
        }
    }

    #[test]
    fn softmax_symmetry_and_singleton() {
        assert_close(softmax(&[0.0, 0.0]).unwrap().weights(), &[0.5, 0.5], 1e-15);
        assert_close(softmax(&[123.456]).unwrap().weights(), &[1.0], 0.0);
        assert_close(softmax(&[-1e8]).unwrap().weights(), &[1.0], 0.0);
    }

    #[test]
    fn softmax_matches_direct_exp_normalize() {
        // Direct evaluation without max-subtraction as the independent route.
        let v: [f64; 3] = [1.0, 2.0, 3.0];
        let exps: Vec<f64> = v.iter().map(|x| x.exp()).collect();
        let sum: f64 = exps.iter().sum();
        let expected: Vec<f64> = exps.iter().map(|e| e / sum).collect();
        assert_close(softmax(&v).unwrap().weights(), &expected, 1e-14);
    }

    #[test]
    fn softmax_shift_invariant() {
        let v = [0.3, -1.2, 4.5, 0.0];
        let shifted: Vec<f64> = v.iter().map(|x| x + 7.0).collect();
        assert_close(softmax(&v).unwrap().weights(), softmax(&shifted).unwrap().weights(), 1e-12);
    }

    #[test]
    fn softmax_rejects_empty() {
        assert!(matches!(softmax(&[]), Err(MadtpError::InvalidArgument(_))));
    }

    #[test]
    fn sparsemax_uniform_input() {
        for n in 1..8 {
            let v = vec![0.7; n];
            let expected = vec![1.0 / n as f64; n];
            assert_close(sparsemax(&v).unwrap().weights(), &expected, 1e-12);
        }
    }

    #[test]
    fn sparsemax_known_projections() {
        assert_close(sparsemax(&[2.0, 1.0, 0.0]).unwrap().weights(), &[1.0, 0.0, 0.0], 1e-12);
        assert_close(
            sparsemax(&[1.1, 1.0, -5.0]).unwrap().weights(),
            &[0.55, 0.45, 0.0],
            1e-12,
        );
    }

    #[test]
    fn sparsemax_rejects_empty() {
        assert!(matches!(sparsemax(&[]), Err(MadtpError::InvalidArgument(_))));
    }

    #[test]
    fn vjp_annihilates_constant_upstream_on_full_support() {
        let v = [0.3, 0.31, 0.29];
        let out = sparsemax_vjp(&v, &[2.0, 2.0, 2.0]).unwrap();
        assert_close(&out, &[0.0, 0.0, 0.0], 1e-12);
    }

    #[test]
    fn vjp_zeroes_off_support_rows() {
        let out = sparsemax_vjp(&[2.0, 1.0, 0.0], &[5.0, -3.0, 1.0]).unwrap();
        assert_eq!(out[1], 0.0);
        assert_eq!(out[2], 0.0);
        assert_eq!(out[0], 0.0); // single-point support: u - mean(u) = 0
    }

    #[test]
    fn vjp_rejects_length_mismatch() {
        assert!(sparsemax_vjp(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn vjp_matches_finite_differences_on_stable_support() {
        // Support {0,1} with a wide margin to the excluded coordinate.
        let v = [1.2, 1.0, -4.0];
        let upstream = [0.7, -0.3, 0.9];
        let vjp = sparsemax_vjp(&v, &upstream).unwrap();
        let f = |x: &[f64]| -> Result<f64> {
            let p = sparsemax(x)?;
            Ok(p.weights().iter().zip(&upstream).map(|(a, b)| a * b).sum())
        };
        let fd = finite_diff_grad(f, &v, 1e-6).unwrap();
        for (a, b) in vjp.iter().zip(&fd) {
            assert!((a - b).abs() <= 1e-5 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn cosine_extremes() {
        assert!((cosine_similarity(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        assert!((cosine_similarity(&[1.0, -2.0], &[-1.0, 2.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(MadtpError::DegenerateInput(_))
        ));
    }

    #[test]
    fn attention_single_key_is_identity_on_values() {
        let q = Matrix::new(1, 2, vec![0.4, -0.2]).unwrap();
        let k = q.clone();
        let v = Matrix::new(1, 3, vec![7.0, -1.0, 2.5]).unwrap();
        let (out, attn) = scaled_dot_attention(&q, &k, &v, 1.0).unwrap();
        assert_eq!(attn.data(), &[1.0]);
        assert_close(out.data(), v.data(), 1e-15);
    }

    #[test]
    fn attention_orthogonal_one_hot_saturates() {
        // One-hot queries/keys scaled so the diagonal logit gap is >= 30.
        let q = Matrix::new(2, 2, vec![30.0, 0.0, 0.0, 30.0]).unwrap();
        let k = Matrix::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let v = Matrix::new(2, 1, vec![5.0, -5.0]).unwrap();
        let (_, attn) = scaled_dot_attention(&q, &k, &v, 1.0).unwrap();
        assert!(attn.at(0, 1) < 1e-6);
        assert!(attn.at(1, 0) < 1e-6);
    }

    #[test]
    fn attention_rejects_bad_scale_and_shapes() {
        let m = Matrix::new(1, 2, vec![0.0, 0.0]).unwrap();
        let narrow = Matrix::new(1, 1, vec![0.0]).unwrap();
        assert!(scaled_dot_attention(&m, &m, &m, 0.0).is_err());
        assert!(scaled_dot_attention(&m, &narrow, &m, 1.0).is_err());
    }

    #[test]
    fn finite_diff_on_quadratic_and_constant() {
        let grad = finite_diff_grad(
            |x| Ok(x.iter().map(|v| v * v).sum()),
            &[1.0, 2.0],
            1e-5,
        )
        .unwrap();
        assert_close(&grad, &[2.0, 4.0], 1e-8);

        let zero = finite_diff_grad(|_| Ok(42.0), &[1.0, -3.0, 0.5], 1e-5).unwrap();
        assert_close(&zero, &[0.0, 0.0, 0.0], 0.0);
    }

    #[test]
    fn finite_diff_matches_analytic_cosine_gradient() {
        let b = [0.5, -1.0, 2.0];
        let a = [1.0, 0.3, -0.7];
        let grad = finite_diff_grad(|x| cosine_similarity(x, &b), &a, 1e-6).unwrap();
        // d/da cos(a,b) = b/(|a||b|) - cos * a/|a|^2
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        let cos = cosine_similarity(&a, &b).unwrap();
        for i in 0..3 {
            let analytic = b[i] / (na * nb) - cos * a[i] / (na * na);
            assert!(
                (grad[i] - analytic).abs() <= 1e-6 * (1.0 + analytic.abs()),
                "{} vs {}",
                grad[i],
                analytic
            );
        }
    }

    #[test]
    fn matrix_rejects_bad_shapes() {
        assert!(Matrix::new(2, 2, vec![1.0, 2.0, 3.0]).is_err());
        assert!(Matrix::new(1, 2, vec![f64::NAN, 0.0]).is_err());
        let a = Matrix::new(2, 3, vec![1.0; 6]).unwrap();
        let b = Matrix::new(2, 3, vec![1.0; 6]).unwrap();
        assert!(a.matmul(&b).is_err());
    }
}
