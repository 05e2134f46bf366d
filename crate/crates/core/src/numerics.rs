//! Minimal dense linear algebra and activation functions.
//!
//! Everything here is plain `f64` with no SIMD or BLAS so that results are
//! deterministic and easy to cross-check against straight-line oracles.

use crate::error::{DashError, Result};
use serde::{Deserialize, Serialize};

// ── Matrix ─────────────────────────────────────────────────────────────

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    /// Build a matrix, validating shape and finiteness.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(DashError::InvalidArgument(
                "matrix dimensions must be positive".into(),
            ));
        }
        if data.len() != rows * cols {
            return Err(DashError::DimensionMismatch(format!(
                "matrix data length {} != {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(DashError::InvalidArgument(
                "matrix contains non-finite entries".into(),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

/// `out[r] += a[r] * b` for row-major `a` (n x k) and `b` (k x m).
///
/// The k-inner loop keeps both operands contiguous.
pub fn matmul_acc(a: &Matrix, b: &Matrix, out: &mut Matrix) {
    assert_eq!(a.cols, b.rows, "matmul inner dims");
    assert_eq!(out.rows, a.rows, "matmul out rows");
    assert_eq!(out.cols, b.cols, "matmul out cols");
    let m = b.cols;
    for r in 0..a.rows {
        let arow = a.row(r);
        let orow = out.row_mut(r);
        for (k, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[k * m..(k + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `a (n x k) * b (k x m)` into a fresh matrix.
pub fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.rows, b.cols);
    matmul_acc(a, b, &mut out);
    out
}

/// `a (n x k) * b^T` for `b (m x k)`: rows of both operands stay contiguous.
pub fn matmul_a_bt(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols, b.cols, "matmul_a_bt inner dims");
    let mut out = Matrix::zeros(a.rows, b.rows);
    for r in 0..a.rows {
        let arow = a.row(r);
        let orow = out.row_mut(r);
        for (j, o) in orow.iter_mut().enumerate() {
            *o = dot(arow, b.row(j));
        }
    }
    out
}

/// `a^T * b` for `a (n x k)`, `b (n x m)` -> (k x m). Accumulates row-rank-1
/// updates so both operands stay contiguous.
pub fn matmul_at_b(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.rows, b.rows, "matmul_at_b inner dims");
    let mut out = Matrix::zeros(a.cols, b.cols);
    for i in 0..a.rows {
        let arow = a.row(i);
        let brow = b.row(i);
        for (k, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = out.row_mut(k);
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `vec (k) * b (k x m)` -> (m).
pub fn vec_mat(v: &[f64], b: &Matrix) -> Vec<f64> {
    assert_eq!(v.len(), b.rows, "vec_mat inner dims");
    let mut out = vec![0.0; b.cols];
    for (k, &av) in v.iter().enumerate() {
        let brow = b.row(k);
        for (o, &bv) in out.iter_mut().zip(brow) {
            *o += av * bv;
        }
    }
    out
}

#[inline]
pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

#[inline]
pub fn l2_norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

// ── Similarity ─────────────────────────────────────────────────────────

/// Cosine similarity (x . y) / (||x|| ||y||).
///
/// Zero-norm inputs are an explicit error rather than a silent 0 or NaN.
pub fn cosine_similarity(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(DashError::DimensionMismatch(format!(
            "cosine_similarity: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    let nx = l2_norm(x);
    let ny = l2_norm(y);
    if nx == 0.0 || ny == 0.0 {
        return Err(DashError::ZeroNorm("cosine_similarity"));
    }
    Ok(dot(x, y) / (nx * ny))
}

// ── Activations ────────────────────────────────────────────────────────

/// Standard normal CDF via the error function.
#[inline]
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Exact Gaussian-CDF GELU: x * Phi(x).
///
/// The tanh approximation is deliberately not used; the exact form keeps
/// gradient checks clean.
#[inline]
pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

/// Derivative of the exact GELU: Phi(x) + x * phi(x).
#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    const INV_SQRT_2PI: f64 = 0.3989422804014327;
    normal_cdf(x) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Logistic sigmoid 1 / (1 + e^-x).
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Temperature softmax: p_k proportional to exp(scores_k / tau).
///
/// Stabilized by max-subtraction; raw exp overflows for large scores.
pub fn softmax_with_temperature(scores: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(DashError::InvalidArgument(format!(
            "softmax temperature must be positive, got {tau}"
        )));
    }
    if scores.is_empty() {
        return Err(DashError::InvalidArgument("softmax of empty scores".into()));
    }
    if !scores.iter().all(|s| s.is_finite()) {
        return Err(DashError::InvalidArgument(
            "softmax scores must be finite".into(),
        ));
    }
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| ((s - max) / tau).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Independent high-precision Phi(x) by Simpson quadrature of the
    /// normal pdf, used as the oracle for the exact GELU.
    fn normal_cdf_quadrature(x: f64) -> f64 {
        let n = 20_000usize;
        let (a, b) = if x >= 0.0 { (0.0, x) } else { (x, 0.0) };
        let h = (b - a) / n as f64;
        let pdf = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mut acc = pdf(a) + pdf(b);
        for i in 1..n {
            let t = a + i as f64 * h;
            acc += if i % 2 == 1 { 4.0 * pdf(t) } else { 2.0 * pdf(t) };
        }
        let integral = acc * h / 3.0;
        if x >= 0.0 {
            0.5 + integral
        } else {
            0.5 - integral
        }
    }

    #[test]
    fn cosine_orthogonal_parallel_and_halfway() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let par = cosine_similarity(&[1.0, 2.0], &[2.0, 4.0]).unwrap();
        assert!((par - 1.0).abs() < 1e-12);
        let half = cosine_similarity(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((half - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn cosine_zero_norm_is_error() {
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(DashError::ZeroNorm(_))
        ));
    }

    #[test]
    fn gelu_fixed_points() {
        assert_eq!(gelu(0.0), 0.0);
        // Asymptote: gelu(x) -> x for large x.
        assert!((gelu(20.0) - 20.0).abs() < 1e-12);
        // Oracle: x * Phi(x) with Phi from independent quadrature.
        let oracle = 1.0 * normal_cdf_quadrature(1.0);
        assert!((gelu(1.0) - oracle).abs() < 1e-12, "gelu(1)={}", gelu(1.0));
        assert!((gelu(1.0) - 0.841345).abs() < 1e-6);
    }

    #[test]
    fn gelu_grad_matches_finite_difference() {
        for &x in &[-3.0, -1.0, -0.1, 0.0, 0.5, 1.7, 4.0] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((gelu_grad(x) - fd).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn sigmoid_fixed_points() {
        assert_eq!(sigmoid(0.0), 0.5);
        // Oracle: independent evaluation via exp at high precision.
        let oracle = 1.0 / (1.0 + (-3.0f64).exp());
        assert!((sigmoid(3.0) - oracle).abs() < 1e-15);
        assert!((sigmoid(3.0) - 0.952574).abs() < 1e-6);
    }

    #[test]
    fn softmax_symmetry_and_derived_value() {
        let p = softmax_with_temperature(&[1.0, 1.0, 1.0, 1.0], 0.7).unwrap();
        for v in &p {
            assert!((v - 0.25).abs() < 1e-12);
        }
        // Oracle: exp-normalize evaluated independently.
        let e2 = 2.0f64.exp();
        let expect0 = e2 / (e2 + 3.0);
        let p = softmax_with_temperature(&[2.0, 0.0, 0.0, 0.0], 1.0).unwrap();
        assert!((p[0] - expect0).abs() < 1e-12);
        assert!((p[0] - 0.71123).abs() < 1e-5);
        assert!((p[1] - 0.09626).abs() < 1e-5);
    }

    #[test]
    fn softmax_low_temperature_limit() {
        let p = softmax_with_temperature(&[1.0, 3.0, 2.0, 0.0], 1e-4).unwrap();
        assert!(p[1] > 0.9999);
    }

    #[test]
    fn softmax_rejects_bad_tau() {
        assert!(softmax_with_temperature(&[1.0, 2.0], 0.0).is_err());
        assert!(softmax_with_temperature(&[1.0, 2.0], -1.0).is_err());
    }

    #[test]
    fn matmul_small_case() {
        let a = Matrix::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Matrix::new(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = matmul(&a, &b);
        assert_eq!(c.data, vec![58.0, 64.0, 139.0, 154.0]);
        assert_eq!(vec_mat(&[1.0, 0.0], &c), vec![58.0, 64.0]);
    }

    #[test]
    fn transpose_matmuls_match_explicit_transpose() {
        let a = Matrix::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Matrix::new(2, 3, vec![0.5, -1.0, 2.0, 1.0, 0.0, -2.0]).unwrap();
        // a * b^T: (2x3)*(3x2)
        let bt = Matrix::new(3, 2, vec![0.5, 1.0, -1.0, 0.0, 2.0, -2.0]).unwrap();
        assert_eq!(matmul_a_bt(&a, &b).data, matmul(&a, &bt).data);
        // a^T * b: (3x2)*(2x3)
        let at = Matrix::new(3, 2, vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]).unwrap();
        assert_eq!(matmul_at_b(&a, &b).data, matmul(&at, &b).data);
    }

    #[test]
    fn matrix_validation() {
        assert!(Matrix::new(2, 2, vec![0.0; 3]).is_err());
        assert!(Matrix::new(2, 2, vec![0.0, f64::NAN, 0.0, 0.0]).is_err());
        assert!(Matrix::new(0, 2, vec![]).is_err());
    }

    proptest! {
        #[test]
        fn cosine_self_similarity_is_one(v in proptest::collection::vec(-100.0f64..100.0, 2..16)) {
            prop_assume!(l2_norm(&v) > 1e-6);
            let sim = cosine_similarity(&v, &v).unwrap();
            prop_assert!((sim - 1.0).abs() < 1e-12);
        }

        #[test]
        fn cosine_scale_invariant(
            (v, w) in (3usize..8).prop_flat_map(|n| (
                proptest::collection::vec(-10.0f64..10.0, n),
                proptest::collection::vec(-10.0f64..10.0, n),
            )),
            a in 0.01f64..100.0,
            b in 0.01f64..100.0,
        ) {
            prop_assume!(l2_norm(&v) > 1e-3 && l2_norm(&w) > 1e-3);
            let base = cosine_similarity(&v, &w).unwrap();
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&base));
            // Near-orthogonal pairs hit catastrophic cancellation in the
            // dot product; away from them the relative error is bounded.
            prop_assume!(base.abs() > 1e-3);
            let av: Vec<f64> = v.iter().map(|x| a * x).collect();
            let bw: Vec<f64> = w.iter().map(|x| b * x).collect();
            let scaled = cosine_similarity(&av, &bw).unwrap();
            prop_assert!((base - scaled).abs() < 1e-9);
        }

        #[test]
        fn softmax_sums_to_one_and_shift_invariant(
            s in proptest::collection::vec(-50.0f64..50.0, 2..8),
            c in -30.0f64..30.0,
            tau in 0.05f64..5.0,
        ) {
            let p = softmax_with_temperature(&s, tau).unwrap();
            let sum: f64 = p.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            let shifted: Vec<f64> = s.iter().map(|x| x + c).collect();
            let q = softmax_with_temperature(&shifted, tau).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn softmax_temperature_equals_prescaled_scores(
            s in proptest::collection::vec(-20.0f64..20.0, 2..8),
            tau in 0.05f64..5.0,
        ) {
            let p = softmax_with_temperature(&s, tau).unwrap();
            let pre: Vec<f64> = s.iter().map(|x| x / tau).collect();
            let q = softmax_with_temperature(&pre, 1.0).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
