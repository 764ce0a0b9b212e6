//! Dense row-major matrices and the handful of kernels the decoder needs.
//!
//! Every reduction runs sequentially in index order starting from zero. A row of
//! `matmul(a, b)` is therefore bit-identical to `vec_mat(a.row(i), b)`, which is
//! what lets the KV-cached decoder match a full-sequence recompute exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Mat<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> Mat<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![S::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = S::one();
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!(
                "non-finite matrix entry at flat index {pos}"
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> S) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn diag(values: &[S]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            m.data[i * n + i] = *v;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn as_slice(&self) -> &[S] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [S] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> S {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: S) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[S] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [S] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    /// Column slice `[start, start + width)` as a new matrix.
    pub fn col_block(&self, start: usize, width: usize) -> Self {
        Self::from_fn(self.rows, width, |r, c| self.get(r, start + c))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::shape(format!(
                "cannot subtract {}x{} from {}x{}",
                other.rows, other.cols, self.rows, self.cols
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| *a - *b)
            .collect();
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, k: S) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| *v * k).collect(),
        }
    }

    pub fn frobenius_norm(&self) -> S {
        norm2(&self.data)
    }

    /// Euclidean norm of column `c`.
    pub fn col_norm(&self, c: usize) -> S {
        let mut acc = S::zero();
        for r in 0..self.rows {
            let v = self.get(r, c);
            acc = acc + v * v;
        }
        acc.sqrt()
    }

    pub fn max_col_norm(&self) -> S {
        (0..self.cols)
            .map(|c| self.col_norm(c))
            .fold(S::zero(), S::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<T: Scalar>(&self) -> Mat<T> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| T::of(v.as_f64())).collect(),
        }
    }
}

/// `out = x · m` for a row vector `x`.
///
/// Accumulates `out[c] += x[k] * m[k, c]` for `k` ascending, so each output
/// element sees the same sequence of additions as a naive inner-product loop.
pub fn vec_mat_into<S: Scalar>(x: &[S], m: &Mat<S>, out: &mut [S]) {
    debug_assert_eq!(x.len(), m.rows);
    debug_assert_eq!(out.len(), m.cols);
    out.iter_mut().for_each(|o| *o = S::zero());
    for (k, &xk) in x.iter().enumerate() {
        let row = m.row(k);
        for (o, &w) in out.iter_mut().zip(row) {
            *o = *o + xk * w;
        }
    }
}

pub fn vec_mat<S: Scalar>(x: &[S], m: &Mat<S>) -> Vec<S> {
    let mut out = vec![S::zero(); m.cols];
    vec_mat_into(x, m, &mut out);
    out
}

pub fn matmul<S: Scalar>(a: &Mat<S>, b: &Mat<S>) -> Result<Mat<S>> {
    if a.cols != b.rows {
        return Err(Error::shape(format!(
            "matmul {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Mat::zeros(a.rows, b.cols);
    for r in 0..a.rows {
        let (src, dst) = (a.row(r), &mut out.data[r * b.cols..(r + 1) * b.cols]);
        vec_mat_into(src, b, dst);
    }
    Ok(out)
}

#[inline]
pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = S::zero();
    for (x, y) in a.iter().zip(b) {
        acc = acc + *x * *y;
    }
    acc
}

#[inline]
pub fn norm2<S: Scalar>(v: &[S]) -> S {
    dot(v, v).sqrt()
}

/// Euclidean distance between two equal-length vectors.
pub fn dist2<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = S::zero();
    for (x, y) in a.iter().zip(b) {
        let d = *x - *y;
        acc = acc + d * d;
    }
    acc.sqrt()
}

/// Max-subtracted softmax, in place.
pub fn softmax_in_place<S: Scalar>(v: &mut [S]) -> Result<()> {
    if v.is_empty() {
        return Err(Error::shape("softmax of an empty row"));
    }
    let max = v.iter().copied().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum = sum + *x;
    }
    for x in v.iter_mut() {
        *x = *x / sum;
    }
    Ok(())
}

pub fn softmax_row<S: Scalar>(v: &[S]) -> Result<Vec<S>> {
    let mut out = v.to_vec();
    softmax_in_place(&mut out)?;
    Ok(out)
}

#[inline]
pub fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

#[inline]
pub fn silu<S: Scalar>(x: S) -> S {
    x * sigmoid(x)
}

/// Derivative of SiLU. Its magnitude never exceeds 1.1 (peak ≈ 1.0998 near x ≈ 2.4).
#[inline]
pub fn silu_grad<S: Scalar>(x: S) -> S {
    let s = sigmoid(x);
    s * (S::one() + x * (S::one() - s))
}

/// Layer normalization with affine gain and bias.
pub fn layer_norm_into<S: Scalar>(x: &[S], gain: &[S], bias: &[S], eps: S, out: &mut [S]) {
    let n = S::of(x.len() as f64);
    let mut mean = S::zero();
    for v in x {
        mean = mean + *v;
    }
    mean = mean / n;
    let mut var = S::zero();
    for v in x {
        let c = *v - mean;
        var = var + c * c;
    }
    var = var / n;
    let inv = S::one() / (var + eps).sqrt();
    for (((o, v), g), b) in out.iter_mut().zip(x).zip(gain).zip(bias) {
        *o = (*v - mean) * inv * *g + *b;
    }
}

fn seeded_unit_vector<S: Scalar>(n: usize, seed: u64) -> Vec<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<S> = (0..n).map(|_| S::of(rng.random::<f64>() - 0.5)).collect();
    let nrm = norm2(&v);
    v.iter_mut().for_each(|x| *x = *x / nrm);
    v
}

/// Power-iteration estimate of the largest singular value, `max ‖x·m‖ / ‖x‖`.
///
/// Starts from a fixed pseudo-random unit vector and applies `m·mᵀ` `iters` times.
/// The estimate is a lower bound that is nondecreasing in `iters`.
pub fn spectral_norm<S: Scalar>(m: &Mat<S>, iters: usize) -> S {
    let iters = iters.max(1);
    if m.rows == 0 || m.cols == 0 || m.data.iter().all(|v| v.is_zero()) {
        return S::zero();
    }
    let mt = m.transpose();
    let mut x = seeded_unit_vector::<S>(m.rows, 0x5eed_0f_5bec);
    let mut y = vec![S::zero(); m.cols];
    for _ in 0..iters {
        vec_mat_into(&x, m, &mut y);
        vec_mat_into(&y, &mt, &mut x);
        let nrm = norm2(&x);
        if nrm.is_zero() {
            return S::zero();
        }
        x.iter_mut().for_each(|v| *v = *v / nrm);
    }
    vec_mat_into(&x, m, &mut y);
    norm2(&y)
}

/// Certified upper bound on the largest singular value.
///
/// Uses `σ_max² = λ_max(G) ≤ ‖G^(2^k)‖_F^(1/2^k)` for the Gram matrix `G`,
/// evaluated by `squarings` rescaled squarings in log space. The bound
/// overestimates by at most a factor `rank^(1/2^(k+1))`.
pub fn spectral_norm_upper<S: Scalar>(m: &Mat<S>, squarings: u32) -> f64 {
    let m64: Mat<f64> = m.cast();
    let gram = if m64.rows <= m64.cols {
        matmul(&m64, &m64.transpose()).expect("gram shape")
    } else {
        matmul(&m64.transpose(), &m64).expect("gram shape")
    };
    let f0 = gram.frobenius_norm();
    if f0 == 0.0 {
        return 0.0;
    }
    let mut b = gram.scale(1.0 / f0);
    let mut log_c = f0.ln();
    for _ in 0..squarings {
        let sq = matmul(&b, &b).expect("square");
        let f = sq.frobenius_norm();
        if f == 0.0 {
            return 0.0;
        }
        b = sq.scale(1.0 / f);
        log_c = 2.0 * log_c + f.ln();
    }
    let exponent = 2f64.powi(squarings as i32 + 1);
    (log_c / exponent).exp() * (1.0 + 1e-12)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seeded(rows: usize, cols: usize, seed: u64) -> Mat<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_fn(rows, cols, |_, _| rng.random::<f64>() * 2.0 - 1.0)
    }

    fn naive(a: &Mat<f64>, b: &Mat<f64>) -> Mat<f64> {
        let mut out = Mat::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0;
                for k in 0..a.cols() {
                    acc += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    #[test]
    fn identity_times_m() {
        let m = seeded(3, 5, 1);
        assert_eq!(matmul(&Mat::identity(3), &m).unwrap(), m);
    }

    #[test]
    fn zeros_times_m() {
        let m = seeded(3, 2, 2);
        assert_eq!(
            matmul(&Mat::<f64>::zeros(2, 3), &m).unwrap(),
            Mat::zeros(2, 2)
        );
    }

    #[test]
    fn matmul_matches_triple_loop_bitwise() {
        let (a, b) = (seeded(4, 4, 3), seeded(4, 4, 4));
        let got = matmul(&a, &b).unwrap();
        let want = naive(&a, &b);
        for (g, w) in got.as_slice().iter().zip(want.as_slice()) {
            assert_eq!(g.to_bits(), w.to_bits());
        }
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let err = matmul(&Mat::<f64>::zeros(2, 3), &Mat::zeros(2, 3)).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn from_vec_validates() {
        assert!(Mat::from_vec(2, 2, vec![1.0f64; 3]).is_err());
        assert!(Mat::from_vec(1, 2, vec![1.0f64, f64::NAN]).is_err());
    }

    #[test]
    fn softmax_cases() {
        let u = softmax_row(&[0.0f64, 0.0, 0.0]).unwrap();
        for p in &u {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(softmax_row(&[7.5f64]).unwrap(), vec![1.0]);
        let got = softmax_row(&[1.0f64, 2.0, 3.0]).unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (g, v) in got.iter().zip([1.0f64, 2.0, 3.0]) {
            assert!((g - v.exp() / z).abs() < 1e-12);
        }
        assert!(softmax_row::<f64>(&[]).is_err());
    }

    #[test]
    fn silu_values() {
        assert_eq!(silu(0.0f64), 0.0);
        assert!((silu(20.0f64) - 20.0).abs() < 1e-6);
        let want = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((silu(1.0f64) - want).abs() < 1e-15);
        assert!((silu(1.0f64) - 0.731_058_578_630_004_9).abs() < 1e-12);
    }

    #[test]
    fn silu_grad_is_bounded() {
        let mut peak: f64 = 0.0;
        for k in -20000..20000 {
            peak = peak.max(silu_grad(k as f64 * 1e-3).abs());
        }
        assert!(peak < 1.1 && peak > 1.09);
    }

    #[test]
    fn spectral_norm_basic() {
        assert!((spectral_norm(&Mat::<f64>::identity(5), 3) - 1.0).abs() < 1e-12);
        assert!((spectral_norm(&Mat::diag(&[3.0f64, 1.0]), 50) - 3.0).abs() < 1e-9);
        assert_eq!(spectral_norm(&Mat::<f64>::zeros(3, 3), 5), 0.0);
    }

    #[test]
    fn spectral_upper_brackets_estimate() {
        let m = seeded(8, 12, 9);
        let est = spectral_norm(&m, 200);
        let up = spectral_norm_upper(&m, 8);
        assert!(up >= est);
        assert!(up <= est * 1.01);
        assert_eq!(spectral_norm_upper(&Mat::<f64>::zeros(2, 2), 4), 0.0);
    }

    #[test]
    fn layer_norm_centers_and_scales() {
        let x = [1.0f64, 2.0, 3.0, 4.0];
        let mut out = [0.0; 4];
        layer_norm_into(&x, &[1.0; 4], &[0.0; 4], 0.0, &mut out);
        let mean: f64 = out.iter().sum::<f64>() / 4.0;
        let var: f64 = out.iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-15);
        assert!((var - 1.0).abs() < 1e-12);
    }

    #[test]
    fn f32_path_agrees_with_f64() {
        let a = seeded(3, 4, 5);
        let b = seeded(4, 2, 6);
        let p64 = matmul(&a, &b).unwrap();
        let p32 = matmul(&a.cast::<f32>(), &b.cast::<f32>()).unwrap();
        for (x, y) in p64.as_slice().iter().zip(p32.as_slice()) {
            assert!((x - *y as f64).abs() < 1e-5);
        }
    }
}
