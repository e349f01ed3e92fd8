//! Dense row-major matrices and the handful of kernels the attention paths need.
//!
//! Everything here is generic over [`Real`]: `f32` is the working precision and
//! `f64` is the oracle precision used by tests and gradient checks. Summation
//! order is fixed (ascending inner index) so results are bit-reproducible.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;

use crate::error::{shape_err, Error, Result};

/// Scalar type usable by every kernel in this crate.
pub trait Real: Float + Debug + Display + Default + Sum + Send + Sync + 'static {
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T = f32> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    /// Builds a matrix from row-major data. Rejects length mismatches and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err(format!(
                "data length {} != {rows}x{cols}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite entry at ({}, {})",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub(crate) fn from_vec_unchecked(rows: usize, cols: usize, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_vec_unchecked(rows, cols, vec![T::zero(); rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(shape_err("ragged rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    /// Builds a matrix with `f(row, col)` at every position.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::new(rows, cols, data)
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
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub(crate) fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub(crate) fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Copies the listed rows, in order, into a new matrix.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            if i >= self.rows {
                return Err(shape_err(format!("row {i} out of range {}", self.rows)));
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Self::from_vec_unchecked(idx.len(), self.cols, data))
    }

    /// Contiguous row slice `[start, end)`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.rows {
            return Err(shape_err(format!(
                "row range {start}..{end} out of bounds for {} rows",
                self.rows
            )));
        }
        Ok(Self::from_vec_unchecked(
            end - start,
            self.cols,
            self.data[start * self.cols..end * self.cols].to_vec(),
        ))
    }

    /// Contiguous column slice `[start, end)`.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.cols {
            return Err(shape_err(format!(
                "column range {start}..{end} out of bounds for {} cols",
                self.cols
            )));
        }
        let width = end - start;
        let mut data = Vec::with_capacity(self.rows * width);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..end]);
        }
        Ok(Self::from_vec_unchecked(self.rows, width, data))
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn hcat(parts: &[Self]) -> Result<Self> {
        let rows = parts.first().map_or(0, |p| p.rows);
        if parts.iter().any(|p| p.rows != rows) {
            return Err(shape_err("hcat: row counts differ"));
        }
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(r));
            }
        }
        Ok(Self::from_vec_unchecked(rows, cols, data))
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn vcat(parts: &[Self]) -> Result<Self> {
        let cols = parts.first().map_or(0, |p| p.cols);
        if parts.iter().any(|p| p.cols != cols) {
            return Err(shape_err("vcat: column counts differ"));
        }
        let rows = parts.iter().map(|p| p.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Ok(Self::from_vec_unchecked(rows, cols, data))
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn cast<U: Real>(&self) -> Matrix<U> {
        Matrix::from_vec_unchecked(
            self.rows,
            self.cols,
            self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        )
    }

    /// Largest absolute elementwise difference. Panics on shape mismatch.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff: shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64().abs()).fold(0.0, f64::max)
    }

    pub(crate) fn ensure_finite(self, what: &str) -> Result<Self> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(self)
        } else {
            Err(Error::Numeric(format!("{what} produced a non-finite value")))
        }
    }
}

/// `a · b` with the inner index summed in ascending order.
pub fn matmul<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.rows {
        return Err(shape_err(format!(
            "matmul: {}x{} · {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let arow = a.row(i);
        for j in 0..b.cols {
            let mut acc = T::zero();
            for (k, &av) in arow.iter().enumerate() {
                acc = acc + av * b.data[k * b.cols + j];
            }
            out.data[i * b.cols + j] = acc;
        }
    }
    out.ensure_finite("matmul")
}

/// In-place stable softmax of one row (max subtraction first).
pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

pub fn softmax_rows<T: Real>(m: &Matrix<T>) -> Matrix<T> {
    let mut out = m.clone();
    for r in 0..out.rows {
        softmax_in_place(out.row_mut(r));
    }
    out
}

/// `x · w + bias`, with `bias` broadcast over rows.
pub fn linear<T: Real>(x: &Matrix<T>, w: &Matrix<T>, bias: Option<&[T]>) -> Result<Matrix<T>> {
    let mut out = matmul(x, w)?;
    if let Some(b) = bias {
        if b.len() != w.cols {
            return Err(shape_err(format!(
                "bias length {} != output width {}",
                b.len(),
                w.cols
            )));
        }
        for r in 0..out.rows {
            for (o, &bv) in out.row_mut(r).iter_mut().zip(b) {
                *o = *o + bv;
            }
        }
        out = out.ensure_finite("linear")?;
    }
    Ok(out)
}

/// Central finite-difference gradient of `f` at `x`, in 64-bit.
pub fn finite_diff_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Result<Vec<f64>> {
    if !(h > 0.0) {
        return Err(Error::Numeric(format!("step must be positive, got {h}")));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let plus = f(&probe);
        probe[i] = x[i] - h;
        let minus = f(&probe);
        probe[i] = x[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!(
                "objective non-finite around coordinate {i}"
            )));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// Normwise relative error `max|a - b| / max(max|b|, 1e-12)`, with `b` the reference.
pub fn rel_err(a: &[f64], reference: &[f64]) -> f64 {
    assert_eq!(a.len(), reference.len());
    let diff = a
        .iter()
        .zip(reference)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let scale = reference.iter().map(|v| v.abs()).fold(0.0, f64::max);
    diff / scale.max(1e-12)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-10.0..10.0)).unwrap()
    }

    fn naive_matmul(a: &Matrix<f64>, b: &Matrix<f64>) -> Vec<f64> {
        let mut out = vec![0.0; a.rows() * b.cols()];
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                for k in 0..a.cols() {
                    out[i * b.cols() + j] += a.get(i, k) * b.get(k, j);
                }
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let b = Matrix::<f32>::from_rows(&[vec![1., 2.], vec![3., 4.], vec![5., 6.]]).unwrap();
        assert_eq!(matmul(&Matrix::identity(3), &b).unwrap(), b);

        let a = Matrix::<f32>::from_rows(&[vec![1., 2.], vec![3., 4.]]).unwrap();
        let v = Matrix::<f32>::from_rows(&[vec![0.], vec![1.]]).unwrap();
        assert_eq!(matmul(&a, &v).unwrap().data(), &[2., 4.]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Matrix::<f32>::zeros(2, 3);
        assert!(matches!(matmul(&a, &a), Err(Error::Shape(_))));
    }

    #[test]
    fn matmul_f32_matches_f64_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(7, 5, &mut rng);
        let b = random(5, 3, &mut rng);
        let oracle = naive_matmul(&a, &b);
        let got = matmul(&a.cast::<f32>(), &b.cast::<f32>()).unwrap();
        for (g, o) in got.data().iter().zip(&oracle) {
            assert!((*g as f64 - o).abs() <= 1e-6 * o.abs().max(1.0), "{g} vs {o}");
        }
    }

    #[test]
    fn matmul_is_bit_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(9, 11, &mut rng).cast::<f32>();
        let b = random(11, 4, &mut rng).cast::<f32>();
        let x = matmul(&a, &b).unwrap();
        let y = matmul(&a, &b).unwrap();
        assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn softmax_cases() {
        let m = Matrix::<f32>::from_rows(&[vec![0., 0., 0.], vec![1000., 0., -5.]]).unwrap();
        let s = softmax_rows(&m);
        for v in s.row(0) {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
        assert!((s.get(1, 0) - 1.0).abs() < 1e-7);
        assert!(s.get(1, 1) >= 0.0 && s.get(1, 1) < 1e-30);

        let s = softmax_rows(&Matrix::<f64>::from_rows(&[vec![1., 2., 3.]]).unwrap());
        let z: f64 = (1f64).exp() + (2f64).exp() + (3f64).exp();
        for (i, v) in s.row(0).iter().enumerate() {
            assert!((v - ((i + 1) as f64).exp() / z).abs() < 1e-7);
        }
    }

    #[test]
    fn linear_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(4, 6, &mut rng);
        let bias = vec![0.5, -1.0, 2.0];
        let zero = linear(&x, &Matrix::zeros(6, 3), Some(&bias)).unwrap();
        for r in 0..4 {
            assert_eq!(zero.row(r), &bias[..]);
        }
        assert_eq!(linear(&x, &Matrix::identity(6), None).unwrap(), x);

        let w = random(6, 3, &mut rng);
        let got = linear(&x, &w, Some(&bias)).unwrap();
        let plain = naive_matmul(&x, &w);
        for r in 0..4 {
            for c in 0..3 {
                assert!((got.get(r, c) - (plain[r * 3 + c] + bias[c])).abs() < 1e-12);
            }
        }
        assert!(linear(&x, &w, Some(&[1.0])).is_err());
    }

    #[test]
    fn finite_diff_simple() {
        let g = finite_diff_grad(|x| x.iter().map(|v| v * v).sum(), &[1.0, 2.0], 1e-4).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-6 && (g[1] - 4.0).abs() < 1e-6);
        let g = finite_diff_grad(|_| 3.5, &[1.0, -2.0, 0.0], 1e-4).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
        assert!(finite_diff_grad(|_| f64::NAN, &[1.0], 1e-4).is_err());
        assert!(finite_diff_grad(|_| 0.0, &[1.0], 0.0).is_err());
    }

    #[test]
    fn rejects_non_finite() {
        assert!(Matrix::<f32>::new(1, 2, vec![1.0, f32::NAN]).is_err());
        assert!(Matrix::<f32>::new(1, 2, vec![1.0]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_rows_sum_to_one(row in proptest::collection::vec(-1e4f32..1e4, 1..32)) {
                let m = Matrix::new(1, row.len(), row).unwrap();
                let s = softmax_rows(&m);
                let sum: f64 = s.row(0).iter().map(|v| *v as f64).sum();
                prop_assert!((sum - 1.0).abs() <= 1e-6);
                prop_assert!(s.row(0).iter().all(|v| *v >= 0.0));
            }

            #[test]
            fn f32_matmul_tracks_f64(
                vals in proptest::collection::vec(-10.0f64..10.0, 48),
            ) {
                let a = Matrix::new(4, 6, vals[..24].to_vec()).unwrap();
                let b = Matrix::new(6, 4, vals[24..].to_vec()).unwrap();
                let exact = matmul(&a, &b).unwrap();
                let low = matmul(&a.cast::<f32>(), &b.cast::<f32>()).unwrap();
                // relative to Σ|a_ik·b_kj|, since the signed sum may cancel
                for i in 0..4 {
                    for j in 0..4 {
                        let scale: f64 = (0..6).map(|k| (a.get(i, k) * b.get(k, j)).abs()).sum();
                        let err = (low.get(i, j) as f64 - exact.get(i, j)).abs();
                        prop_assert!(err <= 1e-5 * scale.max(1e-30), "{err} vs scale {scale}");
                    }
                }
            }
        }
    }
}
