//! Dense row-major matrices and the numerically stable reductions the rest of
//! the engine is built on.
//!
//! Every reduction sums left to right so that results are bit-reproducible for
//! identical inputs.

use std::fmt;

use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MatrixError {
    #[error("operation requires a non-empty input")]
    Empty,
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("scale target must be positive, got {0}")]
    NonPositiveTarget(f64),
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("data length {len} does not match {rows}x{cols}")]
    BadLength { rows: usize, cols: usize, len: usize },
    #[error("negative or non-finite entry {value} at ({row}, {col})")]
    InvalidEntry { row: usize, col: usize, value: f64 },
    #[error("row {0} has zero sum")]
    ZeroRowSum(usize),
    #[error("column {0} has zero sum")]
    ZeroColumnSum(usize),
}

/// Row-major dense matrix.
#[derive(Clone, PartialEq)]
pub struct Matrix<F> {
    rows: usize,
    cols: usize,
    data: Vec<F>,
}

impl<F: Scalar> Matrix<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![F::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: F) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<F>) -> Result<Self, MatrixError> {
        if data.len() != rows * cols {
            return Err(MatrixError::BadLength {
                rows,
                cols,
                len: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equally sized rows. Panics on ragged input.
    pub fn from_rows<R: AsRef<[F]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> F) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { F::one() } else { F::zero() })
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
    pub fn data(&self) -> &[F] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<F> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> F {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: F) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[F] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [F] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[F]> {
        // chunks_exact panics on a zero chunk size
        let cols = self.cols.max(1);
        self.data.chunks_exact(cols).take(self.rows)
    }

    pub fn column(&self, j: usize) -> Vec<F> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn row_sums(&self) -> Vec<F> {
        self.row_iter().map(|r| r.iter().copied().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<F> {
        let mut sums = vec![F::zero(); self.cols];
        for r in self.row_iter() {
            for (s, &v) in sums.iter_mut().zip(r) {
                *s += v;
            }
        }
        sums
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// Rows `indices` in order, as a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// Columns `start..end` of every row.
    pub fn column_block(&self, start: usize, end: usize) -> Self {
        assert!(start <= end && end <= self.cols, "column block out of range");
        let mut data = Vec::with_capacity(self.rows * (end - start));
        for r in self.row_iter() {
            data.extend_from_slice(&r[start..end]);
        }
        Self {
            rows: self.rows,
            cols: end - start,
            data,
        }
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: F) -> Self {
        self.map(|v| v * s)
    }

    pub fn add(&self, other: &Self) -> Result<Self, MatrixError> {
        self.check_same_shape(other)?;
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a + b)
                .collect(),
        })
    }

    pub fn check_same_shape(&self, other: &Self) -> Result<(), MatrixError> {
        if self.shape() != other.shape() {
            return Err(MatrixError::ShapeMismatch {
                expected: self.shape(),
                actual: other.shape(),
            });
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self · otherᵀ`, where `other` stores one output unit per row.
    pub fn matmul_transposed(&self, other: &Self) -> Result<Self, MatrixError> {
        if self.cols != other.cols {
            return Err(MatrixError::ShapeMismatch {
                expected: (other.rows, self.cols),
                actual: other.shape(),
            });
        }
        let mut out = Self::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            let dst = out.row_mut(i);
            for (o, d) in dst.iter_mut().enumerate() {
                *d = dot(a, other.row(o));
            }
        }
        Ok(out)
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Self) -> Result<Self, MatrixError> {
        if self.cols != other.rows {
            return Err(MatrixError::ShapeMismatch {
                expected: (self.cols, other.cols),
                actual: other.shape(),
            });
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == F::zero() {
                    continue;
                }
                axpy(a, other.row(k), out.row_mut(i));
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other`.
    pub fn transpose_matmul(&self, other: &Self) -> Result<Self, MatrixError> {
        if self.rows != other.rows {
            return Err(MatrixError::ShapeMismatch {
                expected: (self.rows, other.cols),
                actual: other.shape(),
            });
        }
        let mut out = Self::zeros(self.cols, other.cols);
        for b in 0..self.rows {
            let src = other.row(b);
            for (o, &a) in self.row(b).iter().enumerate() {
                if a == F::zero() {
                    continue;
                }
                axpy(a, src, out.row_mut(o));
            }
        }
        Ok(out)
    }
}

impl<F: fmt::Debug> fmt::Debug for Matrix<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in self.data.chunks(self.cols.max(1)) {
            writeln!(f, "  {r:?}")?;
        }
        write!(f, "]")
    }
}

#[inline]
pub fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).fold(F::zero(), |acc, (&x, &y)| acc + x * y)
}

/// `y += a * x`
#[inline]
pub fn axpy<F: Scalar>(a: F, x: &[F], y: &mut [F]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn max_value<F: Scalar>(v: &[F]) -> Option<F> {
    v.iter().copied().reduce(F::max)
}

/// `log Σ exp(v_i)`, shifted by the maximum so large inputs cannot overflow.
pub fn log_sum_exp<F: Scalar>(v: &[F]) -> Result<F, MatrixError> {
    let m = max_value(v).ok_or(MatrixError::Empty)?;
    if m.is_infinite() {
        return Ok(m);
    }
    let s: F = v.iter().map(|&x| (x - m).exp()).sum();
    Ok(m + s.ln())
}

/// Log of the tempered softmax, computed directly from the logits.
pub fn log_softmax_temp<F: Scalar>(v: &[F], tau: F) -> Result<Vec<F>, MatrixError> {
    if !(tau > F::zero()) {
        return Err(MatrixError::NonPositiveTemperature(tau.as_f64()));
    }
    let scaled: Vec<F> = v.iter().map(|&x| x / tau).collect();
    let lse = log_sum_exp(&scaled)?;
    Ok(scaled.into_iter().map(|x| x - lse).collect())
}

/// `exp(v_i/τ) / Σ_j exp(v_j/τ)`.
pub fn softmax_temp<F: Scalar>(v: &[F], tau: F) -> Result<Vec<F>, MatrixError> {
    if !(tau > F::zero()) {
        return Err(MatrixError::NonPositiveTemperature(tau.as_f64()));
    }
    let m = max_value(v).ok_or(MatrixError::Empty)?;
    let e: Vec<F> = v.iter().map(|&x| ((x - m) / tau).exp()).collect();
    let s: F = e.iter().copied().sum();
    Ok(e.into_iter().map(|x| x / s).collect())
}

pub fn softmax<F: Scalar>(v: &[F]) -> Result<Vec<F>, MatrixError> {
    softmax_temp(v, F::one())
}

fn check_nonnegative<F: Scalar>(m: &Matrix<F>) -> Result<(), MatrixError> {
    for (i, r) in m.row_iter().enumerate() {
        for (j, &v) in r.iter().enumerate() {
            if !(v >= F::zero()) || !v.is_finite() {
                return Err(MatrixError::InvalidEntry {
                    row: i,
                    col: j,
                    value: v.as_f64(),
                });
            }
        }
    }
    Ok(())
}

/// Divides each row by its sum so rows sum to one.
pub fn row_normalize<F: Scalar>(m: &Matrix<F>) -> Result<Matrix<F>, MatrixError> {
    check_nonnegative(m)?;
    let mut out = m.clone();
    row_normalize_in_place(&mut out)?;
    Ok(out)
}

/// Rescales each column so it sums to `target`.
pub fn col_scale_to<F: Scalar>(m: &Matrix<F>, target: F) -> Result<Matrix<F>, MatrixError> {
    check_nonnegative(m)?;
    let mut out = m.clone();
    col_scale_in_place(&mut out, target)?;
    Ok(out)
}

pub(crate) fn row_normalize_in_place<F: Scalar>(m: &mut Matrix<F>) -> Result<Vec<F>, MatrixError> {
    let sums = m.row_sums();
    for (i, &s) in sums.iter().enumerate() {
        if !(s > F::zero()) {
            return Err(MatrixError::ZeroRowSum(i));
        }
        for v in m.row_mut(i) {
            *v /= s;
        }
    }
    Ok(sums)
}

pub(crate) fn col_scale_in_place<F: Scalar>(
    m: &mut Matrix<F>,
    target: F,
) -> Result<Vec<F>, MatrixError> {
    if !(target > F::zero()) {
        return Err(MatrixError::NonPositiveTarget(target.as_f64()));
    }
    let sums = m.col_sums();
    if let Some(j) = sums.iter().position(|&s| !(s > F::zero())) {
        return Err(MatrixError::ZeroColumnSum(j));
    }
    let factors: Vec<F> = sums.iter().map(|&s| target / s).collect();
    let cols = m.cols();
    for v in m.data_mut().chunks_exact_mut(cols.max(1)) {
        for (x, &f) in v.iter_mut().zip(&factors) {
            *x *= f;
        }
    }
    Ok(sums)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn lse_of_zeros_is_ln2() {
        let v = log_sum_exp(&[0.0f64, 0.0]).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn lse_large_values_do_not_overflow() {
        let v = log_sum_exp(&[1000.0f64, 1000.0]).unwrap();
        assert!((v - (1000.0 + std::f64::consts::LN_2)).abs() < 1e-12);
    }

    #[test]
    fn lse_matches_naive_at_small_magnitude() {
        let v = [0.3f64, -1.2, 2.0];
        let naive = v.iter().map(|x| x.exp()).sum::<f64>().ln();
        assert!((log_sum_exp(&v).unwrap() - naive).abs() < 1e-14);
    }

    #[test]
    fn lse_rejects_empty() {
        assert_eq!(log_sum_exp::<f64>(&[]), Err(MatrixError::Empty));
    }

    #[test]
    fn softmax_examples() {
        let p = softmax_temp(&[0.7f64, 0.7, 0.7], 3.0).unwrap();
        for x in p {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = softmax_temp(&[2f64.ln(), 0.0], 1.0).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-15);
        let p = softmax_temp(&[1.0f64, 0.0], 1e-3).unwrap();
        assert!(p[0] > 1.0 - 1e-12 && p[1] < 1e-12);
        assert!(softmax_temp(&[1.0f64], 0.0).is_err());
        assert!(softmax_temp(&[1.0f64], -1.0).is_err());
    }

    #[test]
    fn normalizers() {
        let m = Matrix::from_rows(&[[2.0f64, 1.0], [1.0, 2.0]]);
        let r = row_normalize(&m).unwrap();
        assert!((r.get(0, 0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.get(1, 0) - 1.0 / 3.0).abs() < 1e-15);

        let id = Matrix::<f64>::identity(2);
        assert_eq!(col_scale_to(&id, 1.0).unwrap(), id);

        let z = Matrix::from_rows(&[[1.0f64, 1.0], [0.0, 0.0]]);
        assert_eq!(row_normalize(&z), Err(MatrixError::ZeroRowSum(1)));
        let z = Matrix::from_rows(&[[1.0f64, 0.0], [1.0, 0.0]]);
        assert_eq!(col_scale_to(&z, 1.0), Err(MatrixError::ZeroColumnSum(1)));
        let neg = Matrix::from_rows(&[[1.0f64, -1.0]]);
        assert!(matches!(row_normalize(&neg), Err(MatrixError::InvalidEntry { .. })));
    }

    #[test]
    fn matmul_variants_agree() {
        let a = Matrix::from_rows(&[[1.0f64, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        let b = Matrix::from_rows(&[[1.0f64, 0.5], [-1.0, 2.0], [0.0, 1.0]]);
        let ab = a.matmul(&b).unwrap();
        assert_eq!(ab, a.matmul_transposed(&b.transpose()).unwrap());
        assert_eq!(ab, a.transpose().transpose_matmul(&b).unwrap());
        assert_eq!(ab.data(), &[-1.0, 7.5, -1.0, 18.0]);
        assert!(a.matmul(&a).is_err());
    }

    proptest! {
        #[test]
        fn lse_shift_invariance(v in prop::collection::vec(-50.0f64..50.0, 1..16), c in -200.0f64..200.0) {
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let a = log_sum_exp(&shifted).unwrap();
            let b = log_sum_exp(&v).unwrap() + c;
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }

        #[test]
        fn softmax_is_probability(v in prop::collection::vec(-30.0f64..30.0, 1..16), tau in 0.01f64..10.0) {
            let p = softmax_temp(&v, tau).unwrap();
            prop_assert!(p.iter().all(|&x| x >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            for i in 0..v.len() {
                for j in 0..v.len() {
                    if v[i] > v[j] {
                        prop_assert!(p[i] >= p[j]);
                    }
                }
            }
        }

        #[test]
        fn row_normalize_sums_to_one(rows in 1usize..8, cols in 1usize..8, seed in prop::collection::vec(1e-3f64..100.0, 64)) {
            let m = Matrix::from_fn(rows, cols, |i, j| seed[(i * cols + j) % seed.len()]);
            let r = row_normalize(&m).unwrap();
            for s in r.row_sums() {
                prop_assert!((s - 1.0).abs() <= 1e-12);
            }
        }
    }
}
