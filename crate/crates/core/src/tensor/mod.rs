//! Dense row-major matrices, the reference matmul and softmax.
//!
//! Everything here accumulates in `f64` in a fixed left-to-right order so the
//! results are deterministic and can serve as oracles for the kernels.

mod io;

pub use io::{decode_tensor, encode_tensor, read_tensor, write_tensor, TensorHeader};

use crate::{Error, Result, Scalar};

/// Row-major matrix of finite values.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

/// Vector of finite values.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseVector<T> {
    data: Vec<T>,
}

fn check_finite<T: Scalar>(data: &[T]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { index }),
        None => Ok(()),
    }
}

impl<T: Scalar> DenseMatrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        check_finite(&data)?;
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    /// Builds a matrix from a generator; panics if the generator yields a
    /// non-finite value.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                let v = f(i, j);
                assert!(v.is_finite(), "non-finite value at ({i}, {j})");
                data.push(v);
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[&[T]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::shape("ragged rows"));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
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
    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// Rows `from..to` (half-open).
    pub fn slice_rows(&self, from: usize, to: usize) -> Result<Self> {
        if from > to || to > self.rows {
            return Err(Error::OutOfRange(format!(
                "rows {from}..{to} of a {}-row matrix",
                self.rows
            )));
        }
        Ok(Self {
            rows: to - from,
            cols: self.cols,
            data: self.data[from * self.cols..to * self.cols].to_vec(),
        })
    }

    /// Columns `from..to` (half-open).
    pub fn slice_cols(&self, from: usize, to: usize) -> Result<Self> {
        if from > to || to > self.cols {
            return Err(Error::OutOfRange(format!(
                "cols {from}..{to} of a {}-col matrix",
                self.cols
            )));
        }
        Ok(Self::from_fn(self.rows, to - from, |i, j| {
            self.get(i, from + j)
        }))
    }

    /// PyTorch-style row slice `m[start:end]`, where negative indices count
    /// from the end. `None` means the corresponding end of the matrix.
    /// Indices that fall outside the matrix are errors, not clamped.
    pub fn slice_rows_signed(&self, start: Option<isize>, end: Option<isize>) -> Result<Self> {
        let from = match start {
            Some(i) => resolve_index(i, self.rows)?,
            None => 0,
        };
        let to = match end {
            Some(i) => resolve_index(i, self.rows)?,
            None => self.rows,
        };
        self.slice_rows(from, to)
    }

    pub(crate) fn push_row(&mut self, row: &[T]) -> Result<()> {
        if self.rows == 0 && self.data.is_empty() && self.cols == 0 {
            self.cols = row.len();
        }
        if row.len() != self.cols {
            return Err(Error::shape(format!(
                "row of length {} into a {}-col matrix",
                row.len(),
                self.cols
            )));
        }
        check_finite(row)?;
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }

    /// Drops the first `n` rows.
    pub(crate) fn remove_front_rows(&mut self, n: usize) {
        let n = n.min(self.rows);
        self.data.drain(..n * self.cols);
        self.rows -= n;
    }

    /// Multiplies column `j` by `factors[j]`.
    pub fn scale_cols(&self, factors: &[T]) -> Result<Self> {
        if factors.len() != self.cols {
            return Err(Error::shape("column factor length"));
        }
        let out = Self::from_fn(self.rows, self.cols, |i, j| self.get(i, j) * factors[j]);
        Ok(out)
    }

    /// Divides column `j` by `divisors[j]`.
    pub fn div_cols(&self, divisors: &[T]) -> Result<Self> {
        if divisors.len() != self.cols {
            return Err(Error::shape("column divisor length"));
        }
        let out = Self::from_fn(self.rows, self.cols, |i, j| self.get(i, j) / divisors[j]);
        Ok(out)
    }

    /// Element-wise conversion to another scalar type.
    pub fn cast<U: Scalar>(&self) -> DenseMatrix<U> {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| U::narrow(v.widen())).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::shape("max_abs_diff of differently shaped matrices"));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.widen() - b.widen()).abs())
            .fold(0.0, f64::max))
    }
}

/// Resolves a possibly negative index against a dimension of length `len`.
/// `-1` is the last element; `len` itself is a valid end bound.
pub fn resolve_index(i: isize, len: usize) -> Result<usize> {
    let resolved = if i < 0 { len as isize + i } else { i };
    if resolved < 0 || resolved as usize > len {
        return Err(Error::OutOfRange(format!("index {i} for length {len}")));
    }
    Ok(resolved as usize)
}

/// `[a; b]`, vertical concatenation.
pub fn concat_rows<T: Scalar>(a: &DenseMatrix<T>, b: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
    if a.rows == 0 {
        return Ok(b.clone());
    }
    if b.rows == 0 {
        return Ok(a.clone());
    }
    if a.cols != b.cols {
        return Err(Error::shape(format!(
            "concat of {}-col and {}-col matrices",
            a.cols, b.cols
        )));
    }
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Ok(DenseMatrix {
        rows: a.rows + b.rows,
        cols: a.cols,
        data,
    })
}

/// Reference product. Each output element is accumulated in `f64` over `k`
/// in increasing order and rounded once.
pub fn matmul_ref<T: Scalar>(a: &DenseMatrix<T>, b: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
    if a.cols != b.rows {
        return Err(Error::shape(format!(
            "{}x{} times {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Vec::with_capacity(a.rows * b.cols);
    let mut acc = vec![0.0f64; b.cols];
    for i in 0..a.rows {
        acc.fill(0.0);
        for (k, &av) in a.row(i).iter().enumerate() {
            let av = av.widen();
            for (s, &bv) in acc.iter_mut().zip(b.row(k)) {
                *s += av * bv.widen();
            }
        }
        out.extend(acc.iter().map(|&s| T::narrow(s)));
    }
    Ok(DenseMatrix {
        rows: a.rows,
        cols: b.cols,
        data: out,
    })
}

/// `x · m` for a row vector `x`, same accumulation rules as [`matmul_ref`].
pub fn vecmat<T: Scalar>(x: &[T], m: &DenseMatrix<T>) -> Result<Vec<T>> {
    if x.len() != m.rows {
        return Err(Error::shape(format!(
            "vector of length {} times {}x{}",
            x.len(),
            m.rows,
            m.cols
        )));
    }
    let mut acc = vec![0.0f64; m.cols];
    for (k, &xv) in x.iter().enumerate() {
        let xv = xv.widen();
        for (a, &w) in acc.iter_mut().zip(m.row(k)) {
            *a += xv * w.widen();
        }
    }
    Ok(acc.into_iter().map(T::narrow).collect())
}

/// Dot product accumulated in `f64`.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .fold(0.0f64, |acc, (&x, &y)| acc + x.widen() * y.widen())
}

/// `softmax(scale · s)` with max subtraction.
pub fn softmax_row<T: Scalar>(s: &[T], scale: T) -> Result<DenseVector<T>> {
    if s.is_empty() {
        return Err(Error::Empty("softmax of an empty vector"));
    }
    check_finite(s)?;
    let scale = scale.widen();
    let max = s
        .iter()
        .map(|v| v.widen() * scale)
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = s.iter().map(|v| (v.widen() * scale - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(DenseVector {
        data: exps.into_iter().map(|e| T::narrow(e / sum)).collect(),
    })
}

impl<T: Scalar> DenseVector<T> {
    pub fn new(data: Vec<T>) -> Result<Self> {
        check_finite(&data)?;
        Ok(Self { data })
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            data: vec![T::zero(); len],
        }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    /// One-row matrix view of this vector.
    pub fn to_row_matrix(&self) -> DenseMatrix<T> {
        DenseMatrix {
            rows: 1,
            cols: self.data.len(),
            data: self.data.clone(),
        }
    }
}

impl<T> std::ops::Index<usize> for DenseVector<T> {
    type Output = T;
    fn index(&self, i: usize) -> &T {
        &self.data[i]
    }
}

impl<T: Scalar> From<DenseVector<T>> for Vec<T> {
    fn from(v: DenseVector<T>) -> Self {
        v.data
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Matrix;

    fn naive_product(a: &Matrix, b: &Matrix) -> Vec<f32> {
        let mut out = vec![0.0f32; a.rows() * b.cols()];
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0f64;
                for k in 0..a.cols() {
                    s += a.get(i, k) as f64 * b.get(k, j) as f64;
                }
                out[i * b.cols() + j] = s as f32;
            }
        }
        out
    }

    fn lcg(seed: &mut u64) -> f32 {
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*seed >> 40) as f32 / (1u64 << 24) as f32) * 2.0 - 1.0
    }

    #[test]
    fn identity_product() {
        let i2 = Matrix::identity(2);
        assert_eq!(matmul_ref(&i2, &i2).unwrap(), i2);
    }

    #[test]
    fn two_by_two_times_ones() {
        let a = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[&[1.0], &[1.0]]).unwrap();
        let c = matmul_ref(&a, &b).unwrap();
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn random_product_matches_triple_loop() {
        let mut seed = 7;
        let a = Matrix::from_fn(7, 5, |_, _| lcg(&mut seed));
        let b = Matrix::from_fn(5, 3, |_, _| lcg(&mut seed));
        let c = matmul_ref(&a, &b).unwrap();
        assert_eq!(c.data(), naive_product(&a, &b).as_slice());
    }

    #[test]
    fn product_dimension_mismatch() {
        let a = Matrix::zeros(2, 3);
        assert!(matches!(matmul_ref(&a, &a), Err(Error::Shape(_))));
    }

    #[test]
    fn product_commutes_with_row_slicing() {
        let mut seed = 11;
        let a = Matrix::from_fn(9, 6, |_, _| lcg(&mut seed));
        let b = Matrix::from_fn(6, 4, |_, _| lcg(&mut seed));
        let full = matmul_ref(&a, &b).unwrap();
        let part = matmul_ref(&a.slice_rows(2, 7).unwrap(), &b).unwrap();
        assert_eq!(full.slice_rows(2, 7).unwrap(), part);
    }

    #[test]
    fn rejects_non_finite() {
        assert!(matches!(
            Matrix::new(1, 2, vec![1.0, f32::NAN]),
            Err(Error::NonFinite { index: 1 })
        ));
        assert!(Matrix::new(1, 1, vec![f32::INFINITY]).is_err());
        assert!(Matrix::new(2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn softmax_uniform() {
        let p = softmax_row(&[0.0f32, 0.0, 0.0], 1.0).unwrap();
        for &v in p.as_slice() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
    }

    #[test]
    fn softmax_stable_for_large_inputs() {
        let p = softmax_row(&[1000.0f32, 0.0], 1.0).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-6);
        assert!(p[1].abs() < 1e-6);
    }

    #[test]
    fn softmax_matches_direct_evaluation() {
        let s = [1.0f32, 2.0, 3.0];
        let e: Vec<f64> = s.iter().map(|v| (0.5 * *v as f64).exp()).collect();
        let z: f64 = e.iter().sum();
        let p = softmax_row(&s, 0.5).unwrap();
        for (got, want) in p.as_slice().iter().zip(&e) {
            assert!((*got as f64 - want / z).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_empty_is_error() {
        assert!(matches!(softmax_row::<f32>(&[], 1.0), Err(Error::Empty(_))));
    }

    #[test]
    fn concat_shape_and_roundtrip() {
        let a = Matrix::from_fn(3, 4, |i, j| (i * 4 + j) as f32);
        let b = Matrix::from_fn(2, 4, |i, j| -((i * 4 + j) as f32));
        let c = concat_rows(&a, &b).unwrap();
        assert_eq!((c.rows(), c.cols()), (5, 4));
        assert_eq!(c.slice_rows(0, 3).unwrap(), a);
        assert_eq!(c.slice_rows(3, 5).unwrap(), b);
        let back = concat_rows(&c.slice_rows(0, 2).unwrap(), &c.slice_rows(2, 5).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn concat_rejects_col_mismatch() {
        let a = Matrix::zeros(1, 3);
        let b = Matrix::zeros(1, 4);
        assert!(concat_rows(&a, &b).is_err());
    }

    #[test]
    fn slice_out_of_range() {
        let m = Matrix::zeros(3, 2);
        assert!(m.slice_rows(2, 4).is_err());
        assert!(m.slice_rows(2, 1).is_err());
        assert!(m.slice_rows_signed(Some(-4), None).is_err());
    }

    #[test]
    fn signed_slicing_on_five_rows() {
        // rows hold 0..5 in the first column
        let m = Matrix::from_fn(5, 2, |i, j| (10 * i + j) as f32);
        let first_col = |x: &Matrix| (0..x.rows()).map(|i| x.get(i, 0)).collect::<Vec<_>>();
        // m[-2:] -> last two rows
        assert_eq!(first_col(&m.slice_rows_signed(Some(-2), None).unwrap()), [30.0, 40.0]);
        // m[:2] -> first two rows
        assert_eq!(first_col(&m.slice_rows_signed(None, Some(2)).unwrap()), [0.0, 10.0]);
        // m[1:-1] -> middle rows
        assert_eq!(
            first_col(&m.slice_rows_signed(Some(1), Some(-1)).unwrap()),
            [10.0, 20.0, 30.0]
        );
        // m[-5:] is the whole matrix
        assert_eq!(m.slice_rows_signed(Some(-5), None).unwrap(), m);
    }

    #[test]
    fn push_and_remove_front() {
        let mut m = Matrix::zeros(0, 2);
        m.push_row(&[1.0, 2.0]).unwrap();
        m.push_row(&[3.0, 4.0]).unwrap();
        m.push_row(&[5.0, 6.0]).unwrap();
        assert!(m.push_row(&[1.0]).is_err());
        assert!(m.push_row(&[f32::NAN, 0.0]).is_err());
        m.remove_front_rows(2);
        assert_eq!(m.data(), &[5.0, 6.0]);
        assert_eq!(m.rows(), 1);
    }

    #[test]
    fn generic_over_f64() {
        let a = crate::Matrix64::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let c = matmul_ref(&a, &crate::Matrix64::identity(2)).unwrap();
        assert_eq!(c, a);
        let p = softmax_row(&[0.0f64, 0.0], 1.0).unwrap();
        assert_eq!(p.as_slice(), &[0.5, 0.5]);
    }
}
