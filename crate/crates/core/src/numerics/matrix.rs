use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

use crate::error::{shape_err, Result};

/// Scalar type of the dense kernels. `f32` on production paths, `f64` for
/// gradient checking.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Default + Debug + Send + Sync + 'static
{
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal fits scalar type")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite scalar")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T = f32> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return shape_err(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            ));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return shape_err(format!("row {i} has {} columns, expected {cols}", r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(Self { rows: rows.len(), cols, data })
    }

    pub fn row_vector(data: Vec<T>) -> Self {
        Self { rows: 1, cols: data.len(), data }
    }

    pub fn scalar(x: T) -> Self {
        Self { rows: 1, cols: 1, data: vec![x] }
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

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Value of a 1x1 matrix.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn cast<U: Real>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| U::lit(x.as_f64())).collect(),
        }
    }

    /// `self += other`, element-wise.
    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return shape_err(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            ));
        }
        Ok(matmul(self, other))
    }
}

/// `a * b`. Fixed i-k-j loop order; callers guarantee `a.cols == b.rows`.
pub(crate) fn matmul<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    assert_eq!(a.cols, b.rows, "matmul inner dimension");
    let (n, k, m) = (a.rows, a.cols, b.cols);
    let mut out = Matrix::zeros(n, m);
    for i in 0..n {
        let orow = &mut out.data[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b.data[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a * bᵀ`.
pub(crate) fn matmul_bt<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    assert_eq!(a.cols, b.cols, "matmul_bt inner dimension");
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let ar = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = dot(ar, b.row(j));
        }
    }
    out
}

/// `aᵀ * b`.
pub(crate) fn matmul_at<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    assert_eq!(a.rows, b.rows, "matmul_at inner dimension");
    let (k, n, m) = (a.rows, a.cols, b.cols);
    let mut out = Matrix::zeros(n, m);
    for p in 0..k {
        let arow = a.row(p);
        let brow = b.row(p);
        for (i, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let orow = &mut out.data[i * m..(i + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows<T: Real>(m: &Matrix<T>) -> Matrix<T> {
    let mut out = m.clone();
    for r in 0..out.rows {
        softmax_in_place(out.row_mut(r));
    }
    out
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// Logistic function, kept strictly inside (0, 1) even where the exact
/// value rounds to an endpoint.
#[inline]
pub fn sigmoid_scalar<T: Real>(x: T) -> T {
    let y = T::one() / (T::one() + (-x).exp());
    let hi = T::one() - T::epsilon() / T::lit(2.0);
    y.max(T::min_positive_value()).min(hi)
}

pub fn sigmoid<T: Real>(m: &Matrix<T>) -> Matrix<T> {
    m.map(sigmoid_scalar)
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `gain ⊙ (v − mean) / sqrt(var + eps) + bias`, population variance.
pub fn layer_norm<T: Real>(v: &[T], gain: &[T], bias: &[T], eps: T) -> Result<Vec<T>> {
    if v.len() != gain.len() || v.len() != bias.len() {
        return shape_err(format!(
            "layer_norm lengths {} / {} / {}",
            v.len(),
            gain.len(),
            bias.len()
        ));
    }
    if v.is_empty() {
        return shape_err("layer_norm of empty vector");
    }
    let mut out = vec![T::zero(); v.len()];
    layer_norm_row(v, gain, bias, eps, &mut out);
    Ok(out)
}

/// Writes the normalized row into `out` and returns `1 / sqrt(var + eps)`.
pub(crate) fn layer_norm_row<T: Real>(v: &[T], gain: &[T], bias: &[T], eps: T, out: &mut [T]) -> T {
    let n = T::from_usize(v.len()).unwrap();
    let mean = v.iter().copied().sum::<T>() / n;
    let var = v.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
    let inv_std = T::one() / (var + eps).sqrt();
    for i in 0..v.len() {
        out[i] = gain[i] * (v[i] - mean) * inv_std + bias[i];
    }
    inv_std
}

pub fn frobenius_norm<T: Real>(m: &Matrix<T>) -> T {
    m.data.iter().map(|&x| x * x).sum::<T>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(rows: &[&[f64]]) -> Matrix<f64> {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn naive(a: &Matrix<f64>, b: &Matrix<f64>) -> Matrix<f64> {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for p in 0..a.cols() {
                    s += a.get(i, p) * b.get(p, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    #[test]
    fn matmul_examples() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = m(&[&[5.0, 6.0], &[7.0, 8.0]]);
        assert_eq!(Matrix::identity(2).matmul(&a).unwrap(), a);
        let expected = naive(&a, &b);
        assert_eq!(expected, m(&[&[19.0, 22.0], &[43.0, 50.0]]));
        assert_eq!(a.matmul(&b).unwrap(), expected);
        assert_eq!(Matrix::zeros(3, 2).matmul(&a).unwrap(), Matrix::zeros(3, 2));
        assert!(a.matmul(&Matrix::zeros(3, 1)).is_err());
    }

    #[test]
    fn transposed_products_match_naive() {
        let a = m(&[&[1.0, -2.0, 0.5], &[3.0, 4.0, -1.0]]);
        let b = m(&[&[2.0, 1.0, 0.0], &[0.0, -1.0, 3.0], &[1.0, 1.0, 1.0], &[4.0, 0.0, 2.0]]);
        assert_eq!(matmul_bt(&a, &b), naive(&a, &b.transpose()));
        let c = m(&[&[1.0, 2.0], &[0.0, 1.0]]);
        assert_eq!(matmul_at(&a, &c), naive(&a.transpose(), &c));
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&m(&[&[0.0, 0.0]]));
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax_rows(&Matrix::<f32>::row_vector(vec![1000.0; 3]));
        for &x in s.data() {
            assert!((x - 1.0 / 3.0).abs() < 1e-7);
        }
        let s = softmax_rows(&m(&[&[0.0, 3f64.ln()]]));
        assert!((s.get(0, 0) - 0.25).abs() < 1e-12);
        assert!((s.get(0, 1) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_examples() {
        assert_eq!(sigmoid_scalar(0.0f32), 0.5);
        let y = sigmoid_scalar(40.0f32);
        assert!(y < 1.0 && (1.0 - y) < 1e-6);
        assert!(sigmoid_scalar(-200.0f32) > 0.0);
        assert!((sigmoid_scalar(3f64.ln()) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_examples() {
        let out = layer_norm(&[2.0f64; 4], &[1.0; 4], &[0.0; 4], 1e-5).unwrap();
        assert!(out.iter().all(|&x| x == 0.0));
        let out = layer_norm(&[1.0f64, -1.0], &[1.0; 2], &[0.0; 2], 1e-12).unwrap();
        assert!((out[0] - 1.0).abs() < 1e-9 && (out[1] + 1.0).abs() < 1e-9);
        let out = layer_norm(&[3.0f64, 1.0, 7.0], &[0.0; 3], &[0.5, -1.0, 2.0], 1e-5).unwrap();
        assert_eq!(out, vec![0.5, -1.0, 2.0]);
        assert!(layer_norm(&[1.0f64], &[1.0, 1.0], &[0.0], 1e-5).is_err());
    }

    #[test]
    fn frobenius_examples() {
        assert!((frobenius_norm(&Matrix::<f64>::identity(2)) - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(frobenius_norm(&m(&[&[3.0, 4.0]])), 5.0);
        assert_eq!(frobenius_norm(&Matrix::<f64>::zeros(2, 3)), 0.0);
    }

    fn matrix_strategy(rows: usize, cols: usize, lo: f32, hi: f32) -> impl Strategy<Value = Matrix<f32>> {
        proptest::collection::vec(lo..hi, rows * cols)
            .prop_map(move |d| Matrix::from_vec(rows, cols, d).unwrap())
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(mat in matrix_strategy(4, 7, -80.0, 80.0)) {
            let s = softmax_rows(&mat);
            for r in 0..s.rows() {
                let sum: f32 = s.row(r).iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-6);
                prop_assert!(s.row(r).iter().all(|&x| (0.0..=1.0).contains(&x)));
            }
        }

        #[test]
        fn sigmoid_strictly_inside_unit_interval(x in -1e4f32..1e4) {
            let y = sigmoid_scalar(x);
            prop_assert!(y > 0.0 && y < 1.0);
        }

        #[test]
        fn matmul_is_associative(
            a in matrix_strategy(3, 4, 0.5, 1.5),
            b in matrix_strategy(4, 5, 0.5, 1.5),
            c in matrix_strategy(5, 2, 0.5, 1.5),
        ) {
            let left = matmul(&matmul(&a, &b), &c);
            let right = matmul(&a, &matmul(&b, &c));
            for (x, y) in left.data().iter().zip(right.data()) {
                prop_assert!((x - y).abs() <= 1e-4 * x.abs().max(y.abs()));
            }
        }
    }
}
