//! Dense row-major matrices and the seeded random source shared by every
//! other part of the engine.

use std::fmt;

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Added under the square root of every per-column variance.
pub const VAR_EPS: f64 = 1e-7;

/// Default guard for row L2 normalization.
pub const NORM_EPS: f64 = 1e-8;

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows.min(6) {
            write!(f, "{:?}", &self.row(r)[..self.cols.min(8)])?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 1.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn scalar(v: f64) -> Self {
        Self::filled(1, 1, v)
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "from_vec",
                format!("{} values cannot fill a {rows}x{cols} matrix", data.len()),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from nested rows. Panics on ragged input; meant for
    /// literals in tests and fixtures.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Matrix {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn row_vector(values: &[f64]) -> Self {
        Matrix {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
    }

    /// Value of a 1x1 matrix.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.shape(), (1, 1));
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
        debug_assert_eq!(self.shape(), other.shape());
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
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

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        gemm("matmul", self, false, other, false)
    }

    /// `self^T * other` without materializing the transpose.
    pub fn matmul_tn(&self, other: &Matrix) -> Result<Matrix> {
        gemm("matmul_tn", self, true, other, false)
    }

    /// `self * other^T` without materializing the transpose.
    pub fn matmul_nt(&self, other: &Matrix) -> Result<Matrix> {
        gemm("matmul_nt", self, false, other, true)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        debug_assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Column means as a 1xC row vector.
    pub fn column_means(&self) -> Matrix {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (o, &v) in out.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        let n = self.rows as f64;
        out.iter_mut().for_each(|o| *o /= n);
        Matrix::row_vector(&out)
    }

    /// Per-column mean and `sqrt(population variance + VAR_EPS)`.
    pub fn column_mean_std(&self) -> Result<(Matrix, Matrix)> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::domain(
                "column_mean_std",
                format!("empty {}x{} matrix", self.rows, self.cols),
            ));
        }
        let means = self.column_means();
        let mut var = vec![0.0; self.cols];
        for r in 0..self.rows {
            for ((v, &x), &mu) in var.iter_mut().zip(self.row(r)).zip(means.data()) {
                let d = x - mu;
                *v += d * d;
            }
        }
        let n = self.rows as f64;
        let stds: Vec<f64> = var.iter().map(|v| (v / n + VAR_EPS).sqrt()).collect();
        Ok((means, Matrix::row_vector(&stds)))
    }

    /// Divides every row by `(||row||_2 + eps)`.
    pub fn row_l2_normalize(&self, eps: f64) -> Matrix {
        let mut out = self.clone();
        for r in 0..self.rows {
            let row = out.row_mut(r);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let d = norm + eps;
            if d > 0.0 {
                row.iter_mut().for_each(|v| *v /= d);
            }
        }
        out
    }

    /// Rows selected by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// Index of the largest entry in each row; ties go to the lowest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.rows)
            .map(|r| {
                let row = self.row(r);
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

fn gemm(op: &str, a: &Matrix, ta: bool, b: &Matrix, tb: bool) -> Result<Matrix> {
    let (n, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (k2, m) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
    if k != k2 {
        return Err(Error::shape(
            op,
            format!("left operand is {}x{}, right operand is {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let mut out = vec![0.0; n * m];
    if n > 0 && m > 0 && k > 0 {
        let (rsa, csa) = if ta { (1, a.cols as isize) } else { (a.cols as isize, 1) };
        let (rsb, csb) = if tb { (1, b.cols as isize) } else { (b.cols as isize, 1) };
        // SAFETY: the strides describe exactly the row-major buffers of `a`,
        // `b` and `out`, whose lengths match the checked dimensions.
        unsafe {
            matrixmultiply::dgemm(
                n,
                k,
                m,
                1.0,
                a.data.as_ptr(),
                rsa,
                csa,
                b.data.as_ptr(),
                rsb,
                csb,
                0.0,
                out.as_mut_ptr(),
                m as isize,
                1,
            );
        }
    }
    Ok(Matrix {
        rows: n,
        cols: m,
        data: out,
    })
}

/// Seeded, platform-independent random source (ChaCha8).
#[derive(Clone, Debug)]
pub struct RngState {
    seed: u64,
    inner: ChaCha8Rng,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        RngState {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream; does not advance `self`.
    pub fn fork(&self, stream: u64) -> RngState {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream.wrapping_add(1));
        RngState {
            seed: self.seed,
            inner,
        }
    }

    pub fn normal(&mut self, rows: usize, cols: usize, mean: f64, std: f64) -> Matrix {
        debug_assert!(std >= 0.0);
        let data = (0..rows * cols)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.inner);
                mean + std * z
            })
            .collect();
        Matrix { rows, cols, data }
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }
}

/// Convenience wrapper matching the free-function form used in experiment code.
pub fn rng_normal(state: &mut RngState, rows: usize, cols: usize, mean: f64, std: f64) -> Matrix {
    state.normal(rows, cols, mean, std)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn triple_loop(a: &Matrix, b: &Matrix) -> Matrix {
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
    fn matmul_identity_and_hand_case() {
        let a = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        assert_eq!(Matrix::identity(2).matmul(&a).unwrap(), a);
        let b = Matrix::from_rows(&[[0.0], [1.0]]);
        assert_eq!(a.matmul(&b).unwrap(), Matrix::from_rows(&[[2.0], [4.0]]));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = RngState::new(3);
        let a = rng.normal(5, 3, 0.0, 1.0);
        let b = rng.normal(3, 4, 0.0, 1.0);
        assert!(a.matmul(&b).unwrap().max_abs_diff(&triple_loop(&a, &b)) <= 1e-12);
        let bt = b.transpose();
        assert!(a.matmul_nt(&bt).unwrap().max_abs_diff(&triple_loop(&a, &b)) <= 1e-12);
        let at = a.transpose();
        assert!(at.matmul_tn(&b).unwrap().max_abs_diff(&triple_loop(&a, &b)) <= 1e-12);
        assert!(Matrix::zeros(2, 3).matmul_tn(&Matrix::zeros(2, 3)).is_ok());
        assert_eq!(Matrix::zeros(0, 3).matmul(&Matrix::zeros(3, 2)).unwrap().shape(), (0, 2));
    }

    #[test]
    fn matmul_shape_error_names_operands() {
        let err = Matrix::zeros(2, 3).matmul(&Matrix::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn column_stats() {
        let same = Matrix::from_rows(&[[1.0, 5.0], [1.0, 5.0], [1.0, 5.0]]);
        let (_, s) = same.column_mean_std().unwrap();
        assert!(s.data().iter().all(|&v| v == VAR_EPS.sqrt()));

        let col = Matrix::from_rows(&[[1.0], [3.0]]);
        let (m, s) = col.column_mean_std().unwrap();
        assert_eq!(m.item(), 2.0);
        assert_eq!(s.item(), (1.0 + 1e-7f64).sqrt());

        let one = Matrix::from_rows(&[[4.0, -2.0]]);
        let (m, s) = one.column_mean_std().unwrap();
        assert_eq!(m, one);
        assert!(s.data().iter().all(|&v| v == VAR_EPS.sqrt()));

        assert!(Matrix::zeros(0, 3).column_mean_std().is_err());
    }

    #[test]
    fn normalize_rows() {
        let m = Matrix::from_rows(&[[3.0, 4.0]]);
        assert_eq!(m.row_l2_normalize(0.0), Matrix::from_rows(&[[0.6, 0.8]]));
        let z = Matrix::zeros(1, 3);
        assert_eq!(z.row_l2_normalize(1e-8), z);

        // Output norm is exactly n / (n + eps), so the gap to 1 is eps / n.
        let mut rng = RngState::new(11);
        let x = rng.normal(6, 4, 0.0, 1.0);
        let r = x.row_l2_normalize(1e-8);
        for i in 0..6 {
            let n_in: f64 = x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            let n: f64 = r.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - n_in / (n_in + 1e-8)).abs() < 1e-12);
            assert!((n - 1.0).abs() <= 1e-8 / n_in + 1e-15);
        }
        let r0 = x.row_l2_normalize(0.0);
        for i in 0..6 {
            let n: f64 = r0.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn rng_contract() {
        let mut a = RngState::new(42);
        assert!(a.normal(3, 3, 2.5, 0.0).data().iter().all(|&v| v == 2.5));
        let x = RngState::new(9).normal(4, 4, 0.0, 1.0);
        let y = RngState::new(9).normal(4, 4, 0.0, 1.0);
        assert_eq!(x, y);

        let s = RngState::new(5).normal(10_000, 1, 0.0, 1.0);
        let mean = s.sum() / 10_000.0;
        let var = s.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 10_000.0;
        assert!(mean.abs() < 0.05);
        assert!((var.sqrt() - 1.0).abs() < 0.05);
    }

    #[test]
    fn argmax_ties_go_low() {
        let m = Matrix::from_rows(&[[0.1, 0.9], [0.5, 0.5]]);
        assert_eq!(m.argmax_rows(), vec![1, 0]);
    }
}
