//! Dense row-major matrices, the small set of kernels the models need, and a
//! seeded random source.
//!
//! Every reduction accumulates over its inner index in ascending order. Nothing
//! here uses fused multiply-add or reassociation, so results are bit-identical
//! across runs and platforms for identical inputs.

use std::collections::HashSet;
use std::fmt;
use std::ops::{Index, IndexMut};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tasks::Ordering;

/// Dense real matrix in row-major order.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MatrixRepr", into = "MatrixRepr")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// On-disk form: a shape header followed by the row-major entries.
#[derive(Serialize, Deserialize)]
struct MatrixRepr {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<MatrixRepr> for Matrix {
    type Error = Error;

    fn try_from(r: MatrixRepr) -> Result<Self> {
        Matrix::from_vec(r.rows, r.cols, r.data)
    }
}

impl From<Matrix> for MatrixRepr {
    fn from(m: Matrix) -> Self {
        MatrixRepr { rows: m.rows, cols: m.cols, data: m.data }
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            if r > 0 {
                write!(f, "; ")?;
            }
            for (c, v) in self.row(r).iter().enumerate() {
                if c > 0 {
                    write!(f, ", ")?;
                }
                write!(f, "{v}")?;
            }
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid(format!("matrix shape {rows}x{cols} has a zero dimension")));
        }
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "matrix data length {} does not match shape {rows}x{cols}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "from_vec" });
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows. Panics on ragged input; meant for
    /// literals in tests and examples.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Matrix { rows: rows.len(), cols, data }
    }

    pub fn column(values: &[f64]) -> Self {
        Matrix { rows: values.len(), cols: 1, data: values.to_vec() }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn col(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        transpose_into(&self.data, self.rows, self.cols, &mut out.data);
        out
    }

    /// Copy of the `rows x cols` block whose top-left corner is `(r0, c0)`.
    pub fn block(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> Matrix {
        assert!(r0 + rows <= self.rows && c0 + cols <= self.cols, "block out of range");
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            out.row_mut(r).copy_from_slice(&self.row(r0 + r)[c0..c0 + cols]);
        }
        out
    }

    pub fn set_block(&mut self, r0: usize, c0: usize, src: &Matrix) {
        assert!(r0 + src.rows <= self.rows && c0 + src.cols <= self.cols, "block out of range");
        for r in 0..src.rows {
            let c = self.cols;
            self.data[(r0 + r) * c + c0..(r0 + r) * c + c0 + src.cols].copy_from_slice(src.row(r));
        }
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|v| v * s).collect() }
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    fn zip_with(&self, other: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::mismatch(op, self.shape(), other.shape()));
        }
        let data: Vec<f64> = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op });
        }
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    /// Largest absolute entrywise difference; `None` on a shape mismatch.
    pub fn max_abs_diff(&self, other: &Matrix) -> Option<f64> {
        (self.shape() == other.shape()).then(|| {
            self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        })
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).fold(0.0, f64::max)
    }

    /// Sum of squares, accumulated in storage order.
    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    /// `self += s * other`.
    pub fn add_scaled(&mut self, other: &Matrix, s: f64) {
        assert_eq!(self.shape(), other.shape(), "add_scaled shape mismatch");
        axpy(s, &other.data, &mut self.data);
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

/// Matrix product `a * b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::mismatch("matmul", a.shape(), b.shape()));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    gemm_acc(&a.data, &b.data, &mut out.data, a.rows, a.cols, b.cols);
    if !out.is_finite() {
        return Err(Error::NonFinite { op: "matmul" });
    }
    Ok(out)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Matrix) -> Result<Matrix> {
    if !logits.is_finite() {
        return Err(Error::NonFinite { op: "softmax_rows" });
    }
    let mut out = logits.clone();
    for r in 0..out.rows {
        softmax_in_place(out.row_mut(r));
    }
    Ok(out)
}

/// Matrix of i.i.d. `N(mean, std^2)` entries.
pub fn sample_gaussian(rng: &mut SeededRng, rows: usize, cols: usize, mean: f64, std: f64) -> Result<Matrix> {
    if !(std >= 0.0) || !std.is_finite() || !mean.is_finite() {
        return Err(Error::invalid(format!("gaussian needs finite mean and std >= 0, got mean={mean} std={std}")));
    }
    if rows == 0 || cols == 0 {
        return Err(Error::invalid(format!("matrix shape {rows}x{cols} has a zero dimension")));
    }
    let data = (0..rows * cols).map(|_| mean + std * rng.normal()).collect();
    Ok(Matrix { rows, cols, data })
}

/// `m` distinct permutations of `0..n`. The identity is always ordering 0; the
/// rest are drawn uniformly without replacement.
pub fn random_orderings(n: usize, m: usize, rng: &mut SeededRng) -> Result<Vec<Ordering>> {
    if n == 0 || m == 0 {
        return Err(Error::invalid(format!("random_orderings needs n >= 1 and m >= 1, got n={n} m={m}")));
    }
    let total = factorial(n);
    if let Some(total) = total {
        if m as u128 > total {
            return Err(Error::invalid(format!("cannot draw {m} distinct orderings of {n} items ({total} exist)")));
        }
    }

    let identity: Vec<usize> = (0..n).collect();
    let mut out = vec![Ordering::identity(n)];

    // Dense regime: enumerate and sample, so rejection never stalls.
    if let Some(total) = total.filter(|&t| t <= 40_320 && (m as u128) * 2 > t) {
        let mut all = Vec::with_capacity(total as usize);
        let mut perm = identity.clone();
        loop {
            if perm != identity {
                all.push(perm.clone());
            }
            if !next_permutation(&mut perm) {
                break;
            }
        }
        rng.shuffle(&mut all);
        out.extend(all.into_iter().take(m - 1).map(Ordering::from_perm_unchecked));
        return Ok(out);
    }

    let mut seen: HashSet<Vec<usize>> = HashSet::from([identity.clone()]);
    while out.len() < m {
        let mut perm = identity.clone();
        rng.shuffle(&mut perm);
        if seen.insert(perm.clone()) {
            out.push(Ordering::from_perm_unchecked(perm));
        }
    }
    Ok(out)
}

fn factorial(n: usize) -> Option<u128> {
    (1..=n as u128).try_fold(1u128, |acc, k| acc.checked_mul(k))
}

fn next_permutation(p: &mut [usize]) -> bool {
    let n = p.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// Seeded random source backed by ChaCha8, whose output stream is fixed by its
/// algorithm definition and therefore identical on every platform.
#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng { seed, inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream keyed by `(seed, stream)`. Does not depend on how much
    /// of `self` has been consumed.
    pub fn fork(&self, stream: u64) -> SeededRng {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream.wrapping_add(1));
        SeededRng { seed: self.seed, inner }
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        // Lemire-style rejection keeps the draw unbiased.
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.inner.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        self.inner.try_fill_bytes(dest)
    }
}

// ---------------------------------------------------------------------------
// Slice kernels. Shapes are the caller's responsibility.

/// `y += a * x`.
#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// `out (m x n) += a (m x k) * b (k x n)`.
pub fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip != 0.0 {
                axpy(aip, &b[p * n..(p + 1) * n], out_row);
            }
        }
    }
}

/// `out (m x n) += a^T * b` where `a` is `k x m` and `b` is `k x n`.
pub fn gemm_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], k: usize, m: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &api) in a[p * m..(p + 1) * m].iter().enumerate() {
            if api != 0.0 {
                axpy(api, b_row, &mut out[i * n..(i + 1) * n]);
            }
        }
    }
}

pub fn transpose_into(src: &[f64], rows: usize, cols: usize, dst: &mut [f64]) {
    debug_assert_eq!(src.len(), rows * cols);
    debug_assert_eq!(dst.len(), rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::RngCore;

    #[test]
    fn matmul_hand_case() {
        let a = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = Matrix::from_rows(&[&[5.0], &[6.0]]);
        assert_eq!(matmul(&a, &b).unwrap(), Matrix::from_rows(&[&[17.0], &[39.0]]));
    }

    #[test]
    fn matmul_identity_and_zero() {
        let a = Matrix::from_rows(&[&[1.5, -2.0, 0.25], &[3.0, 4.0, -7.0]]);
        assert_eq!(matmul(&Matrix::identity(2), &a).unwrap(), a);
        assert_eq!(matmul(&Matrix::zeros(2, 2), &a).unwrap(), Matrix::zeros(2, 3));
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let err = matmul(&Matrix::zeros(2, 3), &Matrix::zeros(2, 3)).unwrap_err();
        assert!(err.to_string().contains("2x3 vs 2x3"), "{err}");
    }

    #[test]
    fn softmax_cases() {
        let uniform = softmax_rows(&Matrix::from_rows(&[&[0.7, 0.7, 0.7, 0.7]])).unwrap();
        for &v in uniform.data() {
            assert_eq!(v, 0.25);
        }
        let s = softmax_rows(&Matrix::from_rows(&[&[0.0, 2f64.ln()]])).unwrap();
        assert!((s[(0, 0)] - 1.0 / 3.0).abs() < 1e-15);
        assert!((s[(0, 1)] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let m = Matrix { rows: 1, cols: 2, data: vec![0.0, f64::NAN] };
        assert!(softmax_rows(&m).is_err());
    }

    #[test]
    fn gaussian_degenerate_and_deterministic() {
        let mut rng = SeededRng::new(3);
        let c = sample_gaussian(&mut rng, 2, 3, 1.25, 0.0).unwrap();
        assert!(c.data().iter().all(|&v| v == 1.25));
        let a = sample_gaussian(&mut SeededRng::new(9), 4, 4, 0.0, 1.0).unwrap();
        let b = sample_gaussian(&mut SeededRng::new(9), 4, 4, 0.0, 1.0).unwrap();
        assert_eq!(a, b);
        assert!(sample_gaussian(&mut rng, 1, 1, 0.0, -1.0).is_err());
    }

    #[test]
    fn gaussian_moments() {
        let m = sample_gaussian(&mut SeededRng::new(2024), 1000, 100, 0.0, 1.0).unwrap();
        let n = m.len() as f64;
        let mean = m.data().iter().sum::<f64>() / n;
        let var = m.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 0.02, "std {}", var.sqrt());
    }

    #[test]
    fn orderings_small_cases() {
        let mut rng = SeededRng::new(1);
        let one = random_orderings(1, 1, &mut rng).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].as_slice(), &[0]);

        let all = random_orderings(3, 6, &mut rng).unwrap();
        let set: HashSet<Vec<usize>> = all.iter().map(|o| o.as_slice().to_vec()).collect();
        assert_eq!(set.len(), 6);
        assert_eq!(all[0].as_slice(), &[0, 1, 2]);

        assert!(random_orderings(3, 7, &mut rng).is_err());
    }

    #[test]
    fn orderings_ten_of_eight() {
        let mut rng = SeededRng::new(5);
        let ords = random_orderings(8, 10, &mut rng).unwrap();
        assert_eq!(ords.len(), 10);
        assert_eq!(ords[0].as_slice(), &(0..8).collect::<Vec<_>>()[..]);
        let set: HashSet<Vec<usize>> = ords.iter().map(|o| o.as_slice().to_vec()).collect();
        assert_eq!(set.len(), 10);
    }

    #[test]
    fn rng_streams_repeat() {
        let mut a = SeededRng::new(77);
        let mut b = SeededRng::new(77);
        let xs: Vec<u64> = (0..64).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..64).map(|_| b.next_u64()).collect();
        assert_eq!(xs, ys);
        let mut f1 = a.fork(3);
        let mut f2 = SeededRng::new(77).fork(3);
        assert_eq!(f1.next_u64(), f2.next_u64());
        assert_ne!(SeededRng::new(77).fork(4).next_u64(), SeededRng::new(77).fork(3).next_u64());
    }

    fn small_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
        proptest::collection::vec(-3.0f64..3.0, rows * cols)
            .prop_map(move |d| Matrix::from_vec(rows, cols, d).unwrap())
    }

    proptest! {
        #[test]
        fn matmul_is_associative(a in small_matrix(3, 4), b in small_matrix(4, 2), c in small_matrix(2, 5)) {
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            let scale = left.max_abs().max(1.0);
            prop_assert!(left.max_abs_diff(&right).unwrap() / scale <= 1e-12);
        }

        #[test]
        fn softmax_rows_sum_to_one(row in proptest::collection::vec(-1e3f64..1e3, 1..20), shift in -50.0f64..50.0) {
            let m = Matrix::from_vec(1, row.len(), row.clone()).unwrap();
            let s = softmax_rows(&m).unwrap();
            prop_assert!((s.data().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(s.data().iter().all(|&v| v >= 0.0));
            let shifted = Matrix::from_vec(1, row.len(), row.iter().map(|v| v + shift).collect()).unwrap();
            let t = softmax_rows(&shifted).unwrap();
            prop_assert!(s.max_abs_diff(&t).unwrap() <= 1e-12);
        }
    }
}
