//! Dense linear algebra, normalization and loss primitives shared by every model.
//!
//! Everything here is generic over [`Real`] so the same code runs in 64-bit
//! (gradient checks, oracles) and 32-bit (long training runs). Reductions are
//! always sequential, so results are reproducible bit-for-bit for a given
//! precision.

use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, Deref, DerefMut, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Norms below this are treated as zero by [`l2_normalize`].
pub const ZERO_NORM: f64 = 1e-30;

/// Probabilities are floored here before taking logs in [`cross_entropy`].
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumericsError {
    #[error("vector has zero norm")]
    ZeroVector,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("non-finite value encountered")]
    NonFinite,
}

pub type Result<T> = std::result::Result<T, NumericsError>;

/// Floating point scalar used throughout the crate (`f32` or `f64`).
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 converts to every Real")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("every Real converts to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// A dense vector of reals.
#[derive(Clone, PartialEq, Default)]
pub struct DenseVector<T> {
    data: Vec<T>,
}

impl<T: Real> DenseVector<T> {
    pub fn zeros(dim: usize) -> Self {
        Self {
            data: vec![T::zero(); dim],
        }
    }

    pub fn from_f64(values: &[f64]) -> Self {
        values.iter().map(|&v| T::of(v)).collect()
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn into_inner(self) -> Vec<T> {
        self.data
    }

    pub fn norm(&self) -> T {
        norm(&self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }
}

impl<T> From<Vec<T>> for DenseVector<T> {
    fn from(data: Vec<T>) -> Self {
        Self { data }
    }
}

impl<T> FromIterator<T> for DenseVector<T> {
    fn from_iter<I: IntoIterator<Item = T>>(iter: I) -> Self {
        Self {
            data: iter.into_iter().collect(),
        }
    }
}

impl<T> Deref for DenseVector<T> {
    type Target = [T];
    fn deref(&self) -> &[T] {
        &self.data
    }
}

impl<T> DerefMut for DenseVector<T> {
    fn deref_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
}

impl<T: fmt::Debug> fmt::Debug for DenseVector<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.data.iter()).finish()
    }
}

/// Row-major dense matrix.
#[derive(Clone, PartialEq)]
pub struct DenseMatrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> DenseMatrix<T> {
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
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(NumericsError::DimensionMismatch {
                expected: rows * cols,
                found: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows. All rows must have the same length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(NumericsError::DimensionMismatch {
                    expected: cols,
                    found: row.len(),
                });
            }
            data.extend(row.iter().map(|&v| T::of(v)));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
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

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> DenseVector<T> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn set_column(&mut self, j: usize, values: &[T]) {
        debug_assert_eq!(values.len(), self.rows);
        for (i, &v) in values.iter().enumerate() {
            self[(i, j)] = v;
        }
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    /// Euclidean norm of every column, accumulated row by row.
    pub fn column_norms(&self) -> Vec<T> {
        let mut sq = vec![T::zero(); self.cols];
        for i in 0..self.rows {
            for (acc, &v) in sq.iter_mut().zip(self.row(i)) {
                *acc += v * v;
            }
        }
        sq.into_iter().map(Float::sqrt).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn min_entry(&self) -> T {
        self.data.iter().copied().fold(T::infinity(), T::min)
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs().as_f64())
            .fold(0.0, f64::max)
    }

    pub fn cast<U: Real>(&self) -> DenseMatrix<U> {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }
}

impl<T> std::ops::Index<(usize, usize)> for DenseMatrix<T> {
    type Output = T;
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.cols + j]
    }
}

impl<T> std::ops::IndexMut<(usize, usize)> for DenseMatrix<T> {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + j]
    }
}

impl<T: fmt::Debug> fmt::Debug for DenseMatrix<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "DenseMatrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", &self.data[i * self.cols..(i + 1) * self.cols])?;
        }
        write!(f, "]")
    }
}

pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub fn norm<T: Real>(v: &[T]) -> T {
    dot(v, v).sqrt()
}

/// `y += alpha * x`
pub fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn l2_normalize<T: Real>(v: &[T]) -> Result<DenseVector<T>> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(NumericsError::NonFinite);
    }
    let n = norm(v);
    if n.as_f64() < ZERO_NORM {
        return Err(NumericsError::ZeroVector);
    }
    Ok(v.iter().map(|&x| x / n).collect())
}

/// Softmax of `beta * logits`, computed with max-subtraction.
pub fn softmax_beta<T: Real>(logits: &[T], beta: T) -> Result<DenseVector<T>> {
    if logits.iter().any(|x| !x.is_finite()) || !beta.is_finite() {
        return Err(NumericsError::NonFinite);
    }
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let mut out: Vec<T> = logits.iter().map(|&l| (beta * (l - max)).exp()).collect();
    let total: T = out.iter().copied().sum();
    for p in &mut out {
        *p /= total;
    }
    Ok(out.into())
}

pub fn softmax<T: Real>(logits: &[T]) -> Result<DenseVector<T>> {
    softmax_beta(logits, T::one())
}

/// `-ln(probs[target])` with the probability floored at [`PROB_FLOOR`].
pub fn cross_entropy<T: Real>(probs: &[T], target: usize) -> Result<T> {
    let p = *probs.get(target).ok_or(NumericsError::IndexOutOfRange {
        index: target,
        len: probs.len(),
    })?;
    Ok(-(p.max(T::of(PROB_FLOOR))).ln())
}

pub fn matvec<T: Real>(m: &DenseMatrix<T>, v: &[T]) -> Result<DenseVector<T>> {
    if v.len() != m.cols() {
        return Err(NumericsError::DimensionMismatch {
            expected: m.cols(),
            found: v.len(),
        });
    }
    Ok((0..m.rows()).map(|i| dot(m.row(i), v)).collect())
}

/// `Mᵀ u` without materializing the transpose.
pub fn transpose_matvec<T: Real>(m: &DenseMatrix<T>, u: &[T]) -> Result<DenseVector<T>> {
    if u.len() != m.rows() {
        return Err(NumericsError::DimensionMismatch {
            expected: m.rows(),
            found: u.len(),
        });
    }
    let mut out = vec![T::zero(); m.cols()];
    for (i, &ui) in u.iter().enumerate() {
        if ui != T::zero() {
            axpy(ui, m.row(i), &mut out);
        }
    }
    Ok(out.into())
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax<T: Real>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Seeded pseudo-random generator (ChaCha8 stream cipher).
///
/// Identical seeds give identical streams. Independent sub-streams are
/// derived with [`Rng::fork`] so that, e.g., data shuffling and weight
/// initialization do not perturb each other.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// A new generator whose stream depends only on this generator's seed and `stream`.
    pub fn fork(&self, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream.wrapping_add(1));
        Self { seed: self.seed, inner }
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn uniform_range(&mut self, low: f64, high: f64) -> f64 {
        low + (high - low) * self.uniform()
    }

    /// Standard normal draw (Box-Muller).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    /// `amount` distinct indices from `0..n`, in random order.
    pub fn sample_indices(&mut self, n: usize, amount: usize) -> Vec<usize> {
        rand::seq::index::sample(&mut self.inner, n, amount).into_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn normalize_three_four_five() {
        let v = l2_normalize(&[3.0f64, 4.0]).unwrap();
        assert!(close(v[0], 0.6, 1e-15) && close(v[1], 0.8, 1e-15));
    }

    #[test]
    fn normalize_unit_vector_is_identity() {
        let v = l2_normalize(&[1.0f64, 0.0, 0.0]).unwrap();
        assert_eq!(&*v, &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn normalize_zero_vector_fails() {
        assert_eq!(l2_normalize(&[0.0f64, 0.0]), Err(NumericsError::ZeroVector));
    }

    #[test]
    fn softmax_beta_hand_values() {
        let tiny = softmax_beta(&[10.0f64, 0.0], 1e-12).unwrap();
        assert!(close(tiny[0], 0.5, 1e-10) && close(tiny[1], 0.5, 1e-10));

        let soft = softmax_beta(&[10.0f64, 0.0], 0.005).unwrap();
        let sig = 1.0 / (1.0 + (-0.05f64).exp());
        assert!(close(soft[0], sig, 1e-14));
        assert!(close(soft[0], 0.5125, 1e-4));
        assert!(close(soft[1], 1.0 - sig, 1e-14));

        let sharp = softmax_beta(&[10.0f64, 0.0], 1.0).unwrap();
        assert!(close(sharp[0], 1.0 / (1.0 + (-10.0f64).exp()), 1e-14));
        assert!(close(sharp[1], 4.5397868702434395e-5, 1e-12));
    }

    #[test]
    fn cross_entropy_cases() {
        assert_eq!(cross_entropy(&[0.0f64, 1.0, 0.0], 1).unwrap(), 0.0);
        let uniform = vec![0.1f64; 10];
        assert!(close(cross_entropy(&uniform, 7).unwrap(), 10f64.ln(), 1e-12));
        let floored = cross_entropy(&[1.0f64, 1e-20], 1).unwrap();
        assert!(close(floored, -(1e-12f64).ln(), 1e-12));
        assert_eq!(
            cross_entropy(&[1.0f64], 3),
            Err(NumericsError::IndexOutOfRange { index: 3, len: 1 })
        );
    }

    #[test]
    fn matvec_cases() {
        let m = DenseMatrix::<f64>::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(&*matvec(&m, &[1.0, 1.0]).unwrap(), &[3.0, 7.0]);
        let id = DenseMatrix::<f64>::identity(3);
        assert_eq!(&*matvec(&id, &[1.0, -2.0, 5.0]).unwrap(), &[1.0, -2.0, 5.0]);
        let zero = DenseMatrix::<f64>::zeros(2, 3);
        assert_eq!(&*matvec(&zero, &[1.0, 2.0, 3.0]).unwrap(), &[0.0, 0.0]);
        assert_eq!(
            matvec(&m, &[1.0]),
            Err(NumericsError::DimensionMismatch { expected: 2, found: 1 })
        );
    }

    #[test]
    fn rng_is_reproducible_and_forks_are_independent() {
        let mut a = Rng::new(7);
        let mut b = Rng::new(7);
        let xs: Vec<f64> = (0..5).map(|_| a.uniform()).collect();
        let ys: Vec<f64> = (0..5).map(|_| b.uniform()).collect();
        assert_eq!(xs, ys);
        let mut f1 = a.fork(1);
        let mut f2 = a.fork(2);
        assert_ne!(f1.uniform(), f2.uniform());
        // forking does not depend on how much of the parent stream was consumed
        let mut g1 = Rng::new(7).fork(1);
        assert_eq!(Rng::new(7).fork(1).uniform(), g1.uniform());
    }

    mod props {
        use super::*;
        use crate::numerics::Rng;
        use proptest::prelude::*;

        fn nonzero_vec() -> impl Strategy<Value = Vec<f64>> {
            prop::collection::vec(-100.0f64..100.0, 1..12).prop_filter("nonzero", |v| norm(v) > 1e-6)
        }

        proptest! {
            #[test]
            fn normalize_is_idempotent(v in nonzero_vec()) {
                let once = l2_normalize(&v).unwrap();
                prop_assert!((once.norm() - 1.0).abs() < 1e-12);
                let twice = l2_normalize(&once).unwrap();
                for (a, b) in once.iter().zip(twice.iter()) {
                    prop_assert!((a - b).abs() < 1e-15);
                }
            }

            #[test]
            fn softmax_is_shift_invariant(
                l in prop::collection::vec(-50.0f64..50.0, 1..10),
                c in -100.0f64..100.0,
                beta in 0.001f64..5.0,
            ) {
                let p = softmax_beta(&l, beta).unwrap();
                let shifted: Vec<f64> = l.iter().map(|x| x + c).collect();
                let q = softmax_beta(&shifted, beta).unwrap();
                prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(p.iter().all(|&x| x > 0.0));
                for (a, b) in p.iter().zip(q.iter()) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }

            #[test]
            fn transpose_matvec_matches_explicit_transpose(
                rows in 1usize..6, cols in 1usize..6, seed in any::<u64>(),
            ) {
                let mut rng = Rng::new(seed);
                let m = DenseMatrix::<f64>::from_fn(rows, cols, |_, _| rng.uniform_range(-1.0, 1.0));
                let u: Vec<f64> = (0..rows).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
                let a = transpose_matvec(&m, &u).unwrap();
                let b = matvec(&m.transpose(), &u).unwrap();
                for (x, y) in a.iter().zip(b.iter()) {
                    prop_assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }
}
