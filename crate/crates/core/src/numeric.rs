//! Dense row-major matrices, stable elementary functions and the seeded
//! random streams every other module draws from.

use rand_core::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Clamp margin applied before `arccos` on the differentiable path.
pub const ARCCOS_GRAD_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Builds a matrix from row-major data, rejecting bad lengths and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::from_vec",
                format!("{} values ({rows}x{cols})", rows * cols),
                data.len(),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Matrix::from_vec"));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::shape(
                    "Matrix::from_rows",
                    format!("{cols} columns"),
                    format!("{} columns in row {i}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Matrix::from_vec(rows.len(), cols, data)
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics, so zero-width matrices yield empty rows
        (0..self.rows).map(move |i| self.row(i))
    }

    /// Gathers the given rows into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::shape(
                "matmul",
                format!("{} rows on the right", self.cols),
                other.rows,
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = other.row(k);
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`, the shape used for `φ Wᵀ`.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::shape(
                "matmul_t",
                format!("{} columns on the right", self.cols),
                other.cols,
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other`, the shape used for weight gradients.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::shape(
                "t_matmul",
                format!("{} rows on the right", self.rows),
                other.rows,
            ));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for r in 0..self.rows {
            let a_row = self.row(r);
            let b_row = other.row(r);
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, a: f64) -> Matrix {
        self.map(|v| v * a)
    }

    pub fn row_norms(&self) -> Vec<f64> {
        self.row_iter().map(norm).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::EmptyLogits);
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("softmax"));
    }
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Row-wise softmax of a logit matrix.
pub fn softmax_rows(logits: &Matrix) -> Result<Matrix> {
    if logits.cols() == 0 {
        return Err(Error::EmptyLogits);
    }
    if !logits.is_finite() {
        return Err(Error::NonFinite("softmax_rows"));
    }
    let mut out = logits.clone();
    for i in 0..out.rows() {
        softmax_in_place(out.row_mut(i));
    }
    Ok(out)
}

/// `arccos` on the value path: the argument is clamped to `[-1, 1]`, so
/// floating-point overshoot never yields NaN.
pub fn safe_arccos(u: f64) -> Result<f64> {
    if u.is_nan() {
        return Err(Error::NonFinite("safe_arccos"));
    }
    Ok(u.clamp(-1.0, 1.0).acos())
}

/// `arccos` on the gradient path: the argument is clamped to
/// `[-1 + ε, 1 - ε]` and the returned pair is `(value, d value / d u)`.
/// The derivative is zero where the clamp is active.
pub fn arccos_with_grad(u: f64) -> (f64, f64) {
    let lo = -1.0 + ARCCOS_GRAD_EPS;
    let hi = 1.0 - ARCCOS_GRAD_EPS;
    if u <= lo {
        (lo.acos(), 0.0)
    } else if u >= hi {
        (hi.acos(), 0.0)
    } else {
        (u.acos(), -1.0 / (1.0 - u * u).sqrt())
    }
}

/// Index of the maximum; ties go to the lowest index.
pub fn argmax_tiebreak(v: &[f64]) -> Result<usize> {
    if v.is_empty() {
        return Err(Error::Empty("argmax"));
    }
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    Ok(best)
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation (n - 1 denominator); zero for fewer than two values.
pub fn sample_sd(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    let ss: f64 = v.iter().map(|x| (x - m) * (x - m)).sum();
    (ss / (v.len() - 1) as f64).sqrt()
}

const SPLITMIX_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 output function (xorshift-multiply finalizer).
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-based random stream.
///
/// Output `i` (1-based) is `mix64(key + i·γ)` where `γ` is the SplitMix64
/// Weyl increment and `key = mix64(seed ⊕ mix64(stream_id ⊕ γ))`. The whole
/// sequence is a function of `(seed, stream_id)` only, so it replays
/// bit-identically on every platform.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    key: u64,
    counter: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let key = mix64(seed ^ mix64(stream_id ^ SPLITMIX_GAMMA));
        RngStream {
            seed,
            stream_id,
            key,
            counter: 0,
        }
    }

    /// Stream keyed by a name (FNV-1a hash of its UTF-8 bytes) and an index.
    pub fn named(seed: u64, name: &str, index: u64) -> Self {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in name.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        RngStream::new(seed, h ^ mix64(index))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Derives an independent child stream from this one's key.
    pub fn fork(&self, index: u64) -> RngStream {
        RngStream::new(self.key, mix64(self.stream_id ^ index.wrapping_add(1)))
    }

    pub fn next_raw(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.key.wrapping_add(self.counter.wrapping_mul(SPLITMIX_GAMMA)))
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_raw() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)` (Lemire's multiply-shift with rejection).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let threshold = n.wrapping_neg() % n;
        loop {
            let m = u128::from(self.next_raw()) * u128::from(n);
            if (m as u64) >= threshold {
                return (m >> 64) as usize;
            }
        }
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        (self.next_raw() >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        self.next_raw()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        rand_core::impls::fill_bytes_via_next(self, dst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a[(i, k)] * b[(k, j)];
                }
                out[(i, j)] = s;
            }
        }
        out
    }

    fn random_matrix(rng: &mut RngStream, r: usize, c: usize) -> Matrix {
        let data = (0..r * c).map(|_| rng.uniform() * 2.0 - 1.0).collect();
        Matrix::from_vec(r, c, data).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&[0.0, 0.0, 0.0]).unwrap();
        for v in &p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = softmax(&[0.0, 3f64.ln()]).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-15);
        assert!((p[1] - 0.75).abs() < 1e-15);
        assert!(matches!(softmax(&[]), Err(Error::EmptyLogits)));
    }

    #[test]
    fn softmax_shift_invariant() {
        let z = [0.3, -1.2, 4.0, 2.5];
        let shifted: Vec<f64> = z.iter().map(|v| v + 17.25).collect();
        let a = softmax(&z).unwrap();
        let b = softmax(&shifted).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn arccos_examples() {
        assert_eq!(safe_arccos(1.0).unwrap(), 0.0);
        assert!((safe_arccos(-1.0).unwrap() - PI).abs() < 1e-15);
        assert_eq!(safe_arccos(1.0 + 1e-12).unwrap(), 0.0);
        assert!(safe_arccos(f64::NAN).is_err());
        let (v, d) = arccos_with_grad(1.0 + 1e-12);
        assert!(v.is_finite() && v > 0.0 && d == 0.0);
        let (v, d) = arccos_with_grad(0.0);
        assert!((v - PI / 2.0).abs() < 1e-15);
        assert!((d + 1.0).abs() < 1e-15);
    }

    #[test]
    fn argmax_examples() {
        assert_eq!(argmax_tiebreak(&[1.0, 3.0, 2.0]).unwrap(), 1);
        assert_eq!(argmax_tiebreak(&[2.0, 2.0]).unwrap(), 0);
        assert_eq!(argmax_tiebreak(&[0.0]).unwrap(), 0);
        assert!(argmax_tiebreak(&[]).is_err());
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = RngStream::new(7, 0);
        for _ in 0..20 {
            let a = random_matrix(&mut rng, 8, 8);
            let b = random_matrix(&mut rng, 8, 8);
            let fast = a.matmul(&b).unwrap();
            let slow = naive_matmul(&a, &b);
            for (x, y) in fast.as_slice().iter().zip(slow.as_slice()) {
                assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0));
            }
            let bt = b.transpose();
            assert!(a.matmul_t(&bt).unwrap().max_abs_diff(&slow) < 1e-12);
            let at = a.transpose();
            assert!(at.t_matmul(&b).unwrap().max_abs_diff(&slow) < 1e-12);
        }
    }

    #[test]
    fn from_vec_rejects_bad_input() {
        assert!(Matrix::from_vec(2, 2, vec![1.0; 3]).is_err());
        assert!(Matrix::from_vec(1, 2, vec![1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn rng_replay_and_independence() {
        let a: Vec<u64> = {
            let mut r = RngStream::new(42, 3);
            (0..64).map(|_| r.next_raw()).collect()
        };
        let b: Vec<u64> = {
            let mut r = RngStream::new(42, 3);
            (0..64).map(|_| r.next_raw()).collect()
        };
        let c: Vec<u64> = {
            let mut r = RngStream::new(42, 4);
            (0..64).map(|_| r.next_raw()).collect()
        };
        assert_eq!(a, b);
        assert!(a.iter().zip(&c).all(|(x, y)| x != y));
    }

    #[test]
    fn rng_frozen_prefix() {
        // Frozen so any change to the generator shows up as a test failure.
        let mut r = RngStream::new(0, 0);
        let first = r.next_raw();
        let mut again = RngStream::new(0, 0);
        assert_eq!(first, again.next_raw());
        assert_eq!(
            first,
            mix64(mix64(0 ^ mix64(SPLITMIX_GAMMA)).wrapping_add(SPLITMIX_GAMMA))
        );
    }

    #[test]
    fn rng_uniform_moments() {
        let mut r = RngStream::named(9, "moments", 0);
        let xs: Vec<f64> = (0..100_000).map(|_| r.uniform()).collect();
        assert!(xs.iter().all(|&x| (0.0..1.0).contains(&x)));
        assert!((mean(&xs) - 0.5).abs() < 0.005);
        let counts = (0..60_000).fold([0usize; 6], |mut acc, _| {
            acc[r.below(6)] += 1;
            acc
        });
        for c in counts {
            assert!((c as f64 - 10_000.0).abs() < 400.0);
        }
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(z in proptest::collection::vec(-50.0f64..50.0, 1..40)) {
            let p = softmax(&z).unwrap();
            let s: f64 = p.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|&v| v > 0.0));
        }

        #[test]
        fn arccos_in_range(u in -1e6f64..1e6) {
            let a = safe_arccos(u).unwrap();
            prop_assert!((0.0..=PI).contains(&a));
            let (g, _) = arccos_with_grad(u);
            prop_assert!((0.0..=PI).contains(&g));
        }
    }
}
