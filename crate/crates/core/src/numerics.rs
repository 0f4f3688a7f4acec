//! Dense vectors and matrices, softmax, singular values and a seeded RNG.
//!
//! Everything is `f64`. Vectors are treated as row vectors where the math
//! calls for it: `v.vecmat(m)` is `v · m`, while `m.matvec(v)` is `m · v`.

use std::ops::{Deref, Index};

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Iteration cap for [`largest_singular_value`].
pub const POWER_ITERATION_CAP: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector(Vec<f64>);

impl Vector {
    /// Build a vector, rejecting NaN and infinite elements.
    pub fn new(data: Vec<f64>) -> Result<Self> {
        ensure!(
            data.iter().all(|x| x.is_finite()),
            "vector contains a non-finite element"
        );
        Ok(Self(data))
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn filled(n: usize, value: f64) -> Self {
        Self(vec![value; n])
    }

    /// Standard basis vector `e_i` of length `n`.
    pub fn basis(n: usize, i: usize) -> Self {
        let mut v = Self::zeros(n);
        v.0[i] = 1.0;
        v
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &Vector) -> Result<f64> {
        ensure!(
            self.len() == other.len(),
            "dot: length mismatch {} vs {}",
            self.len(),
            other.len()
        );
        Ok(dot(&self.0, &other.0))
    }

    pub fn norm(&self) -> f64 {
        dot(&self.0, &self.0).sqrt()
    }

    pub fn add(&self, other: &Vector) -> Result<Vector> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Vector) -> Result<Vector> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Vector {
        Vector(self.0.iter().map(|x| x * s).collect())
    }

    /// `self += s * other`.
    pub fn axpy(&mut self, s: f64, other: &Vector) -> Result<()> {
        ensure!(self.len() == other.len(), "axpy: length mismatch");
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += s * b;
        }
        Ok(())
    }

    /// Unit-norm copy. Zero vectors are rejected.
    pub fn normalized(&self) -> Result<Vector> {
        let n = self.norm();
        ensure!(n > 0.0, "cannot normalize a zero vector");
        Ok(self.scale(1.0 / n))
    }

    pub fn relu(&self) -> Vector {
        Vector(self.0.iter().map(|&x| x.max(0.0)).collect())
    }

    pub fn max_abs_diff(&self, other: &Vector) -> Result<f64> {
        ensure!(self.len() == other.len(), "max_abs_diff: length mismatch");
        Ok(self
            .0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Row-vector times matrix: `self · m`.
    pub fn vecmat(&self, m: &Matrix) -> Result<Vector> {
        ensure!(
            self.len() == m.rows,
            "vecmat: vector length {} != matrix rows {}",
            self.len(),
            m.rows
        );
        let mut out = vec![0.0; m.cols];
        for (i, &x) in self.0.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(m.row(i)) {
                *o += x * w;
            }
        }
        Ok(Vector(out))
    }

    fn zip_with(&self, other: &Vector, f: impl Fn(f64, f64) -> f64) -> Result<Vector> {
        ensure!(
            self.len() == other.len(),
            "length mismatch {} vs {}",
            self.len(),
            other.len()
        );
        Ok(Vector(
            self.0
                .iter()
                .zip(&other.0)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }
}

impl Deref for Vector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for Vector {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Vector::new(v)
    }
}

impl<const N: usize> From<[f64; N]> for Vector {
    /// Panics on non-finite input; intended for literals.
    fn from(a: [f64; N]) -> Self {
        Vector::new(a.to_vec()).expect("finite literal")
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        ensure!(
            rows * cols == data.len(),
            "matrix {}x{} needs {} elements, got {}",
            rows,
            cols,
            rows * cols,
            data.len()
        );
        ensure!(
            data.iter().all(|x| x.is_finite()),
            "matrix contains a non-finite element"
        );
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::diag(&vec![1.0; n])
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, &v) in values.iter().enumerate() {
            m.data[i * n + i] = v;
        }
        m
    }

    pub fn from_rows(rows: &[Vector]) -> Result<Self> {
        ensure!(!rows.is_empty(), "from_rows: no rows");
        let cols = rows[0].len();
        ensure!(
            rows.iter().all(|r| r.len() == cols),
            "from_rows: ragged rows"
        );
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// Entries drawn i.i.d. from N(0, std²).
    pub fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Self {
        let data = (0..rows * cols).map(|_| std * rng.normal()).collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&x| x == 0.0)
    }

    /// Matrix times column vector: `self · v`.
    pub fn matvec(&self, v: &Vector) -> Result<Vector> {
        ensure!(
            v.len() == self.cols,
            "matvec: vector length {} != matrix cols {}",
            v.len(),
            self.cols
        );
        Ok(Vector(
            (0..self.rows).map(|i| dot(self.row(i), v)).collect(),
        ))
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.get(i, j);
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        ensure!(
            self.cols == other.rows,
            "matmul: {}x{} times {}x{}",
            self.rows,
            self.cols,
            other.rows,
            other.cols
        );
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, b) in dst.iter_mut().zip(other.row(k)) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x * s).collect(),
        }
    }

    /// `self += gain * u zᵀ`.
    pub fn add_outer(&mut self, gain: f64, u: &Vector, z: &Vector) -> Result<()> {
        ensure!(
            u.len() == self.rows && z.len() == self.cols,
            "add_outer: shape mismatch"
        );
        for i in 0..self.rows {
            for j in 0..self.cols {
                self.data[i * self.cols + j] += gain * u[i] * z[j];
            }
        }
        Ok(())
    }

    pub fn frobenius_norm(&self) -> f64 {
        dot(&self.data, &self.data).sqrt()
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

/// Numerically stable softmax (max-subtraction).
pub fn softmax(logits: &[f64]) -> Result<Vector> {
    ensure!(!logits.is_empty(), "softmax of an empty vector");
    ensure!(
        logits.iter().all(|x| x.is_finite()),
        "softmax input contains a non-finite logit"
    );
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(Vector(exps.into_iter().map(|e| e / sum).collect()))
}

/// Softmax plus its log-normalizer `ln Σ exp(logit)`.
pub fn softmax_with_lse(logits: &[f64]) -> Result<(Vector, f64)> {
    let probs = softmax(logits)?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&x| (x - max).exp()).sum();
    Ok((probs, max + sum.ln()))
}

/// Largest singular value by power iteration on `mᵀm`.
///
/// Starts from the normalized all-ones vector and stops once the relative
/// change of the estimate drops below `tol · 1e-2` (floored at 1e-15).
pub fn largest_singular_value(m: &Matrix, tol: f64) -> Result<f64> {
    ensure!(
        m.rows > 0 && m.cols > 0,
        "largest_singular_value of an empty matrix"
    );
    ensure!(tol > 0.0, "tolerance must be positive, got {tol}");
    if m.is_zero() {
        return Ok(0.0);
    }
    let n = m.cols;
    let mut v = Vector::filled(n, 1.0 / (n as f64).sqrt());
    let stop = (tol * 1e-2).max(1e-15);
    let mut estimate = 0.0;
    for _ in 0..POWER_ITERATION_CAP {
        // w = mᵀ (m v)
        let mv = m.matvec(&v)?;
        let w = mv.vecmat(m)?;
        let wn = w.norm();
        if wn == 0.0 {
            // Start vector landed in the null space; perturb deterministically.
            v = Vector((0..n).map(|i| 1.0 + i as f64).collect()).normalized()?;
            continue;
        }
        let next = wn.sqrt();
        v = w.scale(1.0 / wn);
        if (next - estimate).abs() <= stop * next {
            return Ok(next);
        }
        estimate = next;
    }
    Err(Error::Convergence {
        iterations: POWER_ITERATION_CAP,
        last_estimate: estimate,
    })
}

pub fn cosine_similarity(a: &Vector, b: &Vector) -> Result<f64> {
    ensure!(a.len() == b.len(), "cosine_similarity: length mismatch");
    let (na, nb) = (a.norm(), b.norm());
    ensure!(na > 0.0 && nb > 0.0, "cosine_similarity of a zero vector");
    Ok((a.dot(b)? / (na * nb)).clamp(-1.0, 1.0))
}

/// Seeded pseudo-random source.
///
/// The generator is ChaCha with 8 rounds (`rand_chacha::ChaCha8Rng`), seeded
/// with `seed_from_u64`, which expands the 64-bit seed into a 256-bit key with
/// PCG32. ChaCha output is defined byte-for-byte independently of platform, so
/// a seed names the same stream everywhere. Sub-streams from [`Rng::derive`]
/// use ChaCha's 64-bit stream id, giving independent per-trial generators.
#[derive(Debug, Clone)]
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

    /// Independent stream `stream` of the generator seeded with `seed`.
    pub fn derive(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform on [lo, hi).
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in 0..n.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Standard normal draw (ziggurat).
    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn gaussian_vector(&mut self, n: usize, std: f64) -> Vector {
        Vector((0..n).map(|_| std * self.normal()).collect())
    }

    /// Uniformly distributed point on the unit sphere in `n` dimensions.
    pub fn unit_vector(&mut self, n: usize) -> Vector {
        loop {
            let v = self.gaussian_vector(n, 1.0);
            if v.norm() > 1e-12 {
                return v.scale(1.0 / v.norm());
            }
        }
    }
}
