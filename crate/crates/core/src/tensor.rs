//! Dense row-major matrices, a seeded Gaussian stream, and batch statistics.
//!
//! Rows index batch samples and columns index features. Every reduction in
//! this module runs in a fixed sequential order, so identical inputs give
//! bit-identical outputs across runs.
//!
//! Random numbers come from a ChaCha8 keystream (`rand_chacha::ChaCha8Rng`,
//! seeded with `seed_from_u64`). Uniforms take the top 53 bits of each `u64`;
//! normals are produced by the Box–Muller transform, both values of each pair
//! being used in order (cosine branch first).

use std::f64::consts::PI;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        assert!(rows >= 1 && cols >= 1, "matrix dimensions must be positive");
        Self {
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

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        ensure!(rows >= 1 && cols >= 1, Shape, "matrix must be at least 1x1, got {rows}x{cols}");
        ensure!(
            data.len() == rows * cols,
            Shape,
            "data length {} does not match {rows}x{cols}",
            data.len()
        );
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        ensure!(!rows.is_empty(), Shape, "no rows given");
        let cols = rows[0].len();
        ensure!(rows.iter().all(|r| r.len() == cols), Shape, "ragged rows");
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    /// A single-row matrix, used for bias and BatchNorm parameter vectors.
    pub fn row_vector(values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        Self::from_vec(1, n, values)
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
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
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
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

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
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        ensure!(
            self.cols == other.rows,
            Shape,
            "matmul {}x{} · {}x{}",
            self.rows,
            self.cols,
            other.rows,
            other.cols
        );
        let mut out = Matrix::zeros(self.rows, other.cols);
        gemm(self.rows, self.cols, other.cols, self, false, other, false, &mut out);
        Ok(out)
    }

    /// `selfᵀ · other` without materialising the transpose.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        ensure!(
            self.rows == other.rows,
            Shape,
            "t_matmul ({}x{})ᵀ · {}x{}",
            self.rows,
            self.cols,
            other.rows,
            other.cols
        );
        let mut out = Matrix::zeros(self.cols, other.cols);
        gemm(self.cols, self.rows, other.cols, self, true, other, false, &mut out);
        Ok(out)
    }

    /// `self · otherᵀ` without materialising the transpose.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        ensure!(
            self.cols == other.cols,
            Shape,
            "matmul_t {}x{} · ({}x{})ᵀ",
            self.rows,
            self.cols,
            other.rows,
            other.cols
        );
        let mut out = Matrix::zeros(self.rows, other.rows);
        gemm(self.rows, self.cols, other.rows, self, false, other, true, &mut out);
        Ok(out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        self.check_same_shape(other)?;
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    /// `self += s · other`.
    pub fn axpy(&mut self, s: f64, other: &Matrix) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    /// Adds `row` to every row.
    pub fn add_row_broadcast(&mut self, row: &[f64]) -> Result<()> {
        ensure!(row.len() == self.cols, Shape, "broadcast row of {} onto {} cols", row.len(), self.cols);
        for chunk in self.data.chunks_exact_mut(self.cols) {
            for (a, &b) in chunk.iter_mut().zip(row) {
                *a += b;
            }
        }
        Ok(())
    }

    pub fn column_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.cols];
        for chunk in self.data.chunks_exact(self.cols) {
            for (s, &v) in sums.iter_mut().zip(chunk) {
                *s += v;
            }
        }
        sums
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Frobenius norm.
    pub fn norm(&self) -> f64 {
        self.sum_squares().sqrt()
    }

    pub fn dot(&self, other: &Matrix) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn has_nan(&self) -> bool {
        self.data.iter().any(|v| v.is_nan())
    }

    /// Population mean and variance over every entry.
    pub fn pooled_stats(&self) -> (f64, f64) {
        let n = self.data.len() as f64;
        let mean = self.data.iter().sum::<f64>() / n;
        let var = self.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        (mean, var)
    }

    pub fn check_same_shape(&self, other: &Matrix) -> Result<()> {
        ensure!(
            self.shape() == other.shape(),
            Shape,
            "{}x{} vs {}x{}",
            self.rows,
            self.cols,
            other.rows,
            other.cols
        );
        Ok(())
    }
}

/// `out = op(a) · op(b)` where `op(a)` is m×k and `op(b)` is k×n.
///
/// Backed by `matrixmultiply`'s blocked single-threaded kernel; its
/// summation order depends only on the shapes, so results are reproducible.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &Matrix, a_t: bool, b: &Matrix, b_t: bool, out: &mut Matrix) {
    let (rsa, csa) = if a_t { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if b_t { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    // SAFETY: strides describe exactly the row-major buffers of `a`, `b`, `out`
    // with the dimensions checked by the callers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            0.0,
            out.data.as_mut_ptr(),
            out.cols as isize,
            1,
        );
    }
}

/// Seeded, single-owner random stream.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    rng: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
            spare_normal: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// An independent stream keyed by `(seed, label)`, for giving each
    /// consumer (init, shuffling, dropout, …) its own sequence.
    pub fn derive(&self, label: u64) -> RngStream {
        RngStream::new(splitmix64(self.seed ^ splitmix64(label.wrapping_add(0x9E37_79B9_7F4A_7C15))))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform on `[0, 1)` with 53 bits of resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)` by rejection, free of modulo bias.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0);
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % n;
            }
        }
    }

    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // u1 ∈ (0, 1] keeps the logarithm finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = 2.0 * PI * u2;
        self.spare_normal = Some(radius * angle.sin());
        radius * angle.cos()
    }

    pub fn normal(&mut self, mu: f64, sigma: f64) -> f64 {
        mu + sigma * self.standard_normal()
    }

    /// Fisher–Yates shuffle driven by `below`.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Matrix of i.i.d. `N(mu, sigma²)` draws, filled row by row.
pub fn gaussian(rng: &mut RngStream, mu: f64, sigma: f64, rows: usize, cols: usize) -> Result<Matrix> {
    ensure!(sigma >= 0.0 && sigma.is_finite(), Domain, "sigma must be finite and non-negative, got {sigma}");
    ensure!(mu.is_finite(), Domain, "mu must be finite, got {mu}");
    ensure!(rows >= 1 && cols >= 1, Shape, "gaussian matrix must be at least 1x1");
    let data = (0..rows * cols).map(|_| rng.normal(mu, sigma)).collect();
    Matrix::from_vec(rows, cols, data)
}

/// Per-column mean and population (1/N) variance, via Welford's update.
pub fn column_stats(m: &Matrix) -> Result<(Vec<f64>, Vec<f64>)> {
    ensure!(m.rows() >= 2, Domain, "column statistics need at least 2 rows, got {}", m.rows());
    let cols = m.cols();
    let mut mean = vec![0.0; cols];
    let mut m2 = vec![0.0; cols];
    for (k, row) in m.as_slice().chunks_exact(cols).enumerate() {
        let inv = 1.0 / (k + 1) as f64;
        for ((mu, s), &x) in mean.iter_mut().zip(m2.iter_mut()).zip(row) {
            let delta = x - *mu;
            *mu += delta * inv;
            *s += delta * (x - *mu);
        }
    }
    let n = m.rows() as f64;
    let var = m2.into_iter().map(|s| (s / n).max(0.0)).collect();
    Ok((mean, var))
}

/// Columns with variance at or below this (relative to their mean square)
/// are treated as constant and left out of correlation averages.
const CONSTANT_COLUMN_TOL: f64 = 1e-24;

fn standardized_columns(m: &Matrix) -> Result<(Vec<usize>, Matrix)> {
    let (mean, var) = column_stats(m)?;
    let keep: Vec<usize> = (0..m.cols())
        .filter(|&c| var[c] > CONSTANT_COLUMN_TOL * (mean[c] * mean[c]).max(f64::MIN_POSITIVE))
        .collect();
    if keep.is_empty() {
        return Ok((keep, Matrix::zeros(1, 1)));
    }
    let n = m.rows();
    let mut z = Matrix::zeros(n, keep.len());
    let inv_sd: Vec<f64> = keep.iter().map(|&c| 1.0 / var[c].sqrt()).collect();
    for r in 0..n {
        let src = m.row(r);
        let dst = z.row_mut(r);
        for (k, &c) in keep.iter().enumerate() {
            dst[k] = (src[c] - mean[c]) * inv_sd[k];
        }
    }
    Ok((keep, z))
}

/// Mean |Pearson correlation| over ordered pairs of distinct columns.
pub fn pairwise_abs_corr(m: &Matrix) -> Result<f64> {
    ensure!(m.cols() >= 2, Domain, "pairwise correlation needs at least 2 columns");
    let (keep, z) = standardized_columns(m)?;
    ensure!(
        keep.len() >= 2,
        Degenerate,
        "fewer than two non-constant columns ({} of {})",
        keep.len(),
        m.cols()
    );
    let gram = z.t_matmul(&z)?;
    let n = m.rows() as f64;
    let c = keep.len();
    let mut total = 0.0;
    for i in 0..c {
        for j in 0..c {
            if i != j {
                total += (gram.get(i, j) / n).abs().min(1.0);
            }
        }
    }
    Ok(total / (c * (c - 1)) as f64)
}

/// Mean over columns of |Corr(x_i, g_i)|, skipping columns where either side
/// is constant.
pub fn matched_abs_corr(x: &Matrix, g: &Matrix) -> Result<f64> {
    x.check_same_shape(g)?;
    let (mx, vx) = column_stats(x)?;
    let (mg, vg) = column_stats(g)?;
    let n = x.rows() as f64;
    let mut cov = vec![0.0; x.cols()];
    for r in 0..x.rows() {
        for (c, acc) in cov.iter_mut().enumerate() {
            *acc += (x.get(r, c) - mx[c]) * (g.get(r, c) - mg[c]);
        }
    }
    let is_const = |var: f64, mean: f64| var <= CONSTANT_COLUMN_TOL * (mean * mean).max(f64::MIN_POSITIVE);
    let mut total = 0.0;
    let mut used = 0usize;
    for c in 0..x.cols() {
        if is_const(vx[c], mx[c]) || is_const(vg[c], mg[c]) {
            continue;
        }
        total += (cov[c] / n / (vx[c] * vg[c]).sqrt()).abs().min(1.0);
        used += 1;
    }
    if used == 0 {
        return Err(Error::Degenerate("every column pair has a constant side".into()));
    }
    Ok(total / used as f64)
}
