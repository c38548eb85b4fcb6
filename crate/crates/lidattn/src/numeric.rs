//! Dense f64 linear algebra, masked reductions, and seeded sampling.
//!
//! Everything here is a pure function with a fixed summation order, so
//! results are bit-reproducible across runs and platforms. No operation
//! parallelizes internally; the benchmark harness depends on that.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Row-major dense matrix of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
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

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from nested row slices; all rows must agree in length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::Shape("ragged rows".into()));
            }
            data.extend_from_slice(row);
        }
        Matrix::from_vec(r, c, data)
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
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

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Standard matrix product with a fixed i-k-j loop order.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = &self.data[i * self.cols..(i + 1) * self.cols];
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row.iter()) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
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

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Shape("add: mismatched shapes".into()));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Matrix::from_vec(self.rows, self.cols, data)
    }

    /// In-place `self += scale * other`.
    pub fn add_scaled_assign(&mut self, other: &Matrix, scale: f64) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Shape("add_scaled_assign: mismatched shapes".into()));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    /// Adds a row vector to every row.
    pub fn add_row_broadcast(&self, v: &[f64]) -> Result<Matrix> {
        if v.len() != self.cols {
            return Err(Error::Shape("broadcast length mismatch".into()));
        }
        let mut out = self.clone();
        for i in 0..out.rows {
            for (o, b) in out.row_mut(i).iter_mut().zip(v) {
                *o += b;
            }
        }
        Ok(out)
    }

    /// Copy of rows `[start, end)`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        assert!(start <= end && end <= self.rows);
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Copy of columns `[start, end)`.
    pub fn slice_cols(&self, start: usize, end: usize) -> Matrix {
        assert!(start <= end && end <= self.cols);
        let mut out = Matrix::zeros(self.rows, end - start);
        for i in 0..self.rows {
            out.data[i * (end - start)..(i + 1) * (end - start)]
                .copy_from_slice(&self.row(i)[start..end]);
        }
        out
    }

    /// Column-wise concatenation; all parts must share the row count.
    pub fn hconcat(parts: &[&Matrix]) -> Result<Matrix> {
        let rows = parts.first().map_or(0, |m| m.rows);
        if parts.iter().any(|m| m.rows != rows) {
            return Err(Error::Shape("hconcat: row count mismatch".into()));
        }
        let cols: usize = parts.iter().map(|m| m.cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        for i in 0..rows {
            let mut offset = 0;
            for part in parts {
                out.row_mut(i)[offset..offset + part.cols].copy_from_slice(part.row(i));
                offset += part.cols;
            }
        }
        Ok(out)
    }

    /// Appends zero rows until the matrix has `total_rows` rows.
    pub fn pad_rows(&self, total_rows: usize) -> Matrix {
        assert!(total_rows >= self.rows);
        let mut data = self.data.clone();
        data.resize(total_rows * self.cols, 0.0);
        Matrix {
            rows: total_rows,
            cols: self.cols,
            data,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.rows, other.rows);
        assert_eq!(self.cols, other.cols);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Per-frame validity flags for a zero-padded sequence.
///
/// Valid frames always form a prefix: real frames first, padding at the
/// tail. At least one frame is valid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BinaryMask {
    len: usize,
    n_valid: usize,
}

impl BinaryMask {
    /// Mask with the first `n_valid` of `len` frames valid.
    pub fn prefix(n_valid: usize, len: usize) -> Result<Self> {
        if n_valid == 0 {
            return Err(Error::InvalidArgument(
                "mask needs at least one valid frame".into(),
            ));
        }
        if n_valid > len {
            return Err(Error::InvalidArgument(format!(
                "mask: {} valid frames exceed length {}",
                n_valid, len
            )));
        }
        Ok(BinaryMask { len, n_valid })
    }

    /// Fully valid mask of length `len`.
    pub fn all_valid(len: usize) -> Result<Self> {
        BinaryMask::prefix(len, len)
    }

    /// Builds from explicit flags; rejects non-prefix patterns.
    pub fn from_flags(flags: &[bool]) -> Result<Self> {
        let n_valid = flags.iter().take_while(|&&f| f).count();
        if flags[n_valid..].iter().any(|&f| f) {
            return Err(Error::InvalidArgument(
                "mask: valid frames must form a prefix".into(),
            ));
        }
        BinaryMask::prefix(n_valid, flags.len())
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn n_valid(&self) -> usize {
        self.n_valid
    }

    #[inline]
    pub fn is_valid(&self, i: usize) -> bool {
        i < self.n_valid
    }
}

/// Counter-based seeded RNG with named sub-stream derivation.
///
/// Same seed gives a bit-identical sample stream on every platform.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    rng: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent sub-stream derived from the base seed and a label.
    /// Derivation ignores how much of this stream has been consumed.
    pub fn derive(&self, label: &str) -> SeededRng {
        // FNV-1a over the label, mixed into the base seed.
        let mut h: u64 = 0xcbf29ce484222325;
        for b in label.as_bytes() {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x100000001b3);
        }
        SeededRng::new(self.seed.wrapping_mul(0x9e3779b97f4a7c15) ^ h)
    }

    pub fn next_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Uniform in [0, 1).
    pub fn next_uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    /// Uniform integer in [0, n).
    pub fn next_below(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }

    /// Deterministic Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i + 1);
            items.swap(i, j);
        }
    }
}

/// Reports whether numeric-core operations parallelize internally.
/// Always false; the benchmark harness asserts on this.
pub const fn internal_parallelism() -> bool {
    false
}

/// Row-wise softmax over unmasked columns, with row-max subtraction.
///
/// Masked columns output exactly 0; each row sums to 1 over the unmasked
/// columns. A mask covering every column is rejected.
pub fn masked_row_softmax(m: &Matrix, mask: Option<&BinaryMask>) -> Result<Matrix> {
    let mut out = m.clone();
    masked_row_softmax_in_place(&mut out, mask)?;
    Ok(out)
}

/// In-place variant of [`masked_row_softmax`]; avoids a second
/// `N x N`-sized allocation on the hot self-attention path.
pub fn masked_row_softmax_in_place(m: &mut Matrix, mask: Option<&BinaryMask>) -> Result<()> {
    let valid_cols = match mask {
        Some(mk) => {
            if mk.len() != m.cols() {
                return Err(Error::Shape(format!(
                    "softmax mask length {} vs {} columns",
                    mk.len(),
                    m.cols()
                )));
            }
            mk.n_valid()
        }
        None => m.cols(),
    };
    if valid_cols == 0 {
        return Err(Error::InvalidArgument("softmax: all columns masked".into()));
    }
    for i in 0..m.rows() {
        let row = m.row_mut(i);
        let max = row[..valid_cols]
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in &mut row[..valid_cols] {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in &mut row[..valid_cols] {
            *v /= sum;
        }
        for v in &mut row[valid_cols..] {
            *v = 0.0;
        }
    }
    Ok(())
}

/// Per-column mean and standard deviation over the valid rows.
///
/// Uses population variance; `std = sqrt(var + epsilon)`.
pub fn masked_mean_std(m: &Matrix, mask: &BinaryMask, epsilon: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if mask.len() != m.rows() {
        return Err(Error::Shape(format!(
            "mean/std mask length {} vs {} rows",
            mask.len(),
            m.rows()
        )));
    }
    if epsilon <= 0.0 {
        return Err(Error::InvalidArgument("epsilon must be positive".into()));
    }
    let n = mask.n_valid();
    let cols = m.cols();
    let mut mean = vec![0.0; cols];
    for i in 0..n {
        for (acc, v) in mean.iter_mut().zip(m.row(i)) {
            *acc += v;
        }
    }
    for v in &mut mean {
        *v /= n as f64;
    }
    let mut var = vec![0.0; cols];
    for i in 0..n {
        for ((acc, v), mu) in var.iter_mut().zip(m.row(i)).zip(&mean) {
            let d = v - mu;
            *acc += d * d;
        }
    }
    let std = var
        .iter()
        .map(|v| (v / n as f64 + epsilon).sqrt())
        .collect();
    Ok((mean, std))
}

/// Matrix of i.i.d. standard normal entries drawn from the seeded stream.
pub fn gaussian_matrix(rng: &mut SeededRng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.next_normal()).collect();
    Matrix::from_vec(rows, cols, data).expect("consistent shape")
}

/// Per-channel 1-D convolution along the temporal axis with "same"
/// zero padding. Padded frames contribute zeros and their outputs are
/// zeroed. Kernel is `width x channels` with an odd width.
pub fn depthwise_conv1d(v: &Matrix, kernel: &Matrix, mask: &BinaryMask) -> Result<Matrix> {
    let width = kernel.rows();
    if width % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "depthwise conv kernel width {} must be odd",
            width
        )));
    }
    if kernel.cols() != v.cols() {
        return Err(Error::Shape(format!(
            "depthwise conv kernel channels {} vs input {}",
            kernel.cols(),
            v.cols()
        )));
    }
    if mask.len() != v.rows() {
        return Err(Error::Shape("depthwise conv mask length mismatch".into()));
    }
    let half = width / 2;
    let n = mask.n_valid();
    let mut out = Matrix::zeros(v.rows(), v.cols());
    for i in 0..n {
        for a in 0..width {
            let src = i as isize + a as isize - half as isize;
            if src < 0 || src as usize >= n {
                continue;
            }
            let src = src as usize;
            for c in 0..v.cols() {
                let acc = out.get(i, c) + kernel.get(a, c) * v.get(src, c);
                out.set(i, c, acc);
            }
        }
    }
    Ok(out)
}
