//! Dense row-major matrices, a seeded random source, and the central
//! finite-difference oracle used to check every hand-written backward pass.
//!
//! Products are delegated to `matrixmultiply::dgemm`; transposed operands are
//! expressed through strides, so `matmul_tn` and `matmul_nt` never copy.
//!
//! ## Random source
//!
//! `SeededRng` wraps PCG-XSL-RR 128/64 (`rand_pcg::Pcg64`) seeded through
//! `SeedableRng::seed_from_u64`. Every higher-level draw is defined here in
//! terms of `next_u64` so the stream can be reproduced bit-for-bit elsewhere:
//!
//! ```text
//! uniform01   = (next_u64 >> 11) * 2^-53                      in [0, 1)
//! normal      = sqrt(-2 ln(1 - u1)) * cos(2 pi u2)            (Box-Muller, no caching)
//! gamma(a>=1) = Marsaglia-Tsang squeeze; a<1 boosted by u^(1/a)
//! beta(a, b)  = x / (x + y), x ~ gamma(a), y ~ gamma(b)
//! below(n)    = Lemire multiply-shift with rejection
//! ```

use std::fmt;

use rand_core::{Rng, SeedableRng};
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({}x{})", self.rows, self.cols)?;
        if self.data.len() <= 64 {
            f.debug_list().entries(self.data.chunks(self.cols.max(1))).finish()?;
        }
        Ok(())
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
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
        if data.len() != rows * cols {
            return Err(contract(format!(
                "matrix data length {} does not match shape {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows. Panics on ragged input.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn random_normal(rows: usize, cols: usize, std: f64, rng: &mut SeededRng) -> Self {
        Self::from_fn(rows, cols, |_, _| std * rng.standard_normal())
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

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        self.check_same_shape(other, "elementwise")?;
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

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Matrix) -> Result<()> {
        self.check_same_shape(other, "axpy")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::Numerical(format!(
                "{what}: non-finite value at ({}, {})",
                i / self.cols.max(1),
                i % self.cols.max(1)
            ))),
        }
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    fn check_same_shape(&self, other: &Matrix, op: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(contract(format!(
                "{op}: shape {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }
}

/// Strided view used to feed `dgemm` without materializing transposes.
struct View<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
    rs: isize,
    cs: isize,
}

impl<'a> View<'a> {
    fn plain(m: &'a Matrix) -> Self {
        View {
            data: &m.data,
            rows: m.rows,
            cols: m.cols,
            rs: m.cols as isize,
            cs: 1,
        }
    }

    fn transposed(m: &'a Matrix) -> Self {
        View {
            data: &m.data,
            rows: m.cols,
            cols: m.rows,
            rs: 1,
            cs: m.cols as isize,
        }
    }
}

fn gemm_into(a: View<'_>, b: View<'_>, beta: f64, out: &mut Matrix) {
    debug_assert_eq!(a.cols, b.rows);
    debug_assert_eq!(out.shape(), (a.rows, b.cols));
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            out.fill(0.0);
        }
        return;
    }
    // SAFETY: the views describe in-bounds strided layouts of their backing
    // slices and `out` is a distinct, exclusively borrowed m x n buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            out.data.as_mut_ptr(),
            out.cols as isize,
            1,
        );
    }
}

/// Sub-block of a matrix, optionally read transposed.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Block<'a> {
    pub m: &'a Matrix,
    pub r0: usize,
    pub c0: usize,
    pub rows: usize,
    pub cols: usize,
    pub trans: bool,
}

impl<'a> Block<'a> {
    pub fn new(m: &'a Matrix, r0: usize, c0: usize, rows: usize, cols: usize) -> Self {
        assert!(r0 + rows <= m.rows && c0 + cols <= m.cols, "block out of range");
        Block {
            m,
            r0,
            c0,
            rows,
            cols,
            trans: false,
        }
    }

    pub fn t(self) -> Self {
        Block { trans: !self.trans, ..self }
    }

    fn shape(&self) -> (usize, usize) {
        if self.trans {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        let rs = self.m.cols as isize;
        if self.trans {
            (1, rs)
        } else {
            (rs, 1)
        }
    }

    fn offset(&self) -> usize {
        self.r0 * self.m.cols + self.c0
    }
}

/// `out[r0.., c0..] = a·b + beta·out[r0.., c0..]` over matrix sub-blocks.
pub(crate) fn gemm_block(a: Block<'_>, b: Block<'_>, beta: f64, out: &mut Matrix, r0: usize, c0: usize) {
    let (m, k) = a.shape();
    let (k2, n) = b.shape();
    assert_eq!(k, k2, "gemm_block inner dimensions");
    assert!(r0 + m <= out.rows && c0 + n <= out.cols, "gemm_block output out of range");
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let (ars, acs) = a.strides();
    let (brs, bcs) = b.strides();
    let oc = out.cols;
    // SAFETY: every block was range-checked against its matrix, so all
    // strided accesses stay inside the backing slices; `out` is exclusive.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.m.data.as_ptr().add(a.offset()),
            ars,
            acs,
            b.m.data.as_ptr().add(b.offset()),
            brs,
            bcs,
            beta,
            out.data.as_mut_ptr().add(r0 * oc + c0),
            oc as isize,
            1,
        );
    }
}

fn shape_err(op: &str, a: (usize, usize), b: (usize, usize)) -> Error {
    contract(format!(
        "{op}: incompatible shapes {}x{} and {}x{}",
        a.0, a.1, b.0, b.1
    ))
}

/// `a * b`
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(shape_err("matmul", a.shape(), b.shape()));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    gemm_into(View::plain(a), View::plain(b), 0.0, &mut out);
    Ok(out)
}

/// `aᵀ * b`
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(shape_err("matmul_tn", a.shape(), b.shape()));
    }
    let mut out = Matrix::zeros(a.cols, b.cols);
    gemm_into(View::transposed(a), View::plain(b), 0.0, &mut out);
    Ok(out)
}

/// `a * bᵀ`
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(shape_err("matmul_nt", a.shape(), b.shape()));
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    gemm_into(View::plain(a), View::transposed(b), 0.0, &mut out);
    Ok(out)
}

/// `acc += a * bᵀ`
pub fn matmul_nt_acc(acc: &mut Matrix, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.cols != b.cols || acc.shape() != (a.rows, b.rows) {
        return Err(shape_err("matmul_nt_acc", a.shape(), b.shape()));
    }
    gemm_into(View::plain(a), View::transposed(b), 1.0, acc);
    Ok(())
}

/// `acc += aᵀ * b`
pub fn matmul_tn_acc(acc: &mut Matrix, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.rows != b.rows || acc.shape() != (a.cols, b.cols) {
        return Err(shape_err("matmul_tn_acc", a.shape(), b.shape()));
    }
    gemm_into(View::transposed(a), View::plain(b), 1.0, acc);
    Ok(())
}

/// Deterministic random source; see the module docs for the exact algorithm.
#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    inner: Pcg64,
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: Pcg64::seed_from_u64(seed),
        }
    }

    /// Independent stream for `(seed, stream)`:
    /// `splitmix64(seed ^ splitmix64(stream + 1))`.
    pub fn derive(seed: u64, stream: u64) -> Self {
        Self::new(splitmix64(seed ^ splitmix64(stream.wrapping_add(1))))
    }

    /// Child stream derived from this generator's original seed.
    pub fn fork(&self, stream: u64) -> Self {
        Self::derive(self.seed, stream)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of resolution.
    #[inline]
    pub fn uniform01(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn draw_uniform(&mut self, lo: f64, hi: f64) -> Result<f64> {
        if !(lo < hi) {
            return Err(contract(format!("draw_uniform requires lo < hi, got [{lo}, {hi})")));
        }
        let v = lo + (hi - lo) * self.uniform01();
        // Rounding can land exactly on `hi` for wide ranges.
        Ok(if v >= hi { lo.max(hi - (hi - lo) * f64::EPSILON) } else { v })
    }

    pub fn standard_normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform01();
        let u2 = self.uniform01();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn draw_normal(&mut self, mean: f64, std: f64) -> Result<f64> {
        if !(std >= 0.0) {
            return Err(contract(format!("draw_normal requires std >= 0, got {std}")));
        }
        let z = self.standard_normal();
        Ok(if std == 0.0 { mean } else { mean + std * z })
    }

    /// `true` with probability `prob`.
    pub fn bernoulli(&mut self, prob: f64) -> bool {
        self.uniform01() < prob
    }

    /// Uniform integer in `0..n`. Panics when `n == 0`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let threshold = n.wrapping_neg() % n;
        loop {
            let x = self.next_u64();
            let m = (x as u128) * (n as u128);
            if (m as u64) >= threshold {
                return (m >> 64) as usize;
            }
        }
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn draw_gamma(&mut self, shape: f64) -> Result<f64> {
        if !(shape > 0.0) {
            return Err(contract(format!("gamma shape must be > 0, got {shape}")));
        }
        if shape < 1.0 {
            let boost = self.uniform01().powf(1.0 / shape);
            return Ok(self.draw_gamma(shape + 1.0)? * boost);
        }
        let d = shape - 1.0 / 3.0;
        let c = 1.0 / (9.0 * d).sqrt();
        loop {
            let (x, v) = loop {
                let x = self.standard_normal();
                let v = 1.0 + c * x;
                if v > 0.0 {
                    break (x, v * v * v);
                }
            };
            let u = self.uniform01();
            if u < 1.0 - 0.0331 * x.powi(4) {
                return Ok(d * v);
            }
            if u > 0.0 && u.ln() < 0.5 * x * x + d * (1.0 - v + v.ln()) {
                return Ok(d * v);
            }
        }
    }

    pub fn draw_beta(&mut self, a: f64, b: f64) -> Result<f64> {
        let x = self.draw_gamma(a)?;
        let y = self.draw_gamma(b)?;
        let s = x + y;
        Ok(if s > 0.0 { x / s } else { 0.5 })
    }
}

/// Default oracle step for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Central-difference gradient of a scalar function, one entry at a time.
pub fn finite_diff_gradient(
    mut f: impl FnMut(&Matrix) -> f64,
    x: &Matrix,
    h: f64,
) -> Result<Matrix> {
    if !(h > 0.0) {
        return Err(contract(format!("finite difference step must be > 0, got {h}")));
    }
    let mut probe = x.clone();
    let mut grad = Matrix::zeros(x.rows(), x.cols());
    let cols = x.cols().max(1);
    for i in 0..x.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + h;
        let plus = f(&probe);
        probe.data[i] = orig - h;
        let minus = f(&probe);
        probe.data[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Oracle {
                row: i / cols,
                col: i % cols,
                reason: format!("non-finite objective (f(x+h)={plus}, f(x-h)={minus})"),
            });
        }
        grad.data[i] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// Richardson-extrapolated central differences, `(4·D(h/2) − D(h)) / 3`,
/// which cancels the `h²` truncation term.
pub fn finite_diff_gradient_extrapolated(
    mut f: impl FnMut(&Matrix) -> f64,
    x: &Matrix,
    h: f64,
) -> Result<Matrix> {
    let coarse = finite_diff_gradient(&mut f, x, h)?;
    let fine = finite_diff_gradient(&mut f, x, h / 2.0)?;
    fine.zip_with(&coarse, |a, b| (4.0 * a - b) / 3.0)
}

/// Max over entries of `|a - b| / max(|a|, |b|, floor)`.
///
/// The floor keeps entries whose true gradient is ~0 from reporting noise as
/// huge relative error.
/// `‖a - n‖∞ / max(‖a‖∞, ‖n‖∞, floor)`: error relative to the tensor's scale.
pub fn tensor_rel_error(analytic: &Matrix, numeric: &Matrix, floor: f64) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic.max_abs_diff(numeric) / analytic.max_abs().max(numeric.max_abs()).max(floor)
}

pub fn max_rel_error(analytic: &Matrix, numeric: &Matrix, floor: f64) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
