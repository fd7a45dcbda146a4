//! Dense row-major `f64` matrices.
//!
//! Every public operation returns a matrix whose elements are finite; an
//! operation that would produce NaN or infinity returns [`Error::NonFinite`]
//! instead.

use std::cell::Cell;
use std::fmt;

use rayon::prelude::*;

use super::flops;
use crate::error::{Error, Result};

/// Additive mask value for disallowed attention scores. Large enough that
/// `exp(MASKED - max)` underflows to exactly zero, small enough that
/// `MASKED - MASKED` stays finite.
pub const MASKED: f64 = -1e30;

/// How `matmul` accumulates over the shared index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MatmulMode {
    /// Single thread, ascending shared-index order. Results are bitwise
    /// reproducible and match any other computation that sums the same
    /// terms in the same order.
    #[default]
    Deterministic,
    /// Splits the shared index into chunks summed on worker threads and then
    /// combined. Reassociates the sum, so results can differ in the last bits.
    Parallel,
}

thread_local! {
    static MODE: Cell<MatmulMode> = const { Cell::new(MatmulMode::Deterministic) };
}

/// Sets the matmul mode for the current thread.
pub fn set_matmul_mode(mode: MatmulMode) {
    MODE.with(|m| m.set(mode));
}

pub fn matmul_mode() -> MatmulMode {
    MODE.with(Cell::get)
}

/// Runs `f` with the given matmul mode on this thread, restoring the old one.
pub fn with_matmul_mode<T>(mode: MatmulMode, f: impl FnOnce() -> T) -> T {
    let prev = matmul_mode();
    set_matmul_mode(mode);
    let out = f();
    set_matmul_mode(prev);
    out
}

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix {}x{} ", self.rows, self.cols)?;
        if self.data.len() <= 64 {
            f.debug_list().entries(self.row_iter()).finish()
        } else {
            write!(f, "[..]")
        }
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
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
            return Err(Error::shape(
                "from_vec",
                format!("{} values for {rows}x{cols}", data.len()),
            ));
        }
        check_finite("from_vec", &data)?;
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows. Panics on ragged or non-finite input;
    /// meant for literals in tests and examples.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Self::from_vec(rows.len(), cols, data).expect("finite literal matrix")
    }

    pub fn row_vector(values: &[f64]) -> Self {
        Self::from_rows(&[values])
    }

    /// Matrix with i.i.d. `Normal(0, std^2)` entries.
    pub fn randn(rows: usize, cols: usize, std: f64, rng: &mut super::Rng) -> Self {
        let data = (0..rows * cols).map(|_| rng.normal() * std).collect();
        Self { rows, cols, data }
    }

    /// Matrix with i.i.d. uniform entries in `[lo, hi)`.
    pub fn uniform(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut super::Rng) -> Self {
        let data = (0..rows * cols)
            .map(|_| lo + (hi - lo) * rng.next_f64())
            .collect();
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Mutable element access. Callers are responsible for keeping values finite.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        (0..self.rows).map(move |r| self.row(r))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    fn same_shape(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                op,
                format!(
                    "{}x{} vs {}x{}",
                    self.rows, self.cols, other.rows, other.cols
                ),
            ));
        }
        Ok(())
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

    /// Matrix product. In deterministic mode each output element is the sum
    /// of `a[i,k] * b[k,j]` accumulated in ascending `k`, starting from +0.0.
    /// Terms with `a[i,k] == 0` are skipped; for finite operands this leaves
    /// the result bitwise unchanged.
    pub fn matmul(&self, b: &Matrix) -> Result<Matrix> {
        if self.cols != b.rows {
            return Err(Error::shape(
                "matmul",
                format!(
                    "{}x{} · {}x{}",
                    self.rows, self.cols, b.rows, b.cols
                ),
            ));
        }
        let (m, k, n) = (self.rows, self.cols, b.cols);
        flops::add(2 * (m * k * n) as u64);
        let out = match matmul_mode() {
            MatmulMode::Deterministic => {
                let mut out = Matrix::zeros(m, n);
                matmul_into(&self.data, &b.data, &mut out.data, m, k, n, 0, k);
                out
            }
            MatmulMode::Parallel => matmul_parallel(self, b),
        };
        check_finite("matmul", &out.data)?;
        Ok(out)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.same_shape(other, "add")?;
        flops::add(self.len() as u64);
        let data: Vec<f64> = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        check_finite("add", &data)?;
        Ok(Matrix { data, ..*self })
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.same_shape(other, "sub")?;
        let data: Vec<f64> = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        check_finite("sub", &data)?;
        Ok(Matrix { data, ..*self })
    }

    /// Elementwise product.
    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.same_shape(other, "hadamard")?;
        let data: Vec<f64> = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .collect();
        check_finite("hadamard", &data)?;
        Ok(Matrix { data, ..*self })
    }

    pub fn scale(&self, s: f64) -> Result<Matrix> {
        flops::add(self.len() as u64);
        let data: Vec<f64> = self.data.iter().map(|a| a * s).collect();
        check_finite("scale", &data)?;
        Ok(Matrix { data, ..*self })
    }

    /// Adds the `1 x cols` row `bias` to every row.
    pub fn add_row(&self, bias: &Matrix) -> Result<Matrix> {
        if bias.rows != 1 || bias.cols != self.cols {
            return Err(Error::shape(
                "add_row",
                format!(
                    "{}x{} + row {}x{}",
                    self.rows, self.cols, bias.rows, bias.cols
                ),
            ));
        }
        flops::add(self.len() as u64);
        let mut out = self.clone();
        for r in 0..self.rows {
            for (o, b) in out.row_mut(r).iter_mut().zip(&bias.data) {
                *o += b;
            }
        }
        check_finite("add_row", &out.data)?;
        Ok(out)
    }

    pub fn relu(&self) -> Matrix {
        flops::add(self.len() as u64);
        let data = self
            .data
            .iter()
            .map(|&x| if x > 0.0 { x } else { 0.0 })
            .collect();
        Matrix { data, ..*self }
    }

    pub fn softmax_rows(&self) -> Matrix {
        let mut out = self.clone();
        for r in 0..self.rows {
            let row = out.row_mut(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        out
    }

    /// Per-row normalisation to zero mean and unit (population) variance,
    /// then `* gain + bias`. A row whose `variance + eps` is zero normalises
    /// to all zeros.
    pub fn layer_norm(&self, gain: &Matrix, bias: &Matrix, eps: f64) -> Result<Matrix> {
        for (p, name) in [(gain, "gain"), (bias, "bias")] {
            if p.rows != 1 || p.cols != self.cols {
                return Err(Error::shape(
                    "layer_norm",
                    format!("{name} {}x{} for {} columns", p.rows, p.cols, self.cols),
                ));
            }
        }
        let (out, _) = self.layer_norm_parts(eps);
        let mut out = out;
        for r in 0..self.rows {
            for ((o, g), b) in out.row_mut(r).iter_mut().zip(&gain.data).zip(&bias.data) {
                *o = *o * g + b;
            }
        }
        check_finite("layer_norm", &out.data)?;
        Ok(out)
    }

    /// Normalised rows (before the affine step) and the per-row inverse std.
    pub(crate) fn layer_norm_parts(&self, eps: f64) -> (Matrix, Vec<f64>) {
        let mut xhat = self.clone();
        let mut inv_std = Vec::with_capacity(self.rows);
        let n = self.cols as f64;
        for r in 0..self.rows {
            let row = xhat.row_mut(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let denom = (var + eps).sqrt();
            let inv = if denom > 0.0 { 1.0 / denom } else { 0.0 };
            for x in row.iter_mut() {
                *x = (*x - mean) * inv;
            }
            inv_std.push(inv);
        }
        (xhat, inv_std)
    }

    /// Sets every score strictly above the diagonal (`col > row`) to [`MASKED`].
    pub fn causal_mask_fill(&self) -> Matrix {
        let mut out = self.clone();
        for r in 0..self.rows {
            for c in (r + 1)..self.cols {
                out.data[r * self.cols + c] = MASKED;
            }
        }
        out
    }

    /// Rows `idx[0], idx[1], ...` of `self`, in that order.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Matrix> {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            if i >= self.rows {
                return Err(Error::shape(
                    "gather_rows",
                    format!("row {i} of {}", self.rows),
                ));
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        })
    }

    /// Columns `idx[0], idx[1], ...` of `self`, in that order.
    pub fn gather_cols(&self, idx: &[usize]) -> Result<Matrix> {
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.cols) {
            return Err(Error::shape(
                "gather_cols",
                format!("column {bad} of {}", self.cols),
            ));
        }
        let mut out = Matrix::zeros(self.rows, idx.len());
        for r in 0..self.rows {
            let src = self.row(r);
            for (o, &i) in out.row_mut(r).iter_mut().zip(idx) {
                *o = src[i];
            }
        }
        Ok(out)
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Matrix> {
        if start > end || end > self.rows {
            return Err(Error::shape(
                "slice_rows",
                format!("{start}..{end} of {}", self.rows),
            ));
        }
        Ok(Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        })
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Matrix> {
        if start > end || end > self.cols {
            return Err(Error::shape(
                "slice_cols",
                format!("{start}..{end} of {}", self.cols),
            ));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(self.rows * w);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..end]);
        }
        Ok(Matrix {
            rows: self.rows,
            cols: w,
            data,
        })
    }

    pub fn concat_rows(parts: &[&Matrix]) -> Result<Matrix> {
        let cols = parts.first().map_or(0, |p| p.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return Err(Error::shape(
                    "concat_rows",
                    format!("{} vs {} columns", p.cols, cols),
                ));
            }
            data.extend_from_slice(&p.data);
            rows += p.rows;
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn concat_cols(parts: &[&Matrix]) -> Result<Matrix> {
        let rows = parts.first().map_or(0, |p| p.rows);
        if let Some(p) = parts.iter().find(|p| p.rows != rows) {
            return Err(Error::shape(
                "concat_cols",
                format!("{} vs {} rows", p.rows, rows),
            ));
        }
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(r));
            }
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Column means as a `1 x cols` row.
    pub fn mean_rows(&self) -> Matrix {
        let mut out = Matrix::zeros(1, self.cols);
        for r in 0..self.rows {
            for (o, x) in out.data.iter_mut().zip(self.row(r)) {
                *o += x;
            }
        }
        if self.rows > 0 {
            let inv = 1.0 / self.rows as f64;
            out.data.iter_mut().for_each(|x| *x *= inv);
        }
        out
    }

    /// Column sums as a `1 x cols` row.
    pub fn sum_rows(&self) -> Matrix {
        let mut out = Matrix::zeros(1, self.cols);
        for r in 0..self.rows {
            for (o, x) in out.data.iter_mut().zip(self.row(r)) {
                *o += x;
            }
        }
        out
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Largest absolute elementwise difference. Panics on shape mismatch.
    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Mean next-token cross-entropy of `self` (logits, one row per
    /// position) against `targets`, together with the row softmax.
    pub fn cross_entropy(&self, targets: &[usize]) -> Result<(f64, Matrix)> {
        if targets.len() != self.rows || self.rows == 0 {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} targets for {} rows", targets.len(), self.rows),
            ));
        }
        let probs = self.softmax_rows();
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= self.cols {
                return Err(Error::shape(
                    "cross_entropy",
                    format!("target {t} of {} classes", self.cols),
                ));
            }
            // log-softmax directly, so tiny probabilities do not underflow.
            let row = self.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let loss = total / self.rows as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite { op: "cross_entropy" });
        }
        Ok((loss, probs))
    }
}

#[allow(clippy::too_many_arguments)]
fn matmul_into(
    a: &[f64],
    b: &[f64],
    out: &mut [f64],
    m: usize,
    k: usize,
    n: usize,
    k_start: usize,
    k_end: usize,
) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let o_row = &mut out[i * n..(i + 1) * n];
        for p in k_start..k_end {
            let aik = a_row[p];
            if aik == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
}

fn matmul_parallel(a: &Matrix, b: &Matrix) -> Matrix {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let chunks = rayon::current_num_threads().clamp(2, 16).min(k.max(1));
    let step = k.div_ceil(chunks).max(1);
    let partials: Vec<Vec<f64>> = (0..k)
        .step_by(step)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|start| {
            let mut part = vec![0.0; m * n];
            matmul_into(&a.data, &b.data, &mut part, m, k, n, start, (start + step).min(k));
            part
        })
        .collect();
    let mut out = Matrix::zeros(m, n);
    // Sum partials from the last chunk down, so the association genuinely
    // differs from the sequential order.
    for part in partials.iter().rev() {
        for (o, p) in out.data.iter_mut().zip(part) {
            *o += p;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    #[test]
    fn matmul_identity_and_dot() {
        let a = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        assert_eq!(a.matmul(&Matrix::identity(2)).unwrap(), a);
        let r = Matrix::from_rows(&[[1.0, 2.0]])
            .matmul(&Matrix::from_rows(&[[3.0], [4.0]]))
            .unwrap();
        assert_eq!(r, Matrix::from_rows(&[[11.0]]));
    }

    #[test]
    fn matmul_dimension_mismatch() {
        let a = Matrix::zeros(2, 3);
        assert!(matches!(a.matmul(&a), Err(Error::Shape { .. })));
    }

    #[test]
    fn matmul_identity_is_bitwise_on_random() {
        let mut rng = Rng::new(3);
        let a = Matrix::randn(7, 5, 1.3, &mut rng);
        let id = Matrix::identity(5);
        let out = a.matmul(&id).unwrap();
        for (x, y) in out.data().iter().zip(a.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn matmul_overflow_is_error() {
        let a = Matrix::from_rows(&[[1e300, 1e300]]);
        let b = Matrix::from_rows(&[[1e300], [1e300]]);
        assert!(matches!(a.matmul(&b), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn parallel_matmul_close_to_deterministic() {
        let mut rng = Rng::new(9);
        let a = Matrix::randn(9, 300, 1.0, &mut rng);
        let b = Matrix::randn(300, 4, 1.0, &mut rng);
        let det = a.matmul(&b).unwrap();
        let par = with_matmul_mode(MatmulMode::Parallel, || a.matmul(&b).unwrap());
        assert!(det.max_abs_diff(&par) < 1e-10);
        assert_eq!(matmul_mode(), MatmulMode::Deterministic);
    }

    #[test]
    fn relu_cases() {
        let r = Matrix::from_rows(&[[-1.0, 0.0, 2.0]]).relu();
        assert_eq!(r, Matrix::from_rows(&[[0.0, 0.0, 2.0]]));
        assert_eq!(Matrix::from_rows(&[[0.5]]).relu(), Matrix::from_rows(&[[0.5]]));
        let neg = Matrix::filled(3, 4, -2.5).relu();
        assert!(neg.data().iter().all(|&x| x == 0.0 && x.is_sign_positive()));
    }

    #[test]
    fn softmax_cases() {
        let s = Matrix::from_rows(&[[0.0, 0.0]]).softmax_rows();
        assert_eq!(s, Matrix::from_rows(&[[0.5, 0.5]]));
        let s = Matrix::from_rows(&[[1000.0, 1000.0]]).softmax_rows();
        assert_eq!(s, Matrix::from_rows(&[[0.5, 0.5]]));
        let s = Matrix::from_rows(&[[1f64.ln(), 3f64.ln()]]).softmax_rows();
        assert!((s.get(0, 0) - 0.25).abs() < 1e-15);
        assert!((s.get(0, 1) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let mut rng = Rng::new(11);
        for _ in 0..50 {
            let a = Matrix::randn(4, 9, 5.0, &mut rng);
            let s = a.softmax_rows();
            for r in 0..4 {
                assert!((s.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
            let shift = rng.normal() * 100.0;
            let b = Matrix::from_vec(4, 9, a.data().iter().map(|x| x + shift).collect()).unwrap();
            let t = b.softmax_rows();
            assert!(s.max_abs_diff(&t) <= 1e-12);
            for r in 0..4 {
                assert_eq!(argmax(s.row(r)), argmax(t.row(r)));
            }
        }
    }

    fn argmax(xs: &[f64]) -> usize {
        let mut best = 0;
        for (i, &x) in xs.iter().enumerate() {
            if x > xs[best] {
                best = i;
            }
        }
        best
    }

    #[test]
    fn layer_norm_cases() {
        let ones = Matrix::filled(1, 3, 1.0);
        let zeros = Matrix::zeros(1, 3);
        let out = Matrix::filled(2, 3, 4.2).layer_norm(&ones, &zeros, 1e-5).unwrap();
        assert_eq!(out, Matrix::zeros(2, 3));
        let out = Matrix::filled(1, 3, 4.2).layer_norm(&ones, &zeros, 0.0).unwrap();
        assert_eq!(out, Matrix::zeros(1, 3));

        let ones2 = Matrix::filled(1, 2, 1.0);
        let zeros2 = Matrix::zeros(1, 2);
        let out = Matrix::from_rows(&[[1.0, -1.0]])
            .layer_norm(&ones2, &zeros2, 0.0)
            .unwrap();
        assert_eq!(out, Matrix::from_rows(&[[1.0, -1.0]]));

        let bias = Matrix::row_vector(&[0.3, -0.7]);
        let out = Matrix::from_rows(&[[5.0, 2.0], [-1.0, 8.0]])
            .layer_norm(&zeros2, &bias, 1e-5)
            .unwrap();
        assert_eq!(out, Matrix::from_rows(&[[0.3, -0.7], [0.3, -0.7]]));

        assert!(Matrix::zeros(2, 3).layer_norm(&ones2, &zeros, 1e-5).is_err());
    }

    #[test]
    fn causal_mask_only_touches_future() {
        let m = Matrix::filled(3, 3, 1.0).causal_mask_fill();
        assert_eq!(m.get(0, 0), 1.0);
        assert_eq!(m.get(0, 1), MASKED);
        assert_eq!(m.get(2, 1), 1.0);
        let s = m.softmax_rows();
        assert_eq!(s.row(0), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn concat_split_round_trip() {
        let mut rng = Rng::new(5);
        let a = Matrix::randn(3, 6, 1.0, &mut rng);
        let l = a.slice_cols(0, 2).unwrap();
        let r = a.slice_cols(2, 6).unwrap();
        assert_eq!(Matrix::concat_cols(&[&l, &r]).unwrap(), a);
        let t = a.slice_rows(0, 1).unwrap();
        let b = a.slice_rows(1, 3).unwrap();
        assert_eq!(Matrix::concat_rows(&[&t, &b]).unwrap(), a);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let logits = Matrix::zeros(3, 256);
        let (loss, _) = logits.cross_entropy(&[1, 2, 3]).unwrap();
        assert!((loss - 256f64.ln()).abs() < 1e-12);
        assert!(logits.cross_entropy(&[1, 2]).is_err());
        assert!(logits.cross_entropy(&[1, 2, 256]).is_err());
    }

    #[test]
    fn from_vec_rejects_bad_input() {
        assert!(Matrix::from_vec(2, 2, vec![1.0; 3]).is_err());
        assert!(matches!(
            Matrix::from_vec(1, 1, vec![f64::NAN]),
            Err(Error::NonFinite { .. })
        ));
    }
}
