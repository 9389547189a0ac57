//! Dense row-major matrices, stable softmax / log-sum-exp and a ridge solver.
//!
//! Everything here works in `f64`. The ridge solver goes through the
//! λ-regularized normal equations with a Cholesky factorization and falls back
//! to an SVD of the augmented system when the factorization breaks down.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Dense row-major `f64` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from row-major data, rejecting bad lengths and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix data"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::DimensionMismatch("ragged rows".into()));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    /// Builds a matrix by evaluating `f(i, j)` for every entry.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
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
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// `self · other`
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a = self.row(i);
            let o = out.row_mut(i);
            for (p, &aip) in a.iter().enumerate() {
                if aip == 0.0 {
                    continue;
                }
                for (oj, &bpj) in o.iter_mut().zip(other.row(p)) {
                    *oj += aip * bpj;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::DimensionMismatch(format!(
                "matmul_t {}x{} by ({}x{})ᵀ",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(Matrix::from_fn(self.rows, other.rows, |i, j| {
            dot(self.row(i), other.row(j))
        }))
    }

    /// `selfᵀ · other`
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::DimensionMismatch(format!(
                "t_matmul ({}x{})ᵀ by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for r in 0..self.rows {
            let a = self.row(r);
            let b = other.row(r);
            for (i, &ai) in a.iter().enumerate() {
                if ai == 0.0 {
                    continue;
                }
                for (oij, &bj) in out.row_mut(i).iter_mut().zip(b) {
                    *oij += ai * bj;
                }
            }
        }
        Ok(out)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a + b)
    }

    fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::DimensionMismatch(format!(
                "{:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
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
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn frobenius(&self) -> f64 {
        self.frobenius_sq().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Copies rows `[start, end)`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        assert!(start <= end && end <= self.rows);
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Copies columns `[start, end)`.
    pub fn slice_cols(&self, start: usize, end: usize) -> Matrix {
        assert!(start <= end && end <= self.cols);
        Matrix::from_fn(self.rows, end - start, |i, j| self.get(i, start + j))
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

    /// Stacks matrices vertically. All parts must share the column count.
    pub fn vstack(parts: &[&Matrix]) -> Result<Matrix> {
        let cols = parts.first().map_or(0, |m| m.cols);
        if parts.iter().any(|m| m.cols != cols) {
            return Err(Error::DimensionMismatch(
                "vstack column counts differ".into(),
            ));
        }
        let rows = parts.iter().map(|m| m.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for m in parts {
            data.extend_from_slice(&m.data);
        }
        Ok(Matrix { rows, cols, data })
    }

    pub(crate) fn to_nalgebra(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    pub(crate) fn from_nalgebra(m: &DMatrix<f64>) -> Matrix {
        Matrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity; zero vectors compare as 0 unless both are zero (then 1).
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 && nb == 0.0 {
        return 1.0;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

/// Stable log-sum-exp of a slice. Returns `-inf` for an empty slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let mx = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let s: f64 = xs.iter().map(|&x| (x - mx).exp()).sum();
    mx + s.ln()
}

/// Writes `softmax(xs)` into `out` and returns the log-sum-exp.
pub fn softmax_into(xs: &[f64], out: &mut [f64]) -> f64 {
    let mx = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &x) in out.iter_mut().zip(xs) {
        *o = (x - mx).exp();
        z += *o;
    }
    let inv = 1.0 / z;
    for o in out.iter_mut() {
        *o *= inv;
    }
    mx + z.ln()
}

/// Row-wise softmax and log-sum-exp of a score matrix.
pub fn softmax_lse_rows(scores: &Matrix) -> Result<(Matrix, Vec<f64>)> {
    if scores.cols() == 0 {
        return Err(Error::EmptyScoreRow);
    }
    if !scores.is_finite() {
        return Err(Error::NonFinite("scores"));
    }
    let mut probs = Matrix::zeros(scores.rows(), scores.cols());
    let mut lse = Vec::with_capacity(scores.rows());
    for i in 0..scores.rows() {
        lse.push(softmax_into(scores.row(i), probs.row_mut(i)));
    }
    Ok((probs, lse))
}

/// Ridge regression: `argmin_X ‖design·X − (targets − offset)‖²_F + λ‖X‖²_F`.
#[derive(Debug, Clone)]
pub struct RidgeProblem {
    pub design: Matrix,
    pub targets: Matrix,
    pub offset: Matrix,
    pub lambda_r: f64,
}

impl RidgeProblem {
    pub fn new(design: Matrix, targets: Matrix, lambda_r: f64) -> Self {
        let offset = Matrix::zeros(targets.rows(), targets.cols());
        Self {
            design,
            targets,
            offset,
            lambda_r,
        }
    }

    pub fn with_offset(mut self, offset: Matrix) -> Self {
        self.offset = offset;
        self
    }

    fn validate(&self) -> Result<()> {
        let n = self.design.rows();
        if self.targets.rows() != n || self.offset.rows() != n {
            return Err(Error::DimensionMismatch(format!(
                "ridge rows: design {n}, targets {}, offset {}",
                self.targets.rows(),
                self.offset.rows()
            )));
        }
        if self.targets.cols() != self.offset.cols() {
            return Err(Error::DimensionMismatch(
                "ridge targets/offset columns".into(),
            ));
        }
        if !(self.lambda_r >= 0.0) || !self.lambda_r.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "ridge lambda must be finite and >= 0, got {}",
                self.lambda_r
            )));
        }
        Ok(())
    }

    /// Regularized objective at `x`.
    pub fn objective(&self, x: &Matrix) -> Result<f64> {
        let resid = self
            .design
            .matmul(x)?
            .sub(&self.targets.sub(&self.offset)?)?;
        Ok(resid.frobenius_sq() + self.lambda_r * x.frobenius_sq())
    }
}

/// Solves a ridge problem through the normal equations.
pub fn ridge_solve(problem: &RidgeProblem) -> Result<Matrix> {
    problem.validate()?;
    let a = &problem.design;
    let rhs_targets = problem.targets.sub(&problem.offset)?;
    let p = a.cols();

    let mut gram = a.t_matmul(a)?;
    for i in 0..p {
        let v = gram.get(i, i) + problem.lambda_r;
        gram.set(i, i, v);
    }
    let rhs = a.t_matmul(&rhs_targets)?;

    if let Some(chol) = Cholesky::factor(&gram) {
        let mut x = chol.solve(&rhs);
        // one round of iterative refinement
        let resid = rhs.sub(&gram.matmul(&x)?)?;
        let dx = chol.solve(&resid);
        x = x.add(&dx)?;
        if x.is_finite() {
            return Ok(x);
        }
    }
    ridge_svd_fallback(a, &rhs_targets, problem.lambda_r)
}

/// Least squares on the augmented system `[A; √λ I] X = [B; 0]` by SVD, with
/// an explicit rank check.
fn ridge_svd_fallback(a: &Matrix, b: &Matrix, lambda: f64) -> Result<Matrix> {
    let (n, p) = a.shape();
    let sl = lambda.sqrt();
    let aug = Matrix::from_fn(n + p, p, |i, j| {
        if i < n {
            a.get(i, j)
        } else if i - n == j {
            sl
        } else {
            0.0
        }
    });
    let mut rhs = Matrix::zeros(n + p, b.cols());
    rhs.as_mut_slice()[..n * b.cols()].copy_from_slice(b.as_slice());

    let svd = aug.to_nalgebra().svd(true, true);
    let smax = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let tol = smax * f64::EPSILON * ((n + p).max(p) as f64);
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    if rank < p || smax == 0.0 {
        return Err(Error::SingularSystem);
    }
    let x = svd
        .solve(&rhs.to_nalgebra(), tol)
        .map_err(|_| Error::SingularSystem)?;
    Ok(Matrix::from_nalgebra(&x))
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
struct Cholesky {
    n: usize,
    l: Vec<f64>,
}

impl Cholesky {
    fn factor(a: &Matrix) -> Option<Self> {
        let n = a.rows();
        let max_diag = (0..n).map(|i| a.get(i, i).abs()).fold(0.0, f64::max);
        let pivot_floor = max_diag * 1e-12;
        let mut l = vec![0.0; n * n];
        for j in 0..n {
            let mut d = a.get(j, j);
            for k in 0..j {
                d -= l[j * n + k] * l[j * n + k];
            }
            if !(d > pivot_floor) {
                return None;
            }
            let djj = d.sqrt();
            l[j * n + j] = djj;
            for i in j + 1..n {
                let mut s = a.get(i, j);
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k];
                }
                l[i * n + j] = s / djj;
            }
        }
        Some(Self { n, l })
    }

    fn solve(&self, b: &Matrix) -> Matrix {
        let n = self.n;
        let mut x = b.clone();
        for c in 0..b.cols() {
            // forward: L y = b
            for i in 0..n {
                let mut s = x.get(i, c);
                for k in 0..i {
                    s -= self.l[i * n + k] * x.get(k, c);
                }
                x.set(i, c, s / self.l[i * n + i]);
            }
            // backward: Lᵀ x = y
            for i in (0..n).rev() {
                let mut s = x.get(i, c);
                for k in i + 1..n {
                    s -= self.l[k * n + i] * x.get(k, c);
                }
                x.set(i, c, s / self.l[i * n + i]);
            }
        }
        x
    }
}
