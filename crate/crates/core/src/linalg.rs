//! Dense row-major `f64` matrices and truncated SVD.
//!
//! Two SVD routes live here and are kept independent of each other:
//!
//! * [`randomized_svd`]: Gaussian sketch, power iterations, and a small core
//!   SVD. QR and the core factorization are delegated to `nalgebra`.
//! * [`exact_svd_oracle`]: a self-contained one-sided Jacobi SVD used to
//!   check the randomized route on small inputs.

use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Stream;

/// Default number of power iterations for [`randomized_svd`].
pub const DEFAULT_N_ITER: usize = 2;
/// Default oversampling for [`randomized_svd`].
pub const DEFAULT_OVERSAMPLE: usize = 8;
/// Floor applied when renormalizing the sketch between power iterations.
pub const POWER_ITER_STABILIZER: f64 = 1e-6;
/// Largest `min(rows, cols)` the Jacobi oracle accepts.
pub const ORACLE_MAX_DIM: usize = 256;

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            write!(f, "  ")?;
            for j in 0..self.cols {
                write!(f, "{:>12.6} ", self.get(i, j))?;
            }
            writeln!(f)?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    /// Build from row-major data, validating shape and finiteness.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::dim(format!("empty shape {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::dim(format!(
                "data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("matrix entry {pos}")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "empty shape {rows}x{cols}");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[i * cols + j] = f(i, j);
            }
        }
        m
    }

    /// Build from nested rows. Panics on ragged input; intended for literals.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(rows.len(), cols, data).expect("valid literal matrix")
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        Self::from_fn(n, n, |i, j| if i == j { values[i] } else { 0.0 })
    }

    pub fn gaussian(rows: usize, cols: usize, std: f64, stream: &mut Stream) -> Self {
        let data = (0..rows * cols).map(|_| std * stream.normal()).collect();
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn set_column(&mut self, j: usize, values: &[f64]) {
        for (i, v) in values.iter().enumerate() {
            self.set(i, j, *v);
        }
    }

    /// First `k` columns.
    pub fn leading_columns(&self, k: usize) -> Matrix {
        Matrix::from_fn(self.rows, k, |i, j| self.get(i, j))
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::dim(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for p in 0..self.cols {
                let a = self.data[i * self.cols + p];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * other.cols..(p + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::dim(format!(
                "t_matmul ({}x{})ᵀ by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for p in 0..self.rows {
            let a_row = self.row(p);
            let b_row = other.row(p);
            for (i, a) in a_row.iter().enumerate() {
                if *a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::dim(format!(
                "matmul_t {}x{} by ({}x{})ᵀ",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(Matrix::from_fn(self.rows, other.rows, |i, j| {
            dot(self.row(i), other.row(j))
        }))
    }

    fn check_same_shape(&self, other: &Matrix, op: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dim(format!(
                "{op} {}x{} with {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other, "add")?;
        let mut out = self.clone();
        out.add_assign(other)?;
        Ok(out)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other, "sub")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        self.check_same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Matrix) -> Result<()> {
        self.check_same_shape(other, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&self, s: f64) -> Matrix {
        let mut out = self.clone();
        out.scale_in_place(s);
        out
    }

    pub fn scale_in_place(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    /// `self · diag(d)`: scales column `j` by `d[j]`.
    pub fn scale_columns(&self, d: &[f64]) -> Result<Matrix> {
        if d.len() != self.cols {
            return Err(Error::dim(format!(
                "column scaling of {} columns by {} factors",
                self.cols,
                d.len()
            )));
        }
        Ok(Matrix::from_fn(self.rows, self.cols, |i, j| {
            self.get(i, j) * d[j]
        }))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.frobenius_sq().sqrt()
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> Result<f64> {
        self.check_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub(crate) fn to_nalgebra(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    pub(crate) fn from_nalgebra(m: &DMatrix<f64>) -> Matrix {
        Matrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Free-function form of [`Matrix::matmul`].
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    a.matmul(b)
}

/// Truncated SVD factors `W ≈ U diag(sigma) Vᵀ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvdResult {
    pub u: Matrix,
    pub v: Matrix,
    pub sigma: Vec<f64>,
}

impl SvdResult {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    /// `U diag(sigma) Vᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        self.u
            .scale_columns(&self.sigma)
            .and_then(|us| us.matmul_t(&self.v))
            .expect("svd factors have consistent shapes")
    }

    /// Largest deviation of `UᵀU` and `VᵀV` from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        gram_identity_error(&self.u).max(gram_identity_error(&self.v))
    }
}

/// `max |QᵀQ − I|` for a matrix with (supposedly) orthonormal columns.
pub fn gram_identity_error(q: &Matrix) -> f64 {
    let g = q.t_matmul(q).expect("square gram");
    let eye = Matrix::identity(q.cols());
    g.max_abs_diff(&eye).expect("same shape")
}

/// Sign convention shared by both SVD routes: the largest-magnitude entry of
/// each left singular vector is positive (earliest index wins ties).
fn normalize_signs(u: &mut Matrix, v: &mut Matrix) {
    for j in 0..u.cols() {
        let col = u.column(j);
        let mut best = 0usize;
        for (i, x) in col.iter().enumerate() {
            if x.abs() > col[best].abs() {
                best = i;
            }
        }
        if col[best] < 0.0 {
            for i in 0..u.rows() {
                u.set(i, j, -u.get(i, j));
            }
            for i in 0..v.rows() {
                v.set(i, j, -v.get(i, j));
            }
        }
    }
}

/// Reorder singular triplets by non-increasing sigma (stable).
fn sort_triplets(u: &Matrix, v: &Matrix, sigma: &[f64], keep: usize) -> SvdResult {
    let mut order: Vec<usize> = (0..sigma.len()).collect();
    order.sort_by(|&a, &b| sigma[b].total_cmp(&sigma[a]).then(a.cmp(&b)));
    order.truncate(keep);
    let u_sorted = Matrix::from_fn(u.rows(), keep, |i, j| u.get(i, order[j]));
    let v_sorted = Matrix::from_fn(v.rows(), keep, |i, j| v.get(i, order[j]));
    let sigma_sorted = order.iter().map(|&j| sigma[j].max(0.0)).collect();
    let mut out = SvdResult {
        u: u_sorted,
        v: v_sorted,
        sigma: sigma_sorted,
    };
    normalize_signs(&mut out.u, &mut out.v);
    out
}

/// Thin QR `Q` factor (orthonormal columns spanning the input's columns).
pub(crate) fn thin_q(m: &Matrix) -> Matrix {
    let qr = m.to_nalgebra().qr();
    Matrix::from_nalgebra(&qr.q())
}

fn renormalize(m: &mut Matrix) {
    let scale = m.max_abs().max(POWER_ITER_STABILIZER);
    m.scale_in_place(1.0 / scale);
}

/// Randomized truncated SVD with a Gaussian sketch and `n_iter` power
/// iterations. Deterministic for a fixed `seed`.
pub fn randomized_svd(
    w: &Matrix,
    k: usize,
    n_iter: usize,
    oversample: usize,
    seed: u64,
) -> Result<SvdResult> {
    let (m, n) = w.shape();
    let min_dim = m.min(n);
    if k == 0 || k > min_dim {
        return Err(Error::dim(format!(
            "rank k={k} outside 1..={min_dim} for a {m}x{n} matrix"
        )));
    }
    let sketch = (k + oversample).min(min_dim);

    let mut stream = Stream::new(seed);
    let omega = Matrix::gaussian(n, sketch, 1.0, &mut stream);

    let mut y = w.matmul(&omega)?;
    renormalize(&mut y);
    let mut q = thin_q(&y);
    for _ in 0..n_iter {
        let mut z = w.t_matmul(&q)?;
        renormalize(&mut z);
        let z = thin_q(&z);
        let mut y = w.matmul(&z)?;
        renormalize(&mut y);
        q = thin_q(&y);
    }

    // Core factorization of the small projected matrix B = Qᵀ W (sketch × n).
    let b = q.t_matmul(w)?;
    let svd = b.to_nalgebra().svd(true, true);
    let ub = Matrix::from_nalgebra(svd.u.as_ref().expect("u requested"));
    let vt = svd.v_t.as_ref().expect("v_t requested");
    let vb = Matrix::from_nalgebra(&vt.transpose());
    let sigma: Vec<f64> = svd.singular_values.iter().copied().collect();
    let u_full = q.matmul(&ub)?;
    Ok(sort_triplets(&u_full, &vb, &sigma, k))
}

/// Exact thin SVD by one-sided Jacobi rotations.
///
/// Returns `min(rows, cols)` triplets. Intended as a test oracle; refuses
/// inputs whose smaller dimension exceeds [`ORACLE_MAX_DIM`].
pub fn exact_svd_oracle(w: &Matrix) -> Result<SvdResult> {
    let (m, n) = w.shape();
    if m.min(n) > ORACLE_MAX_DIM {
        return Err(Error::OracleRefused(format!(
            "{m}x{n} exceeds the oracle limit of {ORACLE_MAX_DIM}"
        )));
    }
    if m >= n {
        jacobi_tall(w)
    } else {
        let t = jacobi_tall(&w.transpose())?;
        let mut out = SvdResult {
            u: t.v,
            v: t.u,
            sigma: t.sigma,
        };
        normalize_signs(&mut out.u, &mut out.v);
        Ok(out)
    }
}

/// One-sided Jacobi on a tall (m ≥ n) matrix.
fn jacobi_tall(w: &Matrix) -> Result<SvdResult> {
    let (m, n) = w.shape();
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| w.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    const MAX_SWEEPS: usize = 80;
    let eps = f64::EPSILON;
    let mut converged = n < 2;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == 0.0 || gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut cols, p, q, c, s);
                rotate_pair(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::OracleRefused(
            "jacobi sweeps did not converge".to_string(),
        ));
    }

    let sigma: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    let scale = sigma.iter().cloned().fold(0.0, f64::max);
    let tiny = scale * (m.max(n) as f64) * eps;
    let mut u = Matrix::zeros(m, n);
    let mut missing = Vec::new();
    for j in 0..n {
        if sigma[j] > tiny && sigma[j] > 0.0 {
            let col: Vec<f64> = cols[j].iter().map(|x| x / sigma[j]).collect();
            u.set_column(j, &col);
        } else {
            missing.push(j);
        }
    }
    complete_orthonormal(&mut u, &missing);
    let sigma: Vec<f64> = sigma
        .iter()
        .map(|&s| if s > tiny { s } else { 0.0 })
        .collect();
    let v_mat = Matrix::from_fn(n, n, |i, j| v[j][i]);
    Ok(sort_triplets(&u, &v_mat, &sigma, n))
}

fn rotate_pair(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (a, b) = (&mut lo[p], &mut hi[0]);
    for (x, y) in a.iter_mut().zip(b.iter_mut()) {
        let (xp, yq) = (*x, *y);
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

/// Fill the listed columns of `u` with unit vectors orthogonal to all other
/// columns, by Gram–Schmidt over the standard basis.
fn complete_orthonormal(u: &mut Matrix, missing: &[usize]) {
    let m = u.rows();
    let mut basis_idx = 0usize;
    for &j in missing {
        while basis_idx < m {
            let mut cand = vec![0.0; m];
            cand[basis_idx] = 1.0;
            basis_idx += 1;
            for _pass in 0..2 {
                for c in 0..u.cols() {
                    if c == j {
                        continue;
                    }
                    let col = u.column(c);
                    let proj = dot(&cand, &col);
                    for (x, y) in cand.iter_mut().zip(&col) {
                        *x -= proj * y;
                    }
                }
            }
            let norm = dot(&cand, &cand).sqrt();
            if norm > 1e-8 {
                let unit: Vec<f64> = cand.iter().map(|x| x / norm).collect();
                u.set_column(j, &unit);
                break;
            }
        }
    }
}

/// Random matrix with orthonormal columns (QR of a seeded Gaussian, with the
/// sign of `R`'s diagonal folded into `Q`).
pub fn random_orthonormal(rows: usize, cols: usize, stream: &mut Stream) -> Result<Matrix> {
    if cols > rows {
        return Err(Error::dim(format!(
            "cannot fit {cols} orthonormal columns in dimension {rows}"
        )));
    }
    let g = Matrix::gaussian(rows, cols, 1.0, stream);
    let qr = g.to_nalgebra().qr();
    let q = Matrix::from_nalgebra(&qr.q());
    let r = qr.r();
    let signs: Vec<f64> = (0..cols)
        .map(|j| if r[(j, j)] < 0.0 { -1.0 } else { 1.0 })
        .collect();
    q.scale_columns(&signs)
}

/// `U diag(sigma) Vᵀ` with random orthonormal `U`, `V`.
pub fn planted_spectrum(
    rows: usize,
    cols: usize,
    sigma: &[f64],
    stream: &mut Stream,
) -> Result<Matrix> {
    let r = sigma.len();
    if r > rows.min(cols) {
        return Err(Error::dim(format!(
            "{r} singular values for a {rows}x{cols} matrix"
        )));
    }
    let u = random_orthonormal(rows, r, stream)?;
    let v = random_orthonormal(cols, r, stream)?;
    u.scale_columns(sigma)?.matmul_t(&v)
}
