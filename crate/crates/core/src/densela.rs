//! Dense real matrices and the handful of factorizations the rest of the lab needs.
//!
//! Everything is row-major `f64`. Vectors are `n x 1` matrices; there is no
//! separate vector type.

use std::fmt;
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Maximum number of cyclic Jacobi sweeps before `sym_eig` gives up.
pub const JACOBI_MAX_SWEEPS: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("dimension mismatch: {op} got {left:?} and {right:?}")]
    DimensionMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("data length {len} does not match shape {rows}x{cols}")]
    BadLength {
        rows: usize,
        cols: usize,
        len: usize,
    },
    #[error("matrix must have positive dimensions, got {rows}x{cols}")]
    EmptyShape { rows: usize, cols: usize },
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric: asymmetry {asymmetry:e} exceeds {limit:e}")]
    NotSymmetric { asymmetry: f64, limit: f64 },
    #[error("Jacobi iteration did not converge after {sweeps} sweeps (off-diagonal mass {off:e})")]
    NoConvergence { sweeps: usize, off: f64 },
    #[error("damped eigenvalue {value:e} is not positive")]
    NotPositiveDefinite { value: f64 },
}

pub type Result<T> = std::result::Result<T, LinalgError>;

#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix")]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<RawMatrix> for DenseMatrix {
    type Error = LinalgError;

    fn try_from(raw: RawMatrix) -> Result<Self> {
        Self::from_vec(raw.rows, raw.cols, raw.data)
    }
}

impl DenseMatrix {
    /// Builds a matrix from row-major data, checking shape and finiteness.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(LinalgError::EmptyShape { rows, cols });
        }
        if data.len() != rows * cols {
            return Err(LinalgError::BadLength {
                rows,
                cols,
                len: data.len(),
            });
        }
        if let Some(k) = data.iter().position(|x| !x.is_finite()) {
            return Err(LinalgError::NonFinite {
                row: k / cols,
                col: k % cols,
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(LinalgError::BadLength {
                rows: r,
                cols: c,
                len: rows.iter().map(Vec::len).sum(),
            });
        }
        Self::from_vec(r, c, rows.concat())
    }

    /// Column vector (`n x 1`).
    pub fn col(values: &[f64]) -> Result<Self> {
        Self::from_vec(values.len(), 1, values.to_vec())
    }

    /// # Panics
    /// If either dimension is zero.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "zero-sized matrix {rows}x{cols}");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
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

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn is_vector(&self) -> bool {
        self.cols == 1
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

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols))
            .map(|i| self[(i, i)])
            .collect()
    }

    pub fn trace(&self) -> f64 {
        self.diag().iter().sum()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|x| x * s)
    }

    fn zip_with(
        &self,
        other: &Self,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(LinalgError::DimensionMismatch {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(Self {
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

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    /// `self + s * other`
    pub fn axpy(&self, s: f64, other: &Self) -> Result<Self> {
        self.zip_with(other, "axpy", |a, b| a + s * b)
    }

    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    /// Frobenius inner product.
    pub fn dot(&self, other: &Self) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(LinalgError::DimensionMismatch {
                op: "dot",
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `‖A − Aᵀ‖_F`, or infinity for non-square input.
    pub fn asymmetry(&self) -> f64 {
        if !self.is_square() {
            return f64::INFINITY;
        }
        let n = self.rows;
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                let d = self[(i, j)] - self[(j, i)];
                s += d * d;
            }
        }
        s.sqrt()
    }

    /// Column-stacking vectorization, returned as an `(rows*cols) x 1` vector.
    pub fn vec_columns(&self) -> Self {
        let mut out = Vec::with_capacity(self.len());
        for j in 0..self.cols {
            for i in 0..self.rows {
                out.push(self[(i, j)]);
            }
        }
        Self {
            rows: self.len(),
            cols: 1,
            data: out,
        }
    }

    /// Inverse of [`vec_columns`](Self::vec_columns).
    pub fn unvec_columns(v: &Self, rows: usize, cols: usize) -> Result<Self> {
        if v.len() != rows * cols {
            return Err(LinalgError::BadLength {
                rows,
                cols,
                len: v.len(),
            });
        }
        Ok(Self::from_fn(rows, cols, |i, j| v.data[j * rows + i]))
    }

    /// Reinterprets the row-major data with a new shape.
    pub fn reshaped(&self, rows: usize, cols: usize) -> Result<Self> {
        Self::from_vec(rows, cols, self.data.clone())
    }
}

impl Index<(usize, usize)> for DenseMatrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for DenseMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "DenseMatrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        write!(f, "]")
    }
}

pub fn matmul(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols != b.rows {
        return Err(LinalgError::DimensionMismatch {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = DenseMatrix::zeros(m, n);
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out.data[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bpj) in orow.iter_mut().zip(brow) {
                *o += aip * bpj;
            }
        }
    }
    Ok(out)
}

/// `A Aᵀ`, exactly symmetric.
pub fn gram_rows(a: &DenseMatrix) -> DenseMatrix {
    let n = a.rows;
    let mut out = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let s: f64 = a.row(i).iter().zip(a.row(j)).map(|(x, y)| x * y).sum();
            out[(i, j)] = s;
            out[(j, i)] = s;
        }
    }
    out
}

/// `Aᵀ A`, exactly symmetric.
pub fn gram_cols(a: &DenseMatrix) -> DenseMatrix {
    gram_rows(&a.transpose())
}

/// Kronecker product; block `(i, j)` of the result is `a[i, j] * b`.
pub fn kron(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    let (m, n) = a.shape();
    let (p, q) = b.shape();
    DenseMatrix::from_fn(m * p, n * q, |r, c| a[(r / p, c / q)] * b[(r % p, c % q)])
}

/// Symmetric eigendecomposition `A = Q diag(λ) Qᵀ` with ascending eigenvalues.
#[derive(Debug, Clone)]
pub struct SymEig {
    pub eigenvalues: Vec<f64>,
    /// Orthonormal eigenvectors stored as columns.
    pub eigenvectors: DenseMatrix,
}

impl SymEig {
    /// `Q f(Λ) Qᵀ`
    pub fn reconstruct_with(&self, f: impl Fn(f64) -> f64) -> DenseMatrix {
        let q = &self.eigenvectors;
        let n = q.rows();
        let fl: Vec<f64> = self.eigenvalues.iter().map(|&l| f(l)).collect();
        let mut out = DenseMatrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let s: f64 = (0..n).map(|k| q[(i, k)] * fl[k] * q[(j, k)]).sum();
                out[(i, j)] = s;
                out[(j, i)] = s;
            }
        }
        out
    }

    pub fn reconstruct(&self) -> DenseMatrix {
        self.reconstruct_with(|l| l)
    }
}

fn off_diagonal_norm(a: &DenseMatrix) -> f64 {
    let n = a.rows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a[(i, j)] * a[(i, j)];
            }
        }
    }
    s.sqrt()
}

/// Cyclic Jacobi eigensolver for symmetric matrices.
///
/// Sweeps until the off-diagonal Frobenius mass drops to `tol * ‖A‖_F`,
/// capped at [`JACOBI_MAX_SWEEPS`].
pub fn sym_eig(a: &DenseMatrix, tol: f64) -> Result<SymEig> {
    let (rows, cols) = a.shape();
    if rows != cols {
        return Err(LinalgError::NotSquare { rows, cols });
    }
    let n = rows;
    let norm = a.frobenius_norm();
    let asym = a.asymmetry();
    if asym > tol * norm {
        return Err(LinalgError::NotSymmetric {
            asymmetry: asym,
            limit: tol * norm,
        });
    }
    // symmetrize so the rotations act on an exactly symmetric matrix
    let mut m = DenseMatrix::from_fn(n, n, |i, j| 0.5 * (a[(i, j)] + a[(j, i)]));
    let mut v = DenseMatrix::identity(n);
    let target = tol * norm;

    let mut sweeps = 0;
    loop {
        let off = off_diagonal_norm(&m);
        if off <= target || off == 0.0 {
            break;
        }
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(LinalgError::NoConvergence { sweeps, off });
        }
        sweeps += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                // A ← Jᵀ A J with J the (p, q) plane rotation
                for k in 0..n {
                    let akp = m[(k, p)];
                    let akq = m[(k, q)];
                    m[(k, p)] = c * akp - s * akq;
                    m[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = m[(p, k)];
                    let aqk = m[(q, k)];
                    m[(p, k)] = c * apk - s * aqk;
                    m[(q, k)] = s * apk + c * aqk;
                }
                m[(p, q)] = 0.0;
                m[(q, p)] = 0.0;
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(i, i)].total_cmp(&m[(j, j)]).then(i.cmp(&j)));
    let eigenvalues = order.iter().map(|&i| m[(i, i)]).collect();
    let eigenvectors = DenseMatrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    Ok(SymEig {
        eigenvalues,
        eigenvectors,
    })
}

/// Default tolerance used by callers that do not care to pick one.
pub const EIG_TOL: f64 = 1e-14;

/// `Q (Λ + damping I)^exponent Qᵀ` for symmetric `a`.
///
/// Requires every damped eigenvalue to be positive, so negative and
/// fractional exponents are well defined.
pub fn sym_power(a: &DenseMatrix, exponent: f64, damping: f64) -> Result<DenseMatrix> {
    let eig = sym_eig(a, EIG_TOL)?;
    sym_power_from_eig(&eig, exponent, damping)
}

pub fn sym_power_from_eig(eig: &SymEig, exponent: f64, damping: f64) -> Result<DenseMatrix> {
    if let Some(&bad) = eig.eigenvalues.iter().find(|&&l| l + damping <= 0.0) {
        return Err(LinalgError::NotPositiveDefinite {
            value: bad + damping,
        });
    }
    Ok(eig.reconstruct_with(|l| (l + damping).powf(exponent)))
}

/// `Q (Λ + damping I)^(−p) Qᵀ`; `p = 1` inverts, `p = 1/2` whitens, `p = 1/4` gives the Shampoo root.
pub fn spd_inv_power(a: &DenseMatrix, p: f64, damping: f64) -> Result<DenseMatrix> {
    sym_power(a, -p, damping)
}
