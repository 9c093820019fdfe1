//! Dense matrix support for the certificate computations.
//!
//! Everything here is small and dense: symmetric eigendecompositions,
//! principal square roots of PSD matrices, the conjugation
//! `H_M = (M^{1/2})ᵀ H M^{1/2}`, discrete Lyapunov solves and Schur-stability
//! tests. Matrices are backed by `nalgebra::DMatrix<f64>`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Default PSD classification tolerance, scaled by `max(1, ‖M‖_F)`.
pub const DEFAULT_PSD_TOL: f64 = 1e-9;

/// Spectral radius must sit below `1 - SCHUR_MARGIN` for a Lyapunov solve.
pub const SCHUR_MARGIN: f64 = 1e-10;

const SYMMETRY_TOL: f64 = 1e-12;
const EIG_EPS: f64 = 1e-15;
const EIG_MAX_ITER: usize = 10_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatError {
    #[error("matrix data must be finite")]
    NonFinite,
    #[error("expected {expected} entries, got {got}")]
    BadShape { expected: usize, got: usize },
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("matrix is not symmetric (entry ({row},{col}) differs by {gap:e})")]
    NonSymmetric { row: usize, col: usize, gap: f64 },
    #[error("matrix is not positive semidefinite (smallest eigenvalue {0:e})")]
    NotPsd(f64),
    #[error("matrix is not positive definite (smallest eigenvalue {0:e})")]
    NotPd(f64),
    #[error("matrix is not Schur stable (spectral radius {0})")]
    NotSchurStable(f64),
    #[error("eigenvalue iteration did not converge")]
    NonConvergence,
    #[error("linear system is singular or too ill-conditioned (residual {0:e})")]
    SolveSingular(f64),
}

pub type Result<T> = std::result::Result<T, MatError>;

fn check_finite(m: &DMatrix<f64>) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(MatError::NonFinite)
    }
}

/// Row-major flattening, the on-disk layout for every matrix.
pub fn to_row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.nrows() * m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}

/// Square real matrix with finite entries (dynamics matrices).
#[derive(Debug, Clone, PartialEq)]
pub struct SquareMatrix(DMatrix<f64>);

impl SquareMatrix {
    pub fn new(dim: usize, row_major: Vec<f64>) -> Result<Self> {
        if row_major.len() != dim * dim || dim == 0 {
            return Err(MatError::BadShape {
                expected: dim * dim,
                got: row_major.len(),
            });
        }
        Self::from_dmatrix(DMatrix::from_row_slice(dim, dim, &row_major))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n == 0 || rows.iter().any(|r| r.len() != n) {
            return Err(MatError::BadShape {
                expected: n * n,
                got: rows.iter().map(Vec::len).sum(),
            });
        }
        Self::new(n, rows.concat())
    }

    pub fn from_dmatrix(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(MatError::DimMismatch(m.nrows(), m.ncols()));
        }
        if m.nrows() == 0 {
            return Err(MatError::BadShape {
                expected: 1,
                got: 0,
            });
        }
        check_finite(&m)?;
        Ok(Self(m))
    }

    pub fn identity(dim: usize) -> Self {
        Self(DMatrix::identity(dim, dim))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(DMatrix::zeros(dim, dim))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_dmatrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_dmatrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn row_major(&self) -> Vec<f64> {
        to_row_major(&self.0)
    }

    /// `A^k` by repeated squaring.
    pub fn pow(&self, k: usize) -> DMatrix<f64> {
        let mut result = DMatrix::identity(self.dim(), self.dim());
        let mut base = self.0.clone();
        let mut e = k;
        while e > 0 {
            if e & 1 == 1 {
                result = &result * &base;
            }
            base = &base * &base;
            e >>= 1;
        }
        result
    }
}

/// Rectangular matrix with finite entries (input matrices, gains).
#[derive(Debug, Clone, PartialEq)]
pub struct RectMatrix(DMatrix<f64>);

impl RectMatrix {
    pub fn new(rows: usize, cols: usize, row_major: Vec<f64>) -> Result<Self> {
        if row_major.len() != rows * cols || rows == 0 || cols == 0 {
            return Err(MatError::BadShape {
                expected: rows * cols,
                got: row_major.len(),
            });
        }
        Self::from_dmatrix(DMatrix::from_row_slice(rows, cols, &row_major))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(MatError::BadShape {
                expected: r * c,
                got: rows.iter().map(Vec::len).sum(),
            });
        }
        Self::new(r, c, rows.concat())
    }

    pub fn from_dmatrix(m: DMatrix<f64>) -> Result<Self> {
        check_finite(&m)?;
        Ok(Self(m))
    }

    pub fn nrows(&self) -> usize {
        self.0.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.0.ncols()
    }

    pub fn as_dmatrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn row_major(&self) -> Vec<f64> {
        to_row_major(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Definiteness {
    PositiveDefinite,
    PositiveSemidefinite,
    Indefinite,
}

/// Symmetric matrix carrying its own PSD classification tolerance.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    m: DMatrix<f64>,
    psd_tol: f64,
}

impl SymMatrix {
    /// Strict constructor for external data: rejects asymmetric input.
    pub fn new(dim: usize, row_major: Vec<f64>) -> Result<Self> {
        if row_major.len() != dim * dim || dim == 0 {
            return Err(MatError::BadShape {
                expected: dim * dim,
                got: row_major.len(),
            });
        }
        Self::from_dmatrix(DMatrix::from_row_slice(dim, dim, &row_major))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let sq = SquareMatrix::from_rows(rows)?;
        Self::from_dmatrix(sq.into_dmatrix())
    }

    pub fn from_dmatrix(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(MatError::DimMismatch(m.nrows(), m.ncols()));
        }
        if m.nrows() == 0 {
            return Err(MatError::BadShape {
                expected: 1,
                got: 0,
            });
        }
        check_finite(&m)?;
        let n = m.nrows();
        for i in 0..n {
            for j in (i + 1)..n {
                let gap = (m[(i, j)] - m[(j, i)]).abs();
                if gap > SYMMETRY_TOL * m[(i, j)].abs().max(1.0) {
                    return Err(MatError::NonSymmetric {
                        row: i,
                        col: j,
                        gap,
                    });
                }
            }
        }
        Ok(Self::symmetrize(m))
    }

    /// Replaces `m` by `(m + mᵀ)/2`. For results of arithmetic that is
    /// symmetric up to rounding.
    pub fn symmetrize(m: DMatrix<f64>) -> Self {
        let s = (&m + m.transpose()) * 0.5;
        Self {
            m: s,
            psd_tol: DEFAULT_PSD_TOL,
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self::symmetrize(DMatrix::identity(dim, dim))
    }

    pub fn zeros(dim: usize) -> Self {
        Self::symmetrize(DMatrix::zeros(dim, dim))
    }

    pub fn diag(values: &[f64]) -> Result<Self> {
        Self::from_dmatrix(DMatrix::from_diagonal(&DVector::from_row_slice(values)))
    }

    pub fn scaled_identity(dim: usize, s: f64) -> Self {
        Self::symmetrize(DMatrix::identity(dim, dim) * s)
    }

    pub fn with_psd_tol(mut self, tol: f64) -> Self {
        self.psd_tol = tol.max(0.0);
        self
    }

    pub fn psd_tol(&self) -> f64 {
        self.psd_tol
    }

    /// Absolute tolerance: `psd_tol · max(1, ‖M‖_F)`.
    pub fn effective_tol(&self) -> f64 {
        self.psd_tol * self.m.norm().max(1.0)
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn as_dmatrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn row_major(&self) -> Vec<f64> {
        to_row_major(&self.m)
    }

    pub fn frobenius(&self) -> f64 {
        self.m.norm()
    }

    pub fn trace(&self) -> f64 {
        self.m.trace()
    }

    pub fn quad_form(&self, x: &DVector<f64>) -> f64 {
        x.dot(&(&self.m * x))
    }

    pub fn classify(&self) -> Result<Definiteness> {
        let lmin = lambda_min(self)?;
        let tol = self.effective_tol();
        Ok(if lmin > tol {
            Definiteness::PositiveDefinite
        } else if lmin >= -tol {
            Definiteness::PositiveSemidefinite
        } else {
            Definiteness::Indefinite
        })
    }

    pub fn add(&self, other: &SymMatrix) -> Result<SymMatrix> {
        same_dim(self.dim(), other.dim())?;
        Ok(Self::symmetrize(&self.m + &other.m).with_psd_tol(self.psd_tol))
    }

    pub fn sub(&self, other: &SymMatrix) -> Result<SymMatrix> {
        same_dim(self.dim(), other.dim())?;
        Ok(Self::symmetrize(&self.m - &other.m).with_psd_tol(self.psd_tol))
    }

    pub fn scale(&self, s: f64) -> SymMatrix {
        Self::symmetrize(&self.m * s).with_psd_tol(self.psd_tol)
    }

    /// `Bᵀ M B` for a square `B` of matching size.
    pub fn congruence(&self, b: &DMatrix<f64>) -> Result<SymMatrix> {
        same_dim(self.dim(), b.nrows())?;
        Ok(Self::symmetrize(b.transpose() * &self.m * b).with_psd_tol(self.psd_tol))
    }
}

impl Serialize for SymMatrix {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        MatrixDoc {
            rows: self.dim(),
            cols: self.dim(),
            entries: self.row_major(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for SymMatrix {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let doc = MatrixDoc::deserialize(d)?;
        if doc.rows != doc.cols {
            return Err(serde::de::Error::custom("symmetric matrix must be square"));
        }
        SymMatrix::new(doc.rows, doc.entries).map_err(serde::de::Error::custom)
    }
}

impl Serialize for SquareMatrix {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        MatrixDoc {
            rows: self.dim(),
            cols: self.dim(),
            entries: self.row_major(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for SquareMatrix {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let doc = MatrixDoc::deserialize(d)?;
        if doc.rows != doc.cols {
            return Err(serde::de::Error::custom("matrix must be square"));
        }
        SquareMatrix::new(doc.rows, doc.entries).map_err(serde::de::Error::custom)
    }
}

impl Serialize for RectMatrix {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        MatrixDoc {
            rows: self.nrows(),
            cols: self.ncols(),
            entries: self.row_major(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for RectMatrix {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let doc = MatrixDoc::deserialize(d)?;
        RectMatrix::new(doc.rows, doc.cols, doc.entries).map_err(serde::de::Error::custom)
    }
}

/// Serialized matrix layout: dimensions plus row-major entries.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixDoc {
    pub rows: usize,
    pub cols: usize,
    pub entries: Vec<f64>,
}

fn same_dim(a: usize, b: usize) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(MatError::DimMismatch(a, b))
    }
}

/// Eigenvalues ascending, eigenvectors as orthonormal columns.
#[derive(Debug, Clone)]
pub struct EigenDecomp {
    pub eigenvalues: DVector<f64>,
    pub eigenvectors: DMatrix<f64>,
}

impl EigenDecomp {
    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.eigenvectors
            * DMatrix::from_diagonal(&self.eigenvalues)
            * self.eigenvectors.transpose()
    }

    pub fn min(&self) -> f64 {
        self.eigenvalues[0]
    }

    pub fn max(&self) -> f64 {
        self.eigenvalues[self.eigenvalues.len() - 1]
    }
}

pub fn eig_sym(m: &SymMatrix) -> Result<EigenDecomp> {
    let n = m.dim();
    let se = nalgebra::SymmetricEigen::try_new(m.m.clone(), EIG_EPS, EIG_MAX_ITER)
        .ok_or(MatError::NonConvergence)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| se.eigenvalues[i].total_cmp(&se.eigenvalues[j]));
    let eigenvalues = DVector::from_iterator(n, order.iter().map(|&i| se.eigenvalues[i]));
    let mut eigenvectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        eigenvectors.set_column(dst, &se.eigenvectors.column(src));
    }
    Ok(EigenDecomp {
        eigenvalues,
        eigenvectors,
    })
}

pub fn lambda_min(m: &SymMatrix) -> Result<f64> {
    Ok(eig_sym(m)?.min())
}

pub fn lambda_max(m: &SymMatrix) -> Result<f64> {
    Ok(eig_sym(m)?.max())
}

pub fn is_pd(m: &SymMatrix) -> Result<bool> {
    Ok(lambda_min(m)? > m.effective_tol())
}

pub fn is_psd(m: &SymMatrix) -> Result<bool> {
    Ok(lambda_min(m)? >= -m.effective_tol())
}

fn spectral_map(m: &SymMatrix, f: impl Fn(f64) -> f64) -> Result<SymMatrix> {
    let e = eig_sym(m)?;
    let tol = m.effective_tol();
    if e.min() < -tol {
        return Err(MatError::NotPsd(e.min()));
    }
    let mapped = e.eigenvalues.map(|l| if l <= 0.0 { 0.0 } else { f(l) });
    let out = &e.eigenvectors * DMatrix::from_diagonal(&mapped) * e.eigenvectors.transpose();
    Ok(SymMatrix::symmetrize(out).with_psd_tol(m.psd_tol))
}

/// Principal square root `S = Sᵀ ⪰ 0` with `SᵀS = M`. Eigenvalues in
/// `[-tol, 0]` are clamped to zero before rooting.
pub fn sym_sqrt(m: &SymMatrix) -> Result<SymMatrix> {
    spectral_map(m, f64::sqrt)
}

/// `M^{-1/2}` for positive definite `M`.
pub fn sym_inv_sqrt(m: &SymMatrix) -> Result<SymMatrix> {
    let lmin = lambda_min(m)?;
    if lmin <= m.effective_tol() {
        return Err(MatError::NotPd(lmin));
    }
    spectral_map(m, |l| 1.0 / l.sqrt())
}

/// `H_M := (M^{1/2})ᵀ H M^{1/2}`, symmetrized.
pub fn conjugate(h: &SymMatrix, m: &SymMatrix) -> Result<SymMatrix> {
    same_dim(h.dim(), m.dim())?;
    let root = sym_sqrt(m)?;
    Ok(SymMatrix::symmetrize(root.m.transpose() * &h.m * &root.m).with_psd_tol(h.psd_tol))
}

/// Largest eigenvalue modulus of a general square matrix.
pub fn spectral_radius(a: &SquareMatrix) -> Result<f64> {
    let n = a.dim();
    if n == 1 {
        return Ok(a.0[(0, 0)].abs());
    }
    if a.0.iter().all(|&v| v == 0.0) {
        return Ok(0.0);
    }
    // nalgebra's QR iteration can stall on exactly singular input; the
    // spectrum of A + cI is the spectrum of A moved by c
    let scale = 1.0 + a.0.norm();
    for shift in [0.0, 0.5 * scale, -0.75 * scale, 1.25 * scale] {
        let m = &a.0 + DMatrix::identity(n, n) * shift;
        if let Some(schur) = nalgebra::Schur::try_new(m, EIG_EPS, EIG_MAX_ITER) {
            return Ok(schur
                .complex_eigenvalues()
                .iter()
                .map(|z| (z - shift).norm())
                .fold(0.0, f64::max));
        }
    }
    Err(MatError::NonConvergence)
}

pub fn is_schur_stable(a: &SquareMatrix) -> Result<bool> {
    Ok(spectral_radius(a)? < 1.0 - SCHUR_MARGIN)
}

/// Solves `X - AᵀXA = Q` through the Kronecker form
/// `(I - Aᵀ⊗Aᵀ) vec(X) = vec(Q)` without checking stability. Used by
/// [`solve_discrete_lyapunov`] and by tests probing unstable `A`.
pub fn lyapunov_kronecker(a: &SquareMatrix, q: &SymMatrix) -> Result<DMatrix<f64>> {
    same_dim(a.dim(), q.dim())?;
    let n = a.dim();
    let at = a.0.transpose();
    let kron = at.kronecker(&at);
    let system = DMatrix::<f64>::identity(n * n, n * n) - kron;
    let rhs = DVector::from_column_slice(q.m.as_slice());
    let lu = system.clone().lu();
    let mut x = lu.solve(&rhs).ok_or(MatError::SolveSingular(f64::INFINITY))?;
    // One round of iterative refinement.
    let r = &rhs - &system * &x;
    if let Some(dx) = lu.solve(&r) {
        x += dx;
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(MatError::SolveSingular(f64::INFINITY));
    }
    Ok(DMatrix::from_column_slice(n, n, x.as_slice()))
}

pub fn lyapunov_residual(a: &SquareMatrix, x: &DMatrix<f64>, q: &SymMatrix) -> f64 {
    (x - a.0.transpose() * x * &a.0 - &q.m).norm()
}

/// Unique PD solution of `X - AᵀXA = Q` for Schur-stable `A` and PD `Q`.
pub fn solve_discrete_lyapunov(a: &SquareMatrix, q: &SymMatrix) -> Result<SymMatrix> {
    same_dim(a.dim(), q.dim())?;
    let rho = spectral_radius(a)?;
    if rho >= 1.0 - SCHUR_MARGIN {
        return Err(MatError::NotSchurStable(rho));
    }
    let qmin = lambda_min(q)?;
    if qmin <= q.effective_tol() {
        return Err(MatError::NotPd(qmin));
    }
    let raw = lyapunov_kronecker(a, q)?;
    let x = SymMatrix::symmetrize(raw).with_psd_tol(q.psd_tol);
    let residual = lyapunov_residual(a, &x.m, q);
    if residual > 1e-10 * q.frobenius().max(1.0) {
        return Err(MatError::SolveSingular(residual));
    }
    Ok(x)
}
