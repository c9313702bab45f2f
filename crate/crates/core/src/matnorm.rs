//! Dense linear-algebra kernel shared by every model fit: matrix-normal
//! log-densities, symmetric (inverse) square roots, whitening, and
//! Woodbury-structured inversions of `W G Wᵀ + σ²I`.
//!
//! All densities are computed in log space; raw densities underflow once
//! the total dimension reaches a few hundred.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

/// Relative eigenvalue floor below which a matrix is declared degenerate
/// rather than silently regularized.
pub const EIGENVALUE_FLOOR: f64 = 1e-10;

const SYMMETRY_RTOL: f64 = 1e-12;

/// A validated symmetric positive-definite matrix.
///
/// Construction symmetrizes the input (after checking the asymmetry is
/// within `1e-12` relative tolerance) and rejects matrices that are not
/// positive definite.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix {
    m: DMatrix<f64>,
}

impl SpdMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() || m.nrows() == 0 {
            return Err(Error::DimensionMismatch(format!(
                "SPD matrix must be square and nonempty, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        let scale = m.amax().max(1.0);
        let asym = (&m - m.transpose()).amax();
        if asym > SYMMETRY_RTOL * scale {
            return Err(Error::InvalidArgument(format!(
                "matrix is not symmetric: max asymmetry {asym:.3e} exceeds tolerance"
            )));
        }
        let sym = (&m + m.transpose()) * 0.5;
        if sym.clone().cholesky().is_none() {
            return Err(Error::DegenerateCovariance(
                "matrix is not positive definite".into(),
            ));
        }
        Ok(Self { m: sym })
    }

    /// Construct without validation. Caller guarantees symmetry and
    /// positive definiteness (used for products of validated factors).
    pub(crate) fn new_unchecked(m: DMatrix<f64>) -> Self {
        Self { m }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            m: DMatrix::identity(dim, dim),
        }
    }

    pub fn from_diagonal(diag: &[f64]) -> Result<Self> {
        if diag.iter().any(|&d| d <= 0.0) {
            return Err(Error::DegenerateCovariance(
                "diagonal entries must be positive".into(),
            ));
        }
        Ok(Self {
            m: DMatrix::from_diagonal(&DVector::from_row_slice(diag)),
        })
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.m
    }

    fn cholesky(&self) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
        self.m
            .clone()
            .cholesky()
            .ok_or_else(|| Error::DegenerateCovariance("Cholesky factorization failed".into()))
    }

    /// Log-determinant via Cholesky.
    pub fn log_det(&self) -> Result<f64> {
        let chol = self.cholesky()?;
        Ok(2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>())
    }

    pub fn inverse(&self) -> Result<DMatrix<f64>> {
        Ok(self.cholesky()?.inverse())
    }

    /// Solve `self * X = rhs`.
    pub fn solve(&self, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.cholesky()?.solve(rhs))
    }

    /// Symmetric square root from the eigendecomposition.
    pub fn sqrt(&self) -> Result<SpdMatrix> {
        self.eigen_power(0.5)
    }

    /// Symmetric inverse square root `R` with `R * self * R = I`.
    ///
    /// Eigendecomposition rather than Cholesky so the result is symmetric;
    /// an eigenvalue below the relative floor is reported as degenerate.
    pub fn inv_sqrt(&self) -> Result<SpdMatrix> {
        self.eigen_power(-0.5)
    }

    fn eigen_power(&self, exponent: f64) -> Result<SpdMatrix> {
        let eig = nalgebra::SymmetricEigen::new(self.m.clone());
        let max_ev = eig.eigenvalues.iter().cloned().fold(f64::MIN, f64::max);
        let floor = EIGENVALUE_FLOOR * max_ev.max(0.0);
        if eig.eigenvalues.iter().any(|&e| e <= floor) {
            return Err(Error::DegenerateCovariance(format!(
                "eigenvalue below relative floor {EIGENVALUE_FLOOR:.0e}"
            )));
        }
        let powered = DVector::from_iterator(
            eig.eigenvalues.len(),
            eig.eigenvalues.iter().map(|e| e.powf(exponent)),
        );
        let r = &eig.eigenvectors * DMatrix::from_diagonal(&powered) * eig.eigenvectors.transpose();
        // Symmetrize away rounding from the triple product.
        Ok(SpdMatrix::new_unchecked((&r + r.transpose()) * 0.5))
    }
}

/// Parameters of a matrix-normal distribution `MN(mean, row_cov, col_cov)`,
/// equivalent to a vec-normal with covariance `col_cov ⊗ row_cov`.
#[derive(Debug, Clone)]
pub struct MatNormParams {
    pub mean: DMatrix<f64>,
    pub row_cov: SpdMatrix,
    pub col_cov: SpdMatrix,
}

impl MatNormParams {
    pub fn new(mean: DMatrix<f64>, row_cov: SpdMatrix, col_cov: SpdMatrix) -> Result<Self> {
        if mean.nrows() != row_cov.dim() || mean.ncols() != col_cov.dim() {
            return Err(Error::DimensionMismatch(format!(
                "mean is {}x{} but row_cov dim is {} and col_cov dim is {}",
                mean.nrows(),
                mean.ncols(),
                row_cov.dim(),
                col_cov.dim()
            )));
        }
        Ok(Self {
            mean,
            row_cov,
            col_cov,
        })
    }
}

const LN_2PI: f64 = 1.837877066409345483560659472811;

/// Matrix-normal log-density of an `n x H` observation.
pub fn matnorm_logpdf(y: &DMatrix<f64>, p: &MatNormParams) -> Result<f64> {
    if y.shape() != p.mean.shape() {
        return Err(Error::DimensionMismatch(format!(
            "observation is {}x{} but mean is {}x{}",
            y.nrows(),
            y.ncols(),
            p.mean.nrows(),
            p.mean.ncols()
        )));
    }
    let n = y.nrows() as f64;
    let h = y.ncols() as f64;
    let dev = y - &p.mean;
    // tr(C^{-1} Dᵀ R^{-1} D)
    let row_solved = p.row_cov.solve(&dev)?;
    let col_solved = p.col_cov.solve(&dev.transpose())?;
    let quad = (col_solved * row_solved).trace();
    Ok(-0.5 * (n * h * LN_2PI + h * p.row_cov.log_det()? + n * p.col_cov.log_det()? + quad))
}

/// Symmetric inverse square root (free-function form of [`SpdMatrix::inv_sqrt`]).
pub fn inv_sqrt_spd(m: &SpdMatrix) -> Result<SpdMatrix> {
    m.inv_sqrt()
}

/// Post-multiply the data by `omega^{-1/2}` so its columns decorrelate.
pub fn whiten(y: &DMatrix<f64>, omega: &SpdMatrix) -> Result<DMatrix<f64>> {
    if y.ncols() != omega.dim() {
        return Err(Error::DimensionMismatch(format!(
            "data has {} columns but omega dim is {}",
            y.ncols(),
            omega.dim()
        )));
    }
    Ok(y * omega.inv_sqrt()?.as_matrix())
}

/// Precomputed Woodbury factorization of `V = W G Wᵀ + σ²I` (N x N) that
/// solves, inverts, and takes log-determinants through the q x q
/// capacitance matrix `G^{-1} + σ^{-2} WᵀW` without materializing V.
pub struct Woodbury {
    w: DMatrix<f64>,
    sigma2: f64,
    capacitance: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    log_det: f64,
}

impl Woodbury {
    pub fn new(w: &DMatrix<f64>, g: &SpdMatrix, sigma2: f64) -> Result<Self> {
        if sigma2 <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "sigma2 must be positive, got {sigma2}"
            )));
        }
        if w.ncols() != g.dim() {
            return Err(Error::DimensionMismatch(format!(
                "W has {} columns but G dim is {}",
                w.ncols(),
                g.dim()
            )));
        }
        let n = w.nrows() as f64;
        let cap = g.inverse()? + w.transpose() * w / sigma2;
        let capacitance = cap
            .cholesky()
            .ok_or_else(|| Error::DegenerateCovariance("capacitance matrix not SPD".into()))?;
        let cap_log_det = 2.0 * capacitance.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let log_det = cap_log_det + g.log_det()? + n * sigma2.ln();
        Ok(Self {
            w: w.clone(),
            sigma2,
            capacitance,
            log_det,
        })
    }

    pub fn nrows(&self) -> usize {
        self.w.nrows()
    }

    /// `log det(W G Wᵀ + σ²I)` via the matrix determinant lemma.
    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// Solve `V X = rhs` without forming V.
    pub fn solve(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        let wt_rhs = self.w.transpose() * rhs;
        let inner = self.capacitance.solve(&wt_rhs);
        (rhs - &self.w * inner / self.sigma2) / self.sigma2
    }

    /// `xᵀ V^{-1} x` without forming V or its inverse.
    pub fn quad_form(&self, x: &DVector<f64>) -> f64 {
        let rhs = DMatrix::from_column_slice(x.len(), 1, x.as_slice());
        let solved = self.solve(&rhs);
        x.dot(&solved.column(0).into_owned())
    }

    /// Materialize the N x N inverse. Intended for small N; hot paths use
    /// [`Woodbury::solve`] instead.
    pub fn inverse(&self) -> DMatrix<f64> {
        let n = self.w.nrows();
        self.solve(&DMatrix::identity(n, n))
    }
}

/// Explicit `(W G Wᵀ + σ²I)^{-1}` (materialized; small N only).
pub fn woodbury_inverse(w: &DMatrix<f64>, g: &SpdMatrix, sigma2: f64) -> Result<DMatrix<f64>> {
    Ok(Woodbury::new(w, g, sigma2)?.inverse())
}

/// `log det(W G Wᵀ + σ²I)` via the determinant lemma.
pub fn woodbury_logdet(w: &DMatrix<f64>, g: &SpdMatrix, sigma2: f64) -> Result<f64> {
    Ok(Woodbury::new(w, g, sigma2)?.log_det())
}

/// `xᵀ (W G Wᵀ + σ²I)^{-1} x` in quadratic-form-only mode.
pub fn woodbury_quad_form(
    w: &DMatrix<f64>,
    g: &SpdMatrix,
    sigma2: f64,
    x: &DVector<f64>,
) -> Result<f64> {
    Ok(Woodbury::new(w, g, sigma2)?.quad_form(x))
}
