//! Dense symmetric linear-algebra kernels.
//!
//! Every symmetric decomposition goes through [`sym_eigen`], which symmetrizes
//! its input first. Products of inverses drift away from exact symmetry at
//! round-off level and the eigen solver assumes a symmetric input.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative pivot threshold for [`cholesky`]: pivots must exceed
/// `CHOLESKY_REL_PIVOT * trace / q`.
pub const CHOLESKY_REL_PIVOT: f64 = 1e-12;

/// Eigendecomposition of a symmetric matrix with eigenvalues sorted in
/// descending order and matching eigenvector columns.
#[derive(Debug, Clone)]
pub struct EigenDecomp {
    pub values: DVector<f64>,
    pub vectors: DMatrix<f64>,
}

impl EigenDecomp {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Rebuilds `V f(Λ) Vᵀ` for a spectral function `f`.
    pub fn map_spectrum(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let q = self.dim();
        let mut scaled = self.vectors.clone();
        for j in 0..q {
            let s = f(self.values[j]);
            scaled.column_mut(j).scale_mut(s);
        }
        let out = scaled * self.vectors.transpose();
        symmetrize(&out)
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        self.map_spectrum(|l| l)
    }

    pub fn max_abs_eigenvalue(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
    }
}

/// Returns `(m + mᵀ) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    assert!(m.is_square(), "symmetrize needs a square matrix");
    let mut out = m.clone();
    let q = m.nrows();
    for i in 0..q {
        for j in (i + 1)..q {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            out[(i, j)] = avg;
            out[(j, i)] = avg;
        }
    }
    out
}

/// Largest absolute entry.
pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// True when `m` is square, finite, and symmetric to within `1e-12` relative.
pub fn is_symmetric(m: &DMatrix<f64>) -> bool {
    if !m.is_square() || m.iter().any(|v| !v.is_finite()) {
        return false;
    }
    let scale = max_abs(m).max(f64::MIN_POSITIVE);
    let q = m.nrows();
    (0..q).all(|i| ((i + 1)..q).all(|j| (m[(i, j)] - m[(j, i)]).abs() <= 1e-12 * scale))
}

/// Symmetric eigendecomposition, eigenvalues descending.
pub fn sym_eigen(m: &DMatrix<f64>) -> EigenDecomp {
    let q = m.nrows();
    if q == 0 {
        return EigenDecomp {
            values: DVector::zeros(0),
            vectors: DMatrix::zeros(0, 0),
        };
    }
    let eig = nalgebra::SymmetricEigen::new(symmetrize(m));
    let mut order: Vec<usize> = (0..q).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = DVector::from_iterator(q, order.iter().map(|&j| eig.eigenvalues[j]));
    let mut vectors = DMatrix::zeros(q, q);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    EigenDecomp { values, vectors }
}

/// Lower-triangular Cholesky factor `L` with `L Lᵀ = m`.
///
/// Fails with [`Error::NotPositiveDefinite`] when a pivot falls below
/// `1e-12 * trace(m) / q`.
pub fn cholesky(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    assert!(m.is_square(), "cholesky needs a square matrix");
    let q = m.nrows();
    let trace: f64 = (0..q).map(|i| m[(i, i)]).sum();
    let floor = if q == 0 {
        0.0
    } else {
        CHOLESKY_REL_PIVOT * trace.abs() / q as f64
    };
    let mut l = DMatrix::<f64>::zeros(q, q);
    for j in 0..q {
        let mut diag = 0.5 * (m[(j, j)] + m[(j, j)]);
        for k in 0..j {
            diag -= l[(j, k)] * l[(j, k)];
        }
        if !(diag > floor) || !diag.is_finite() {
            return Err(Error::NotPositiveDefinite { index: j, pivot: diag });
        }
        let d = diag.sqrt();
        l[(j, j)] = d;
        for i in (j + 1)..q {
            let mut s = 0.5 * (m[(i, j)] + m[(j, i)]);
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    Ok(l)
}

/// Solves `L x = b` in place for lower-triangular `L`.
pub fn forward_substitute(l: &DMatrix<f64>, b: &mut DMatrix<f64>) {
    let q = l.nrows();
    for c in 0..b.ncols() {
        for i in 0..q {
            let mut s = b[(i, c)];
            for k in 0..i {
                s -= l[(i, k)] * b[(k, c)];
            }
            b[(i, c)] = s / l[(i, i)];
        }
    }
}

/// Solves `Lᵀ x = b` in place for lower-triangular `L`.
pub fn backward_substitute_transpose(l: &DMatrix<f64>, b: &mut DMatrix<f64>) {
    let q = l.nrows();
    for c in 0..b.ncols() {
        for i in (0..q).rev() {
            let mut s = b[(i, c)];
            for k in (i + 1)..q {
                s -= l[(k, i)] * b[(k, c)];
            }
            b[(i, c)] = s / l[(i, i)];
        }
    }
}

/// Solves `m x = rhs` for symmetric positive-definite `m`.
pub fn solve_spd(m: &DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let l = cholesky(m)?;
    Ok(solve_with_cholesky(&l, rhs))
}

pub fn solve_spd_vec(m: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    let l = cholesky(m)?;
    let x = solve_with_cholesky(&l, &DMatrix::from_column_slice(rhs.len(), 1, rhs.as_slice()));
    Ok(DVector::from_column_slice(x.as_slice()))
}

pub fn solve_with_cholesky(l: &DMatrix<f64>, rhs: &DMatrix<f64>) -> DMatrix<f64> {
    let mut x = rhs.clone();
    forward_substitute(l, &mut x);
    backward_substitute_transpose(l, &mut x);
    x
}

/// Inverse of a symmetric positive-definite matrix via its Cholesky factor.
pub fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let l = cholesky(m)?;
    Ok(symmetrize(&solve_with_cholesky(
        &l,
        &DMatrix::identity(m.nrows(), m.nrows()),
    )))
}

/// Inverse of a lower-triangular matrix.
pub fn lower_triangular_inverse(l: &DMatrix<f64>) -> DMatrix<f64> {
    let mut inv = DMatrix::identity(l.nrows(), l.nrows());
    forward_substitute(l, &mut inv);
    inv
}

/// Default relative truncation for [`pseudo_inverse`]: `q * eps`.
pub fn default_pinv_tol(q: usize) -> f64 {
    q.max(1) as f64 * f64::EPSILON
}

/// Moore-Penrose inverse of a symmetric matrix.
///
/// Eigenvalues with `|λ| <= rel_tol * |λ_max|` are treated as zero. `rel_tol`
/// defaults to [`default_pinv_tol`].
pub fn pseudo_inverse(m: &DMatrix<f64>, rel_tol: Option<f64>) -> DMatrix<f64> {
    pseudo_inverse_eigen(&sym_eigen(m), rel_tol)
}

pub fn pseudo_inverse_eigen(eig: &EigenDecomp, rel_tol: Option<f64>) -> DMatrix<f64> {
    let q = eig.dim();
    let lmax = eig.max_abs_eigenvalue();
    if lmax == 0.0 {
        return DMatrix::zeros(q, q);
    }
    let cutoff = rel_tol.unwrap_or_else(|| default_pinv_tol(q)) * lmax;
    eig.map_spectrum(|l| if l.abs() <= cutoff { 0.0 } else { 1.0 / l })
}

/// Numerical rank under the same truncation rule as [`pseudo_inverse`].
pub fn numerical_rank(m: &DMatrix<f64>, rel_tol: Option<f64>) -> usize {
    let eig = sym_eigen(m);
    let lmax = eig.max_abs_eigenvalue();
    if lmax == 0.0 {
        return 0;
    }
    let cutoff = rel_tol.unwrap_or_else(|| default_pinv_tol(m.nrows())) * lmax;
    eig.values.iter().filter(|l| l.abs() > cutoff).count()
}

/// Symmetric positive-definite inverse square root `R` with `R m R = I`.
pub fn inv_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let q = m.nrows();
    let eig = sym_eigen(m);
    let trace: f64 = eig.values.iter().sum();
    let floor = CHOLESKY_REL_PIVOT * trace.abs() / q.max(1) as f64;
    if let Some((index, &pivot)) = eig
        .values
        .iter()
        .enumerate()
        .find(|(_, &l)| !(l > floor) || !l.is_finite())
    {
        return Err(Error::NotPositiveDefinite { index, pivot });
    }
    Ok(eig.map_spectrum(|l| 1.0 / l.sqrt()))
}

/// `log det` of a symmetric positive-definite matrix.
pub fn log_det_spd(m: &DMatrix<f64>) -> Result<f64> {
    let l = cholesky(m)?;
    Ok((0..l.nrows()).map(|i| 2.0 * l[(i, i)].ln()).sum())
}
