//! Mean/covariance pairs and covariance-matrix repair.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative tolerance for the symmetry check on incoming covariances.
pub const SYMMETRY_TOLERANCE: f64 = 1e-9;

/// First two moments of a random vector at one layer interface.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMoments {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

impl GaussianMoments {
    /// Checks shape, symmetry (to [`SYMMETRY_TOLERANCE`] relative to the
    /// largest entry) and a nonnegative diagonal.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let n = mean.len();
        if cov.nrows() != n || cov.ncols() != n {
            return Err(Error::dims("covariance shape", n, cov.nrows().max(cov.ncols())));
        }
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(Error::domain("moments contain non-finite values"));
        }
        let asymmetry = relative_asymmetry(&cov);
        if asymmetry > SYMMETRY_TOLERANCE {
            return Err(Error::NotSymmetric { asymmetry });
        }
        let scale = cov.amax();
        if let Some(i) = (0..n).find(|&i| cov[(i, i)] < -1e-12 * scale) {
            return Err(Error::domain(format!("negative variance {} at index {i}", cov[(i, i)])));
        }
        Ok(Self { mean, cov })
    }

    /// Builds moments without validation; callers guarantee the invariants.
    pub(crate) fn from_parts(mean: DVector<f64>, cov: DMatrix<f64>) -> Self {
        Self { mean, cov }
    }

    pub fn from_diagonal(mean: DVector<f64>, variances: &[f64]) -> Result<Self> {
        let cov = DMatrix::from_diagonal(&DVector::from_column_slice(variances));
        Self::new(mean, cov)
    }

    /// Standard normal vector of dimension `n`.
    pub fn standard(n: usize) -> Self {
        Self::from_parts(DVector::zeros(n), DMatrix::identity(n, n))
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn variances(&self) -> DVector<f64> {
        self.cov.diagonal()
    }

    pub fn into_parts(self) -> (DVector<f64>, DMatrix<f64>) {
        (self.mean, self.cov)
    }

    /// Multiplies the covariance by `factor`, leaving the mean alone.
    pub fn scale_cov(&self, factor: f64) -> Self {
        Self::from_parts(self.mean.clone(), &self.cov * factor)
    }
}

/// Largest |Σᵢⱼ − Σⱼᵢ| relative to the largest |Σᵢⱼ|.
pub fn relative_asymmetry(cov: &DMatrix<f64>) -> f64 {
    let n = cov.nrows();
    let scale = cov.amax();
    if scale == 0.0 {
        return 0.0;
    }
    let mut worst: f64 = 0.0;
    for j in 0..n {
        for i in (j + 1)..n {
            worst = worst.max((cov[(i, j)] - cov[(j, i)]).abs());
        }
    }
    worst / scale
}

/// Replaces `m` with `(m + mᵀ)/2` in place.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PsdPolicy {
    None,
    #[default]
    Symmetrize,
    ClipEigenvalues,
}

impl std::str::FromStr for PsdPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(PsdPolicy::None),
            "symmetrize" => Ok(PsdPolicy::Symmetrize),
            "clip" | "clip_eigenvalues" => Ok(PsdPolicy::ClipEigenvalues),
            other => Err(Error::domain(format!("unknown psd policy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PsdRepair {
    pub matrix: DMatrix<f64>,
    /// Frobenius norm of the change made to the input.
    pub adjustment: f64,
    pub clipped_eigenvalues: usize,
    pub min_eigenvalue: Option<f64>,
}

pub fn psd_repair(cov: &DMatrix<f64>, policy: PsdPolicy) -> PsdRepair {
    let mut matrix = cov.clone();
    if policy == PsdPolicy::None {
        return PsdRepair {
            matrix,
            adjustment: 0.0,
            clipped_eigenvalues: 0,
            min_eigenvalue: None,
        };
    }
    symmetrize(&mut matrix);
    let mut clipped = 0;
    let mut min_eigenvalue = None;
    if policy == PsdPolicy::ClipEigenvalues && matrix.nrows() > 0 {
        let eig = SymmetricEigen::new(matrix.clone());
        let min = eig.eigenvalues.min();
        min_eigenvalue = Some(min);
        if min < 0.0 {
            let mut values = eig.eigenvalues.clone();
            for v in values.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                    clipped += 1;
                }
            }
            matrix = &eig.eigenvectors * DMatrix::from_diagonal(&values) * eig.eigenvectors.transpose();
            symmetrize(&mut matrix);
        }
    }
    let adjustment = (&matrix - cov).norm();
    PsdRepair {
        matrix,
        adjustment,
        clipped_eigenvalues: clipped,
        min_eigenvalue,
    }
}

pub fn min_eigenvalue(cov: &DMatrix<f64>) -> f64 {
    if cov.nrows() == 0 {
        return 0.0;
    }
    SymmetricEigen::new(cov.clone()).eigenvalues.min()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_asymmetric_and_negative_diagonal() {
        let mean = DVector::zeros(2);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0]);
        assert!(matches!(
            GaussianMoments::new(mean.clone(), bad),
            Err(Error::NotSymmetric { .. })
        ));
        let neg = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(GaussianMoments::new(mean.clone(), neg).is_err());
        let wrong = DMatrix::identity(3, 3);
        assert!(GaussianMoments::new(mean, wrong).is_err());
    }

    #[test]
    fn psd_input_is_unchanged() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let r = psd_repair(&a, PsdPolicy::ClipEigenvalues);
        assert_eq!(r.matrix, a);
        assert_eq!(r.adjustment, 0.0);
        assert_eq!(r.clipped_eigenvalues, 0);
    }

    #[test]
    fn tiny_negative_eigenvalue_is_clipped() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1e-12]);
        let r = psd_repair(&a, PsdPolicy::ClipEigenvalues);
        assert_eq!(r.clipped_eigenvalues, 1);
        assert!((r.matrix[(0, 0)] - 1.0).abs() < 1e-15);
        assert!(r.matrix[(1, 1)].abs() < 1e-15);
        assert!(r.matrix[(0, 1)].abs() < 1e-15);
    }

    #[test]
    fn indefinite_matrix_projects_to_rank_one() {
        // Eigenpairs (2.1, [1,1]/√2) and (−0.1, [1,−1]/√2); clipping keeps
        // 2.1·vvᵀ = 1.05·ones and moves the matrix by 0.1 in Frobenius norm.
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.1, 1.1, 1.0]);
        let r = psd_repair(&a, PsdPolicy::ClipEigenvalues);
        for v in r.matrix.iter() {
            assert!((v - 1.05).abs() < 1e-12);
        }
        assert!((r.adjustment - 0.1).abs() < 1e-12);
        let eig = SymmetricEigen::new(r.matrix.clone());
        let mut ev: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        assert!(ev[0].abs() < 1e-12 && (ev[1] - 2.1).abs() < 1e-12);
    }

    #[test]
    fn symmetrize_policy_averages() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.4, 1.0]);
        let r = psd_repair(&a, PsdPolicy::Symmetrize);
        assert!((r.matrix[(0, 1)] - 0.3).abs() < 1e-15);
        assert!((r.matrix[(1, 0)] - 0.3).abs() < 1e-15);
        let none = psd_repair(&a, PsdPolicy::None);
        assert_eq!(none.matrix, a);
    }
}
