//! Gaussian exponential-family algebra.
//!
//! A Gaussian is carried either in natural form `(r, Q)`, with density
//! proportional to `exp(-θᵗQθ/2 + rᵗθ)`, or in moment form `(μ, Σ)`.
//! Natural parameters add across sites, which is what makes the EP
//! bookkeeping a sequence of vector/matrix additions.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GaussError {
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("empty parameter (dimension 0)")]
    Empty,
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    let t = m.transpose();
    (m + t) * 0.5
}

fn check_shape(vec_len: usize, mat: &DMatrix<f64>) -> Result<(), GaussError> {
    if vec_len == 0 {
        return Err(GaussError::Empty);
    }
    if mat.nrows() != vec_len {
        return Err(GaussError::DimensionMismatch { expected: vec_len, got: mat.nrows() });
    }
    if mat.ncols() != vec_len {
        return Err(GaussError::DimensionMismatch { expected: vec_len, got: mat.ncols() });
    }
    Ok(())
}

/// Attempt a Cholesky factorization; `None` means not positive definite.
pub fn cholesky(m: &DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    if m.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Cholesky::new(m.clone())
}

/// Natural parameterization `(r, Q)`. `Q` may be indefinite (sites often are).
#[derive(Debug, Clone, PartialEq)]
pub struct NaturalParams {
    r: DVector<f64>,
    q: DMatrix<f64>,
}

impl NaturalParams {
    pub fn new(r: DVector<f64>, q: DMatrix<f64>) -> Result<Self, GaussError> {
        check_shape(r.len(), &q)?;
        Ok(Self { r, q: symmetrize(q) })
    }

    pub fn from_slices(r: &[f64], q_row_major: &[f64]) -> Result<Self, GaussError> {
        let p = r.len();
        if q_row_major.len() != p * p {
            return Err(GaussError::DimensionMismatch { expected: p * p, got: q_row_major.len() });
        }
        Self::new(DVector::from_column_slice(r), DMatrix::from_row_slice(p, p, q_row_major))
    }

    /// The flat (improper) site: all zeros.
    pub fn zeros(p: usize) -> Self {
        Self { r: DVector::zeros(p), q: DMatrix::zeros(p, p) }
    }

    pub fn dim(&self) -> usize {
        self.r.len()
    }

    pub fn r(&self) -> &DVector<f64> {
        &self.r
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn is_positive_definite(&self) -> bool {
        cholesky(&self.q).is_some()
    }

    pub fn add(&self, other: &NaturalParams) -> NaturalParams {
        assert_eq!(self.dim(), other.dim(), "natural parameter dimensions differ");
        NaturalParams { r: &self.r + &other.r, q: &self.q + &other.q }
    }

    pub fn sub(&self, other: &NaturalParams) -> NaturalParams {
        assert_eq!(self.dim(), other.dim(), "natural parameter dimensions differ");
        NaturalParams { r: &self.r - &other.r, q: &self.q - &other.q }
    }

    pub fn scale(&self, factor: f64) -> NaturalParams {
        NaturalParams { r: &self.r * factor, q: &self.q * factor }
    }

    /// Largest absolute entry over `r` and `Q`.
    pub fn max_abs(&self) -> f64 {
        self.r.iter().chain(self.q.iter()).fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn to_moments(&self) -> Result<MomentParams, GaussError> {
        to_moments(self)
    }
}

/// Moment parameterization `(μ, Σ)`; `Σ` is always symmetric positive definite.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentParams {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

impl MomentParams {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self, GaussError> {
        check_shape(mean.len(), &cov)?;
        let cov = symmetrize(cov);
        if cholesky(&cov).is_none() {
            return Err(GaussError::NotPositiveDefinite);
        }
        Ok(Self { mean, cov })
    }

    pub fn from_slices(mean: &[f64], cov_row_major: &[f64]) -> Result<Self, GaussError> {
        let p = mean.len();
        if cov_row_major.len() != p * p {
            return Err(GaussError::DimensionMismatch { expected: p * p, got: cov_row_major.len() });
        }
        Self::new(DVector::from_column_slice(mean), DMatrix::from_row_slice(p, p, cov_row_major))
    }

    pub fn standard(p: usize) -> Self {
        Self { mean: DVector::zeros(p), cov: DMatrix::identity(p, p) }
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

    /// Lower Cholesky factor `L` with `L Lᵗ = Σ`.
    pub fn cholesky_factor(&self) -> DMatrix<f64> {
        // Construction guarantees the factorization exists.
        cholesky(&self.cov).expect("covariance is positive definite").l()
    }

    /// Log density at `x`.
    pub fn log_density(&self, x: &DVector<f64>) -> f64 {
        let chol = cholesky(&self.cov).expect("covariance is positive definite");
        let diff = x - &self.mean;
        let sol = chol.l().solve_lower_triangular(&diff).expect("triangular solve");
        let log_det: f64 = chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
        let p = self.dim() as f64;
        -0.5 * (sol.norm_squared() + log_det + p * (2.0 * std::f64::consts::PI).ln())
    }

    pub fn to_natural(&self) -> Result<NaturalParams, GaussError> {
        to_natural(self)
    }
}

fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>, GaussError> {
    let chol = cholesky(m).ok_or(GaussError::NotPositiveDefinite)?;
    Ok(symmetrize(chol.inverse()))
}

/// `Σ = Q⁻¹`, `μ = Q⁻¹ r`.
pub fn to_moments(np: &NaturalParams) -> Result<MomentParams, GaussError> {
    let chol = cholesky(&np.q).ok_or(GaussError::NotPositiveDefinite)?;
    let mean = chol.solve(&np.r);
    let cov = symmetrize(chol.inverse());
    // Inverse of an SPD matrix can still fail numerically when Q is nearly singular.
    if cholesky(&cov).is_none() {
        return Err(GaussError::NotPositiveDefinite);
    }
    Ok(MomentParams { mean, cov })
}

/// `Q = Σ⁻¹`, `r = Σ⁻¹ μ`.
pub fn to_natural(mp: &MomentParams) -> Result<NaturalParams, GaussError> {
    let chol = cholesky(&mp.cov).ok_or(GaussError::NotPositiveDefinite)?;
    let r = chol.solve(&mp.mean);
    let q = spd_inverse(&mp.cov)?;
    Ok(NaturalParams { r, q })
}

/// Divide site `site` out of `global`. No definiteness check here.
pub fn cavity(global: &NaturalParams, site: &NaturalParams) -> Result<NaturalParams, GaussError> {
    if global.dim() != site.dim() {
        return Err(GaussError::DimensionMismatch { expected: global.dim(), got: site.dim() });
    }
    Ok(global.sub(site))
}

/// Closed-form `KL(p ‖ q)` between two Gaussians.
pub fn kl_gaussian(p: &MomentParams, q: &MomentParams) -> Result<f64, GaussError> {
    if p.dim() != q.dim() {
        return Err(GaussError::DimensionMismatch { expected: p.dim(), got: q.dim() });
    }
    let chol_q = cholesky(&q.cov).ok_or(GaussError::NotPositiveDefinite)?;
    let chol_p = cholesky(&p.cov).ok_or(GaussError::NotPositiveDefinite)?;
    let k = p.dim() as f64;
    let trace = chol_q.solve(&p.cov).trace();
    let diff = &q.mean - &p.mean;
    let maha = diff.dot(&chol_q.solve(&diff));
    let log_det = |c: &Cholesky<f64, Dyn>| c.l().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
    let kl = 0.5 * (trace + maha - k + log_det(&chol_q) - log_det(&chol_p));
    Ok(kl.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + b.abs())
    }

    #[test]
    fn to_moments_examples() {
        let m = NaturalParams::from_slices(&[0.0], &[1.0]).unwrap().to_moments().unwrap();
        assert_eq!(m.mean()[0], 0.0);
        assert_eq!(m.cov()[(0, 0)], 1.0);

        let m = NaturalParams::from_slices(&[2.0], &[2.0]).unwrap().to_moments().unwrap();
        assert!(close(m.mean()[0], 1.0, 1e-14));
        assert!(close(m.cov()[(0, 0)], 0.5, 1e-14));

        let np = NaturalParams::from_slices(&[1.0, 0.0], &[2.0, 1.0, 1.0, 2.0]).unwrap();
        let m = np.to_moments().unwrap();
        let expected_mean = [2.0 / 3.0, -1.0 / 3.0];
        let expected_cov = [2.0 / 3.0, -1.0 / 3.0, -1.0 / 3.0, 2.0 / 3.0];
        // dense LU solve as an independent route
        let lu = np.q().clone().lu();
        let lu_mean = lu.solve(np.r()).unwrap();
        let lu_inv = lu.try_inverse().unwrap();
        for i in 0..2 {
            assert!(close(m.mean()[i], expected_mean[i], 1e-14));
            assert!(close(m.mean()[i], lu_mean[i], 1e-14));
            for j in 0..2 {
                assert!(close(m.cov()[(i, j)], expected_cov[2 * i + j], 1e-14));
                assert!(close(m.cov()[(i, j)], lu_inv[(i, j)], 1e-14));
            }
        }
    }

    #[test]
    fn to_natural_examples() {
        let n = MomentParams::from_slices(&[0.0], &[1.0]).unwrap().to_natural().unwrap();
        assert_eq!((n.r()[0], n.q()[(0, 0)]), (0.0, 1.0));
        let n = MomentParams::from_slices(&[1.0], &[0.5]).unwrap().to_natural().unwrap();
        assert!(close(n.r()[0], 2.0, 1e-14) && close(n.q()[(0, 0)], 2.0, 1e-14));
        let n = MomentParams::from_slices(&[0.0, 0.0], &[2.0, 0.0, 0.0, 2.0]).unwrap().to_natural().unwrap();
        assert_eq!(n.r().as_slice(), &[0.0, 0.0]);
        assert!(close(n.q()[(0, 0)], 0.5, 1e-15) && n.q()[(0, 1)] == 0.0);
    }

    #[test]
    fn indefinite_precision_is_rejected() {
        let np = NaturalParams::from_slices(&[0.0, 0.0], &[1.0, 2.0, 2.0, 1.0]).unwrap();
        assert!(!np.is_positive_definite());
        assert_eq!(np.to_moments().unwrap_err(), GaussError::NotPositiveDefinite);
        assert_eq!(
            MomentParams::from_slices(&[0.0], &[-1.0]).unwrap_err(),
            GaussError::NotPositiveDefinite
        );
    }

    #[test]
    fn construction_symmetrizes() {
        let np = NaturalParams::from_slices(&[0.0, 0.0], &[2.0, 1.0, 0.5, 2.0]).unwrap();
        assert_eq!(np.q()[(0, 1)], 0.75);
        assert_eq!(np.q()[(1, 0)], 0.75);
    }

    #[test]
    fn shape_errors() {
        assert!(matches!(
            NaturalParams::from_slices(&[0.0, 1.0], &[1.0]),
            Err(GaussError::DimensionMismatch { .. })
        ));
        assert_eq!(NaturalParams::from_slices(&[], &[]).unwrap_err(), GaussError::Empty);
    }

    #[test]
    fn cavity_examples() {
        let g = NaturalParams::from_slices(&[1.0], &[3.0]).unwrap();
        let zero = NaturalParams::zeros(1);
        assert_eq!(cavity(&g, &zero).unwrap(), g);
        let s = NaturalParams::from_slices(&[1.0], &[1.0]).unwrap();
        let c = cavity(&g, &s).unwrap();
        assert_eq!((c.r()[0], c.q()[(0, 0)]), (0.0, 2.0));
        assert_eq!(c.add(&s), g);
        assert!(cavity(&g, &NaturalParams::zeros(2)).is_err());
    }

    #[test]
    fn kl_examples() {
        let std = MomentParams::from_slices(&[0.0], &[1.0]).unwrap();
        assert_eq!(kl_gaussian(&std, &std).unwrap(), 0.0);
        let shifted = MomentParams::from_slices(&[1.0], &[1.0]).unwrap();
        assert!(close(kl_gaussian(&shifted, &std).unwrap(), 0.5, 1e-14));
        let wide = MomentParams::from_slices(&[0.0], &[2.0]).unwrap();
        let expected = 0.5 * (2.0 - 1.0 - 2.0_f64.ln());
        assert!(close(kl_gaussian(&wide, &std).unwrap(), expected, 1e-14));
        assert!((expected - 0.15343).abs() < 1e-5);
    }

    #[test]
    fn log_density_standard_normal() {
        let std = MomentParams::standard(1);
        let v = std.log_density(&DVector::from_element(1, 1.0));
        assert!(close(v, -0.5 - 0.5 * (2.0 * std::f64::consts::PI).ln(), 1e-14));
    }
}
