//! Small dense helpers shared by the filters: Lyapunov solves, symmetric square roots,
//! PSD projection and a relatively truncated pseudo-inverse.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

/// Column-major vectorization.
pub fn vec_of(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

pub fn unvec(v: &DVector<f64>, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(rows, cols, v.as_slice())
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Largest real part of the eigenvalues.
pub fn spectral_abscissa(a: &DMatrix<f64>) -> f64 {
    a.complex_eigenvalues()
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max)
}

pub fn is_hurwitz(a: &DMatrix<f64>) -> bool {
    spectral_abscissa(a) < 0.0
}

/// Solves `A C + C Aᵀ + Q = 0` through the Kronecker form. Intended for n ≤ 10.
pub fn lyapunov_continuous(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n || q.shape() != (n, n) {
        return Err(Error::InvalidParameter("lyapunov: shape mismatch".into()));
    }
    let eye = DMatrix::<f64>::identity(n, n);
    let op = kron(&eye, a) + kron(a, &eye);
    let rhs = -vec_of(q);
    let sol = op
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Numerical("lyapunov operator is singular".into()))?;
    Ok(symmetrize(&unvec(&sol, n, n)))
}

/// Solves `C = Φ C Φᵀ + W`.
pub fn lyapunov_discrete(phi: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = phi.nrows();
    if phi.ncols() != n || w.shape() != (n, n) {
        return Err(Error::InvalidParameter("discrete lyapunov: shape mismatch".into()));
    }
    let op = DMatrix::<f64>::identity(n * n, n * n) - kron(phi, phi);
    let sol = op
        .lu()
        .solve(&vec_of(w))
        .ok_or_else(|| Error::Numerical("discrete lyapunov operator is singular".into()))?;
    Ok(symmetrize(&unvec(&sol, n, n)))
}

/// Projection of the symmetric part onto the PSD cone (negative eigenvalues set to zero).
pub fn psd_project(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = symmetrize(m).symmetric_eigen();
    let clipped = eig.eigenvalues.map(|l| l.max(0.0));
    symmetrize(&(&eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose()))
}

/// Symmetric square root of the PSD projection of `m`.
pub fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = symmetrize(m).symmetric_eigen();
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    symmetrize(&(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()))
}

pub fn min_sym_eigenvalue(m: &DMatrix<f64>) -> f64 {
    symmetrize(m)
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Rejects non-finite, asymmetric or indefinite covariances. Zero eigenvalues are allowed.
pub fn check_psd(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if !m.is_square() || m.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter(format!("{what}: not a finite square matrix")));
    }
    let scale = m.amax().max(1.0);
    if (m - m.transpose()).amax() > 1e-10 * scale {
        return Err(Error::InvalidParameter(format!("{what}: not symmetric")));
    }
    if min_sym_eigenvalue(m) < -1e-12 * scale {
        return Err(Error::InvalidParameter(format!("{what}: not positive semidefinite")));
    }
    Ok(())
}

/// Pseudo-inverse with singular values below `rtol · σ_max` discarded.
pub fn pinv(m: &DMatrix<f64>, rtol: f64) -> Result<DMatrix<f64>> {
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.iter().copied().fold(0.0, f64::max);
    if smax == 0.0 || !smax.is_finite() {
        return Err(Error::RankDeficient("pseudo-inverse of a zero or non-finite matrix".into()));
    }
    let cut = rtol * smax;
    let u = svd.u.as_ref().expect("requested u");
    let vt = svd.v_t.as_ref().expect("requested v_t");
    let inv_s = svd.singular_values.map(|s| if s > cut { 1.0 / s } else { 0.0 });
    Ok(vt.transpose() * DMatrix::from_diagonal(&inv_s) * u.transpose())
}

pub fn rank(m: &DMatrix<f64>, rtol: f64) -> usize {
    let s = m.singular_values();
    let smax = s.iter().copied().fold(0.0, f64::max);
    if smax == 0.0 {
        return 0;
    }
    s.iter().filter(|&&v| v > rtol * smax).count()
}

/// Cholesky factor when SPD, else the symmetric square root (PSD fallback).
pub fn noise_factor(m: &DMatrix<f64>) -> DMatrix<f64> {
    match m.clone().cholesky() {
        Some(c) => c.l(),
        None => sym_sqrt(m),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lyapunov_scalar() {
        let a = DMatrix::from_element(1, 1, -2.0);
        let q = DMatrix::from_element(1, 1, 3.0);
        let c = lyapunov_continuous(&a, &q).unwrap();
        assert!((c[(0, 0)] - 0.75).abs() < 1e-14);
    }

    #[test]
    fn discrete_lyapunov_scalar() {
        let phi = DMatrix::from_element(1, 1, 0.5);
        let w = DMatrix::from_element(1, 1, 3.0);
        let c = lyapunov_discrete(&phi, &w).unwrap();
        assert!((c[(0, 0)] - 4.0).abs() < 1e-13);
    }

    #[test]
    fn pinv_drops_small_directions() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1e-12]);
        let p = pinv(&m, 1e-8).unwrap();
        assert_eq!(p[(1, 1)], 0.0);
        assert!((p[(0, 0)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn psd_projection_is_idempotent() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let p = psd_project(&m);
        let pp = psd_project(&p);
        assert!((&p - &pp).amax() < 1e-12);
        assert!(min_sym_eigenvalue(&p) > -1e-12);
    }

    #[test]
    fn sqrt_squares_back() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let s = sym_sqrt(&m);
        assert!((&s * &s - &m).amax() < 1e-12);
    }
}
