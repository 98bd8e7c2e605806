use nalgebra::DMatrix;

use crate::error::{invalid, Error, Result};
use crate::linalg::{lyapunov_continuous, symmetrize};
use crate::models::LinearTwoScaleParams;

const NEWTON_TOL: f64 = 1e-12;
const NEWTON_MAX: usize = 100;

/// Steady posterior covariance of the full two-dimensional filter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SteadyCovariance2x2 {
    pub s11: f64,
    pub s12: f64,
    pub s22: f64,
    /// Frobenius norm of the Riccati residual at the returned solution.
    pub residual: f64,
}

fn care_residual(
    a: &DMatrix<f64>,
    q: &DMatrix<f64>,
    g: &DMatrix<f64>,
    s: &DMatrix<f64>,
) -> DMatrix<f64> {
    a * s + s * a.transpose() - s * g * s + q
}

/// Solves `A S + S Aᵀ − S Hᵀ R⁻¹ H S + Q = 0` for the stabilizing SPD root.
///
/// The Riccati flow from `S = 0` is integrated until the residual has dropped by three
/// orders of magnitude, then Newton–Kleinman iterations finish the solve.
pub fn solve_care(
    a: &DMatrix<f64>,
    q: &DMatrix<f64>,
    h: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let r_inv = r
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::InvalidParameter("observation covariance is singular".into()))?;
    let g = h.transpose() * r_inv * h;
    let scale = a.amax().max(g.amax()).max(1.0);

    let mut s = DMatrix::<f64>::zeros(n, n);
    let r0 = care_residual(a, q, &g, &s).norm();
    if r0 == 0.0 {
        return Ok(s);
    }
    let dt = 0.1 / scale;
    let f = |s: &DMatrix<f64>| care_residual(a, q, &g, s);
    for _ in 0..20_000 {
        let k1 = f(&s);
        if k1.norm() < 1e-3 * r0 {
            break;
        }
        let k2 = f(&(&s + &k1 * (0.5 * dt)));
        let k3 = f(&(&s + &k2 * (0.5 * dt)));
        let k4 = f(&(&s + &k3 * dt));
        s += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
        s = symmetrize(&s);
    }

    let mut last_res = f64::INFINITY;
    for _ in 0..NEWTON_MAX {
        let closed = a - &s * &g;
        let rhs = q + &s * &g * &s;
        let next = lyapunov_continuous(&closed, &rhs)?;
        let step = (&next - &s).norm();
        s = next;
        last_res = f(&s).norm();
        if step <= NEWTON_TOL * (1.0 + s.norm()) {
            return Ok(s);
        }
    }
    Err(Error::NotConverged { iterations: NEWTON_MAX, residual: last_res })
}

/// Steady covariance of the two-dimensional Kalman–Bucy filter observing the slow variable.
pub fn solve_riccati_full(p: &LinearTwoScaleParams) -> Result<SteadyCovariance2x2> {
    p.validate()?;
    let a = p.drift();
    let q = p.noise();
    let h = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
    let r = DMatrix::from_element(1, 1, p.r_obs);
    let s = solve_care(&a, &q, &h, &r)?;
    let g = h.transpose() * &h / p.r_obs;
    let residual = care_residual(&a, &q, &g, &s).norm();
    if s[(0, 0)] < 0.0 || s.determinant() < 0.0 {
        return invalid("riccati solution is not positive definite");
    }
    Ok(SteadyCovariance2x2 { s11: s[(0, 0)], s12: s[(0, 1)], s22: s[(1, 1)], residual })
}

/// Steady prior covariance of the discrete filter `P = Φ(P − PHᵀ(HPHᵀ + R)⁻¹HP)Φᵀ + W`,
/// by fixed-point iteration from `init`.
pub fn solve_dare(
    phi: &DMatrix<f64>,
    w: &DMatrix<f64>,
    h: &DMatrix<f64>,
    r: &DMatrix<f64>,
    init: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let mut p = init.clone();
    let max_iter = 100_000;
    for _ in 0..max_iter {
        let s = h * &p * h.transpose() + r;
        let s_inv = s
            .try_inverse()
            .ok_or_else(|| Error::Numerical("innovation covariance is singular".into()))?;
        let post = &p - &p * h.transpose() * s_inv * h * &p;
        let next = symmetrize(&(phi * post * phi.transpose() + w));
        let step = (&next - &p).norm();
        p = next;
        if step <= 1e-15 * (1.0 + p.norm()) {
            return Ok(p);
        }
    }
    Err(Error::NotConverged { iterations: max_iter, residual: f64::NAN })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decoupled_closed_form() {
        let mut p = LinearTwoScaleParams::figure1(0.1);
        p.a12 = 0.0;
        p.a21 = 0.0;
        p.r_obs = 1.0;
        let s = solve_riccati_full(&p).unwrap();
        assert!((s.s11 - (3f64.sqrt() - 1.0)).abs() < 1e-12);
        assert!(s.s12.abs() < 1e-12);
        assert!(s.residual < 1e-10);
    }

    #[test]
    fn stiff_case_converges() {
        let p = LinearTwoScaleParams::figure1(1.0 / 256.0);
        let s = solve_riccati_full(&p).unwrap();
        assert!(s.residual < 1e-10, "residual {}", s.residual);
    }

    #[test]
    fn scalar_dare_fixed_point() {
        let phi = DMatrix::from_element(1, 1, 0.9);
        let w = DMatrix::from_element(1, 1, 1.0);
        let h = DMatrix::from_element(1, 1, 1.0);
        let r = DMatrix::from_element(1, 1, 1.0);
        let p = solve_dare(&phi, &w, &h, &r, &w).unwrap()[(0, 0)];
        // P = 0.81 P/(P+1) + 1  ⇔  P² − 0.81P − 1 = 0.
        let exact = (0.81 + (0.81f64 * 0.81 + 4.0).sqrt()) / 2.0;
        assert!((p - exact).abs() < 1e-12);
    }
}
