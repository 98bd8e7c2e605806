//! Steady-state filtering theory for the linear two-scale model and its one-dimensional
//! reductions.

mod filter;
mod pathwise;
mod riccati;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

pub use filter::{
    run_linear_filter, steady_state_comparison, GaussianBelief, LinearFilterRun,
    LinearFilterVariant, SteadyComparison,
};
pub use pathwise::{
    log_log_slope, pathwise_convergence_study, PathwiseReduced, PathwiseStudy, SlopeFit,
};
pub use riccati::{solve_care, solve_dare, solve_riccati_full, SteadyCovariance2x2};

use crate::error::{invalid, Error, Result};
use crate::linalg::lyapunov_continuous;
use crate::models::LinearTwoScaleParams;

/// Reduced OU model `dX = a X dt + σ_X dW`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReducedOUParams {
    pub a: f64,
    pub sigma_x_sq: f64,
}

impl ReducedOUParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.a < 0.0) || !(self.sigma_x_sq > 0.0) || !self.sigma_x_sq.is_finite() {
            return invalid(format!(
                "reduced OU needs a < 0 and sigma_x_sq > 0, got a = {}, sigma_x_sq = {}",
                self.a, self.sigma_x_sq
            ));
        }
        Ok(())
    }

    pub fn equilibrium_variance(&self) -> f64 {
        -self.sigma_x_sq / (2.0 * self.a)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DerivedCoefficients {
    pub a_tilde: f64,
    pub a_hat: f64,
}

/// `ã = a11 − a12 a21 / a22`, `â = a12 a21 / a22²`.
pub fn derived_coefficients(p: &LinearTwoScaleParams) -> Result<DerivedCoefficients> {
    if p.a22 == 0.0 {
        return invalid("a22 must be nonzero");
    }
    Ok(DerivedCoefficients {
        a_tilde: p.a11 - p.a12 * p.a21 / p.a22,
        a_hat: p.a12 * p.a21 / (p.a22 * p.a22),
    })
}

/// Drift `ã(1 − εâ)` and noise `σx²(1 − 2εâ) + εσy² a12²/a22²` of the corrected slow equation.
fn corrected_coefficients(p: &LinearTwoScaleParams) -> Result<(f64, f64)> {
    let d = derived_coefficients(p)?;
    let drift = d.a_tilde * (1.0 - p.eps * d.a_hat);
    let noise = p.sigma_x.powi(2) * (1.0 - 2.0 * p.eps * d.a_hat)
        + p.eps * p.sigma_y.powi(2) * p.a12.powi(2) / p.a22.powi(2);
    Ok((drift, noise))
}

/// Positive root of `−s²/R + 2as + σ² = 0`, written to avoid cancellation for `a < 0`.
fn positive_riccati_root(a: f64, sigma_sq: f64, r: f64) -> f64 {
    let root = (a * a + sigma_sq / r).sqrt();
    if a <= 0.0 {
        if sigma_sq == 0.0 {
            0.0
        } else {
            sigma_sq / (root - a)
        }
    } else {
        r * (a + root)
    }
}

/// Expanded first diagonal entry of the full steady covariance.
pub fn s11_expanded(p: &LinearTwoScaleParams) -> Result<f64> {
    let (drift, noise) = corrected_coefficients(p)?;
    let d = derived_coefficients(p)?;
    if !(d.a_tilde < 0.0) {
        return invalid("s11 expansion requires a_tilde < 0");
    }
    let disc = drift * drift + noise / p.r_obs;
    if !(disc >= 0.0) {
        return Err(Error::Numerical(format!("negative discriminant {disc}")));
    }
    Ok(positive_riccati_root(drift, noise, p.r_obs))
}

/// Noise level placing `(a, σ_X²)` on the manifold of reduced filters that reproduce ŝ11.
pub fn manifold_sigma_sq(p: &LinearTwoScaleParams, a: f64) -> Result<f64> {
    let (drift, noise) = corrected_coefficients(p)?;
    let s = s11_expanded(p)?;
    let v = -2.0 * (a - drift) * s + noise;
    if !(v > 0.0) {
        return invalid(format!("drift {a} lies off the admissible manifold (sigma_x_sq = {v})"));
    }
    Ok(v)
}

/// Steady covariance `s̃ = R(a + √(a² + σ_X²/R))` of the scalar Kalman–Bucy filter.
pub fn solve_riccati_reduced(a: f64, sigma_x_sq: f64, r_obs: f64) -> Result<f64> {
    if !(r_obs > 0.0) {
        return invalid("R must be positive");
    }
    if !(a < 0.0 || sigma_x_sq > 0.0) || sigma_x_sq < 0.0 {
        return invalid("reduced riccati needs a < 0 or sigma_x_sq > 0, and sigma_x_sq >= 0");
    }
    Ok(positive_riccati_root(a, sigma_x_sq, r_obs))
}

/// The unique reduced parameters consistent and optimal to second order in ε.
pub fn optimal_reduced_params(p: &LinearTwoScaleParams) -> Result<ReducedOUParams> {
    let (a, sigma_x_sq) = corrected_coefficients(p)?;
    if !(a < 0.0) {
        return invalid(format!("corrected drift {a} is not negative; eps too large"));
    }
    Ok(ReducedOUParams { a, sigma_x_sq })
}

/// Plain averaging: `a = ã`, `σ_X² = σx²`.
pub fn averaged_params(p: &LinearTwoScaleParams) -> Result<ReducedOUParams> {
    let d = derived_coefficients(p)?;
    Ok(ReducedOUParams { a: d.a_tilde, sigma_x_sq: p.sigma_x.powi(2) })
}

/// Averaging with first-order additive noise: `σ_X² = σx² + εσy² a12²/a22²`.
pub fn additive_params(p: &LinearTwoScaleParams) -> Result<ReducedOUParams> {
    let d = derived_coefficients(p)?;
    Ok(ReducedOUParams {
        a: d.a_tilde,
        sigma_x_sq: p.sigma_x.powi(2) + p.eps * p.sigma_y.powi(2) * p.a12.powi(2) / p.a22.powi(2),
    })
}

/// Moment matching of an OU process: `a = −1/T_c`, `σ_X² = 2 Var / T_c`.
pub fn msm_fit(variance: f64, corr_time: f64) -> Result<ReducedOUParams> {
    if !(variance > 0.0) || !(corr_time > 0.0) {
        return invalid("msm fit needs positive variance and correlation time");
    }
    Ok(ReducedOUParams { a: -1.0 / corr_time, sigma_x_sq: 2.0 * variance / corr_time })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EquilibriumMode {
    Exact,
    Expanded,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EquilibriumStats {
    pub c11: f64,
    pub corr_time: f64,
}

/// Equilibrium variance and correlation time of the slow variable.
pub fn equilibrium_stats_linear(
    p: &LinearTwoScaleParams,
    mode: EquilibriumMode,
) -> Result<EquilibriumStats> {
    match mode {
        EquilibriumMode::Exact => {
            p.validate()?;
            let a = p.drift();
            let c = lyapunov_continuous(&a, &p.noise())?;
            let a_inv_t = a
                .transpose()
                .try_inverse()
                .ok_or_else(|| Error::InvalidParameter("drift matrix is singular".into()))?;
            let t = -(&c * a_inv_t);
            Ok(EquilibriumStats { c11: c[(0, 0)], corr_time: t[(0, 0)] / c[(0, 0)] })
        }
        EquilibriumMode::Expanded => {
            let (drift, noise) = corrected_coefficients(p)?;
            if drift == 0.0 {
                return invalid("corrected drift vanishes");
            }
            Ok(EquilibriumStats { c11: -noise / (2.0 * drift), corr_time: -1.0 / drift })
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointErrorStats {
    /// Actual steady mean-square error `E(x − x̃)²`.
    pub e11: f64,
    /// `E[(x − x̃) x̃]`; zero for an orthogonal (optimal) estimate.
    pub optimality_residual: f64,
    /// Filter-reported steady variance.
    pub s_tilde: f64,
    /// Stationary covariance of `(x, y, x̃)`.
    pub cov: DMatrix<f64>,
}

/// Joint stationary statistics of the truth and a reduced Kalman–Bucy estimate.
pub fn joint_error_stats(p: &LinearTwoScaleParams, rp: &ReducedOUParams) -> Result<JointErrorStats> {
    p.validate()?;
    let s_tilde = solve_riccati_reduced(rp.a, rp.sigma_x_sq, p.r_obs)?;
    let k = s_tilde / p.r_obs;
    let drift = DMatrix::from_row_slice(
        3,
        3,
        &[
            p.a11,
            p.a12,
            0.0,
            p.a21 / p.eps,
            p.a22 / p.eps,
            0.0,
            k,
            0.0,
            rp.a - k,
        ],
    );
    if !crate::linalg::is_hurwitz(&drift) {
        return invalid("joint drift of truth and reduced filter is unstable");
    }
    let noise = DMatrix::from_diagonal(&DVector::from_vec(vec![
        p.sigma_x.powi(2),
        p.sigma_y.powi(2) / p.eps,
        k * k * p.r_obs,
    ]));
    let cov = lyapunov_continuous(&drift, &noise)?;
    Ok(JointErrorStats {
        e11: cov[(0, 0)] + cov[(2, 2)] - 2.0 * cov[(0, 2)],
        optimality_residual: cov[(0, 2)] - cov[(2, 2)],
        s_tilde,
        cov,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_for_presets() {
        let d = derived_coefficients(&LinearTwoScaleParams::figure1(0.1)).unwrap();
        assert_eq!((d.a_tilde, d.a_hat), (-2.0, -1.0));
        let d = derived_coefficients(&LinearTwoScaleParams::convergence_study(0.1)).unwrap();
        assert_eq!((d.a_tilde, d.a_hat), (-2.0, -1.0));
    }

    #[test]
    fn zero_coupling_derived() {
        let mut p = LinearTwoScaleParams::figure1(0.1);
        p.a12 = 0.0;
        let d = derived_coefficients(&p).unwrap();
        assert_eq!(d.a_tilde, p.a11);
        assert_eq!(d.a_hat, 0.0);
    }

    #[test]
    fn reduced_root_closed_form() {
        let s = solve_riccati_reduced(-1.0, 2.0, 1.0).unwrap();
        assert!((s - (3f64.sqrt() - 1.0)).abs() < 1e-15);
        assert_eq!(solve_riccati_reduced(-1.0, 0.0, 1.0).unwrap(), 0.0);
        let big_r = solve_riccati_reduced(-2.0, 3.0, 1e12).unwrap();
        assert!((big_r - 0.75).abs() < 1e-9);
    }

    #[test]
    fn optimal_params_figure1() {
        let rp = optimal_reduced_params(&LinearTwoScaleParams::figure1(0.1)).unwrap();
        assert!((rp.a + 2.2).abs() < 1e-14);
        assert!((rp.sigma_x_sq - 2.6).abs() < 1e-14);
        let rp = optimal_reduced_params(&LinearTwoScaleParams::convergence_study(0.1)).unwrap();
        assert!((rp.a + 2.2).abs() < 1e-14);
        assert!((rp.sigma_x_sq - 1.3).abs() < 1e-14);
    }

    #[test]
    fn manifold_at_averaged_drift() {
        let p = LinearTwoScaleParams::figure1(0.1);
        let s = s11_expanded(&p).unwrap();
        let v = manifold_sigma_sq(&p, -2.0).unwrap();
        assert!((v - (2.6 - 0.4 * s)).abs() < 1e-13);
    }

    #[test]
    fn msm_examples() {
        assert_eq!(msm_fit(1.0, 1.0).unwrap(), ReducedOUParams { a: -1.0, sigma_x_sq: 2.0 });
        assert_eq!(msm_fit(0.25, 0.5).unwrap(), ReducedOUParams { a: -2.0, sigma_x_sq: 1.0 });
        assert!(msm_fit(0.0, 1.0).is_err());
    }

    #[test]
    fn expanded_equilibrium_appendix_params() {
        let p = LinearTwoScaleParams::convergence_study(0.1);
        let e = equilibrium_stats_linear(&p, EquilibriumMode::Expanded).unwrap();
        assert!((e.c11 - 1.3 / 4.4).abs() < 1e-14);
    }

    #[test]
    fn decoupled_equilibrium_both_modes() {
        let mut p = LinearTwoScaleParams::figure1(0.1);
        p.a12 = 0.0;
        for mode in [EquilibriumMode::Exact, EquilibriumMode::Expanded] {
            let e = equilibrium_stats_linear(&p, mode).unwrap();
            assert!((e.c11 - 1.0).abs() < 1e-12);
            assert!((e.corr_time - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn joint_stats_vanish_without_noise() {
        let mut p = LinearTwoScaleParams::figure1(0.1);
        p.sigma_x = 0.0;
        p.sigma_y = 0.0;
        let rp = ReducedOUParams { a: -2.0, sigma_x_sq: 0.0 };
        let j = joint_error_stats(&p, &rp).unwrap();
        assert!(j.cov.amax() < 1e-15);
    }
}
