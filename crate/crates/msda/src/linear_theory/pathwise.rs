use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::diagnostics::batch_mean;
use crate::error::{invalid, Result};
use crate::linear_theory::{derived_coefficients, manifold_sigma_sq, run_linear_filter, LinearFilterVariant};
use crate::models::{generate_observations, integrate_linear_exact, LinearTwoScaleParams};

/// Least-squares line through `(ln x, ln y)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub stderr: f64,
    /// Half-width of the 95% confidence interval for the slope.
    pub ci_half_width: f64,
}

// Two-sided 97.5% Student-t quantiles for 1..=10 degrees of freedom.
const T975: [f64; 10] = [12.706, 4.303, 3.182, 2.776, 2.571, 2.447, 2.365, 2.306, 2.262, 2.228];

pub fn log_log_slope(x: &[f64], y: &[f64]) -> Result<SlopeFit> {
    if x.len() != y.len() || x.len() < 2 {
        return invalid("slope fit needs at least two paired points");
    }
    if x.iter().chain(y).any(|v| !(*v > 0.0)) {
        return invalid("slope fit needs strictly positive data");
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let dof = lx.len().saturating_sub(2);
    let (stderr, ci) = if dof == 0 {
        (0.0, 0.0)
    } else {
        let ssr: f64 = lx
            .iter()
            .zip(&ly)
            .map(|(a, b)| (b - intercept - slope * a).powi(2))
            .sum();
        let se = (ssr / dof as f64 / sxx).sqrt();
        let t = if dof <= T975.len() { T975[dof - 1] } else { 1.96 };
        (se, t * se)
    };
    Ok(SlopeFit { slope, intercept, stderr, ci_half_width: ci })
}

const BATCHES: usize = 50;

/// Reduced filter compared against the full filter pathwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PathwiseReduced {
    Optimal,
    /// `a = ã` with the noise level that keeps it on the consistency manifold.
    AveragedOnManifold,
}

impl PathwiseReduced {
    pub fn variant(self, p: &LinearTwoScaleParams) -> Result<LinearFilterVariant> {
        match self {
            Self::Optimal => Ok(LinearFilterVariant::Optimal),
            Self::AveragedOnManifold => {
                let a = derived_coefficients(p)?.a_tilde;
                Ok(LinearFilterVariant::Custom { a, sigma_x_sq: manifold_sigma_sq(p, a)? })
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct PathwiseStudy {
    pub eps: Vec<f64>,
    /// Time-averaged `(x̂ − x̃)²` between full and reduced posterior means.
    pub mean_sq_diff: Vec<f64>,
    /// Batch-means standard error of each time average.
    pub mean_sq_diff_stderr: Vec<f64>,
    pub fit: SlopeFit,
    /// 95% half-width of the slope due to finite averaging alone.
    pub sampling_ci_half_width: f64,
    /// Set when the sampling interval on the slope is wider than 0.5.
    pub inconclusive: bool,
}

/// Runs the full and a reduced filter on identical observation streams for each ε and fits
/// the decay rate of their mean-square disagreement.
pub fn pathwise_convergence_study(
    base: &LinearTwoScaleParams,
    reduced: PathwiseReduced,
    eps_list: &[f64],
    dt: f64,
    cycles: usize,
    burn_in: usize,
    seed: u64,
) -> Result<PathwiseStudy> {
    if eps_list.len() < 2 {
        return invalid("pathwise study needs at least two eps values");
    }
    if burn_in >= cycles {
        return invalid("burn-in must be shorter than the run");
    }
    let mut diffs = Vec::with_capacity(eps_list.len());
    let mut stderrs = Vec::with_capacity(eps_list.len());
    for (i, &eps) in eps_list.iter().enumerate() {
        let p = base.with_eps(eps);
        let run_seed = seed.wrapping_add(i as u64);
        let x0 = DVector::zeros(2);
        let traj = integrate_linear_exact(&p, &x0, dt, cycles, run_seed)?;
        let r = nalgebra::DMatrix::from_element(1, 1, p.r_obs);
        let obs = generate_observations(&traj, &[0], &r, 1, run_seed)?;
        let full = run_linear_filter(LinearFilterVariant::Full, &p, &obs)?;
        let red = run_linear_filter(reduced.variant(&p)?, &p, &obs)?;
        let sq: Vec<f64> = full.estimates[burn_in..]
            .iter()
            .zip(&red.estimates[burn_in..])
            .map(|(a, b)| (a - b).powi(2))
            .collect();
        let (mean, se) = batch_mean(&sq, BATCHES);
        diffs.push(mean);
        stderrs.push(se);
    }
    let fit = log_log_slope(eps_list, &diffs)?;
    // Delta method: Var(ln d) ≈ (se/d)², propagated through the regression weights.
    let lx: Vec<f64> = eps_list.iter().map(|e| e.ln()).collect();
    let mx = lx.iter().sum::<f64>() / lx.len() as f64;
    let sxx: f64 = lx.iter().map(|v| (v - mx).powi(2)).sum();
    let var_slope: f64 = lx
        .iter()
        .zip(diffs.iter().zip(&stderrs))
        .map(|(x, (d, se))| ((x - mx) / sxx).powi(2) * (se / d).powi(2))
        .sum();
    let sampling = 1.96 * var_slope.sqrt();
    Ok(PathwiseStudy {
        eps: eps_list.to_vec(),
        mean_sq_diff: diffs,
        mean_sq_diff_stderr: stderrs,
        fit,
        sampling_ci_half_width: sampling,
        inconclusive: 2.0 * sampling > 0.5,
    })
}
