use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{lyapunov_continuous, lyapunov_discrete, symmetrize};
use crate::linear_theory::{
    additive_params, averaged_params, optimal_reduced_params, solve_dare, ReducedOUParams,
};
use crate::models::{LinearTransition, LinearTwoScaleParams, ObservationSeries};

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianBelief {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.shape() != (mean.len(), mean.len()) {
            return invalid("belief covariance does not match mean dimension");
        }
        Ok(Self { mean, cov })
    }

    pub fn predict(&self, tr: &LinearTransition) -> Self {
        Self {
            mean: &tr.phi * &self.mean,
            cov: symmetrize(&(&tr.phi * &self.cov * tr.phi.transpose() + &tr.cov)),
        }
    }

    /// Joseph-form Kalman update, keeping the covariance symmetric and PSD.
    pub fn update(&self, h: &DMatrix<f64>, r: &DMatrix<f64>, z: &DVector<f64>) -> Result<Self> {
        let s = h * &self.cov * h.transpose() + r;
        let s_inv = s
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Numerical("innovation covariance is singular".into()))?;
        let k = &self.cov * h.transpose() * s_inv;
        let innov = z - h * &self.mean;
        let n = self.mean.len();
        let i_kh = DMatrix::<f64>::identity(n, n) - &k * h;
        let cov = symmetrize(&(&i_kh * &self.cov * i_kh.transpose() + &k * r * k.transpose()));
        Ok(Self { mean: &self.mean + &k * innov, cov })
    }
}

/// Filter model used against observations of the slow variable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LinearFilterVariant {
    /// The true two-dimensional model.
    Full,
    /// `a = ã`, `σ_X² = σx²`.
    Rsf,
    /// `a = ã`, `σ_X² = σx² + εσy² a12²/a22²`.
    Rsfa,
    /// Second-order corrected parameters.
    Optimal,
    Custom { a: f64, sigma_x_sq: f64 },
}

impl LinearFilterVariant {
    pub fn label(&self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::Rsf => "rsf",
            Self::Rsfa => "rsfa",
            Self::Optimal => "optimal",
            Self::Custom { .. } => "custom",
        }
    }

    /// Reduced parameters, `None` for the full model.
    pub fn reduced(&self, p: &LinearTwoScaleParams) -> Result<Option<ReducedOUParams>> {
        let rp = match *self {
            Self::Full => return Ok(None),
            Self::Rsf => averaged_params(p)?,
            Self::Rsfa => additive_params(p)?,
            Self::Optimal => optimal_reduced_params(p)?,
            Self::Custom { a, sigma_x_sq } => ReducedOUParams { a, sigma_x_sq },
        };
        rp.validate()?;
        Ok(Some(rp))
    }

    fn model(&self, p: &LinearTwoScaleParams) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        Ok(match self.reduced(p)? {
            None => (p.drift(), p.noise()),
            Some(rp) => (
                DMatrix::from_element(1, 1, rp.a),
                DMatrix::from_element(1, 1, rp.sigma_x_sq),
            ),
        })
    }
}

#[derive(Debug, Clone)]
pub struct LinearFilterRun {
    pub variant: LinearFilterVariant,
    /// Posterior after each observation.
    pub beliefs: Vec<GaussianBelief>,
    /// Posterior mean of the slow variable.
    pub estimates: Vec<f64>,
    /// Posterior variance of the slow variable.
    pub variances: Vec<f64>,
}

impl LinearFilterRun {
    /// Time-averaged squared error and reported variance over cycles `burn_in..`.
    pub fn scores(&self, truth: &[f64], burn_in: usize) -> Result<(f64, f64)> {
        if truth.len() != self.estimates.len() || burn_in >= truth.len() {
            return invalid("scores: truth length mismatch or burn-in too long");
        }
        let n = (truth.len() - burn_in) as f64;
        let mse = truth[burn_in..]
            .iter()
            .zip(&self.estimates[burn_in..])
            .map(|(x, e)| (x - e).powi(2))
            .sum::<f64>()
            / n;
        let cov = self.variances[burn_in..].iter().sum::<f64>() / n;
        Ok((mse, cov))
    }
}

/// Discrete-observation Kalman filter with exact propagation between observations.
/// Starts from the model's own equilibrium.
pub fn run_linear_filter(
    variant: LinearFilterVariant,
    p: &LinearTwoScaleParams,
    obs: &ObservationSeries,
) -> Result<LinearFilterRun> {
    p.validate()?;
    if obs.dim() != 1 || obs.obs_indices[0] != 0 {
        return invalid("linear filter expects scalar observations of the slow variable");
    }
    let dt = obs.interval();
    if !(dt > 0.0) {
        return invalid("observation series needs at least two uniformly spaced times");
    }
    let (a, q) = variant.model(p)?;
    let n = a.nrows();
    let tr = LinearTransition::new(&a, &q, dt)?;
    let eq = lyapunov_continuous(&a, &q)?;
    let mut h = DMatrix::zeros(1, n);
    h[(0, 0)] = 1.0;
    let mut belief = GaussianBelief::new(DVector::zeros(n), eq)?;
    let mut beliefs = Vec::with_capacity(obs.len());
    let mut estimates = Vec::with_capacity(obs.len());
    let mut variances = Vec::with_capacity(obs.len());
    for (k, z) in obs.values.iter().enumerate() {
        belief = belief.predict(&tr).update(&h, &obs.r_obs, z)?;
        let v = belief.cov[(0, 0)];
        if !(v >= 0.0) || !belief.mean[0].is_finite() {
            return Err(Error::Divergence { step: k, detail: format!("posterior variance {v}") });
        }
        estimates.push(belief.mean[0]);
        variances.push(v);
        beliefs.push(belief.clone());
    }
    Ok(LinearFilterRun { variant, beliefs, estimates, variances })
}

/// Exact stationary statistics of two discrete filters run on the same observations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SteadyComparison {
    /// `E(x − x̂_a)²`, `E(x − x̂_b)²`.
    pub mse_a: f64,
    pub mse_b: f64,
    /// Reported steady posterior variances of the slow variable.
    pub cov_a: f64,
    pub cov_b: f64,
    /// `E(x̂_a − x̂_b)²`.
    pub mean_sq_diff: f64,
}

/// Stationary second moments of (truth, filter a, filter b) from a discrete Lyapunov solve
/// on the joint linear recursion at steady gain.
pub fn steady_state_comparison(
    p: &LinearTwoScaleParams,
    a: LinearFilterVariant,
    b: LinearFilterVariant,
    dt: f64,
) -> Result<SteadyComparison> {
    p.validate()?;
    let truth = LinearTransition::new(&p.drift(), &p.noise(), dt)?;
    let r = DMatrix::from_element(1, 1, p.r_obs);

    struct Steady {
        phi: DMatrix<f64>,
        gain: DMatrix<f64>,
        h: DMatrix<f64>,
        post_var: f64,
    }
    let steady = |v: LinearFilterVariant| -> Result<Steady> {
        let (am, qm) = v.model(p)?;
        let n = am.nrows();
        let tr = LinearTransition::new(&am, &qm, dt)?;
        let mut h = DMatrix::zeros(1, n);
        h[(0, 0)] = 1.0;
        let init = lyapunov_discrete(&tr.phi, &tr.cov)?;
        let prior = solve_dare(&tr.phi, &tr.cov, &h, &r, &init)?;
        let s = (&h * &prior * h.transpose())[(0, 0)] + p.r_obs;
        let gain = &prior * h.transpose() / s;
        let post = &prior - &gain * &h * &prior;
        Ok(Steady { phi: tr.phi, gain, h, post_var: post[(0, 0)] })
    };
    let fa = steady(a)?;
    let fb = steady(b)?;
    let (na, nb) = (fa.phi.nrows(), fb.phi.nrows());
    let dim = 2 + na + nb;
    let hx = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
    let mut t = DMatrix::zeros(dim, dim);
    let mut bmat = DMatrix::zeros(dim, 3);
    t.view_mut((0, 0), (2, 2)).copy_from(&truth.phi);
    bmat.view_mut((0, 0), (2, 2)).copy_from(&DMatrix::identity(2, 2));
    for (off, f) in [(2, &fa), (2 + na, &fb)] {
        let n = f.phi.nrows();
        let kh_phi = &f.gain * &hx * &truth.phi;
        t.view_mut((off, 0), (n, 2)).copy_from(&kh_phi);
        let own = (DMatrix::identity(n, n) - &f.gain * &f.h) * &f.phi;
        t.view_mut((off, off), (n, n)).copy_from(&own);
        bmat.view_mut((off, 0), (n, 2)).copy_from(&(&f.gain * &hx));
        bmat.view_mut((off, 2), (n, 1)).copy_from(&f.gain);
    }
    let mut noise = DMatrix::zeros(3, 3);
    noise.view_mut((0, 0), (2, 2)).copy_from(&truth.cov);
    noise[(2, 2)] = p.r_obs;
    let c = lyapunov_discrete(&t, &(&bmat * noise * bmat.transpose()))?;
    let (ia, ib) = (2, 2 + na);
    Ok(SteadyComparison {
        mse_a: c[(0, 0)] + c[(ia, ia)] - 2.0 * c[(0, ia)],
        mse_b: c[(0, 0)] + c[(ib, ib)] - 2.0 * c[(0, ib)],
        cov_a: fa.post_var,
        cov_b: fb.post_var,
        mean_sq_diff: c[(ia, ia)] + c[(ib, ib)] - 2.0 * c[(ia, ib)],
    })
}
