//! Ensemble transform Kalman filter with parameter augmentation and adaptive estimation of
//! the model-error and observation-noise covariances from lagged innovations.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{consistency, ConsistencyInput};
use crate::error::{invalid, Error, Result};
use crate::linalg::{pinv, psd_project, rank, sym_sqrt, symmetrize, vec_of};
use crate::models::{one_layer_tendency, rk4_step, two_layer_tendency, L96Params, Rk4Work};
use crate::rng::{self, StreamRng};

/// Relative singular-value cutoff for every pseudo-inverse in this module.
pub const PINV_RTOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    /// One member per column.
    pub members: DMatrix<f64>,
    pub time: f64,
}

impl Ensemble {
    pub fn new(members: DMatrix<f64>, time: f64) -> Result<Self> {
        if members.ncols() < 2 {
            return invalid("an ensemble needs at least two members");
        }
        if members.iter().any(|v| !v.is_finite()) {
            return invalid("ensemble members must be finite");
        }
        Ok(Self { members, time })
    }

    pub fn size(&self) -> usize {
        self.members.ncols()
    }

    pub fn dim(&self) -> usize {
        self.members.nrows()
    }

    pub fn mean(&self) -> DVector<f64> {
        self.members.column_mean()
    }

    pub fn perturbations(&self) -> DMatrix<f64> {
        centered(&self.members)
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        let x = self.perturbations();
        symmetrize(&(&x * x.transpose() / (self.size() - 1) as f64))
    }
}

fn centered(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mean = m.column_mean();
    let mut x = m.clone();
    for mut c in x.column_iter_mut() {
        c -= &mean;
    }
    x
}

#[derive(Debug, Clone)]
pub struct EtkfAnalysis {
    pub analysis: Ensemble,
    /// Forecast ensemble after additive inflation.
    pub inflated: Ensemble,
    pub gain: DMatrix<f64>,
    /// Sample covariance of the inflated forecast.
    pub p_f: DMatrix<f64>,
    pub p_a: DMatrix<f64>,
    /// `z − H x̄` for the inflated forecast mean.
    pub innovation: DVector<f64>,
}

/// Rescales forecast perturbations so their sample covariance becomes `P_f + Q`.
///
/// With `X = U Σ Vᵀ`, the inflated perturbations are `√(E−1) (P_f + Q)^{1/2} U Vᵀ`. This is exact
/// when `X` has rank `n` (needs `E > n`); otherwise only the span of `U` is represented.
pub fn inflate_perturbations(x: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (n, e) = x.shape();
    if q.shape() != (n, n) {
        return invalid("inflation covariance does not match the state dimension");
    }
    if q.iter().all(|&v| v == 0.0) {
        return Ok(x.clone());
    }
    let svd = x.clone().svd(true, true);
    let smax = svd.singular_values.iter().copied().fold(0.0, f64::max);
    if smax == 0.0 {
        return Err(Error::RankDeficient("collapsed ensemble cannot carry additive inflation".into()));
    }
    let p = x * x.transpose() / (e - 1) as f64;
    let root = sym_sqrt(&(p + q));
    let u = svd.u.as_ref().expect("requested u");
    let vt = svd.v_t.as_ref().expect("requested v_t");
    let mut basis = DMatrix::zeros(n, e);
    for (j, s) in svd.singular_values.iter().enumerate() {
        if *s > 1e-12 * smax {
            basis += u.column(j) * vt.row(j);
        }
    }
    Ok(root * basis * ((e - 1) as f64).sqrt())
}

/// Deterministic ensemble transform update of an additively inflated forecast.
pub fn etkf_analysis(
    forecast: &Ensemble,
    z: &DVector<f64>,
    h: &DMatrix<f64>,
    r_used: &DMatrix<f64>,
    q_inflate: &DMatrix<f64>,
) -> Result<EtkfAnalysis> {
    let (n, e) = forecast.members.shape();
    let m = z.len();
    if e < 2 {
        return Err(Error::RankDeficient(format!("ensemble of {e} members has no spread")));
    }
    if h.shape() != (m, n) || r_used.shape() != (m, m) {
        return invalid("observation operator or covariance has the wrong shape");
    }
    let r_chol = r_used
        .clone()
        .cholesky()
        .ok_or_else(|| Error::InvalidParameter("observation covariance used in the gain is not SPD".into()))?;
    let mean = forecast.mean();
    let xt = inflate_perturbations(&forecast.perturbations(), q_inflate)?;
    let y = h * &xt;
    let innovation = z - h * &mean;
    let rinv_y = r_chol.solve(&y);
    let ef = (e - 1) as f64;
    let a = symmetrize(&(DMatrix::identity(e, e) * ef + y.transpose() * &rinv_y));
    let eig = a.symmetric_eigen();
    if eig.eigenvalues.iter().any(|l| !(*l > 0.0)) {
        return Err(Error::RankDeficient("ensemble transform matrix is not positive definite".into()));
    }
    let v = &eig.eigenvectors;
    let pa_w = v * DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l)) * v.transpose();
    let w = v * DMatrix::from_diagonal(&eig.eigenvalues.map(|l| (ef / l).sqrt())) * v.transpose();
    let w_mean = &pa_w * (rinv_y.transpose() * &innovation);
    let mean_a = &mean + &xt * w_mean;
    let xa = &xt * w;
    let mut members = xa.clone();
    for mut c in members.column_iter_mut() {
        c += &mean_a;
    }
    let gain = &xt * &pa_w * rinv_y.transpose();
    let p_f = symmetrize(&(&xt * xt.transpose() / ef));
    let p_a = symmetrize(&(&xa * xa.transpose() / ef));
    let mut inflated_members = xt;
    for mut c in inflated_members.column_iter_mut() {
        c += &mean;
    }
    Ok(EtkfAnalysis {
        analysis: Ensemble { members, time: forecast.time },
        inflated: Ensemble { members: inflated_members, time: forecast.time },
        gain,
        p_f,
        p_a,
        innovation,
    })
}

/// `F = X_f X_a⁺` and `H = Z_f X̃_f⁺` from column-centered perturbation matrices.
pub fn estimate_linearizations(
    xa_prev: &DMatrix<f64>,
    xf: &DMatrix<f64>,
    xf_inflated: &DMatrix<f64>,
    zf: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if xa_prev.ncols() != xf.ncols() || xf_inflated.ncols() != zf.ncols() {
        return invalid("perturbation matrices must have one column per member");
    }
    let f = xf * pinv(xa_prev, PINV_RTOL)?;
    let h = zf * pinv(xf_inflated, PINV_RTOL)?;
    Ok((f, h))
}

/// Symmetric 0/1 matrices `Q̂_r` with ones where the cyclic distance of `i, j` is `r`, for
/// `r = 0..ceil(N/2)`. The diagonal is `r = 0`.
pub fn cyclic_basis(n: usize) -> Vec<DMatrix<f64>> {
    (0..n.div_ceil(2))
        .map(|r| DMatrix::from_fn(n, n, |i, j| if (i + r) % n == j || (j + r) % n == i { 1.0 } else { 0.0 }))
        .collect()
}

pub fn circulant_from(q: &[f64], basis: &[DMatrix<f64>]) -> DMatrix<f64> {
    let n = basis.first().map_or(0, |b| b.nrows());
    basis.iter().zip(q).fold(DMatrix::zeros(n, n), |acc, (b, v)| acc + b * *v)
}

/// Columns `vec(H_k F Q̂_r H_{k−1}ᵀ)`.
pub fn cyclic_forward_map(
    f_prev: &DMatrix<f64>,
    h_prev: &DMatrix<f64>,
    h_k: &DMatrix<f64>,
    basis: &[DMatrix<f64>],
) -> DMatrix<f64> {
    let cols: Vec<DVector<f64>> =
        basis.iter().map(|b| vec_of(&(h_k * f_prev * b * h_prev.transpose()))).collect();
    DMatrix::from_columns(&cols)
}

/// Least-squares circulant `Q` with `H_k F Q H_{k−1}ᵀ ≈ C`. Returns the coefficients and `Q`.
pub fn cyclic_q_fit(
    c: &DMatrix<f64>,
    f_prev: &DMatrix<f64>,
    h_prev: &DMatrix<f64>,
    h_k: &DMatrix<f64>,
    basis: &[DMatrix<f64>],
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let m = c.nrows();
    if basis.len() > m * m {
        return Err(Error::RankDeficient(format!(
            "{} cyclic parameters exceed the {} lag-one covariance entries",
            basis.len(),
            m * m
        )));
    }
    let a = cyclic_forward_map(f_prev, h_prev, h_k, basis);
    if rank(&a, PINV_RTOL) < basis.len() {
        return Err(Error::RankDeficient("cyclic parameters are not observable at this step".into()));
    }
    let q = pinv(&a, PINV_RTOL)? * vec_of(c);
    let qm = circulant_from(q.as_slice(), basis);
    Ok((q, qm))
}

/// One assimilation step's contribution to the lag store, restricted to the estimated block.
#[derive(Debug, Clone)]
pub struct LagRecord {
    pub innovation: DVector<f64>,
    pub h: DMatrix<f64>,
    pub gain: DMatrix<f64>,
    pub p_f: DMatrix<f64>,
    pub p_a: DMatrix<f64>,
    /// Linearized map from the previous analysis to this forecast.
    pub f_in: Option<DMatrix<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QParameterization {
    Full,
    Cyclic,
}

#[derive(Debug, Clone)]
pub struct NoiseEstimatorState {
    /// Running estimate; never projected in place.
    pub q_est: DMatrix<f64>,
    pub r_est: DMatrix<f64>,
    pub window_tau: f64,
    pub estimate_r: bool,
    /// Records for steps `k−2, k−1, k`, oldest first.
    pub lags: VecDeque<LagRecord>,
    pub cyclic_basis: Option<Vec<DMatrix<f64>>>,
    /// Smallest eigenvalue allowed in the `R` handed to the gain.
    pub r_floor: f64,
    pub updates: usize,
    pub skipped: usize,
}

impl NoiseEstimatorState {
    pub fn new(
        q_init: DMatrix<f64>,
        r_init: DMatrix<f64>,
        window_tau: f64,
        param: &QParameterization,
        estimate_r: bool,
    ) -> Result<Self> {
        if !(window_tau >= 1.0) {
            return invalid("averaging window must be at least one step");
        }
        let n = q_init.nrows();
        if !q_init.is_square() || !r_init.is_square() {
            return invalid("noise estimates must be square");
        }
        let basis = match param {
            QParameterization::Full => None,
            QParameterization::Cyclic => Some(cyclic_basis(n)),
        };
        let r_floor = 1e-6 * r_init.diagonal().mean().abs().max(f64::MIN_POSITIVE);
        Ok(Self {
            q_est: q_init,
            r_est: r_init,
            window_tau,
            estimate_r,
            lags: VecDeque::with_capacity(3),
            cyclic_basis: basis,
            r_floor,
            updates: 0,
            skipped: 0,
        })
    }

    /// Symmetrized, PSD-projected copy of the running `Q` for the next filter step.
    pub fn q_used(&self) -> DMatrix<f64> {
        psd_project(&self.q_est)
    }

    pub fn r_used(&self) -> DMatrix<f64> {
        let eig = symmetrize(&self.r_est).symmetric_eigen();
        let l = eig.eigenvalues.map(|v| v.max(self.r_floor));
        symmetrize(&(&eig.eigenvectors * DMatrix::from_diagonal(&l) * eig.eigenvectors.transpose()))
    }

    pub fn push(&mut self, rec: LagRecord) {
        if self.lags.len() == 3 {
            self.lags.pop_front();
        }
        self.lags.push_back(rec);
    }

    pub fn ready(&self) -> bool {
        self.lags.len() == 3 && self.lags[1].f_in.is_some() && self.lags[2].f_in.is_some()
    }
}

/// Raw `(Qᵉ_{k−1}, Rᵉ_{k−1})` from the three stored steps.
pub fn empirical_noise_estimates(state: &NoiseEstimatorState) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if !state.ready() {
        return invalid("noise estimates need two lags of stored filter statistics");
    }
    let (pp, prev, cur) = (&state.lags[0], &state.lags[1], &state.lags[2]);
    let f_km1 = cur.f_in.as_ref().expect("checked by ready");
    let f_km2 = prev.f_in.as_ref().expect("checked by ready");
    let ee_lag = &cur.innovation * prev.innovation.transpose();
    let ee_prev = &prev.innovation * prev.innovation.transpose();
    let background = f_km2 * &pp.p_a * f_km2.transpose();
    let r_e = &ee_prev - &prev.h * &prev.p_f * prev.h.transpose();
    let q_e = match &state.cyclic_basis {
        None => {
            let n = f_km1.nrows();
            if prev.h.nrows() != n || cur.h.nrows() != n {
                return Err(Error::RankDeficient(
                    "full Q estimation needs every state component observed; use the cyclic parameterization".into(),
                ));
            }
            let inv = |m: &DMatrix<f64>, what: &str| -> Result<DMatrix<f64>> {
                if rank(m, PINV_RTOL) < n {
                    return Err(Error::RankDeficient(format!(
                        "{what} is singular; use the cyclic parameterization"
                    )));
                }
                pinv(m, PINV_RTOL)
            };
            let h_k_inv = inv(&cur.h, "observation linearization")?;
            let h_prev_inv_t = inv(&prev.h, "observation linearization")?.transpose();
            let f_inv = inv(f_km1, "forecast linearization")?;
            let p_e = f_inv * h_k_inv * &ee_lag * &h_prev_inv_t + &prev.gain * &ee_prev * &h_prev_inv_t;
            p_e - background
        }
        Some(basis) => {
            let hf = &cur.h * f_km1;
            let c = &ee_lag + &hf * &prev.gain * &ee_prev - &hf * &background * prev.h.transpose();
            cyclic_q_fit(&c, f_km1, &prev.h, &cur.h, basis)?.1
        }
    };
    Ok((q_e, r_e))
}

/// Exponential moving average with window `τ`. The running matrices are left unprojected.
pub fn update_noise_running(state: &mut NoiseEstimatorState, q_e: &DMatrix<f64>, r_e: &DMatrix<f64>) {
    let tau = state.window_tau;
    state.q_est = &state.q_est + (q_e - &state.q_est) / tau;
    if state.estimate_r {
        state.r_est = &state.r_est + (r_e - &state.r_est) / tau;
    }
    state.updates += 1;
}

/// Per-member forecast over one observation interval.
pub trait EnsembleForecast: Sync {
    fn state_dim(&self) -> usize;
    /// Leading components that are scored and may be observed.
    fn slow_dim(&self) -> usize;
    fn advance(&self, x: &mut [f64], alpha: f64, rng: &mut StreamRng);
}

/// `x ← Φx` once per interval.
#[derive(Debug, Clone)]
pub struct LinearForecast {
    pub phi: DMatrix<f64>,
}

impl EnsembleForecast for LinearForecast {
    fn state_dim(&self) -> usize {
        self.phi.nrows()
    }

    fn slow_dim(&self) -> usize {
        self.phi.nrows()
    }

    fn advance(&self, x: &mut [f64], _alpha: f64, _rng: &mut StreamRng) {
        let y = &self.phi * DVector::from_column_slice(x);
        x.copy_from_slice(y.as_slice());
    }
}

#[derive(Debug, Clone)]
pub enum L96ForecastKind {
    TwoLayer(L96Params),
    /// Deterministic one-layer model with damping `1 + α`.
    Reduced { forcing: f64 },
    /// One-layer model with damping `1 + α` and diagonal diffusion `σ̂ dW`. Each step adds
    /// `σ̂ √δt z` to first order, the increment held across the RK4 stages.
    StochasticLinear { forcing: f64, sigma_hat: f64 },
}

#[derive(Debug, Clone)]
pub struct L96Forecast {
    pub kind: L96ForecastKind,
    pub n_slow: usize,
    pub dt: f64,
    pub steps: usize,
}

impl EnsembleForecast for L96Forecast {
    fn state_dim(&self) -> usize {
        match &self.kind {
            L96ForecastKind::TwoLayer(p) => p.n_total(),
            _ => self.n_slow,
        }
    }

    fn slow_dim(&self) -> usize {
        self.n_slow
    }

    fn advance(&self, x: &mut [f64], alpha: f64, rng: &mut StreamRng) {
        let mut w = Rk4Work::new(x.len());
        match &self.kind {
            L96ForecastKind::TwoLayer(p) => {
                for _ in 0..self.steps {
                    rk4_step(|a, b| two_layer_tendency(p, a, b), x, self.dt, &mut w);
                }
            }
            L96ForecastKind::Reduced { forcing } => {
                for _ in 0..self.steps {
                    rk4_step(|a, b| one_layer_tendency(*forcing, alpha, a, b), x, self.dt, &mut w);
                }
            }
            L96ForecastKind::StochasticLinear { forcing, sigma_hat } => {
                let mut e = vec![0.0; x.len()];
                let amp = sigma_hat / self.dt.sqrt();
                for _ in 0..self.steps {
                    for v in e.iter_mut() {
                        *v = amp * rng::normal(rng);
                    }
                    rk4_step(
                        |a, b| {
                            one_layer_tendency(*forcing, alpha, a, b);
                            for (bi, ei) in b.iter_mut().zip(&e) {
                                *bi += ei;
                            }
                        },
                        x,
                        self.dt,
                        &mut w,
                    );
                }
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EtkfConfig {
    pub ensemble_size: usize,
    /// Observed entries of the slow state.
    pub obs_indices: Vec<usize>,
    pub augment_alpha: bool,
    /// Fixed damping when not augmented; initial ensemble mean when augmented.
    pub alpha_init: f64,
    pub alpha_init_spread: f64,
    /// Standard deviation of the initial state perturbations.
    pub init_spread: f64,
    pub seed: u64,
}

impl EtkfConfig {
    pub fn validate(&self, slow_dim: usize) -> Result<()> {
        if self.ensemble_size < 2 {
            return invalid("ensemble_size must be at least 2");
        }
        if self.obs_indices.is_empty()
            || self.obs_indices.windows(2).any(|w| w[1] <= w[0])
            || self.obs_indices.iter().any(|&i| i >= slow_dim)
        {
            return invalid("obs_indices must be strictly increasing slow-state indices");
        }
        if !(self.alpha_init_spread >= 0.0) || !(self.init_spread >= 0.0) {
            return invalid("ensemble spreads must be nonnegative");
        }
        Ok(())
    }
}

/// Noise handling for an adaptive run.
#[derive(Debug, Clone)]
pub enum NoiseSetting {
    /// Fixed inflation `Q` (slow block) and fixed `R`.
    Fixed { q: DMatrix<f64>, r: DMatrix<f64> },
    Adaptive(NoiseEstimatorState),
}

/// Consecutive steps above the divergence threshold that abort a run.
pub const DIVERGENCE_PATIENCE: usize = 100;

#[derive(Debug, Clone, Serialize)]
pub struct AdaptiveStep {
    pub step: usize,
    /// `|x − x̄|²/N` on the slow state.
    pub sq_error: f64,
    pub consistency: Option<f64>,
    pub alpha_mean: f64,
    pub tr_q: f64,
    pub tr_r: f64,
}

#[derive(Debug, Clone)]
pub struct AdaptiveRun {
    pub steps: Vec<AdaptiveStep>,
    pub q_final: DMatrix<f64>,
    pub r_final: DMatrix<f64>,
    pub final_means: DVector<f64>,
    /// Raw `(Qᵉ, Rᵉ)` entries `(0,0)` at each update, for estimator diagnostics.
    pub raw_q00: Vec<f64>,
    pub raw_r00: Vec<f64>,
    pub estimator_updates: usize,
    pub estimator_skipped: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RunSummary {
    pub rmse: f64,
    pub consistency: f64,
    pub alpha_mean: f64,
    pub excluded: usize,
}

impl AdaptiveRun {
    /// Burn-in-excluded averages. When more than 1% of the scored steps had a singular
    /// covariance the ensemble has collapsed and consistency is reported as infinite.
    pub fn summary(&self, burn_in: usize) -> Result<RunSummary> {
        if burn_in >= self.steps.len() {
            return invalid("burn-in covers the whole run");
        }
        let s = &self.steps[burn_in..];
        let n = s.len() as f64;
        let rmse = (s.iter().map(|x| x.sq_error).sum::<f64>() / n).sqrt();
        let good: Vec<f64> = s.iter().filter_map(|x| x.consistency).collect();
        let excluded = s.len() - good.len();
        let consistency = if excluded as f64 > 0.01 * n {
            f64::INFINITY
        } else {
            good.iter().sum::<f64>() / good.len() as f64
        };
        Ok(RunSummary {
            rmse,
            consistency,
            alpha_mean: s.iter().map(|x| x.alpha_mean).sum::<f64>() / n,
            excluded,
        })
    }
}

/// Two-parameter closure read off an adaptive run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OnlineFit {
    /// Time-averaged ensemble-mean damping after burn-in.
    pub alpha: f64,
    /// Mean diagonal of `σ = (Q̃/Δt)^{1/2}` from the final running `Q`.
    pub sigma_hat: f64,
}

pub fn online_fit(run: &AdaptiveRun, dt_obs: f64, burn_in: usize) -> Result<OnlineFit> {
    if burn_in >= run.steps.len() {
        return invalid("burn-in covers the whole run");
    }
    if !(dt_obs > 0.0) {
        return invalid("observation interval must be positive");
    }
    let s = &run.steps[burn_in..];
    let alpha = s.iter().map(|x| x.alpha_mean).sum::<f64>() / s.len() as f64;
    let sigma = sym_sqrt(&(psd_project(&run.q_final) / dt_obs));
    Ok(OnlineFit { alpha, sigma_hat: sigma.diagonal().mean() })
}

fn initial_members(
    x0: &DVector<f64>,
    cfg: &EtkfConfig,
    dim: usize,
) -> DMatrix<f64> {
    let n = x0.len();
    let mut rng = rng::stream(cfg.seed, "enkf-initial");
    DMatrix::from_fn(dim, cfg.ensemble_size, |i, _| {
        if i < n {
            x0[i] + cfg.init_spread * rng::normal(&mut rng)
        } else {
            cfg.alpha_init + cfg.alpha_init_spread * rng::normal(&mut rng)
        }
    })
}

/// Forecast, ETKF analysis and noise-estimate update, once per observation.
///
/// `truth` holds the full-model slow state at each observation time; `x0` initializes the
/// ensemble mean of the forecast model state.
pub fn run_adaptive_enkf<M: EnsembleForecast>(
    model: &M,
    cfg: &EtkfConfig,
    mut noise: NoiseSetting,
    obs: &[DVector<f64>],
    truth: &[DVector<f64>],
    x0: &DVector<f64>,
    obs_noise_level: f64,
) -> Result<AdaptiveRun> {
    let ns = model.slow_dim();
    let n_phys = model.state_dim();
    cfg.validate(ns)?;
    if obs.len() != truth.len() || obs.is_empty() {
        return invalid("observations and truth must be non-empty and aligned");
    }
    if x0.len() != n_phys {
        return invalid("initial state does not match the forecast model");
    }
    let m = cfg.obs_indices.len();
    let dim = n_phys + usize::from(cfg.augment_alpha);
    let h = {
        let mut h = DMatrix::zeros(m, dim);
        for (r, &c) in cfg.obs_indices.iter().enumerate() {
            h[(r, c)] = 1.0;
        }
        h
    };
    if let NoiseSetting::Adaptive(st) = &noise {
        if n_phys != ns {
            return invalid("noise estimation needs a forecast model without hidden components");
        }
        if st.q_est.shape() != (ns, ns) || st.r_est.shape() != (m, m) {
            return invalid("noise estimator dimensions do not match the model");
        }
        if st.cyclic_basis.is_none() && m < ns {
            return Err(Error::RankDeficient(format!(
                "full Q estimation needs M = N observations, got M = {m} < N = {ns}; use the cyclic parameterization"
            )));
        }
        if let Some(b) = &st.cyclic_basis {
            if b.len() > m * m {
                return Err(Error::RankDeficient(format!(
                    "cyclic parameterization needs ceil(N/2) = {} <= M^2 = {}",
                    b.len(),
                    m * m
                )));
            }
        }
    }
    if let NoiseSetting::Fixed { q, r } = &noise {
        if q.shape() != (ns, ns) || r.shape() != (m, m) {
            return invalid("fixed noise dimensions do not match the model");
        }
    }

    let mut members = initial_members(x0, cfg, dim);
    let mut rngs: Vec<StreamRng> =
        (0..cfg.ensemble_size).map(|i| rng::indexed_stream(cfg.seed, "member-noise", i as u64)).collect();
    let mut steps = Vec::with_capacity(obs.len());
    let mut raw_q00 = Vec::new();
    let mut raw_r00 = Vec::new();
    let mut bad_run = 0usize;
    let threshold = 1e3 * obs_noise_level;

    for (k, (z, xt)) in obs.iter().zip(truth).enumerate() {
        if z.len() != m || xt.len() != ns {
            return invalid(format!("observation or truth at step {k} has the wrong dimension"));
        }
        let xa_prev = centered(&members.rows(0, ns).into_owned());
        let augment = cfg.augment_alpha;
        let alpha_fixed = cfg.alpha_init;
        members
            .as_mut_slice()
            .par_chunks_mut(dim)
            .zip(rngs.par_iter_mut())
            .for_each(|(col, rng)| {
                let alpha = if augment { col[n_phys] } else { alpha_fixed };
                model.advance(&mut col[..n_phys], alpha, rng);
            });
        if members.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { step: k, detail: "non-finite forecast member".into() });
        }
        let forecast = Ensemble { members: members.clone(), time: k as f64 };
        let (q_slow, r_used) = match &noise {
            NoiseSetting::Fixed { q, r } => (q.clone(), r.clone()),
            NoiseSetting::Adaptive(st) => (st.q_used(), st.r_used()),
        };
        let mut q_full = DMatrix::zeros(dim, dim);
        q_full.view_mut((0, 0), (ns, ns)).copy_from(&q_slow);
        let an = etkf_analysis(&forecast, z, &h, &r_used, &q_full)?;

        if let NoiseSetting::Adaptive(st) = &mut noise {
            let xf = centered(&forecast.members.rows(0, ns).into_owned());
            let xt_inf = centered(&an.inflated.members.rows(0, ns).into_owned());
            let zf = centered(&(&h * &an.inflated.members));
            let f_in = if k == 0 { None } else { Some(estimate_linearizations(&xa_prev, &xf, &xt_inf, &zf)?.0) };
            let h_k = &zf * pinv(&xt_inf, PINV_RTOL)?;
            st.push(LagRecord {
                innovation: an.innovation.clone(),
                h: h_k,
                gain: an.gain.rows(0, ns).into_owned(),
                p_f: an.p_f.view((0, 0), (ns, ns)).into_owned(),
                p_a: an.p_a.view((0, 0), (ns, ns)).into_owned(),
                f_in,
            });
            if st.ready() {
                match empirical_noise_estimates(st) {
                    Ok((qe, re)) => {
                        raw_q00.push(qe[(0, 0)]);
                        raw_r00.push(re[(0, 0)]);
                        update_noise_running(st, &qe, &re);
                    }
                    Err(Error::RankDeficient(_)) => st.skipped += 1,
                    Err(e) => return Err(e),
                }
            }
        }

        members = an.analysis.members;
        let mean = members.column_mean();
        let err = xt - mean.rows(0, ns);
        let sq_error = err.norm_squared() / ns as f64;
        let cov = an.p_a.view((0, 0), (ns, ns)).into_owned();
        let cons = consistency(&ConsistencyInput {
            truth: std::slice::from_ref(xt),
            means: std::slice::from_ref(&mean.rows(0, ns).into_owned()),
            covs: std::slice::from_ref(&cov),
        })
        .ok()
        .map(|c| c.value);
        let (tr_q, tr_r) = match &noise {
            NoiseSetting::Fixed { q, r } => (q.trace(), r.trace()),
            NoiseSetting::Adaptive(st) => (st.q_est.trace(), st.r_est.trace()),
        };
        let alpha_mean = if cfg.augment_alpha { mean[n_phys] } else { cfg.alpha_init };
        if sq_error.sqrt() > threshold {
            bad_run += 1;
            if bad_run >= DIVERGENCE_PATIENCE {
                return Err(Error::Divergence {
                    step: k,
                    detail: format!("RMSE above {threshold:e} for {DIVERGENCE_PATIENCE} consecutive steps"),
                });
            }
        } else {
            bad_run = 0;
        }
        steps.push(AdaptiveStep { step: k, sq_error, consistency: cons, alpha_mean, tr_q, tr_r });
    }

    let (q_final, r_final, updates, skipped) = match &noise {
        NoiseSetting::Fixed { q, r } => (q.clone(), r.clone(), 0, 0),
        NoiseSetting::Adaptive(st) => (st.q_est.clone(), st.r_est.clone(), st.updates, st.skipped),
    };
    Ok(AdaptiveRun {
        steps,
        q_final,
        r_final,
        final_means: members.column_mean(),
        raw_q00,
        raw_r00,
        estimator_updates: updates,
        estimator_skipped: skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ens(rows: usize, data: &[f64]) -> Ensemble {
        Ensemble::new(DMatrix::from_row_slice(rows, data.len() / rows, data), 0.0).unwrap()
    }

    #[test]
    fn scalar_update_matches_kalman() {
        let f = ens(1, &[0.3, -1.2, 2.0, 0.7, -0.4]);
        let (m, p) = (f.mean()[0], f.covariance()[(0, 0)]);
        let r = 0.8;
        let z = 1.5;
        let a = etkf_analysis(
            &f,
            &DVector::from_element(1, z),
            &DMatrix::identity(1, 1),
            &DMatrix::from_element(1, 1, r),
            &DMatrix::zeros(1, 1),
        )
        .unwrap();
        let k = p / (p + r);
        assert!((a.analysis.mean()[0] - (m + k * (z - m))).abs() < 1e-10);
        assert!((a.analysis.covariance()[(0, 0)] - (1.0 - k) * p).abs() < 1e-10);
    }

    #[test]
    fn huge_r_keeps_inflated_forecast() {
        let f = ens(2, &[0.3, -1.2, 2.0, 0.7, 1.0, 0.1, -0.5, 0.2]);
        let q = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.3]);
        let a = etkf_analysis(
            &f,
            &DVector::from_element(1, 100.0),
            &DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            &DMatrix::from_element(1, 1, 1e14),
            &q,
        )
        .unwrap();
        assert!((&a.analysis.members - &a.inflated.members).amax() < 1e-9);
        assert!((a.inflated.covariance() - (f.covariance() + &q)).amax() < 1e-12);
    }

    #[test]
    fn zero_innovation_substitution() {
        let rec = |f_in: Option<f64>| LagRecord {
            innovation: DVector::zeros(1),
            h: DMatrix::identity(1, 1),
            gain: DMatrix::identity(1, 1),
            p_f: DMatrix::from_element(1, 1, 2.5),
            p_a: DMatrix::from_element(1, 1, 0.7),
            f_in: f_in.map(|v| DMatrix::from_element(1, 1, v)),
        };
        let mut st = NoiseEstimatorState::new(
            DMatrix::zeros(1, 1),
            DMatrix::identity(1, 1),
            10.0,
            &QParameterization::Full,
            true,
        )
        .unwrap();
        st.push(rec(None));
        st.push(rec(Some(1.0)));
        st.push(rec(Some(1.0)));
        let (q, r) = empirical_noise_estimates(&st).unwrap();
        assert!((q[(0, 0)] + 0.7).abs() < 1e-15);
        assert!((r[(0, 0)] + 2.5).abs() < 1e-15);
    }

    #[test]
    fn running_update_fixed_point_and_unit_window() {
        let q0 = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, -0.1, 0.5]);
        let mut st =
            NoiseEstimatorState::new(q0.clone(), DMatrix::identity(1, 1), 1.0, &QParameterization::Full, true)
                .unwrap();
        let qe = DMatrix::from_row_slice(2, 2, &[2.0, -1.0, 0.0, -0.5]);
        update_noise_running(&mut st, &qe, &DMatrix::identity(1, 1));
        assert_eq!(st.q_est, qe);
        st.window_tau = 7.0;
        update_noise_running(&mut st, &qe, &DMatrix::identity(1, 1));
        assert_eq!(st.q_est, qe);
        // The used copy is projected; the running estimate is not.
        assert!(crate::linalg::min_sym_eigenvalue(&st.q_used()) >= -1e-14);
        assert_eq!(st.q_est, qe);
    }

    #[test]
    fn basis_matches_cyclic_distance() {
        let b = cyclic_basis(8);
        assert_eq!(b.len(), 4);
        for (r, m) in b.iter().enumerate() {
            for i in 0..8 {
                for j in 0..8 {
                    let d = (i as isize - j as isize).rem_euclid(8) as usize;
                    let dist = d.min(8 - d);
                    assert_eq!(m[(i, j)], if dist == r { 1.0 } else { 0.0 });
                }
            }
        }
    }
}
