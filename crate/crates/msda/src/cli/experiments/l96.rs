//! Two-layer Lorenz-96 experiments: the ε sweep, online vs offline closures, and free-run
//! climate statistics.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::Ctx;
use crate::cli::config::{CheckContext, Diagnostics, ParamsSpec};
use crate::cli::output::{gnuplot_preamble, Cell, ExperimentOutput, PlotScript, Table};
use crate::diagnostics::{autocorrelation, correlation_time, equilibrium_pdf, DensityMethod};
use crate::enkf::{
    online_fit, run_adaptive_enkf, AdaptiveRun, EtkfConfig, L96Forecast, L96ForecastKind,
    NoiseEstimatorState, NoiseSetting, OnlineFit, QParameterization,
};
use crate::error::Result;
use crate::models::{
    generate_observations, integrate_cubic_ar1, integrate_l96_rk4, integrate_two_layer,
    Ar1Convention, L96Model, L96Params, ReducedL96Params, Trajectory,
};
use crate::offline_fit::{model_error_series, offline_cubic_ar1_fit, offline_two_param_fit, CubicAr1Fit, TwoParamFit};
use crate::rng::{self, derive_seed};

/// Truth and observations of a two-layer twin experiment.
#[derive(Debug, Clone)]
pub struct L96Twin {
    pub params: L96Params,
    pub dt_obs: f64,
    /// Full state at time zero, after spin-up.
    pub initial: DVector<f64>,
    /// Slow state at each observation time.
    pub truth: Vec<DVector<f64>>,
    pub obs: Vec<DVector<f64>>,
    /// Full state at the last observation.
    pub final_state: DVector<f64>,
}

impl L96Twin {
    pub fn obs_noise_level(&self) -> f64 {
        self.params.r_obs.diagonal().mean().sqrt()
    }

    pub fn initial_slow(&self) -> DVector<f64> {
        self.initial.rows(0, self.params.n_slow).into_owned()
    }
}

/// Spins the two-layer model up from a random state, then records `cycles` observation
/// intervals of `substeps` RK4 steps each.
pub fn l96_twin(p: &L96Params, dt_obs: f64, substeps: usize, cycles: usize, spinup_time: f64, seed: u64) -> Result<L96Twin> {
    let dt = dt_obs / substeps as f64;
    let mut r0 = rng::stream(seed, "l96-initial");
    let s0 = DVector::from_fn(p.n_total(), |_, _| rng::normal(&mut r0));
    let spin_steps = ((spinup_time / dt).round() as usize).max(1);
    let spin = integrate_two_layer(p, &s0, dt, spin_steps, spin_steps)?;
    let run = integrate_two_layer(p, &spin.final_state, dt, cycles * substeps, substeps)?;
    let obs = generate_observations(&run.slow, &p.obs_indices, &p.r_obs, 1, seed)?;
    Ok(L96Twin {
        params: p.clone(),
        dt_obs,
        initial: spin.final_state,
        truth: run.slow.states[1..].to_vec(),
        obs: obs.values,
        final_state: run.final_state,
    })
}

/// Reduced-filter variants; `D` marks an augmented damping parameter, `SFA` an estimated
/// additive noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum SweepFilter {
    Rdf,
    Rdfd,
    Rsfa,
    Rsfad,
    /// The two-layer model itself as the forecast model.
    Full,
}

impl SweepFilter {
    pub fn label(self) -> &'static str {
        match self {
            Self::Rdf => "RDF",
            Self::Rdfd => "RDFD",
            Self::Rsfa => "RSFA",
            Self::Rsfad => "RSFAD",
            Self::Full => "FULL",
        }
    }

    fn augmented(self) -> bool {
        matches!(self, Self::Rdfd | Self::Rsfad)
    }

    fn estimates_noise(self) -> bool {
        matches!(self, Self::Rsfa | Self::Rsfad)
    }
}

/// Default estimator windows of the sweep and the sparse experiments.
pub const SWEEP_TAU: f64 = 5000.0;
pub const SPARSE_TAU: f64 = 1500.0;

/// Filter settings shared by the Lorenz-96 experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterSettings {
    /// Averaging window of the noise estimator, in steps; per-experiment default when unset.
    pub tau: Option<f64>,
    pub estimate_r: bool,
    pub alpha_init: f64,
    pub alpha_init_spread: f64,
    pub init_spread: f64,
    /// RK4 steps of the reduced forecast per observation interval. The sparse experiments
    /// derive it from `reduced_dt` instead.
    pub reduced_substeps: usize,
    /// Ensemble size override; per-variant default when unset.
    pub ensemble_size: Option<usize>,
}

impl Default for FilterSettings {
    fn default() -> Self {
        Self {
            tau: None,
            estimate_r: true,
            alpha_init: 0.0,
            alpha_init_spread: 0.1,
            init_spread: 1.0,
            reduced_substeps: 1,
            ensemble_size: None,
        }
    }
}

impl FilterSettings {
    fn with_default_tau(&self, tau: f64) -> Self {
        Self { tau: Some(self.tau.unwrap_or(tau)), ..self.clone() }
    }

    fn check(&self, diag: &mut Diagnostics) {
        if matches!(self.tau, Some(t) if !(t >= 1.0)) {
            diag.error("params.filter.tau must be at least 1");
        }
        if !(self.alpha_init_spread >= 0.0) || !(self.init_spread >= 0.0) {
            diag.error("params.filter spreads must be nonnegative");
        }
        if self.reduced_substeps == 0 {
            diag.error("params.filter.reduced_substeps must be positive");
        }
        if matches!(self.ensemble_size, Some(e) if e < 2) {
            diag.error("params.filter.ensemble_size must be at least 2");
        }
    }
}

/// Runs one filter variant on a twin. Full-Q estimation needs every slow site observed,
/// otherwise the cyclic parameterization is used.
pub fn run_sweep_filter(twin: &L96Twin, filter: SweepFilter, fs: &FilterSettings, seed: u64) -> Result<AdaptiveRun> {
    let p = &twin.params;
    let n = p.n_slow;
    let m = p.obs_indices.len();
    let (model, x0, default_e) = match filter {
        SweepFilter::Full => {
            let steps = 10;
            let model = L96Forecast {
                kind: L96ForecastKind::TwoLayer(p.clone()),
                n_slow: n,
                dt: twin.dt_obs / steps as f64,
                steps,
            };
            (model, twin.initial.clone(), 2 * p.n_total())
        }
        _ => {
            let model = L96Forecast {
                kind: L96ForecastKind::Reduced { forcing: p.forcing },
                n_slow: n,
                dt: twin.dt_obs / fs.reduced_substeps as f64,
                steps: fs.reduced_substeps,
            };
            (model, twin.initial_slow(), 2 * n + if filter.augmented() { 2 } else { 0 })
        }
    };
    let cfg = EtkfConfig {
        ensemble_size: fs.ensemble_size.unwrap_or(default_e),
        obs_indices: p.obs_indices.clone(),
        augment_alpha: filter.augmented(),
        alpha_init: fs.alpha_init,
        alpha_init_spread: fs.alpha_init_spread,
        init_spread: fs.init_spread,
        seed,
    };
    let noise = if filter.estimates_noise() {
        let param = if m == n { QParameterization::Full } else { QParameterization::Cyclic };
        NoiseSetting::Adaptive(NoiseEstimatorState::new(DMatrix::zeros(n, n), p.r_obs.clone(), fs.tau.unwrap_or(SWEEP_TAU), &param, fs.estimate_r)?)
    } else {
        NoiseSetting::Fixed { q: DMatrix::zeros(n, n), r: p.r_obs.clone() }
    };
    run_adaptive_enkf(&model, &cfg, noise, &twin.obs, &twin.truth, &x0, twin.obs_noise_level())
}

/// Reduced filter with a fixed two-parameter closure `α`, `σ̂ dW`.
pub fn run_fitted_filter(twin: &L96Twin, alpha: f64, sigma_hat: f64, reduced_dt: f64, ensemble: usize, seed: u64) -> Result<AdaptiveRun> {
    let p = &twin.params;
    let n = p.n_slow;
    let steps = ((twin.dt_obs / reduced_dt).round() as usize).max(1);
    let model = L96Forecast {
        kind: L96ForecastKind::StochasticLinear { forcing: p.forcing, sigma_hat },
        n_slow: n,
        dt: twin.dt_obs / steps as f64,
        steps,
    };
    let cfg = EtkfConfig {
        ensemble_size: ensemble,
        obs_indices: p.obs_indices.clone(),
        augment_alpha: false,
        alpha_init: alpha,
        alpha_init_spread: 0.0,
        init_spread: 1.0,
        seed,
    };
    let noise = NoiseSetting::Fixed { q: DMatrix::zeros(n, n), r: p.r_obs.clone() };
    run_adaptive_enkf(&model, &cfg, noise, &twin.obs, &twin.truth, &twin.initial_slow(), twin.obs_noise_level())
}

fn trace_table(name: String, run: &AdaptiveRun, stride: usize) -> Table {
    let mut t = Table::with_columns(
        &name,
        ["step", "rmse", "consistency", "alpha_mean", "tr_q", "tr_r"].iter().map(|s| s.to_string()).collect(),
    );
    for s in run.steps.iter().step_by(stride.max(1)) {
        t.push(vec![
            s.step.into(),
            s.sq_error.sqrt().into(),
            s.consistency.unwrap_or(f64::INFINITY).into(),
            s.alpha_mean.into(),
            s.tr_q.into(),
            s.tr_r.into(),
        ]);
    }
    t
}

/// Observation interval and truth step of the sweep at one ε.
pub fn sweep_intervals(eps: f64) -> (f64, usize) {
    (0.01f64.min(eps / 10.0), 10)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Fig5Params {
    pub eps: Vec<f64>,
    pub filters: Vec<SweepFilter>,
    pub spinup_time: f64,
    /// Every `trace_stride`-th step goes to the per-run trace tables; 0 disables them.
    pub trace_stride: usize,
    pub filter: FilterSettings,
}

impl Default for Fig5Params {
    fn default() -> Self {
        Self {
            eps: (0..=7).map(|k| 0.5f64.powi(k)).collect(),
            filters: vec![SweepFilter::Rdf, SweepFilter::Rdfd, SweepFilter::Rsfa, SweepFilter::Rsfad],
            spinup_time: 5.0,
            trace_stride: 10,
            filter: FilterSettings::default(),
        }
    }
}

impl ParamsSpec for Fig5Params {
    fn check(&self, _ctx: &CheckContext<'_>, diag: &mut Diagnostics) {
        if self.eps.is_empty() || self.eps.iter().any(|e| !(*e > 0.0) || !e.is_finite()) {
            diag.error("params.eps must be a non-empty list of positive values");
        }
        if self.filters.is_empty() {
            diag.error("params.filters must name at least one filter");
        }
        if !(self.spinup_time >= 0.0) {
            diag.error("params.spinup_time must be nonnegative");
        }
        self.filter.check(diag);
    }
}

/// RDF/RSFAD scores over the sweep, as used by the summary flags.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub eps: f64,
    pub filter: SweepFilter,
    pub rmse: f64,
    pub consistency: f64,
    pub alpha_mean: f64,
    /// Scored steps left out of the consistency mean for a singular covariance.
    pub excluded: usize,
    pub obs_noise: f64,
}

pub fn sweep_point(eps: f64, filters: &[SweepFilter], fs: &FilterSettings, cycles: usize, burn_in: usize, spinup: f64, seed: u64) -> Result<Vec<(SweepRow, AdaptiveRun)>> {
    let p = L96Params::sweep_regime(eps);
    let (dt_obs, sub) = sweep_intervals(eps);
    let twin = l96_twin(&p, dt_obs, sub, cycles, spinup, derive_seed(seed, "twin"))?;
    let mut rows = Vec::with_capacity(filters.len());
    for &f in filters {
        let run = run_sweep_filter(&twin, f, fs, derive_seed(seed, &format!("filter/{}", f.label())))?;
        let s = run.summary(burn_in)?;
        rows.push((
            SweepRow { eps, filter: f, rmse: s.rmse, consistency: s.consistency, alpha_mean: s.alpha_mean, excluded: s.excluded, obs_noise: twin.obs_noise_level() },
            run,
        ));
    }
    Ok(rows)
}

pub fn run_fig5(ctx: &Ctx<'_>, prm: &Fig5Params) -> Result<ExperimentOutput> {
    let run = ctx.run();
    let mut out = ExperimentOutput::default();
    let mut t = Table::new("fig5", &["epsilon", "filter", "rmse", "consistency", "alpha_mean", "tr_q", "tr_r", "excluded", "obs_noise"]);
    let mut rows = Vec::new();
    for (i, &eps) in prm.eps.iter().enumerate() {
        let seed = derive_seed(ctx.seed, &format!("fig5/eps/{i}"));
        for (r, ar) in sweep_point(eps, &prm.filters, &prm.filter, run.cycles, run.burn_in, prm.spinup_time, seed)? {
            let last = ar.steps.last().expect("non-empty run");
            t.push(vec![
                eps.into(),
                r.filter.label().into(),
                r.rmse.into(),
                r.consistency.into(),
                r.alpha_mean.into(),
                last.tr_q.into(),
                last.tr_r.into(),
                r.excluded.into(),
                r.obs_noise.into(),
            ]);
            if prm.trace_stride > 0 {
                out.tables.push(trace_table(format!("traces/eps{i}_{}", r.filter.label().to_lowercase()), &ar, prm.trace_stride));
            }
            rows.push(r);
        }
    }
    let pick = |f: SweepFilter| rows.iter().filter(move |r| r.filter == f);
    if prm.filters.contains(&SweepFilter::Rsfad) {
        out.flag("rsfad_consistency_in_band", pick(SweepFilter::Rsfad).all(|r| (0.5..=2.0).contains(&r.consistency)));
    }
    if prm.filters.contains(&SweepFilter::Rdf) {
        out.flag("rdf_consistency_above_100", pick(SweepFilter::Rdf).filter(|r| r.eps >= 0.25).all(|r| r.consistency > 100.0));
        out.flag("rdf_rmse_above_noise", pick(SweepFilter::Rdf).filter(|r| r.eps >= 0.125).all(|r| r.rmse > r.obs_noise));
    }
    out.tables.insert(0, t);
    let mut gp = gnuplot_preamble("Lorenz-96 sweep", "fig5");
    gp += "set logscale x 2\nset xlabel 'epsilon'\nset multiplot layout 1,2\nset ylabel 'RMSE'\n";
    gp += "plot for [f in 'RDF RDFD RSFA RSFAD FULL'] 'fig5.csv' using 1:(strcol(2) eq f ? $3 : NaN) with linespoints title f\n";
    gp += "set logscale y\nset ylabel 'consistency'\n";
    gp += "plot for [f in 'RDF RDFD RSFA RSFAD FULL'] 'fig5.csv' using 1:(strcol(2) eq f ? $4 : NaN) with linespoints title f\nunset multiplot\n";
    out.plots.push(PlotScript { name: "fig5".into(), body: gp });
    Ok(out)
}

/// Settings of the sparse-observation experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SparseSettings {
    pub dt_obs: f64,
    pub truth_dt: f64,
    pub reduced_dt: f64,
    pub spinup_time: f64,
    /// Samples per site of the noiseless run behind the offline regression.
    pub offline_samples: usize,
    /// Truth steps between regression samples.
    pub offline_stride: usize,
    pub ar1_convention: Ar1Convention,
    /// Ensemble size of the fixed-closure filters.
    pub fitted_ensemble: usize,
    pub filter: FilterSettings,
}

impl Default for SparseSettings {
    fn default() -> Self {
        Self {
            dt_obs: 0.05,
            truth_dt: 0.001,
            reduced_dt: 0.005,
            spinup_time: 10.0,
            offline_samples: 200_000,
            offline_stride: 5,
            ar1_convention: Ar1Convention::PaperLiteral,
            fitted_ensemble: 16,
            filter: FilterSettings::default(),
        }
    }
}

impl SparseSettings {
    fn check(&self, diag: &mut Diagnostics) {
        for (name, dt) in [("truth_dt", self.truth_dt), ("reduced_dt", self.reduced_dt)] {
            if !(dt > 0.0) {
                diag.error(format!("params.{name} must be positive"));
                continue;
            }
            let k = (self.dt_obs / dt).round();
            if k < 1.0 || (k * dt - self.dt_obs).abs() > 1e-9 * self.dt_obs {
                diag.error(format!("params.dt_obs ({}) must be a multiple of params.{name} ({dt})", self.dt_obs));
            }
        }
        if self.offline_samples < 1000 || self.offline_stride == 0 {
            diag.error("params.offline_samples must be at least 1000 and params.offline_stride positive");
        }
        if self.fitted_ensemble < 2 {
            diag.error("params.fitted_ensemble must be at least 2");
        }
        self.filter.check(diag);
    }

    fn substeps(&self) -> usize {
        (self.dt_obs / self.truth_dt).round() as usize
    }
}

/// Offline regressions on a noiseless truth run continuing from `state`.
#[derive(Debug, Clone)]
pub struct OfflineFits {
    pub two_param: TwoParamFit,
    pub cubic_ar1: CubicAr1Fit,
    /// Slow variables of the regression run, sampled every `sample_dt`.
    pub slow: Trajectory,
    pub sample_dt: f64,
}

pub fn offline_fits(p: &L96Params, state: &DVector<f64>, s: &SparseSettings) -> Result<OfflineFits> {
    let run = integrate_two_layer(p, state, s.truth_dt, s.offline_samples * s.offline_stride, s.offline_stride)?;
    let sample_dt = s.truth_dt * s.offline_stride as f64;
    let series = model_error_series(&run.slow, p.forcing, sample_dt)?;
    Ok(OfflineFits {
        two_param: offline_two_param_fit(&series)?,
        cubic_ar1: offline_cubic_ar1_fit(&series, s.ar1_convention)?,
        slow: run.slow,
        sample_dt,
    })
}

#[derive(Debug, Clone)]
pub struct OnlineOfflineResult {
    pub twin: L96Twin,
    pub online: OnlineFit,
    pub offline: OfflineFits,
    /// `(label, run)` for RSFAD, the two fitted filters and, optionally, the full model.
    pub runs: Vec<(String, AdaptiveRun)>,
}

pub fn online_vs_offline(s: &SparseSettings, cycles: usize, burn_in: usize, include_full: bool, seed: u64) -> Result<OnlineOfflineResult> {
    let p = L96Params::sparse_regime();
    let twin = l96_twin(&p, s.dt_obs, s.substeps(), cycles, s.spinup_time, derive_seed(seed, "twin"))?;
    let offline = offline_fits(&p, &twin.final_state, s)?;
    let fs = FilterSettings { reduced_substeps: ((s.dt_obs / s.reduced_dt).round() as usize).max(1), ..s.filter.with_default_tau(SPARSE_TAU) };
    let rsfad = run_sweep_filter(&twin, SweepFilter::Rsfad, &fs, derive_seed(seed, "filter/RSFAD"))?;
    let online = online_fit(&rsfad, s.dt_obs, burn_in)?;
    let on = run_fitted_filter(&twin, online.alpha, online.sigma_hat, s.reduced_dt, s.fitted_ensemble, derive_seed(seed, "filter/online"))?;
    let tp = offline.two_param;
    let off = run_fitted_filter(&twin, tp.b1, tp.sigma_hat, s.reduced_dt, s.fitted_ensemble, derive_seed(seed, "filter/offline"))?;
    let mut runs = vec![("RSFAD".to_string(), rsfad), ("online-fit".to_string(), on), ("offline-fit".to_string(), off)];
    if include_full {
        runs.push(("full".to_string(), run_sweep_filter(&twin, SweepFilter::Full, &fs, derive_seed(seed, "filter/FULL"))?));
    }
    Ok(OnlineOfflineResult { twin, online, offline, runs })
}

fn fits_table(online: &OnlineFit, off: &OfflineFits) -> Table {
    let mut t = Table::new("fits", &["fit", "coefficient", "value", "stderr"]);
    let nan = f64::NAN;
    t.push(vec!["online".into(), "alpha".into(), online.alpha.into(), nan.into()]);
    t.push(vec!["online".into(), "sigma_hat".into(), online.sigma_hat.into(), nan.into()]);
    t.push(vec!["offline".into(), "b1".into(), off.two_param.b1.into(), off.two_param.b1_stderr.into()]);
    t.push(vec!["offline".into(), "sigma_hat".into(), off.two_param.sigma_hat.into(), nan.into()]);
    let c = &off.cubic_ar1.cubic;
    for k in 0..4 {
        t.push(vec!["cubic".into(), format!("b{k}").into(), c.coeffs[k].into(), c.stderr[k].into()]);
    }
    t.push(vec!["cubic".into(), "residual_std".into(), c.residual_std.into(), nan.into()]);
    t.push(vec!["cubic".into(), "phi".into(), off.cubic_ar1.ar1.phi.into(), nan.into()]);
    t.push(vec!["cubic".into(), "sigma_hat".into(), off.cubic_ar1.ar1.sigma_hat.into(), nan.into()]);
    t
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Fig6Params {
    pub include_full: bool,
    pub trace_stride: usize,
    #[serde(flatten)]
    pub sparse: SparseSettings,
}

impl Default for Fig6Params {
    fn default() -> Self {
        Self { include_full: false, trace_stride: 10, sparse: SparseSettings::default() }
    }
}

impl ParamsSpec for Fig6Params {
    fn check(&self, _ctx: &CheckContext<'_>, diag: &mut Diagnostics) {
        self.sparse.check(diag);
    }
}

pub fn run_fig6(ctx: &Ctx<'_>, prm: &Fig6Params) -> Result<ExperimentOutput> {
    let run = ctx.run();
    let r = online_vs_offline(&prm.sparse, run.cycles, run.burn_in, prm.include_full, derive_seed(ctx.seed, "fig6"))?;
    let mut out = ExperimentOutput::default();
    let noise = r.twin.obs_noise_level();
    let mut t = Table::new("fig6", &["filter", "rmse", "consistency", "obs_noise"]);
    for (label, ar) in &r.runs {
        let s = ar.summary(run.burn_in)?;
        t.push(vec![label.as_str().into(), s.rmse.into(), s.consistency.into(), noise.into()]);
        out.metric(format!("rmse_{label}"), s.rmse);
        out.metric(format!("consistency_{label}"), s.consistency);
        if prm.trace_stride > 0 {
            out.tables.push(trace_table(format!("traces/{label}"), ar, prm.trace_stride));
        }
    }
    out.metric("obs_noise", noise);
    out.metric("online_alpha", r.online.alpha);
    out.metric("online_sigma_hat", r.online.sigma_hat);
    out.metric("offline_b1", r.offline.two_param.b1);
    out.metric("offline_sigma_hat", r.offline.two_param.sigma_hat);
    let rm = |l: &str| out.get_metric(&format!("rmse_{l}")).unwrap_or(f64::NAN);
    let (on, off) = (rm("online-fit"), rm("offline-fit"));
    out.flag("online_below_noise", on < noise);
    out.flag("offline_above_noise", off > noise);
    out.tables.insert(0, t);
    out.tables.insert(1, fits_table(&r.online, &r.offline));
    let mut gp = gnuplot_preamble("Sparse observations: filter RMSE", "fig6");
    gp += "set style data histograms\nset style fill solid\nset ylabel 'RMSE'\n";
    gp += "plot 'fig6.csv' using 2:xtic(1) title 'RMSE', '' using 4 with lines title 'observation noise'\n";
    out.plots.push(PlotScript { name: "fig6".into(), body: gp });
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Fig7Params {
    /// Online closure; estimated with the sparse filter when either is unset.
    pub online_alpha: Option<f64>,
    pub online_sigma_hat: Option<f64>,
    pub online_cycles: usize,
    pub online_burn_in: usize,
    pub bins: usize,
    /// Largest ACF lag, in time units.
    pub max_lag_time: f64,
    #[serde(flatten)]
    pub sparse: SparseSettings,
}

impl Default for Fig7Params {
    fn default() -> Self {
        Self {
            online_alpha: None,
            online_sigma_hat: None,
            online_cycles: 10_000,
            online_burn_in: 3_000,
            bins: 100,
            max_lag_time: 2.0,
            sparse: SparseSettings::default(),
        }
    }
}

impl ParamsSpec for Fig7Params {
    fn check(&self, _ctx: &CheckContext<'_>, diag: &mut Diagnostics) {
        self.sparse.check(diag);
        if self.online_cycles <= self.online_burn_in {
            diag.error(format!(
                "params.online_cycles ({}) must exceed params.online_burn_in ({})",
                self.online_cycles, self.online_burn_in
            ));
        }
        if self.bins == 0 || !(self.max_lag_time > 0.0) {
            diag.error("params.bins and params.max_lag_time must be positive");
        }
    }
}

fn site_series(traj: &Trajectory, skip: usize) -> Vec<Vec<f64>> {
    (0..traj.dim()).map(|i| traj.states[skip..].iter().map(|s| s[i]).collect()).collect()
}

fn mean_acf(sites: &[Vec<f64>], max_lag: usize) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; max_lag + 1];
    for s in sites {
        for (a, v) in acc.iter_mut().zip(autocorrelation(s, max_lag)?) {
            *a += v;
        }
    }
    Ok(acc.into_iter().map(|v| v / sites.len() as f64).collect())
}

pub fn run_fig7(ctx: &Ctx<'_>, prm: &Fig7Params) -> Result<ExperimentOutput> {
    let run = ctx.run();
    let s = &prm.sparse;
    let p = L96Params::sparse_regime();
    let seed = derive_seed(ctx.seed, "fig7");
    let mut out = ExperimentOutput::default();

    let online = match (prm.online_alpha, prm.online_sigma_hat) {
        (Some(alpha), Some(sigma_hat)) => OnlineFit { alpha, sigma_hat },
        _ => online_vs_offline(s, prm.online_cycles, prm.online_burn_in, false, derive_seed(seed, "online"))?.online,
    };

    // The full-model free run doubles as the regression data for the offline closures.
    let twin = l96_twin(&p, s.dt_obs, s.substeps(), 1, s.spinup_time, derive_seed(seed, "full"))?;
    let climate = SparseSettings { offline_samples: run.cycles + run.burn_in, ..s.clone() };
    let offline = offline_fits(&p, &twin.final_state, &climate)?;
    let dt = offline.sample_dt;
    let x0 = offline.slow.states[0].clone();
    let n_steps = run.cycles + run.burn_in;
    let q = |sigma: f64| ReducedL96Params { alpha: 0.0, q_matrix: DMatrix::identity(p.n_slow, p.n_slow) * sigma * sigma, beta_matrix: DMatrix::zeros(p.n_slow, p.n_slow) };
    let on_p = ReducedL96Params { alpha: online.alpha, ..q(online.sigma_hat) };
    let two = offline.two_param;
    let off_p = ReducedL96Params { alpha: two.b1, ..q(two.sigma_hat) };
    let on_run = integrate_l96_rk4(L96Model::Reduced { forcing: p.forcing, params: &on_p }, &x0, dt, n_steps, 1, Some(derive_seed(seed, "online-run")))?;
    let off_run = integrate_l96_rk4(L96Model::Reduced { forcing: p.forcing, params: &off_p }, &x0, dt, n_steps, 1, Some(derive_seed(seed, "offline-run")))?;
    let cub_run = integrate_cubic_ar1(&offline.cubic_ar1.params(), s.ar1_convention, p.forcing, &x0, dt, n_steps, 1, derive_seed(seed, "cubic-run"))?;

    let skip = run.burn_in + 1;
    let models: [(&str, Vec<Vec<f64>>); 4] = [
        ("full", site_series(&offline.slow, skip)),
        ("online", site_series(&on_run, skip)),
        ("offline", site_series(&off_run, skip)),
        ("cubic_ar1", site_series(&cub_run, skip)),
    ];
    let pooled: Vec<Vec<f64>> = models.iter().map(|(_, v)| v.concat()).collect();
    let (lo, hi) = pooled[0].iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let pad = 0.1 * (hi - lo);
    let range = (lo - pad, hi + pad);
    let pdfs: Vec<_> = pooled.iter().map(|v| equilibrium_pdf(v, prm.bins, range, DensityMethod::Histogram)).collect::<Result<_>>()?;
    let max_lag = ((prm.max_lag_time / dt).round() as usize).max(1);
    let acfs: Vec<Vec<f64>> = models.iter().map(|(_, v)| mean_acf(v, max_lag)).collect::<Result<_>>()?;

    let mut pdf_t = Table::new("pdf", &["bin_center", "full", "online", "offline", "cubic_ar1"]);
    for b in 0..prm.bins {
        let mut row: Vec<Cell> = vec![pdfs[0].centers[b].into()];
        row.extend(pdfs.iter().map(|d| Cell::Num(d.density[b])));
        pdf_t.push(row);
    }
    let mut acf_t = Table::new("acf", &["lag", "time", "full", "online", "offline", "cubic_ar1"]);
    for k in 0..=max_lag {
        let mut row: Vec<Cell> = vec![k.into(), (k as f64 * dt).into()];
        row.extend(acfs.iter().map(|a| Cell::Num(a[k])));
        acf_t.push(row);
    }
    for (i, (name, _)) in models.iter().enumerate() {
        out.metric(format!("corr_time_{name}"), correlation_time(&acfs[i], dt));
        if i > 0 {
            out.metric(format!("l1_pdf_{name}"), pdfs[0].l1_distance(&pdfs[i])?);
            let d = acfs[0].iter().zip(&acfs[i]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            out.metric(format!("max_acf_diff_{name}"), d);
        }
    }
    out.metric("online_alpha", online.alpha);
    out.metric("online_sigma_hat", online.sigma_hat);
    out.tables.push(pdf_t);
    out.tables.push(acf_t);
    out.tables.push(fits_table(&online, &offline));
    let mut gp = gnuplot_preamble("Free-run climate of the slow variables", "fig7");
    gp += "set multiplot layout 1,2\nset xlabel 'x'\nset ylabel 'density'\n";
    gp += "plot for [c=2:5] 'pdf.csv' using 1:c with lines\n";
    gp += "set xlabel 'lag time'\nset ylabel 'ACF'\nplot for [c=3:6] 'acf.csv' using 2:c with lines\nunset multiplot\n";
    out.plots.push(PlotScript { name: "fig7".into(), body: gp });
    Ok(out)
}
