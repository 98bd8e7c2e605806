//! Moment-filter experiments on the stochastically forced complex mode.

use nalgebra::DVector;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Ctx;
use crate::cli::config::{CheckContext, Diagnostics, ParamsSpec};
use crate::cli::output::{gnuplot_preamble, Cell, ExperimentOutput, PlotScript, Table};
use crate::diagnostics::{complex_autocorrelation, complex_correlation_time};
use crate::error::{Error, Result};
use crate::models::{integrate_sde_em_strided, ReducedSpekfParams, SpekfParams};
use crate::rng::{self, derive_seed};
use crate::spekf_filters::{
    mc_variance_oracle, prior_variance_evolution, reduced_params, rspekf_moment_filter,
    spekf_moment_filter, spekf_twin, stability_exponents, FilterMode, MomentFilterRun,
    MomentState, ProductGaussianInit, SchemeTag, SpekfScores, SpekfTwin, MIN_MC_SAMPLES,
};

fn regimes(preset: &str, model: Option<SpekfParams>) -> Vec<(String, SpekfParams)> {
    if let Some(m) = model {
        return vec![("custom".into(), m)];
    }
    match preset {
        "both" => vec![("regime1".into(), SpekfParams::regime1()), ("regime2".into(), SpekfParams::regime2())],
        p => vec![(p.to_string(), SpekfParams::preset(p).unwrap_or_else(SpekfParams::regime1))],
    }
}

fn check_model(preset: &str, model: &Option<SpekfParams>, diag: &mut Diagnostics) {
    if let Some(m) = model {
        if preset == "both" {
            diag.error("params.model replaces a single regime; choose preset regime1 or regime2");
        }
        if let Err(e) = m.validate() {
            diag.error(format!("params.model: {e}"));
        }
    }
}

fn check_steps(dt_obs: f64, dt_model: f64, diag: &mut Diagnostics) {
    if !(dt_obs > 0.0) || !(dt_model > 0.0) {
        diag.error("params.dt_obs and params.dt_model must be positive");
    } else {
        let k = (dt_obs / dt_model).round();
        if k < 1.0 || (k * dt_model - dt_obs).abs() > 1e-9 * dt_obs {
            diag.error(format!("params.dt_obs ({dt_obs}) must be a multiple of params.dt_model ({dt_model})"));
        }
    }
}

fn equilibrium_start(sp: &SpekfParams) -> MomentState {
    MomentState { mean: Complex64::new(0.0, 0.0), var: ProductGaussianInit::equilibrium(sp).u_var }
}

/// Labels of the filters scored per regime; `obs` is the observation-only baseline.
pub const TABLE1_FILTERS: [&str; 6] = ["obs", "SPEKF", "RSF", "RSFA", "RSFC", "RSPEKF"];

/// The filters run on one twin, in [`TABLE1_FILTERS`] order after `obs`.
pub fn moment_filter_runs(sp: &SpekfParams, twin: &SpekfTwin, mode: FilterMode) -> Result<Vec<(String, MomentFilterRun)>> {
    let init = equilibrium_start(sp);
    let mut runs = vec![("SPEKF".to_string(), spekf_moment_filter(sp, &twin.obs, mode, init)?)];
    for s in SchemeTag::ALL {
        let rp = reduced_params(sp, s)?;
        runs.push((s.label().to_string(), rspekf_moment_filter(&rp, &twin.obs, mode, init)?));
    }
    Ok(runs)
}

/// RMSE/consistency for every filter on one regime, the observation baseline first.
pub fn table1_regime(
    sp: &SpekfParams,
    dt_obs: f64,
    dt_model: f64,
    mode: FilterMode,
    cycles: usize,
    burn_in: usize,
    seed: u64,
) -> Result<Vec<(String, SpekfScores)>> {
    let twin = spekf_twin(sp, dt_obs, cycles, dt_model, seed)?;
    let zs: Vec<Complex64> = twin.obs.values.iter().map(|v| Complex64::new(v[0], v[1])).collect();
    let n = (cycles - burn_in) as f64;
    let obs_mse = twin.truth_u[burn_in..].iter().zip(&zs[burn_in..]).map(|(u, z)| (u - z).norm_sqr()).sum::<f64>() / n;
    let mut rows = vec![(
        "obs".to_string(),
        SpekfScores { rmse: obs_mse.sqrt(), consistency: f64::NAN, mean_var: sp.r_obs },
    )];
    for (name, run) in moment_filter_runs(sp, &twin, mode)? {
        rows.push((name, run.scores(&twin.truth_u, burn_in)?));
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Table1Params {
    pub dt_obs: f64,
    pub dt_model: f64,
    pub mode: FilterMode,
    pub model: Option<SpekfParams>,
}

impl Default for Table1Params {
    fn default() -> Self {
        Self { dt_obs: 0.5, dt_model: 0.005, mode: FilterMode::Discrete, model: None }
    }
}

impl ParamsSpec for Table1Params {
    fn check(&self, ctx: &CheckContext<'_>, diag: &mut Diagnostics) {
        check_model(ctx.preset, &self.model, diag);
        check_steps(self.dt_obs, self.dt_model, diag);
    }
}

fn score(rows: &[(String, SpekfScores)], name: &str) -> SpekfScores {
    rows.iter().find(|r| r.0 == name).map(|r| r.1).expect("filter present")
}

pub fn run_table1(ctx: &Ctx<'_>, prm: &Table1Params) -> Result<ExperimentOutput> {
    let run = ctx.run();
    let mut out = ExperimentOutput::default();
    let mut t = Table::new("table1", &["regime", "filter", "rmse", "consistency", "mean_var"]);
    for (name, sp) in regimes(ctx.preset, prm.model) {
        let seed = derive_seed(ctx.seed, &format!("table1/{name}"));
        let rows = table1_regime(&sp, prm.dt_obs, prm.dt_model, prm.mode, run.cycles, run.burn_in, seed)?;
        for (f, s) in &rows {
            t.push(vec![name.as_str().into(), f.as_str().into(), s.rmse.into(), s.consistency.into(), s.mean_var.into()]);
            out.metric(format!("rmse_{}_{name}", f.to_lowercase()), s.rmse);
        }
        let r = |f| score(&rows, f).rmse;
        out.flag(
            format!("ordering_{name}"),
            r("RSPEKF") <= r("SPEKF") && r("SPEKF") < r("RSFA") && r("RSFA") < r("RSF"),
        );
        out.metric(format!("consistency_rsf_{name}"), score(&rows, "RSF").consistency);
    }
    out.tables.push(t);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Fig2Params {
    pub dt_obs: f64,
    pub dt_model: f64,
    pub mode: FilterMode,
    /// Cycles after burn-in written to the series table.
    pub window: usize,
    pub model: Option<SpekfParams>,
}

impl Default for Fig2Params {
    fn default() -> Self {
        Self { dt_obs: 0.5, dt_model: 0.005, mode: FilterMode::Discrete, window: 200, model: None }
    }
}

impl ParamsSpec for Fig2Params {
    fn check(&self, ctx: &CheckContext<'_>, diag: &mut Diagnostics) {
        check_model(ctx.preset, &self.model, diag);
        check_steps(self.dt_obs, self.dt_model, diag);
        if self.window == 0 {
            diag.error("params.window must be positive");
        }
        if let Some(r) = ctx.run {
            if r.burn_in + self.window > r.cycles {
                diag.error(format!(
                    "burn_in ({}) + params.window ({}) exceeds cycles ({})",
                    r.burn_in, self.window, r.cycles
                ));
            }
        }
    }
}

pub fn run_fig2(ctx: &Ctx<'_>, prm: &Fig2Params) -> Result<ExperimentOutput> {
    let run = ctx.run();
    let (name, sp) = regimes(ctx.preset, prm.model).remove(0);
    let twin = spekf_twin(&sp, prm.dt_obs, run.cycles, prm.dt_model, derive_seed(ctx.seed, &format!("fig2/{name}")))?;
    let runs = moment_filter_runs(&sp, &twin, prm.mode)?;
    let mut cols: Vec<String> = ["time", "truth_re", "truth_im", "obs_re"].iter().map(|s| s.to_string()).collect();
    for (f, _) in &runs {
        let f = f.to_lowercase();
        cols.push(format!("mean_re_{f}"));
        cols.push(format!("var_{f}"));
    }
    let mut series = Table::with_columns("fig2", cols);
    for k in run.burn_in..run.burn_in + prm.window {
        let mut row: Vec<Cell> = vec![
            twin.obs.times[k].into(),
            twin.truth_u[k].re.into(),
            twin.truth_u[k].im.into(),
            twin.obs.values[k][0].into(),
        ];
        for (_, r) in &runs {
            row.push(r.posterior[k].mean.re.into());
            row.push(r.posterior[k].var.into());
        }
        series.push(row);
    }
    let mut out = ExperimentOutput::default();
    let mut summary = Table::new("summary", &["filter", "rmse", "consistency", "mean_var", "clipped"]);
    for (f, r) in &runs {
        let s = r.scores(&twin.truth_u, run.burn_in)?;
        summary.push(vec![f.as_str().into(), s.rmse.into(), s.consistency.into(), s.mean_var.into(), r.clipped.into()]);
        out.metric(format!("mean_var_{}", f.to_lowercase()), s.mean_var);
    }
    out.tables.push(series);
    out.tables.push(summary);
    let mut gp = gnuplot_preamble(&format!("Posterior variance, {name}"), "fig2");
    gp += "set xlabel 't'\nset ylabel 'posterior variance'\n";
    gp += &format!("plot for [c=6:{}:2] 'fig2.csv' using 1:c with lines\n", 4 + 2 * runs.len());
    out.plots.push(PlotScript { name: "fig2".into(), body: gp });
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Fig3Params {
    pub schemes: Vec<SchemeTag>,
    /// Final time; regime-dependent default when unset.
    pub horizon: Option<f64>,
    pub n_out: usize,
    pub mc_samples: usize,
    /// Euler–Maruyama step of the Monte-Carlo truth; regime-dependent default when unset.
    pub mc_dt: Option<f64>,
    pub model: Option<SpekfParams>,
}

impl Default for Fig3Params {
    fn default() -> Self {
        Self {
            schemes: vec![SchemeTag::Rsfc, SchemeTag::Rspekf],
            horizon: None,
            n_out: 20,
            mc_samples: 100_000,
            mc_dt: None,
            model: None,
        }
    }
}

impl Fig3Params {
    /// `(horizon, mc_dt)` with the per-regime defaults filled in.
    pub fn resolved(&self, preset: &str) -> (f64, f64) {
        let (h, dt) = if preset == "regime2" { (3.0, 0.005) } else { (1.0, 0.001) };
        (self.horizon.unwrap_or(h), self.mc_dt.unwrap_or(dt))
    }
}

impl ParamsSpec for Fig3Params {
    fn check(&self, ctx: &CheckContext<'_>, diag: &mut Diagnostics) {
        check_model(ctx.preset, &self.model, diag);
        if self.schemes.is_empty() {
            diag.error("params.schemes must name at least one scheme");
        }
        if self.mc_samples < MIN_MC_SAMPLES {
            diag.error(format!("params.mc_samples must be at least {MIN_MC_SAMPLES}"));
        }
        let (h, dt) = self.resolved(ctx.preset);
        if !(h > 0.0) || !(dt > 0.0) || self.n_out == 0 {
            diag.error("params.horizon, params.mc_dt and params.n_out must be positive");
        } else {
            let per = h / self.n_out as f64 / dt;
            if per.round() < 1.0 || (per - per.round()).abs() > 1e-6 {
                diag.error(format!("params.horizon / params.n_out must be a multiple of params.mc_dt ({dt})"));
            }
        }
        let sp = regimes(ctx.preset, self.model).remove(0).1;
        for &s in &self.schemes {
            if let Ok(x) = stability_exponents(&sp, s) {
                if x > 0.0 {
                    diag.warn(format!(
                        "{} prior covariance is unstable for preset {} (exponent {x:.4} > 0); its variance is expected to blow up",
                        s.label(),
                        ctx.preset
                    ));
                }
            }
        }
    }
}

pub fn run_fig3(ctx: &Ctx<'_>, prm: &Fig3Params) -> Result<ExperimentOutput> {
    let (name, sp) = regimes(ctx.preset, prm.model).remove(0);
    let (horizon, dt) = prm.resolved(ctx.preset);
    let init = ProductGaussianInit::equilibrium(&sp);
    let mc = mc_variance_oracle(&sp, &init, horizon, prm.n_out, dt, prm.mc_samples, derive_seed(ctx.seed, &format!("fig3/{name}")))?;
    let mut cols: Vec<String> = ["time", "var_mc", "stderr_mc"].iter().map(|s| s.to_string()).collect();
    let mut series = Vec::new();
    let mut out = ExperimentOutput::default();
    for &s in &prm.schemes {
        let pv = prior_variance_evolution(&sp, s, &init, horizon, prm.n_out)?;
        let tag = s.label().to_lowercase();
        cols.push(format!("var_{tag}"));
        out.metric(format!("final_error_{tag}"), (mc.var[prm.n_out] - pv.var[prm.n_out]).abs());
        out.metric(format!("exponent_{tag}"), pv.exponent);
        out.flag(format!("unstable_{tag}"), pv.unstable);
        series.push(pv.var);
    }
    out.metric("final_var_mc", mc.var[prm.n_out]);
    out.metric("final_stderr_mc", mc.stderr[prm.n_out]);
    out.metric("horizon", horizon);
    let mut t = Table::with_columns("fig3", cols);
    for k in 0..=prm.n_out {
        let mut row: Vec<Cell> = vec![mc.times[k].into(), mc.var[k].into(), mc.stderr[k].into()];
        row.extend(series.iter().map(|v| Cell::Num(v[k])));
        t.push(row);
    }
    out.tables.push(t);
    let mut gp = gnuplot_preamble(&format!("Prior variance of u, {name}"), "fig3");
    gp += "set xlabel 't'\nset ylabel 'Var(u)'\n";
    gp += &format!("plot 'fig3.csv' using 1:2:3 with yerrorbars, for [c=4:{}] '' using 1:c with lines\n", 3 + series.len());
    out.plots.push(PlotScript { name: "fig3".into(), body: gp });
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Fig4Params {
    pub re_alpha: Vec<f64>,
    pub sigma_sq: Vec<f64>,
    /// Frequency held fixed over the grid; the MSM value when unset.
    pub im_alpha: Option<f64>,
    pub dt_obs: f64,
    pub dt_model: f64,
    pub mode: FilterMode,
    /// Sampling interval and length of the free run used for the MSM statistics.
    pub msm_dt: f64,
    pub msm_samples: usize,
    pub msm_max_lag: usize,
    pub model: Option<SpekfParams>,
}

impl Default for Fig4Params {
    fn default() -> Self {
        Self {
            re_alpha: (1..=20).map(|k| 0.1 * k as f64).collect(),
            sigma_sq: (1..=20).map(|k| 0.25 * k as f64).collect(),
            im_alpha: None,
            dt_obs: 0.5,
            dt_model: 0.005,
            mode: FilterMode::Discrete,
            msm_dt: 0.05,
            msm_samples: 200_000,
            msm_max_lag: 400,
            model: None,
        }
    }
}

impl ParamsSpec for Fig4Params {
    fn check(&self, ctx: &CheckContext<'_>, diag: &mut Diagnostics) {
        check_model(ctx.preset, &self.model, diag);
        check_steps(self.dt_obs, self.dt_model, diag);
        check_steps(self.msm_dt, self.dt_model, diag);
        if self.re_alpha.is_empty() || self.re_alpha.iter().any(|v| !(*v > 0.0)) {
            diag.error("params.re_alpha must be a non-empty list of positive values");
        }
        if self.sigma_sq.is_empty() || self.sigma_sq.iter().any(|v| !(*v >= 0.0)) {
            diag.error("params.sigma_sq must be a non-empty list of nonnegative values");
        }
        if self.msm_max_lag == 0 || self.msm_samples <= 10 * self.msm_max_lag {
            diag.error("params.msm_samples must exceed 10 x params.msm_max_lag > 0");
        }
    }
}

/// Moment-matched damping and noise for `dU = −αU dt + σ dW`: `α = 1/T_c` with the complex
/// correlation time, `σ² = 2 Re(α) Var`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComplexMsm {
    pub alpha: Complex64,
    pub sigma_sq: f64,
    pub variance: f64,
    pub corr_time: Complex64,
}

pub fn complex_msm(series: &[Complex64], dt: f64, max_lag: usize) -> Result<ComplexMsm> {
    let acf = complex_autocorrelation(series, max_lag)?;
    let tc = complex_correlation_time(&acf, dt);
    if !(tc.re > 0.0) {
        return Err(Error::Numerical("correlation time has nonpositive real part".into()));
    }
    let n = series.len() as f64;
    let mean = series.iter().sum::<Complex64>() / n;
    let variance = series.iter().map(|u| (u - mean).norm_sqr()).sum::<f64>() / n;
    let alpha = Complex64::new(1.0, 0.0) / tc;
    Ok(ComplexMsm { alpha, sigma_sq: 2.0 * alpha.re * variance, variance, corr_time: tc })
}

/// Free run of the full system sampled every `sample_dt`, the first tenth discarded.
pub fn spekf_free_run(sp: &SpekfParams, dt: f64, sample_dt: f64, samples: usize, seed: u64) -> Result<Vec<Complex64>> {
    let stride = (sample_dt / dt).round() as usize;
    let spin = samples / 10;
    let init = ProductGaussianInit::equilibrium(sp);
    let mut r0 = rng::stream(seed, "free-run-initial");
    let x0 = DVector::from_vec(vec![
        (init.u_var / 2.0).sqrt() * rng::normal(&mut r0),
        (init.u_var / 2.0).sqrt() * rng::normal(&mut r0),
        (init.b_var / 2.0).sqrt() * rng::normal(&mut r0),
        (init.b_var / 2.0).sqrt() * rng::normal(&mut r0),
        init.gamma_var.sqrt() * rng::normal(&mut r0),
    ]);
    let traj = integrate_sde_em_strided(sp, &x0, dt, (samples + spin) * stride, stride, seed)?;
    Ok(traj.states[spin + 1..].iter().map(|s| Complex64::new(s[0], s[1])).collect())
}

fn ansatz(alpha: Complex64, sigma_sq: f64) -> ReducedSpekfParams {
    ReducedSpekfParams { alpha, beta_sq: 0.0, sigma1_sq: sigma_sq, sigma2_sq: 0.0 }
}

fn ansatz_scores(rp: &ReducedSpekfParams, twin: &SpekfTwin, mode: FilterMode, burn_in: usize) -> Result<SpekfScores> {
    let init = MomentState { mean: Complex64::new(0.0, 0.0), var: (rp.additive_sq() / (2.0 * rp.alpha.re)).max(1e-12) };
    rspekf_moment_filter(rp, &twin.obs, mode, init)?.scores(&twin.truth_u, burn_in)
}

pub fn run_fig4(ctx: &Ctx<'_>, prm: &Fig4Params) -> Result<ExperimentOutput> {
    let run = ctx.run();
    let (name, sp) = regimes(ctx.preset, prm.model).remove(0);
    let free = spekf_free_run(&sp, prm.dt_model, prm.msm_dt, prm.msm_samples, derive_seed(ctx.seed, &format!("fig4/{name}/msm")))?;
    let msm = complex_msm(&free, prm.msm_dt, prm.msm_max_lag)?;
    let im = prm.im_alpha.unwrap_or(msm.alpha.im);
    let twin = spekf_twin(&sp, prm.dt_obs, run.cycles, prm.dt_model, derive_seed(ctx.seed, &format!("fig4/{name}/twin")))?;

    let cells: Vec<(f64, f64)> = prm.re_alpha.iter().flat_map(|&a| prm.sigma_sq.iter().map(move |&s| (a, s))).collect();
    let scores: Vec<SpekfScores> = cells
        .par_iter()
        .map(|&(a, s)| ansatz_scores(&ansatz(Complex64::new(a, im), s), &twin, prm.mode, run.burn_in))
        .collect::<Result<_>>()?;
    let mut grid = Table::new("fig4", &["re_alpha", "sigma_sq", "rmse", "consistency"]);
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for (&(a, s), sc) in cells.iter().zip(&scores) {
        grid.push(vec![a.into(), s.into(), sc.rmse.into(), sc.consistency.into()]);
        if sc.rmse < best.0 {
            best = (sc.rmse, a, s);
        }
    }
    let at_msm = ansatz_scores(&ansatz(msm.alpha, msm.sigma_sq), &twin, prm.mode, run.burn_in)?;
    let rsfa = ansatz_scores(&reduced_params(&sp, SchemeTag::Rsfa)?, &twin, prm.mode, run.burn_in)?;
    let mut m = Table::new(
        "msm",
        &["re_alpha", "im_alpha", "sigma_sq", "variance", "tc_re", "tc_im", "rmse", "consistency"],
    );
    m.push(vec![
        msm.alpha.re.into(),
        msm.alpha.im.into(),
        msm.sigma_sq.into(),
        msm.variance.into(),
        msm.corr_time.re.into(),
        msm.corr_time.im.into(),
        at_msm.rmse.into(),
        at_msm.consistency.into(),
    ]);
    let mut out = ExperimentOutput::default();
    out.metric("msm_re_alpha", msm.alpha.re);
    out.metric("msm_im_alpha", msm.alpha.im);
    out.metric("msm_sigma_sq", msm.sigma_sq);
    out.metric("msm_rmse", at_msm.rmse);
    out.metric("msm_consistency", at_msm.consistency);
    out.metric("best_rmse", best.0);
    out.metric("best_re_alpha", best.1);
    out.metric("best_sigma_sq", best.2);
    out.metric("rsfa_rmse", rsfa.rmse);
    out.tables.push(grid);
    out.tables.push(m);
    let mut gp = gnuplot_preamble(&format!("Reduced filter without multiplicative noise, {name}"), "fig4");
    gp += "set xlabel 'Re alpha'\nset ylabel 'sigma^2'\nset dgrid3d\nset contour base\nunset surface\nset view map\n";
    gp += "set multiplot layout 1,2\nsplot 'fig4.csv' using 1:2:3 with lines title 'RMSE', 'msm.csv' using 1:3:7 with points pt 1 ps 2 title 'MSM'\n";
    gp += "splot 'fig4.csv' using 1:2:4 with lines title 'consistency', 'msm.csv' using 1:3:8 with points pt 1 ps 2 title 'MSM'\nunset multiplot\n";
    out.plots.push(PlotScript { name: "fig4".into(), body: gp });
    Ok(out)
}
