//! Linear two-scale experiments: reduced-filter comparison over ε and the pathwise study.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{slope_or_nan, Ctx};
use crate::cli::config::{CheckContext, Diagnostics, ParamsSpec};
use crate::cli::output::{gnuplot_preamble, Cell, ExperimentOutput, PlotScript, Table};
use crate::error::Result;
use crate::linear_theory::{
    joint_error_stats, optimal_reduced_params, pathwise_convergence_study, s11_expanded,
    solve_riccati_full, solve_riccati_reduced, steady_state_comparison, LinearFilterVariant,
    PathwiseReduced,
};
use crate::models::{generate_observations, integrate_linear_exact, LinearTwoScaleParams};
use crate::rng::derive_seed;

fn halves(from: i32, to: i32) -> Vec<f64> {
    (from..=to).map(|k| 0.5f64.powi(k)).collect()
}

/// Inline replacement for the preset coefficients; ε comes from the sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearModel {
    pub a11: f64,
    pub a12: f64,
    pub a21: f64,
    pub a22: f64,
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub r_obs: f64,
}

fn base_params(preset: &str, model: Option<LinearModel>, eps: f64) -> LinearTwoScaleParams {
    match model {
        Some(m) => LinearTwoScaleParams {
            a11: m.a11,
            a12: m.a12,
            a21: m.a21,
            a22: m.a22,
            sigma_x: m.sigma_x,
            sigma_y: m.sigma_y,
            eps,
            r_obs: m.r_obs,
        },
        None if preset == "appendix-b" => LinearTwoScaleParams::convergence_study(eps),
        None => LinearTwoScaleParams::figure1(eps),
    }
}

fn check_sweep(eps: &[f64], dt_obs: f64, base: impl Fn(f64) -> LinearTwoScaleParams, diag: &mut Diagnostics) {
    if eps.len() < 2 {
        diag.error("params.eps needs at least two values for a slope fit");
    }
    if eps.iter().any(|e| !(*e > 0.0) || !e.is_finite()) {
        diag.error("params.eps values must be positive and finite");
    } else if let Some(&e) = eps.first() {
        if let Err(err) = base(e).validate() {
            diag.error(format!("params.model: {err}"));
        }
    }
    if !(dt_obs > 0.0) {
        diag.error("params.dt_obs must be positive");
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Fig1Params {
    pub eps: Vec<f64>,
    pub dt_obs: f64,
    pub model: Option<LinearModel>,
}

impl Default for Fig1Params {
    fn default() -> Self {
        Self { eps: halves(1, 6), dt_obs: 1.0, model: None }
    }
}

impl ParamsSpec for Fig1Params {
    fn check(&self, ctx: &CheckContext<'_>, diag: &mut Diagnostics) {
        check_sweep(&self.eps, self.dt_obs, |e| base_params(ctx.preset, self.model, e), diag);
    }
}

const FIG1_VARIANTS: [(LinearFilterVariant, &str); 4] = [
    (LinearFilterVariant::Full, "full"),
    (LinearFilterVariant::Rsf, "rsf"),
    (LinearFilterVariant::Rsfa, "rsfa"),
    (LinearFilterVariant::Optimal, "opt"),
];

/// Monte-Carlo MSE and mean reported variance of the four filters at one ε, all run on the
/// same observation stream.
pub fn fig1_point(p: &LinearTwoScaleParams, dt_obs: f64, cycles: usize, burn_in: usize, seed: u64) -> Result<[(f64, f64); 4]> {
    let traj = integrate_linear_exact(p, &DVector::zeros(2), dt_obs, cycles, seed)?;
    let r = DMatrix::from_element(1, 1, p.r_obs);
    let obs = generate_observations(&traj, &[0], &r, 1, seed)?;
    let truth: Vec<f64> = traj.states[1..].iter().map(|s| s[0]).collect();
    let mut out = [(0.0, 0.0); 4];
    for (slot, (v, _)) in out.iter_mut().zip(FIG1_VARIANTS) {
        *slot = crate::linear_theory::run_linear_filter(v, p, &obs)?.scores(&truth, burn_in)?;
    }
    Ok(out)
}

/// Continuous-time steady quantities at optimal reduced parameters, plus the exact discrete
/// steady comparison of the full and optimal filters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TheoryPoint {
    pub s11_exact: f64,
    pub s11_expanded: f64,
    pub s_tilde: f64,
    pub e11: f64,
    pub optimality_residual: f64,
    pub mse_full: f64,
    pub mse_reduced: f64,
    pub consistency: f64,
}

pub fn theory_point(p: &LinearTwoScaleParams, dt_obs: f64) -> Result<TheoryPoint> {
    let full = solve_riccati_full(p)?;
    let rp = optimal_reduced_params(p)?;
    let s_tilde = solve_riccati_reduced(rp.a, rp.sigma_x_sq, p.r_obs)?;
    let j = joint_error_stats(p, &rp)?;
    let c = steady_state_comparison(p, LinearFilterVariant::Full, LinearFilterVariant::Optimal, dt_obs)?;
    Ok(TheoryPoint {
        s11_exact: full.s11,
        s11_expanded: s11_expanded(p)?,
        s_tilde,
        e11: j.e11,
        optimality_residual: j.optimality_residual,
        mse_full: c.mse_a,
        mse_reduced: c.mse_b,
        consistency: c.mse_b / c.cov_b,
    })
}

pub fn run_fig1(ctx: &Ctx<'_>, prm: &Fig1Params) -> Result<ExperimentOutput> {
    let run = ctx.run();
    let mut mc = Table::new(
        "fig1",
        &["epsilon", "mse_full", "mse_rsf", "mse_rsfa", "mse_opt", "cov_full", "cov_rsf", "cov_rsfa", "cov_opt"],
    );
    let mut th = Table::new(
        "theory",
        &["epsilon", "s11_exact", "s11_expanded", "s_tilde", "e11", "optimality_residual", "mse_full", "mse_reduced", "consistency"],
    );
    let mut out = ExperimentOutput::default();
    let (mut d_st, mut d_e, mut d_res, mut d_exp) = (vec![], vec![], vec![], vec![]);
    let (mut rel_mse, mut rel_cov, mut rsf_gap) = (0.0f64, 0.0f64, f64::INFINITY);
    let mut rsfa_over = true;
    for (i, &eps) in prm.eps.iter().enumerate() {
        let p = base_params(ctx.preset, prm.model, eps);
        let s = fig1_point(&p, prm.dt_obs, run.cycles, run.burn_in, derive_seed(ctx.seed, &format!("fig1/eps/{i}")))?;
        let mut row: Vec<Cell> = vec![eps.into()];
        row.extend(s.iter().map(|x| Cell::Num(x.0)));
        row.extend(s.iter().map(|x| Cell::Num(x.1)));
        mc.push(row);
        rel_mse = rel_mse.max(((s[3].0 - s[0].0) / s[0].0).abs());
        rel_cov = rel_cov.max(((s[3].1 - s[0].1) / s[0].1).abs());
        rsf_gap = rsf_gap.min(s[0].1 - s[1].1);
        rsfa_over &= s[2].0 > s[0].0;

        let t = theory_point(&p, prm.dt_obs)?;
        th.push(vec![
            eps.into(),
            t.s11_exact.into(),
            t.s11_expanded.into(),
            t.s_tilde.into(),
            t.e11.into(),
            t.optimality_residual.into(),
            t.mse_full.into(),
            t.mse_reduced.into(),
            t.consistency.into(),
        ]);
        d_st.push((t.s_tilde - t.s11_exact).abs());
        d_e.push((t.e11 - t.s_tilde).abs());
        d_res.push(t.optimality_residual.abs());
        d_exp.push((t.s11_expanded - t.s11_exact).abs());
    }
    out.metric("slope_s_tilde_vs_s11", slope_or_nan(&prm.eps, &d_st));
    out.metric("slope_e11_vs_s_tilde", slope_or_nan(&prm.eps, &d_e));
    out.metric("slope_optimality_residual", slope_or_nan(&prm.eps, &d_res));
    out.metric("slope_s11_expansion", slope_or_nan(&prm.eps, &d_exp));
    out.metric("max_rel_mse_opt_vs_full", rel_mse);
    out.metric("max_rel_cov_opt_vs_full", rel_cov);
    out.metric("min_cov_full_minus_rsf", rsf_gap);
    out.flag("rsfa_mse_above_full", rsfa_over);
    out.tables.push(mc);
    out.tables.push(th);

    let mut gp = gnuplot_preamble("Filter MSE and reported variance vs eps", "fig1");
    gp += "set logscale x 2\nset xlabel 'epsilon'\nset multiplot layout 1,2\n";
    gp += "set ylabel 'MSE'\nplot for [c=2:5] 'fig1.csv' using 1:c with linespoints\n";
    gp += "set ylabel 'covariance'\nplot for [c=6:9] 'fig1.csv' using 1:c with linespoints\nunset multiplot\n";
    out.plots.push(PlotScript { name: "fig1".into(), body: gp });
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Eps4Params {
    pub eps: Vec<f64>,
    pub dt_obs: f64,
    pub model: Option<LinearModel>,
}

impl Default for Eps4Params {
    fn default() -> Self {
        Self { eps: halves(1, 6), dt_obs: 1.0, model: None }
    }
}

impl ParamsSpec for Eps4Params {
    fn check(&self, ctx: &CheckContext<'_>, diag: &mut Diagnostics) {
        check_sweep(&self.eps, self.dt_obs, |e| base_params(ctx.preset, self.model, e), diag);
    }
}

pub fn run_eps4(ctx: &Ctx<'_>, prm: &Eps4Params) -> Result<ExperimentOutput> {
    let run = ctx.run();
    let base = base_params(ctx.preset, prm.model, prm.eps[0]);
    let mut out = ExperimentOutput::default();
    let mut cols: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = Vec::new();
    for (which, label) in [(PathwiseReduced::Optimal, "optimal"), (PathwiseReduced::AveragedOnManifold, "averaged")] {
        let seed = derive_seed(ctx.seed, "eps4/pathwise");
        let s = pathwise_convergence_study(&base, which, &prm.eps, prm.dt_obs, run.cycles, run.burn_in, seed)?;
        let mut exact = Vec::with_capacity(prm.eps.len());
        for &e in &prm.eps {
            let p = base.with_eps(e);
            exact.push(steady_state_comparison(&p, LinearFilterVariant::Full, which.variant(&p)?, prm.dt_obs)?.mean_sq_diff);
        }
        out.metric(format!("slope_{label}"), s.fit.slope);
        out.metric(format!("slope_{label}_ci95"), s.fit.ci_half_width);
        out.metric(format!("sampling_ci95_{label}"), s.sampling_ci_half_width);
        out.flag(format!("inconclusive_{label}"), s.inconclusive);
        out.metric(format!("exact_slope_{label}"), slope_or_nan(&prm.eps, &exact));
        cols.push((s.mean_sq_diff, s.mean_sq_diff_stderr, exact));
    }
    let mut t = Table::new(
        "eps4",
        &["epsilon", "msd_optimal", "stderr_optimal", "exact_optimal", "msd_averaged", "stderr_averaged", "exact_averaged"],
    );
    for (i, &e) in prm.eps.iter().enumerate() {
        t.push(vec![
            e.into(),
            cols[0].0[i].into(),
            cols[0].1[i].into(),
            cols[0].2[i].into(),
            cols[1].0[i].into(),
            cols[1].1[i].into(),
            cols[1].2[i].into(),
        ]);
    }
    out.tables.push(t);
    let mut gp = gnuplot_preamble("Mean-square disagreement of posterior means", "eps4");
    gp += "set logscale xy\nset xlabel 'epsilon'\nset ylabel 'E(x_full - x_reduced)^2'\n";
    gp += "plot 'eps4.csv' using 1:2:3 with yerrorbars, '' using 1:5:6 with yerrorbars, \\\n";
    gp += "     '' using 1:4 with lines, '' using 1:7 with lines\n";
    out.plots.push(PlotScript { name: "eps4".into(), body: gp });
    Ok(out)
}
