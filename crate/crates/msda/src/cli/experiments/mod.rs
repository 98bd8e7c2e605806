//! Experiment pipelines behind `msda run`. Each one turns validated parameters into tables,
//! scalar metrics and plot scripts; nothing here touches the filesystem.

pub mod l96;
pub mod linear;
pub mod spekf;

use serde::Serialize;

use super::catalog::RunLength;
use super::config::{parse_params, CheckContext, Diagnostics, ExperimentConfig};
use super::output::ExperimentOutput;
use crate::error::Result;
use crate::linear_theory::log_log_slope;

/// Run-time context shared by all pipelines.
#[derive(Debug, Clone, Copy)]
pub struct Ctx<'a> {
    pub seed: u64,
    pub preset: &'a str,
    pub run: Option<RunLength>,
}

impl Ctx<'_> {
    /// Run length of a cycled experiment; validation guarantees it is present.
    pub fn run(&self) -> RunLength {
        self.run.expect("cycled experiment without a run length")
    }
}

/// Log-log slope, or NaN when the data do not admit a fit (non-positive values).
pub fn slope_or_nan(x: &[f64], y: &[f64]) -> f64 {
    log_log_slope(x, y).map(|f| f.slope).unwrap_or(f64::NAN)
}

/// Parameters of one experiment, tagged by the catalog id.
#[derive(Debug, Clone, PartialEq)]
pub enum ParamSet {
    Fig1(linear::Fig1Params),
    Eps4(linear::Eps4Params),
    Table1(spekf::Table1Params),
    Fig2(spekf::Fig2Params),
    Fig3(spekf::Fig3Params),
    Fig4(spekf::Fig4Params),
    Fig5(l96::Fig5Params),
    Fig6(l96::Fig6Params),
    Fig7(l96::Fig7Params),
}

fn to_value<P: Serialize>(p: &P) -> toml::Value {
    toml::Value::try_from(p).expect("parameters serialize to TOML")
}

impl ParamSet {
    pub fn parse(id: &str, table: &toml::Table, ctx: &CheckContext<'_>, diag: &mut Diagnostics) -> Option<Self> {
        Some(match id {
            "fig1-linear" => Self::Fig1(parse_params(table, ctx, diag)?),
            "eps4-conjecture" => Self::Eps4(parse_params(table, ctx, diag)?),
            "table1-spekf" => Self::Table1(parse_params(table, ctx, diag)?),
            "fig2-filtercov" => Self::Fig2(parse_params(table, ctx, diag)?),
            "fig3-priorcov" => Self::Fig3(parse_params(table, ctx, diag)?),
            "fig4-badansatz-sweep" => Self::Fig4(parse_params(table, ctx, diag)?),
            "fig5-l96-sweep" => Self::Fig5(parse_params(table, ctx, diag)?),
            "fig6-online-vs-offline" => Self::Fig6(parse_params(table, ctx, diag)?),
            "fig7-climate" => Self::Fig7(parse_params(table, ctx, diag)?),
            other => unreachable!("catalog id `{other}` has no parameter set"),
        })
    }

    /// Fully resolved parameters, defaults included.
    pub fn to_value(&self) -> toml::Value {
        match self {
            Self::Fig1(p) => to_value(p),
            Self::Eps4(p) => to_value(p),
            Self::Table1(p) => to_value(p),
            Self::Fig2(p) => to_value(p),
            Self::Fig3(p) => to_value(p),
            Self::Fig4(p) => to_value(p),
            Self::Fig5(p) => to_value(p),
            Self::Fig6(p) => to_value(p),
            Self::Fig7(p) => to_value(p),
        }
    }

    pub fn run(&self, cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
        let ctx = Ctx { seed: cfg.seed, preset: &cfg.preset, run: cfg.run };
        match self {
            Self::Fig1(p) => linear::run_fig1(&ctx, p),
            Self::Eps4(p) => linear::run_eps4(&ctx, p),
            Self::Table1(p) => spekf::run_table1(&ctx, p),
            Self::Fig2(p) => spekf::run_fig2(&ctx, p),
            Self::Fig3(p) => spekf::run_fig3(&ctx, p),
            Self::Fig4(p) => spekf::run_fig4(&ctx, p),
            Self::Fig5(p) => l96::run_fig5(&ctx, p),
            Self::Fig6(p) => l96::run_fig6(&ctx, p),
            Self::Fig7(p) => l96::run_fig7(&ctx, p),
        }
    }
}
