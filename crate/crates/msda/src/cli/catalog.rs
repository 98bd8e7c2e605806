use serde::Serialize;

/// Default run lengths. `None` where the experiment has no assimilation cycles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RunLength {
    pub cycles: usize,
    pub burn_in: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExperimentInfo {
    pub id: &'static str,
    pub anchor: &'static str,
    pub summary: &'static str,
    /// Wall-clock estimate at desk scale on one core.
    pub runtime: &'static str,
    pub desk: Option<RunLength>,
    pub paper: Option<RunLength>,
    /// Accepted model presets; the first is the default.
    pub presets: &'static [&'static str],
}

const fn len(cycles: usize, burn_in: usize) -> Option<RunLength> {
    Some(RunLength { cycles, burn_in })
}

pub const EXPERIMENTS: [ExperimentInfo; 9] = [
    ExperimentInfo {
        id: "fig1-linear",
        anchor: "Figure 1",
        summary: "linear two-scale filter: full vs RSF, RSFA and optimal reduced filters over eps",
        runtime: "5 s",
        desk: len(100_000, 1_000),
        paper: len(100_000, 1_000),
        presets: &["figure1", "appendix-b"],
    },
    ExperimentInfo {
        id: "eps4-conjecture",
        anchor: "Appendix B figure",
        summary: "pathwise disagreement between full and reduced posterior means over eps",
        runtime: "10 s",
        desk: len(100_000, 1_000),
        paper: len(1_000_000, 1_000),
        presets: &["appendix-b", "figure1"],
    },
    ExperimentInfo {
        id: "table1-spekf",
        anchor: "Table 1",
        summary: "RMSE and consistency of the moment filters, scheme x regime",
        runtime: "15 s",
        desk: len(20_000, 100),
        paper: len(20_000, 100),
        presets: &["both", "regime1", "regime2"],
    },
    ExperimentInfo {
        id: "fig2-filtercov",
        anchor: "Figure 2",
        summary: "posterior mean and variance series of the moment filters",
        runtime: "2 s",
        desk: len(2_000, 100),
        paper: len(20_000, 100),
        presets: &["regime1", "regime2"],
    },
    ExperimentInfo {
        id: "fig3-priorcov",
        anchor: "Figure 3",
        summary: "prior variance from the reduced moment equations vs Monte-Carlo truth",
        runtime: "40 s",
        desk: None,
        paper: None,
        presets: &["regime1", "regime2"],
    },
    ExperimentInfo {
        id: "fig4-badansatz-sweep",
        anchor: "Figure 4",
        summary: "reduced filter without multiplicative noise over a (Re alpha, sigma^2) grid, with the MSM point",
        runtime: "30 s",
        desk: len(5_000, 100),
        paper: len(20_000, 100),
        presets: &["regime1", "regime2"],
    },
    ExperimentInfo {
        id: "fig5-l96-sweep",
        anchor: "Figure 5",
        summary: "two-layer Lorenz-96 eps sweep: RDF, RDFD, RSFA, RSFAD ensemble filters",
        runtime: "6 min",
        desk: len(25_000, 20_000),
        paper: len(80_000, 20_000),
        presets: &["sweep"],
    },
    ExperimentInfo {
        id: "fig6-online-vs-offline",
        anchor: "Figure 6",
        summary: "sparse Lorenz-96 observations: online-fit vs offline-fit reduced filters",
        runtime: "20 s",
        desk: len(10_000, 3_000),
        paper: len(10_000, 3_000),
        presets: &["sparse"],
    },
    ExperimentInfo {
        id: "fig7-climate",
        anchor: "Figure 7",
        summary: "free-run densities and autocorrelations of the full and fitted reduced models",
        runtime: "1 min",
        desk: len(200_000, 2_000),
        paper: len(2_000_000, 2_000),
        presets: &["sparse"],
    },
];

impl ExperimentInfo {
    pub fn default_preset(&self) -> &'static str {
        self.presets[0]
    }
}

pub fn lookup(id: &str) -> Option<&'static ExperimentInfo> {
    EXPERIMENTS.iter().find(|e| e.id == id)
}

/// Catalog listing, one experiment per line.
pub fn list_experiments() -> &'static [ExperimentInfo] {
    &EXPERIMENTS
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catalog_contract() {
        assert_eq!(list_experiments().len(), 9);
        assert_eq!(lookup("fig5-l96-sweep").unwrap().anchor, "Figure 5");
        assert_eq!(lookup("eps4-conjecture").unwrap().anchor, "Appendix B figure");
        assert!(lookup("fig8").is_none());
        for e in list_experiments() {
            if let (Some(d), Some(p)) = (e.desk, e.paper) {
                assert!(d.cycles > d.burn_in && p.cycles > p.burn_in && p.cycles >= d.cycles);
            }
        }
    }
}
