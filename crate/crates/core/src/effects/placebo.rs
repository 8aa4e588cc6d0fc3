//! Placebo run: effects of future programme participation on outcomes of
//! the preceding spell, where every true effect is zero.

use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};

use super::{estimate_populations, feature_cells, gate_differences, GateDifference, Level, OutcomeData, PopulationEstimate};
use crate::dataset::{Dataset, LabourState, MonthWindow, Outcome, HORIZON_MONTHS};
use crate::forest::{build_forest, ForestConfig};
use crate::stats::two_sided_p;
use crate::{McfError, Result, N_ARMS};

use super::CONTRASTS;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlaceboConfig {
    pub forest: ForestConfig,
    /// Months of the preceding spell used as outcomes.
    pub window: MonthWindow,
    /// Months of history available in the data.
    pub history_months: usize,
    /// Discrete variables scanned for spurious heterogeneity.
    pub gate_variables: Vec<String>,
    pub alpha: f64,
}

impl Default for PlaceboConfig {
    fn default() -> Self {
        Self {
            forest: ForestConfig::default(),
            window: MonthWindow::new(1, 9),
            history_months: HORIZON_MONTHS,
            gate_variables: Vec::new(),
            alpha: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlaceboEffect {
    pub outcome: String,
    pub m: usize,
    pub l: usize,
    pub point: f64,
    pub se: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlaceboReport {
    pub units: usize,
    pub dropped_contaminated: usize,
    pub window: MonthWindow,
    pub outcomes: Vec<Outcome>,
    #[serde(skip)]
    pub populations: Vec<PopulationEstimate>,
    pub effects: Vec<PlaceboEffect>,
    pub tests: usize,
    pub significant: usize,
    /// Significant results tolerated under the null at the 95% level.
    pub allowance: usize,
    pub passed: bool,
    pub heterogeneity: Vec<GateDifference>,
    /// Share of GATE-minus-ATE tests significant at 10%.
    pub heterogeneity_share_10pct: f64,
}

/// Smallest k with P(Binomial(tests, alpha) ≤ k) ≥ 0.95.
pub fn binomial_allowance(tests: usize, alpha: f64) -> usize {
    if tests == 0 {
        return 0;
    }
    let b = Binomial::new(alpha, tests as u64).expect("valid binomial");
    (0..=tests).find(|&k| b.cdf(k as u64) >= 0.95).unwrap_or(tests)
}

/// Drops units with a programme in the preceding spell, refits the forest on
/// employment in the placebo window and estimates every pairwise ATE for
/// employment, unemployment and inactivity in that window.
pub fn placebo_run(ds: &Dataset, cfg: &PlaceboConfig) -> Result<PlaceboReport> {
    let w = cfg.window;
    if w.first == 0 || w.is_empty() {
        return Err(McfError::config(format!("placebo window {}..{} is empty", w.first, w.last)));
    }
    if w.last > cfg.history_months || cfg.history_months > HORIZON_MONTHS {
        return Err(McfError::config(format!(
            "placebo window ends in month {} but only {} months of history are available",
            w.last,
            cfg.history_months.min(HORIZON_MONTHS)
        )));
    }
    let keep: Vec<usize> = (0..ds.n_units()).filter(|&i| !ds.units[i].prior_spell_almp).collect();
    let dropped_contaminated = ds.n_units() - keep.len();
    let clean = ds.subset(&keep)?;
    let counts = clean.arm_counts();
    if let Some(d) = (1..N_ARMS).find(|&d| counts[d] == 0) {
        return Err(McfError::data(format!("no placebo participants in arm {d} after filtering")));
    }

    let mut fcfg = cfg.forest.clone();
    fcfg.split_outcome = Outcome::new(LabourState::Employed, w.first, w.last);
    fcfg.m_try = fcfg.m_try.min(clean.n_features());
    let forest = build_forest(&clean, &fcfg)?;
    let targets: Vec<Vec<f64>> = clean.units.iter().map(|u| u.features.clone()).collect();
    let leaves = forest.assign_leaves(&targets);
    let all: Vec<usize> = (0..clean.n_units()).collect();
    let arms = clean.treatments();

    let outcomes: Vec<Outcome> = LabourState::ALL.iter().map(|&s| Outcome::new(s, w.first, w.last)).collect();
    let mut populations = Vec::new();
    let mut effects = Vec::new();
    let mut heterogeneity = Vec::new();
    for (k, o) in outcomes.iter().enumerate() {
        let data = OutcomeData::new(clean.outcome_values(o), arms.clone());
        let mut pops = vec![(Level::Ate, all.clone())];
        if k == 0 {
            for v in &cfg.gate_variables {
                for (cell, members) in feature_cells(&clean, v, &all)? {
                    pops.push((
                        Level::Gate {
                            variable: v.clone(),
                            cell,
                        },
                        members,
                    ));
                }
            }
        }
        let est = estimate_populations(&forest, &leaves, &data, &pops)?;
        for &(m, l) in CONTRASTS.iter() {
            let (point, se) = est[0].contrast(m, l);
            effects.push(PlaceboEffect {
                outcome: o.id(),
                m,
                l,
                point,
                se,
                p_value: if se > 0.0 { two_sided_p(point / se) } else { f64::NAN },
            });
            if k == 0 {
                heterogeneity.extend(gate_differences(&est[0], &est[1..], m, l));
            }
        }
        populations.push(est.into_iter().next().expect("ATE population"));
    }
    let tests = effects.len();
    let significant = effects.iter().filter(|e| e.p_value < cfg.alpha).count();
    let allowance = binomial_allowance(tests, cfg.alpha);
    let het_sig = heterogeneity.iter().filter(|g| g.p_value < 0.10).count();
    Ok(PlaceboReport {
        units: clean.n_units(),
        dropped_contaminated,
        window: w,
        outcomes,
        populations,
        tests,
        significant,
        allowance,
        passed: significant <= allowance,
        heterogeneity_share_10pct: if heterogeneity.is_empty() {
            0.0
        } else {
            het_sig as f64 / heterogeneity.len() as f64
        },
        heterogeneity,
        effects,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, SynthConfig};

    #[test]
    fn allowance_quantiles() {
        // P(X ≤ 2) = 0.9419 and P(X ≤ 3) = 0.9891 for Binomial(18, 0.05)
        assert_eq!(binomial_allowance(18, 0.05), 3);
        assert_eq!(binomial_allowance(1, 0.05), 0);
        assert_eq!(binomial_allowance(0, 0.05), 0);
    }

    fn data() -> Dataset {
        let cfg = SynthConfig {
            n: 1200,
            n_noise: 1,
            shares: [0.15, 0.15, 0.15],
            contamination_share: 0.05,
            ..SynthConfig::default()
        }
        .null_effects();
        generate_synthetic(&cfg, 21).unwrap()
    }

    fn cfg() -> PlaceboConfig {
        PlaceboConfig {
            forest: ForestConfig {
                n_trees: 30,
                seed: 5,
                ..ForestConfig::default()
            },
            gate_variables: vec!["Woman".into()],
            ..PlaceboConfig::default()
        }
    }

    #[test]
    fn filters_contaminated_units_and_reports_every_contrast() {
        let ds = data();
        let r = placebo_run(&ds, &cfg()).unwrap();
        let flagged = ds.units.iter().filter(|u| u.prior_spell_almp).count();
        assert!(flagged > 0);
        assert_eq!(r.dropped_contaminated, flagged);
        assert_eq!(r.units, ds.n_units() - flagged);
        assert_eq!(r.tests, 18);
        assert_eq!(r.heterogeneity.len(), 12);
        assert!(r.effects.iter().all(|e| e.se > 0.0));
    }

    #[test]
    fn window_beyond_history_is_rejected() {
        let mut c = cfg();
        c.history_months = 6;
        assert!(placebo_run(&data(), &c).is_err());
        c.history_months = HORIZON_MONTHS;
        c.window = MonthWindow::new(1, 31);
        assert!(placebo_run(&data(), &c).is_err());
    }

    #[test]
    fn no_treated_after_filtering_is_an_error() {
        let mut ds = data();
        for u in ds.units.iter_mut() {
            if u.treatment == 2 {
                u.prior_spell_almp = true;
            }
        }
        assert!(placebo_run(&ds, &cfg()).is_err());
    }
}
