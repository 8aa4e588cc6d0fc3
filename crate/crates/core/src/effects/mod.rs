//! Effect estimation from forest weights.
//!
//! Every estimate is a weighted mean of observed outcomes. For one arm with
//! weights w over that arm's training units the variance estimate is
//!
//! ```text
//! Var = Σ_j w_j² (y_j − ŷ_{−j})²,   ŷ_{−j} = (ŷ − w_j y_j) / (1 − w_j)
//! ```
//!
//! and a contrast adds the variances of its two arms. Population-level
//! weights (ATE, ATET, GATE) are aggregated directly from the trees, which
//! keeps the GATE-to-ATE identity exact up to rounding.

mod placebo;
mod sorted;
mod support;
mod tables;
mod wald;

use serde::Serialize;

use crate::dataset::{Dataset, FeatureKind};
use crate::forest::{aggregate_weights, ForestModel, WeightMatrix};
use crate::stats::two_sided_p;
use crate::{McfError, Result, N_ARMS};

pub use placebo::{binomial_allowance, placebo_run, PlaceboConfig, PlaceboEffect, PlaceboReport};
pub use sorted::{sorted_effects, SortedCurve, SMOOTHING_BAND_Z};
pub use support::{check_support, SupportReport};
pub use tables::{contrast_label, effect_table, population_table, wald_row, CONTRASTS};
pub use wald::{wald_across, wald_equality, WaldTest};

/// Weights this close to one make the leave-one-out mean undefined; the
/// arm's overall mean is used instead.
const LOO_EPS: f64 = 1e-12;

/// Outcome of every training unit with the per-arm sample means.
#[derive(Debug, Clone)]
pub struct OutcomeData {
    pub y: Vec<f64>,
    pub arms: Vec<usize>,
    pub arm_means: [f64; N_ARMS],
}

impl OutcomeData {
    pub fn new(y: Vec<f64>, arms: Vec<usize>) -> Self {
        let mut sum = [0.0; N_ARMS];
        let mut cnt = [0usize; N_ARMS];
        for (&v, &d) in y.iter().zip(&arms) {
            sum[d] += v;
            cnt[d] += 1;
        }
        let arm_means = std::array::from_fn(|d| if cnt[d] > 0 { sum[d] / cnt[d] as f64 } else { f64::NAN });
        Self { y, arms, arm_means }
    }
}

/// Weighted mean of one arm with its variance and the per-unit terms
/// `w_j (y_j − ŷ_{−j})` used for covariances.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArmEstimate {
    pub mean: f64,
    pub variance: f64,
    #[serde(skip)]
    pub scaled_residuals: Vec<(u32, f64)>,
}

impl ArmEstimate {
    pub fn se(&self) -> f64 {
        self.variance.sqrt()
    }
}

/// Weighted mean and variance of `entries` (unit, weight).
pub fn arm_estimate(entries: &[(u32, f64)], data: &OutcomeData, arm: usize, keep_residuals: bool) -> ArmEstimate {
    let mean: f64 = entries.iter().map(|&(j, w)| w * data.y[j as usize]).sum();
    let mut variance = 0.0;
    let mut scaled_residuals = Vec::with_capacity(if keep_residuals { entries.len() } else { 0 });
    for &(j, w) in entries {
        let yj = data.y[j as usize];
        let loo = if 1.0 - w > LOO_EPS {
            (mean - w * yj) / (1.0 - w)
        } else {
            data.arm_means[arm]
        };
        let r = w * (yj - loo);
        variance += r * r;
        if keep_residuals {
            scaled_residuals.push((j, r));
        }
    }
    ArmEstimate {
        mean,
        variance,
        scaled_residuals,
    }
}

/// Potential-outcome estimates of every target for every arm; `None` marks
/// an unsupported cell.
pub fn potential_outcomes(weights: &WeightMatrix, data: &OutcomeData) -> Vec<[Option<(f64, f64)>; N_ARMS]> {
    use rayon::prelude::*;
    weights
        .rows
        .par_iter()
        .map(|row| {
            std::array::from_fn(|d| {
                if row[d].is_supported() {
                    let e = arm_estimate(&row[d].entries, data, d, false);
                    Some((e.mean, e.variance))
                } else {
                    None
                }
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Iate {
    pub target: usize,
    pub point: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IateSet {
    pub m: usize,
    pub l: usize,
    pub estimates: Vec<Iate>,
    /// Targets without weights for one of the two arms.
    pub excluded: Vec<(usize, String)>,
}

impl IateSet {
    pub fn points(&self) -> Vec<f64> {
        self.estimates.iter().map(|e| e.point).collect()
    }

    pub fn ses(&self) -> Vec<f64> {
        self.estimates.iter().map(|e| e.se).collect()
    }
}

/// IATEs of `m` versus `l` from precomputed potential outcomes.
pub fn iates_from_potentials(pots: &[[Option<(f64, f64)>; N_ARMS]], m: usize, l: usize) -> IateSet {
    let mut estimates = Vec::with_capacity(pots.len());
    let mut excluded = Vec::new();
    for (i, p) in pots.iter().enumerate() {
        match (p[m], p[l]) {
            (Some(a), Some(b)) => {
                let (point, var) = if m == l { (0.0, 0.0) } else { (a.0 - b.0, a.1 + b.1) };
                estimates.push(Iate {
                    target: i,
                    point,
                    se: var.sqrt(),
                });
            }
            _ => excluded.push((i, format!("no comparison weights for arm {} or {}", m, l))),
        }
    }
    if !excluded.is_empty() {
        log::info!("{} targets excluded from IATE {m}-{l}: unsupported", excluded.len());
    }
    IateSet {
        m,
        l,
        estimates,
        excluded,
    }
}

/// IATEs of `m` versus `l` for every target of `weights`.
pub fn estimate_iates(weights: &WeightMatrix, data: &OutcomeData, m: usize, l: usize) -> IateSet {
    iates_from_potentials(&potential_outcomes(weights, data), m, l)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Level {
    Ate,
    /// Population of units observed in this arm.
    Atet(usize),
    Gate { variable: String, cell: String },
}

/// Arm-level estimates for one population of targets.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PopulationEstimate {
    pub level: Level,
    pub size: usize,
    pub arms: [ArmEstimate; N_ARMS],
}

impl PopulationEstimate {
    /// Point and standard error of `m − l`; zero for `m == l`.
    pub fn contrast(&self, m: usize, l: usize) -> (f64, f64) {
        if m == l {
            return (0.0, 0.0);
        }
        let a = &self.arms[m];
        let b = &self.arms[l];
        (a.mean - b.mean, (a.variance + b.variance).sqrt())
    }
}

fn cross(a: &[(u32, f64)], b: &[(u32, f64)]) -> f64 {
    let (mut i, mut j, mut s) = (0, 0, 0.0);
    while i < a.len() && j < b.len() {
        match a[i].0.cmp(&b[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                s += a[i].1 * b[j].1;
                i += 1;
                j += 1;
            }
        }
    }
    s
}

/// Covariance of the `m − l` estimates of two populations through shared weights.
pub fn contrast_covariance(a: &PopulationEstimate, b: &PopulationEstimate, m: usize, l: usize) -> f64 {
    if m == l {
        return 0.0;
    }
    cross(&a.arms[m].scaled_residuals, &b.arms[m].scaled_residuals)
        + cross(&a.arms[l].scaled_residuals, &b.arms[l].scaled_residuals)
}

/// Population estimates for each (level, targets) pair. `leaves` comes from
/// [`ForestModel::assign_leaves`] on the targets.
pub fn estimate_populations(
    forest: &ForestModel,
    leaves: &[Vec<u32>],
    data: &OutcomeData,
    populations: &[(Level, Vec<usize>)],
) -> Result<Vec<PopulationEstimate>> {
    if let Some((level, _)) = populations.iter().find(|(_, g)| g.is_empty()) {
        return Err(McfError::data(format!("population {level:?} has no units")));
    }
    let groups: Vec<Vec<usize>> = populations.iter().map(|(_, g)| g.clone()).collect();
    let agg = aggregate_weights(forest, leaves, &groups);
    Ok(populations
        .iter()
        .zip(agg)
        .map(|((level, g), a)| {
            let arms = std::array::from_fn(|d| {
                let entries: Vec<(u32, f64)> = a.weights[d]
                    .iter()
                    .enumerate()
                    .filter(|(_, w)| **w != 0.0)
                    .map(|(j, &w)| (j as u32, w))
                    .collect();
                arm_estimate(&entries, data, d, true)
            });
            PopulationEstimate {
                level: level.clone(),
                size: g.len(),
                arms,
            }
        })
        .collect())
}

/// Cells of a discrete feature: every populated category of a categorical feature, or
/// every distinct value of an integer-valued ordered feature with at most
/// `MAX_ORDERED_CELLS` values.
pub fn feature_cells(ds: &Dataset, variable: &str, targets: &[usize]) -> Result<Vec<(String, Vec<usize>)>> {
    const MAX_ORDERED_CELLS: usize = 25;
    let j = ds.require_feature(variable)?;
    let f = &ds.spec[j];
    match &f.kind {
        FeatureKind::Categorical { categories } => {
            let mut cells: Vec<(String, Vec<usize>)> = categories.iter().map(|c| (c.clone(), Vec::new())).collect();
            for &i in targets {
                cells[ds.units[i].features[j] as usize].1.push(i);
            }
            for (label, _) in cells.iter().filter(|c| c.1.is_empty()) {
                log::warn!("GATE cell {variable}={label} has no members and is skipped");
            }
            cells.retain(|c| !c.1.is_empty());
            Ok(cells)
        }
        FeatureKind::Ordered => {
            let mut values: Vec<f64> = targets.iter().map(|&i| ds.units[i].features[j]).collect();
            if values.iter().any(|v| v.fract() != 0.0) {
                return Err(McfError::config(format!(
                    "GATE variable `{variable}` is continuous; only discrete variables can define groups"
                )));
            }
            values.sort_by(f64::total_cmp);
            values.dedup();
            if values.len() > MAX_ORDERED_CELLS {
                return Err(McfError::config(format!(
                    "GATE variable `{variable}` has {} values; at most {MAX_ORDERED_CELLS} are supported",
                    values.len()
                )));
            }
            Ok(values
                .iter()
                .map(|&v| {
                    let members = targets.iter().copied().filter(|&i| ds.units[i].features[j] == v).collect();
                    (format!("{v}"), members)
                })
                .collect())
        }
    }
}

/// GATE minus ATE for one cell, tested with the covariance through shared weights.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GateDifference {
    pub variable: String,
    pub cell: String,
    pub share: f64,
    pub gate: f64,
    pub gate_se: f64,
    pub difference: f64,
    pub difference_se: f64,
    pub p_value: f64,
}

pub fn gate_differences(
    ate: &PopulationEstimate,
    gates: &[PopulationEstimate],
    m: usize,
    l: usize,
) -> Vec<GateDifference> {
    let (ate_point, ate_se) = ate.contrast(m, l);
    gates
        .iter()
        .map(|g| {
            let (variable, cell) = match &g.level {
                Level::Gate { variable, cell } => (variable.clone(), cell.clone()),
                other => (format!("{other:?}"), String::new()),
            };
            let (gp, gse) = g.contrast(m, l);
            let var = gse * gse + ate_se * ate_se - 2.0 * contrast_covariance(g, ate, m, l);
            let se = var.max(0.0).sqrt();
            let diff = gp - ate_point;
            GateDifference {
                variable,
                cell,
                share: g.size as f64 / ate.size as f64,
                gate: gp,
                gate_se: gse,
                difference: diff,
                difference_se: se,
                p_value: if se > 0.0 { two_sided_p(diff / se) } else { f64::NAN },
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forest::{build_forest, compute_weights, ForestConfig, WeightRow};

    fn data(y: &[f64], arms: &[usize]) -> OutcomeData {
        OutcomeData::new(y.to_vec(), arms.to_vec())
    }

    #[test]
    fn weighted_means_of_the_contract_example() {
        let d = data(&[10.0, 12.0, 8.0, 8.0, 8.0, 8.0], &[1, 1, 0, 0, 0, 0]);
        let row: [WeightRow; N_ARMS] = [
            WeightRow {
                entries: vec![(2, 0.25), (3, 0.25), (4, 0.25), (5, 0.25)],
                supporting_trees: 1,
            },
            WeightRow {
                entries: vec![(0, 0.5), (1, 0.5)],
                supporting_trees: 1,
            },
            WeightRow {
                entries: vec![(2, 1.0)],
                supporting_trees: 1,
            },
            WeightRow::default(),
        ];
        let w = WeightMatrix { n_train: 6, rows: vec![row] };
        let s = estimate_iates(&w, &d, 1, 0);
        assert_eq!(s.estimates[0].point, 3.0);
        // arm 1: loo means 12 and 10 -> 0.25*4 + 0.25*4 = 2; arm 0: residuals zero
        assert!((s.estimates[0].se - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(estimate_iates(&w, &d, 1, 1).estimates[0].point, 0.0);
        assert_eq!(estimate_iates(&w, &d, 1, 3).excluded.len(), 1);
    }

    #[test]
    fn weight_of_one_falls_back_to_arm_mean() {
        let d = data(&[1.0, 3.0, 5.0], &[2, 2, 0]);
        let e = arm_estimate(&[(0, 1.0)], &d, 2, false);
        assert_eq!(e.mean, 1.0);
        assert_eq!(e.variance, 1.0);
    }

    fn synthetic() -> crate::dataset::Dataset {
        let cfg = crate::dataset::SynthConfig {
            n: 800,
            shares: [0.15, 0.15, 0.15],
            ..Default::default()
        };
        crate::dataset::generate_synthetic(&cfg, 12).unwrap()
    }

    #[test]
    fn single_leaf_forest_reproduces_raw_arm_means() {
        let ds = synthetic();
        let cfg = ForestConfig {
            n_trees: 1,
            min_leaf: ds.n_units(),
            subsample_share: 1.0,
            honest_share: 1.0,
            ..ForestConfig::default()
        };
        let f = build_forest(&ds, &cfg).unwrap();
        assert_eq!(f.trees[0].n_leaves(), 1);
        let targets: Vec<Vec<f64>> = ds.units.iter().map(|u| u.features.clone()).collect();
        let w = compute_weights(&f, &targets);
        let y = ds.outcome_values(&cfg.split_outcome);
        let od = OutcomeData::new(y.clone(), ds.treatments());
        let brute = |d: usize| {
            let v: Vec<f64> = ds.units.iter().zip(&y).filter(|(u, _)| u.treatment == d).map(|(_, y)| *y).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        let s = estimate_iates(&w, &od, 1, 0);
        for e in &s.estimates {
            assert!((e.point - (brute(1) - brute(0))).abs() < 1e-10);
        }
    }

    #[test]
    fn antisymmetry_and_aggregation_identity() {
        let ds = synthetic();
        let cfg = ForestConfig {
            n_trees: 20,
            seed: 3,
            ..ForestConfig::default()
        };
        let f = build_forest(&ds, &cfg).unwrap();
        let targets: Vec<Vec<f64>> = ds.units.iter().map(|u| u.features.clone()).collect();
        let leaves = f.assign_leaves(&targets);
        let od = OutcomeData::new(ds.outcome_values(&cfg.split_outcome), ds.treatments());
        let all: Vec<usize> = (0..ds.n_units()).collect();
        let cells = feature_cells(&ds, "Lang_dutch", &all).unwrap();
        let mut pops = vec![(Level::Ate, all.clone())];
        for (c, g) in &cells {
            pops.push((
                Level::Gate {
                    variable: "Lang_dutch".into(),
                    cell: c.clone(),
                },
                g.clone(),
            ));
        }
        let est = estimate_populations(&f, &leaves, &od, &pops).unwrap();
        for m in 0..N_ARMS {
            for l in 0..N_ARMS {
                let ate = est[0].contrast(m, l).0;
                assert_eq!(ate, -est[0].contrast(l, m).0);
                let agg: f64 = est[1..]
                    .iter()
                    .map(|g| g.size as f64 / ds.n_units() as f64 * g.contrast(m, l).0)
                    .sum();
                assert!((agg - ate).abs() < 1e-8);
            }
        }
        let w = compute_weights(&f, &targets);
        let iates = estimate_iates(&w, &od, 1, 0);
        let mean = iates.points().iter().sum::<f64>() / iates.estimates.len() as f64;
        assert!((mean - est[0].contrast(1, 0).0).abs() < 1e-9);
        let rev = estimate_iates(&w, &od, 0, 1);
        for (a, b) in iates.estimates.iter().zip(&rev.estimates) {
            assert_eq!(a.point, -b.point);
        }
        let diffs = gate_differences(&est[0], &est[1..], 1, 0);
        assert_eq!(diffs.len(), 4);
        assert!(diffs.iter().all(|d| d.difference_se > 0.0));
    }

    #[test]
    fn two_cells_average_to_ate() {
        // GATEs 1 and 3 with equal shares average to 2
        let shares = [0.5, 0.5];
        let gates = [1.0, 3.0];
        let ate: f64 = shares.iter().zip(&gates).map(|(s, g)| s * g).sum();
        assert_eq!(ate, 2.0);
    }

    #[test]
    fn continuous_gate_variable_rejected() {
        let ds = synthetic();
        let all: Vec<usize> = (0..ds.n_units()).collect();
        assert!(feature_cells(&ds, "age", &all).is_err());
        assert!(feature_cells(&ds, "educ", &all).is_ok());
        assert!(feature_cells(&ds, "nope", &all).is_err());
    }
}
