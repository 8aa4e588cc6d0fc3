//! Pseudo programme-start days for non-participants.
//!
//! The log of the start day is modelled on participants with a LASSO over all
//! features and their interactions with gender, the penalty is picked by
//! ten-fold cross-validation of the post-LASSO OLS refit, and the refit is
//! then used to draw a start day for every non-participant. Draws that fall
//! after day 274 or after the end of the spell are excluded.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, FeatureKind, MAX_START_DAY};
use crate::rng::{derive_seed, rng_from};
use crate::stats::{stars, two_sided_p};
use crate::{McfError, Result};

const CD_TOLERANCE: f64 = 1e-7;
const CD_MAX_SWEEPS: usize = 100_000;

/// One column of the regression design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignColumn {
    pub name: String,
    pub feature: String,
    /// Indicator for this category code; `None` uses the raw value.
    pub category: Option<usize>,
    /// Multiplied by the gender indicator.
    pub by_gender: bool,
}

/// Maps unit features onto regression columns: every feature (categoricals
/// one-hot with the first level dropped) plus each of those columns
/// interacted with the gender indicator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Design {
    pub gender_feature: String,
    /// Category code counted as "woman".
    pub gender_code: usize,
    pub columns: Vec<DesignColumn>,
}

impl Design {
    pub fn new(ds: &Dataset, gender_feature: &str) -> Result<Self> {
        let g = ds.require_feature(gender_feature)?;
        if ds.spec[g].n_categories() != 2 {
            return Err(McfError::config(format!(
                "gender feature `{gender_feature}` must be a binary categorical"
            )));
        }
        let mut base = Vec::new();
        for f in &ds.spec {
            match &f.kind {
                FeatureKind::Ordered => base.push(DesignColumn {
                    name: f.name.clone(),
                    feature: f.name.clone(),
                    category: None,
                    by_gender: false,
                }),
                FeatureKind::Categorical { categories } => {
                    for (c, label) in categories.iter().enumerate().skip(1) {
                        base.push(DesignColumn {
                            name: format!("{}={}", f.name, label),
                            feature: f.name.clone(),
                            category: Some(c),
                            by_gender: false,
                        });
                    }
                }
            }
        }
        let mut columns = base.clone();
        for c in &base {
            if c.feature == gender_feature {
                continue;
            }
            columns.push(DesignColumn {
                name: format!("{} x {}", c.name, gender_feature),
                by_gender: true,
                ..c.clone()
            });
        }
        Ok(Self {
            gender_feature: gender_feature.to_string(),
            gender_code: 1,
            columns,
        })
    }

    fn resolve(&self, ds: &Dataset) -> Result<(usize, Vec<usize>)> {
        let g = ds.feature_index(&self.gender_feature).ok_or_else(|| {
            McfError::data(format!("feature `{}` used by the start model is missing", self.gender_feature))
        })?;
        let idx = self
            .columns
            .iter()
            .map(|c| {
                ds.feature_index(&c.feature)
                    .ok_or_else(|| McfError::data(format!("feature `{}` used by the start model is missing", c.feature)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((g, idx))
    }

    /// Column-major design matrix for the units at `rows`.
    pub fn matrix(&self, ds: &Dataset, rows: &[usize]) -> Result<Vec<Vec<f64>>> {
        let (g, idx) = self.resolve(ds)?;
        Ok(self
            .columns
            .iter()
            .zip(&idx)
            .map(|(c, &j)| {
                rows.iter()
                    .map(|&i| {
                        let u = &ds.units[i];
                        let v = match c.category {
                            Some(code) => f64::from(u8::from(u.features[j] == code as f64)),
                            None => u.features[j],
                        };
                        if c.by_gender && u.features[g] != self.gender_code as f64 {
                            0.0
                        } else {
                            v
                        }
                    })
                    .collect()
            })
            .collect())
    }
}

fn soft_threshold(z: f64, g: f64) -> f64 {
    if z > g {
        z - g
    } else if z < -g {
        z + g
    } else {
        0.0
    }
}

/// Cyclic coordinate descent for `(1/2n)‖y − Xβ‖² + λ‖β‖₁` without an
/// intercept, starting from `beta`. Columns with zero norm stay at zero.
pub fn lasso_from(cols: &[Vec<f64>], y: &[f64], lambda: f64, beta: &mut [f64]) {
    let n = y.len() as f64;
    let norms: Vec<f64> = cols.iter().map(|c| c.iter().map(|v| v * v).sum::<f64>() / n).collect();
    let mut r: Vec<f64> = y.to_vec();
    for (c, &b) in cols.iter().zip(beta.iter()) {
        if b != 0.0 {
            for (ri, xi) in r.iter_mut().zip(c) {
                *ri -= xi * b;
            }
        }
    }
    for _ in 0..CD_MAX_SWEEPS {
        let mut max_change: f64 = 0.0;
        for (j, c) in cols.iter().enumerate() {
            if norms[j] <= 0.0 {
                continue;
            }
            let old = beta[j];
            let rho = c.iter().zip(&r).map(|(x, ri)| x * ri).sum::<f64>() / n + norms[j] * old;
            let new = soft_threshold(rho, lambda) / norms[j];
            if new != old {
                let delta = new - old;
                for (ri, xi) in r.iter_mut().zip(c) {
                    *ri -= xi * delta;
                }
                beta[j] = new;
                max_change = max_change.max(delta.abs());
            }
        }
        if max_change < CD_TOLERANCE {
            return;
        }
    }
    log::warn!("coordinate descent hit the sweep limit at lambda {lambda:e}");
}

/// LASSO coefficients at penalty `lambda` (which may be zero).
pub fn lasso(cols: &[Vec<f64>], y: &[f64], lambda: f64) -> Vec<f64> {
    let mut beta = vec![0.0; cols.len()];
    lasso_from(cols, y, lambda, &mut beta);
    beta
}

/// Standardises columns to mean 0 and population variance 1; constant
/// columns become all zero.
fn standardize(cols: &[Vec<f64>]) -> Vec<Vec<f64>> {
    cols.iter()
        .map(|c| {
            let n = c.len() as f64;
            let m = c.iter().sum::<f64>() / n;
            let sd = (c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt();
            if sd <= 1e-12 {
                vec![0.0; c.len()]
            } else {
                c.iter().map(|v| (v - m) / sd).collect()
            }
        })
        .collect()
}

fn penalty_grid(xs: &[Vec<f64>], yc: &[f64], size: usize) -> Vec<f64> {
    let n = yc.len() as f64;
    let lmax = xs
        .iter()
        .map(|c| (c.iter().zip(yc).map(|(a, b)| a * b).sum::<f64>() / n).abs())
        .fold(0.0, f64::max);
    let lmin = lmax * 1e-4;
    if size == 1 {
        return vec![lmax];
    }
    (0..size)
        .map(|k| {
            let t = k as f64 / (size - 1) as f64;
            (lmax.ln() * (1.0 - t) + lmin.ln() * t).exp()
        })
        .collect()
}

fn lasso_path(xs: &[Vec<f64>], y: &[f64], grid: &[f64]) -> Vec<Vec<usize>> {
    let m = y.iter().sum::<f64>() / y.len() as f64;
    let yc: Vec<f64> = y.iter().map(|v| v - m).collect();
    let mut beta = vec![0.0; xs.len()];
    grid.iter()
        .map(|&l| {
            lasso_from(xs, &yc, l, &mut beta);
            beta.iter()
                .enumerate()
                .filter(|(_, b)| **b != 0.0)
                .map(|(j, _)| j)
                .collect()
        })
        .collect()
}

/// Ordinary least squares with an intercept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OlsFit {
    /// Intercept first, then one coefficient per column.
    pub coefficients: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub sigma: f64,
}

pub(crate) fn ols(cols: &[&[f64]], y: &[f64]) -> Result<OlsFit> {
    let n = y.len();
    let k = cols.len() + 1;
    let x = DMatrix::from_fn(n, k, |i, j| if j == 0 { 1.0 } else { cols[j - 1][i] });
    let yv = DVector::from_column_slice(y);
    let xtx = x.transpose() * &x;
    let inv = match xtx.clone().cholesky() {
        Some(ch) => ch.inverse(),
        None => xtx
            .pseudo_inverse(1e-10)
            .map_err(|e| McfError::numeric(format!("least squares failed: {e}")))?,
    };
    let beta = &inv * (x.transpose() * &yv);
    let resid = &yv - &x * &beta;
    let rss = resid.dot(&resid);
    let dof = n as f64 - k as f64;
    if dof <= 0.0 {
        return Err(McfError::numeric(format!(
            "{} observations cannot identify {} coefficients",
            n, k
        )));
    }
    let sigma = (rss / dof).sqrt();
    let std_errors = (0..k).map(|j| sigma * inv[(j, j)].max(0.0).sqrt()).collect();
    Ok(OlsFit {
        coefficients: beta.iter().copied().collect(),
        std_errors,
        sigma,
    })
}

fn predict_ols(fit: &OlsFit, cols: &[&[f64]], row: usize) -> f64 {
    fit.coefficients[0]
        + cols
            .iter()
            .zip(&fit.coefficients[1..])
            .map(|(c, b)| c[row] * b)
            .sum::<f64>()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LassoFit {
    /// Decreasing penalties; the first gives the empty model.
    pub lambdas: Vec<f64>,
    /// Mean post-LASSO prediction error across folds, per penalty.
    pub cv_errors: Vec<f64>,
    /// `[fold][penalty]`.
    pub fold_errors: Vec<Vec<f64>>,
    pub selected: usize,
    pub selected_lambda: f64,
    /// Design columns active at the selected penalty.
    pub active: Vec<usize>,
    /// Active set at every grid point.
    pub path: Vec<Vec<usize>>,
}

/// Fits the LASSO path on column-major `cols` and selects the penalty by
/// `folds`-fold cross-validation of the post-LASSO refit. Ties in the CV
/// error go to the larger penalty.
pub fn fit_lasso(cols: &[Vec<f64>], y: &[f64], folds: usize, grid_size: usize, seed: u64) -> Result<LassoFit> {
    let n = y.len();
    if folds < 2 || n <= folds {
        return Err(McfError::config(format!("need more than {folds} observations for {folds}-fold CV, got {n}")));
    }
    if grid_size == 0 {
        return Err(McfError::config("penalty grid must not be empty"));
    }
    let ym = y.iter().sum::<f64>() / n as f64;
    if y.iter().all(|v| (v - ym).abs() <= 1e-12 * ym.abs().max(1.0)) {
        return Err(McfError::numeric("response is constant"));
    }
    let xs = standardize(cols);
    if xs.iter().all(|c| c.iter().all(|v| *v == 0.0)) {
        return Err(McfError::numeric("design has rank zero"));
    }
    let yc: Vec<f64> = y.iter().map(|v| v - ym).collect();
    let lambdas = penalty_grid(&xs, &yc, grid_size);
    let path = lasso_path(&xs, y, &lambdas);

    let mut order: Vec<usize> = (0..n).collect();
    {
        use rand::seq::SliceRandom;
        let mut rng = rng_from(derive_seed(seed, "lasso-folds"));
        order.shuffle(&mut rng);
    }
    let mut fold_of = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        fold_of[i] = pos % folds;
    }
    let fold_errors: Vec<Vec<f64>> = (0..folds)
        .into_par_iter()
        .map(|f| {
            let train: Vec<usize> = (0..n).filter(|&i| fold_of[i] != f).collect();
            let test: Vec<usize> = (0..n).filter(|&i| fold_of[i] == f).collect();
            let sub = |c: &Vec<f64>, rows: &[usize]| rows.iter().map(|&i| c[i]).collect::<Vec<f64>>();
            let xtr: Vec<Vec<f64>> = xs.iter().map(|c| sub(c, &train)).collect();
            let ytr: Vec<f64> = train.iter().map(|&i| y[i]).collect();
            let xte: Vec<Vec<f64>> = cols.iter().map(|c| sub(c, &test)).collect();
            let xtr_raw: Vec<Vec<f64>> = cols.iter().map(|c| sub(c, &train)).collect();
            let fold_path = lasso_path(&xtr, &ytr, &lambdas);
            fold_path
                .iter()
                .map(|active| {
                    if active.len() + 1 >= train.len() {
                        return f64::INFINITY;
                    }
                    let a: Vec<&[f64]> = active.iter().map(|&j| xtr_raw[j].as_slice()).collect();
                    match ols(&a, &ytr) {
                        Ok(fit) => {
                            let t: Vec<&[f64]> = active.iter().map(|&j| xte[j].as_slice()).collect();
                            test.iter()
                                .enumerate()
                                .map(|(r, &i)| (y[i] - predict_ols(&fit, &t, r)).powi(2))
                                .sum::<f64>()
                                / test.len() as f64
                        }
                        Err(_) => f64::INFINITY,
                    }
                })
                .collect()
        })
        .collect();
    let cv_errors: Vec<f64> = (0..lambdas.len())
        .map(|k| fold_errors.iter().map(|f| f[k]).sum::<f64>() / folds as f64)
        .collect();
    let mut selected = 0;
    for k in 1..cv_errors.len() {
        if cv_errors[k] < cv_errors[selected] {
            selected = k;
        }
    }
    if !cv_errors[selected].is_finite() {
        return Err(McfError::numeric("no penalty gave a finite cross-validation error"));
    }
    Ok(LassoFit {
        selected_lambda: lambdas[selected],
        active: path[selected].clone(),
        lambdas,
        cv_errors,
        fold_errors,
        selected,
        path,
    })
}

/// Post-LASSO OLS for the log start day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PostLassoModel {
    pub design: Design,
    pub active: Vec<usize>,
    pub fit: OlsFit,
}

impl PostLassoModel {
    pub fn sigma(&self) -> f64 {
        self.fit.sigma
    }

    /// Replaces the residual standard error, e.g. with 0 for deterministic starts.
    pub fn with_sigma(mut self, sigma: f64) -> Self {
        self.fit.sigma = sigma;
        self
    }

    /// Predicted log start day for the units at `rows`.
    pub fn predict_log(&self, ds: &Dataset, rows: &[usize]) -> Result<Vec<f64>> {
        let all = self.design.matrix(ds, rows)?;
        let a: Vec<&[f64]> = self.active.iter().map(|&j| all[j].as_slice()).collect();
        Ok((0..rows.len()).map(|r| predict_ols(&self.fit, &a, r)).collect())
    }

    /// Coefficient table: name, estimate, standard error, stars.
    pub fn coefficient_rows(&self) -> Vec<(String, f64, f64, &'static str)> {
        let mut names = vec!["intercept".to_string()];
        names.extend(self.active.iter().map(|&j| self.design.columns[j].name.clone()));
        names
            .into_iter()
            .zip(self.fit.coefficients.iter().zip(&self.fit.std_errors))
            .map(|(name, (&b, &se))| {
                let p = if se > 0.0 { two_sided_p(b / se) } else { f64::NAN };
                (name, b, se, stars(p))
            })
            .collect()
    }
}

/// Fits the start-day model on participants (arms 1-3 with a start day).
pub fn fit_start_model(
    ds: &Dataset,
    gender_feature: &str,
    folds: usize,
    grid_size: usize,
    seed: u64,
) -> Result<(LassoFit, PostLassoModel)> {
    let design = Design::new(ds, gender_feature)?;
    let rows: Vec<usize> = (0..ds.n_units())
        .filter(|&i| ds.units[i].treatment != 0 && !ds.units[i].is_pseudo_start)
        .collect();
    let y: Vec<f64> = rows
        .iter()
        .map(|&i| {
            ds.units[i]
                .start_day
                .map(|d| f64::from(d).ln())
                .ok_or_else(|| McfError::data(format!("participant `{}` has no start day", ds.units[i].id)))
        })
        .collect::<Result<_>>()?;
    let cols = design.matrix(ds, &rows)?;
    let lasso_fit = fit_lasso(&cols, &y, folds, grid_size, seed)?;
    let a: Vec<&[f64]> = lasso_fit.active.iter().map(|&j| cols[j].as_slice()).collect();
    let fit = ols(&a, &y)?;
    if fit.sigma <= 0.0 {
        return Err(McfError::numeric("start-day model fits perfectly; residual error is zero"));
    }
    let model = PostLassoModel {
        design,
        active: lasso_fit.active.clone(),
        fit,
    };
    Ok((lasso_fit, model))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExclusionReason {
    BeyondNineMonths,
    SpellEndedBeforeStart,
    Both,
}

/// Exclusion reason for a start day, if any.
pub fn exclusion(start_day: u32, spell_length_days: u32) -> Option<ExclusionReason> {
    match (start_day > MAX_START_DAY, start_day > spell_length_days) {
        (true, true) => Some(ExclusionReason::Both),
        (true, false) => Some(ExclusionReason::BeyondNineMonths),
        (false, true) => Some(ExclusionReason::SpellEndedBeforeStart),
        (false, false) => None,
    }
}

/// Rounds half up and floors at day 1.
pub fn to_day(log_day: f64) -> u32 {
    let d = (log_day.exp() + 0.5).floor();
    if d.is_nan() || d < 1.0 {
        1
    } else if d > u32::MAX as f64 {
        u32::MAX
    } else {
        d as u32
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoStart {
    pub unit: usize,
    pub id: String,
    pub start_day: u32,
    pub excluded: Option<ExclusionReason>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoStartResult {
    pub starts: Vec<PseudoStart>,
}

impl PseudoStartResult {
    pub fn kept(&self) -> usize {
        self.starts.iter().filter(|s| s.excluded.is_none()).count()
    }

    /// Excluded counts: beyond nine months, spell ended, both.
    pub fn exclusion_counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for s in &self.starts {
            match s.excluded {
                Some(ExclusionReason::BeyondNineMonths) => c[0] += 1,
                Some(ExclusionReason::SpellEndedBeforeStart) => c[1] += 1,
                Some(ExclusionReason::Both) => c[2] += 1,
                None => {}
            }
        }
        c
    }
}

/// Draws a start day for every NOP unit: exp(prediction + N(0, σ̂²)),
/// rounded, with the exclusion rules applied.
pub fn simulate_pseudo_starts(model: &PostLassoModel, ds: &Dataset, seed: u64) -> Result<PseudoStartResult> {
    let rows: Vec<usize> = (0..ds.n_units()).filter(|&i| ds.units[i].treatment == 0).collect();
    let pred = model.predict_log(ds, &rows)?;
    let sigma = model.sigma();
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(McfError::numeric(format!("invalid residual standard error {sigma}")));
    }
    let mut rng = rng_from(derive_seed(seed, "pseudo-start-draws"));
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let starts = rows
        .iter()
        .zip(pred)
        .map(|(&i, p)| {
            let z: f64 = std.sample(&mut rng);
            let day = to_day(p + sigma * z);
            let u = &ds.units[i];
            PseudoStart {
                unit: i,
                id: u.id.clone(),
                start_day: day,
                excluded: exclusion(day, u.spell_length_days),
            }
        })
        .collect();
    Ok(PseudoStartResult { starts })
}

/// Writes kept pseudo starts into the dataset and drops excluded units.
pub fn apply_pseudo_starts(ds: &Dataset, result: &PseudoStartResult) -> Result<Dataset> {
    let mut out = ds.clone();
    let mut drop = vec![false; ds.n_units()];
    for s in &result.starts {
        if s.excluded.is_some() {
            drop[s.unit] = true;
        } else {
            let u = &mut out.units[s.unit];
            u.start_day = Some(s.start_day);
            u.is_pseudo_start = true;
        }
    }
    let keep: Vec<usize> = (0..ds.n_units()).filter(|&i| !drop[i]).collect();
    out.subset(&keep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, SynthConfig};

    /// Columns of an 8×8 Sylvester-Hadamard matrix (entries ±1, orthogonal).
    fn hadamard_cols(p: usize) -> Vec<Vec<f64>> {
        (0..p)
            .map(|j| {
                (0..8)
                    .map(|i: usize| if (i & j).count_ones().is_multiple_of(2) { 1.0 } else { -1.0 })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn orthonormal_design_soft_thresholds() {
        let x = hadamard_cols(4);
        let y = [3.0, -1.0, 2.0, 0.5, 1.5, -2.0, 0.0, 4.0];
        for &lambda in &[0.0, 0.1, 0.4, 1.0, 5.0] {
            let b = lasso(&x, &y, lambda);
            for (j, c) in x.iter().enumerate() {
                let ls = c.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>() / 8.0;
                let oracle = ls.signum() * (ls.abs() - lambda).max(0.0);
                assert!((b[j] - oracle).abs() < 1e-9, "lambda {lambda} col {j}");
            }
        }
    }

    #[test]
    fn zero_penalty_is_least_squares() {
        let x = vec![vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], vec![0.5, -1.0, 2.0, 0.0, 1.0, 3.0]];
        let y = [1.0, 3.0, 2.0, 5.0, 4.0, 7.0];
        let b = lasso(&x, &y, 0.0);
        // normal equations without intercept
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
        let xtx = [[dot(&x[0], &x[0]), dot(&x[0], &x[1])], [dot(&x[1], &x[0]), dot(&x[1], &x[1])]];
        let xty = [dot(&x[0], &y), dot(&x[1], &y)];
        let det = xtx[0][0] * xtx[1][1] - xtx[0][1] * xtx[1][0];
        let b0 = (xtx[1][1] * xty[0] - xtx[0][1] * xty[1]) / det;
        let b1 = (xtx[0][0] * xty[1] - xtx[1][0] * xty[0]) / det;
        assert!((b[0] - b0).abs() < 1e-5 && (b[1] - b1).abs() < 1e-5);
    }

    fn toy(n: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
        use rand::Rng;
        let mut rng = rng_from(1);
        let cols: Vec<Vec<f64>> = (0..5).map(|_| (0..n).map(|_| rng.random::<f64>()).collect()).collect();
        let y = (0..n)
            .map(|i| 2.0 * cols[0][i] - cols[1][i] + 0.3 * rng.random::<f64>())
            .collect();
        (cols, y)
    }

    #[test]
    fn grid_endpoints_and_selection() {
        let (cols, y) = toy(120);
        let fit = fit_lasso(&cols, &y, 10, 100, 3).unwrap();
        assert_eq!(fit.lambdas.len(), 100);
        assert!(fit.path[0].is_empty(), "largest penalty gives the null model");
        assert_eq!(fit.path[99].len(), 5);
        assert!((fit.lambdas[99] / fit.lambdas[0] - 1e-4).abs() < 1e-12);
        for k in 0..100 {
            assert!(fit.cv_errors[fit.selected] <= fit.cv_errors[k]);
            if k < fit.selected {
                assert!(fit.cv_errors[k] > fit.cv_errors[fit.selected]);
            }
        }
        assert!(fit.active.contains(&0) && fit.active.contains(&1));
        for w in fit.path.windows(2) {
            assert!(w[0].len() <= w[1].len());
        }
        assert_eq!(fit, fit_lasso(&cols, &y, 10, 100, 3).unwrap());
    }

    #[test]
    fn degenerate_inputs() {
        let (cols, _) = toy(30);
        assert!(fit_lasso(&cols, &[1.0; 30], 10, 100, 1).is_err());
        let flat = vec![vec![2.0; 30]; 3];
        let (_, y) = toy(30);
        assert!(fit_lasso(&flat, &y, 10, 100, 1).is_err());
        assert!(fit_lasso(&cols, &y[..10], 10, 100, 1).is_err());
    }

    #[test]
    fn exclusion_rules() {
        assert_eq!(exclusion(300, 1000), Some(ExclusionReason::BeyondNineMonths));
        assert_eq!(exclusion(60, 50), Some(ExclusionReason::SpellEndedBeforeStart));
        assert_eq!(exclusion(300, 50), Some(ExclusionReason::Both));
        assert_eq!(exclusion(274, 274), None);
        assert_eq!(to_day(300f64.ln()), 300);
        assert_eq!(to_day(f64::NEG_INFINITY), 1);
        assert_eq!(to_day(2.5f64.ln()), 3);
    }

    fn synthetic() -> Dataset {
        let cfg = SynthConfig {
            n: 1500,
            shares: [0.08, 0.08, 0.08],
            assign_pseudo_starts: false,
            ..SynthConfig::default()
        };
        generate_synthetic(&cfg, 21).unwrap()
    }

    #[test]
    fn simulation_is_deterministic_and_consistent() {
        let ds = synthetic();
        let (_, model) = fit_start_model(&ds, "Woman", 10, 100, 5).unwrap();
        assert!(model.sigma() > 0.0);
        assert_eq!(model.fit.coefficients.len(), model.active.len() + 1);
        let a = simulate_pseudo_starts(&model, &ds, 9).unwrap();
        let b = simulate_pseudo_starts(&model, &ds, 9).unwrap();
        assert_eq!(a, b);
        let nop = ds.units.iter().filter(|u| u.treatment == 0).count();
        let c = a.exclusion_counts();
        assert_eq!(a.kept() + c.iter().sum::<usize>(), nop);
        for s in &a.starts {
            let u = &ds.units[s.unit];
            let feasible = s.start_day <= MAX_START_DAY && s.start_day <= u.spell_length_days;
            assert_eq!(feasible, s.excluded.is_none());
        }
        let applied = apply_pseudo_starts(&ds, &a).unwrap();
        assert_eq!(applied.n_units(), ds.n_units() - c.iter().sum::<usize>());
        assert!(applied.units.iter().all(|u| u.start_day.is_some()));
    }

    #[test]
    fn zero_sigma_is_a_function_of_features() {
        let ds = synthetic();
        let (_, model) = fit_start_model(&ds, "Woman", 10, 100, 5).unwrap();
        let model = model.with_sigma(0.0);
        let a = simulate_pseudo_starts(&model, &ds, 1).unwrap();
        let b = simulate_pseudo_starts(&model, &ds, 2).unwrap();
        assert_eq!(a, b);
    }
}
