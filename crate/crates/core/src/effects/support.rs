//! Common support check with a multinomial logit propensity model.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::dataset::{Dataset, FeatureKind};
use crate::{McfError, Result, N_ARMS};

/// Ridge on the non-intercept coefficients; keeps the fit finite when a
/// region never receives some treatment.
const RIDGE: f64 = 1e-2;
const MAX_ITER: usize = 200;
const TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SupportReport {
    pub trim: f64,
    /// Estimated treatment probabilities per unit.
    #[serde(skip)]
    pub probabilities: Vec<[f64; N_ARMS]>,
    /// Units with some probability below `trim`.
    pub flagged: Vec<usize>,
    /// Flagged units by observed arm.
    pub flagged_by_arm: [usize; N_ARMS],
    pub min_probability: [f64; N_ARMS],
    pub max_probability: [f64; N_ARMS],
    pub iterations: usize,
}

/// Intercept, standardised ordered confounders and category dummies
/// (first level dropped).
fn design(ds: &Dataset) -> Vec<Vec<f64>> {
    let n = ds.n_units();
    let mut cols = vec![vec![1.0; n]];
    for (j, f) in ds.spec.iter().enumerate() {
        if !f.role.is_confounder() {
            continue;
        }
        let col = ds.column(j);
        match &f.kind {
            FeatureKind::Ordered => {
                let m = crate::stats::mean(&col);
                let sd = crate::stats::population_variance(&col).sqrt();
                if sd > 0.0 {
                    cols.push(col.iter().map(|x| (x - m) / sd).collect());
                }
            }
            FeatureKind::Categorical { categories } => {
                for c in 1..categories.len() {
                    let dummy: Vec<f64> = col.iter().map(|&x| if x as usize == c { 1.0 } else { 0.0 }).collect();
                    if dummy.iter().any(|&v| v != 0.0) {
                        cols.push(dummy);
                    }
                }
            }
        }
    }
    cols
}

fn probabilities(cols: &[Vec<f64>], beta: &[f64], i: usize) -> [f64; N_ARMS] {
    let k = cols.len();
    let mut eta = [0.0; N_ARMS];
    for d in 1..N_ARMS {
        eta[d] = (0..k).map(|c| beta[(d - 1) * k + c] * cols[c][i]).sum();
    }
    let top = eta.iter().fold(f64::NEG_INFINITY, |m, &e| m.max(e));
    let mut p = eta.map(|e| (e - top).exp());
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= s);
    p
}

fn penalised_loglik(cols: &[Vec<f64>], arms: &[usize], beta: &[f64]) -> f64 {
    let k = cols.len();
    let ll: f64 = (0..arms.len()).map(|i| probabilities(cols, beta, i)[arms[i]].max(1e-300).ln()).sum();
    let pen: f64 = beta
        .iter()
        .enumerate()
        .filter(|(idx, _)| idx % k != 0)
        .map(|(_, b)| b * b)
        .sum();
    ll - 0.5 * RIDGE * pen
}

/// Fits the propensity model on the confounders and flags units with a
/// probability below `trim` for some arm.
pub fn check_support(ds: &Dataset, trim: f64) -> Result<SupportReport> {
    if !(0.0..1.0 / N_ARMS as f64).contains(&trim) {
        return Err(McfError::config(format!("support trim {trim} must lie in [0, 0.25)")));
    }
    let cols = design(ds);
    let arms = ds.treatments();
    let n = arms.len();
    let k = cols.len();
    let dim = (N_ARMS - 1) * k;
    let mut beta = vec![0.0; dim];
    let mut ll = penalised_loglik(&cols, &arms, &beta);
    let mut iterations = 0;
    for it in 0..MAX_ITER {
        iterations = it + 1;
        let mut grad = DVector::<f64>::zeros(dim);
        let mut hess = DMatrix::<f64>::zeros(dim, dim);
        let mut x = vec![0.0; k];
        for i in 0..n {
            let p = probabilities(&cols, &beta, i);
            for c in 0..k {
                x[c] = cols[c][i];
            }
            for d in 1..N_ARMS {
                let r = f64::from(u8::from(arms[i] == d)) - p[d];
                for c in 0..k {
                    grad[(d - 1) * k + c] += r * x[c];
                }
                for e in 1..N_ARMS {
                    let w = p[d] * (f64::from(u8::from(d == e)) - p[e]);
                    for a in 0..k {
                        let wa = w * x[a];
                        for b in 0..k {
                            hess[((d - 1) * k + a, (e - 1) * k + b)] += wa * x[b];
                        }
                    }
                }
            }
        }
        for idx in 0..dim {
            if idx % k != 0 {
                grad[idx] -= RIDGE * beta[idx];
                hess[(idx, idx)] += RIDGE;
            } else {
                hess[(idx, idx)] += 1e-10;
            }
        }
        let step = hess
            .cholesky()
            .ok_or_else(|| McfError::numeric("propensity model Hessian is not positive definite"))?
            .solve(&grad);
        let mut t = 1.0;
        loop {
            let cand: Vec<f64> = beta.iter().zip(step.iter()).map(|(b, s)| b + t * s).collect();
            let cand_ll = penalised_loglik(&cols, &arms, &cand);
            if cand_ll >= ll - 1e-12 || t < 1e-8 {
                beta = cand;
                ll = cand_ll;
                break;
            }
            t *= 0.5;
        }
        if step.amax() * t < TOL {
            break;
        }
    }
    let probabilities: Vec<[f64; N_ARMS]> = (0..n).map(|i| self::probabilities(&cols, &beta, i)).collect();
    let mut flagged = Vec::new();
    let mut flagged_by_arm = [0usize; N_ARMS];
    let mut min_probability = [f64::INFINITY; N_ARMS];
    let mut max_probability = [0.0f64; N_ARMS];
    for (i, p) in probabilities.iter().enumerate() {
        for d in 0..N_ARMS {
            min_probability[d] = min_probability[d].min(p[d]);
            max_probability[d] = max_probability[d].max(p[d]);
        }
        if p.iter().any(|&v| v < trim) {
            flagged.push(i);
            flagged_by_arm[arms[i]] += 1;
        }
    }
    if !flagged.is_empty() {
        log::warn!("{} units lack common support at trim {trim}", flagged.len());
    }
    Ok(SupportReport {
        trim,
        probabilities,
        flagged,
        flagged_by_arm,
        min_probability,
        max_probability,
        iterations,
    })
}
