//! Equality of one effect across four populations.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use super::{contrast_covariance, PopulationEstimate};
use crate::stats::chi2_sf;
use crate::{McfError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WaldTest {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
}

/// Tests `θ_0 = θ_1 = θ_2 = θ_3` using the differences to the first entry.
pub fn wald_equality(points: [f64; 4], cov: [[f64; 4]; 4]) -> Result<WaldTest> {
    let a = DMatrix::from_row_slice(
        3,
        4,
        &[
            -1.0, 1.0, 0.0, 0.0, //
            -1.0, 0.0, 1.0, 0.0, //
            -1.0, 0.0, 0.0, 1.0,
        ],
    );
    let sigma = DMatrix::from_fn(4, 4, |i, j| cov[i][j]);
    let d = &a * DVector::from_column_slice(&points);
    let v = &a * sigma * a.transpose();
    let chol = v
        .clone()
        .cholesky()
        .ok_or_else(|| McfError::numeric("Wald test covariance is singular"))?;
    // reject near-singular matrices that factor only through rounding
    let diag_min = chol.l().diagonal().iter().fold(f64::INFINITY, |m, x| m.min(*x));
    let scale = v.diagonal().iter().fold(0.0f64, |m, x| m.max(*x)).sqrt();
    if !(diag_min > 1e-10 * scale.max(f64::MIN_POSITIVE)) {
        return Err(McfError::numeric("Wald test covariance is singular"));
    }
    let statistic = d.dot(&chol.solve(&d));
    Ok(WaldTest {
        statistic,
        df: 3,
        p_value: chi2_sf(statistic, 3.0),
    })
}

/// Wald test of the `m − l` effect being equal in the four populations.
pub fn wald_across(pops: &[PopulationEstimate], m: usize, l: usize) -> Result<WaldTest> {
    if pops.len() != 4 {
        return Err(McfError::config(format!("Wald test needs 4 populations, got {}", pops.len())));
    }
    let points = std::array::from_fn(|k| pops[k].contrast(m, l).0);
    let cov = std::array::from_fn(|i| std::array::from_fn(|j| contrast_covariance(&pops[i], &pops[j], m, l)));
    wald_equality(points, cov)
}
