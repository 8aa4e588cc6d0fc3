//! Sorted IATE curve with a smoothed pointwise band.

use serde::Serialize;

use crate::stats::{mean, sample_sd};
use crate::{McfError, Result};

/// Normal quantile of the 90% two-sided band.
pub const SMOOTHING_BAND_Z: f64 = 1.645;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SortedCurve {
    pub points: Vec<f64>,
    pub smoothed_se: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Mean of the IATEs, which equals the ATE.
    pub reference: f64,
    pub bandwidth: f64,
    /// Share of IATEs with |point / se| > 1.96.
    pub share_significant: f64,
}

fn epanechnikov(u: f64) -> f64 {
    if u.abs() < 1.0 {
        0.75 * (1.0 - u * u)
    } else {
        0.0
    }
}

/// Sorts the IATEs and smooths their standard errors over the rank position
/// with a Nadaraya–Watson estimator (Epanechnikov kernel, Silverman bandwidth).
pub fn sorted_effects(iates: &[f64], ses: &[f64]) -> Result<SortedCurve> {
    let n = iates.len();
    if n < 2 {
        return Err(McfError::data(format!("sorted effects need at least 2 IATEs, got {n}")));
    }
    if ses.len() != n {
        return Err(McfError::data("IATE and standard error lengths differ"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| iates[a].total_cmp(&iates[b]).then(a.cmp(&b)));
    let points: Vec<f64> = order.iter().map(|&i| iates[i]).collect();
    let se_sorted: Vec<f64> = order.iter().map(|&i| ses[i]).collect();
    let x: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
    let bandwidth = 1.06 * sample_sd(&x) * (n as f64).powf(-0.2);

    let smoothed_se: Vec<f64> = x
        .iter()
        .map(|&x0| {
            let (mut num, mut den) = (0.0, 0.0);
            for (xi, si) in x.iter().zip(&se_sorted) {
                let k = epanechnikov((xi - x0) / bandwidth);
                num += k * si;
                den += k;
            }
            num / den
        })
        .collect();
    let lower = points.iter().zip(&smoothed_se).map(|(p, s)| p - SMOOTHING_BAND_Z * s).collect();
    let upper = points.iter().zip(&smoothed_se).map(|(p, s)| p + SMOOTHING_BAND_Z * s).collect();
    let significant = iates.iter().zip(ses).filter(|(p, s)| **s > 0.0 && (**p / **s).abs() > 1.96).count();
    Ok(SortedCurve {
        reference: mean(iates),
        points,
        smoothed_se,
        lower,
        upper,
        bandwidth,
        share_significant: significant as f64 / n as f64,
    })
}
