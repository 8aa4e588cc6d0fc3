use serde::Serialize;

use super::{Dataset, FeatureKind};
use crate::stats::{mean, population_variance};
use crate::{McfError, Result, N_ARMS};

/// Standardized differences above this many percent are flagged as large.
pub const LARGE_IMBALANCE: f64 = 20.0;

/// `|mean_a − mean_b| / sqrt((var_a + var_b) / 2) × 100` with population
/// variances. Two degenerate samples with different means are infinitely
/// separated; with equal means the difference is zero.
pub fn standardized_difference(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(McfError::data("standardized difference needs two nonempty samples"));
    }
    let diff = (mean(a) - mean(b)).abs();
    let pooled = (population_variance(a) + population_variance(b)) / 2.0;
    if pooled <= 0.0 {
        return Ok(if diff == 0.0 { 0.0 } else { f64::INFINITY });
    }
    Ok(diff / pooled.sqrt() * 100.0)
}

/// One row of the balance table: arm means and standardized differences of
/// each programme against NOP.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BalanceRow {
    pub variable: String,
    pub means: [f64; N_ARMS],
    /// SVT, LVT, OT versus NOP.
    pub std_diff: [f64; N_ARMS - 1],
    pub large: [bool; N_ARMS - 1],
}

/// Balance of every ordered feature and every category indicator.
pub fn balance_report(ds: &Dataset) -> Result<Vec<BalanceRow>> {
    let mut rows = Vec::new();
    for (j, f) in ds.spec.iter().enumerate() {
        let mut variables: Vec<(String, Box<dyn Fn(f64) -> f64>)> = Vec::new();
        match &f.kind {
            FeatureKind::Ordered => variables.push((f.name.clone(), Box::new(|v| v))),
            FeatureKind::Categorical { categories } => {
                for (c, label) in categories.iter().enumerate() {
                    let code = c as f64;
                    variables.push((
                        format!("{}={}", f.name, label),
                        Box::new(move |v| f64::from(u8::from(v == code))),
                    ));
                }
            }
        }
        for (name, map) in variables {
            let mut by_arm: [Vec<f64>; N_ARMS] = Default::default();
            for u in &ds.units {
                by_arm[u.treatment].push(map(u.features[j]));
            }
            let mut means = [0.0; N_ARMS];
            for d in 0..N_ARMS {
                means[d] = mean(&by_arm[d]);
            }
            let mut std_diff = [0.0; N_ARMS - 1];
            let mut large = [false; N_ARMS - 1];
            for d in 1..N_ARMS {
                std_diff[d - 1] = standardized_difference(&by_arm[d], &by_arm[0])?;
                large[d - 1] = std_diff[d - 1] > LARGE_IMBALANCE;
            }
            rows.push(BalanceRow {
                variable: name,
                means,
                std_diff,
                large,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, SynthConfig};

    #[test]
    fn identical_samples() {
        let x = [1.0, 2.0, 5.0];
        assert_eq!(standardized_difference(&x, &x).unwrap(), 0.0);
    }

    #[test]
    fn bernoulli_hand_value() {
        // means 0.5 and 0.3, population variances 0.25 and 0.21
        let a: Vec<f64> = (0..10).map(|i| if i < 5 { 1.0 } else { 0.0 }).collect();
        let b: Vec<f64> = (0..10).map(|i| if i < 3 { 1.0 } else { 0.0 }).collect();
        let sd = standardized_difference(&a, &b).unwrap();
        assert!((sd - 0.2 / 0.23_f64.sqrt() * 100.0).abs() < 1e-9);
        assert!((sd - 41.7).abs() < 0.05);
    }

    #[test]
    fn woman_share_fixture_is_close_to_reported() {
        // shares 0.31 and 0.49 give 37.5; the published value 36 comes from
        // unrounded microdata shares
        let sd = {
            let (p, q) = (0.31_f64, 0.49_f64);
            (p - q).abs() / ((p * (1.0 - p) + q * (1.0 - q)) / 2.0).sqrt() * 100.0
        };
        assert!((sd - 36.0).abs() < 2.0, "{sd}");
    }

    #[test]
    fn degenerate_samples() {
        assert_eq!(standardized_difference(&[1.0, 1.0], &[1.0]).unwrap(), 0.0);
        assert!(standardized_difference(&[1.0, 1.0], &[2.0]).unwrap().is_infinite());
        assert!(standardized_difference(&[], &[2.0]).is_err());
    }

    #[test]
    fn one_sd_shift_gives_about_100() {
        let a: Vec<f64> = (0..1000).map(|i| (i % 2) as f64 * 2.0 - 1.0).collect();
        let b: Vec<f64> = a.iter().map(|x| x + 1.0).collect();
        assert!((standardized_difference(&a, &b).unwrap() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn report_covers_every_category() {
        let ds = generate_synthetic(
            &SynthConfig {
                n: 600,
                shares: [0.1, 0.1, 0.1],
                ..SynthConfig::default()
            },
            1,
        )
        .unwrap();
        let rows = balance_report(&ds).unwrap();
        let expected: usize = ds
            .spec
            .iter()
            .map(|f| if f.is_categorical() { f.n_categories() } else { 1 })
            .sum();
        assert_eq!(rows.len(), expected);
        assert!(rows.iter().all(|r| r.std_diff.iter().all(|s| *s >= 0.0)));
    }
}
