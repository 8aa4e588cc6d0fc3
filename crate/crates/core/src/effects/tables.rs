//! Rendering of effect tables.

use super::{PopulationEstimate, WaldTest};
use crate::report::{format_estimate, format_number, NumberStyle};
use crate::stats::stars;
use crate::{ARM_LABELS, N_ARMS};

/// Every pair `(m, l)` with `m > l`, ordered by `l` then `m`.
pub const CONTRASTS: [(usize, usize); 6] = [(1, 0), (2, 0), (3, 0), (2, 1), (3, 1), (3, 2)];

pub fn contrast_label(m: usize, l: usize) -> String {
    format!("{}-{}", ARM_LABELS[m], ARM_LABELS[l])
}

/// Lower-triangular matrix for one outcome: row `m` and column `l < m` hold
/// the `m − l` effect, the diagonal holds the potential outcome level.
/// The first column holds the row label.
pub fn effect_table(pop: &PopulationEstimate, style: NumberStyle) -> Vec<Vec<String>> {
    (0..N_ARMS)
        .map(|m| {
            let mut row = vec![ARM_LABELS[m].to_string()];
            for l in 0..N_ARMS {
                let cell = if l < m {
                    let (p, se) = pop.contrast(m, l);
                    format_estimate(p, se, style)
                } else if l == m {
                    let a = &pop.arms[m];
                    format!("{} ({})", format_number(a.mean, style), format_number(a.se(), style))
                } else {
                    String::new()
                };
                row.push(cell);
            }
            row
        })
        .collect()
}

/// One row per contrast, one column per population.
pub fn population_table(pops: &[PopulationEstimate], style: NumberStyle) -> Vec<Vec<String>> {
    CONTRASTS
        .iter()
        .map(|&(m, l)| {
            let mut row = vec![contrast_label(m, l)];
            row.extend(pops.iter().map(|p| {
                let (pt, se) = p.contrast(m, l);
                format_estimate(pt, se, style)
            }));
            row
        })
        .collect()
}

/// Wald statistics with stars, one per contrast.
pub fn wald_row(tests: &[WaldTest]) -> Vec<String> {
    tests
        .iter()
        .map(|t| format!("{}{}", format_number(t.statistic, NumberStyle::Fixed), stars(t.p_value)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::super::{ArmEstimate, Level};
    use super::*;

    fn pop(means: [f64; 4], ses: [f64; 4]) -> PopulationEstimate {
        PopulationEstimate {
            level: Level::Ate,
            size: 10,
            arms: std::array::from_fn(|d| ArmEstimate {
                mean: means[d],
                variance: ses[d] * ses[d],
                scaled_residuals: vec![],
            }),
        }
    }

    #[test]
    fn lower_triangle_layout() {
        let p = pop([3.5, 6.9, 7.0, 2.0], [0.0, 0.3, 0.4, 0.3]);
        let t = effect_table(&p, NumberStyle::Fixed);
        assert_eq!(t[0], vec!["NOP", "3.5 (0.0)", "", "", ""]);
        assert_eq!(t[1][1], "3.4 (0.3) ***");
        assert_eq!(t[1][2], "6.9 (0.3)");
        assert_eq!(t[3][4], "2.0 (0.3)");
        assert!(t[1][3].is_empty());
    }

    #[test]
    fn adaptive_placebo_cell() {
        let p = pop([5.0, 5.01, 5.0, 5.0], [0.0, 0.3, 0.1, 0.1]);
        let t = effect_table(&p, NumberStyle::Adaptive);
        assert_eq!(t[1][1], "0.01 (0.3)");
    }

    #[test]
    fn population_rows_follow_contrast_order() {
        let p = pop([0.0, 1.0, 2.0, 3.0], [0.0, 1.0, 1.0, 1.0]);
        let t = population_table(&[p.clone(), p], NumberStyle::Fixed);
        let labels: Vec<&str> = t.iter().map(|r| r[0].as_str()).collect();
        assert_eq!(labels, ["SVT-NOP", "LVT-NOP", "OT-NOP", "LVT-SVT", "OT-SVT", "OT-LVT"]);
        assert_eq!(t[2][1], "3.0 (1.0) ***");
        assert_eq!(t[0].len(), 3);
    }

    #[test]
    fn wald_cells() {
        let w = [
            WaldTest {
                statistic: 16.5,
                df: 3,
                p_value: 0.0009,
            },
            WaldTest {
                statistic: 1.2,
                df: 3,
                p_value: 0.75,
            },
        ];
        assert_eq!(wald_row(&w), vec!["16.5***", "1.2"]);
    }
}
