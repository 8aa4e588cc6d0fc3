//! Comparison weights.
//!
//! In one tree a target's weight for arm d is spread uniformly over the
//! honest arm-d members of the leaf it falls into. Forest weights average the
//! per-tree weights over the trees whose leaf holds at least one arm-d
//! member, and each row is renormalised to sum to one.

use rayon::prelude::*;
use serde::Serialize;

use super::{ForestModel, TreeNode};
use crate::N_ARMS;

/// Sparse weights over training units, sorted by unit index.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightRow {
    pub entries: Vec<(u32, f64)>,
    /// Trees that contributed; zero marks an unsupported (target, arm) cell.
    pub supporting_trees: u32,
}

impl WeightRow {
    pub fn is_supported(&self) -> bool {
        self.supporting_trees > 0
    }

    pub fn sum(&self) -> f64 {
        self.entries.iter().map(|e| e.1).sum()
    }

    pub fn values(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.1).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    pub n_train: usize,
    /// `[target][arm]`.
    pub rows: Vec<[WeightRow; N_ARMS]>,
}

impl WeightMatrix {
    pub fn n_targets(&self) -> usize {
        self.rows.len()
    }

    pub fn unsupported_count(&self) -> usize {
        self.rows
            .iter()
            .map(|r| r.iter().filter(|w| !w.is_supported()).count())
            .sum()
    }
}

/// Weight rows for every target.
pub fn compute_weights(forest: &ForestModel, targets: &[Vec<f64>]) -> WeightMatrix {
    let n_train = forest.n_train();
    let leaves = forest.assign_leaves(targets);
    let rows = (0..targets.len())
        .into_par_iter()
        .map_init(
            || (vec![0.0f64; n_train], Vec::<u32>::new()),
            |(scratch, touched), i| {
                let mut out: [WeightRow; N_ARMS] = Default::default();
                for (d, row) in out.iter_mut().enumerate() {
                    let mut trees = 0u32;
                    for (t, tree) in forest.trees.iter().enumerate() {
                        let members = &tree.leaf_members(leaves[t][i] as usize)[d];
                        if members.is_empty() {
                            continue;
                        }
                        trees += 1;
                        let w = 1.0 / members.len() as f64;
                        for &m in members {
                            if scratch[m as usize] == 0.0 {
                                touched.push(m);
                            }
                            scratch[m as usize] += w;
                        }
                    }
                    touched.sort_unstable();
                    let mut entries: Vec<(u32, f64)> =
                        touched.iter().map(|&m| (m, scratch[m as usize] / f64::from(trees))).collect();
                    for &m in touched.iter() {
                        scratch[m as usize] = 0.0;
                    }
                    touched.clear();
                    let total: f64 = entries.iter().map(|e| e.1).sum();
                    if total > 0.0 {
                        for e in entries.iter_mut() {
                            e.1 /= total;
                        }
                    }
                    *row = WeightRow {
                        entries,
                        supporting_trees: trees,
                    };
                }
                out
            },
        )
        .collect();
    WeightMatrix { n_train, rows }
}

/// Dense weights of one population (ATE, ATET or GATE cell) per arm: the mean
/// of the member targets' weight rows, without materialising them.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedWeights {
    pub weights: [Vec<f64>; N_ARMS],
    /// Targets of the population supported for each arm.
    pub supported: [usize; N_ARMS],
}

/// Aggregated weights for each group of target indices. `leaves` comes from
/// [`ForestModel::assign_leaves`] on the same targets.
pub fn aggregate_weights(forest: &ForestModel, leaves: &[Vec<u32>], groups: &[Vec<usize>]) -> Vec<AggregatedWeights> {
    let n_train = forest.n_train();
    let n_targets = leaves.first().map_or(0, Vec::len);
    // supporting trees per (target, arm)
    let mut support = vec![[0u32; N_ARMS]; n_targets];
    for (t, tree) in forest.trees.iter().enumerate() {
        for (i, s) in support.iter_mut().enumerate() {
            let m = tree.leaf_members(leaves[t][i] as usize);
            for d in 0..N_ARMS {
                if !m[d].is_empty() {
                    s[d] += 1;
                }
            }
        }
    }
    groups
        .par_iter()
        .map(|group| {
            let mut weights: [Vec<f64>; N_ARMS] = std::array::from_fn(|_| vec![0.0; n_train]);
            let mut supported = [0usize; N_ARMS];
            for &i in group {
                for d in 0..N_ARMS {
                    if support[i][d] > 0 {
                        supported[d] += 1;
                    }
                }
            }
            for (t, tree) in forest.trees.iter().enumerate() {
                let mut mass = vec![[0.0f64; N_ARMS]; tree.nodes.len()];
                for &i in group {
                    let leaf = leaves[t][i] as usize;
                    for d in 0..N_ARMS {
                        if support[i][d] > 0 {
                            mass[leaf][d] += 1.0 / f64::from(support[i][d]);
                        }
                    }
                }
                for (k, node) in tree.nodes.iter().enumerate() {
                    if let TreeNode::Leaf { members } = node {
                        for d in 0..N_ARMS {
                            if mass[k][d] == 0.0 || members[d].is_empty() {
                                continue;
                            }
                            let w = mass[k][d] / members[d].len() as f64;
                            for &m in &members[d] {
                                weights[d][m as usize] += w;
                            }
                        }
                    }
                }
            }
            for d in 0..N_ARMS {
                if supported[d] > 0 {
                    let s = supported[d] as f64;
                    for w in weights[d].iter_mut() {
                        *w /= s;
                    }
                }
            }
            AggregatedWeights { weights, supported }
        })
        .collect()
}

/// Thresholds, as shares of the row's absolute weight mass.
pub const DIAGNOSTIC_THRESHOLDS: [f64; 5] = [0.01, 0.03, 0.04, 0.10, 0.25];
/// A weight above this share of its row signals that few units drive the estimate.
pub const CONCERN_THRESHOLD: f64 = 0.04;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightDiagnostics {
    pub level: String,
    pub arm: usize,
    pub rows: usize,
    pub nonzero: usize,
    /// Share of nonzero weights above 1%, 3%, 4%, 10% and at or above 25%.
    pub shares_above: [f64; 5],
    pub max_share: f64,
    pub concern: bool,
}

/// Summarises the nonzero weights of `rows` (one slice per row) for one arm
/// and aggregation level. The concern flag is only raised for ATE rows.
pub fn weight_diagnostics(level: &str, arm: usize, rows: &[Vec<f64>]) -> WeightDiagnostics {
    let mut counts = [0usize; 5];
    let mut nonzero = 0;
    let mut max_share: f64 = 0.0;
    for row in rows {
        let mass: f64 = row.iter().map(|w| w.abs()).sum();
        if mass == 0.0 {
            continue;
        }
        for &w in row {
            if w == 0.0 {
                continue;
            }
            nonzero += 1;
            let s = w.abs() / mass;
            max_share = max_share.max(s);
            for (k, &th) in DIAGNOSTIC_THRESHOLDS.iter().enumerate() {
                let hit = if k == 4 { s >= th } else { s > th };
                if hit {
                    counts[k] += 1;
                }
            }
        }
    }
    let mut shares_above = [0.0; 5];
    if nonzero > 0 {
        for k in 0..5 {
            shares_above[k] = counts[k] as f64 / nonzero as f64;
        }
    }
    WeightDiagnostics {
        level: level.to_string(),
        arm,
        rows: rows.len(),
        nonzero,
        shares_above,
        max_share,
        concern: level == "ATE" && max_share > CONCERN_THRESHOLD,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forest::tests::small_data;
    use crate::forest::{build_forest, ForestConfig, Tree};

    fn forest(n_trees: usize, min_leaf: usize) -> (crate::dataset::Dataset, ForestModel) {
        let ds = small_data(600, 7);
        let cfg = ForestConfig {
            n_trees,
            min_leaf,
            seed: 2,
            ..ForestConfig::default()
        };
        let f = build_forest(&ds, &cfg).unwrap();
        (ds, f)
    }

    fn targets(ds: &crate::dataset::Dataset) -> Vec<Vec<f64>> {
        ds.units.iter().map(|u| u.features.clone()).collect()
    }

    #[test]
    fn rows_sum_to_one() {
        let (ds, f) = forest(20, 5);
        let w = compute_weights(&f, &targets(&ds));
        for r in &w.rows {
            for row in r {
                assert!(row.is_supported());
                assert!((row.sum() - 1.0).abs() < 1e-10);
                assert!(row.entries.iter().all(|e| e.1 > 0.0));
            }
        }
    }

    #[test]
    fn uniform_within_a_leaf() {
        let members: [Vec<u32>; N_ARMS] = [vec![0], vec![1, 2], vec![3], vec![4]];
        let tree = Tree {
            nodes: vec![TreeNode::Leaf { members }],
            building: vec![],
        };
        let (ds, mut f) = forest(1, 5);
        f.trees = vec![tree];
        let w = compute_weights(&f, &targets(&ds)[..1]);
        assert_eq!(w.rows[0][1].entries, vec![(1, 0.5), (2, 0.5)]);
    }

    #[test]
    fn duplicated_trees_change_nothing() {
        let (ds, f) = forest(1, 5);
        let mut twice = f.clone();
        twice.trees.push(f.trees[0].clone());
        let t = targets(&ds);
        let a = compute_weights(&f, &t);
        let b = compute_weights(&twice, &t);
        for (ra, rb) in a.rows.iter().zip(&b.rows) {
            for d in 0..N_ARMS {
                assert_eq!(ra[d].entries, rb[d].entries);
            }
        }
    }

    #[test]
    fn aggregated_weights_match_mean_of_rows() {
        let (ds, f) = forest(10, 5);
        let t = targets(&ds);
        let w = compute_weights(&f, &t);
        let leaves = f.assign_leaves(&t);
        let group: Vec<usize> = (0..ds.n_units()).step_by(3).collect();
        let agg = aggregate_weights(&f, &leaves, std::slice::from_ref(&group));
        for d in 0..N_ARMS {
            let mut dense = vec![0.0; f.n_train()];
            for &i in &group {
                for &(m, v) in &w.rows[i][d].entries {
                    dense[m as usize] += v / group.len() as f64;
                }
            }
            for (a, b) in dense.iter().zip(&agg[0].weights[d]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn coarser_leaves_give_weakly_more_support() {
        let (ds, fine) = forest(1, 5);
        let (_, coarse) = forest(1, 40);
        let t = targets(&ds);
        let wf = compute_weights(&fine, &t);
        let wc = compute_weights(&coarse, &t);
        let nz = |w: &WeightMatrix| -> usize { w.rows.iter().map(|r| r.iter().map(|x| x.entries.len()).sum::<usize>()).sum() };
        assert!(nz(&wc) >= nz(&wf));
    }

    #[test]
    fn diagnostic_bins() {
        let uniform = vec![vec![0.01; 100]];
        let d = weight_diagnostics("ATE", 0, &uniform);
        assert_eq!(d.shares_above, [0.0; 5]);
        assert!(!d.concern);

        let mut row = vec![0.0625; 12];
        row.push(0.25);
        let d = weight_diagnostics("ATE", 1, &[row.clone()]);
        let one = 1.0 / 13.0;
        assert_eq!(d.shares_above[2], 1.0);
        assert!((d.shares_above[3] - one).abs() < 1e-12);
        assert!((d.shares_above[4] - one).abs() < 1e-12);
        assert!(d.concern);
        assert!(!weight_diagnostics("IATE", 1, &[row]).concern);
    }
}
