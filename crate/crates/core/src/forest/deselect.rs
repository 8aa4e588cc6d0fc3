//! Permutation importance and grouped feature deselection.

use rand::seq::SliceRandom;
use serde::Serialize;

use super::{build_forest, ForestConfig, ForestModel, TreeNode};
use crate::dataset::Dataset;
use crate::rng::{derive_seed, rng_from};
use crate::{McfError, Result, N_ARMS};

const N_GROUPS: usize = 10;
const SELECTION_SHARE: f64 = 0.2;

/// Out-of-bag mean squared error of the split outcome. Each unit is predicted
/// by the honest mean of its own arm in the leaf it reaches, using only trees
/// whose subsample excluded it. Columns in `permuted` are taken from row
/// `perm[i]` instead of row `i`.
pub fn oob_mse(forest: &ForestModel, ds: &Dataset, permuted: &[usize], perm: &[usize]) -> f64 {
    let y = ds.outcome_values(&forest.config.split_outcome);
    let n = ds.n_units();
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut x = ds.units[i].features.clone();
            for &j in permuted {
                x[j] = ds.units[perm[i]].features[j];
            }
            x
        })
        .collect();
    let mut sse = 0.0;
    let mut count = 0usize;
    let mut in_bag = vec![false; n];
    for tree in &forest.trees {
        in_bag.iter_mut().for_each(|b| *b = false);
        for &i in tree.building.iter().chain(tree.honest_units().iter()) {
            in_bag[i as usize] = true;
        }
        let means: Vec<[f64; N_ARMS]> = tree
            .nodes
            .iter()
            .map(|node| match node {
                TreeNode::Leaf { members } => std::array::from_fn(|d| {
                    if members[d].is_empty() {
                        f64::NAN
                    } else {
                        members[d].iter().map(|&m| y[m as usize]).sum::<f64>() / members[d].len() as f64
                    }
                }),
                TreeNode::Split { .. } => [f64::NAN; N_ARMS],
            })
            .collect();
        for i in 0..n {
            if in_bag[i] {
                continue;
            }
            let pred = means[tree.leaf_of(&rows[i])][ds.units[i].treatment];
            if pred.is_finite() {
                sse += (y[i] - pred).powi(2);
                count += 1;
            }
        }
    }
    if count == 0 {
        f64::NAN
    } else {
        sse / count as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupVim {
    pub features: Vec<String>,
    pub vim: f64,
    /// Joint importance of this group and every group deleted before it.
    pub cumulative_vim: Option<f64>,
    pub deleted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeselectionReport {
    pub single_vims: Vec<(String, f64)>,
    /// In deletion order (ascending group importance).
    pub groups: Vec<GroupVim>,
    pub retained: Vec<String>,
    pub deleted: Vec<String>,
    /// Units used for deselection; they must not be reused for estimation.
    pub selection_units: Vec<usize>,
    pub estimation_units: Vec<usize>,
}

/// Splits `ds` into a 20% selection sample (stratified by arm) and the rest,
/// grows a forest on the selection sample and deletes feature groups while
/// their cumulative permutation importance is non-positive.
pub fn feature_deselect(ds: &Dataset, cfg: &ForestConfig, seed: u64) -> Result<DeselectionReport> {
    let mut rng = rng_from(derive_seed(seed, "deselect-sample"));
    let mut selection_units = Vec::new();
    for d in 0..N_ARMS {
        let mut units: Vec<usize> = (0..ds.n_units()).filter(|&i| ds.units[i].treatment == d).collect();
        units.shuffle(&mut rng);
        let k = ((SELECTION_SHARE * units.len() as f64).round() as usize).max(1).min(units.len());
        selection_units.extend_from_slice(&units[..k]);
    }
    selection_units.sort_unstable();
    let mut is_sel = vec![false; ds.n_units()];
    for &i in &selection_units {
        is_sel[i] = true;
    }
    let estimation_units: Vec<usize> = (0..ds.n_units()).filter(|&i| !is_sel[i]).collect();
    let sel = ds.subset(&selection_units)?;
    let mut fcfg = cfg.clone();
    fcfg.seed = derive_seed(seed, "deselect-forest");
    fcfg.m_try = fcfg.m_try.min(sel.n_features());
    let forest = build_forest(&sel, &fcfg)?;

    let mut perm: Vec<usize> = (0..sel.n_units()).collect();
    perm.shuffle(&mut rng_from(derive_seed(seed, "deselect-permutation")));
    let base = oob_mse(&forest, &sel, &[], &perm);
    if !base.is_finite() {
        return Err(McfError::numeric("no out-of-bag predictions available for feature deselection"));
    }
    let vim = |cols: &[usize]| oob_mse(&forest, &sel, cols, &perm) - base;

    let p = sel.n_features();
    let singles: Vec<f64> = (0..p).map(|j| vim(&[j])).collect();
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| singles[a].total_cmp(&singles[b]).then(a.cmp(&b)));
    let n_groups = N_GROUPS.min(p);
    let groups: Vec<Vec<usize>> = (0..n_groups)
        .map(|g| order[g * p / n_groups..(g + 1) * p / n_groups].to_vec())
        .collect();
    let group_vims: Vec<f64> = groups.iter().map(|g| vim(g)).collect();
    let mut gorder: Vec<usize> = (0..n_groups).collect();
    gorder.sort_by(|&a, &b| group_vims[a].total_cmp(&group_vims[b]).then(a.cmp(&b)));

    let mut report_groups = Vec::new();
    let mut deleted_cols: Vec<usize> = Vec::new();
    let mut stopped = false;
    for &g in &gorder {
        let mut entry = GroupVim {
            features: groups[g].iter().map(|&j| sel.spec[j].name.clone()).collect(),
            vim: group_vims[g],
            cumulative_vim: None,
            deleted: false,
        };
        if !stopped && group_vims[g] <= 0.0 {
            let mut joint = deleted_cols.clone();
            joint.extend_from_slice(&groups[g]);
            let cum = vim(&joint);
            entry.cumulative_vim = Some(cum);
            if cum <= 0.0 {
                entry.deleted = true;
                deleted_cols = joint;
            } else {
                stopped = true;
            }
        } else {
            stopped = true;
        }
        report_groups.push(entry);
    }
    if deleted_cols.len() == p {
        // typically a selection forest with no admissible splits at all
        log::warn!("feature deselection found no informative feature; keeping all {p}");
        deleted_cols.clear();
        for g in &mut report_groups {
            g.deleted = false;
        }
    }
    deleted_cols.sort_unstable();
    let retained = (0..p)
        .filter(|j| deleted_cols.binary_search(j).is_err())
        .map(|j| sel.spec[j].name.clone())
        .collect();
    Ok(DeselectionReport {
        single_vims: (0..p).map(|j| (sel.spec[j].name.clone(), singles[j])).collect(),
        groups: report_groups,
        retained,
        deleted: deleted_cols.iter().map(|&j| sel.spec[j].name.clone()).collect(),
        selection_units,
        estimation_units,
    })
}

/// Picks the candidate `m_try` with the smallest out-of-bag error of the
/// split outcome; ties go to the smaller value.
pub fn tune_m_try(ds: &Dataset, cfg: &ForestConfig, candidates: &[usize]) -> Result<(usize, Vec<(usize, f64)>)> {
    let mut results = Vec::new();
    for &m in candidates {
        if m == 0 || m > ds.n_features() {
            continue;
        }
        let mut c = cfg.clone();
        c.m_try = m;
        let f = build_forest(ds, &c)?;
        results.push((m, oob_mse(&f, ds, &[], &[])));
    }
    let best = results
        .iter()
        .filter(|r| r.1.is_finite())
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .ok_or_else(|| McfError::config("no admissible m_try candidate"))?
        .0;
    Ok((best, results))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forest::tests::small_data;

    fn cfg() -> ForestConfig {
        ForestConfig {
            n_trees: 30,
            seed: 1,
            ..ForestConfig::default()
        }
    }

    #[test]
    fn selection_and_estimation_samples_partition_units() {
        let ds = small_data(1500, 3);
        let r = feature_deselect(&ds, &cfg(), 5).unwrap();
        assert_eq!(r.selection_units.len() + r.estimation_units.len(), ds.n_units());
        assert!(r.selection_units.iter().all(|i| r.estimation_units.binary_search(i).is_err()));
        let share = r.selection_units.len() as f64 / ds.n_units() as f64;
        assert!((share - 0.2).abs() < 0.01);
        assert_eq!(r.retained.len() + r.deleted.len(), ds.n_features());
        assert_eq!(r.groups.len(), 10);
        let mut all: Vec<String> = r.groups.iter().flat_map(|g| g.features.clone()).collect();
        all.sort();
        let mut names: Vec<String> = ds.spec.iter().map(|f| f.name.clone()).collect();
        names.sort();
        assert_eq!(all, names);
    }

    #[test]
    fn few_features_give_singleton_groups() {
        let ds = small_data(1500, 3);
        let keep: Vec<String> = ["age", "werk_2jaar", "Unem_10jaar", "noise_1"].iter().map(|s| s.to_string()).collect();
        let ds = ds.select_features(&keep).unwrap();
        let mut c = cfg();
        c.m_try = 2;
        let r = feature_deselect(&ds, &c, 2).unwrap();
        assert_eq!(r.groups.len(), 4);
        assert!(r.groups.iter().all(|g| g.features.len() == 1));
    }

    #[test]
    fn unsplittable_selection_sample_keeps_every_feature() {
        // about 4 units per programme in the selection sample: no tree can split
        let synth = crate::dataset::SynthConfig {
            n: 4000,
            shares: [0.005, 0.005, 0.005],
            ..Default::default()
        };
        let ds = crate::dataset::generate_synthetic(&synth, 1).unwrap();
        let r = feature_deselect(&ds, &cfg(), 3).unwrap();
        assert!(r.deleted.is_empty());
        assert_eq!(r.retained.len(), ds.n_features());
        assert!(r.groups.iter().all(|g| !g.deleted));
    }

    #[test]
    fn unused_feature_has_zero_importance() {
        let ds = small_data(600, 9);
        let f = build_forest(&ds, &cfg()).unwrap();
        let used: Vec<usize> = f
            .trees
            .iter()
            .flat_map(|t| t.nodes.iter())
            .filter_map(|n| match n {
                TreeNode::Split { feature, .. } => Some(*feature),
                TreeNode::Leaf { .. } => None,
            })
            .collect();
        let perm: Vec<usize> = (0..ds.n_units()).rev().collect();
        let base = oob_mse(&f, &ds, &[], &perm);
        for j in 0..ds.n_features() {
            if !used.contains(&j) {
                assert_eq!(oob_mse(&f, &ds, &[j], &perm), base);
            }
        }
    }
}
