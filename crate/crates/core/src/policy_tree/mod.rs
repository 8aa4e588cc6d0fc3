//! Shallow policy trees found by exhaustive search.
//!
//! `depth` counts levels including the leaf level: depth 1 is a single leaf,
//! depth 2 one split with two leaves, depth 4 up to eight strata.

mod search;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::dataset::{FeatureKind, FeatureSpec};
use crate::forest::SplitRule;
use crate::{McfError, Result};

use search::{satisfies, search, Ctx};

/// Per-unit policy values, one column per arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    pub arm_labels: Vec<String>,
    /// `[unit][arm]`.
    pub scores: Vec<Vec<f64>>,
}

impl ScoreMatrix {
    pub fn new(arm_labels: Vec<String>, scores: Vec<Vec<f64>>) -> Result<Self> {
        if arm_labels.is_empty() {
            return Err(McfError::config("score matrix needs at least one arm"));
        }
        for (i, row) in scores.iter().enumerate() {
            if row.len() != arm_labels.len() {
                return Err(McfError::data(format!(
                    "score row {} has {} values for {} arms",
                    i + 1,
                    row.len(),
                    arm_labels.len()
                )));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(McfError::data(format!("score row {} is not finite", i + 1)));
            }
        }
        Ok(Self { arm_labels, scores })
    }

    pub fn n_units(&self) -> usize {
        self.scores.len()
    }

    pub fn n_arms(&self) -> usize {
        self.arm_labels.len()
    }

    /// Total score of an assignment.
    pub fn value(&self, arms: &[usize]) -> f64 {
        self.scores.iter().zip(arms).map(|(s, &d)| s[d]).sum()
    }
}

/// Upper limits on assignment shares.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Restrictions {
    /// Largest share per arm.
    pub max_shares: Option<Vec<f64>>,
    /// Largest share over every arm except the first.
    pub max_treated_share: Option<f64>,
}

impl Restrictions {
    pub fn is_empty(&self) -> bool {
        self.max_shares.is_none() && self.max_treated_share.is_none()
    }

    pub fn validate(&self, n_arms: usize) -> Result<()> {
        if let Some(s) = &self.max_shares {
            if s.len() != n_arms {
                return Err(McfError::config(format!("{} share limits for {n_arms} arms", s.len())));
            }
            if s.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(McfError::config("share limits must lie in [0, 1]"));
            }
        }
        if let Some(v) = self.max_treated_share {
            if !(0.0..=1.0).contains(&v) {
                return Err(McfError::config("overall share limit must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    /// Whether the assignment `arms` respects every limit.
    pub fn satisfied_by(&self, arms: &[usize], n_arms: usize) -> bool {
        let mut counts = vec![0; n_arms];
        for &d in arms {
            counts[d] += 1;
        }
        satisfies(self, &counts, arms.len())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyTreeConfig {
    pub depth: usize,
    /// Grid step for ordered features at the root; halved at every level below.
    pub approximation: usize,
    /// Ordered features with fewer distinct values than this use all of
    /// them; defaults to `approximation`.
    pub max_category_values: Option<usize>,
    pub restrictions: Restrictions,
}

impl Default for PolicyTreeConfig {
    fn default() -> Self {
        Self {
            depth: 3,
            approximation: 64,
            max_category_values: None,
            restrictions: Restrictions::default(),
        }
    }
}

impl PolicyTreeConfig {
    pub fn validate(&self, n_arms: usize) -> Result<()> {
        if self.depth == 0 {
            return Err(McfError::config("policy tree depth must be at least 1"));
        }
        if self.approximation == 0 {
            return Err(McfError::config("approximation parameter must be at least 1"));
        }
        self.restrictions.validate(n_arms)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PolicyNode {
    Leaf {
        arm: usize,
    },
    Split {
        feature: usize,
        rule: SplitRule,
        left: Box<PolicyNode>,
        right: Box<PolicyNode>,
    },
}

impl PolicyNode {
    fn levels(&self) -> usize {
        match self {
            PolicyNode::Leaf { .. } => 1,
            PolicyNode::Split { left, right, .. } => 1 + left.levels().max(right.levels()),
        }
    }

    fn n_leaves(&self) -> usize {
        match self {
            PolicyNode::Leaf { .. } => 1,
            PolicyNode::Split { left, right, .. } => left.n_leaves() + right.n_leaves(),
        }
    }

    fn route(&self, x: &[f64]) -> usize {
        match self {
            PolicyNode::Leaf { arm } => *arm,
            PolicyNode::Split {
                feature,
                rule,
                left,
                right,
            } => {
                if rule.goes_left(x[*feature]) {
                    left.route(x)
                } else {
                    right.route(x)
                }
            }
        }
    }

    fn reward(&self, x: &[Vec<f64>], scores: &[Vec<f64>], units: &[usize]) -> f64 {
        match self {
            PolicyNode::Leaf { arm } => units.iter().map(|&i| scores[i][*arm]).sum(),
            PolicyNode::Split {
                feature,
                rule,
                left,
                right,
            } => {
                let (l, r): (Vec<usize>, Vec<usize>) = units.iter().partition(|&&i| rule.goes_left(x[i][*feature]));
                left.reward(x, scores, &l) + right.reward(x, scores, &r)
            }
        }
    }

    /// Collapses splits whose two children are leaves with the same arm.
    fn merged(&self) -> PolicyNode {
        match self {
            PolicyNode::Leaf { .. } => self.clone(),
            PolicyNode::Split {
                feature,
                rule,
                left,
                right,
            } => {
                let l = left.merged();
                let r = right.merged();
                match (&l, &r) {
                    (PolicyNode::Leaf { arm: a }, PolicyNode::Leaf { arm: b }) if a == b => l,
                    _ => PolicyNode::Split {
                        feature: *feature,
                        rule: rule.clone(),
                        left: Box::new(l),
                        right: Box::new(r),
                    },
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyTree {
    pub root: PolicyNode,
    /// Total score of the training units under the tree.
    pub reward: f64,
    pub config: PolicyTreeConfig,
    pub features: Vec<FeatureSpec>,
    pub arm_labels: Vec<String>,
    /// Category codes seen in training, per categorical feature.
    pub seen_categories: Vec<Option<Vec<usize>>>,
    /// No tree satisfies the restrictions; the tree shown ignores them.
    pub infeasible: bool,
}

/// One stratum of a merged tree.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RuleRow {
    pub conditions: Vec<String>,
    pub arm: String,
}

/// Searches the best tree of `cfg.depth` levels for the scores and features.
/// `x` holds one row per unit with category codes for categorical features.
pub fn tree_search(
    scores: &ScoreMatrix,
    x: &[Vec<f64>],
    features: &[FeatureSpec],
    cfg: &PolicyTreeConfig,
) -> Result<PolicyTree> {
    cfg.validate(scores.n_arms())?;
    let n = scores.n_units();
    if n == 0 {
        return Err(McfError::data("policy tree needs at least one unit"));
    }
    if x.len() != n {
        return Err(McfError::data(format!("{} feature rows for {n} score rows", x.len())));
    }
    if let Some((i, _)) = x.iter().enumerate().find(|(_, r)| r.len() != features.len()) {
        return Err(McfError::data(format!("feature row {} has the wrong length", i + 1)));
    }
    let cols: Vec<Vec<f64>> = (0..features.len()).map(|j| x.iter().map(|r| r[j]).collect()).collect();
    let categorical: Vec<bool> = features.iter().map(FeatureSpec::is_categorical).collect();
    let seen_categories = cols
        .iter()
        .zip(&categorical)
        .map(|(c, &cat)| {
            cat.then(|| c.iter().map(|&v| v as usize).collect::<BTreeSet<_>>().into_iter().collect())
        })
        .collect();
    let max_values = cfg.max_category_values.unwrap_or(cfg.approximation);
    let ctx = Ctx::new(&scores.scores, cols, categorical, &cfg.restrictions, max_values);
    let units: Vec<usize> = (0..n).collect();
    let found = search(&ctx, &units, cfg.depth, cfg.approximation);

    let mut tree = PolicyTree {
        root: found.node,
        reward: 0.0,
        config: cfg.clone(),
        features: features.to_vec(),
        arm_labels: scores.arm_labels.clone(),
        seen_categories,
        infeasible: false,
    };
    let arms: Vec<usize> = x.iter().map(|r| tree.root.route(r)).collect();
    if !cfg.restrictions.satisfied_by(&arms, scores.n_arms()) {
        // best single arm that respects the limits
        let sums: Vec<f64> = (0..scores.n_arms())
            .map(|d| scores.scores.iter().map(|s| s[d]).sum())
            .collect();
        let feasible = (0..scores.n_arms())
            .filter(|&d| cfg.restrictions.satisfied_by(&vec![d; n], scores.n_arms()))
            .fold(None, |b: Option<usize>, d| match b {
                Some(b) if sums[b] >= sums[d] => Some(b),
                _ => Some(d),
            });
        match feasible {
            Some(d) => tree.root = PolicyNode::Leaf { arm: d },
            None => {
                log::warn!("no policy tree satisfies the share restrictions");
                tree.infeasible = true;
            }
        }
    }
    tree.reward = tree.root.reward(x, &scores.scores, &units);
    Ok(tree)
}

impl PolicyTree {
    pub fn levels(&self) -> usize {
        self.root.levels()
    }

    pub fn n_leaves(&self) -> usize {
        self.root.n_leaves()
    }

    /// Arm of every row of `x`.
    pub fn predict(&self, x: &[Vec<f64>]) -> Result<Vec<usize>> {
        x.iter()
            .enumerate()
            .map(|(i, row)| {
                if row.len() != self.features.len() {
                    return Err(McfError::data(format!("feature row {} has the wrong length", i + 1)));
                }
                for (j, seen) in self.seen_categories.iter().enumerate() {
                    if let Some(seen) = seen {
                        let code = row[j] as usize;
                        if seen.binary_search(&code).is_err() {
                            let label = self.features[j].category_label(code).unwrap_or("?");
                            return Err(McfError::data(format!(
                                "row {}: category `{label}` of `{}` was not seen in training",
                                i + 1,
                                self.features[j].name
                            )));
                        }
                    }
                }
                Ok(self.root.route(row))
            })
            .collect()
    }

    /// Reward of the tree on `x` and `scores`, summed leaf by leaf exactly as
    /// the stored reward.
    pub fn evaluate(&self, scores: &ScoreMatrix, x: &[Vec<f64>]) -> f64 {
        let units: Vec<usize> = (0..scores.n_units()).collect();
        self.root.reward(x, &scores.scores, &units)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// One row per stratum after merging sibling leaves with the same arm.
    pub fn rules(&self) -> Vec<RuleRow> {
        let mut out = Vec::new();
        let mut path = Vec::new();
        self.collect_rules(&self.root.merged(), &mut path, &mut out);
        out
    }

    fn collect_rules(&self, node: &PolicyNode, path: &mut Vec<(usize, SplitRule, bool)>, out: &mut Vec<RuleRow>) {
        match node {
            PolicyNode::Leaf { arm } => out.push(RuleRow {
                conditions: self.describe(path),
                arm: self.arm_labels.get(*arm).cloned().unwrap_or_else(|| arm.to_string()),
            }),
            PolicyNode::Split {
                feature,
                rule,
                left,
                right,
            } => {
                path.push((*feature, rule.clone(), true));
                self.collect_rules(left, path, out);
                path.pop();
                path.push((*feature, rule.clone(), false));
                self.collect_rules(right, path, out);
                path.pop();
            }
        }
    }

    fn describe(&self, path: &[(usize, SplitRule, bool)]) -> Vec<String> {
        let mut order: Vec<usize> = Vec::new();
        for (f, _, _) in path {
            if !order.contains(f) {
                order.push(*f);
            }
        }
        order
            .into_iter()
            .map(|f| {
                let spec = &self.features[f];
                match &spec.kind {
                    FeatureKind::Ordered => {
                        let mut lo: Option<f64> = None;
                        let mut hi: Option<f64> = None;
                        for (_, rule, left) in path.iter().filter(|p| p.0 == f) {
                            if let SplitRule::LessEq(t) = rule {
                                if *left {
                                    hi = Some(hi.map_or(*t, |h| h.min(*t)));
                                } else {
                                    lo = Some(lo.map_or(*t, |l| l.max(*t)));
                                }
                            }
                        }
                        match (lo, hi) {
                            (Some(l), Some(h)) => format!("{l} < {} ≤ {h}", spec.name),
                            (Some(l), None) => format!("{} > {l}", spec.name),
                            (None, Some(h)) => format!("{} ≤ {h}", spec.name),
                            (None, None) => String::new(),
                        }
                    }
                    FeatureKind::Categorical { categories } => {
                        let mut allowed: Vec<usize> = (0..categories.len()).collect();
                        for (_, rule, left) in path.iter().filter(|p| p.0 == f) {
                            if let SplitRule::InSet(set) = rule {
                                allowed.retain(|c| set.contains(c) == *left);
                            }
                        }
                        let labels: Vec<&str> = allowed.iter().map(|&c| categories[c].as_str()).collect();
                        format!("{} ∈ {{{}}}", spec.name, labels.join(", "))
                    }
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::FeatureRole;
    use proptest::prelude::*;

    fn ordered(names: &[&str]) -> Vec<FeatureSpec> {
        names.iter().map(|n| FeatureSpec::ordered(n, FeatureRole::Both)).collect()
    }

    fn scores(rows: Vec<Vec<f64>>) -> ScoreMatrix {
        let k = rows[0].len();
        ScoreMatrix::new((0..k).map(|d| format!("arm{d}")).collect(), rows).unwrap()
    }

    fn exact(depth: usize) -> PolicyTreeConfig {
        PolicyTreeConfig {
            depth,
            approximation: 1,
            ..PolicyTreeConfig::default()
        }
    }

    /// Best reward over every tree with at most `depth` levels, splitting
    /// ordered features at any value below the maximum.
    fn oracle(s: &[Vec<f64>], x: &[Vec<f64>], units: &[usize], depth: usize) -> f64 {
        let k = s[0].len();
        let leaf = (0..k)
            .map(|d| units.iter().map(|&i| s[i][d]).sum::<f64>())
            .fold(f64::NEG_INFINITY, f64::max);
        if depth == 1 {
            return leaf;
        }
        let mut best = leaf;
        for j in 0..x[0].len() {
            let mut vals: Vec<f64> = units.iter().map(|&i| x[i][j]).collect();
            vals.sort_by(f64::total_cmp);
            vals.dedup();
            for &t in &vals[..vals.len() - 1] {
                let (l, r): (Vec<usize>, Vec<usize>) = units.iter().partition(|&&i| x[i][j] <= t);
                best = best.max(oracle(s, x, &l, depth - 1) + oracle(s, x, &r, depth - 1));
            }
        }
        best
    }

    #[test]
    fn single_level_picks_best_arm() {
        let s = scores(vec![vec![1.0, 1.0], vec![1.0, 3.0]]);
        let x = vec![vec![0.0], vec![1.0]];
        let t = tree_search(&s, &x, &ordered(&["a"]), &exact(1)).unwrap();
        assert_eq!(t.root, PolicyNode::Leaf { arm: 1 });
        assert_eq!(t.reward, 4.0);
        assert_eq!(t.predict(&x).unwrap(), vec![1, 1]);
    }

    #[test]
    fn two_level_example() {
        let s = scores(vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 2.0], vec![0.0, 2.0]]);
        let x: Vec<Vec<f64>> = (1..=4).map(|v| vec![f64::from(v)]).collect();
        let t = tree_search(&s, &x, &ordered(&["x"]), &exact(2)).unwrap();
        assert_eq!(t.reward, 6.0);
        match &t.root {
            PolicyNode::Split { rule, left, right, .. } => {
                assert_eq!(*rule, SplitRule::LessEq(2.0));
                assert_eq!(**left, PolicyNode::Leaf { arm: 0 });
                assert_eq!(**right, PolicyNode::Leaf { arm: 1 });
            }
            other => panic!("expected a split, got {other:?}"),
        }
        assert_eq!(t.predict(&x).unwrap(), vec![0, 0, 1, 1]);
    }

    #[test]
    fn rule_table_merges_equal_siblings() {
        let features = vec![
            FeatureSpec::ordered("age", FeatureRole::Both),
            FeatureSpec::categorical("Woman", &["0", "1"], FeatureRole::Both),
        ];
        let root = PolicyNode::Split {
            feature: 0,
            rule: SplitRule::LessEq(28.2),
            left: Box::new(PolicyNode::Split {
                feature: 1,
                rule: SplitRule::InSet(vec![0]),
                left: Box::new(PolicyNode::Leaf { arm: 0 }),
                right: Box::new(PolicyNode::Leaf { arm: 0 }),
            }),
            right: Box::new(PolicyNode::Split {
                feature: 0,
                rule: SplitRule::LessEq(45.0),
                left: Box::new(PolicyNode::Leaf { arm: 1 }),
                right: Box::new(PolicyNode::Leaf { arm: 3 }),
            }),
        };
        let tree = PolicyTree {
            root,
            reward: 0.0,
            config: PolicyTreeConfig::default(),
            features,
            arm_labels: crate::ARM_LABELS.iter().map(|s| s.to_string()).collect(),
            seen_categories: vec![None, Some(vec![0, 1])],
            infeasible: false,
        };
        let rules = tree.rules();
        assert_eq!(rules.len(), 3);
        assert_eq!(rules[0].conditions, vec!["age ≤ 28.2"]);
        assert_eq!(rules[0].arm, "NOP");
        assert_eq!(rules[1].conditions, vec!["28.2 < age ≤ 45"]);
        assert_eq!(rules[2].conditions, vec!["age > 45"]);
        assert_eq!(rules[2].arm, "OT");
        assert!(tree.predict(&[vec![30.0, 2.0]]).is_err());
        let back = PolicyTree::from_json(&tree.to_json().unwrap()).unwrap();
        assert_eq!(back, tree);
    }

    #[test]
    fn categorical_prefix_split() {
        // category 1 favours arm 1, categories 0 and 2 arm 0
        let features = vec![FeatureSpec::categorical("c", &["a", "b", "c"], FeatureRole::Both)];
        let x = vec![vec![0.0], vec![1.0], vec![2.0], vec![1.0]];
        let s = scores(vec![vec![1.0, 0.0], vec![0.0, 5.0], vec![1.0, 0.5], vec![0.0, 5.0]]);
        let t = tree_search(&s, &x, &features, &exact(2)).unwrap();
        assert_eq!(t.reward, 12.0);
        assert_eq!(t.predict(&x).unwrap(), vec![0, 1, 0, 1]);
    }

    #[test]
    fn restricted_tree_respects_caps() {
        let s = scores(vec![vec![0.0, 3.0], vec![0.0, 3.0], vec![2.0, 3.0], vec![2.0, 3.0]]);
        let x: Vec<Vec<f64>> = (1..=4).map(|v| vec![f64::from(v)]).collect();
        let mut cfg = exact(2);
        cfg.restrictions.max_shares = Some(vec![1.0, 0.5]);
        let t = tree_search(&s, &x, &ordered(&["x"]), &cfg).unwrap();
        let arms = t.predict(&x).unwrap();
        assert!(cfg.restrictions.satisfied_by(&arms, 2));
        assert_eq!(t.reward, 10.0);
        assert!(!t.infeasible);
    }

    #[test]
    fn impossible_caps_are_flagged() {
        let s = scores(vec![vec![0.0, 1.0], vec![0.0, 1.0]]);
        let x = vec![vec![0.0], vec![1.0]];
        let mut cfg = exact(2);
        cfg.restrictions.max_shares = Some(vec![0.0, 0.0]);
        assert!(tree_search(&s, &x, &ordered(&["x"]), &cfg).unwrap().infeasible);
    }

    #[test]
    fn bad_configs_rejected() {
        let s = scores(vec![vec![0.0, 1.0]]);
        let x = vec![vec![0.0]];
        let f = ordered(&["x"]);
        assert!(tree_search(&s, &x, &f, &exact(0)).is_err());
        let mut c = exact(2);
        c.restrictions.max_shares = Some(vec![1.0]);
        assert!(tree_search(&s, &x, &f, &c).is_err());
        assert!(ScoreMatrix::new(vec!["a".into()], vec![vec![f64::NAN]]).is_err());
    }

    fn instance() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<Vec<f64>>, usize)> {
        (2usize..=12, 1usize..=3, 2usize..=3, 1usize..=3).prop_flat_map(|(n, p, k, depth)| {
            (
                prop::collection::vec(prop::collection::vec((-16i32..=16).prop_map(|v| f64::from(v) / 4.0), k), n),
                prop::collection::vec(prop::collection::vec((0i32..6).prop_map(f64::from), p), n),
                Just(depth),
            )
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn matches_exhaustive_oracle((s, x, depth) in instance()) {
            let p = x[0].len();
            let names: Vec<String> = (0..p).map(|j| format!("x{j}")).collect();
            let f: Vec<FeatureSpec> = names.iter().map(|n| FeatureSpec::ordered(n, FeatureRole::Both)).collect();
            let sm = scores(s.clone());
            let t = tree_search(&sm, &x, &f, &exact(depth)).unwrap();
            let units: Vec<usize> = (0..s.len()).collect();
            prop_assert_eq!(t.reward, oracle(&s, &x, &units, depth));
            prop_assert!(t.levels() <= depth);
            prop_assert!(t.n_leaves() <= 1 << (depth - 1));
            prop_assert_eq!(t.evaluate(&sm, &x), t.reward);
            let arms = t.predict(&x).unwrap();
            prop_assert_eq!(sm.value(&arms), t.reward);
            for a in [2usize, 3, 5] {
                let mut c = exact(depth);
                c.approximation = a;
                prop_assert!(tree_search(&sm, &x, &f, &c).unwrap().reward <= t.reward);
            }
        }
    }
}
