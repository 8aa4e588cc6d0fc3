//! Honest causal forest with a selection-penalised splitting rule.
//!
//! Each tree is grown on a subsample drawn without replacement and split,
//! within every arm, into a building half and an honest half. The building
//! half chooses the splits; leaves keep only the honest members of each arm.
//! Every leaf has at least one honest member of every arm, so a unit's
//! comparison weights are defined for all arms in every tree.

mod deselect;
mod split;
mod weights;

use rand::seq::{index, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, FeatureKind, FeatureSpec, LabourState, Outcome};
use crate::rng::{derive_indexed, rng_from, Rng};
use crate::stats::population_variance;
use crate::{McfError, Result, N_ARMS};

pub use deselect::{feature_deselect, oob_mse, tune_m_try, DeselectionReport, GroupVim};
pub use split::{split_score, ArmStats, SplitScore};
pub use weights::{
    aggregate_weights, compute_weights, weight_diagnostics, AggregatedWeights, WeightDiagnostics, WeightMatrix,
    WeightRow, CONCERN_THRESHOLD, DIAGNOSTIC_THRESHOLDS,
};

pub const FOREST_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestConfig {
    pub n_trees: usize,
    /// Share of each arm drawn (without replacement) for a tree.
    pub subsample_share: f64,
    /// Minimum number of units in a leaf, in each half.
    pub min_leaf: usize,
    /// Features drawn as split candidates at every node.
    pub m_try: usize,
    /// Penalty weight as a multiple of the split outcome's variance.
    pub penalty_multiplier: f64,
    /// Share of each subsample used for the honest leaf estimates.
    pub honest_share: f64,
    /// Outcome whose building-half means drive the splits.
    pub split_outcome: Outcome,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            n_trees: 1000,
            subsample_share: 0.67,
            min_leaf: 5,
            m_try: 6,
            penalty_multiplier: 1.0,
            honest_share: 0.5,
            split_outcome: Outcome::new(LabourState::Employed, 1, 30),
            seed: 0,
        }
    }
}

impl ForestConfig {
    pub fn validate(&self, n_features: usize) -> Result<()> {
        if self.n_trees == 0 {
            return Err(McfError::config("forest needs at least one tree"));
        }
        if !(self.subsample_share > 0.0 && self.subsample_share <= 1.0) {
            return Err(McfError::config("subsample share must lie in (0, 1]"));
        }
        if !(self.honest_share > 0.0 && self.honest_share <= 1.0) {
            return Err(McfError::config("honest share must lie in (0, 1]"));
        }
        if self.min_leaf < 2 {
            return Err(McfError::config("minimum leaf size must be at least 2"));
        }
        if self.m_try == 0 || self.m_try > n_features {
            return Err(McfError::config(format!(
                "m_try must lie in 1..={n_features}, got {}",
                self.m_try
            )));
        }
        if !(self.penalty_multiplier >= 0.0 && self.penalty_multiplier.is_finite()) {
            return Err(McfError::config("penalty multiplier must be finite and nonnegative"));
        }
        self.split_outcome.validate(crate::dataset::HORIZON_MONTHS)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SplitRule {
    /// Left if the value is at most the threshold.
    LessEq(f64),
    /// Left if the category code is in the set; every other code goes right.
    InSet(Vec<usize>),
}

impl SplitRule {
    pub fn goes_left(&self, x: f64) -> bool {
        match self {
            SplitRule::LessEq(v) => x <= *v,
            SplitRule::InSet(set) => set.iter().any(|&c| c as f64 == x),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TreeNode {
    Split {
        feature: usize,
        rule: SplitRule,
        left: usize,
        right: usize,
    },
    /// Honest members of each arm, as training-unit indices.
    Leaf { members: [Vec<u32>; N_ARMS] },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    /// Root is node 0.
    pub nodes: Vec<TreeNode>,
    /// Units whose outcomes chose the splits; never leaf members.
    pub building: Vec<u32>,
}

impl Tree {
    pub fn leaf_of(&self, x: &[f64]) -> usize {
        let mut k = 0;
        loop {
            match &self.nodes[k] {
                TreeNode::Leaf { .. } => return k,
                TreeNode::Split {
                    feature,
                    rule,
                    left,
                    right,
                } => k = if rule.goes_left(x[*feature]) { *left } else { *right },
            }
        }
    }

    pub fn leaf_members(&self, node: usize) -> &[Vec<u32>; N_ARMS] {
        match &self.nodes[node] {
            TreeNode::Leaf { members } => members,
            TreeNode::Split { .. } => panic!("node {node} is not a leaf"),
        }
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, TreeNode::Leaf { .. })).count()
    }

    /// Honest members of every leaf, in node order.
    pub fn honest_units(&self) -> Vec<u32> {
        let mut v: Vec<u32> = self
            .nodes
            .iter()
            .filter_map(|n| match n {
                TreeNode::Leaf { members } => Some(members.iter().flatten().copied()),
                TreeNode::Split { .. } => None,
            })
            .flatten()
            .collect();
        v.sort_unstable();
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub version: u32,
    pub config: ForestConfig,
    pub spec: Vec<FeatureSpec>,
    /// Arm of every training unit; weights index into this sample.
    pub train_arms: Vec<usize>,
    pub trees: Vec<Tree>,
}

impl ForestModel {
    pub fn n_train(&self) -> usize {
        self.train_arms.len()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(s)?;
        if m.version != FOREST_FORMAT_VERSION {
            return Err(McfError::config(format!(
                "forest format version {} is not supported (expected {FOREST_FORMAT_VERSION})",
                m.version
            )));
        }
        Ok(m)
    }

    /// Checks that `ds` has the forest's feature layout.
    pub fn check_features(&self, ds: &Dataset) -> Result<()> {
        if ds.spec != self.spec {
            return Err(McfError::data("target features do not match the forest's feature specification"));
        }
        Ok(())
    }

    /// Leaf node of every target in every tree, `[tree][target]`.
    pub fn assign_leaves(&self, targets: &[Vec<f64>]) -> Vec<Vec<u32>> {
        self.trees
            .par_iter()
            .map(|t| targets.iter().map(|x| t.leaf_of(x) as u32).collect())
            .collect()
    }
}

/// Column-major view of the data a tree is grown on.
pub(crate) struct GrowData<'a> {
    pub cols: Vec<Vec<f64>>,
    pub categorical: Vec<bool>,
    pub y: &'a [f64],
    pub arms: &'a [usize],
}

pub(crate) struct GrowParams {
    pub min_leaf: usize,
    pub m_try: usize,
    pub lambda: f64,
}

fn grow_tree(data: &GrowData, params: &GrowParams, building: Vec<u32>, honest: Vec<u32>, rng: &mut Rng) -> Tree {
    let p = data.cols.len();
    let mut nodes: Vec<TreeNode> = Vec::new();
    // (node slot, building units, honest units)
    let mut stack = vec![(0usize, building.clone(), honest)];
    nodes.push(TreeNode::Leaf {
        members: Default::default(),
    });
    while let Some((slot, b, h)) = stack.pop() {
        let features: Vec<usize> = index::sample(rng, p, params.m_try.min(p)).into_vec();
        match split::best_split(data, params, &b, &h, &features) {
            Some(best) => {
                let (bl, br): (Vec<u32>, Vec<u32>) =
                    b.iter().partition(|&&i| best.rule.goes_left(data.cols[best.feature][i as usize]));
                let (hl, hr): (Vec<u32>, Vec<u32>) =
                    h.iter().partition(|&&i| best.rule.goes_left(data.cols[best.feature][i as usize]));
                let left = nodes.len();
                let right = left + 1;
                nodes.push(TreeNode::Leaf {
                    members: Default::default(),
                });
                nodes.push(TreeNode::Leaf {
                    members: Default::default(),
                });
                nodes[slot] = TreeNode::Split {
                    feature: best.feature,
                    rule: best.rule,
                    left,
                    right,
                };
                // right first so the left subtree is grown first
                stack.push((right, br, hr));
                stack.push((left, bl, hl));
            }
            None => {
                let mut members: [Vec<u32>; N_ARMS] = Default::default();
                for &i in &h {
                    members[data.arms[i as usize]].push(i);
                }
                for m in members.iter_mut() {
                    m.sort_unstable();
                }
                nodes[slot] = TreeNode::Leaf { members };
            }
        }
    }
    let mut building = building;
    building.sort_unstable();
    Tree { nodes, building }
}

/// Stratified subsample split into building and honest halves.
fn draw_halves(by_arm: &[Vec<u32>; N_ARMS], cfg: &ForestConfig, rng: &mut Rng) -> (Vec<u32>, Vec<u32>) {
    let mut building = Vec::new();
    let mut honest = Vec::new();
    for units in by_arm {
        let n_d = units.len();
        let m = ((cfg.subsample_share * n_d as f64).round() as usize).clamp(n_d.min(2), n_d);
        let mut pick: Vec<u32> = index::sample(rng, n_d, m).into_iter().map(|k| units[k]).collect();
        pick.shuffle(rng);
        let h = ((cfg.honest_share * m as f64).round() as usize).clamp(1.min(m), m);
        honest.extend_from_slice(&pick[..h]);
        building.extend_from_slice(&pick[h..]);
    }
    (building, honest)
}

/// Builds the forest. Trees are independent and seeded by index, so the
/// result does not depend on the number of worker threads.
pub fn build_forest(ds: &Dataset, cfg: &ForestConfig) -> Result<ForestModel> {
    cfg.validate(ds.n_features())?;
    let counts = ds.arm_counts();
    if let Some(d) = counts.iter().position(|&c| c == 0) {
        return Err(McfError::data(format!("arm {d} is absent from the training data")));
    }
    let y = ds.outcome_values(&cfg.split_outcome);
    let arms = ds.treatments();
    let lambda = cfg.penalty_multiplier * population_variance(&y);
    let data = GrowData {
        cols: (0..ds.n_features()).map(|j| ds.column(j)).collect(),
        categorical: ds.spec.iter().map(|f| matches!(f.kind, FeatureKind::Categorical { .. })).collect(),
        y: &y,
        arms: &arms,
    };
    let params = GrowParams {
        min_leaf: cfg.min_leaf,
        m_try: cfg.m_try,
        lambda,
    };
    let mut by_arm: [Vec<u32>; N_ARMS] = Default::default();
    for (i, &d) in arms.iter().enumerate() {
        by_arm[d].push(i as u32);
    }
    let trees: Vec<Tree> = (0..cfg.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = rng_from(derive_indexed(cfg.seed, "tree", t as u64));
            let (b, h) = draw_halves(&by_arm, cfg, &mut rng);
            grow_tree(&data, &params, b, h, &mut rng)
        })
        .collect();
    Ok(ForestModel {
        version: FOREST_FORMAT_VERSION,
        config: cfg.clone(),
        spec: ds.spec.clone(),
        train_arms: arms,
        trees,
    })
}
