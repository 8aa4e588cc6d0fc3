//! Exhaustive depth-limited tree search with restrictions.

use rayon::prelude::*;

use super::{PolicyNode, Restrictions};
use crate::forest::SplitRule;

/// Leaf of a candidate tree with its per-arm score sums.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct LeafInfo {
    pub arm: usize,
    pub count: usize,
    pub sums: Vec<f64>,
}

impl LeafInfo {
    fn new(sums: Vec<f64>, count: usize) -> Self {
        Self {
            arm: best_arm(&sums),
            count,
            sums,
        }
    }

    fn reward(&self) -> f64 {
        self.sums[self.arm]
    }

    /// Population variance of the within-leaf mean scores across arms.
    fn variance(&self) -> f64 {
        let k = self.sums.len() as f64;
        let means: Vec<f64> = self.sums.iter().map(|s| s / self.count as f64).collect();
        let m = means.iter().sum::<f64>() / k;
        means.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / k
    }
}

/// Highest value, lowest index on ties.
pub(crate) fn best_arm(v: &[f64]) -> usize {
    let mut best = 0;
    for (d, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = d;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Found {
    pub reward: f64,
    pub node: PolicyNode,
    /// Leaves in left-to-right order of `node`.
    pub leaves: Vec<LeafInfo>,
}

impl Found {
    fn leaf(info: LeafInfo) -> Self {
        Self {
            reward: info.reward(),
            node: PolicyNode::Leaf { arm: info.arm },
            leaves: vec![info],
        }
    }
}

pub(crate) struct Ctx<'a> {
    pub scores: &'a [Vec<f64>],
    /// `[feature][unit]`.
    pub cols: Vec<Vec<f64>>,
    pub categorical: Vec<bool>,
    /// Rank of each unit's value within its feature (equal values share a rank).
    pub ranks: Vec<Vec<u32>>,
    pub n_arms: usize,
    pub restrictions: &'a Restrictions,
    pub max_values: usize,
}

impl<'a> Ctx<'a> {
    pub fn new(
        scores: &'a [Vec<f64>],
        cols: Vec<Vec<f64>>,
        categorical: Vec<bool>,
        restrictions: &'a Restrictions,
        max_values: usize,
    ) -> Self {
        let ranks = cols
            .iter()
            .map(|c| {
                let mut v = c.clone();
                v.sort_by(f64::total_cmp);
                v.dedup();
                c.iter()
                    .map(|x| v.binary_search_by(|p| p.total_cmp(x)).expect("value present") as u32)
                    .collect()
            })
            .collect();
        Self {
            n_arms: scores.first().map_or(0, Vec::len),
            scores,
            cols,
            categorical,
            ranks,
            restrictions,
            max_values,
        }
    }

    fn sums(&self, units: &[usize]) -> Vec<f64> {
        let mut s = vec![0.0; self.n_arms];
        for &i in units {
            for (a, v) in s.iter_mut().zip(&self.scores[i]) {
                *a += v;
            }
        }
        s
    }

    /// Best single arm for `units`, ignoring restrictions.
    pub fn leaf(&self, units: &[usize]) -> Found {
        Found::leaf(LeafInfo::new(self.sums(units), units.len()))
    }
}

/// Candidate thresholds of an ordered feature: all distinct values when
/// there are fewer than `max_values`, otherwise every `a`-th sorted value
/// with repeats dropped. The last element is never a threshold.
pub(crate) fn ordered_grid(sorted: &[f64], a: usize, max_values: usize) -> Vec<f64> {
    let mut distinct = sorted.to_vec();
    distinct.dedup();
    let mut k = if distinct.len() < max_values {
        distinct
    } else {
        let mut k: Vec<f64> = sorted.iter().step_by(a.max(1)).copied().collect();
        k.dedup();
        k
    };
    k.pop();
    k
}

/// Category codes present in `units`, ordered by the mean across-arm score
/// variance of their units; ties keep first-seen order.
pub(crate) fn category_order(units: &[usize], col: &[f64], scores: &[Vec<f64>]) -> Vec<usize> {
    let mut seen: Vec<(usize, f64, usize)> = Vec::new();
    for &i in units {
        let code = col[i] as usize;
        let s = &scores[i];
        let k = s.len() as f64;
        let m = s.iter().sum::<f64>() / k;
        let var = s.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / k;
        match seen.iter_mut().find(|e| e.0 == code) {
            Some(e) => {
                e.1 += var;
                e.2 += 1;
            }
            None => seen.push((code, var, 1)),
        }
    }
    let mut keyed: Vec<(usize, f64)> = seen.iter().map(|e| (e.0, e.1 / e.2 as f64)).collect();
    keyed.sort_by(|a, b| a.1.total_cmp(&b.1));
    keyed.into_iter().map(|e| e.0).collect()
}

fn allowed(cap: f64, n: usize) -> usize {
    (cap * n as f64 + 1e-9).floor() as usize
}

fn arm_counts(leaves: &[LeafInfo], n_arms: usize) -> Vec<usize> {
    let mut c = vec![0; n_arms];
    for l in leaves {
        c[l.arm] += l.count;
    }
    c
}

/// Whether assigning `counts` over `n` units satisfies `r`.
pub(crate) fn satisfies(r: &Restrictions, counts: &[usize], n: usize) -> bool {
    if let Some(caps) = &r.max_shares {
        if counts.iter().zip(caps).any(|(&c, &cap)| c > allowed(cap, n)) {
            return false;
        }
    }
    if let Some(cap) = r.max_treated_share {
        if counts.iter().skip(1).sum::<usize>() > allowed(cap, n) {
            return false;
        }
    }
    true
}

fn arm_violated(r: &Restrictions, counts: &[usize], n: usize, arm: usize) -> bool {
    if let Some(caps) = &r.max_shares {
        if counts[arm] > allowed(caps[arm], n) {
            return true;
        }
    }
    if let Some(cap) = r.max_treated_share {
        if arm > 0 && counts.iter().skip(1).sum::<usize>() > allowed(cap, n) {
            return true;
        }
    }
    false
}

fn relabel(node: &mut PolicyNode, arms: &mut impl Iterator<Item = usize>) {
    match node {
        PolicyNode::Leaf { arm } => *arm = arms.next().expect("one arm per leaf"),
        PolicyNode::Split { left, right, .. } => {
            relabel(left, arms);
            relabel(right, arms);
        }
    }
}

/// Joins two subtrees and enforces the restrictions by moving leaves, in
/// ascending order of their score variance, to their next best admissible
/// arm. Returns the better of the result and the incumbent; an infeasible
/// result never replaces the incumbent.
pub(crate) fn impose_restrictions(
    r: &Restrictions,
    feature: usize,
    rule: SplitRule,
    left: &Found,
    right: &Found,
    incumbent: Option<Found>,
) -> Option<Found> {
    let mut leaves: Vec<LeafInfo> = left.leaves.iter().chain(&right.leaves).cloned().collect();
    let node = PolicyNode::Split {
        feature,
        rule,
        left: Box::new(left.node.clone()),
        right: Box::new(right.node.clone()),
    };
    let n: usize = leaves.iter().map(|l| l.count).sum();
    let n_arms = leaves[0].sums.len();
    let reward = left.reward + right.reward;
    let beats = |x: f64, inc: &Option<Found>| inc.as_ref().is_none_or(|f| x > f.reward);

    let mut counts = arm_counts(&leaves, n_arms);
    if satisfies(r, &counts, n) {
        return if beats(reward, &incumbent) {
            Some(Found { reward, node, leaves })
        } else {
            incumbent
        };
    }
    let vars: Vec<f64> = leaves.iter().map(LeafInfo::variance).collect();
    let mut order: Vec<usize> = (0..leaves.len()).collect();
    order.sort_by(|&a, &b| vars[a].total_cmp(&vars[b]));
    for &li in &order {
        let cur = leaves[li].arm;
        if !arm_violated(r, &counts, n, cur) {
            continue;
        }
        let mut prefs: Vec<usize> = (0..n_arms).collect();
        let sums = &leaves[li].sums;
        prefs.sort_by(|&a, &b| sums[b].total_cmp(&sums[a]).then(a.cmp(&b)));
        let pos = prefs.iter().position(|&d| d == cur).expect("current arm ranked");
        let size = leaves[li].count;
        for &d in &prefs[pos + 1..] {
            let mut trial = counts.clone();
            trial[cur] -= size;
            trial[d] += size;
            if !arm_violated(r, &trial, n, d) {
                counts = trial;
                leaves[li].arm = d;
                break;
            }
        }
        if satisfies(r, &counts, n) {
            break;
        }
    }
    if !satisfies(r, &counts, n) {
        return incumbent;
    }
    let new_reward: f64 = leaves.iter().map(LeafInfo::reward).sum();
    if !beats(new_reward, &incumbent) {
        return incumbent;
    }
    let mut node = node;
    relabel(&mut node, &mut leaves.iter().map(|l| l.arm));
    Some(Found {
        reward: new_reward,
        node,
        leaves,
    })
}

/// Searches the best tree with `depth` levels (one level is a single leaf)
/// for `units`, which must be sorted. A node with approximation `a` uses it
/// for its own grid and passes `a / 2` (at least 1) to its children. A node
/// without an admissible split becomes an unrestricted leaf.
pub(crate) fn search(ctx: &Ctx, units: &[usize], depth: usize, a: usize) -> Found {
    if depth <= 1 || units.len() < 2 {
        return ctx.leaf(units);
    }
    let child_a = (a / 2).max(1);
    let per_feature: Vec<Option<Found>> = (0..ctx.cols.len())
        .into_par_iter()
        .map(|j| {
            if depth == 2 {
                sweep_feature(ctx, units, j, a)
            } else {
                recurse_feature(ctx, units, j, depth, a, child_a)
            }
        })
        .collect();
    let mut best: Option<Found> = None;
    for f in per_feature.into_iter().flatten() {
        if best.as_ref().is_none_or(|b| f.reward > b.reward) {
            best = Some(f);
        }
    }
    best.unwrap_or_else(|| ctx.leaf(units))
}

/// Split rules of one feature in candidate order.
fn candidate_rules(ctx: &Ctx, units: &[usize], j: usize, a: usize) -> Vec<SplitRule> {
    let col = &ctx.cols[j];
    if ctx.categorical[j] {
        let order = category_order(units, col, ctx.scores);
        (1..order.len())
            .map(|ii| {
                let mut set = order[..ii].to_vec();
                set.sort_unstable();
                SplitRule::InSet(set)
            })
            .collect()
    } else {
        let mut v: Vec<f64> = units.iter().map(|&i| col[i]).collect();
        v.sort_by(f64::total_cmp);
        ordered_grid(&v, a, ctx.max_values).into_iter().map(SplitRule::LessEq).collect()
    }
}

fn recurse_feature(ctx: &Ctx, units: &[usize], j: usize, depth: usize, a: usize, child_a: usize) -> Option<Found> {
    let col = &ctx.cols[j];
    let mut best: Option<Found> = None;
    for rule in candidate_rules(ctx, units, j, a) {
        let (l, r): (Vec<usize>, Vec<usize>) = units.iter().partition(|&&i| rule.goes_left(col[i]));
        if l.is_empty() || r.is_empty() {
            continue;
        }
        let fl = search(ctx, &l, depth - 1, child_a);
        let fr = search(ctx, &r, depth - 1, child_a);
        if best.as_ref().is_none_or(|b| fl.reward + fr.reward > b.reward) {
            best = impose_restrictions(ctx.restrictions, j, rule, &fl, &fr, best);
        }
    }
    best
}

/// Depth-two search over one feature with running per-arm sums.
fn sweep_feature(ctx: &Ctx, units: &[usize], j: usize, a: usize) -> Option<Found> {
    let col = &ctx.cols[j];
    let total = ctx.sums(units);
    let n = units.len();
    let rules = candidate_rules(ctx, units, j, a);
    // units in split order: by value rank, or by position in the category order
    let key: Box<dyn Fn(usize) -> u64> = if ctx.categorical[j] {
        let order = category_order(units, col, ctx.scores);
        let max_code = order.iter().copied().max().unwrap_or(0);
        let mut pos = vec![u32::MAX; max_code + 1];
        for (p, &c) in order.iter().enumerate() {
            pos[c] = p as u32;
        }
        Box::new(move |i| (u64::from(pos[col[i] as usize]) << 32) | i as u64)
    } else {
        let ranks = &ctx.ranks[j];
        Box::new(move |i| (u64::from(ranks[i]) << 32) | i as u64)
    };
    let mut sorted: Vec<u64> = units.iter().map(|&i| key(i)).collect();
    sorted.sort_unstable();
    let mut best: Option<Found> = None;
    let mut left = vec![0.0; ctx.n_arms];
    let mut p = 0;
    for rule in rules {
        while p < n {
            let i = (sorted[p] & 0xffff_ffff) as usize;
            if !rule.goes_left(col[i]) {
                break;
            }
            for (s, v) in left.iter_mut().zip(&ctx.scores[i]) {
                *s += v;
            }
            p += 1;
        }
        if p == 0 || p == n {
            continue;
        }
        let right: Vec<f64> = total.iter().zip(&left).map(|(t, l)| t - l).collect();
        let fl = Found::leaf(LeafInfo::new(left.clone(), p));
        let fr = Found::leaf(LeafInfo::new(right, n - p));
        if best.as_ref().is_none_or(|b| fl.reward + fr.reward > b.reward) {
            best = impose_restrictions(ctx.restrictions, j, rule, &fl, &fr, best);
        }
    }
    best
}
