//! Splitting rule.
//!
//! For a parent P split into children c with building-half sizes n_c:
//!
//! ```text
//! M = Σ_c (n_c / n_P) Σ_d (μ^c_d − μ^P_d)²                       outcome levels
//! H = Σ_c (n_c / n_P) Σ_{d > d'} (τ^c_{dd'} − τ^P_{dd'})²      effect heterogeneity
//! B = Σ_c (n_c / n_P) Σ_d (π^c_d − π^P_d)²                       change in arm shares
//! score = −M − H − λ·B                                           lower is better
//! ```
//!
//! μ_d is the building-half mean of the split outcome in arm d, τ_{dd'} =
//! μ_d − μ_{d'} and π_d the building-half share of arm d. M is the reduction
//! in squared error of the arm-specific outcome means, so prognostic
//! covariates get split on. A split that leaves arm shares unchanged earns no
//! imbalance credit, which is how splits that do not reduce selection bias
//! are penalised relative to those that do.

use super::{GrowData, GrowParams, SplitRule};
use crate::N_ARMS;

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ArmStats {
    pub count: [usize; N_ARMS],
    pub sum: [f64; N_ARMS],
}

impl ArmStats {
    pub fn from_units(arms: &[usize], y: &[f64]) -> Self {
        let mut s = Self::default();
        for (&d, &v) in arms.iter().zip(y) {
            s.add(d, v);
        }
        s
    }

    pub fn add(&mut self, arm: usize, y: f64) {
        self.count[arm] += 1;
        self.sum[arm] += y;
    }

    pub fn n(&self) -> usize {
        self.count.iter().sum()
    }

    pub fn mean(&self, arm: usize) -> f64 {
        self.sum[arm] / self.count[arm] as f64
    }

    pub fn share(&self, arm: usize) -> f64 {
        self.count[arm] as f64 / self.n() as f64
    }

    fn minus(&self, other: &Self) -> Self {
        let mut s = *self;
        for d in 0..N_ARMS {
            s.count[d] -= other.count[d];
            s.sum[d] -= other.sum[d];
        }
        s
    }

    fn has_every_arm(&self) -> bool {
        self.count.iter().all(|&c| c > 0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitScore {
    pub level: f64,
    pub heterogeneity: f64,
    pub imbalance: f64,
    pub score: f64,
}

/// Scores a candidate split; every arm must be present in every child.
pub fn split_score(parent: &ArmStats, children: &[ArmStats], lambda: f64) -> SplitScore {
    let n_p = parent.n() as f64;
    let mut level = 0.0;
    let mut heterogeneity = 0.0;
    let mut imbalance = 0.0;
    for c in children {
        let w = c.n() as f64 / n_p;
        let mut m = 0.0;
        for d in 0..N_ARMS {
            let diff = c.mean(d) - parent.mean(d);
            m += diff * diff;
        }
        let mut h = 0.0;
        for d in 1..N_ARMS {
            for e in 0..d {
                let diff = (c.mean(d) - c.mean(e)) - (parent.mean(d) - parent.mean(e));
                h += diff * diff;
            }
        }
        let mut b = 0.0;
        for d in 0..N_ARMS {
            let diff = c.share(d) - parent.share(d);
            b += diff * diff;
        }
        level += w * m;
        heterogeneity += w * h;
        imbalance += w * b;
    }
    SplitScore {
        level,
        heterogeneity,
        imbalance,
        score: -level - heterogeneity - lambda * imbalance,
    }
}

pub(crate) struct BestSplit {
    pub feature: usize,
    pub rule: SplitRule,
    pub score: f64,
}

/// Best admissible split over `features`, or `None` if no split leaves at
/// least `min_leaf` units and one unit of every arm in each child of both
/// halves. Ties keep the first candidate in feature-draw and threshold order.
pub(crate) fn best_split(
    data: &GrowData,
    params: &GrowParams,
    building: &[u32],
    honest: &[u32],
    features: &[usize],
) -> Option<BestSplit> {
    let min_leaf = params.min_leaf;
    if building.len() < 2 * min_leaf || honest.len() < 2 * min_leaf {
        return None;
    }
    let mut parent = ArmStats::default();
    for &i in building {
        parent.add(data.arms[i as usize], data.y[i as usize]);
    }
    if !parent.has_every_arm() {
        return None;
    }
    let mut honest_total = [0usize; N_ARMS];
    for &i in honest {
        honest_total[data.arms[i as usize]] += 1;
    }
    if honest_total.contains(&0) {
        return None;
    }

    let mut best: Option<BestSplit> = None;
    let mut keyed: Vec<(f64, u32)> = Vec::with_capacity(building.len());
    let mut hkeyed: Vec<(f64, usize)> = Vec::with_capacity(honest.len());
    for &j in features {
        let col = &data.cols[j];
        // category code -> rank by building-half mean; absent codes go right
        let rank: Option<Vec<f64>> = if data.categorical[j] {
            let max_code = building
                .iter()
                .chain(honest)
                .map(|&i| col[i as usize] as usize)
                .max()
                .unwrap_or(0);
            let mut sums = vec![(0.0, 0usize); max_code + 1];
            for &i in building {
                let c = col[i as usize] as usize;
                sums[c].0 += data.y[i as usize];
                sums[c].1 += 1;
            }
            let mut present: Vec<(f64, usize)> = sums
                .iter()
                .enumerate()
                .filter(|(_, s)| s.1 > 0)
                .map(|(c, s)| (s.0 / s.1 as f64, c))
                .collect();
            present.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut r = vec![f64::INFINITY; max_code + 1];
            for (k, &(_, c)) in present.iter().enumerate() {
                r[c] = k as f64;
            }
            Some(r)
        } else {
            None
        };
        let key = |i: u32| -> f64 {
            let v = col[i as usize];
            match &rank {
                Some(r) => r[v as usize],
                None => v,
            }
        };
        keyed.clear();
        keyed.extend(building.iter().map(|&i| (key(i), i)));
        keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        if keyed[0].0 == keyed[keyed.len() - 1].0 {
            continue;
        }
        hkeyed.clear();
        hkeyed.extend(honest.iter().map(|&i| (key(i), data.arms[i as usize])));
        hkeyed.sort_by(|a, b| a.0.total_cmp(&b.0));

        let mut left = ArmStats::default();
        let mut h_left = [0usize; N_ARMS];
        let mut hp = 0;
        for k in 0..keyed.len() - 1 {
            let (v, i) = keyed[k];
            left.add(data.arms[i as usize], data.y[i as usize]);
            if keyed[k + 1].0 == v {
                continue;
            }
            while hp < hkeyed.len() && hkeyed[hp].0 <= v {
                h_left[hkeyed[hp].1] += 1;
                hp += 1;
            }
            let n_left = k + 1;
            if n_left < min_leaf || keyed.len() - n_left < min_leaf {
                continue;
            }
            if hp < min_leaf || hkeyed.len() - hp < min_leaf {
                continue;
            }
            if (0..N_ARMS).any(|d| h_left[d] == 0 || h_left[d] == honest_total[d]) {
                continue;
            }
            let right = parent.minus(&left);
            if !left.has_every_arm() || !right.has_every_arm() {
                continue;
            }
            let s = split_score(&parent, &[left, right], params.lambda).score;
            if best.as_ref().is_none_or(|b| s < b.score) {
                let rule = match &rank {
                    Some(r) => {
                        let set: Vec<usize> = (0..r.len()).filter(|&c| r[c] <= v).collect();
                        SplitRule::InSet(set)
                    }
                    None => SplitRule::LessEq(v),
                };
                best = Some(BestSplit { feature: j, rule, score: s });
            }
        }
    }
    best
}
