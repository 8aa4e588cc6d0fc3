//! Black-box allocation rules and their evaluation.
//!
//! Every rule maximises the composite score, predicted employment minus
//! predicted unemployment, with equal weights.

use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::report::{format_number, NumberStyle};
use crate::rng::rng_from;
use crate::stats::normal_quantile;
use crate::{McfError, Result, N_ARMS};

/// Predicted potential outcomes per unit and arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PotentialScores {
    pub emp: Vec<[f64; N_ARMS]>,
    pub ue: Vec<[f64; N_ARMS]>,
    pub olf: Vec<[f64; N_ARMS]>,
}

impl PotentialScores {
    pub fn n_units(&self) -> usize {
        self.emp.len()
    }

    /// Employment minus unemployment.
    pub fn composite(&self) -> Vec<[f64; N_ARMS]> {
        self.emp
            .iter()
            .zip(&self.ue)
            .map(|(e, u)| std::array::from_fn(|d| e[d] - u[d]))
            .collect()
    }
}

/// Largest number of units `share` allows among `n`.
pub fn slots(share: f64, n: usize) -> usize {
    (share * n as f64 + 1e-9).floor() as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Capacity {
    None,
    /// Largest share for each programme (arms 1 to 3).
    PerArm { shares: [f64; N_ARMS - 1] },
    /// Largest share over all programmes together.
    Overall { share: f64 },
}

impl Default for Capacity {
    fn default() -> Self {
        Capacity::PerArm {
            shares: [0.021, 0.020, 0.018],
        }
    }
}

impl Capacity {
    /// Capacity equal to the observed programme shares.
    pub fn observed(arms: &[usize]) -> Self {
        let n = arms.len().max(1) as f64;
        Capacity::PerArm {
            shares: std::array::from_fn(|k| arms.iter().filter(|&&d| d == k + 1).count() as f64 / n),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Capacity::None => Ok(()),
            Capacity::PerArm { shares } => {
                if shares.iter().any(|s| !(0.0..=1.0).contains(s)) || shares.iter().sum::<f64>() >= 1.0 {
                    return Err(McfError::config("programme shares must lie in [0, 1] and sum to less than 1"));
                }
                Ok(())
            }
            Capacity::Overall { share } => {
                if !(0.0..=1.0).contains(share) {
                    return Err(McfError::config("overall programme share must lie in [0, 1]"));
                }
                Ok(())
            }
        }
    }

    pub fn allows(&self, arms: &[usize]) -> bool {
        let n = arms.len();
        let mut counts = [0usize; N_ARMS];
        for &d in arms {
            counts[d] += 1;
        }
        match self {
            Capacity::None => true,
            Capacity::PerArm { shares } => (1..N_ARMS).all(|d| counts[d] <= slots(shares[d - 1], n)),
            Capacity::Overall { share } => counts[1..].iter().sum::<usize>() <= slots(*share, n),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AllocationPlan {
    pub rule: String,
    pub arms: Vec<usize>,
    pub shares: [f64; N_ARMS],
    /// Total composite score.
    pub objective: f64,
    /// Units whose arm differs from the observed one.
    pub switchers: Vec<usize>,
    /// Accepted swaps, for the sequential rule.
    pub swaps: usize,
}

impl AllocationPlan {
    pub fn new(rule: &str, arms: Vec<usize>, composite: &[[f64; N_ARMS]], observed: &[usize]) -> Self {
        let n = arms.len().max(1) as f64;
        let mut shares = [0.0; N_ARMS];
        for &d in &arms {
            shares[d] += 1.0 / n;
        }
        let objective = arms.iter().zip(composite).map(|(&d, s)| s[d]).sum();
        let switchers = (0..arms.len()).filter(|&i| arms[i] != observed[i]).collect();
        Self {
            rule: rule.to_string(),
            arms,
            shares,
            objective,
            switchers,
            swaps: 0,
        }
    }
}

/// Arms ordered from best to worst score; ties keep the lower arm first.
fn preferences(s: &[f64; N_ARMS]) -> [usize; N_ARMS] {
    let mut p: [usize; N_ARMS] = std::array::from_fn(|d| d);
    p.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
    p
}

pub fn allocate_unconstrained(composite: &[[f64; N_ARMS]], observed: &[usize]) -> AllocationPlan {
    let arms = composite.iter().map(|s| preferences(s)[0]).collect();
    AllocationPlan::new("no constraint", arms, composite, observed)
}

/// Leaves the first arm only for programmes whose employment effect is
/// significantly positive and whose unemployment effect is significantly
/// negative in one-sided tests at level `alpha`; among those, the best
/// composite score wins. `emp_z` and `ue_z` hold z statistics of the
/// effects of arms 1 to 3 against arm 0.
pub fn allocate_significant(
    composite: &[[f64; N_ARMS]],
    emp_z: &[[f64; N_ARMS - 1]],
    ue_z: &[[f64; N_ARMS - 1]],
    alpha: f64,
    observed: &[usize],
) -> Result<AllocationPlan> {
    if !(alpha > 0.0 && alpha < 0.5) {
        return Err(McfError::config("significance level must lie in (0, 0.5)"));
    }
    if emp_z.len() != composite.len() || ue_z.len() != composite.len() {
        return Err(McfError::data("z statistics missing for some units"));
    }
    let crit = normal_quantile(1.0 - alpha);
    let arms = (0..composite.len())
        .map(|i| {
            preferences(&composite[i])
                .into_iter()
                .find(|&d| d == 0 || (emp_z[i][d - 1] > crit && ue_z[i][d - 1] < -crit))
                .unwrap_or(0)
        })
        .collect();
    Ok(AllocationPlan::new("no constraint, only significant", arms, composite, observed))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Priority {
    /// Largest gap between the best and second-best arm.
    LargestGain,
    /// Most months unemployed in the last 10 years.
    PastUe,
    /// Worst predicted outcome without a programme.
    WorstNop,
    /// Least knowledge of Dutch.
    LowLanguage,
    /// Born abroad with no or limited Dutch.
    RecentMigrant,
}

impl FromStr for Priority {
    type Err = McfError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "largest-gain" => Ok(Priority::LargestGain),
            "past-ue" => Ok(Priority::PastUe),
            "worst-nop" => Ok(Priority::WorstNop),
            "low-language" => Ok(Priority::LowLanguage),
            "recent-migrant" => Ok(Priority::RecentMigrant),
            other => Err(McfError::config(format!("unknown priority rule `{other}`"))),
        }
    }
}

impl Priority {
    pub fn label(self) -> &'static str {
        match self {
            Priority::LargestGain => "preference to largest gains",
            Priority::PastUe => "preference to lots of past UE",
            Priority::WorstNop => "preference to worst NOP outcomes",
            Priority::LowLanguage => "preference to lack of language skills",
            Priority::RecentMigrant => "preference to recent immigrants",
        }
    }
}

const PAST_UE: &str = "Unem_10jaar";
const LANGUAGE: &str = "Lang_dutch";
const COUNTRY: &str = "country";

/// Priority key per unit; larger keys are served first.
pub fn priority_keys(priority: Priority, ds: &Dataset, composite: &[[f64; N_ARMS]]) -> Result<Vec<f64>> {
    let col = |name: &str| -> Result<Vec<f64>> { Ok(ds.column(ds.require_feature(name)?)) };
    Ok(match priority {
        Priority::LargestGain => composite
            .iter()
            .map(|s| {
                let p = preferences(s);
                s[p[0]] - s[p[1]]
            })
            .collect(),
        Priority::PastUe => col(PAST_UE)?,
        Priority::WorstNop => composite.iter().map(|s| -s[0]).collect(),
        Priority::LowLanguage => col(LANGUAGE)?.into_iter().map(|v| -v).collect(),
        Priority::RecentMigrant => {
            // first category of the country variable is the home country
            let country = col(COUNTRY)?;
            let lang = col(LANGUAGE)?;
            country
                .iter()
                .zip(&lang)
                .map(|(&c, &l)| f64::from(u8::from(c != 0.0 && l <= 1.0)))
                .collect()
        }
    })
}

/// Units in priority order pick their best arm with a free slot; rationed
/// units fall back to their next best arm.
pub fn allocate_priority(
    composite: &[[f64; N_ARMS]],
    capacity: &Capacity,
    keys: &[f64],
    label: &str,
    observed: &[usize],
) -> Result<AllocationPlan> {
    capacity.validate()?;
    let n = composite.len();
    if keys.len() != n {
        return Err(McfError::data("priority keys missing for some units"));
    }
    let mut free: [usize; N_ARMS] = match capacity {
        Capacity::None => [usize::MAX; N_ARMS],
        Capacity::PerArm { shares } => {
            std::array::from_fn(|d| if d == 0 { usize::MAX } else { slots(shares[d - 1], n) })
        }
        Capacity::Overall { .. } => [usize::MAX; N_ARMS],
    };
    let mut treated_free = match capacity {
        Capacity::Overall { share } => slots(*share, n),
        _ => usize::MAX,
    };
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| keys[b].total_cmp(&keys[a]).then(a.cmp(&b)));
    let mut arms = vec![0; n];
    for i in order {
        let d = preferences(&composite[i])
            .into_iter()
            .find(|&d| d == 0 || (free[d] > 0 && treated_free > 0))
            .expect("first arm is unlimited");
        if d > 0 {
            free[d] -= 1;
            treated_free = treated_free.saturating_sub(1);
        }
        arms[i] = d;
    }
    Ok(AllocationPlan::new(&format!("constrained, {label}"), arms, composite, observed))
}

/// Pairwise exchange of arms, starting from `initial`: scanning pairs in
/// lexicographic order, the first pair whose exchange raises the total
/// score is swapped and the scan restarts. Stops when no pair improves.
pub fn allocate_sequential_swap(
    initial: &[usize],
    composite: &[[f64; N_ARMS]],
    capacity: &Capacity,
    observed: &[usize],
) -> Result<AllocationPlan> {
    capacity.validate()?;
    if !capacity.allows(initial) {
        return Err(McfError::config("initial allocation violates the capacity limits"));
    }
    let mut arms = initial.to_vec();
    let n = arms.len();
    let mut swaps = 0;
    'scan: loop {
        for i in 0..n {
            let (ai, si) = (arms[i], &composite[i]);
            for j in i + 1..n {
                let aj = arms[j];
                if ai == aj {
                    continue;
                }
                let sj = &composite[j];
                if (si[aj] - si[ai]) + (sj[ai] - sj[aj]) > 0.0 {
                    arms.swap(i, j);
                    swaps += 1;
                    continue 'scan;
                }
            }
        }
        break;
    }
    let mut plan = AllocationPlan::new("constrained, sequential optimization", arms, composite, observed);
    plan.swaps = swaps;
    Ok(plan)
}

/// Independent draws with the given programme shares; the rest stays in the first arm.
pub fn allocate_random(
    shares: [f64; N_ARMS - 1],
    composite: &[[f64; N_ARMS]],
    observed: &[usize],
    seed: u64,
) -> Result<AllocationPlan> {
    let rest = 1.0 - shares.iter().sum::<f64>();
    if shares.iter().any(|s| !(0.0..=1.0).contains(s)) || rest < 0.0 {
        return Err(McfError::config("random allocation shares must lie in [0, 1] and sum to at most 1"));
    }
    let w = [rest, shares[0], shares[1], shares[2]];
    let dist = WeightedIndex::new(w).map_err(|e| McfError::config(format!("random allocation shares: {e}")))?;
    let mut rng = rng_from(seed);
    let arms = (0..composite.len()).map(|_| dist.sample(&mut rng)).collect();
    Ok(AllocationPlan::new("random", arms, composite, observed))
}

/// One row of the allocation table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AllocationRow {
    pub rule: String,
    /// Programme shares in percent.
    pub shares: [f64; N_ARMS - 1],
    pub emp: f64,
    pub ue: f64,
    pub olf: f64,
    /// Percent change for switchers relative to their observed arm.
    pub switcher_gain_emp: Option<f64>,
    pub switcher_gain_ue: Option<f64>,
}

impl AllocationRow {
    pub const HEADER: [&'static str; 9] = ["Allocation", "SVT", "LVT", "OT", "Emp", "UE", "OLF", "Gain Emp", "Gain UE"];

    pub fn cells(&self) -> Vec<String> {
        let f = |x: f64| format_number(x, NumberStyle::Fixed);
        let g = |x: Option<f64>| x.map_or_else(|| "-".to_string(), f);
        vec![
            self.rule.clone(),
            f(self.shares[0]),
            f(self.shares[1]),
            f(self.shares[2]),
            f(self.emp),
            f(self.ue),
            f(self.olf),
            g(self.switcher_gain_emp),
            g(self.switcher_gain_ue),
        ]
    }
}

/// Mean predicted outcomes under the plan and the relative change for
/// switchers, both measured with the predicted potential outcomes.
pub fn evaluate_allocation(plan: &AllocationPlan, scores: &PotentialScores, observed: &[usize]) -> AllocationRow {
    let n = plan.arms.len().max(1) as f64;
    let mean = |v: &[[f64; N_ARMS]], arms: &[usize], idx: &mut dyn Iterator<Item = usize>| -> (f64, usize) {
        let mut s = 0.0;
        let mut k = 0;
        for i in idx {
            s += v[i][arms[i]];
            k += 1;
        }
        (s, k)
    };
    let all = |v: &[[f64; N_ARMS]]| mean(v, &plan.arms, &mut (0..plan.arms.len())).0 / n;
    let gain = |v: &[[f64; N_ARMS]]| -> Option<f64> {
        if plan.switchers.is_empty() {
            return None;
        }
        let (new, _) = mean(v, &plan.arms, &mut plan.switchers.iter().copied());
        let (old, _) = mean(v, observed, &mut plan.switchers.iter().copied());
        (old != 0.0).then(|| (new - old) / old * 100.0)
    };
    AllocationRow {
        rule: plan.rule.clone(),
        shares: std::array::from_fn(|k| plan.shares[k + 1] * 100.0),
        emp: all(&scores.emp),
        ue: all(&scores.ue),
        olf: all(&scores.olf),
        switcher_gain_emp: gain(&scores.emp),
        switcher_gain_ue: gain(&scores.ue),
    }
}
