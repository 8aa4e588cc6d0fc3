//! Data model for unemployment spells, plus ingestion, balance diagnostics and
//! the synthetic generator.

mod balance;
mod io;
mod synth;

use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::fmt;

use crate::{McfError, Result, ARM_LABELS, N_ARMS};

pub use balance::{balance_report, standardized_difference, BalanceRow, LARGE_IMBALANCE};
pub use io::{load_dataset, load_feature_spec, write_dataset, write_feature_spec, write_truth};
pub use synth::{generate_synthetic, EffectFunction, SynthConfig};

/// Months of outcome history recorded after the (pseudo-)start.
pub const HORIZON_MONTHS: usize = 30;
/// Last admissible programme-start day: the nine-month assignment window.
pub const MAX_START_DAY: u32 = 274;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureRole {
    Confounder,
    Heterogeneity,
    Both,
}

impl FeatureRole {
    pub fn is_confounder(self) -> bool {
        matches!(self, FeatureRole::Confounder | FeatureRole::Both)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Ordered,
    Categorical { categories: Vec<String> },
}

/// One column of the design. Categorical values are stored as the index of the
/// label in `categories`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub kind: FeatureKind,
    pub role: FeatureRole,
}

impl FeatureSpec {
    pub fn ordered(name: &str, role: FeatureRole) -> Self {
        Self {
            name: name.to_string(),
            kind: FeatureKind::Ordered,
            role,
        }
    }

    pub fn categorical(name: &str, categories: &[&str], role: FeatureRole) -> Self {
        Self {
            name: name.to_string(),
            kind: FeatureKind::Categorical {
                categories: categories.iter().map(|c| c.to_string()).collect(),
            },
            role,
        }
    }

    pub fn is_categorical(&self) -> bool {
        matches!(self.kind, FeatureKind::Categorical { .. })
    }

    pub fn n_categories(&self) -> usize {
        match &self.kind {
            FeatureKind::Ordered => 0,
            FeatureKind::Categorical { categories } => categories.len(),
        }
    }

    pub fn category_label(&self, code: usize) -> Option<&str> {
        match &self.kind {
            FeatureKind::Ordered => None,
            FeatureKind::Categorical { categories } => categories.get(code).map(String::as_str),
        }
    }

    pub fn category_code(&self, label: &str) -> Option<usize> {
        match &self.kind {
            FeatureKind::Ordered => None,
            FeatureKind::Categorical { categories } => categories.iter().position(|c| c == label),
        }
    }
}

/// Checks the invariants of a feature list.
pub fn validate_spec(spec: &[FeatureSpec]) -> Result<()> {
    let mut seen = HashSet::new();
    for f in spec {
        if !seen.insert(f.name.as_str()) {
            return Err(McfError::config(format!("duplicate feature name `{}`", f.name)));
        }
        if f.is_categorical() && f.n_categories() < 2 {
            return Err(McfError::config(format!(
                "categorical feature `{}` needs at least two categories",
                f.name
            )));
        }
    }
    if !spec.iter().any(|f| f.role.is_confounder()) {
        return Err(McfError::config("at least one confounder feature is required"));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LabourState {
    Employed,
    Unemployed,
    OutOfLabourForce,
}

impl LabourState {
    pub const ALL: [LabourState; 3] = [
        LabourState::Employed,
        LabourState::Unemployed,
        LabourState::OutOfLabourForce,
    ];

    pub fn code(self) -> char {
        match self {
            LabourState::Employed => 'E',
            LabourState::Unemployed => 'U',
            LabourState::OutOfLabourForce => 'O',
        }
    }

    pub fn from_code(c: &str) -> Option<Self> {
        match c {
            "E" => Some(LabourState::Employed),
            "U" => Some(LabourState::Unemployed),
            "O" => Some(LabourState::OutOfLabourForce),
            _ => None,
        }
    }

    pub fn short_name(self) -> &'static str {
        match self {
            LabourState::Employed => "emp",
            LabourState::Unemployed => "ue",
            LabourState::OutOfLabourForce => "olf",
        }
    }

    pub fn long_name(self) -> &'static str {
        match self {
            LabourState::Employed => "employment",
            LabourState::Unemployed => "unemployment",
            LabourState::OutOfLabourForce => "out-of-the-labour-force",
        }
    }
}

/// Inclusive window of months after the (pseudo-)start, 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MonthWindow {
    pub first: usize,
    pub last: usize,
}

impl MonthWindow {
    pub const fn new(first: usize, last: usize) -> Self {
        Self { first, last }
    }

    pub fn len(&self) -> usize {
        self.last + 1 - self.first
    }

    pub fn is_empty(&self) -> bool {
        self.last < self.first
    }
}

/// Cumulative months spent in `state` during `window`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Outcome {
    pub state: LabourState,
    pub window: MonthWindow,
}

impl Outcome {
    pub const fn new(state: LabourState, first: usize, last: usize) -> Self {
        Self {
            state,
            window: MonthWindow::new(first, last),
        }
    }

    /// Employment, unemployment and out-of-labour-force over months 1-9,
    /// 22-30 and 1-30.
    pub fn standard_set() -> Vec<Outcome> {
        let mut out = Vec::with_capacity(9);
        for state in LabourState::ALL {
            for (a, b) in [(1, 9), (22, 30), (1, 30)] {
                out.push(Outcome::new(state, a, b));
            }
        }
        out
    }

    pub fn id(&self) -> String {
        format!(
            "{}_{}_{}",
            self.state.short_name(),
            self.window.first,
            self.window.last
        )
    }

    pub fn validate(&self, horizon: usize) -> Result<()> {
        if self.window.first == 0 || self.window.is_empty() || self.window.last > horizon {
            return Err(McfError::config(format!(
                "outcome window {}..{} is outside months 1..{}",
                self.window.first, self.window.last, horizon
            )));
        }
        Ok(())
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Cumulative months in {} {}-{} months after programme start",
            self.state.long_name(),
            self.window.first,
            self.window.last
        )
    }
}

/// One unemployment spell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitRecord {
    pub id: String,
    /// One value per feature; categorical features hold the category index.
    pub features: Vec<f64>,
    pub treatment: usize,
    /// Labour market state in months 1..=30 after the (pseudo-)start.
    pub outcomes: Vec<LabourState>,
    pub spell_length_days: u32,
    /// Day of the spell on which the (pseudo-)programme starts; `None` for a
    /// non-participant whose pseudo start has not been simulated yet.
    pub start_day: Option<u32>,
    pub is_pseudo_start: bool,
    /// Entered a programme during the preceding spell (placebo contamination).
    pub prior_spell_almp: bool,
}

impl UnitRecord {
    /// Number of months in `outcome.window` spent in `outcome.state`.
    pub fn cumulative(&self, outcome: &Outcome) -> f64 {
        self.outcomes[outcome.window.first - 1..outcome.window.last]
            .iter()
            .filter(|s| **s == outcome.state)
            .count() as f64
    }
}

/// Ground truth attached to synthetic data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTruth {
    pub outcomes: Vec<Outcome>,
    /// Realised potential outcomes, `[unit][outcome][arm]`.
    pub potential: Vec<Vec<[f64; N_ARMS]>>,
    /// Conditional expectations of the potential outcomes given the features,
    /// `[unit][outcome][arm]`. True IATEs are differences of these.
    pub expected: Vec<Vec<[f64; N_ARMS]>>,
}

impl SyntheticTruth {
    pub fn outcome_index(&self, outcome: &Outcome) -> Option<usize> {
        self.outcomes.iter().position(|o| o == outcome)
    }

    pub fn iate(&self, unit: usize, outcome: usize, m: usize, l: usize) -> f64 {
        let e = &self.expected[unit][outcome];
        e[m] - e[l]
    }

    /// Mean of the true IATEs over `units` (all units when `None`).
    pub fn ate(&self, outcome: usize, m: usize, l: usize, units: Option<&[usize]>) -> f64 {
        match units {
            Some(idx) => idx.iter().map(|&u| self.iate(u, outcome, m, l)).sum::<f64>() / idx.len() as f64,
            None => {
                let n = self.expected.len();
                (0..n).map(|u| self.iate(u, outcome, m, l)).sum::<f64>() / n as f64
            }
        }
    }

    fn subset(&self, idx: &[usize]) -> Self {
        Self {
            outcomes: self.outcomes.clone(),
            potential: idx.iter().map(|&i| self.potential[i].clone()).collect(),
            expected: idx.iter().map(|&i| self.expected[i].clone()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub spec: Vec<FeatureSpec>,
    pub units: Vec<UnitRecord>,
    pub arm_labels: Vec<String>,
    pub truth: Option<SyntheticTruth>,
}

impl Dataset {
    /// Builds a dataset after checking every invariant.
    pub fn new(
        spec: Vec<FeatureSpec>,
        units: Vec<UnitRecord>,
        truth: Option<SyntheticTruth>,
    ) -> Result<Self> {
        let ds = Self {
            spec,
            units,
            arm_labels: ARM_LABELS.iter().map(|s| s.to_string()).collect(),
            truth,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        validate_spec(&self.spec)?;
        if self.units.is_empty() {
            return Err(McfError::data("dataset has no units"));
        }
        let p = self.spec.len();
        for (row, u) in self.units.iter().enumerate() {
            if u.features.len() != p {
                return Err(McfError::data(format!(
                    "unit `{}` has {} feature values, expected {p}",
                    u.id,
                    u.features.len()
                )));
            }
            for (f, &v) in self.spec.iter().zip(&u.features) {
                if !v.is_finite() {
                    return Err(McfError::data(format!(
                        "unit `{}` has a non-finite value for `{}`",
                        u.id, f.name
                    )));
                }
                if f.is_categorical() && (v < 0.0 || v.fract() != 0.0 || v as usize >= f.n_categories()) {
                    return Err(McfError::data(format!(
                        "unit `{}` has an invalid category code {v} for `{}`",
                        u.id, f.name
                    )));
                }
            }
            if u.treatment >= N_ARMS {
                return Err(McfError::data(format!(
                    "row {row}: arm index {} out of {{0..3}}",
                    u.treatment
                )));
            }
            if u.outcomes.len() < HORIZON_MONTHS {
                return Err(McfError::data(format!(
                    "unit `{}` has {} months of outcomes, expected {HORIZON_MONTHS}",
                    u.id,
                    u.outcomes.len()
                )));
            }
            if let Some(s) = u.start_day {
                if s == 0 || s > MAX_START_DAY {
                    return Err(McfError::data(format!(
                        "unit `{}` has start day {s} outside 1..{MAX_START_DAY}",
                        u.id
                    )));
                }
            } else if u.treatment != 0 {
                return Err(McfError::data(format!(
                    "participant `{}` has no programme start day",
                    u.id
                )));
            }
        }
        let counts = self.arm_counts();
        if let Some(d) = counts.iter().position(|&c| c == 0) {
            return Err(McfError::data(format!(
                "arm {} ({}) has no units",
                d, self.arm_labels[d]
            )));
        }
        if let Some(t) = &self.truth {
            if t.potential.len() != self.units.len() || t.expected.len() != self.units.len() {
                return Err(McfError::data("synthetic truth does not match the unit count"));
            }
        }
        Ok(())
    }

    pub fn n_units(&self) -> usize {
        self.units.len()
    }

    pub fn n_features(&self) -> usize {
        self.spec.len()
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.spec.iter().position(|f| f.name == name)
    }

    pub fn require_feature(&self, name: &str) -> Result<usize> {
        self.feature_index(name)
            .ok_or_else(|| McfError::config(format!("unknown feature `{name}`")))
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.units.iter().map(|u| u.features[j]).collect()
    }

    pub fn treatments(&self) -> Vec<usize> {
        self.units.iter().map(|u| u.treatment).collect()
    }

    pub fn arm_counts(&self) -> [usize; N_ARMS] {
        let mut c = [0; N_ARMS];
        for u in &self.units {
            if u.treatment < N_ARMS {
                c[u.treatment] += 1;
            }
        }
        c
    }

    pub fn outcome_values(&self, outcome: &Outcome) -> Vec<f64> {
        self.units.iter().map(|u| u.cumulative(outcome)).collect()
    }

    /// Units at `idx`, in that order; the truth is carried along.
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        let ds = Self {
            spec: self.spec.clone(),
            units: idx.iter().map(|&i| self.units[i].clone()).collect(),
            arm_labels: self.arm_labels.clone(),
            truth: self.truth.as_ref().map(|t| t.subset(idx)),
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Keeps only the named features, in the given order.
    pub fn select_features(&self, names: &[String]) -> Result<Self> {
        let cols = names
            .iter()
            .map(|n| self.require_feature(n))
            .collect::<Result<Vec<_>>>()?;
        let spec = cols.iter().map(|&j| self.spec[j].clone()).collect();
        let units = self
            .units
            .iter()
            .map(|u| {
                let mut u2 = u.clone();
                u2.features = cols.iter().map(|&j| u.features[j]).collect();
                u2
            })
            .collect();
        let ds = Self {
            spec,
            units,
            arm_labels: self.arm_labels.clone(),
            truth: self.truth.clone(),
        };
        ds.validate()?;
        Ok(ds)
    }
}
