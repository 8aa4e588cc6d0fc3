//! Pipeline configuration.

use std::path::{Path, PathBuf};

use mcf_core::allocation::{Capacity, Priority};
use mcf_core::dataset::{
    generate_synthetic, load_dataset, load_feature_spec, Dataset, MonthWindow, Outcome, SynthConfig, HORIZON_MONTHS,
};
use mcf_core::forest::ForestConfig;
use mcf_core::policy_tree::Restrictions;
use mcf_core::rng::derive_seed;
use mcf_core::{McfError, Result};
use serde::{Deserialize, Serialize};

/// Where the spells come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic {
        #[serde(default)]
        synth: SynthConfig,
    },
    File {
        data: PathBuf,
        features: PathBuf,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic {
            synth: SynthConfig {
                assign_pseudo_starts: false,
                ..SynthConfig::default()
            },
        }
    }
}

impl DataSource {
    /// Loads or generates the data; `label` separates the random streams
    /// of different synthetic sources.
    pub fn load(&self, base: &Path, seed: u64, label: &str) -> Result<Dataset> {
        match self {
            DataSource::Synthetic { synth } => generate_synthetic(synth, derive_seed(seed, label)),
            DataSource::File { data, features } => {
                let spec = load_feature_spec(&base.join(features))?;
                load_dataset(&base.join(data), &spec)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PseudoStartSettings {
    pub gender_feature: String,
    pub folds: usize,
    pub grid_size: usize,
}

impl Default for PseudoStartSettings {
    fn default() -> Self {
        Self {
            gender_feature: "Woman".into(),
            folds: 10,
            grid_size: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterSettings {
    pub k: usize,
    pub restarts: usize,
    /// Profile covariates; every feature when empty.
    pub covariates: Vec<String>,
}

impl Default for ClusterSettings {
    fn default() -> Self {
        Self {
            k: 8,
            restarts: 10,
            covariates: Vec::new(),
        }
    }
}

/// One row of the allocation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum Scenario {
    Observed,
    /// Random draws; observed shares unless given.
    Random {
        #[serde(default)]
        shares: Option<[f64; 3]>,
    },
    Unconstrained,
    Significant {
        #[serde(default = "default_alpha")]
        alpha: f64,
    },
    /// Capacity defaults to the observed programme shares.
    Priority {
        priority: Priority,
        #[serde(default)]
        capacity: Option<Capacity>,
    },
    /// Swaps starting from the observed allocation.
    SequentialSwap {
        #[serde(default)]
        capacity: Option<Capacity>,
    },
}

fn default_alpha() -> f64 {
    0.025
}

pub fn default_scenarios() -> Vec<Scenario> {
    let mut s = vec![
        Scenario::Observed,
        Scenario::Random { shares: None },
        Scenario::Unconstrained,
        Scenario::Significant { alpha: default_alpha() },
    ];
    for p in [
        Priority::LargestGain,
        Priority::PastUe,
        Priority::WorstNop,
        Priority::LowLanguage,
        Priority::RecentMigrant,
    ] {
        s.push(Scenario::Priority {
            priority: p,
            capacity: None,
        });
    }
    s.push(Scenario::SequentialSwap { capacity: None });
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyTreeSettings {
    pub name: String,
    /// Levels including the leaves.
    pub depth: usize,
    pub approximation: usize,
    pub max_category_values: Option<usize>,
    pub features: Vec<String>,
    pub restrictions: Restrictions,
}

impl Default for PolicyTreeSettings {
    fn default() -> Self {
        Self {
            name: "depth3".into(),
            depth: 3,
            approximation: 64,
            max_category_values: None,
            features: ["age", "Woman", "Lang_dutch", "Unem_10jaar", "educ"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            restrictions: Restrictions::default(),
        }
    }
}

pub fn default_trees() -> Vec<PolicyTreeSettings> {
    let observed_caps = Restrictions {
        max_shares: Some(vec![1.0, 0.021, 0.020, 0.018]),
        max_treated_share: None,
    };
    vec![
        PolicyTreeSettings::default(),
        PolicyTreeSettings {
            name: "depth3-capped".into(),
            restrictions: observed_caps,
            ..PolicyTreeSettings::default()
        },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlaceboSettings {
    pub enabled: bool,
    /// Spells preceding the analysed ones, labelled with the future treatment.
    pub prior_spell: Option<DataSource>,
    pub window: MonthWindow,
    pub history_months: usize,
    pub gate_variables: Vec<String>,
    pub alpha: f64,
}

impl Default for PlaceboSettings {
    fn default() -> Self {
        Self {
            enabled: false,
            prior_spell: None,
            window: MonthWindow::new(1, 9),
            history_months: HORIZON_MONTHS,
            gate_variables: Vec::new(),
            alpha: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub data: DataSource,
    pub pseudo_start: PseudoStartSettings,
    /// Units with an estimated treatment probability below this are dropped.
    pub support_trim: f64,
    pub deselect: bool,
    pub forest: ForestConfig,
    pub outcomes: Vec<Outcome>,
    /// Outcomes whose difference forms the allocation objective.
    pub employment_outcome: Outcome,
    pub unemployment_outcome: Outcome,
    pub gate_variables: Vec<String>,
    pub clustering: ClusterSettings,
    pub allocations: Vec<Scenario>,
    pub policy_trees: Vec<PolicyTreeSettings>,
    pub placebo: PlaceboSettings,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        use mcf_core::dataset::LabourState::{Employed, Unemployed};
        Self {
            seed: 0,
            data: DataSource::default(),
            pseudo_start: PseudoStartSettings::default(),
            support_trim: 0.01,
            deselect: true,
            forest: ForestConfig::default(),
            outcomes: Outcome::standard_set(),
            employment_outcome: Outcome::new(Employed, 1, 30),
            unemployment_outcome: Outcome::new(Unemployed, 1, 30),
            gate_variables: ["Woman", "city", "country", "Lang_dutch"].iter().map(|s| s.to_string()).collect(),
            clustering: ClusterSettings::default(),
            allocations: default_scenarios(),
            policy_trees: default_trees(),
            placebo: PlaceboSettings::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks that do not need the data.
    pub fn validate(&self) -> Result<()> {
        if self.outcomes.is_empty() {
            return Err(McfError::config("at least one outcome is required"));
        }
        for o in self.outcomes.iter().chain([&self.employment_outcome, &self.unemployment_outcome]) {
            o.validate(HORIZON_MONTHS)?;
        }
        if !(0.0..0.25).contains(&self.support_trim) {
            return Err(McfError::config("support trim must lie in [0, 0.25)"));
        }
        if self.clustering.k == 0 || self.clustering.restarts == 0 {
            return Err(McfError::config("clustering needs k and restarts of at least one"));
        }
        let mut names: Vec<&str> = self.policy_trees.iter().map(|t| t.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(McfError::config("policy tree names must be unique"));
        }
        for t in &self.policy_trees {
            if t.features.is_empty() {
                return Err(McfError::config(format!("policy tree `{}` lists no features", t.name)));
            }
            if t.name.is_empty() || !t.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
                return Err(McfError::config(format!("policy tree name `{}` must be alphanumeric", t.name)));
            }
        }
        Ok(())
    }

    /// Checks that need the feature names.
    pub fn validate_features(&self, ds: &Dataset) -> Result<()> {
        let lists = self
            .gate_variables
            .iter()
            .chain(&self.clustering.covariates)
            .chain(self.policy_trees.iter().flat_map(|t| &t.features));
        for name in lists {
            ds.require_feature(name)?;
        }
        Ok(())
    }

    /// Canonical JSON used for the manifest hash.
    pub fn canonical_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}
