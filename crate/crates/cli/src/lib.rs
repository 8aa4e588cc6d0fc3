//! Command-line front end: configuration, the staged pipeline and the
//! standalone policy-tree job.

pub mod config;
pub mod pipeline;

use std::path::{Path, PathBuf};

use mcf_core::dataset::{load_feature_spec, FeatureSpec};
use mcf_core::policy_tree::{tree_search, PolicyTree, PolicyTreeConfig, ScoreMatrix};
use mcf_core::report::write_csv;
use mcf_core::{ErrorKind, McfError};
use serde::{Deserialize, Serialize};

use crate::config::PolicyTreeSettings;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: McfError,
    },
    #[error(transparent)]
    Core(#[from] McfError),
}

impl CliError {
    pub fn core(&self) -> &McfError {
        match self {
            CliError::Stage { source, .. } => source,
            CliError::Core(e) => e,
        }
    }

    /// 2 for configuration errors, 3 for data errors, 4 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self.core().kind() {
            ErrorKind::Config => 2,
            ErrorKind::Data => 3,
            ErrorKind::Numeric => 4,
        }
    }
}

/// Policy tree fitted to a score matrix stored as CSV: one row per unit
/// with the feature columns (category labels for categorical features) and
/// one column per arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyTreeJob {
    /// Score CSV, relative to the job file.
    pub scores: PathBuf,
    /// Feature specification JSON, relative to the job file.
    pub features: PathBuf,
    /// Arm columns in arm order.
    #[serde(default = "default_score_columns")]
    pub score_columns: Vec<String>,
    #[serde(default)]
    pub tree: PolicyTreeSettings,
}

fn default_score_columns() -> Vec<String> {
    mcf_core::ARM_LABELS.iter().map(|s| s.to_string()).collect()
}

/// True if the JSON document is a policy-tree job rather than a pipeline
/// configuration.
pub fn is_policy_tree_job(value: &serde_json::Value) -> bool {
    value.get("scores").is_some_and(serde_json::Value::is_string)
}

fn parse_cell(spec: &FeatureSpec, raw: &str, row: usize) -> Result<f64, McfError> {
    let parse_err = |message: String| McfError::Parse {
        row,
        column: spec.name.clone(),
        message,
    };
    if spec.is_categorical() {
        spec.category_code(raw)
            .map(|c| c as f64)
            .ok_or_else(|| parse_err(format!("unknown category `{raw}`")))
    } else {
        raw.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| parse_err(format!("`{raw}` is not a finite number")))
    }
}

/// Reads the score columns and the requested features from `path`.
pub fn read_score_csv(
    path: &Path,
    spec: &[FeatureSpec],
    score_columns: &[String],
) -> Result<(ScoreMatrix, Vec<Vec<f64>>), McfError> {
    let mut reader = csv::Reader::from_path(path)?;
    let header = reader.headers()?.clone();
    let column = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| McfError::data(format!("{}: missing column `{name}`", path.display())))
    };
    let score_idx: Vec<usize> = score_columns.iter().map(|c| column(c)).collect::<Result<_, _>>()?;
    let feature_idx: Vec<usize> = spec.iter().map(|f| column(&f.name)).collect::<Result<_, _>>()?;
    let mut scores = Vec::new();
    let mut x = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        let row = r + 1;
        let s = score_idx
            .iter()
            .zip(score_columns)
            .map(|(&k, name)| {
                record[k].parse::<f64>().map_err(|e| McfError::Parse {
                    row,
                    column: name.clone(),
                    message: e.to_string(),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let xi = feature_idx
            .iter()
            .zip(spec)
            .map(|(&k, f)| parse_cell(f, &record[k], row))
            .collect::<Result<Vec<_>, _>>()?;
        scores.push(s);
        x.push(xi);
    }
    if scores.is_empty() {
        return Err(McfError::data(format!("{}: no rows", path.display())));
    }
    Ok((ScoreMatrix::new(score_columns.to_vec(), scores)?, x))
}

/// Fits the job's tree and writes `policy_tree_{name}.json` and
/// `policy_rules_{name}.csv` into `out`.
pub fn run_policy_tree_job(job: &PolicyTreeJob, base: &Path, out: &Path) -> Result<PolicyTree, McfError> {
    let all = load_feature_spec(&base.join(&job.features))?;
    let spec: Vec<FeatureSpec> = job
        .tree
        .features
        .iter()
        .map(|name| {
            all.iter()
                .find(|f| &f.name == name)
                .cloned()
                .ok_or_else(|| McfError::config(format!("unknown feature `{name}`")))
        })
        .collect::<Result<_, _>>()?;
    if spec.is_empty() {
        return Err(McfError::config("policy tree lists no features"));
    }
    let (sm, x) = read_score_csv(&base.join(&job.scores), &spec, &job.score_columns)?;
    let cfg = PolicyTreeConfig {
        depth: job.tree.depth,
        approximation: job.tree.approximation,
        max_category_values: job.tree.max_category_values,
        restrictions: job.tree.restrictions.clone(),
    };
    let tree = tree_search(&sm, &x, &spec, &cfg)?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join(format!("policy_tree_{}.json", job.tree.name)), tree.to_json()?)?;
    let rules: Vec<Vec<String>> = tree
        .rules()
        .into_iter()
        .map(|r| vec![r.conditions.join(" and "), r.arm])
        .collect();
    write_csv(&out.join(format!("policy_rules_{}.csv", job.tree.name)), &["conditions", "arm"], &rules)?;
    Ok(tree)
}
