//! Staged pipeline runner.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use mcf_core::allocation::{
    allocate_priority, allocate_random, allocate_sequential_swap, allocate_significant, allocate_unconstrained,
    evaluate_allocation, priority_keys, AllocationPlan, AllocationRow, Capacity, PotentialScores,
};
use mcf_core::clustering::{cluster_profile, kmeans_pp};
use mcf_core::dataset::{
    balance_report, write_dataset, write_feature_spec, write_truth, Dataset, LabourState, Outcome,
};
use mcf_core::effects::{
    check_support, contrast_label, effect_table, estimate_populations, feature_cells, gate_differences,
    iates_from_potentials, placebo_run, population_table, potential_outcomes, sorted_effects, wald_across, Level,
    OutcomeData, PlaceboConfig, PopulationEstimate, CONTRASTS,
};
use mcf_core::forest::{
    aggregate_weights, build_forest, compute_weights, feature_deselect, weight_diagnostics, ForestConfig, ForestModel,
    WeightMatrix,
};
use mcf_core::policy_tree::{tree_search, PolicyTreeConfig, ScoreMatrix};
use mcf_core::pseudo_start::{apply_pseudo_starts, fit_start_model, simulate_pseudo_starts};
use mcf_core::report::{format_estimate, format_number, write_csv, write_json, NumberStyle};
use mcf_core::rng::derive_seed;
use mcf_core::stats::stars;
use mcf_core::{McfError, Result, ARM_LABELS, N_ARMS};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{PipelineConfig, Scenario};
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Ingest,
    PseudoStart,
    Support,
    Deselect,
    Forest,
    Effects,
    Clustering,
    Scores,
    Allocation,
    PolicyTree,
    Placebo,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::PseudoStart => "pseudo-start",
            Stage::Support => "support",
            Stage::Deselect => "deselect",
            Stage::Forest => "forest",
            Stage::Effects => "effects",
            Stage::Clustering => "clustering",
            Stage::Scores => "scores",
            Stage::Allocation => "allocation",
            Stage::PolicyTree => "policy-tree",
            Stage::Placebo => "placebo",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
}

/// Seeds, configuration hash and output digests of one run.
#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub version: String,
    pub config_sha256: String,
    pub seed: u64,
    pub seeds: BTreeMap<String, u64>,
    pub stages: Vec<String>,
    pub skipped: Vec<String>,
    pub files: Vec<FileEntry>,
    /// Digest over every output file listed above.
    pub outputs_sha256: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

struct Run<'a> {
    cfg: &'a PipelineConfig,
    base: &'a Path,
    out: &'a Path,
    seeds: BTreeMap<String, u64>,
    stages: Vec<String>,
    skipped: Vec<String>,
    files: Vec<String>,
}

impl<'a> Run<'a> {
    fn seed(&mut self, label: &str) -> u64 {
        let s = derive_seed(self.cfg.seed, label);
        self.seeds.insert(label.to_string(), s);
        s
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.out.join(name)
    }

    fn csv<S: AsRef<str>>(&mut self, name: &str, header: &[S], rows: &[Vec<String>]) -> Result<()> {
        let p = self.path(name);
        write_csv(&p, header, rows)
    }

    fn json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<()> {
        let p = self.path(name);
        write_json(&p, value)
    }

    fn step<T>(&mut self, stage: Stage, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T, CliError> {
        log::info!("stage {}", stage.name());
        let r = f(self).map_err(|source| CliError::Stage {
            stage: stage.name(),
            source,
        })?;
        self.stages.push(stage.name().to_string());
        Ok(r)
    }

    fn finish(self) -> Result<Manifest, CliError> {
        let mut files = Vec::new();
        let mut names = self.files.clone();
        names.sort();
        names.dedup();
        for name in names {
            let bytes = std::fs::read(self.out.join(&name)).map_err(McfError::from)?;
            files.push(FileEntry {
                sha256: sha256_hex(&bytes),
                path: name,
            });
        }
        let joined: String = files.iter().map(|f| format!("{}  {}\n", f.sha256, f.path)).collect();
        let manifest = Manifest {
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_sha256: sha256_hex(self.cfg.canonical_json()?.as_bytes()),
            seed: self.cfg.seed,
            seeds: self.seeds,
            stages: self.stages,
            skipped: self.skipped,
            outputs_sha256: sha256_hex(joined.as_bytes()),
            files,
        };
        write_json(&self.out.join("manifest.json"), &manifest)?;
        Ok(manifest)
    }
}

/// Data carried between stages.
struct State {
    /// Every feature, restricted to the estimation units.
    full: Dataset,
    /// Retained features only, same units as `full`.
    est: Dataset,
    forest: Option<ForestModel>,
    weights: Option<WeightMatrix>,
    leaves: Vec<Vec<u32>>,
    scores: Option<Scores>,
}

struct Scores {
    units: Vec<usize>,
    potential: PotentialScores,
    emp_z: Vec<[f64; N_ARMS - 1]>,
    ue_z: Vec<[f64; N_ARMS - 1]>,
    observed: Vec<usize>,
}

fn targets(ds: &Dataset) -> Vec<Vec<f64>> {
    ds.units.iter().map(|u| u.features.clone()).collect()
}

fn f(x: f64) -> String {
    format_number(x, NumberStyle::Fixed)
}

/// Full-precision cell for machine-readable outputs.
fn num(x: f64) -> String {
    format!("{x}")
}

fn arm_header(first: &str) -> Vec<String> {
    std::iter::once(first.to_string()).chain(ARM_LABELS.iter().map(|s| s.to_string())).collect()
}

fn feature_label(ds: &Dataset, j: usize, v: f64) -> String {
    match ds.spec[j].category_label(v as usize) {
        Some(l) if ds.spec[j].is_categorical() => l.to_string(),
        _ => format!("{v}"),
    }
}

/// Runs every stage up to and including `last`. The placebo stage runs only
/// when enabled in the configuration.
pub fn run_until(cfg: &PipelineConfig, base: &Path, out: &Path, last: Stage) -> Result<Manifest, CliError> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(McfError::from)?;
    let mut run = Run {
        cfg,
        base,
        out,
        seeds: BTreeMap::new(),
        stages: Vec::new(),
        skipped: Vec::new(),
        files: Vec::new(),
    };

    let ds = run.step(Stage::Ingest, ingest)?;
    let mut state = State {
        full: ds.clone(),
        est: ds,
        forest: None,
        weights: None,
        leaves: Vec::new(),
        scores: None,
    };
    let stages = [
        Stage::PseudoStart,
        Stage::Support,
        Stage::Deselect,
        Stage::Forest,
        Stage::Effects,
        Stage::Clustering,
        Stage::Scores,
        Stage::Allocation,
        Stage::PolicyTree,
    ];
    for stage in stages.into_iter().filter(|&s| s <= last) {
        run.step(stage, |r| match stage {
            Stage::PseudoStart => pseudo_start(r, &mut state),
            Stage::Support => support(r, &mut state),
            Stage::Deselect => deselect(r, &mut state),
            Stage::Forest => forest(r, &mut state),
            Stage::Effects => effects(r, &state),
            Stage::Clustering => clustering(r, &state),
            Stage::Scores => scores(r, &mut state),
            Stage::Allocation => allocation(r, &state),
            Stage::PolicyTree => policy_trees(r, &state),
            Stage::Ingest | Stage::Placebo => unreachable!("handled outside the loop"),
        })?;
    }
    if last == Stage::Placebo {
        if cfg.placebo.enabled {
            run.step(Stage::Placebo, placebo)?;
        } else {
            run.skipped.push(Stage::Placebo.name().to_string());
        }
    }
    run.finish()
}

/// Every stage.
pub fn run_pipeline(cfg: &PipelineConfig, base: &Path, out: &Path) -> Result<Manifest, CliError> {
    run_until(cfg, base, out, Stage::Placebo)
}

/// The placebo stage on its own, regardless of the `enabled` flag.
pub fn run_placebo(cfg: &PipelineConfig, base: &Path, out: &Path) -> Result<Manifest, CliError> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(McfError::from)?;
    let mut run = Run {
        cfg,
        base,
        out,
        seeds: BTreeMap::new(),
        stages: Vec::new(),
        skipped: Vec::new(),
        files: Vec::new(),
    };
    run.step(Stage::Placebo, placebo)?;
    run.finish()
}

fn ingest(r: &mut Run) -> Result<Dataset> {
    let seed = r.seed("data");
    let ds = r.cfg.data.load(r.base, seed, "data")?;
    r.cfg.validate_features(&ds)?;
    for o in &r.cfg.outcomes {
        o.validate(mcf_core::dataset::HORIZON_MONTHS)?;
    }
    let p = r.path("data.csv");
    write_dataset(&ds, &p)?;
    let p = r.path("features.json");
    write_feature_spec(&ds.spec, &p)?;
    if let Some(t) = &ds.truth {
        let p = r.path("truth.csv");
        write_truth(&ds, t, &p)?;
    }
    let rows: Vec<Vec<String>> = balance_report(&ds)?
        .into_iter()
        .map(|b| {
            let mut row = vec![b.variable];
            row.extend(b.means.iter().map(|&m| num(m)));
            row.extend(b.std_diff.iter().map(|&d| f(d)));
            row.extend(b.large.iter().map(|&l| u8::from(l).to_string()));
            row
        })
        .collect();
    let header = [
        "variable", "mean_NOP", "mean_SVT", "mean_LVT", "mean_OT", "sd_SVT", "sd_LVT", "sd_OT", "large_SVT",
        "large_LVT", "large_OT",
    ];
    r.csv("balance.csv", &header, &rows)?;
    Ok(ds)
}

fn pseudo_start(r: &mut Run, st: &mut State) -> Result<()> {
    let missing = st.full.units.iter().filter(|u| u.treatment == 0 && u.start_day.is_none()).count();
    if missing == 0 {
        log::info!("every non-participant has a start day; nothing to simulate");
        r.skipped.push("pseudo-start simulation".into());
        return Ok(());
    }
    let s = &r.cfg.pseudo_start;
    let seed = r.seed("pseudo-start");
    let (lasso, model) = fit_start_model(&st.full, &s.gender_feature, s.folds, s.grid_size, seed)?;
    let result = simulate_pseudo_starts(&model, &st.full, seed)?;
    let coef: Vec<Vec<String>> = model
        .coefficient_rows()
        .into_iter()
        .map(|(name, b, se, star)| vec![name, num(b), num(se), star.to_string()])
        .collect();
    r.csv("pseudo_start_coefficients.csv", &["term", "estimate", "se", "stars"], &coef)?;
    let rows: Vec<Vec<String>> = result
        .starts
        .iter()
        .map(|p| {
            vec![
                p.id.clone(),
                p.start_day.to_string(),
                p.excluded.map(|e| format!("{e:?}")).unwrap_or_default(),
            ]
        })
        .collect();
    r.csv("pseudo_starts.csv", &["id", "start_day", "excluded"], &rows)?;
    let [beyond, ended, both] = result.exclusion_counts();
    r.json(
        "pseudo_start_summary.json",
        &serde_json::json!({
            "simulated": result.starts.len(),
            "kept": result.kept(),
            "excluded_beyond_nine_months": beyond,
            "excluded_spell_ended": ended,
            "excluded_both": both,
            "selected_lambda": lasso.selected_lambda,
            "active_terms": model.active.len(),
            "residual_sd": model.sigma(),
        }),
    )?;
    st.full = apply_pseudo_starts(&st.full, &result)?;
    st.est = st.full.clone();
    Ok(())
}

fn support(r: &mut Run, st: &mut State) -> Result<()> {
    let rep = check_support(&st.full, r.cfg.support_trim)?;
    r.json("support.json", &rep)?;
    if rep.flagged.len() == st.full.n_units() {
        return Err(McfError::data("every unit lies outside the common support"));
    }
    if !rep.flagged.is_empty() {
        let keep: Vec<usize> = (0..st.full.n_units()).filter(|i| rep.flagged.binary_search(i).is_err()).collect();
        st.full = st.full.subset(&keep)?;
        st.est = st.full.clone();
    }
    Ok(())
}

fn forest_config(r: &mut Run, ds: &Dataset, label: &str) -> ForestConfig {
    let mut c = r.cfg.forest.clone();
    c.seed = r.seed(label);
    c.m_try = c.m_try.min(ds.n_features());
    c
}

fn deselect(r: &mut Run, st: &mut State) -> Result<()> {
    if !r.cfg.deselect {
        r.skipped.push("feature deselection".into());
        return Ok(());
    }
    let cfg = forest_config(r, &st.full, "deselect-forest");
    let seed = r.seed("deselect");
    let rep = feature_deselect(&st.full, &cfg, seed)?;
    r.json("deselection.json", &rep)?;
    st.full = st.full.subset(&rep.estimation_units)?;
    st.est = st.full.select_features(&rep.retained)?;
    Ok(())
}

fn forest(r: &mut Run, st: &mut State) -> Result<()> {
    let cfg = forest_config(r, &st.est, "forest");
    let model = build_forest(&st.est, &cfg)?;
    let t = targets(&st.est);
    let leaves = model.assign_leaves(&t);
    let weights = compute_weights(&model, &t);
    let p = r.path("forest.json");
    std::fs::write(p, model.to_json()?)?;
    let leaves_per_tree = model.trees.iter().map(|t| t.n_leaves()).sum::<usize>() as f64 / model.trees.len() as f64;
    r.json(
        "forest_summary.json",
        &serde_json::json!({
            "trees": model.trees.len(),
            "training_units": model.n_train(),
            "features": st.est.spec.iter().map(|s| s.name.clone()).collect::<Vec<_>>(),
            "mean_leaves_per_tree": leaves_per_tree,
            "unsupported_unit_arms": weights.unsupported_count(),
            "config": cfg,
        }),
    )?;

    let all: Vec<usize> = (0..st.est.n_units()).collect();
    let mut groups = vec![all];
    let arms = st.est.treatments();
    for d in 0..N_ARMS {
        groups.push((0..arms.len()).filter(|&i| arms[i] == d).collect());
    }
    let agg = aggregate_weights(&model, &leaves, &groups);
    let mut rows = Vec::new();
    for (g, a) in agg.iter().enumerate() {
        if groups[g].is_empty() {
            continue;
        }
        let level = if g == 0 { "ATE".to_string() } else { format!("ATET {}", ARM_LABELS[g - 1]) };
        for d in 0..N_ARMS {
            let w = weight_diagnostics(&level, d, std::slice::from_ref(&a.weights[d]));
            let mut row = vec![level.clone(), ARM_LABELS[d].to_string(), w.nonzero.to_string()];
            row.extend(w.shares_above.iter().map(|&s| num(s)));
            row.push(num(w.max_share));
            row.push(u8::from(w.concern).to_string());
            rows.push(row);
        }
    }
    let header = [
        "level", "arm", "nonzero", "above_1pct", "above_3pct", "above_4pct", "above_10pct", "from_25pct", "max_share",
        "concern",
    ];
    r.csv("weight_diagnostics.csv", &header, &rows)?;
    st.forest = Some(model);
    st.weights = Some(weights);
    st.leaves = leaves;
    Ok(())
}

fn populations(full: &Dataset, est: &Dataset, gate_variables: &[String]) -> Result<Vec<(Level, Vec<usize>)>> {
    let all: Vec<usize> = (0..est.n_units()).collect();
    let arms = est.treatments();
    let mut pops = vec![(Level::Ate, all.clone())];
    for d in 0..N_ARMS {
        let g: Vec<usize> = all.iter().copied().filter(|&i| arms[i] == d).collect();
        if g.is_empty() {
            return Err(McfError::data(format!("no units observed in arm {}", ARM_LABELS[d])));
        }
        pops.push((Level::Atet(d), g));
    }
    for v in gate_variables {
        for (cell, members) in feature_cells(full, v, &all)? {
            pops.push((
                Level::Gate {
                    variable: v.clone(),
                    cell,
                },
                members,
            ));
        }
    }
    Ok(pops)
}

fn effects(r: &mut Run, st: &State) -> Result<()> {
    let forest = st.forest.as_ref().expect("forest stage ran");
    let weights = st.weights.as_ref().expect("forest stage ran");
    let pops = populations(&st.full, &st.est, &r.cfg.gate_variables)?;
    let arms = st.est.treatments();
    let mut summary = Vec::new();
    for o in &r.cfg.outcomes {
        let id = o.id();
        let data = OutcomeData::new(st.est.outcome_values(o), arms.clone());
        let est: Vec<PopulationEstimate> = estimate_populations(forest, &st.leaves, &data, &pops)?;
        let ate = &est[0];
        let atets = &est[1..=N_ARMS];
        let gates = &est[N_ARMS + 1..];

        r.csv(&format!("effects_{id}.csv"), &arm_header(""), &effect_table(ate, NumberStyle::Fixed))?;

        let mut rows = population_table(atets, NumberStyle::Fixed);
        for (row, &(m, l)) in rows.iter_mut().zip(CONTRASTS.iter()) {
            row.push(match wald_across(atets, m, l) {
                Ok(w) => format!("{}{}", f(w.statistic), stars(w.p_value)),
                Err(e) => {
                    log::warn!("Wald test {} for {id}: {e}", contrast_label(m, l));
                    "-".into()
                }
            });
        }
        let mut header = arm_header("contrast");
        header.push("Wald".into());
        r.csv(&format!("effects_by_population_{id}.csv"), &header, &rows)?;

        let mut rows = Vec::new();
        for &(m, l) in CONTRASTS.iter() {
            for g in gate_differences(ate, gates, m, l) {
                rows.push(vec![
                    contrast_label(m, l),
                    g.variable,
                    g.cell,
                    num(g.share),
                    num(g.gate),
                    num(g.gate_se),
                    num(g.difference),
                    num(g.difference_se),
                    num(g.p_value),
                ]);
            }
        }
        let header = ["contrast", "variable", "cell", "share", "gate", "gate_se", "gate_minus_ate", "difference_se", "p_value"];
        r.csv(&format!("gates_{id}.csv"), &header, &rows)?;

        let pots = potential_outcomes(weights, &data);
        let sets: Vec<_> = CONTRASTS.iter().map(|&(m, l)| iates_from_potentials(&pots, m, l)).collect();
        let mut cells = vec![vec![String::new(); 2 * CONTRASTS.len()]; st.est.n_units()];
        for (c, set) in sets.iter().enumerate() {
            for e in &set.estimates {
                cells[e.target][2 * c] = num(e.point);
                cells[e.target][2 * c + 1] = num(e.se);
            }
        }
        let rows: Vec<Vec<String>> = cells
            .into_iter()
            .zip(&st.est.units)
            .map(|(c, u)| std::iter::once(u.id.clone()).chain(c).collect())
            .collect();
        let mut header = vec!["id".to_string()];
        for &(m, l) in CONTRASTS.iter() {
            header.push(contrast_label(m, l));
            header.push(format!("{}_se", contrast_label(m, l)));
        }
        r.csv(&format!("iates_{id}.csv"), &header, &rows)?;

        let mut rows = Vec::new();
        for set in sets.iter().filter(|s| s.l == 0) {
            if set.estimates.len() < 2 {
                continue;
            }
            let curve = sorted_effects(&set.points(), &set.ses())?;
            for k in 0..curve.points.len() {
                rows.push(vec![
                    contrast_label(set.m, set.l),
                    (k + 1).to_string(),
                    num(curve.points[k]),
                    num(curve.smoothed_se[k]),
                    num(curve.lower[k]),
                    num(curve.upper[k]),
                    num(curve.reference),
                ]);
            }
            summary.push(serde_json::json!({
                "outcome": id,
                "contrast": contrast_label(set.m, set.l),
                "iates": set.estimates.len(),
                "excluded": set.excluded.len(),
                "bandwidth": curve.bandwidth,
                "share_significant": curve.share_significant,
            }));
        }
        let header = ["contrast", "rank", "iate", "smoothed_se", "lower", "upper", "ate"];
        r.csv(&format!("sorted_effects_{id}.csv"), &header, &rows)?;
    }
    r.json("iate_summary.json", &summary)?;
    Ok(())
}

/// Potential outcomes of `outcome` for every estimation unit.
fn potentials(st: &State, outcome: &Outcome) -> Vec<[Option<(f64, f64)>; N_ARMS]> {
    let data = OutcomeData::new(st.est.outcome_values(outcome), st.est.treatments());
    potential_outcomes(st.weights.as_ref().expect("forest stage ran"), &data)
}

fn clustering(r: &mut Run, st: &State) -> Result<()> {
    let pots = potentials(st, &r.cfg.employment_outcome);
    let units: Vec<usize> = (0..pots.len()).filter(|&i| pots[i].iter().all(Option::is_some)).collect();
    let value = |i: usize, d: usize| pots[i][d].expect("supported").0;
    let iates: Vec<Vec<f64>> = units.iter().map(|&i| (1..N_ARMS).map(|d| value(i, d) - value(i, 0)).collect()).collect();
    let nop: Vec<f64> = units.iter().map(|&i| value(i, 0)).collect();
    let c = &r.cfg.clustering;
    let seed = r.seed("kmeans");
    let model = kmeans_pp(&iates, c.k, seed, c.restarts)?;
    let covariates = if c.covariates.is_empty() {
        st.full.spec.iter().map(|s| s.name.clone()).collect()
    } else {
        c.covariates.clone()
    };
    let labels: Vec<String> = (1..N_ARMS).map(|d| contrast_label(d, 0)).collect();
    let prof = cluster_profile(&model, &iates, &labels, &st.full, &units, &covariates, &nop)?;
    let mut header = vec!["row".to_string()];
    header.extend((1..=prof.order.len()).map(|k| format!("cluster_{k}")));
    let mut rows = vec![std::iter::once("units".to_string()).chain(prof.sizes.iter().map(|s| s.to_string())).collect()];
    rows.extend(
        prof.rows
            .iter()
            .map(|(label, v)| std::iter::once(label.clone()).chain(v.iter().map(|&x| f(x))).collect()),
    );
    r.csv("clusters.csv", &header, &rows)?;
    // column position of each cluster id
    let mut rank = vec![0; prof.order.len()];
    for (pos, &c) in prof.order.iter().enumerate() {
        rank[c] = pos + 1;
    }
    let rows: Vec<Vec<String>> = units
        .iter()
        .zip(&model.assignment)
        .map(|(&i, &c)| vec![st.full.units[i].id.clone(), rank[c].to_string()])
        .collect();
    r.csv("cluster_assignment.csv", &["id", "cluster"], &rows)?;
    r.json(
        "cluster_summary.json",
        &serde_json::json!({
            "k": model.k(),
            "k_requested": model.k_requested,
            "inertia": model.inertia,
            "winning_restart": model.restart,
            "units": units.len(),
        }),
    )?;
    Ok(())
}

fn scores(r: &mut Run, st: &mut State) -> Result<()> {
    let emp_o = r.cfg.employment_outcome;
    let ue_o = r.cfg.unemployment_outcome;
    let olf_o = Outcome {
        state: LabourState::OutOfLabourForce,
        window: emp_o.window,
    };
    let (emp, ue, olf) = (potentials(st, &emp_o), potentials(st, &ue_o), potentials(st, &olf_o));
    let ok = |p: &[Option<(f64, f64)>; N_ARMS]| p.iter().all(Option::is_some);
    let units: Vec<usize> = (0..emp.len()).filter(|&i| ok(&emp[i]) && ok(&ue[i]) && ok(&olf[i])).collect();
    if units.is_empty() {
        return Err(McfError::data("no unit has comparison weights for every arm"));
    }
    let means = |p: &[[Option<(f64, f64)>; N_ARMS]]| -> Vec<[f64; N_ARMS]> {
        units.iter().map(|&i| std::array::from_fn(|d| p[i][d].expect("supported").0)).collect()
    };
    let z = |p: &[[Option<(f64, f64)>; N_ARMS]]| -> Vec<[f64; N_ARMS - 1]> {
        units
            .iter()
            .map(|&i| {
                std::array::from_fn(|k| {
                    let (a, b) = (p[i][k + 1].expect("supported"), p[i][0].expect("supported"));
                    let se = (a.1 + b.1).sqrt();
                    if se > 0.0 {
                        (a.0 - b.0) / se
                    } else {
                        0.0
                    }
                })
            })
            .collect()
    };
    let potential = PotentialScores {
        emp: means(&emp),
        ue: means(&ue),
        olf: means(&olf),
    };
    let observed: Vec<usize> = units.iter().map(|&i| st.full.units[i].treatment).collect();
    let mut header = vec!["id".to_string(), "observed".to_string()];
    for p in ["emp", "ue", "olf"] {
        header.extend(ARM_LABELS.iter().map(|a| format!("{p}_{a}")));
    }
    let rows: Vec<Vec<String>> = units
        .iter()
        .enumerate()
        .map(|(k, &i)| {
            let mut row = vec![st.full.units[i].id.clone(), observed[k].to_string()];
            for v in [&potential.emp, &potential.ue, &potential.olf] {
                row.extend(v[k].iter().map(|&x| num(x)));
            }
            row
        })
        .collect();
    r.csv("scores.csv", &header, &rows)?;

    // policy-tree input: every feature plus the composite score per arm
    let composite = potential.composite();
    let mut header = vec!["id".to_string()];
    header.extend(st.full.spec.iter().map(|s| s.name.clone()));
    header.extend(ARM_LABELS.iter().map(|s| s.to_string()));
    let rows: Vec<Vec<String>> = units
        .iter()
        .enumerate()
        .map(|(k, &i)| {
            let u = &st.full.units[i];
            let mut row = vec![u.id.clone()];
            row.extend(u.features.iter().enumerate().map(|(j, &v)| feature_label(&st.full, j, v)));
            row.extend(composite[k].iter().map(|&x| num(x)));
            row
        })
        .collect();
    r.csv("policy_scores.csv", &header, &rows)?;

    st.scores = Some(Scores {
        emp_z: z(&emp),
        ue_z: z(&ue),
        units,
        potential,
        observed,
    });
    Ok(())
}

fn allocation(r: &mut Run, st: &State) -> Result<()> {
    let s = st.scores.as_ref().expect("score stage ran");
    let composite = s.potential.composite();
    let ds = st.full.subset(&s.units)?;
    let observed_cap = Capacity::observed(&s.observed);
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for (k, sc) in r.cfg.allocations.clone().iter().enumerate() {
        let plan = match sc {
            Scenario::Observed => AllocationPlan::new("observed", s.observed.clone(), &composite, &s.observed),
            Scenario::Random { shares } => {
                let obs = AllocationPlan::new("observed", s.observed.clone(), &composite, &s.observed);
                let sh = shares.unwrap_or([obs.shares[1], obs.shares[2], obs.shares[3]]);
                let seed = r.seed(&format!("allocation-random-{k}"));
                allocate_random(sh, &composite, &s.observed, seed)?
            }
            Scenario::Unconstrained => allocate_unconstrained(&composite, &s.observed),
            Scenario::Significant { alpha } => allocate_significant(&composite, &s.emp_z, &s.ue_z, *alpha, &s.observed)?,
            Scenario::Priority { priority, capacity } => {
                let cap = capacity.clone().unwrap_or_else(|| observed_cap.clone());
                let keys = priority_keys(*priority, &ds, &composite)?;
                allocate_priority(&composite, &cap, &keys, priority.label(), &s.observed)?
            }
            Scenario::SequentialSwap { capacity } => {
                let cap = capacity.clone().unwrap_or_else(|| observed_cap.clone());
                allocate_sequential_swap(&s.observed, &composite, &cap, &s.observed)?
            }
        };
        summary.push(serde_json::json!({
            "rule": plan.rule,
            "objective": plan.objective,
            "switchers": plan.switchers.len(),
            "swaps": plan.swaps,
        }));
        rows.push(evaluate_allocation(&plan, &s.potential, &s.observed).cells());
    }
    r.csv("allocation.csv", &AllocationRow::HEADER, &rows)?;
    r.json("allocation_summary.json", &summary)?;
    Ok(())
}

fn policy_trees(r: &mut Run, st: &State) -> Result<()> {
    let s = st.scores.as_ref().expect("score stage ran");
    let composite = s.potential.composite();
    let ds = st.full.subset(&s.units)?;
    let sm = ScoreMatrix::new(
        ARM_LABELS.iter().map(|a| a.to_string()).collect(),
        composite.iter().map(|c| c.to_vec()).collect(),
    )?;
    let mut rows = Vec::new();
    for t in &r.cfg.policy_trees {
        let sel = ds.select_features(&t.features)?;
        let x = targets(&sel);
        let cfg = PolicyTreeConfig {
            depth: t.depth,
            approximation: t.approximation,
            max_category_values: t.max_category_values,
            restrictions: t.restrictions.clone(),
        };
        let tree = tree_search(&sm, &x, &sel.spec, &cfg)?;
        let p = r.path(&format!("policy_tree_{}.json", t.name));
        std::fs::write(p, tree.to_json()?)?;
        let rules: Vec<Vec<String>> = tree.rules().into_iter().map(|rr| vec![rr.conditions.join(" and "), rr.arm]).collect();
        r.csv(&format!("policy_rules_{}.csv", t.name), &["conditions", "arm"], &rules)?;
        let arms = tree.predict(&x)?;
        let plan = AllocationPlan::new(&format!("policy tree {}", t.name), arms, &composite, &s.observed);
        rows.push(evaluate_allocation(&plan, &s.potential, &s.observed).cells());
    }
    r.csv("policy_allocation.csv", &AllocationRow::HEADER, &rows)?;
    Ok(())
}

fn placebo(r: &mut Run) -> Result<()> {
    let p = &r.cfg.placebo;
    let source = p
        .prior_spell
        .clone()
        .ok_or_else(|| McfError::data("placebo analysis requested but no prior-spell data is configured"))?;
    let seed = r.seed("placebo-data");
    let ds = source.load(r.base, seed, "placebo-data")?;
    let forest = forest_config(r, &ds, "placebo-forest");
    let pc = PlaceboConfig {
        forest,
        window: p.window,
        history_months: p.history_months,
        gate_variables: p.gate_variables.clone(),
        alpha: p.alpha,
    };
    let rep = placebo_run(&ds, &pc)?;
    r.json("placebo.json", &rep)?;
    let mut header = vec!["contrast".to_string()];
    header.extend(rep.outcomes.iter().map(Outcome::id));
    let rows: Vec<Vec<String>> = CONTRASTS
        .iter()
        .map(|&(m, l)| {
            let mut row = vec![contrast_label(m, l)];
            for o in &rep.outcomes {
                let id = o.id();
                let e = rep.effects.iter().find(|e| e.outcome == id && e.m == m && e.l == l);
                row.push(e.map_or_else(|| "-".into(), |e| format_estimate(e.point, e.se, NumberStyle::Adaptive)));
            }
            row
        })
        .collect();
    r.csv("placebo.csv", &header, &rows)?;
    Ok(())
}
