use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mcf_cli::config::PipelineConfig;
use mcf_cli::pipeline::{run_placebo, run_until, Manifest, Stage};
use mcf_cli::{is_policy_tree_job, run_policy_tree_job, CliError, PolicyTreeJob};
use mcf_core::McfError;

#[derive(Parser)]
#[command(name = "mcf", version, about = "Modified causal forest evaluation and treatment allocation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// JSON configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "mcf-out")]
    out: PathBuf,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Load or generate the data and write the balance report.
    Synth,
    /// Simulate programme starts for non-participants.
    Pseudostart,
    /// Common support, feature deselection and the forest.
    Forest,
    /// Effects at every aggregation level.
    Effects,
    /// Policy trees, from the pipeline or from a score-matrix job file.
    Policytree,
    /// Allocation scenarios.
    Allocate,
    /// k-means clustering of the individualised effects.
    Cluster,
    /// Placebo analysis on prior-spell data.
    Placebo,
    /// Every stage.
    Pipeline,
}

impl Command {
    fn last_stage(self) -> Stage {
        match self {
            Command::Synth => Stage::Ingest,
            Command::Pseudostart => Stage::PseudoStart,
            Command::Forest => Stage::Forest,
            Command::Effects => Stage::Effects,
            Command::Policytree => Stage::PolicyTree,
            Command::Allocate => Stage::Allocation,
            Command::Cluster => Stage::Clustering,
            Command::Placebo | Command::Pipeline => Stage::Placebo,
        }
    }
}

enum Outcome {
    Manifest(Manifest),
    Tree(PathBuf),
}

fn base_dir(config: Option<&Path>) -> PathBuf {
    config
        .and_then(Path::parent)
        .map_or_else(|| PathBuf::from("."), Path::to_path_buf)
}

fn run(cli: &Cli) -> Result<Outcome, CliError> {
    let base = base_dir(cli.common.config.as_deref());
    let value: Option<serde_json::Value> = match &cli.common.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(McfError::from)?;
            Some(serde_json::from_str(&text).map_err(McfError::from)?)
        }
        None => None,
    };
    if let (Command::Policytree, Some(v)) = (cli.command, &value) {
        if is_policy_tree_job(v) {
            let job: PolicyTreeJob = serde_json::from_value(v.clone()).map_err(McfError::from)?;
            run_policy_tree_job(&job, &base, &cli.common.out)?;
            return Ok(Outcome::Tree(cli.common.out.clone()));
        }
    }
    let mut cfg: PipelineConfig = match value {
        Some(v) => serde_json::from_value(v).map_err(McfError::from)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let manifest = match cli.command {
        Command::Placebo => run_placebo(&cfg, &base, &cli.common.out)?,
        c => run_until(&cfg, &base, &cli.common.out, c.last_stage())?,
    };
    Ok(Outcome::Manifest(manifest))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.common.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start {n} workers: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(Outcome::Manifest(m)) => {
            println!(
                "{} stage(s) written to {}; outputs sha256 {}",
                m.stages.len(),
                cli.common.out.display(),
                m.outputs_sha256
            );
            ExitCode::SUCCESS
        }
        Ok(Outcome::Tree(dir)) => {
            println!("policy tree written to {}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
