//! Multi-model experiment recipes.

use std::path::Path;

use serde::Serialize;

use super::{
    cmd_sweep, derive_seed, environment, evaluate_grid, generate, run_single, train_into, write_dataset,
    CsvTable, ExperimentConfig, Recipe, RunArtifact,
};
use crate::checkpoint::Checkpoint;
use crate::error::Result;
use crate::grad::{CorrectionMode, TrajectoryBatch};
use crate::policy::PolicyParameters;
use crate::sim::{self, EnvironmentSpec, ExplorationReport, ProbeSet, RankCdfTable};
use crate::train::{self, BehaviorSource};

/// Runs whichever recipe the config names and returns a one-line summary.
pub fn cmd_recipe(cfg: &ExperimentConfig, out: &Path, force: bool) -> Result<String> {
    cfg.validate()?;
    Ok(match cfg.recipe {
        Recipe::Train => {
            let r = run_single(cfg, out, force)?;
            format!(
                "trained {} steps; reward per impression {:.4} +/- {:.4}",
                r.train.steps_completed, r.eval.metrics.mean_reward, r.eval.metrics.stderr
            )
        }
        Recipe::Sweep => {
            let rows = cmd_sweep(cfg, out, force)?;
            rows.iter()
                .map(|r| format!("{}={}: {:.4} +/- {:.4}", cfg.sweep_axis.expect("validated"), r.value, r.metric_mean, r.metric_stderr))
                .collect::<Vec<_>>()
                .join("; ")
        }
        Recipe::RankCdf => {
            let s = rank_cdf_recipe(cfg, out, force)?;
            format!(
                "share outside control top {}: control {:.4}, corrected {:.4} (ratio {:.2})",
                s.head_size, s.control_share_outside, s.test_share_outside, s.ratio
            )
        }
        Recipe::MassSpreading => {
            let s = mass_spreading_recipe(cfg, out, force)?;
            format!(
                "standard top mass {:.3}, top-K actions with mass >= 0.2: {}; set objective standard {:.4} vs top-K {:.4}",
                s.standard_top_mass, s.topk_actions_above_0_2, s.standard_objective, s.topk_objective
            )
        }
        Recipe::Exploration => {
            let r = exploration_recipe(cfg, out, force)?;
            format!(
                "paired delta {:.5} (95% CI {:.5} .. {:.5}) over {} seeds",
                r.mean_delta,
                r.ci_low,
                r.ci_high,
                r.per_seed.len()
            )
        }
    })
}

fn train_variant(
    cfg: &ExperimentConfig,
    data: &TrajectoryBatch,
    dir: &Path,
    force: bool,
) -> Result<PolicyParameters> {
    let run = RunArtifact::create(dir, cfg, force)?;
    Ok(train_into(cfg, data, &run)?.0.policy)
}

fn metrics_table(rows: &[(&str, String)]) -> CsvTable {
    let mut t = CsvTable::new("recipe summary", &["metric", "value"]);
    for (k, v) in rows {
        t.push(vec![k.to_string(), v.clone()]);
    }
    t
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankCdfSummary {
    pub head_size: usize,
    pub control_share_outside: f64,
    pub test_share_outside: f64,
    pub ratio: f64,
    pub table: RankCdfTable,
}

/// Trains a control model (`control_mode`) and a corrected model (`mode`)
/// on the same logged data and compares where their nominations land.
pub fn rank_cdf_recipe(cfg: &ExperimentConfig, out: &Path, force: bool) -> Result<RankCdfSummary> {
    let run = RunArtifact::create(out, cfg, force)?;
    let (header, data) = generate(cfg, cfg.events, cfg.seed)?;
    write_dataset(&run.path(RunArtifact::DATA), &header, &data)?;
    let (_, heldout) = generate(cfg, cfg.heldout_events, derive_seed(cfg.seed, "heldout"))?;

    let control_cfg = ExperimentConfig {
        mode: cfg.control_mode,
        ..cfg.clone()
    };
    let control = train_variant(&control_cfg, &data, &out.join("control"), force)?;
    let test = train_variant(cfg, &data, &out.join("corrected"), force)?;

    let probes = ProbeSet::from_batch(&heldout);
    let table = sim::nomination_rank_cdf(&control, &test, &probes, cfg.nominations)?;
    let head_size = table.head_size(0.1);
    let (control_share_outside, test_share_outside) = table.share_outside_head(head_size);
    let ratio = test_share_outside / control_share_outside;

    let mut csv = CsvTable::new(
        "nomination rank CDF; actions ordered by control nomination count",
        &["rank", "action", "control_cdf", "test_cdf"],
    );
    for r in &table.rows {
        csv.push(vec![
            r.rank.to_string(),
            r.action.to_string(),
            r.control_cdf.to_string(),
            r.test_cdf.to_string(),
        ]);
    }
    run.write_table(RunArtifact::RANK_CDF, &csv)?;
    run.write_table(
        RunArtifact::METRICS,
        &metrics_table(&[
            ("head_size", head_size.to_string()),
            ("control_share_outside_head", control_share_outside.to_string()),
            ("test_share_outside_head", test_share_outside.to_string()),
            ("ratio", ratio.to_string()),
        ]),
    )?;
    Ok(RankCdfSummary {
        head_size,
        control_share_outside,
        test_share_outside,
        ratio,
        table,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MassSpreadingSummary {
    pub standard_mass: Vec<f64>,
    pub topk_mass: Vec<f64>,
    pub standard_top_mass: f64,
    pub topk_actions_above_0_2: usize,
    pub standard_objective: f64,
    pub topk_objective: f64,
}

/// Trains `mode = standard` and `mode = topk` on the same data and compares
/// their mean policy mass and their exact set objective at `K = k`.
pub fn mass_spreading_recipe(cfg: &ExperimentConfig, out: &Path, force: bool) -> Result<MassSpreadingSummary> {
    let run = RunArtifact::create(out, cfg, force)?;
    let (header, data) = generate(cfg, cfg.events, cfg.seed)?;
    write_dataset(&run.path(RunArtifact::DATA), &header, &data)?;
    let (_, heldout) = generate(cfg, cfg.heldout_events, derive_seed(cfg.seed, "heldout"))?;

    let standard_cfg = ExperimentConfig {
        mode: CorrectionMode::Standard,
        ..cfg.clone()
    };
    let topk_cfg = ExperimentConfig {
        mode: CorrectionMode::Topk,
        ..cfg.clone()
    };
    let standard = train_variant(&standard_cfg, &data, &out.join("standard"), force)?;
    let topk = train_variant(&topk_cfg, &data, &out.join("topk"), force)?;

    let probes = ProbeSet::from_batch(&heldout);
    let standard_mass = sim::mean_policy_probs(&standard, &probes, cfg.temperature)?;
    let topk_mass = sim::mean_policy_probs(&topk, &probes, cfg.temperature)?;
    let env = environment(cfg)?;
    let objective = |p: &PolicyParameters| -> Result<f64> {
        match env.spec() {
            EnvironmentSpec::Stateless { .. } => sim::set_objective(&env, p, &cfg.policy_config(), cfg.k, &probes),
            EnvironmentSpec::Sequential { .. } => {
                Ok(evaluate_grid(cfg, p, &[cfg.k], &[cfg.serve_mode])?[0].metric())
            }
        }
    };
    let standard_objective = objective(&standard)?;
    let topk_objective = objective(&topk)?;
    let summary = MassSpreadingSummary {
        standard_top_mass: standard_mass.iter().copied().fold(0.0, f64::max),
        topk_actions_above_0_2: topk_mass.iter().filter(|&&m| m >= 0.2).count(),
        standard_mass,
        topk_mass,
        standard_objective,
        topk_objective,
    };

    let rewards = match cfg.env_spec() {
        EnvironmentSpec::Stateless { rewards, .. } => Some(rewards),
        EnvironmentSpec::Sequential { .. } => None,
    };
    let mut mass = CsvTable::new(
        "mean policy probability per action over held-out probe states",
        &["action", "reward", "standard_mass", "topk_mass"],
    );
    for a in 0..summary.standard_mass.len() {
        mass.push(vec![
            a.to_string(),
            super::opt(rewards.as_ref().map(|r| r[a])),
            summary.standard_mass[a].to_string(),
            summary.topk_mass[a].to_string(),
        ]);
    }
    run.write_table("mass.csv", &mass)?;
    run.write_table(
        RunArtifact::METRICS,
        &metrics_table(&[
            ("standard_top_mass", summary.standard_top_mass.to_string()),
            ("topk_actions_above_0_2", summary.topk_actions_above_0_2.to_string()),
            ("standard_set_objective", summary.standard_objective.to_string()),
            ("topk_set_objective", summary.topk_objective.to_string()),
        ]),
    )?;
    Ok(summary)
}

/// Base model for the exploration recipe: uncorrected training on
/// uniformly logged data.
pub fn exploration_base_model(cfg: &ExperimentConfig) -> Result<PolicyParameters> {
    let seed = derive_seed(cfg.seed, "warmup");
    let env = environment(cfg)?;
    let data = sim::generate_logged_data(&env, &sim::BehaviorPolicy::Uniform, cfg.events, seed)?;
    let mut train_cfg = cfg.train_config(seed);
    train_cfg.steps = cfg.warmup_steps;
    train_cfg.correction.mode = CorrectionMode::None;
    train_cfg.behavior_source = BehaviorSource::Logged;
    train_cfg.correction.kl_coefficient = 0.0;
    let out = train::train(&data, Checkpoint::new(cfg.init_params(seed)?, None), &train_cfg, |_| Ok(()))?;
    match out.failure {
        Some(e) => Err(e),
        None => Ok(out.checkpoint.policy),
    }
}

pub fn exploration_recipe(cfg: &ExperimentConfig, out: &Path, force: bool) -> Result<ExplorationReport> {
    let run = RunArtifact::create(out, cfg, force)?;
    let base = exploration_base_model(cfg)?;
    Checkpoint::new(base.clone(), None).save(&run.path("base_checkpoint.bin"))?;
    let env = environment(cfg)?;
    let report = sim::exploration_split_run(&env, &base, &cfg.exploration_config(cfg.seed), &cfg.seeds)?;

    let mut per_seed = CsvTable::new(
        "exploration buckets per seed; rewards are exact per-impression expectations",
        &[
            "seed",
            "deterministic_reward",
            "exploratory_reward",
            "delta",
            "holdout_coverage",
            "exploration_coverage",
            "holdout_events",
            "exploration_events",
        ],
    );
    for r in &report.per_seed {
        per_seed.push(vec![
            r.seed.to_string(),
            r.deterministic_reward.to_string(),
            r.exploratory_reward.to_string(),
            r.delta.to_string(),
            r.holdout_coverage.to_string(),
            r.exploration_coverage.to_string(),
            r.holdout_events.to_string(),
            r.exploration_events.to_string(),
        ]);
    }
    run.write_table("exploration.csv", &per_seed)?;
    run.write_table(
        RunArtifact::METRICS,
        &metrics_table(&[
            ("mean_delta", report.mean_delta.to_string()),
            ("ci95_low", report.ci_low.to_string()),
            ("ci95_high", report.ci_high.to_string()),
            ("seeds", report.per_seed.len().to_string()),
        ]),
    )?;
    Ok(report)
}
