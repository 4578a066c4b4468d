//! Experiment plumbing behind the `reinrec` command-line tool: flat TOML
//! configs, dataset files, run directories, and the commands themselves.
//!
//! Every command is reproducible from its config and seed. Runs that fan
//! out (sweeps) execute on the rayon pool and are folded back in sorted
//! run order, so aggregated tables do not depend on scheduling.

mod artifacts;
mod config;
mod dataset;
mod recipes;

pub use artifacts::{check_output_file, opt, prepare_output_dir, version_string, CsvTable, JsonLines, RunArtifact};
pub use config::{BehaviorKind, EnvKind, ExperimentConfig, OptimizerName, Recipe, SweepAxis};
pub use dataset::{dataset_to_string, parse_dataset, read_dataset, write_dataset, DatasetHeader};
pub use recipes::{
    cmd_recipe, exploration_recipe, mass_spreading_recipe, rank_cdf_recipe, MassSpreadingSummary,
    RankCdfSummary,
};

use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::grad::{
    self, compare_gradients, numeric_gradient, CorrectionMode, GradCheckReport, PolicyGradientObjective,
    SurrogateObjective, TrajectoryBatch,
};
use crate::numerics::RngStream;
use crate::policy::{PolicyParameters, ServeMode, TensorId};
use crate::sim::{self, Environment, EvalMetrics};
use crate::train::{self, StepRecord};

/// Process exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) | Error::DimensionMismatch { .. } => 2,
        Error::Data(_) | Error::Format(_) | Error::Io(_) | Error::DivisionByZero(_) => 3,
        Error::NumericalFailure { .. } => 4,
    }
}

/// A seed derived from `seed` for a named purpose.
pub fn derive_seed(seed: u64, purpose: &str) -> u64 {
    RngStream::named(seed, purpose).next_u64()
}

pub fn environment(cfg: &ExperimentConfig) -> Result<Environment> {
    Environment::new(cfg.env_spec())
}

/// Logged data for `cfg` at `cfg.seed`, with its file header.
pub fn generate(cfg: &ExperimentConfig, events: usize, seed: u64) -> Result<(DatasetHeader, TrajectoryBatch)> {
    let env = environment(cfg)?;
    let behavior = cfg.behavior_policy()?;
    let batch = sim::generate_logged_data(&env, &behavior, events, seed)?;
    let header = DatasetHeader {
        env_fingerprint: cfg.env_spec().fingerprint(),
        seed,
        behavior: behavior.describe(),
    };
    Ok((header, batch))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DataSummary {
    pub events: usize,
    pub trajectories: usize,
}

pub fn cmd_generate_data(cfg: &ExperimentConfig, out: &Path, force: bool) -> Result<DataSummary> {
    cfg.validate()?;
    check_output_file(out, force)?;
    let (header, batch) = generate(cfg, cfg.events, cfg.seed)?;
    write_dataset(out, &header, &batch)?;
    Ok(DataSummary {
        events: batch.num_events(),
        trajectories: batch.trajectories.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub steps_completed: usize,
    pub final_objective: Option<f64>,
    /// Mean over steps of the batch weight variance.
    pub mean_weight_var: f64,
    pub mean_capped_fraction: f64,
    pub mean_effective_sample_size: f64,
}

/// Trains on an in-memory batch, writing the run's diagnostics and
/// checkpoint into `run`. A numerical failure is returned as an error
/// after the last good checkpoint has been saved.
pub fn train_into(
    cfg: &ExperimentConfig,
    data: &TrajectoryBatch,
    run: &RunArtifact,
) -> Result<(Checkpoint, TrainSummary)> {
    let init = Checkpoint::new(cfg.init_params(cfg.seed)?, None);
    let mut log = JsonLines::create(&run.path(RunArtifact::DIAGNOSTICS))?;
    let mut records: Vec<StepRecord> = Vec::new();
    let outcome = train::train(data, init, &cfg.train_config(cfg.seed), |r| {
        log.write(r)?;
        records.push(r.clone());
        Ok(())
    })?;
    log.finish()?;
    outcome.checkpoint.save(&run.path(RunArtifact::CHECKPOINT))?;

    let n = records.len().max(1) as f64;
    let summary = TrainSummary {
        steps_completed: outcome.steps_completed,
        final_objective: records.last().map(|r| r.diagnostics.objective),
        mean_weight_var: records.iter().map(|r| r.diagnostics.weight_var).sum::<f64>() / n,
        mean_capped_fraction: records.iter().map(|r| r.diagnostics.capped_fraction).sum::<f64>() / n,
        mean_effective_sample_size: records
            .iter()
            .map(|r| r.diagnostics.effective_sample_size)
            .sum::<f64>()
            / n,
    };
    let mut table = CsvTable::new(
        "training summary; weight statistics are means over steps",
        &[
            "steps_completed",
            "final_objective",
            "mean_weight_var",
            "mean_capped_fraction",
            "mean_effective_sample_size",
        ],
    );
    table.push(vec![
        summary.steps_completed.to_string(),
        opt(summary.final_objective),
        summary.mean_weight_var.to_string(),
        summary.mean_capped_fraction.to_string(),
        summary.mean_effective_sample_size.to_string(),
    ]);
    run.write_table("train_summary.csv", &table)?;
    match outcome.failure {
        Some(e) => Err(e),
        None => Ok((outcome.checkpoint, summary)),
    }
}

pub fn cmd_train(cfg: &ExperimentConfig, dataset: &Path, out: &Path, force: bool) -> Result<TrainSummary> {
    cfg.validate()?;
    let (header, data) = read_dataset(dataset)?;
    let expected = cfg.env_spec().fingerprint();
    if header.env_fingerprint != expected {
        return Err(Error::Config(format!(
            "dataset was generated for environment {}, config describes {expected}",
            header.env_fingerprint
        )));
    }
    data.validate(cfg.action_count())?;
    let run = RunArtifact::create(out, cfg, force)?;
    train_into(cfg, &data, &run).map(|(_, s)| s)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRow {
    pub mode: ServeMode,
    pub k: usize,
    pub metrics: EvalMetrics,
}

impl EvalRow {
    pub fn ci95(&self) -> (f64, f64) {
        let h = 1.96 * self.metrics.stderr;
        (self.metrics.mean_reward - h, self.metrics.mean_reward + h)
    }

    /// The exact expectation when available, otherwise the Monte-Carlo mean.
    pub fn metric(&self) -> f64 {
        self.metrics.exact_mean.unwrap_or(self.metrics.mean_reward)
    }
}

/// Evaluates `params` for every `(mode, k)` pair, modes outermost.
pub fn evaluate_grid(
    cfg: &ExperimentConfig,
    params: &PolicyParameters,
    ks: &[usize],
    modes: &[ServeMode],
) -> Result<Vec<EvalRow>> {
    if ks.is_empty() || modes.is_empty() {
        return Err(Error::Config("evaluation needs at least one K and one mode".into()));
    }
    let env = environment(cfg)?;
    let mut rows = Vec::with_capacity(ks.len() * modes.len());
    for &mode in modes {
        let policy_cfg = crate::policy::PolicyConfig {
            serve_mode: mode,
            ..cfg.policy_config()
        };
        for &k in ks {
            let metrics = sim::evaluate_policy(&env, params, &policy_cfg, k, cfg.eval_rollouts, cfg.seed)?;
            rows.push(EvalRow { mode, k, metrics });
        }
    }
    Ok(rows)
}

pub fn eval_table(rows: &[EvalRow]) -> CsvTable {
    let mut table = CsvTable::new(
        "policy evaluation; rewards are per impression, ci95 is mean_reward +/- 1.96 stderr",
        &[
            "mode",
            "k",
            "mean_reward",
            "stderr",
            "ci95_low",
            "ci95_high",
            "exact_mean",
            "exact_stderr",
            "click_rate",
            "mean_set_size",
            "impressions",
        ],
    );
    for r in rows {
        let (lo, hi) = r.ci95();
        let m = &r.metrics;
        table.push(vec![
            r.mode.to_string(),
            r.k.to_string(),
            m.mean_reward.to_string(),
            m.stderr.to_string(),
            lo.to_string(),
            hi.to_string(),
            opt(m.exact_mean),
            opt(m.exact_stderr),
            m.click_rate.to_string(),
            m.mean_set_size.to_string(),
            m.impressions.to_string(),
        ]);
    }
    table
}

pub fn cmd_evaluate(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    ks: &[usize],
    modes: &[ServeMode],
    out: &Path,
    force: bool,
) -> Result<Vec<EvalRow>> {
    cfg.validate()?;
    check_output_file(out, force)?;
    let ck = Checkpoint::load(checkpoint)?;
    if ck.dims() != cfg.dims()? {
        return Err(Error::Config(format!(
            "checkpoint dims {:?} do not match config dims {:?}",
            ck.dims(),
            cfg.dims()?
        )));
    }
    let rows = evaluate_grid(cfg, &ck.policy, ks, modes)?;
    eval_table(&rows).write(out, &cfg.hash())?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub seed: u64,
    pub train: TrainSummary,
    pub eval: EvalRow,
}

/// Generate, train and evaluate one seed into its own directory. Produces
/// the same files as `generate-data`, `train` and `evaluate` run by hand.
pub fn run_single(cfg: &ExperimentConfig, dir: &Path, force: bool) -> Result<RunSummary> {
    let run = RunArtifact::create(dir, cfg, force)?;
    let (header, data) = generate(cfg, cfg.events, cfg.seed)?;
    write_dataset(&run.path(RunArtifact::DATA), &header, &data)?;
    let (ck, train) = train_into(cfg, &data, &run)?;
    let rows = evaluate_grid(cfg, &ck.policy, &[cfg.serve_k], &[cfg.serve_mode])?;
    run.write_table(RunArtifact::METRICS, &eval_table(&rows))?;
    Ok(RunSummary {
        seed: cfg.seed,
        train,
        eval: rows.into_iter().next().expect("one row"),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: f64,
    pub runs: usize,
    pub metric_mean: f64,
    pub metric_stderr: f64,
    pub mean_reward_mean: f64,
    pub weight_var_mean: f64,
    pub capped_fraction_mean: f64,
}

fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// One run per axis value per seed, each in `out/<axis>=<value>/seed-<s>`.
pub fn cmd_sweep(cfg: &ExperimentConfig, out: &Path, force: bool) -> Result<Vec<SweepRow>> {
    let axis = cfg
        .sweep_axis
        .ok_or_else(|| Error::Config("sweep needs sweep_axis".into()))?;
    if cfg.sweep_values.is_empty() {
        return Err(Error::Config("sweep_values is empty".into()));
    }
    if cfg.seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one seed".into()));
    }
    let root = RunArtifact::create(out, cfg, force)?;
    let jobs = cfg
        .sweep_values
        .iter()
        .flat_map(|&v| cfg.seeds.iter().map(move |&s| (v, s)))
        .map(|(v, s)| Ok((v, cfg.with_axis(axis, v)?.with_seed(s))))
        .collect::<Result<Vec<_>>>()?;
    let results = jobs
        .par_iter()
        .map(|(v, run_cfg)| {
            let dir = out.join(format!("{axis}={v}")).join(format!("seed-{}", run_cfg.seed));
            run_single(run_cfg, &dir, force)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut runs = CsvTable::new(
        format!("one row per run of the {axis} sweep; metric is the exact per-impression expectation"),
        &["value", "seed", "metric", "mean_reward", "stderr", "mean_weight_var", "mean_capped_fraction"],
    );
    for ((v, _), r) in jobs.iter().zip(&results) {
        runs.push(vec![
            v.to_string(),
            r.seed.to_string(),
            r.eval.metric().to_string(),
            r.eval.metrics.mean_reward.to_string(),
            r.eval.metrics.stderr.to_string(),
            r.train.mean_weight_var.to_string(),
            r.train.mean_capped_fraction.to_string(),
        ]);
    }
    root.write_table("runs.csv", &runs)?;

    let mut rows = Vec::with_capacity(cfg.sweep_values.len());
    for &v in &cfg.sweep_values {
        let group: Vec<&RunSummary> = jobs
            .iter()
            .zip(&results)
            .filter(|((x, _), _)| x.to_bits() == v.to_bits())
            .map(|(_, r)| r)
            .collect();
        let metric: Vec<f64> = group.iter().map(|r| r.eval.metric()).collect();
        let (metric_mean, metric_stderr) = mean_stderr(&metric);
        let n = group.len() as f64;
        rows.push(SweepRow {
            value: v,
            runs: group.len(),
            metric_mean,
            metric_stderr,
            mean_reward_mean: group.iter().map(|r| r.eval.metrics.mean_reward).sum::<f64>() / n,
            weight_var_mean: group.iter().map(|r| r.train.mean_weight_var).sum::<f64>() / n,
            capped_fraction_mean: group.iter().map(|r| r.train.mean_capped_fraction).sum::<f64>() / n,
        });
    }
    let mut table = CsvTable::new(
        format!("{axis} sweep aggregated over seeds; metric is mean +/- stderr across seeds"),
        &[
            &axis.to_string(),
            "runs",
            "metric_mean",
            "metric_stderr",
            "mean_reward_mean",
            "weight_var_mean",
            "capped_fraction_mean",
        ],
    );
    for r in &rows {
        table.push(vec![
            r.value.to_string(),
            r.runs.to_string(),
            r.metric_mean.to_string(),
            r.metric_stderr.to_string(),
            r.mean_reward_mean.to_string(),
            r.weight_var_mean.to_string(),
            r.capped_fraction_mean.to_string(),
        ]);
    }
    root.write_table(RunArtifact::METRICS, &table)?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckRow {
    pub mode: CorrectionMode,
    pub report: GradCheckReport,
    pub passed: bool,
}

/// Finite-difference check of every correction mode at random parameters
/// on freshly logged data. `inject_fault` perturbs the analytic gradient
/// of one tensor, as a negative control for the checker itself.
pub fn cmd_grad_check(cfg: &ExperimentConfig, inject_fault: Option<TensorId>) -> Result<Vec<GradCheckRow>> {
    cfg.validate()?;
    let params = PolicyParameters::random(cfg.dims()?, 0.5, &mut RngStream::named(cfg.seed, "grad-check"));
    let (_, batch) = generate(cfg, cfg.grad_check_events, cfg.seed)?;
    [CorrectionMode::None, CorrectionMode::Standard, CorrectionMode::Topk]
        .into_iter()
        .map(|mode| {
            let correction = grad::CorrectionConfig {
                mode,
                ..cfg.correction(cfg.seed)
            };
            let objective = PolicyGradientObjective::freeze(&batch, &params, &correction)?;
            let mut analytic = objective.gradient(&params)?;
            if let Some(id) = inject_fault {
                let g = analytic.get_mut(id).as_mut_slice();
                g[0] += 1e-2 * (1.0 + g[0].abs());
            }
            let numeric = numeric_gradient(&objective, &params, cfg.grad_check_epsilon)?;
            let report = compare_gradients(&analytic, &numeric, cfg.grad_check_epsilon);
            let passed = report.passed(cfg.grad_check_tolerance);
            Ok(GradCheckRow { mode, report, passed })
        })
        .collect()
}
