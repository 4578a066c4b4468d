//! Bucketed exploration experiment.
//!
//! Users are split into three buckets. The first two are served greedily
//! by a base model and the third samples from the base model's softmax.
//! A "deterministic" model is then trained on buckets one and two and an
//! "exploratory" model on buckets one and three, so the only difference
//! between them is the 5% slice of data, collected with or without
//! exploration.

use std::collections::BTreeSet;
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use super::{evaluate_policy, rollout_logged, BehaviorPolicy, Environment};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::grad::{Trajectory, TrajectoryBatch};
use crate::numerics::RngStream;
use crate::policy::{PolicyConfig, PolicyParameters};
use crate::train::{train, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BucketSplit {
    pub control: f64,
    pub holdout: f64,
    pub exploration: f64,
}

impl Default for BucketSplit {
    fn default() -> Self {
        BucketSplit {
            control: 0.90,
            holdout: 0.05,
            exploration: 0.05,
        }
    }
}

impl BucketSplit {
    fn validate(&self) -> Result<()> {
        let parts = [self.control, self.holdout, self.exploration];
        if parts.iter().any(|p| !(*p > 0.0)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "bucket fractions must be positive and sum to 1, got {parts:?}"
            )));
        }
        Ok(())
    }

    /// Trajectory counts per bucket for `n` trajectories.
    pub fn sizes(&self, n: usize) -> [usize; 3] {
        let holdout = (self.holdout * n as f64).round() as usize;
        let exploration = (self.exploration * n as f64).round() as usize;
        [n.saturating_sub(holdout + exploration), holdout, exploration]
    }
}

#[derive(Debug, Clone)]
pub struct ExplorationConfig {
    pub events: usize,
    pub split: BucketSplit,
    /// Softmax temperature of the exploration bucket.
    pub exploration_temperature: f64,
    pub train: TrainConfig,
    pub eval_policy: PolicyConfig,
    pub eval_k: usize,
    pub eval_rollouts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExplorationSeedResult {
    pub seed: u64,
    pub deterministic_reward: f64,
    pub exploratory_reward: f64,
    pub delta: f64,
    pub holdout_coverage: usize,
    pub exploration_coverage: usize,
    pub holdout_events: usize,
    pub exploration_events: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExplorationReport {
    pub per_seed: Vec<ExplorationSeedResult>,
    pub mean_delta: f64,
    /// 95% interval on the paired per-seed deltas.
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Distinct `(previous action, action)` pairs in the data, with the start
/// of an episode counted as its own previous action.
pub fn coverage(trajectories: &[Trajectory]) -> usize {
    let mut seen = BTreeSet::new();
    for traj in trajectories {
        let mut prev = None;
        for e in &traj.events {
            seen.insert((prev, e.action));
            prev = Some(e.action);
        }
    }
    seen.len()
}

/// Two-sided 97.5% Student-t quantile.
pub(crate) fn t_quantile_975(df: usize) -> f64 {
    const TABLE: [f64; 30] = [
        12.706, 4.303, 3.182, 2.776, 2.571, 2.447, 2.365, 2.306, 2.262, 2.228, 2.201, 2.179, 2.160,
        2.145, 2.131, 2.120, 2.110, 2.101, 2.093, 2.086, 2.080, 2.074, 2.069, 2.064, 2.060, 2.056,
        2.052, 2.048, 2.045, 2.042,
    ];
    match df {
        0 => f64::INFINITY,
        d if d <= 30 => TABLE[d - 1],
        _ => 1.96,
    }
}

fn run_seed(env: &Environment, base: &Arc<PolicyParameters>, cfg: &ExplorationConfig, seed: u64) -> Result<ExplorationSeedResult> {
    let length = env.episode_length();
    let n_traj = cfg.events.div_ceil(length);
    let sizes = cfg.split.sizes(n_traj);
    let mut assign_rng = RngStream::named(seed, "bucket-assignment");
    let order = assign_rng.choose_distinct(&(0..n_traj).collect::<Vec<_>>(), n_traj)?;
    let mut bucket = vec![0usize; n_traj];
    for (pos, &id) in order.iter().enumerate() {
        bucket[id] = if pos < sizes[0] {
            0
        } else if pos < sizes[0] + sizes[1] {
            1
        } else {
            2
        };
    }

    let greedy = BehaviorPolicy::Greedy { params: base.clone() };
    let explore = BehaviorPolicy::StaleModel {
        params: base.clone(),
        temperature: cfg.exploration_temperature,
    };
    let root = RngStream::named(seed, "exploration-data");
    let trajectories = (0..n_traj)
        .into_par_iter()
        .map(|i| {
            let policy = if bucket[i] == 2 { &explore } else { &greedy };
            rollout_logged(env, policy, length, i as u64, &mut root.split(i as u64))
        })
        .collect::<Result<Vec<_>>>()?;

    let pick = |b: usize| -> Vec<Trajectory> {
        trajectories
            .iter()
            .zip(&bucket)
            .filter(|(_, &x)| x == b)
            .map(|(t, _)| t.clone())
            .collect()
    };
    let (control, holdout, exploration) = (pick(0), pick(1), pick(2));
    let holdout_events = holdout.iter().map(|t| t.events.len()).sum();
    let exploration_events = exploration.iter().map(|t| t.events.len()).sum();
    let holdout_coverage = coverage(&holdout);
    let exploration_coverage = coverage(&exploration);

    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = seed;
    let fit = |extra: Vec<Trajectory>, source: &str| -> Result<PolicyParameters> {
        let mut all = control.clone();
        all.extend(extra);
        let data = TrajectoryBatch::new(all, source);
        let out = train(&data, Checkpoint::new((**base).clone(), None), &train_cfg, |_| Ok(()))?;
        match out.failure {
            Some(e) => Err(e),
            None => Ok(out.checkpoint.policy),
        }
    };
    let deterministic = fit(holdout, "greedy")?;
    let exploratory = fit(exploration, "greedy+exploration")?;

    let eval = |p: &PolicyParameters| -> Result<f64> {
        let m = evaluate_policy(env, p, &cfg.eval_policy, cfg.eval_k, cfg.eval_rollouts, seed)?;
        Ok(m.exact_mean.unwrap_or(m.mean_reward))
    };
    let deterministic_reward = eval(&deterministic)?;
    let exploratory_reward = eval(&exploratory)?;
    Ok(ExplorationSeedResult {
        seed,
        deterministic_reward,
        exploratory_reward,
        delta: exploratory_reward - deterministic_reward,
        holdout_coverage,
        exploration_coverage,
        holdout_events,
        exploration_events,
    })
}

/// Runs the bucketed experiment once per seed. Both models in a seed are
/// evaluated on the same simulated users, so the per-seed deltas are
/// paired.
pub fn exploration_split_run(
    env: &Environment,
    base: &PolicyParameters,
    cfg: &ExplorationConfig,
    seeds: &[u64],
) -> Result<ExplorationReport> {
    cfg.split.validate()?;
    if seeds.is_empty() {
        return Err(Error::Config("exploration run needs at least one seed".into()));
    }
    if cfg.events == 0 {
        return Err(Error::Config("exploration run needs events > 0".into()));
    }
    if !(cfg.exploration_temperature > 0.0) {
        return Err(Error::Config("exploration temperature must be positive".into()));
    }
    let base = Arc::new(base.clone());
    let per_seed = seeds
        .iter()
        .map(|&s| run_seed(env, &base, cfg, s))
        .collect::<Result<Vec<_>>>()?;
    let deltas: Vec<f64> = per_seed.iter().map(|r| r.delta).collect();
    let n = deltas.len() as f64;
    let mean_delta = deltas.iter().sum::<f64>() / n;
    let half = if deltas.len() > 1 {
        let var = deltas.iter().map(|d| (d - mean_delta).powi(2)).sum::<f64>() / (n - 1.0);
        t_quantile_975(deltas.len() - 1) * (var / n).sqrt()
    } else {
        f64::INFINITY
    };
    Ok(ExplorationReport {
        per_seed,
        mean_delta,
        ci_low: mean_delta - half,
        ci_high: mean_delta + half,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::LoggedEvent;

    fn traj(actions: &[usize]) -> Trajectory {
        Trajectory {
            id: 0,
            events: actions
                .iter()
                .enumerate()
                .map(|(step, &action)| LoggedEvent {
                    step,
                    action,
                    reward: 0.0,
                    behavior_prob: 1.0,
                })
                .collect(),
        }
    }

    #[test]
    fn coverage_counts_distinct_transitions() {
        assert_eq!(coverage(&[traj(&[1, 1, 1]), traj(&[1, 1])]), 2);
        assert_eq!(coverage(&[traj(&[1, 2, 1, 2])]), 3);
        assert_eq!(coverage(&[]), 0);
    }

    #[test]
    fn bucket_sizes() {
        let split = BucketSplit::default();
        assert_eq!(split.sizes(100), [90, 5, 5]);
        assert_eq!(split.sizes(1000).iter().sum::<usize>(), 1000);
        assert!(BucketSplit {
            control: 0.9,
            holdout: 0.1,
            exploration: 0.1
        }
        .validate()
        .is_err());
    }

    #[test]
    fn t_quantiles() {
        assert_eq!(t_quantile_975(4), 2.776);
        assert_eq!(t_quantile_975(100), 1.96);
    }
}
