//! The training loop: minibatch sampling, optional behavior-head fitting,
//! corrected policy-gradient ascent.

use serde::{Deserialize, Serialize};

use crate::behavior::{self, BehaviorHead};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::grad::{
    self, CorrectionConfig, Diagnostics, OptimizerKind, OptimizerState, Trajectory, TrajectoryBatch,
};
use crate::numerics::RngStream;

/// Where the importance weights' `β` comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BehaviorSource {
    /// The probabilities recorded in the log.
    Logged,
    /// The jointly trained behavior head.
    Estimated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    /// Trajectories per minibatch; 0 uses the whole dataset every step.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub correction: CorrectionConfig,
    pub behavior_source: BehaviorSource,
    pub behavior_learning_rate: f64,
    pub seed: u64,
}

impl TrainConfig {
    /// Whether training needs a behavior head at all.
    pub fn uses_behavior_head(&self) -> bool {
        self.behavior_source == BehaviorSource::Estimated || self.correction.kl_coefficient > 0.0
    }

    pub fn validate(&self) -> Result<()> {
        self.correction.validate()?;
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.uses_behavior_head() && !(self.behavior_learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "behavior learning rate must be positive, got {}",
                self.behavior_learning_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    #[serde(flatten)]
    pub diagnostics: Diagnostics,
    pub behavior_loss: Option<f64>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// The last parameters that were finite.
    pub checkpoint: Checkpoint,
    pub steps_completed: usize,
    /// Set when training stopped early on a numerical failure.
    pub failure: Option<Error>,
}

fn minibatch(data: &TrajectoryBatch, size: usize, rng: &mut RngStream) -> Result<TrajectoryBatch> {
    let n = data.trajectories.len();
    if size == 0 || size >= n {
        return Ok(data.clone());
    }
    let pool: Vec<usize> = (0..n).collect();
    let picked = rng.choose_distinct(&pool, size)?;
    let trajectories: Vec<Trajectory> = picked.iter().map(|&i| data.trajectories[i].clone()).collect();
    Ok(TrajectoryBatch::new(trajectories, data.source.clone()))
}

fn is_numerical(e: &Error) -> bool {
    matches!(e, Error::NumericalFailure { .. })
}

/// Runs `cfg.steps` ascent steps from `init`, calling `on_step` after each
/// successful update. A numerical failure stops training and is reported
/// in the outcome alongside the last good checkpoint; every other error is
/// returned directly.
pub fn train(
    data: &TrajectoryBatch,
    init: Checkpoint,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let dims = init.dims();
    data.validate(dims.num_actions)?;
    let mut params = init.policy;
    let mut head = if cfg.uses_behavior_head() {
        Some(init.behavior.unwrap_or_else(|| BehaviorHead::zeros(dims)))
    } else {
        init.behavior
    };
    let mut opt = OptimizerState::new(cfg.optimizer);
    let root = RngStream::named(cfg.seed, "minibatch");

    let mut failure = None;
    let mut completed = 0;
    for step in 0..cfg.steps {
        let batch = minibatch(data, cfg.batch_size, &mut root.split(step as u64))?;
        let result = (|| -> Result<StepRecord> {
            let mut behavior_loss = None;
            let mut next_head = head.clone();
            if cfg.uses_behavior_head() {
                let h = next_head.as_mut().expect("head present");
                behavior_loss = Some(behavior::train_behavior(&batch, &params, h, cfg.behavior_learning_rate)?);
            }
            let weighted = match (cfg.behavior_source, next_head.as_ref()) {
                (BehaviorSource::Estimated, Some(h)) => behavior::with_estimated_propensities(&batch, &params, h)?,
                _ => batch.clone(),
            };
            let (mut grads, diagnostics) = grad::policy_gradient(&weighted, &params, &cfg.correction)?;
            if cfg.correction.kl_coefficient > 0.0 {
                let h = next_head.as_ref().expect("head present");
                let beta = behavior::behavior_probs_for_batch(&batch, &params, h)?;
                let kl = grad::kl_penalty_gradient(
                    &batch,
                    &params,
                    &beta,
                    cfg.correction.kl_coefficient,
                    cfg.correction.temperature,
                )?;
                grads.merge(&kl)?;
            }
            grad::optimizer_step(&mut params, &grads, &mut opt, cfg.learning_rate)?;
            head = next_head;
            Ok(StepRecord {
                step,
                diagnostics,
                behavior_loss,
            })
        })();
        match result {
            Ok(record) => {
                completed += 1;
                on_step(&record)?;
            }
            Err(e) if is_numerical(&e) => {
                failure = Some(e);
                break;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint::new(params, head),
        steps_completed: completed,
        failure,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::{CorrectionMode, LoggedEvent};
    use crate::policy::{ModelDims, PolicyParameters};

    fn toy_batch() -> TrajectoryBatch {
        let trajectories = (0..8)
            .map(|i| Trajectory {
                id: i,
                events: (0..4)
                    .map(|t| {
                        let action = ((i as usize) + t) % 3;
                        LoggedEvent {
                            step: t,
                            action,
                            reward: if action == 2 { 1.0 } else { 0.0 },
                            behavior_prob: 1.0 / 3.0,
                        }
                    })
                    .collect(),
            })
            .collect();
        TrajectoryBatch::new(trajectories, "uniform")
    }

    fn config(steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: 4,
            learning_rate: 0.1,
            optimizer: OptimizerKind::Sgd,
            correction: CorrectionConfig {
                mode: CorrectionMode::Standard,
                discount: 0.0,
                ..CorrectionConfig::default()
            },
            behavior_source: BehaviorSource::Logged,
            behavior_learning_rate: 0.5,
            seed: 3,
        }
    }

    fn init() -> Checkpoint {
        let dims = ModelDims::new(3, 2, 3).unwrap();
        Checkpoint::new(PolicyParameters::init(dims, &mut RngStream::new(1, 0)), None)
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let out = train(&toy_batch(), init(), &config(0), |_| Ok(())).unwrap();
        assert_eq!(out.checkpoint, init());
        assert_eq!(out.steps_completed, 0);
    }

    #[test]
    fn training_moves_mass_to_rewarded_action() {
        let mut cfg = config(200);
        cfg.optimizer = OptimizerKind::adam();
        cfg.learning_rate = 0.05;
        let mut records = Vec::new();
        let out = train(&toy_batch(), init(), &cfg, |r| {
            records.push(r.clone());
            Ok(())
        })
        .unwrap();
        assert_eq!(records.len(), 200);
        let s = crate::policy::unroll(&[0], &out.checkpoint.policy).unwrap();
        let p = crate::policy::policy_probs(&s[0], &out.checkpoint.policy, 1.0).unwrap();
        assert!(p[2] > 0.6, "{p:?}");
    }

    #[test]
    fn training_is_deterministic() {
        let a = train(&toy_batch(), init(), &config(20), |_| Ok(())).unwrap();
        let b = train(&toy_batch(), init(), &config(20), |_| Ok(())).unwrap();
        assert_eq!(a.checkpoint, b.checkpoint);
    }

    #[test]
    fn estimated_source_trains_head() {
        let mut cfg = config(10);
        cfg.behavior_source = BehaviorSource::Estimated;
        let mut losses = Vec::new();
        let out = train(&toy_batch(), init(), &cfg, |r| {
            losses.push(r.behavior_loss.unwrap());
            Ok(())
        })
        .unwrap();
        assert!(out.checkpoint.behavior.is_some());
        assert!((losses[0] - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn numerical_failure_keeps_last_good_parameters() {
        let mut cfg = config(50);
        cfg.learning_rate = 1e300;
        let out = train(&toy_batch(), init(), &cfg, |_| Ok(())).unwrap();
        assert!(out.failure.is_some());
        assert!(out.checkpoint.policy.first_non_finite().is_none());
    }
}
