//! Synthetic environments and logged-data synthesis.
//!
//! Two environment families are provided. Neither is the environment used
//! in any published experiment; they are small analogs built so that the
//! effects of off-policy and top-K correction are observable on a laptop.
//!
//! * **Stateless**: each action `a` carries a fixed interaction reward
//!   `ρ_a ∈ [0, 1]`.
//! * **Sequential**: a hidden unit interest vector `h` drifts toward the
//!   embedding of every item the user clicks; `ρ_a(h) = (1 + cos(h, e_a)) / 2`.
//!
//! Users respond to a served set through [`UserChoiceModel`]: a softmax over
//! `sharpness · ρ_a` for the served items plus a no-click option, so there
//! is at most one interaction per impression. A click on `a` pays `ρ_a`;
//! everything else pays zero.

mod eval;
mod exploration;
mod rank;

pub use eval::{
    enumerate_set_distribution, evaluate_policy, expected_set_reward, mean_policy_probs,
    set_objective, EvalMetrics, ProbeSet,
};
pub use exploration::{
    coverage, exploration_split_run, BucketSplit, ExplorationConfig, ExplorationReport,
    ExplorationSeedResult,
};
pub use rank::{nomination_counts, nomination_rank_cdf, RankCdfRow, RankCdfTable};

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grad::{LoggedEvent, Trajectory, TrajectoryBatch};
use crate::numerics::{self, RngStream};
use crate::policy::{self, PolicyParameters, UserState};

/// Minimum mass the Zipf behavior gives every action.
pub const ZIPF_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvironmentSpec {
    Stateless {
        rewards: Vec<f64>,
        sharpness: f64,
        no_click_utility: f64,
        episode_length: usize,
    },
    Sequential {
        num_actions: usize,
        interest_dim: usize,
        /// Step size of the interest drift toward a clicked item.
        drift: f64,
        sharpness: f64,
        no_click_utility: f64,
        episode_length: usize,
        /// Seeds the item embeddings.
        seed: u64,
    },
}

impl EnvironmentSpec {
    /// Ten actions with `ρ = 0.1, 0.2, …, 1.0`. The no-click option
    /// dominates the choice softmax, so items in a set barely compete and
    /// the set reward is close to the sum of single-item rewards.
    pub fn canonical_stateless() -> Self {
        EnvironmentSpec::Stateless {
            rewards: (1..=10).map(|i| i as f64 / 10.0).collect(),
            sharpness: 2.0,
            no_click_utility: 4.0,
            episode_length: 10,
        }
    }

    /// Twenty actions, four-dimensional drifting interest.
    pub fn canonical_sequential() -> Self {
        EnvironmentSpec::Sequential {
            num_actions: 20,
            interest_dim: 4,
            drift: 0.3,
            sharpness: 5.0,
            no_click_utility: 3.0,
            episode_length: 20,
            seed: 7,
        }
    }

    pub fn num_actions(&self) -> usize {
        match self {
            EnvironmentSpec::Stateless { rewards, .. } => rewards.len(),
            EnvironmentSpec::Sequential { num_actions, .. } => *num_actions,
        }
    }

    pub fn episode_length(&self) -> usize {
        match self {
            EnvironmentSpec::Stateless { episode_length, .. }
            | EnvironmentSpec::Sequential { episode_length, .. } => *episode_length,
        }
    }

    pub fn choice_model(&self) -> UserChoiceModel {
        match self {
            EnvironmentSpec::Stateless {
                sharpness,
                no_click_utility,
                ..
            }
            | EnvironmentSpec::Sequential {
                sharpness,
                no_click_utility,
                ..
            } => UserChoiceModel {
                sharpness: *sharpness,
                no_click_utility: *no_click_utility,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_actions() < 2 {
            return Err(Error::Config("environment needs at least two actions".into()));
        }
        if self.episode_length() == 0 {
            return Err(Error::Config("episode length must be positive".into()));
        }
        let choice = self.choice_model();
        if !choice.sharpness.is_finite() || !choice.no_click_utility.is_finite() {
            return Err(Error::Config("choice-model parameters must be finite".into()));
        }
        match self {
            EnvironmentSpec::Stateless { rewards, .. } => {
                if let Some(r) = rewards.iter().find(|r| !(0.0..=1.0).contains(*r)) {
                    return Err(Error::Config(format!("reward {r} outside [0, 1]")));
                }
            }
            EnvironmentSpec::Sequential {
                interest_dim, drift, ..
            } => {
                if *interest_dim == 0 {
                    return Err(Error::Config("interest dimension must be positive".into()));
                }
                if !(0.0..=1.0).contains(drift) {
                    return Err(Error::Config(format!("drift {drift} outside [0, 1]")));
                }
            }
        }
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the spec's canonical JSON.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("environment spec serialises");
        Sha256::digest(&json)
            .iter()
            .take(8)
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// Softmax choice over served items plus a no-click option.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UserChoiceModel {
    pub sharpness: f64,
    pub no_click_utility: f64,
}

impl UserChoiceModel {
    /// Interaction probabilities for the served items, with the no-click
    /// probability appended last.
    pub fn probs(&self, served_rewards: &[f64]) -> Vec<f64> {
        let mut utilities: Vec<f64> = served_rewards.iter().map(|r| self.sharpness * r).collect();
        utilities.push(self.no_click_utility);
        numerics::softmax(&utilities, 1.0).expect("finite utilities")
    }

    /// Expected reward of one impression of `served_rewards`.
    pub fn expected_reward(&self, served_rewards: &[f64]) -> f64 {
        let p = self.probs(served_rewards);
        served_rewards.iter().zip(&p).map(|(r, q)| r * q).sum()
    }

    /// Index of the clicked item, or `None` for no click.
    pub fn sample(&self, served_rewards: &[f64], rng: &mut RngStream) -> Option<usize> {
        let p = self.probs(served_rewards);
        let pick = numerics::sample_categorical(&p, rng).expect("valid choice distribution");
        (pick < served_rewards.len()).then_some(pick)
    }
}

/// Runtime form of an [`EnvironmentSpec`].
#[derive(Debug, Clone)]
pub struct Environment {
    spec: EnvironmentSpec,
    choice: UserChoiceModel,
    item_embeddings: Vec<Vec<f64>>,
}

/// Per-episode hidden user state.
#[derive(Debug, Clone, PartialEq)]
pub enum EnvState {
    Stateless,
    Sequential { interest: Vec<f64> },
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

fn random_unit(dim: usize, rng: &mut RngStream) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
    normalize(&mut v);
    v
}

impl Environment {
    pub fn new(spec: EnvironmentSpec) -> Result<Self> {
        spec.validate()?;
        let item_embeddings = match &spec {
            EnvironmentSpec::Stateless { .. } => Vec::new(),
            EnvironmentSpec::Sequential {
                num_actions,
                interest_dim,
                seed,
                ..
            } => {
                let mut rng = RngStream::named(*seed, "item-embeddings");
                (0..*num_actions)
                    .map(|_| random_unit(*interest_dim, &mut rng))
                    .collect()
            }
        };
        let choice = spec.choice_model();
        Ok(Environment {
            spec,
            choice,
            item_embeddings,
        })
    }

    pub fn spec(&self) -> &EnvironmentSpec {
        &self.spec
    }

    pub fn num_actions(&self) -> usize {
        self.spec.num_actions()
    }

    pub fn episode_length(&self) -> usize {
        self.spec.episode_length()
    }

    pub fn choice(&self) -> &UserChoiceModel {
        &self.choice
    }

    pub fn reset(&self, rng: &mut RngStream) -> EnvState {
        match &self.spec {
            EnvironmentSpec::Stateless { .. } => EnvState::Stateless,
            EnvironmentSpec::Sequential { interest_dim, .. } => EnvState::Sequential {
                interest: random_unit(*interest_dim, rng),
            },
        }
    }

    /// `ρ_a` for every action at the given hidden state.
    pub fn rewards(&self, state: &EnvState) -> Vec<f64> {
        match (&self.spec, state) {
            (EnvironmentSpec::Stateless { rewards, .. }, _) => rewards.clone(),
            (EnvironmentSpec::Sequential { .. }, EnvState::Sequential { interest }) => self
                .item_embeddings
                .iter()
                .map(|e| {
                    let cos: f64 = e.iter().zip(interest).map(|(x, y)| x * y).sum();
                    ((1.0 + cos) / 2.0).clamp(0.0, 1.0)
                })
                .collect(),
            (EnvironmentSpec::Sequential { .. }, EnvState::Stateless) => {
                unreachable!("sequential environment always carries an interest vector")
            }
        }
    }

    /// Expected per-impression reward of each action served alone.
    pub fn single_item_rewards(&self, state: &EnvState) -> Vec<f64> {
        self.rewards(state)
            .iter()
            .map(|&r| self.choice.expected_reward(&[r]))
            .collect()
    }

    /// Shows `served` to the user; returns the clicked action and reward.
    pub fn respond(&self, state: &mut EnvState, served: &[usize], rng: &mut RngStream) -> (Option<usize>, f64) {
        let all = self.rewards(state);
        let served_rewards: Vec<f64> = served.iter().map(|&a| all[a]).collect();
        match self.choice.sample(&served_rewards, rng) {
            None => (None, 0.0),
            Some(idx) => {
                let a = served[idx];
                if let (EnvironmentSpec::Sequential { drift, .. }, EnvState::Sequential { interest }) =
                    (&self.spec, &mut *state)
                {
                    for (h, e) in interest.iter_mut().zip(&self.item_embeddings[a]) {
                        *h = (1.0 - drift) * *h + drift * e;
                    }
                    normalize(interest);
                }
                (Some(a), served_rewards[idx])
            }
        }
    }
}

/// The historical policy that logged the data.
#[derive(Debug, Clone)]
pub enum BehaviorPolicy {
    Uniform,
    /// Popularity-skewed: action `a` has mass ∝ `(a + 1)^-exponent`, mixed
    /// with a floor of [`ZIPF_FLOOR`] per action.
    Zipf { exponent: f64 },
    /// Softmax of a checkpointed policy, tracking its own recurrent state.
    StaleModel {
        params: Arc<PolicyParameters>,
        temperature: f64,
    },
    /// Top-1 action of a checkpointed policy (deterministic serving).
    Greedy { params: Arc<PolicyParameters> },
    /// A fixed, state-independent distribution.
    Fixed(Vec<f64>),
    /// Always the same action. Only useful where importance weights are not
    /// needed, since every other action has zero mass.
    Deterministic(usize),
    /// Weighted combination of historical policies.
    Mixture(Vec<(f64, BehaviorPolicy)>),
}

/// Tracks whatever history a behavior policy conditions on.
pub struct BehaviorCursor<'a> {
    policy: &'a BehaviorPolicy,
    state: Option<UserState>,
    children: Vec<BehaviorCursor<'a>>,
}

impl BehaviorPolicy {
    pub fn zipf_probs(num_actions: usize, exponent: f64) -> Vec<f64> {
        let raw: Vec<f64> = (0..num_actions).map(|a| ((a + 1) as f64).powf(-exponent)).collect();
        let total: f64 = raw.iter().sum();
        let spread = 1.0 - num_actions as f64 * ZIPF_FLOOR;
        raw.iter().map(|r| spread * r / total + ZIPF_FLOOR).collect()
    }

    pub fn describe(&self) -> String {
        match self {
            BehaviorPolicy::Uniform => "uniform".into(),
            BehaviorPolicy::Zipf { exponent } => format!("zipf({exponent})"),
            BehaviorPolicy::StaleModel { temperature, .. } => format!("stale_model(T={temperature})"),
            BehaviorPolicy::Greedy { .. } => "greedy".into(),
            BehaviorPolicy::Fixed(_) => "fixed".into(),
            BehaviorPolicy::Deterministic(a) => format!("deterministic({a})"),
            BehaviorPolicy::Mixture(parts) => format!(
                "mixture[{}]",
                parts
                    .iter()
                    .map(|(w, p)| format!("{w}*{}", p.describe()))
                    .collect::<Vec<_>>()
                    .join(",")
            ),
        }
    }

    /// Whether every action is guaranteed non-zero mass.
    pub fn is_strictly_positive(&self) -> bool {
        match self {
            BehaviorPolicy::Greedy { .. } | BehaviorPolicy::Deterministic(_) => false,
            BehaviorPolicy::Fixed(p) => p.iter().all(|&x| x > 0.0),
            BehaviorPolicy::Mixture(parts) => parts.iter().any(|(w, p)| *w > 0.0 && p.is_strictly_positive()),
            _ => true,
        }
    }

    pub fn validate(&self, num_actions: usize) -> Result<()> {
        match self {
            BehaviorPolicy::Uniform => Ok(()),
            BehaviorPolicy::Zipf { exponent } => {
                if !exponent.is_finite() || *exponent < 0.0 {
                    return Err(Error::invalid(format!("zipf exponent {exponent} must be >= 0")));
                }
                if num_actions as f64 * ZIPF_FLOOR >= 1.0 {
                    return Err(Error::invalid("too many actions for the zipf floor"));
                }
                Ok(())
            }
            BehaviorPolicy::StaleModel { params, temperature } => {
                if params.num_actions() != num_actions {
                    return Err(Error::invalid(format!(
                        "stale model has {} actions, environment has {num_actions}",
                        params.num_actions()
                    )));
                }
                if !(*temperature > 0.0) {
                    return Err(Error::invalid("stale model temperature must be positive"));
                }
                Ok(())
            }
            BehaviorPolicy::Greedy { params } => {
                if params.num_actions() != num_actions {
                    return Err(Error::invalid("greedy model action count mismatch"));
                }
                Ok(())
            }
            BehaviorPolicy::Fixed(p) => {
                if p.len() != num_actions {
                    return Err(Error::invalid(format!(
                        "fixed behavior has {} entries, expected {num_actions}",
                        p.len()
                    )));
                }
                if let Some(a) = p.iter().position(|&x| !(x > 0.0)) {
                    return Err(Error::invalid(format!(
                        "fixed behavior gives action {a} zero mass; importance weights need β > 0"
                    )));
                }
                if (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    return Err(Error::invalid("fixed behavior does not sum to 1"));
                }
                Ok(())
            }
            BehaviorPolicy::Deterministic(a) => {
                if *a >= num_actions {
                    return Err(Error::invalid(format!("deterministic action {a} out of range")));
                }
                Ok(())
            }
            BehaviorPolicy::Mixture(parts) => {
                if parts.is_empty() {
                    return Err(Error::invalid("mixture needs at least one component"));
                }
                if parts.iter().any(|(w, _)| !(*w > 0.0)) {
                    return Err(Error::invalid("mixture weights must be positive"));
                }
                let total: f64 = parts.iter().map(|(w, _)| w).sum();
                if (total - 1.0).abs() > 1e-9 {
                    return Err(Error::invalid(format!("mixture weights sum to {total}, expected 1")));
                }
                for (_, p) in parts {
                    p.validate(num_actions)?;
                }
                if !self.is_strictly_positive() {
                    return Err(Error::invalid(
                        "mixture has no strictly positive component; some actions get zero mass",
                    ));
                }
                Ok(())
            }
        }
    }

    pub fn cursor(&self) -> BehaviorCursor<'_> {
        let state = match self {
            BehaviorPolicy::StaleModel { params, .. } | BehaviorPolicy::Greedy { params } => {
                Some(UserState::initial(params.dims().state_dim))
            }
            _ => None,
        };
        let children = match self {
            BehaviorPolicy::Mixture(parts) => parts.iter().map(|(_, p)| p.cursor()).collect(),
            _ => Vec::new(),
        };
        BehaviorCursor {
            policy: self,
            state,
            children,
        }
    }
}

impl BehaviorCursor<'_> {
    /// `β(· | history so far)`.
    pub fn probs(&self, num_actions: usize) -> Result<Vec<f64>> {
        match self.policy {
            BehaviorPolicy::Uniform => Ok(vec![1.0 / num_actions as f64; num_actions]),
            BehaviorPolicy::Zipf { exponent } => Ok(BehaviorPolicy::zipf_probs(num_actions, *exponent)),
            BehaviorPolicy::StaleModel { params, temperature } => {
                policy::policy_probs(self.state.as_ref().expect("stale state"), params, *temperature)
            }
            BehaviorPolicy::Greedy { params } => {
                let top = policy::topk_retrieve(self.state.as_ref().expect("greedy state"), params, 1)?;
                let mut p = vec![0.0; num_actions];
                p[top[0]] = 1.0;
                Ok(p)
            }
            BehaviorPolicy::Fixed(p) => Ok(p.clone()),
            BehaviorPolicy::Deterministic(a) => {
                let mut p = vec![0.0; num_actions];
                p[*a] = 1.0;
                Ok(p)
            }
            BehaviorPolicy::Mixture(parts) => {
                let mut out = vec![0.0; num_actions];
                for ((w, _), child) in parts.iter().zip(&self.children) {
                    for (o, q) in out.iter_mut().zip(child.probs(num_actions)?) {
                        *o += w * q;
                    }
                }
                Ok(out)
            }
        }
    }

    /// Records that `action` was logged.
    pub fn advance(&mut self, action: usize) -> Result<()> {
        if let (
            BehaviorPolicy::StaleModel { params, .. } | BehaviorPolicy::Greedy { params },
            Some(state),
        ) = (self.policy, self.state.as_mut())
        {
            *state = policy::cfn_step(state, action, params)?;
        }
        for child in &mut self.children {
            child.advance(action)?;
        }
        Ok(())
    }
}

/// One logged episode of `length` single-item impressions.
pub fn rollout_logged(
    env: &Environment,
    behavior: &BehaviorPolicy,
    length: usize,
    id: u64,
    rng: &mut RngStream,
) -> Result<Trajectory> {
    let num_actions = env.num_actions();
    let strict = behavior.is_strictly_positive();
    let mut env_state = env.reset(rng);
    let mut cursor = behavior.cursor();
    let mut events = Vec::with_capacity(length);
    for step in 0..length {
        let beta = cursor.probs(num_actions)?;
        if strict {
            if let Some(a) = beta.iter().position(|&p| !(p > 0.0)) {
                return Err(Error::invalid(format!(
                    "behavior policy gives action {a} zero mass at step {step}"
                )));
            }
        }
        let action = numerics::sample_categorical(&beta, rng)?;
        let (_, reward) = env.respond(&mut env_state, &[action], rng);
        events.push(LoggedEvent {
            step,
            action,
            reward,
            behavior_prob: beta[action],
        });
        cursor.advance(action)?;
    }
    Ok(Trajectory { id, events })
}

/// `n_events` logged impressions in episodes of the environment's length
/// (the last episode may be shorter). Identical seeds give identical
/// batches regardless of thread count.
pub fn generate_logged_data(
    env: &Environment,
    behavior: &BehaviorPolicy,
    n_events: usize,
    seed: u64,
) -> Result<TrajectoryBatch> {
    if n_events == 0 {
        return Err(Error::invalid("n_events must be at least 1"));
    }
    behavior.validate(env.num_actions())?;
    let length = env.episode_length();
    let n_traj = n_events.div_ceil(length);
    let root = RngStream::named(seed, "logged-data");
    let trajectories = (0..n_traj)
        .into_par_iter()
        .map(|i| {
            let len = if i + 1 == n_traj { n_events - i * length } else { length };
            let mut rng = root.split(i as u64);
            rollout_logged(env, behavior, len, i as u64, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrajectoryBatch::new(trajectories, behavior.describe()))
}

/// Exact `Σ_a β(a) · (π(a)/β(a)) · r(a)`, the expectation of the
/// importance-weighted reward under the logging distribution.
pub fn importance_weighted_value(pi: &[f64], beta: &[f64], rewards: &[f64]) -> Result<f64> {
    if pi.len() != beta.len() || pi.len() != rewards.len() {
        return Err(Error::mismatch("importance_weighted_value", pi.len(), beta.len()));
    }
    pi.iter()
        .zip(beta)
        .zip(rewards)
        .map(|((&p, &b), &r)| Ok(b * crate::grad::importance_weight(p, b)? * r))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::ModelDims;

    #[test]
    fn choice_model_single_good_item() {
        let choice = UserChoiceModel {
            sharpness: 5.0,
            no_click_utility: 3.0,
        };
        let p = choice.probs(&[1.0]);
        let expected = 5f64.exp() / (5f64.exp() + 3f64.exp());
        assert!((p[0] - expected).abs() < 1e-15);
        assert!((choice.expected_reward(&[1.0]) - expected).abs() < 1e-15);
        assert_eq!(p.len(), 2);
    }

    #[test]
    fn at_most_one_interaction_per_impression() {
        let env = Environment::new(EnvironmentSpec::canonical_sequential()).unwrap();
        let mut rng = RngStream::new(1, 0);
        let mut state = env.reset(&mut rng);
        for _ in 0..2000 {
            let served = [0, 3, 7, 11];
            let (clicked, reward) = env.respond(&mut state, &served, &mut rng);
            match clicked {
                None => assert_eq!(reward, 0.0),
                Some(a) => assert!(served.contains(&a) && reward > 0.0),
            }
        }
    }

    #[test]
    fn sequential_interest_drifts_toward_clicks() {
        let env = Environment::new(EnvironmentSpec::canonical_sequential()).unwrap();
        let mut rng = RngStream::new(2, 0);
        let mut state = env.reset(&mut rng);
        let before = env.rewards(&state)[5];
        let mut clicks = 0;
        while clicks < 10 {
            if env.respond(&mut state, &[5], &mut rng).0.is_some() {
                clicks += 1;
            }
        }
        assert!(env.rewards(&state)[5] > before);
        assert!(env.rewards(&state)[5] > 0.95);
    }

    #[test]
    fn uniform_logging_frequencies() {
        let spec = EnvironmentSpec::Stateless {
            rewards: vec![0.5; 10],
            sharpness: 1.0,
            no_click_utility: 0.0,
            episode_length: 50,
        };
        let env = Environment::new(spec).unwrap();
        let n = 100_000;
        let batch = generate_logged_data(&env, &BehaviorPolicy::Uniform, n, 5).unwrap();
        assert_eq!(batch.num_events(), n);
        let mut counts = [0usize; 10];
        for e in batch.events() {
            counts[e.action] += 1;
            assert_eq!(e.behavior_prob, 0.1);
        }
        let sigma = (0.1f64 * 0.9 / n as f64).sqrt();
        for c in counts {
            assert!((c as f64 / n as f64 - 0.1).abs() < 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn deterministic_logging_and_replay() {
        let env = Environment::new(EnvironmentSpec::canonical_stateless()).unwrap();
        let batch = generate_logged_data(&env, &BehaviorPolicy::Deterministic(4), 95, 1).unwrap();
        assert!(batch.events().all(|e| e.action == 4 && e.behavior_prob == 1.0));
        assert_eq!(batch.trajectories.len(), 10);
        assert_eq!(batch.trajectories[9].events.len(), 5);
        let a = generate_logged_data(&env, &BehaviorPolicy::Zipf { exponent: 1.2 }, 500, 9).unwrap();
        let b = generate_logged_data(&env, &BehaviorPolicy::Zipf { exponent: 1.2 }, 500, 9).unwrap();
        assert_eq!(a, b);
        assert!(generate_logged_data(&env, &BehaviorPolicy::Uniform, 0, 1).is_err());
    }

    #[test]
    fn zero_mass_behavior_is_rejected() {
        let env = Environment::new(EnvironmentSpec::canonical_stateless()).unwrap();
        let mut p = vec![0.1; 10];
        p[0] = 0.0;
        p[1] = 0.2;
        let err = generate_logged_data(&env, &BehaviorPolicy::Fixed(p), 10, 1).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
        let mixture = BehaviorPolicy::Mixture(vec![(0.5, BehaviorPolicy::Uniform), (0.4, BehaviorPolicy::Uniform)]);
        assert!(generate_logged_data(&env, &mixture, 10, 1).is_err());
    }

    #[test]
    fn recorded_beta_matches_generator() {
        let env = Environment::new(EnvironmentSpec::canonical_sequential()).unwrap();
        let dims = ModelDims::new(4, 3, 20).unwrap();
        let stale = Arc::new(PolicyParameters::random(dims, 1.0, &mut RngStream::new(3, 0)));
        let behavior = BehaviorPolicy::Mixture(vec![
            (
                0.6,
                BehaviorPolicy::StaleModel {
                    params: stale.clone(),
                    temperature: 0.8,
                },
            ),
            (0.4, BehaviorPolicy::Zipf { exponent: 1.0 }),
        ]);
        let batch = generate_logged_data(&env, &behavior, 400, 4).unwrap();
        let zipf = BehaviorPolicy::zipf_probs(20, 1.0);
        for traj in &batch.trajectories {
            let mut state = UserState::initial(4);
            for e in &traj.events {
                let pi = policy::policy_probs(&state, &stale, 0.8).unwrap();
                let expected = 0.6 * pi[e.action] + 0.4 * zipf[e.action];
                assert!((e.behavior_prob - expected).abs() < 1e-12);
                state = policy::cfn_step(&state, e.action, &stale).unwrap();
            }
        }
    }

    #[test]
    fn zipf_is_floored_and_normalized() {
        let p = BehaviorPolicy::zipf_probs(20, 3.0);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|&x| x >= ZIPF_FLOOR));
        assert!(p.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn fingerprint_tracks_spec() {
        let a = EnvironmentSpec::canonical_stateless();
        let mut b = a.clone();
        if let EnvironmentSpec::Stateless { sharpness, .. } = &mut b {
            *sharpness = 4.0;
        }
        assert_eq!(a.fingerprint(), EnvironmentSpec::canonical_stateless().fingerprint());
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint().len(), 16);
    }

    #[test]
    fn spec_validation() {
        let bad = EnvironmentSpec::Stateless {
            rewards: vec![0.5, 1.5],
            sharpness: 1.0,
            no_click_utility: 0.0,
            episode_length: 3,
        };
        assert!(matches!(Environment::new(bad), Err(Error::Config(_))));
        let one = EnvironmentSpec::Stateless {
            rewards: vec![0.5],
            sharpness: 1.0,
            no_click_utility: 0.0,
            episode_length: 3,
        };
        assert!(Environment::new(one).is_err());
    }

    #[test]
    fn importance_weighted_value_identity() {
        let pi = [0.1, 0.6, 0.3];
        let beta = [0.5, 0.25, 0.25];
        let r = [0.2, 0.9, 0.4];
        let direct: f64 = pi.iter().zip(&r).map(|(p, r)| p * r).sum();
        assert!((importance_weighted_value(&pi, &beta, &r).unwrap() - direct).abs() < 1e-12);
    }
}
