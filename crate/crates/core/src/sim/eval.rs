//! Policy evaluation: simulated rollouts and exact set expectations.

use rayon::prelude::*;
use serde::Serialize;

use super::{EnvState, Environment, EnvironmentSpec};
use crate::error::{Error, Result};
use crate::grad::TrajectoryBatch;
use crate::numerics::RngStream;
use crate::policy::{self, PolicyConfig, PolicyParameters, ServeMode, UserState};

/// Largest candidate pool for which set probabilities are enumerated.
pub const MAX_ENUMERATED_CANDIDATES: usize = 16;

/// Action histories whose recurrent states serve as probe points.
///
/// Each model computes its own states from the same histories, so two
/// models are always compared on the same users.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ProbeSet {
    pub sequences: Vec<Vec<usize>>,
}

impl ProbeSet {
    pub fn from_batch(batch: &TrajectoryBatch) -> Self {
        ProbeSet {
            sequences: batch.trajectories.iter().map(|t| t.actions()).collect(),
        }
    }

    /// States `s_1, …, s_T` of every sequence. The initial state is left
    /// out: every model is uniform there.
    pub fn states(&self, params: &PolicyParameters) -> Result<Vec<UserState>> {
        let per_seq = self
            .sequences
            .par_iter()
            .map(|seq| policy::unroll(seq, params))
            .collect::<Result<Vec<_>>>()?;
        Ok(per_seq.into_iter().flatten().collect())
    }
}

/// Probability of every set produced by `k` draws with replacement from
/// `probs`, as `(bitmask over candidates, probability)` pairs.
///
/// `P(S) = Σ_{T ⊆ S} (-1)^{|S|-|T|} (Σ_{a∈T} p_a)^k`, evaluated with a
/// subset Möbius transform.
pub fn enumerate_set_distribution(probs: &[f64], k: usize) -> Result<Vec<(u32, f64)>> {
    let m = probs.len();
    if m == 0 || m > MAX_ENUMERATED_CANDIDATES {
        return Err(Error::invalid(format!(
            "set enumeration supports 1..={MAX_ENUMERATED_CANDIDATES} candidates, got {m}"
        )));
    }
    let size = 1usize << m;
    let mut f = vec![0.0f64; size];
    for (mask, slot) in f.iter_mut().enumerate() {
        let mass: f64 = (0..m).filter(|i| mask >> i & 1 == 1).map(|i| probs[i]).sum();
        *slot = mass.powi(k as i32);
    }
    for i in 0..m {
        for mask in 0..size {
            if mask >> i & 1 == 1 {
                f[mask] -= f[mask ^ (1 << i)];
            }
        }
    }
    Ok(f.into_iter()
        .enumerate()
        .skip(1)
        .filter(|&(mask, p)| p > 0.0 && (mask as u32).count_ones() as usize <= k)
        .map(|(mask, p)| (mask as u32, p))
        .collect())
}

/// Exact expected per-impression reward of serving from `state`, given
/// the per-action rewards `rho` at the user's current hidden state.
pub fn expected_set_reward(
    env: &Environment,
    rho: &[f64],
    state: &UserState,
    params: &PolicyParameters,
    cfg: &PolicyConfig,
    k: usize,
) -> Result<f64> {
    let candidates = policy::topk_retrieve(state, params, cfg.retrieval_width)?;
    let choice = env.choice();
    match cfg.serve_mode {
        ServeMode::Deterministic => {
            let served: Vec<f64> = candidates.iter().take(k).map(|&a| rho[a]).collect();
            Ok(choice.expected_reward(&served))
        }
        ServeMode::Stochastic => {
            let probs = policy::restricted_softmax(state, params, &candidates, cfg.temperature)?;
            let mut total = 0.0;
            for (mask, p) in enumerate_set_distribution(&probs, k)? {
                let served: Vec<f64> = (0..candidates.len())
                    .filter(|i| mask >> i & 1 == 1)
                    .map(|i| rho[candidates[i]])
                    .collect();
                total += p * choice.expected_reward(&served);
            }
            Ok(total)
        }
    }
}

fn enumerable(cfg: &PolicyConfig) -> bool {
    cfg.serve_mode == ServeMode::Deterministic || cfg.retrieval_width <= MAX_ENUMERATED_CANDIDATES
}

/// Exact set objective averaged over probe states. Only defined for the
/// stateless environment, where rewards do not depend on hidden state.
pub fn set_objective(
    env: &Environment,
    params: &PolicyParameters,
    cfg: &PolicyConfig,
    k: usize,
    probes: &ProbeSet,
) -> Result<f64> {
    if !matches!(env.spec(), EnvironmentSpec::Stateless { .. }) {
        return Err(Error::invalid("set_objective needs the stateless environment"));
    }
    cfg.validate(params.num_actions())?;
    let rho = env.rewards(&EnvState::Stateless);
    let states = probes.states(params)?;
    if states.is_empty() {
        return Err(Error::invalid("probe set has no states"));
    }
    let values = states
        .par_iter()
        .map(|s| expected_set_reward(env, &rho, s, params, cfg, k))
        .collect::<Result<Vec<_>>>()?;
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Mean `π(·|s)` over the probe states.
pub fn mean_policy_probs(params: &PolicyParameters, probes: &ProbeSet, temperature: f64) -> Result<Vec<f64>> {
    let states = probes.states(params)?;
    if states.is_empty() {
        return Err(Error::invalid("probe set has no states"));
    }
    let mut mean = vec![0.0; params.num_actions()];
    for s in &states {
        for (m, p) in mean.iter_mut().zip(policy::policy_probs(s, params, temperature)?) {
            *m += p;
        }
    }
    let n = states.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(mean)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalMetrics {
    /// Monte-Carlo mean reward per impression.
    pub mean_reward: f64,
    /// Standard error of `mean_reward`, from per-rollout means.
    pub stderr: f64,
    /// Mean of the exact per-impression expectations along the same
    /// rollouts, when the serving distribution is enumerable.
    pub exact_mean: Option<f64>,
    pub exact_stderr: Option<f64>,
    pub click_rate: f64,
    pub mean_set_size: f64,
    pub impressions: usize,
    pub rollouts: usize,
}

struct RolloutTotals {
    reward: f64,
    exact: f64,
    clicks: usize,
    served: usize,
    impressions: usize,
}

fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Simulates `n_rollouts` episodes in which the policy serves `k` items
/// per step. The recurrent state consumes the clicked item, or the first
/// served item when the user does not click.
pub fn evaluate_policy(
    env: &Environment,
    params: &PolicyParameters,
    cfg: &PolicyConfig,
    k: usize,
    n_rollouts: usize,
    seed: u64,
) -> Result<EvalMetrics> {
    if n_rollouts == 0 {
        return Err(Error::invalid("evaluation needs at least one rollout"));
    }
    if params.num_actions() != env.num_actions() {
        return Err(Error::mismatch("evaluate_policy", env.num_actions(), params.num_actions()));
    }
    cfg.validate(params.num_actions())?;
    if k == 0 {
        return Err(Error::invalid("evaluation needs k >= 1"));
    }
    let exact = enumerable(cfg);
    let root = RngStream::named(seed, "evaluation");
    let length = env.episode_length();
    let totals = (0..n_rollouts)
        .into_par_iter()
        .map(|i| {
            let mut rng = root.split(i as u64);
            let mut env_state = env.reset(&mut rng);
            let mut state = UserState::initial(params.dims().state_dim);
            let mut t = RolloutTotals {
                reward: 0.0,
                exact: 0.0,
                clicks: 0,
                served: 0,
                impressions: 0,
            };
            for _ in 0..length {
                if exact {
                    let rho = env.rewards(&env_state);
                    t.exact += expected_set_reward(env, &rho, &state, params, cfg, k)?;
                }
                let served = policy::serve(&state, params, cfg, k, &mut rng)?;
                let (clicked, reward) = env.respond(&mut env_state, &served, &mut rng);
                t.reward += reward;
                t.clicks += usize::from(clicked.is_some());
                t.served += served.len();
                t.impressions += 1;
                state = policy::cfn_step(&state, clicked.unwrap_or(served[0]), params)?;
            }
            Ok(t)
        })
        .collect::<Result<Vec<_>>>()?;

    let per_rollout: Vec<f64> = totals.iter().map(|t| t.reward / t.impressions as f64).collect();
    let (mean_reward, stderr) = mean_and_stderr(&per_rollout);
    let (exact_mean, exact_stderr) = if exact {
        let v: Vec<f64> = totals.iter().map(|t| t.exact / t.impressions as f64).collect();
        let (m, s) = mean_and_stderr(&v);
        (Some(m), Some(s))
    } else {
        (None, None)
    };
    let impressions: usize = totals.iter().map(|t| t.impressions).sum();
    Ok(EvalMetrics {
        mean_reward,
        stderr,
        exact_mean,
        exact_stderr,
        click_rate: totals.iter().map(|t| t.clicks).sum::<usize>() as f64 / impressions as f64,
        mean_set_size: totals.iter().map(|t| t.served).sum::<usize>() as f64 / impressions as f64,
        impressions,
        rollouts: n_rollouts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::ModelDims;

    fn stateless(rewards: Vec<f64>) -> Environment {
        Environment::new(EnvironmentSpec::Stateless {
            rewards,
            sharpness: 5.0,
            no_click_utility: 3.0,
            episode_length: 5,
        })
        .unwrap()
    }

    #[test]
    fn set_distribution_matches_brute_force() {
        let probs = [0.5, 0.3, 0.2];
        let k = 3;
        let mut brute = std::collections::BTreeMap::new();
        for a in 0..3 {
            for b in 0..3 {
                for c in 0..3 {
                    let mask = (1u32 << a) | (1 << b) | (1 << c);
                    *brute.entry(mask).or_insert(0.0) += probs[a] * probs[b] * probs[c];
                }
            }
        }
        let got = enumerate_set_distribution(&probs, k).unwrap();
        assert_eq!(got.len(), brute.len());
        for (mask, p) in got {
            assert!((p - brute[&mask]).abs() < 1e-14, "mask {mask:b}");
        }
    }

    #[test]
    fn set_distribution_sums_to_one() {
        let probs = [0.1, 0.2, 0.3, 0.15, 0.25];
        for k in [1, 2, 4, 9] {
            let total: f64 = enumerate_set_distribution(&probs, k).unwrap().iter().map(|(_, p)| p).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
        assert!(enumerate_set_distribution(&[1.0; 17], 2).is_err());
    }

    #[test]
    fn single_item_always_served_matches_choice_probability() {
        let mut rho = vec![0.0; 10];
        rho[0] = 1.0;
        let env = stateless(rho);
        let params = PolicyParameters::zeros(ModelDims::new(2, 2, 10).unwrap());
        let cfg = PolicyConfig {
            temperature: 1.0,
            retrieval_width: 10,
            serve_mode: ServeMode::Deterministic,
        };
        let m = evaluate_policy(&env, &params, &cfg, 1, 20_000, 3).unwrap();
        let p0 = 5f64.exp() / (5f64.exp() + 3f64.exp());
        assert!((m.exact_mean.unwrap() - p0).abs() < 1e-12);
        assert!((m.mean_reward - p0).abs() < 4.0 * m.stderr);
        assert_eq!(m.mean_set_size, 1.0);
    }

    #[test]
    fn monte_carlo_agrees_with_enumeration() {
        let env = Environment::new(EnvironmentSpec::canonical_sequential()).unwrap();
        let dims = ModelDims::new(4, 3, 20).unwrap();
        let params = PolicyParameters::random(dims, 1.0, &mut RngStream::new(8, 0));
        let cfg = PolicyConfig {
            temperature: 1.0,
            retrieval_width: 6,
            serve_mode: ServeMode::Stochastic,
        };
        let m = evaluate_policy(&env, &params, &cfg, 3, 4000, 1).unwrap();
        let exact = m.exact_mean.unwrap();
        assert!((m.mean_reward - exact).abs() < 3.0 * m.stderr, "{m:?}");
        assert!(m.mean_set_size > 1.0 && m.mean_set_size <= 3.0);
    }

    #[test]
    fn evaluation_is_reproducible() {
        let env = stateless((1..=6).map(|i| i as f64 / 6.0).collect());
        let dims = ModelDims::new(3, 2, 6).unwrap();
        let params = PolicyParameters::random(dims, 1.0, &mut RngStream::new(1, 0));
        let cfg = PolicyConfig {
            temperature: 0.7,
            retrieval_width: 4,
            serve_mode: ServeMode::Stochastic,
        };
        let a = evaluate_policy(&env, &params, &cfg, 2, 50, 11).unwrap();
        let b = evaluate_policy(&env, &params, &cfg, 2, 50, 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn probe_states_skip_initial_state() {
        let dims = ModelDims::new(2, 2, 4).unwrap();
        let params = PolicyParameters::random(dims, 1.0, &mut RngStream::new(2, 0));
        let probes = ProbeSet {
            sequences: vec![vec![0, 1, 2], vec![3]],
        };
        let states = probes.states(&params).unwrap();
        assert_eq!(states.len(), 4);
        assert!(states.iter().all(|s| s.step >= 1));
        let mean = mean_policy_probs(&params, &probes, 1.0).unwrap();
        assert!((mean.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn set_objective_of_fixed_preference() {
        let env = stateless(vec![0.2, 0.9, 0.5]);
        let params = PolicyParameters::fixed_preference(&[0.0, 50.0, 0.0]).unwrap();
        let cfg = PolicyConfig {
            temperature: 1.0,
            retrieval_width: 3,
            serve_mode: ServeMode::Stochastic,
        };
        let probes = ProbeSet {
            sequences: vec![vec![0, 0]],
        };
        let v = set_objective(&env, &params, &cfg, 2, &probes).unwrap();
        let expected = env.choice().expected_reward(&[0.9]);
        assert!((v - expected).abs() < 1e-9);
    }
}
