//! Policy-gradient estimators for logged feedback.
//!
//! Every logged event `(a_t, r_t, β(a_t|s_t))` contributes
//! `w_t · R_t · ∇_θ log π_θ(a_t|s_t)`, where the weight depends on the
//! correction mode:
//!
//! | mode       | `w_t`                                      |
//! |------------|--------------------------------------------|
//! | `none`     | `1`                                        |
//! | `standard` | `ω̄ = cap(π/β)`, optionally self-normalised |
//! | `topk`     | `ω̄ · λ_K(π)` with `λ_K = K(1-π)^(K-1)`     |
//!
//! Weights are evaluated at the current parameters and then frozen: the
//! gradient never flows through `ω` or `λ_K`. The returned gradient is the
//! exact gradient of the frozen-weight surrogate
//! `J(θ) = Σ_t c_t log π_θ(a_t|s_t)` with `c_t = w_t R_t / n` (or
//! `w_t R_t` after self-normalisation), backpropagated through the softmax
//! head and the unrolled CFN cell.
//!
//! The state-visitation ratio `d^π/d^β` is never estimated.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{self, Mat, RngStream};
use crate::policy::{self, CfnStepCache, ModelDims, PolicyParameters, TensorId};

/// Production cap `c = e³`.
pub fn default_cap() -> f64 {
    3f64.exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoggedEvent {
    pub step: usize,
    pub action: usize,
    pub reward: f64,
    /// `β(a_t | s_t)`, recorded by the simulator or estimated.
    pub behavior_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: u64,
    pub events: Vec<LoggedEvent>,
}

impl Trajectory {
    pub fn actions(&self) -> Vec<usize> {
        self.events.iter().map(|e| e.action).collect()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.events.iter().map(|e| e.reward).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryBatch {
    pub trajectories: Vec<Trajectory>,
    /// Which behavior policy produced the batch.
    pub source: String,
}

impl TrajectoryBatch {
    pub fn new(trajectories: Vec<Trajectory>, source: impl Into<String>) -> Self {
        TrajectoryBatch {
            trajectories,
            source: source.into(),
        }
    }

    pub fn num_events(&self) -> usize {
        self.trajectories.iter().map(|t| t.events.len()).sum()
    }

    pub fn events(&self) -> impl Iterator<Item = &LoggedEvent> {
        self.trajectories.iter().flat_map(|t| t.events.iter())
    }

    pub fn validate(&self, num_actions: usize) -> Result<()> {
        if self.trajectories.is_empty() {
            return Err(Error::Data("empty trajectory batch".into()));
        }
        for traj in &self.trajectories {
            if traj.events.is_empty() {
                return Err(Error::Data(format!("trajectory {} is empty", traj.id)));
            }
            for e in &traj.events {
                if e.action >= num_actions {
                    return Err(Error::Data(format!(
                        "trajectory {} step {}: action {} out of range for |A| = {num_actions}",
                        traj.id, e.step, e.action
                    )));
                }
                if !e.reward.is_finite() {
                    return Err(Error::Data(format!(
                        "trajectory {} step {}: non-finite reward",
                        traj.id, e.step
                    )));
                }
                if !(e.behavior_prob > 0.0 && e.behavior_prob <= 1.0) {
                    if e.behavior_prob == 0.0 {
                        return Err(Error::DivisionByZero(format!(
                            "trajectory {} step {}: behavior probability is zero for logged action {}",
                            traj.id, e.step, e.action
                        )));
                    }
                    return Err(Error::Data(format!(
                        "trajectory {} step {}: behavior probability {} outside (0, 1]",
                        traj.id, e.step, e.behavior_prob
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectionMode {
    /// Reward-weighted REINFORCE with no importance weight.
    None,
    /// First-order off-policy correction `π/β`.
    Standard,
    /// Top-K correction `π/β · λ_K(π)`.
    Topk,
}

impl std::fmt::Display for CorrectionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CorrectionMode::None => "none",
            CorrectionMode::Standard => "standard",
            CorrectionMode::Topk => "topk",
        })
    }
}

/// Opt-in sampled-softmax training path. Negatives for each event come from
/// a stream keyed by `(seed, trajectory id, step)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampledSoftmax {
    pub negatives: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrectionConfig {
    pub mode: CorrectionMode,
    pub k: usize,
    /// `None` disables capping.
    pub cap: Option<f64>,
    /// Self-normalise the capped weights over the batch.
    pub nis: bool,
    pub kl_coefficient: f64,
    pub discount: f64,
    pub temperature: f64,
    pub sampled_softmax: Option<SampledSoftmax>,
}

impl Default for CorrectionConfig {
    fn default() -> Self {
        CorrectionConfig {
            mode: CorrectionMode::Standard,
            k: 16,
            cap: Some(default_cap()),
            nis: false,
            kl_coefficient: 0.0,
            discount: 1.0,
            temperature: 1.0,
            sampled_softmax: None,
        }
    }
}

impl CorrectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("K must be at least 1".into()));
        }
        if let Some(c) = self.cap {
            if !(c > 0.0) {
                return Err(Error::Config(format!("cap must be positive, got {c}")));
            }
        }
        if !(self.kl_coefficient >= 0.0) || !self.kl_coefficient.is_finite() {
            return Err(Error::Config(format!(
                "kl coefficient must be non-negative, got {}",
                self.kl_coefficient
            )));
        }
        if !(0.0..=1.0).contains(&self.discount) {
            return Err(Error::Config(format!(
                "discount must lie in [0, 1], got {}",
                self.discount
            )));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if let Some(s) = self.sampled_softmax {
            if s.negatives == 0 {
                return Err(Error::Config("sampled softmax needs at least one negative".into()));
            }
        }
        Ok(())
    }
}

/// `R_t = Σ_{k≥0} γ^k r_{t+k}`.
pub fn discounted_returns(rewards: &[f64], discount: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (t, &r) in rewards.iter().enumerate().rev() {
        acc = r + discount * acc;
        out[t] = acc;
    }
    out
}

/// `ω = π / β`.
pub fn importance_weight(pi: f64, beta: f64) -> Result<f64> {
    if beta == 0.0 {
        return Err(Error::DivisionByZero(
            "behavior probability is zero for a logged action".into(),
        ));
    }
    if !(beta > 0.0) {
        return Err(Error::invalid(format!("behavior probability {beta} is not positive")));
    }
    Ok(pi / beta)
}

/// `min(ω, c)`.
pub fn cap_weight(weight: f64, cap: f64) -> f64 {
    weight.min(cap)
}

/// `ω_i / Σ_j ω_j`.
pub fn normalize_weights(weights: &[f64]) -> Result<Vec<f64>> {
    if weights.is_empty() {
        return Err(Error::invalid("cannot normalise an empty batch"));
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::invalid("weights must be finite and non-negative"));
    }
    let total: f64 = weights.iter().sum();
    if total == 0.0 {
        return Err(Error::invalid("cannot normalise an all-zero batch"));
    }
    Ok(weights.iter().map(|w| w / total).collect())
}

/// Probability that an action with softmax mass `π` appears in a set built
/// from `K` draws with replacement: `1 - (1-π)^K`.
pub fn alpha_prob(pi: f64, k: usize) -> f64 {
    1.0 - (1.0 - pi).powi(k as i32)
}

/// `λ_K = ∂α/∂π = K(1-π)^(K-1)`.
pub fn lambda_multiplier(pi: f64, k: usize) -> f64 {
    k as f64 * (1.0 - pi).powi(k as i32 - 1)
}

/// Unbiased sample variance (`n - 1` denominator); zero for fewer than two
/// samples.
pub fn sample_variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Gradient buffers mirroring [`PolicyParameters`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientAccumulator {
    dims: ModelDims,
    grads: [Mat; 9],
}

impl GradientAccumulator {
    pub fn zeros(dims: ModelDims) -> Self {
        let grads = TensorId::ALL.map(|id| {
            let (r, c) = id.shape(dims);
            Mat::zeros(r, c)
        });
        GradientAccumulator { dims, grads }
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn get(&self, id: TensorId) -> &Mat {
        &self.grads[id as usize]
    }

    pub fn get_mut(&mut self, id: TensorId) -> &mut Mat {
        &mut self.grads[id as usize]
    }

    pub fn iter(&self) -> impl Iterator<Item = (TensorId, &Mat)> {
        TensorId::ALL.into_iter().zip(self.grads.iter())
    }

    /// `self += other`, tensor by tensor.
    pub fn merge(&mut self, other: &GradientAccumulator) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::mismatch(
                "GradientAccumulator::merge",
                format!("{:?}", self.dims),
                format!("{:?}", other.dims),
            ));
        }
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.axpy(1.0, b)?;
        }
        Ok(())
    }

    pub fn norms(&self) -> BTreeMap<String, f64> {
        self.iter()
            .map(|(id, g)| (id.name().to_string(), g.frobenius_norm()))
            .collect()
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.iter().find(|(_, g)| !g.is_finite()) {
            Some((id, _)) => Err(Error::NumericalFailure {
                tensor: id.name().to_string(),
                detail: "non-finite gradient".into(),
            }),
            None => Ok(()),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.as_slice().iter())
            .fold(0.0, |m, x| m.max(x.abs()))
    }
}

/// Per-batch summary of the importance weights and gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Weighted reward estimate `Σ_t c_t` under the final weights.
    pub objective: f64,
    pub weight_mean: f64,
    pub weight_var: f64,
    pub weight_max: f64,
    pub capped_fraction: f64,
    /// `(Σ ω̄)² / Σ ω̄²` over the capped weights.
    pub effective_sample_size: f64,
    pub num_events: usize,
    pub grad_norms: BTreeMap<String, f64>,
}

/// Forward quantities for one trajectory at fixed parameters.
struct TrajectoryForward {
    states: Vec<Vec<f64>>,
    caches: Vec<CfnStepCache>,
    /// Full softmax at the configured temperature, per step.
    probs: Vec<Vec<f64>>,
}

fn forward_trajectory(
    actions: &[usize],
    params: &PolicyParameters,
    temperature: f64,
) -> Result<TrajectoryForward> {
    let (states, caches) = policy::states_before_actions(actions, params)?;
    let probs = states
        .iter()
        .map(|s| numerics::softmax(&policy::policy_logits(s, params)?, temperature))
        .collect::<Result<Vec<_>>>()?;
    Ok(TrajectoryForward {
        states,
        caches,
        probs,
    })
}

/// Backpropagates `g = ∂J/∂s'` through one CFN step, accumulating parameter
/// gradients and returning `∂J/∂s`.
fn cfn_backward(
    cache: &CfnStepCache,
    g: &[f64],
    params: &PolicyParameters,
    acc: &mut GradientAccumulator,
) -> Result<Vec<f64>> {
    let n = g.len();
    let mut dz = vec![0.0; n];
    let mut di = vec![0.0; n];
    let mut dh = vec![0.0; n];
    let mut ds = vec![0.0; n];
    for k in 0..n {
        let (z, i, ts, th) = (cache.z[k], cache.i[k], cache.tanh_s[k], cache.tanh_h[k]);
        dz[k] = g[k] * ts * z * (1.0 - z);
        di[k] = g[k] * th * i * (1.0 - i);
        dh[k] = g[k] * i * (1.0 - th * th);
        ds[k] = g[k] * z * (1.0 - ts * ts);
    }
    let from_z = params.tensor(TensorId::Uz).matvec_t(&dz)?;
    let from_i = params.tensor(TensorId::Ui).matvec_t(&di)?;
    for k in 0..n {
        ds[k] += from_z[k] + from_i[k];
    }
    acc.get_mut(TensorId::Uz).add_outer(1.0, &dz, &cache.s_prev)?;
    acc.get_mut(TensorId::Ui).add_outer(1.0, &di, &cache.s_prev)?;
    acc.get_mut(TensorId::Wz).add_outer(1.0, &dz, &cache.u)?;
    acc.get_mut(TensorId::Wi).add_outer(1.0, &di, &cache.u)?;
    acc.get_mut(TensorId::Wa).add_outer(1.0, &dh, &cache.u)?;
    acc.get_mut(TensorId::Bz).add_outer(1.0, &dz, &[1.0])?;
    acc.get_mut(TensorId::Bi).add_outer(1.0, &di, &[1.0])?;
    let mut du = params.tensor(TensorId::Wz).matvec_t(&dz)?;
    let du_i = params.tensor(TensorId::Wi).matvec_t(&di)?;
    let du_a = params.tensor(TensorId::Wa).matvec_t(&dh)?;
    for k in 0..du.len() {
        du[k] += du_i[k] + du_a[k];
    }
    acc.get_mut(TensorId::U).add_to_col(cache.action, 1.0, &du)?;
    Ok(ds)
}

/// Given `∂J/∂l_t` for the raw logits `l_t = Vᵀ s_t` at every step,
/// accumulates the gradient of `J` for one trajectory by backpropagation
/// through time.
fn backward_trajectory(
    fwd: &TrajectoryForward,
    logit_grads: &[Option<Vec<f64>>],
    params: &PolicyParameters,
    acc: &mut GradientAccumulator,
) -> Result<()> {
    let v = params.tensor(TensorId::V);
    let n = params.dims().state_dim;
    let mut carry = vec![0.0; n];
    for t in (0..fwd.states.len()).rev() {
        let mut ds = carry;
        if let Some(gl) = &logit_grads[t] {
            acc.get_mut(TensorId::V).add_outer(1.0, &fwd.states[t], gl)?;
            let from_head = v.matvec(gl)?;
            for (d, h) in ds.iter_mut().zip(&from_head) {
                *d += h;
            }
        }
        if t == 0 {
            break;
        }
        carry = cfn_backward(&fwd.caches[t - 1], &ds, params, acc)?;
    }
    Ok(())
}

/// A scalar objective with an analytic gradient, checkable by finite
/// differences.
pub trait SurrogateObjective: Sync {
    fn value(&self, params: &PolicyParameters) -> Result<f64>;
    fn gradient(&self, params: &PolicyParameters) -> Result<GradientAccumulator>;
}

/// `J(θ) = Σ_t c_t log p_θ(a_t | s_t)` with coefficients frozen at the
/// parameters the batch was weighted under. `p` is the full softmax, or the
/// corrected sampled softmax when enabled.
pub struct PolicyGradientObjective<'a> {
    batch: &'a TrajectoryBatch,
    coefficients: Vec<Vec<f64>>,
    negatives: Option<Vec<Vec<Vec<usize>>>>,
    temperature: f64,
    diagnostics: Diagnostics,
}

impl<'a> PolicyGradientObjective<'a> {
    /// Evaluates importance weights at `params` and freezes them.
    pub fn freeze(
        batch: &'a TrajectoryBatch,
        params: &PolicyParameters,
        cfg: &CorrectionConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        batch.validate(params.num_actions())?;
        let forwards = batch
            .trajectories
            .par_iter()
            .map(|traj| forward_trajectory(&traj.actions(), params, cfg.temperature))
            .collect::<Result<Vec<_>>>()?;
        Self::freeze_with(batch, params, cfg, &forwards)
    }

    fn freeze_with(
        batch: &'a TrajectoryBatch,
        params: &PolicyParameters,
        cfg: &CorrectionConfig,
        forwards: &[TrajectoryForward],
    ) -> Result<Self> {
        let n_events = batch.num_events();
        let n = n_events as f64;
        let mut pis = Vec::with_capacity(n_events);
        for (traj, fwd) in batch.trajectories.iter().zip(forwards) {
            for (e, p) in traj.events.iter().zip(&fwd.probs) {
                pis.push(p[e.action]);
            }
        }

        // Capped importance weights, flattened in batch order.
        let (raw, capped): (Vec<f64>, Vec<f64>) = match cfg.mode {
            CorrectionMode::None => (vec![1.0; n_events], vec![1.0; n_events]),
            CorrectionMode::Standard | CorrectionMode::Topk => {
                let raw = batch
                    .events()
                    .zip(&pis)
                    .map(|(e, &pi)| importance_weight(pi, e.behavior_prob))
                    .collect::<Result<Vec<_>>>()?;
                let capped = match cfg.cap {
                    Some(c) => raw.iter().map(|&w| cap_weight(w, c)).collect(),
                    None => raw.clone(),
                };
                (raw, capped)
            }
        };
        let corrected = cfg.mode != CorrectionMode::None;
        let mut weights: Vec<f64> = if corrected && cfg.nis {
            normalize_weights(&capped)?
        } else {
            capped.iter().map(|w| w / n).collect()
        };
        if cfg.mode == CorrectionMode::Topk {
            for (w, &pi) in weights.iter_mut().zip(&pis) {
                *w *= lambda_multiplier(pi, cfg.k);
            }
        }

        let mut coefficients = Vec::with_capacity(batch.trajectories.len());
        let mut flat = 0;
        let mut objective = 0.0;
        for traj in &batch.trajectories {
            let returns = discounted_returns(&traj.rewards(), cfg.discount);
            let row: Vec<f64> = returns
                .iter()
                .map(|&r| {
                    let c = weights[flat] * r;
                    flat += 1;
                    c
                })
                .collect();
            objective += row.iter().sum::<f64>();
            coefficients.push(row);
        }

        let negatives = match cfg.sampled_softmax {
            None => None,
            Some(ss) => {
                let num_actions = params.num_actions();
                if ss.negatives >= num_actions {
                    return Err(Error::Config(format!(
                        "sampled softmax asks for {} negatives but only {} other actions exist",
                        ss.negatives,
                        num_actions - 1
                    )));
                }
                let root = RngStream::named(ss.seed, "sampled-softmax");
                Some(
                    batch
                        .trajectories
                        .iter()
                        .map(|traj| {
                            let per_traj = root.split(traj.id);
                            traj.events
                                .iter()
                                .map(|e| {
                                    let mut rng = per_traj.split(e.step as u64);
                                    policy::draw_negatives(e.action, ss.negatives, num_actions, &mut rng)
                                })
                                .collect::<Result<Vec<_>>>()
                        })
                        .collect::<Result<Vec<_>>>()?,
                )
            }
        };

        let capped_count = match (corrected, cfg.cap) {
            (true, Some(c)) => raw.iter().filter(|&&w| w > c).count(),
            _ => 0,
        };
        let sum: f64 = capped.iter().sum();
        let sum_sq: f64 = capped.iter().map(|w| w * w).sum();
        let diagnostics = Diagnostics {
            objective,
            weight_mean: sum / n,
            weight_var: sample_variance(&capped),
            weight_max: capped.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            capped_fraction: capped_count as f64 / n,
            effective_sample_size: if sum_sq > 0.0 { sum * sum / sum_sq } else { 0.0 },
            num_events: n_events,
            grad_norms: BTreeMap::new(),
        };

        Ok(PolicyGradientObjective {
            batch,
            coefficients,
            negatives,
            temperature: cfg.temperature,
            diagnostics,
        })
    }

    pub fn coefficients(&self) -> &[Vec<f64>] {
        &self.coefficients
    }

    pub fn diagnostics(&self) -> &Diagnostics {
        &self.diagnostics
    }

    fn step_logit_grad(&self, fwd: &TrajectoryForward, params: &PolicyParameters, ti: usize, t: usize) -> Result<Option<Vec<f64>>> {
        let c = self.coefficients[ti][t];
        if c == 0.0 {
            return Ok(None);
        }
        let a = self.batch.trajectories[ti].events[t].action;
        let temp = self.temperature;
        let mut g = vec![0.0; params.num_actions()];
        match &self.negatives {
            None => {
                for (gj, &pj) in g.iter_mut().zip(&fwd.probs[t]) {
                    *gj = -c * pj / temp;
                }
                g[a] += c / temp;
            }
            Some(neg) => {
                let sl = policy::sampled_logits_at(&fwd.states[t], a, &neg[ti][t], params, temp)?;
                let p = sl.probs()?;
                for (&j, &pj) in sl.actions.iter().zip(&p) {
                    g[j] -= c * pj / temp;
                }
                g[a] += c / temp;
            }
        }
        Ok(Some(g))
    }

    fn log_prob(&self, fwd: &TrajectoryForward, params: &PolicyParameters, ti: usize, t: usize) -> Result<f64> {
        let a = self.batch.trajectories[ti].events[t].action;
        match &self.negatives {
            None => {
                let logits: Vec<f64> = policy::policy_logits(&fwd.states[t], params)?
                    .iter()
                    .map(|l| l / self.temperature)
                    .collect();
                Ok(logits[a] - numerics::log_sum_exp(&logits)?)
            }
            Some(neg) => {
                let sl = policy::sampled_logits_at(&fwd.states[t], a, &neg[ti][t], params, self.temperature)?;
                Ok(-sl.loss()?)
            }
        }
    }
}

impl SurrogateObjective for PolicyGradientObjective<'_> {
    fn value(&self, params: &PolicyParameters) -> Result<f64> {
        let parts = self
            .batch
            .trajectories
            .par_iter()
            .enumerate()
            .map(|(ti, traj)| {
                let fwd = forward_trajectory(&traj.actions(), params, self.temperature)?;
                let mut total = 0.0;
                for (t, &c) in self.coefficients[ti].iter().enumerate() {
                    if c != 0.0 {
                        total += c * self.log_prob(&fwd, params, ti, t)?;
                    }
                }
                Ok(total)
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(parts.iter().sum())
    }

    fn gradient(&self, params: &PolicyParameters) -> Result<GradientAccumulator> {
        let dims = params.dims();
        let parts = self
            .batch
            .trajectories
            .par_iter()
            .enumerate()
            .map(|(ti, traj)| {
                let mut acc = GradientAccumulator::zeros(dims);
                if self.coefficients[ti].iter().all(|&c| c == 0.0) {
                    return Ok(acc);
                }
                let fwd = forward_trajectory(&traj.actions(), params, self.temperature)?;
                let grads = (0..traj.events.len())
                    .map(|t| self.step_logit_grad(&fwd, params, ti, t))
                    .collect::<Result<Vec<_>>>()?;
                backward_trajectory(&fwd, &grads, params, &mut acc)?;
                Ok(acc)
            })
            .collect::<Result<Vec<_>>>()?;
        // Fixed reduction order keeps the sum bit-identical across thread counts.
        let mut total = GradientAccumulator::zeros(dims);
        for part in &parts {
            total.merge(part)?;
        }
        total.check_finite()?;
        Ok(total)
    }
}

/// Off-policy corrected policy gradient for `batch` at `params`.
pub fn policy_gradient(
    batch: &TrajectoryBatch,
    params: &PolicyParameters,
    cfg: &CorrectionConfig,
) -> Result<(GradientAccumulator, Diagnostics)> {
    let objective = PolicyGradientObjective::freeze(batch, params, cfg)?;
    let grads = objective.gradient(params)?;
    let mut diagnostics = objective.diagnostics.clone();
    diagnostics.grad_norms = grads.norms();
    Ok((grads, diagnostics))
}

/// `-coefficient · mean_t KL(β(·|s_t) ‖ π_θ(·|s_t))` over every state the
/// batch visits. Its gradient pulls π toward β.
pub struct KlPenaltyObjective<'a> {
    batch: &'a TrajectoryBatch,
    behavior_probs: &'a [Vec<Vec<f64>>],
    coefficient: f64,
    temperature: f64,
}

impl<'a> KlPenaltyObjective<'a> {
    pub fn new(
        batch: &'a TrajectoryBatch,
        behavior_probs: &'a [Vec<Vec<f64>>],
        coefficient: f64,
        temperature: f64,
    ) -> Result<Self> {
        if !(coefficient >= 0.0) {
            return Err(Error::invalid(format!(
                "kl coefficient must be non-negative, got {coefficient}"
            )));
        }
        if behavior_probs.len() != batch.trajectories.len() {
            return Err(Error::mismatch(
                "kl penalty behavior probabilities",
                batch.trajectories.len(),
                behavior_probs.len(),
            ));
        }
        for (traj, probs) in batch.trajectories.iter().zip(behavior_probs) {
            if probs.len() != traj.events.len() {
                return Err(Error::mismatch(
                    "kl penalty behavior probabilities",
                    traj.events.len(),
                    probs.len(),
                ));
            }
        }
        Ok(KlPenaltyObjective {
            batch,
            behavior_probs,
            coefficient,
            temperature,
        })
    }

    fn scale(&self) -> f64 {
        self.coefficient / self.batch.num_events() as f64
    }
}

pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.ln() - qi.ln()))
        .sum()
}

impl SurrogateObjective for KlPenaltyObjective<'_> {
    fn value(&self, params: &PolicyParameters) -> Result<f64> {
        if self.coefficient == 0.0 {
            return Ok(0.0);
        }
        let mut total = 0.0;
        for (traj, betas) in self.batch.trajectories.iter().zip(self.behavior_probs) {
            let fwd = forward_trajectory(&traj.actions(), params, self.temperature)?;
            for (beta, pi) in betas.iter().zip(&fwd.probs) {
                total += kl_divergence(beta, pi);
            }
        }
        Ok(-self.scale() * total)
    }

    fn gradient(&self, params: &PolicyParameters) -> Result<GradientAccumulator> {
        let dims = params.dims();
        let mut total = GradientAccumulator::zeros(dims);
        if self.coefficient == 0.0 {
            return Ok(total);
        }
        let scale = self.scale() / self.temperature;
        for (traj, betas) in self.batch.trajectories.iter().zip(self.behavior_probs) {
            let fwd = forward_trajectory(&traj.actions(), params, self.temperature)?;
            let grads = betas
                .iter()
                .zip(&fwd.probs)
                .map(|(beta, pi)| {
                    if beta.len() != pi.len() {
                        return Err(Error::mismatch("kl penalty", pi.len(), beta.len()));
                    }
                    Ok(Some(
                        beta.iter().zip(pi).map(|(b, p)| scale * (b - p)).collect(),
                    ))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut acc = GradientAccumulator::zeros(dims);
            backward_trajectory(&fwd, &grads, params, &mut acc)?;
            total.merge(&acc)?;
        }
        total.check_finite()?;
        Ok(total)
    }
}

/// Ascent direction of `-coefficient · KL(β ‖ π_θ)` averaged over batch
/// states. `behavior_probs[i][t]` is the full `β(·|s_t)` for trajectory `i`.
pub fn kl_penalty_gradient(
    batch: &TrajectoryBatch,
    params: &PolicyParameters,
    behavior_probs: &[Vec<Vec<f64>>],
    coefficient: f64,
    temperature: f64,
) -> Result<GradientAccumulator> {
    KlPenaltyObjective::new(batch, behavior_probs, coefficient, temperature)?.gradient(params)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub tensor: TensorId,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Entry with the largest relative error, if any parameter was checked.
    pub worst: Option<GradCheckEntry>,
    /// Largest relative error per tensor, in checkpoint order.
    pub per_tensor: Vec<(TensorId, f64)>,
    pub epsilon: f64,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }

    pub fn failing_tensors(&self, tolerance: f64) -> Vec<TensorId> {
        self.per_tensor
            .iter()
            .filter(|(_, e)| *e >= tolerance)
            .map(|(id, _)| *id)
            .collect()
    }
}

/// Relative errors below this absolute scale are measured against it, so
/// two near-zero partials do not register as a large relative mismatch.
pub const GRAD_CHECK_ABS_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_ABS_FLOOR)
}

/// Central differences `(J(θ+ε) - J(θ-ε)) / 2ε` for every parameter.
pub fn numeric_gradient(
    objective: &dyn SurrogateObjective,
    params: &PolicyParameters,
    epsilon: f64,
) -> Result<GradientAccumulator> {
    let mut out = GradientAccumulator::zeros(params.dims());
    for id in TensorId::ALL {
        let len = params.tensor(id).len();
        let partials = (0..len)
            .into_par_iter()
            .map(|idx| {
                let mut probe = params.clone();
                let base = probe.tensor(id).as_slice()[idx];
                probe.tensor_mut(id).as_mut_slice()[idx] = base + epsilon;
                let plus = objective.value(&probe)?;
                probe.tensor_mut(id).as_mut_slice()[idx] = base - epsilon;
                let minus = objective.value(&probe)?;
                Ok((plus - minus) / (2.0 * epsilon))
            })
            .collect::<Result<Vec<f64>>>()?;
        out.get_mut(id).as_mut_slice().copy_from_slice(&partials);
    }
    Ok(out)
}

/// Entry-by-entry comparison of an analytic gradient with a numeric one.
pub fn compare_gradients(
    analytic: &GradientAccumulator,
    numeric: &GradientAccumulator,
    epsilon: f64,
) -> GradCheckReport {
    let mut worst: Option<GradCheckEntry> = None;
    let mut per_tensor = Vec::with_capacity(TensorId::ALL.len());
    for id in TensorId::ALL {
        let mut tensor_max = 0.0f64;
        for (index, (&a, &nv)) in analytic
            .get(id)
            .as_slice()
            .iter()
            .zip(numeric.get(id).as_slice())
            .enumerate()
        {
            let rel = if a.is_finite() && nv.is_finite() {
                relative_error(a, nv)
            } else {
                f64::INFINITY
            };
            tensor_max = tensor_max.max(rel);
            if worst.as_ref().is_none_or(|w| rel > w.rel_error) {
                worst = Some(GradCheckEntry {
                    tensor: id,
                    index,
                    analytic: a,
                    numeric: nv,
                    rel_error: rel,
                });
            }
        }
        per_tensor.push((id, tensor_max));
    }
    GradCheckReport {
        max_rel_error: worst.as_ref().map_or(0.0, |w| w.rel_error),
        worst,
        per_tensor,
        epsilon,
    }
}

/// Checks [`policy_gradient`] against central differences of its
/// frozen-weight surrogate objective.
pub fn finite_difference_check(
    params: &PolicyParameters,
    batch: &TrajectoryBatch,
    cfg: &CorrectionConfig,
    epsilon: f64,
) -> Result<GradCheckReport> {
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::invalid(format!(
            "finite-difference step {epsilon} outside [1e-7, 1e-3]"
        )));
    }
    let objective = PolicyGradientObjective::freeze(batch, params, cfg)?;
    let analytic = objective.gradient(params)?;
    let numeric = numeric_gradient(&objective, params, epsilon)?;
    Ok(compare_gradients(&analytic, &numeric, epsilon))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Optimizer state; Adam keeps first and second moments per tensor.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    kind: OptimizerKind,
    moments: Option<(GradientAccumulator, GradientAccumulator)>,
    steps: u64,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind) -> Self {
        OptimizerState {
            kind,
            moments: None,
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }
}

/// One ascent step on the objective. Parameters are left untouched if the
/// update would produce a non-finite value.
pub fn optimizer_step(
    params: &mut PolicyParameters,
    grads: &GradientAccumulator,
    state: &mut OptimizerState,
    learning_rate: f64,
) -> Result<()> {
    if !(learning_rate > 0.0) || !learning_rate.is_finite() {
        return Err(Error::invalid(format!(
            "learning rate must be positive, got {learning_rate}"
        )));
    }
    if grads.dims() != params.dims() {
        return Err(Error::mismatch(
            "optimizer_step",
            format!("{:?}", params.dims()),
            format!("{:?}", grads.dims()),
        ));
    }
    grads.check_finite()?;
    let mut next = params.clone();
    let mut next_state = state.clone();
    next_state.steps += 1;
    match state.kind {
        OptimizerKind::Sgd => {
            for id in TensorId::ALL {
                next.tensor_mut(id).axpy(learning_rate, grads.get(id))?;
            }
        }
        OptimizerKind::Adam {
            beta1,
            beta2,
            epsilon,
        } => {
            let dims = params.dims();
            let (m, v) = next_state
                .moments
                .get_or_insert_with(|| (GradientAccumulator::zeros(dims), GradientAccumulator::zeros(dims)));
            let t = next_state.steps as i32;
            let bias1 = 1.0 - beta1.powi(t);
            let bias2 = 1.0 - beta2.powi(t);
            for id in TensorId::ALL {
                let g = grads.get(id).as_slice();
                let ms = m.get_mut(id).as_mut_slice();
                let vs = v.get_mut(id).as_mut_slice();
                let theta = next.tensor_mut(id).as_mut_slice();
                for k in 0..g.len() {
                    ms[k] = beta1 * ms[k] + (1.0 - beta1) * g[k];
                    vs[k] = beta2 * vs[k] + (1.0 - beta2) * g[k] * g[k];
                    let m_hat = ms[k] / bias1;
                    let v_hat = vs[k] / bias2;
                    theta[k] += learning_rate * m_hat / (v_hat.sqrt() + epsilon);
                }
            }
        }
    }
    if let Some(id) = next.first_non_finite() {
        return Err(Error::NumericalFailure {
            tensor: id.name().to_string(),
            detail: "update produced a non-finite parameter".into(),
        });
    }
    *params = next;
    *state = next_state;
    Ok(())
}
