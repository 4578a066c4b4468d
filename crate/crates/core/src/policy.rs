//! The parametrised recommendation policy.
//!
//! A Chaos-Free Network (CFN) cell folds the sequence of recommended
//! actions into a user state `s ∈ Rⁿ`; a softmax head over the output
//! embeddings `V` turns the state into a distribution over actions.
//!
//! ```text
//! s' = z ⊙ tanh(s) + i ⊙ tanh(W_a u_a)
//! z  = σ(U_z s + W_z u_a + b_z)
//! i  = σ(U_i s + W_i u_a + b_i)
//! π(a | s) = softmax(Vᵀ s / T)_a
//! ```
//!
//! The initial state is always `s₀ = 0`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{self, Mat, RngStream};

/// Default half-width of the uniform parameter initialisation.
pub const INIT_SCALE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelDims {
    /// State dimension `n`.
    pub state_dim: usize,
    /// Input embedding dimension `m`.
    pub embed_dim: usize,
    /// Number of actions `|A|`.
    pub num_actions: usize,
}

impl ModelDims {
    pub fn new(state_dim: usize, embed_dim: usize, num_actions: usize) -> Result<Self> {
        if state_dim == 0 || embed_dim == 0 || num_actions == 0 {
            return Err(Error::invalid(format!(
                "model dimensions must be positive (n={state_dim}, m={embed_dim}, |A|={num_actions})"
            )));
        }
        Ok(ModelDims {
            state_dim,
            embed_dim,
            num_actions,
        })
    }
}

/// The trainable tensors of the policy, in checkpoint order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TensorId {
    /// Input action embeddings, `m × |A|`.
    U,
    /// Output action embeddings, `n × |A|`.
    V,
    Wa,
    Uz,
    Ui,
    Wz,
    Wi,
    Bz,
    Bi,
}

impl TensorId {
    pub const ALL: [TensorId; 9] = [
        TensorId::U,
        TensorId::V,
        TensorId::Wa,
        TensorId::Uz,
        TensorId::Ui,
        TensorId::Wz,
        TensorId::Wi,
        TensorId::Bz,
        TensorId::Bi,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TensorId::U => "U",
            TensorId::V => "V",
            TensorId::Wa => "W_a",
            TensorId::Uz => "U_z",
            TensorId::Ui => "U_i",
            TensorId::Wz => "W_z",
            TensorId::Wi => "W_i",
            TensorId::Bz => "b_z",
            TensorId::Bi => "b_i",
        }
    }

    pub fn from_name(name: &str) -> Option<TensorId> {
        Self::ALL.into_iter().find(|t| t.name() == name)
    }

    pub fn shape(self, dims: ModelDims) -> (usize, usize) {
        let ModelDims {
            state_dim: n,
            embed_dim: m,
            num_actions: a,
        } = dims;
        match self {
            TensorId::U => (m, a),
            TensorId::V => (n, a),
            TensorId::Wa | TensorId::Wz | TensorId::Wi => (n, m),
            TensorId::Uz | TensorId::Ui => (n, n),
            TensorId::Bz | TensorId::Bi => (n, 1),
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl std::fmt::Display for TensorId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Every trainable tensor of π. The behavior head's output table lives in
/// [`crate::behavior::BehaviorHead`], so nothing here can read it.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParameters {
    dims: ModelDims,
    tensors: [Mat; 9],
}

impl PolicyParameters {
    pub fn zeros(dims: ModelDims) -> Self {
        let tensors = TensorId::ALL.map(|id| {
            let (r, c) = id.shape(dims);
            Mat::zeros(r, c)
        });
        PolicyParameters { dims, tensors }
    }

    /// Uniform initialisation in `[-INIT_SCALE, INIT_SCALE]`.
    pub fn init(dims: ModelDims, rng: &mut RngStream) -> Self {
        Self::random(dims, INIT_SCALE, rng)
    }

    pub fn random(dims: ModelDims, scale: f64, rng: &mut RngStream) -> Self {
        let tensors = TensorId::ALL.map(|id| {
            let (r, c) = id.shape(dims);
            Mat::uniform(r, c, scale, rng)
        });
        PolicyParameters { dims, tensors }
    }

    /// Assembles parameters from tensors given in [`TensorId::ALL`] order.
    pub fn from_tensors(dims: ModelDims, tensors: Vec<Mat>) -> Result<Self> {
        if tensors.len() != TensorId::ALL.len() {
            return Err(Error::mismatch(
                "PolicyParameters::from_tensors",
                TensorId::ALL.len(),
                tensors.len(),
            ));
        }
        for (id, t) in TensorId::ALL.iter().zip(&tensors) {
            if t.shape() != id.shape(dims) {
                return Err(Error::mismatch(
                    "PolicyParameters::from_tensors",
                    format!("{id} {:?}", id.shape(dims)),
                    format!("{:?}", t.shape()),
                ));
            }
        }
        let tensors: [Mat; 9] = tensors.try_into().expect("length checked");
        Ok(PolicyParameters { dims, tensors })
    }

    /// A policy whose state is the constant `0.5` after the first step and
    /// whose logits from then on equal `logits`.
    ///
    /// The update gate is saturated shut and the input gate open, so the
    /// state forgets history; `s₀ = 0` still yields a uniform first step.
    pub fn fixed_preference(logits: &[f64]) -> Result<Self> {
        let dims = ModelDims::new(1, 1, logits.len())?;
        let mut p = Self::zeros(dims);
        p.tensor_mut(TensorId::U).fill(1.0);
        p.tensor_mut(TensorId::Wa).fill(0.5f64.atanh());
        p.tensor_mut(TensorId::Bz).fill(-50.0);
        p.tensor_mut(TensorId::Bi).fill(50.0);
        let v = p.tensor_mut(TensorId::V);
        for (a, &l) in logits.iter().enumerate() {
            v.set(0, a, 2.0 * l);
        }
        Ok(p)
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn num_actions(&self) -> usize {
        self.dims.num_actions
    }

    pub fn tensor(&self, id: TensorId) -> &Mat {
        &self.tensors[id.index()]
    }

    pub fn tensor_mut(&mut self, id: TensorId) -> &mut Mat {
        &mut self.tensors[id.index()]
    }

    pub fn tensors(&self) -> impl Iterator<Item = (TensorId, &Mat)> {
        TensorId::ALL.into_iter().zip(self.tensors.iter())
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(Mat::len).sum()
    }

    /// First tensor holding a non-finite entry, if any.
    pub fn first_non_finite(&self) -> Option<TensorId> {
        self.tensors().find(|(_, t)| !t.is_finite()).map(|(id, _)| id)
    }

    pub fn check_action(&self, a: usize) -> Result<()> {
        if a >= self.dims.num_actions {
            return Err(Error::invalid(format!(
                "action {a} out of range for |A| = {}",
                self.dims.num_actions
            )));
        }
        Ok(())
    }

    fn check_state(&self, s: &[f64]) -> Result<()> {
        if s.len() != self.dims.state_dim {
            return Err(Error::mismatch("policy state", self.dims.state_dim, s.len()));
        }
        if s.iter().any(|x| !x.is_finite()) {
            return Err(Error::NumericalFailure {
                tensor: "s".into(),
                detail: "user state has non-finite entries".into(),
            });
        }
        Ok(())
    }
}

/// The recurrent belief about a user after `step` actions.
#[derive(Debug, Clone, PartialEq)]
pub struct UserState {
    pub s: Vec<f64>,
    pub step: usize,
}

impl UserState {
    pub fn initial(state_dim: usize) -> Self {
        UserState {
            s: vec![0.0; state_dim],
            step: 0,
        }
    }
}

/// Intermediate values of one CFN step, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct CfnStepCache {
    pub action: usize,
    pub s_prev: Vec<f64>,
    pub u: Vec<f64>,
    pub tanh_s: Vec<f64>,
    pub tanh_h: Vec<f64>,
    pub z: Vec<f64>,
    pub i: Vec<f64>,
}

pub(crate) fn cfn_forward(
    s: &[f64],
    a: usize,
    params: &PolicyParameters,
) -> Result<(Vec<f64>, CfnStepCache)> {
    params.check_action(a)?;
    params.check_state(s)?;
    let u = params.tensor(TensorId::U).col(a)?;
    let h = params.tensor(TensorId::Wa).matvec(&u)?;
    let pz_s = params.tensor(TensorId::Uz).matvec(s)?;
    let pz_u = params.tensor(TensorId::Wz).matvec(&u)?;
    let pi_s = params.tensor(TensorId::Ui).matvec(s)?;
    let pi_u = params.tensor(TensorId::Wi).matvec(&u)?;
    let bz = params.tensor(TensorId::Bz).as_slice();
    let bi = params.tensor(TensorId::Bi).as_slice();
    let n = s.len();
    let mut z = Vec::with_capacity(n);
    let mut i = Vec::with_capacity(n);
    let mut tanh_s = Vec::with_capacity(n);
    let mut tanh_h = Vec::with_capacity(n);
    let mut next = Vec::with_capacity(n);
    for k in 0..n {
        let zk = numerics::sigmoid(pz_s[k] + pz_u[k] + bz[k]);
        let ik = numerics::sigmoid(pi_s[k] + pi_u[k] + bi[k]);
        let ts = s[k].tanh();
        let th = h[k].tanh();
        next.push(zk * ts + ik * th);
        z.push(zk);
        i.push(ik);
        tanh_s.push(ts);
        tanh_h.push(th);
    }
    let cache = CfnStepCache {
        action: a,
        s_prev: s.to_vec(),
        u,
        tanh_s,
        tanh_h,
        z,
        i,
    };
    Ok((next, cache))
}

/// One CFN transition `s → s'` after recommending action `a`.
pub fn cfn_step(state: &UserState, a: usize, params: &PolicyParameters) -> Result<UserState> {
    let (s, _) = cfn_forward(&state.s, a, params)?;
    Ok(UserState {
        s,
        step: state.step + 1,
    })
}

/// States `s₁ … s_T` obtained by feeding `actions` through the cell from
/// `s₀ = 0`.
pub fn unroll(actions: &[usize], params: &PolicyParameters) -> Result<Vec<UserState>> {
    if actions.is_empty() {
        return Err(Error::invalid("unroll needs at least one action"));
    }
    let mut state = UserState::initial(params.dims().state_dim);
    let mut out = Vec::with_capacity(actions.len());
    for &a in actions {
        state = cfn_step(&state, a, params)?;
        out.push(state.clone());
    }
    Ok(out)
}

/// States `s₀ … s_{T-1}`: the state each action in `actions` was chosen
/// from, plus the step caches needed to backpropagate into the cell.
pub(crate) fn states_before_actions(
    actions: &[usize],
    params: &PolicyParameters,
) -> Result<(Vec<Vec<f64>>, Vec<CfnStepCache>)> {
    let n = params.dims().state_dim;
    let mut states = Vec::with_capacity(actions.len());
    let mut caches = Vec::with_capacity(actions.len().saturating_sub(1));
    let mut s = vec![0.0; n];
    for (t, &a) in actions.iter().enumerate() {
        params.check_action(a)?;
        states.push(s.clone());
        if t + 1 < actions.len() {
            let (next, cache) = cfn_forward(&s, a, params)?;
            caches.push(cache);
            s = next;
        }
    }
    Ok((states, caches))
}

/// Raw logits `Vᵀ s`.
pub fn policy_logits(s: &[f64], params: &PolicyParameters) -> Result<Vec<f64>> {
    params.check_state(s)?;
    params.tensor(TensorId::V).matvec_t(s)
}

/// `π(· | s) = softmax(Vᵀ s / T)` over the full action set.
pub fn policy_probs(state: &UserState, params: &PolicyParameters, temperature: f64) -> Result<Vec<f64>> {
    numerics::softmax(&policy_logits(&state.s, params)?, temperature)
}

/// Logits and proposal corrections for a sampled-softmax training step.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledLogits {
    /// Target first, then the negatives in the order given.
    pub actions: Vec<usize>,
    /// `v_a · s / T` for each entry of `actions`.
    pub logits: Vec<f64>,
    /// Additive corrections `-ln q(a)` where `q(a)` is the chance that a
    /// negative is included by the proposal; zero for the target.
    pub corrections: Vec<f64>,
}

impl SampledLogits {
    pub fn corrected(&self) -> Vec<f64> {
        self.logits
            .iter()
            .zip(&self.corrections)
            .map(|(l, c)| l + c)
            .collect()
    }

    /// Sampled cross-entropy `-l_target + log Σ exp(corrected logits)`.
    pub fn loss(&self) -> Result<f64> {
        Ok(numerics::log_sum_exp(&self.corrected())? - self.logits[0])
    }

    /// Softmax over the corrected logits, aligned with `actions`.
    pub fn probs(&self) -> Result<Vec<f64>> {
        numerics::softmax(&self.corrected(), 1.0)
    }
}

/// Sampled-softmax logits for `target` against `negatives`.
///
/// Negatives are assumed to come from the uniform proposal over
/// `A \ {target}` without replacement ([`draw_negatives`]), so each is
/// included with probability `k / (|A| - 1)`. Adding `-ln q` to every
/// negative makes the corrected partition sum unbiased for the full one.
pub fn sampled_softmax_logits(
    state: &UserState,
    target: usize,
    negatives: &[usize],
    params: &PolicyParameters,
) -> Result<SampledLogits> {
    sampled_logits_at(&state.s, target, negatives, params, 1.0)
}

pub(crate) fn sampled_logits_at(
    s: &[f64],
    target: usize,
    negatives: &[usize],
    params: &PolicyParameters,
    temperature: f64,
) -> Result<SampledLogits> {
    params.check_action(target)?;
    let num_actions = params.num_actions();
    let mut seen = vec![false; num_actions];
    seen[target] = true;
    for &a in negatives {
        params.check_action(a)?;
        if a == target {
            return Err(Error::invalid(format!("target {target} also listed as a negative")));
        }
        if std::mem::replace(&mut seen[a], true) {
            return Err(Error::invalid(format!("negative {a} listed twice")));
        }
    }
    let all = policy_logits(s, params)?;
    let mut actions = Vec::with_capacity(negatives.len() + 1);
    actions.push(target);
    actions.extend_from_slice(negatives);
    let logits = actions.iter().map(|&a| all[a] / temperature).collect();
    let correction = if negatives.is_empty() {
        0.0
    } else {
        ((num_actions - 1) as f64 / negatives.len() as f64).ln()
    };
    let mut corrections = vec![correction; actions.len()];
    corrections[0] = 0.0;
    Ok(SampledLogits {
        actions,
        logits,
        corrections,
    })
}

/// `k` negatives drawn uniformly without replacement from `A \ {target}`.
pub fn draw_negatives(target: usize, k: usize, num_actions: usize, rng: &mut RngStream) -> Result<Vec<usize>> {
    if target >= num_actions {
        return Err(Error::invalid(format!("target {target} out of range")));
    }
    let pool: Vec<usize> = (0..num_actions).filter(|&a| a != target).collect();
    rng.choose_distinct(&pool, k)
}

/// Ranks `scores` descending, ties broken by ascending index, keeping `m`.
pub fn top_m_by_score(scores: &[f64], m: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..scores.len()).collect();
    ids.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    ids.truncate(m);
    ids
}

/// Candidate retrieval by inner product with the output embeddings.
///
/// The exact scan is the only implementation; an approximate index would
/// implement the same trait.
pub trait Retriever {
    fn retrieve(&self, s: &[f64], params: &PolicyParameters, m: usize) -> Result<Vec<usize>>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ExactRetriever;

impl Retriever for ExactRetriever {
    fn retrieve(&self, s: &[f64], params: &PolicyParameters, m: usize) -> Result<Vec<usize>> {
        if m == 0 || m > params.num_actions() {
            return Err(Error::invalid(format!(
                "retrieval width {m} must be in 1..={}",
                params.num_actions()
            )));
        }
        Ok(top_m_by_score(&policy_logits(s, params)?, m))
    }
}

/// The `m` actions with the largest `s · v_a`, descending, ties by id.
pub fn topk_retrieve(state: &UserState, params: &PolicyParameters, m: usize) -> Result<Vec<usize>> {
    ExactRetriever.retrieve(&state.s, params, m)
}

/// Softmax over the logits of `candidates` only.
pub fn restricted_softmax(
    state: &UserState,
    params: &PolicyParameters,
    candidates: &[usize],
    temperature: f64,
) -> Result<Vec<f64>> {
    if candidates.is_empty() {
        return Err(Error::invalid("restricted_softmax needs at least one candidate"));
    }
    let mut seen = vec![false; params.num_actions()];
    for &a in candidates {
        params.check_action(a)?;
        if std::mem::replace(&mut seen[a], true) {
            return Err(Error::invalid(format!("duplicate candidate {a}")));
        }
    }
    let all = policy_logits(&state.s, params)?;
    let logits: Vec<f64> = candidates.iter().map(|&a| all[a]).collect();
    numerics::softmax(&logits, temperature)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServeMode {
    /// Always the `K` highest-probability actions.
    Deterministic,
    /// `K` draws with replacement from the restricted softmax, de-duplicated.
    Stochastic,
}

impl std::fmt::Display for ServeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ServeMode::Deterministic => "deterministic",
            ServeMode::Stochastic => "stochastic",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub temperature: f64,
    /// Candidates kept by retrieval before serving (`M`).
    pub retrieval_width: usize,
    pub serve_mode: ServeMode,
}

impl PolicyConfig {
    pub fn validate(&self, num_actions: usize) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::invalid(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.retrieval_width == 0 || self.retrieval_width > num_actions {
            return Err(Error::invalid(format!(
                "retrieval width {} must be in 1..={num_actions}",
                self.retrieval_width
            )));
        }
        Ok(())
    }
}

/// The set of at most `k` distinct actions shown to the user.
///
/// Deterministic mode returns the top `min(k, M)` actions. Stochastic mode
/// draws `k` times with replacement from the restricted softmax over the
/// top-`M` candidates and drops repeats, keeping first-draw order, so the
/// result may hold fewer than `k` actions.
pub fn serve(
    state: &UserState,
    params: &PolicyParameters,
    cfg: &PolicyConfig,
    k: usize,
    rng: &mut RngStream,
) -> Result<Vec<usize>> {
    cfg.validate(params.num_actions())?;
    if k == 0 {
        return Err(Error::invalid("serve needs k >= 1"));
    }
    let candidates = ExactRetriever.retrieve(&state.s, params, cfg.retrieval_width)?;
    match cfg.serve_mode {
        ServeMode::Deterministic => Ok(candidates.into_iter().take(k).collect()),
        ServeMode::Stochastic => {
            let probs = restricted_softmax(state, params, &candidates, cfg.temperature)?;
            sample_set(&candidates, &probs, k, rng)
        }
    }
}

/// `k` draws with replacement from `probs` over `candidates`, de-duplicated.
pub fn sample_set(candidates: &[usize], probs: &[f64], k: usize, rng: &mut RngStream) -> Result<Vec<usize>> {
    let mut picked = Vec::with_capacity(k.min(candidates.len()));
    for _ in 0..k {
        let a = candidates[numerics::sample_categorical(probs, rng)?];
        if !picked.contains(&a) {
            picked.push(a);
        }
    }
    Ok(picked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dims(n: usize, m: usize, a: usize) -> ModelDims {
        ModelDims::new(n, m, a).unwrap()
    }

    fn random_params(seed: u64, d: ModelDims, scale: f64) -> PolicyParameters {
        PolicyParameters::random(d, scale, &mut RngStream::new(seed, 0))
    }

    #[test]
    fn zero_params_keep_zero_state() {
        let p = PolicyParameters::zeros(dims(3, 2, 4));
        let s = cfn_step(&UserState::initial(3), 1, &p).unwrap();
        assert_eq!(s.s, vec![0.0; 3]);
        assert_eq!(s.step, 1);
        for st in unroll(&[0, 3, 2, 1], &p).unwrap() {
            assert_eq!(st.s, vec![0.0; 3]);
        }
    }

    #[test]
    fn shut_update_gate_leaves_input_term() {
        let mut p = random_params(1, dims(3, 2, 4), 0.5);
        p.tensor_mut(TensorId::Uz).fill(0.0);
        p.tensor_mut(TensorId::Wz).fill(0.0);
        p.tensor_mut(TensorId::Bz).fill(-50.0);
        let prev = UserState {
            s: vec![0.7, -1.2, 0.3],
            step: 4,
        };
        let next = cfn_step(&prev, 2, &p).unwrap();
        let (_, cache) = cfn_forward(&prev.s, 2, &p).unwrap();
        for k in 0..3 {
            let expect = cache.i[k] * cache.tanh_h[k];
            assert!((next.s[k] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn scalar_cell_by_hand() {
        let mut p = PolicyParameters::zeros(dims(1, 1, 1));
        p.tensor_mut(TensorId::Wa).fill(1.0);
        p.tensor_mut(TensorId::U).fill(1.0);
        let s = cfn_step(&UserState::initial(1), 0, &p).unwrap();
        assert!((s.s[0] - 0.5 * 1f64.tanh()).abs() < 1e-15);
        assert!((s.s[0] - 0.380_797).abs() < 1e-6);
    }

    #[test]
    fn cfn_rejects_bad_action() {
        let p = PolicyParameters::zeros(dims(2, 2, 3));
        assert!(matches!(
            cfn_step(&UserState::initial(2), 3, &p),
            Err(Error::InvalidArgument(_))
        ));
        assert!(unroll(&[], &p).is_err());
        assert!(unroll(&[0, 5], &p).is_err());
    }

    #[test]
    fn unroll_matches_repeated_steps() {
        let p = random_params(11, dims(4, 3, 9), 0.8);
        let states = unroll(&[2, 7, 1], &p).unwrap();
        let mut s = UserState::initial(4);
        for (k, &a) in [2usize, 7, 1].iter().enumerate() {
            s = cfn_step(&s, a, &p).unwrap();
            assert_eq!(states[k], s);
        }
        let one = unroll(&[5], &p).unwrap();
        assert_eq!(one[0], cfn_step(&UserState::initial(4), 5, &p).unwrap());
    }

    #[test]
    fn policy_probs_examples() {
        let p = random_params(2, dims(3, 2, 5), 0.5);
        let probs = policy_probs(&UserState::initial(3), &p, 1.0).unwrap();
        assert!(probs.iter().all(|&x| (x - 0.2).abs() < 1e-15));

        let mut two = PolicyParameters::zeros(dims(1, 1, 2));
        two.tensor_mut(TensorId::V).set(0, 0, 2f64.ln());
        let s = UserState { s: vec![1.0], step: 1 };
        let probs = policy_probs(&s, &two, 1.0).unwrap();
        assert!((probs[0] - 2.0 / 3.0).abs() < 1e-15);

        let cold = policy_probs(&s, &two, 0.01).unwrap();
        assert!(cold[0] > 0.999);
    }

    #[test]
    fn sampled_softmax_exhaustive_equals_full() {
        let p = random_params(3, dims(4, 3, 7), 1.0);
        let s = unroll(&[1, 4, 6], &p).unwrap().pop().unwrap();
        let full = policy_logits(&s.s, &p).unwrap();
        for target in 0..7 {
            let negatives: Vec<usize> = (0..7).filter(|&a| a != target).collect();
            let sl = sampled_softmax_logits(&s, target, &negatives, &p).unwrap();
            assert!(sl.corrections.iter().all(|&c| c == 0.0));
            let full_loss = numerics::log_sum_exp(&full).unwrap() - full[target];
            assert!((sl.loss().unwrap() - full_loss).abs() < 1e-12);
        }
    }

    #[test]
    fn sampled_softmax_single_negative_flat_logits() {
        // Raw logits are equal, so the uncorrected two-way loss is ln 2; the
        // correction ln(|A|-1) turns it into ln(1 + (|A|-1)) = ln |A|.
        let p = PolicyParameters::zeros(dims(2, 2, 8));
        let s = UserState { s: vec![0.3, -0.1], step: 1 };
        let sl = sampled_softmax_logits(&s, 2, &[5], &p).unwrap();
        let uncorrected = numerics::log_sum_exp(&sl.logits).unwrap() - sl.logits[0];
        assert!((uncorrected - 2f64.ln()).abs() < 1e-15);
        assert!((sl.corrections[1] - 7f64.ln()).abs() < 1e-15);
        assert!((sl.loss().unwrap() - 8f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn sampled_softmax_rejects_overlap() {
        let p = PolicyParameters::zeros(dims(2, 2, 5));
        let s = UserState::initial(2);
        assert!(sampled_softmax_logits(&s, 1, &[0, 1], &p).is_err());
        assert!(sampled_softmax_logits(&s, 1, &[0, 0], &p).is_err());
    }

    #[test]
    fn retrieval_tie_break_and_full_sort() {
        let p = random_params(4, dims(3, 2, 6), 1.0);
        let zero = UserState::initial(3);
        assert_eq!(topk_retrieve(&zero, &p, 4).unwrap(), vec![0, 1, 2, 3]);
        let s = UserState { s: vec![0.4, -0.9, 0.2], step: 1 };
        let logits = policy_logits(&s.s, &p).unwrap();
        let all = topk_retrieve(&s, &p, 6).unwrap();
        for w in all.windows(2) {
            assert!(logits[w[0]] >= logits[w[1]]);
        }
        assert!(topk_retrieve(&s, &p, 0).is_err());
        assert!(topk_retrieve(&s, &p, 7).is_err());
    }

    #[test]
    fn retrieval_matches_brute_force() {
        let p = random_params(5, dims(4, 3, 12), 1.0);
        let s = unroll(&[3, 1, 8, 8], &p).unwrap().pop().unwrap();
        let logits = policy_logits(&s.s, &p).unwrap();
        // Brute force: repeatedly take the best remaining action.
        let mut remaining: Vec<usize> = (0..12).collect();
        let mut oracle = Vec::new();
        for _ in 0..5 {
            let (pos, _) = remaining
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (pos, &a)| {
                    if logits[a] > best.1 { (pos, logits[a]) } else { best }
                });
            oracle.push(remaining.remove(pos));
        }
        assert_eq!(topk_retrieve(&s, &p, 5).unwrap(), oracle);
    }

    #[test]
    fn restricted_softmax_cases() {
        let p = random_params(6, dims(3, 2, 6), 1.0);
        let s = UserState { s: vec![0.5, 0.1, -0.4], step: 2 };
        let all: Vec<usize> = (0..6).collect();
        let full = policy_probs(&s, &p, 1.3).unwrap();
        let restricted = restricted_softmax(&s, &p, &all, 1.3).unwrap();
        for (a, b) in full.iter().zip(&restricted) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(restricted_softmax(&s, &p, &[4], 1.0).unwrap(), vec![1.0]);
        assert!(restricted_softmax(&s, &p, &[1, 1], 1.0).is_err());
        assert!(restricted_softmax(&s, &p, &[], 1.0).is_err());
    }

    #[test]
    fn restricted_softmax_tracks_full_when_mass_is_covered() {
        let mut logits = vec![0.0; 40];
        for (a, l) in logits.iter_mut().enumerate().take(5) {
            *l = 12.0 - a as f64;
        }
        let p = PolicyParameters::fixed_preference(&logits).unwrap();
        let s = unroll(&[0], &p).unwrap().pop().unwrap();
        let full = policy_probs(&s, &p, 1.0).unwrap();
        let top = topk_retrieve(&s, &p, 5).unwrap();
        let covered: f64 = top.iter().map(|&a| full[a]).sum();
        assert!(covered >= 0.999);
        let restricted = restricted_softmax(&s, &p, &top, 1.0).unwrap();
        for (k, &a) in top.iter().enumerate() {
            let renorm = full[a] / covered;
            assert!((restricted[k] - renorm).abs() / renorm < 0.002);
        }
    }

    #[test]
    fn serve_modes() {
        let p = random_params(7, dims(3, 2, 8), 1.0);
        let s = UserState { s: vec![0.9, -0.2, 0.4], step: 1 };
        let det = PolicyConfig {
            temperature: 1.0,
            retrieval_width: 5,
            serve_mode: ServeMode::Deterministic,
        };
        let a = serve(&s, &p, &det, 3, &mut RngStream::new(1, 0)).unwrap();
        let b = serve(&s, &p, &det, 3, &mut RngStream::new(99, 4)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, topk_retrieve(&s, &p, 3).unwrap());

        let mut logits = vec![-1000.0; 6];
        logits[3] = 0.0;
        let sure = PolicyParameters::fixed_preference(&logits).unwrap();
        let s1 = unroll(&[0], &sure).unwrap().pop().unwrap();
        let stoch = PolicyConfig {
            serve_mode: ServeMode::Stochastic,
            retrieval_width: 6,
            temperature: 1.0,
        };
        let mut rng = RngStream::new(3, 0);
        for _ in 0..50 {
            assert_eq!(serve(&s1, &sure, &stoch, 5, &mut rng).unwrap(), vec![3]);
        }
    }

    #[test]
    fn stochastic_inclusion_matches_alpha() {
        // Two actions with π = 0.5 each: α = 1 - 0.5² = 0.75 for K = 2.
        let p = PolicyParameters::fixed_preference(&[0.0, 0.0]).unwrap();
        let s = unroll(&[0], &p).unwrap().pop().unwrap();
        let cfg = PolicyConfig {
            temperature: 1.0,
            retrieval_width: 2,
            serve_mode: ServeMode::Stochastic,
        };
        let trials = 100_000;
        let mut rng = RngStream::new(8, 0);
        let hits = (0..trials)
            .filter(|_| serve(&s, &p, &cfg, 2, &mut rng).unwrap().contains(&0))
            .count();
        let freq = hits as f64 / trials as f64;
        let sigma = (0.75f64 * 0.25 / trials as f64).sqrt();
        assert!((freq - 0.75).abs() < 3.0 * sigma, "freq {freq}");
    }

    #[test]
    fn fixed_preference_reproduces_logits() {
        let logits = [0.3, -1.0, 2.0, 0.0];
        let p = PolicyParameters::fixed_preference(&logits).unwrap();
        for s in unroll(&[0, 2, 1, 3], &p).unwrap() {
            let l = policy_logits(&s.s, &p).unwrap();
            for (a, b) in l.iter().zip(&logits) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn cfn_state_stays_bounded(seed in any::<u64>(), scale in 0.1f64..10.0) {
            let d = dims(5, 4, 7);
            let p = random_params(seed, d, scale);
            let mut rng = RngStream::new(seed, 1);
            let actions: Vec<usize> = (0..100).map(|_| rng.below(7)).collect();
            for st in unroll(&actions, &p).unwrap() {
                prop_assert!(st.s.iter().all(|x| x.abs() < 2.0));
            }
        }

        #[test]
        fn retrieval_prefixes_nest(seed in any::<u64>(), m in 1usize..10, extra in 0usize..5) {
            let p = random_params(seed, dims(3, 2, 14), 1.0);
            let s = unroll(&[seed as usize % 14, 3], &p).unwrap().pop().unwrap();
            let small = topk_retrieve(&s, &p, m).unwrap();
            let big = topk_retrieve(&s, &p, (m + extra).min(14)).unwrap();
            prop_assert_eq!(&big[..m], &small[..]);
        }

        #[test]
        fn deterministic_serve_ignores_temperature(seed in any::<u64>(), t in 0.01f64..50.0) {
            let p = random_params(seed, dims(3, 2, 9), 1.0);
            let s = unroll(&[1, 5], &p).unwrap().pop().unwrap();
            let base = PolicyConfig { temperature: 1.0, retrieval_width: 6, serve_mode: ServeMode::Deterministic };
            let hot = PolicyConfig { temperature: t, ..base };
            let mut rng = RngStream::new(seed, 2);
            prop_assert_eq!(
                serve(&s, &p, &base, 4, &mut rng).unwrap(),
                serve(&s, &p, &hot, 4, &mut rng).unwrap()
            );
        }
    }

    #[test]
    fn cold_stochastic_serve_agrees_with_deterministic() {
        // Instances whose top two logits nearly tie are skipped: at T = 0.01
        // a gap of 0.05 already leaves the runner-up with mass below e^-5.
        let (mut agree, mut total, mut seed) = (0usize, 0usize, 0u64);
        while total < 10_000 {
            seed += 1;
            let p = random_params(seed, dims(3, 2, 8), 2.0);
            let s = unroll(&[1, 2, 3], &p).unwrap().pop().unwrap();
            let mut logits = policy_logits(&s.s, &p).unwrap();
            logits.sort_by(|a, b| b.total_cmp(a));
            if logits[0] - logits[1] < 0.05 {
                continue;
            }
            let det = PolicyConfig { temperature: 0.01, retrieval_width: 8, serve_mode: ServeMode::Deterministic };
            let sto = PolicyConfig { serve_mode: ServeMode::Stochastic, ..det };
            let mut rng = RngStream::new(seed, 9);
            let d = serve(&s, &p, &det, 1, &mut rng).unwrap();
            for _ in 0..50 {
                agree += usize::from(serve(&s, &p, &sto, 1, &mut rng).unwrap() == d);
                total += 1;
            }
        }
        assert!(agree as f64 / total as f64 > 0.99, "agree {agree}/{total}");
    }

}
