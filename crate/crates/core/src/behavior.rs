//! Estimated behavior policy `β_θ'`.
//!
//! A second softmax head reads the user state produced by the policy's CFN
//! cell and learns its own output embeddings `V'` by maximum likelihood on
//! the logged actions. States are computed from the shared cell but treated
//! as constants: training the head only ever touches `V'`, which the borrow
//! checker enforces by taking the policy parameters by shared reference.
//!
//! This two-head layout is a reconstruction from the model diagram; the
//! details of how the behavior estimate was trained in production are not
//! public.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grad::TrajectoryBatch;
use crate::numerics::{self, Mat, RngStream};
use crate::policy::{self, ModelDims, PolicyParameters, UserState, INIT_SCALE};

#[derive(Debug, Clone, PartialEq)]
pub struct BehaviorHead {
    /// Output embeddings `V'`, `n × |A|`. Temperature is fixed at 1.
    pub v: Mat,
}

impl BehaviorHead {
    pub fn zeros(dims: ModelDims) -> Self {
        BehaviorHead {
            v: Mat::zeros(dims.state_dim, dims.num_actions),
        }
    }

    pub fn init(dims: ModelDims, rng: &mut RngStream) -> Self {
        BehaviorHead {
            v: Mat::uniform(dims.state_dim, dims.num_actions, INIT_SCALE, rng),
        }
    }

    pub fn from_mat(v: Mat, dims: ModelDims) -> Result<Self> {
        if v.shape() != (dims.state_dim, dims.num_actions) {
            return Err(Error::mismatch(
                "BehaviorHead",
                format!("{}x{}", dims.state_dim, dims.num_actions),
                format!("{}x{}", v.rows(), v.cols()),
            ));
        }
        Ok(BehaviorHead { v })
    }

    fn probs_at(&self, s: &[f64]) -> Result<Vec<f64>> {
        numerics::softmax(&self.v.matvec_t(s)?, 1.0)
    }
}

/// `β̂(· | s) = softmax(V'ᵀ s)`.
pub fn behavior_probs(state: &UserState, head: &BehaviorHead) -> Result<Vec<f64>> {
    if state.s.iter().any(|x| !x.is_finite()) {
        return Err(Error::NumericalFailure {
            tensor: "s".into(),
            detail: "user state has non-finite entries".into(),
        });
    }
    head.probs_at(&state.s)
}

/// Full `β̂(·|s_t)` at every logged step, aligned with the batch.
pub fn behavior_probs_for_batch(
    batch: &TrajectoryBatch,
    params: &PolicyParameters,
    head: &BehaviorHead,
) -> Result<Vec<Vec<Vec<f64>>>> {
    batch
        .trajectories
        .par_iter()
        .map(|traj| {
            let (states, _) = policy::states_before_actions(&traj.actions(), params)?;
            states.iter().map(|s| head.probs_at(s)).collect()
        })
        .collect()
}

/// Copy of `batch` whose behavior probabilities are replaced by the head's
/// estimate of each logged action.
pub fn with_estimated_propensities(
    batch: &TrajectoryBatch,
    params: &PolicyParameters,
    head: &BehaviorHead,
) -> Result<TrajectoryBatch> {
    let probs = behavior_probs_for_batch(batch, params, head)?;
    let mut out = batch.clone();
    for (traj, p) in out.trajectories.iter_mut().zip(&probs) {
        for (e, dist) in traj.events.iter_mut().zip(p) {
            e.behavior_prob = dist[e.action];
        }
    }
    out.source = format!("{} (estimated propensities)", batch.source);
    Ok(out)
}

/// Mean negative log-likelihood of the logged actions and its gradient
/// with respect to `V'`.
fn log_loss_and_gradient(
    batch: &TrajectoryBatch,
    params: &PolicyParameters,
    head: &BehaviorHead,
    with_gradient: bool,
) -> Result<(f64, Option<Mat>)> {
    let n_events = batch.num_events();
    if n_events == 0 {
        return Err(Error::invalid("behavior training needs a non-empty batch"));
    }
    let parts = batch
        .trajectories
        .par_iter()
        .map(|traj| {
            let (states, _) = policy::states_before_actions(&traj.actions(), params)?;
            let mut loss = 0.0;
            let mut grad = with_gradient.then(|| Mat::zeros(head.v.rows(), head.v.cols()));
            for (e, s) in traj.events.iter().zip(&states) {
                let probs = head.probs_at(s)?;
                loss -= probs[e.action].ln();
                if let Some(g) = grad.as_mut() {
                    let mut dl = probs;
                    dl[e.action] -= 1.0;
                    g.add_outer(1.0, s, &dl)?;
                }
            }
            Ok((loss, grad))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = n_events as f64;
    let mut loss = 0.0;
    let mut grad = with_gradient.then(|| Mat::zeros(head.v.rows(), head.v.cols()));
    for (l, g) in &parts {
        loss += l;
        if let (Some(total), Some(g)) = (grad.as_mut(), g) {
            total.axpy(1.0 / n, g)?;
        }
    }
    Ok((loss / n, grad))
}

/// One gradient-descent step of the head's cross-entropy on `batch`.
/// Returns the mean log-loss measured before the step.
pub fn train_behavior(
    batch: &TrajectoryBatch,
    params: &PolicyParameters,
    head: &mut BehaviorHead,
    learning_rate: f64,
) -> Result<f64> {
    if batch.trajectories.is_empty() {
        return Err(Error::invalid("behavior training needs a non-empty batch"));
    }
    if !(learning_rate > 0.0) {
        return Err(Error::invalid(format!(
            "learning rate must be positive, got {learning_rate}"
        )));
    }
    let (loss, grad) = log_loss_and_gradient(batch, params, head, true)?;
    if !loss.is_finite() {
        return Err(Error::NumericalFailure {
            tensor: "V'".into(),
            detail: format!("behavior log-loss is {loss}"),
        });
    }
    let grad = grad.expect("gradient requested");
    let mut next = head.v.clone();
    next.axpy(-learning_rate, &grad)?;
    if !next.is_finite() {
        return Err(Error::NumericalFailure {
            tensor: "V'".into(),
            detail: "update produced a non-finite parameter".into(),
        });
    }
    head.v = next;
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationBucket {
    pub lower: f64,
    pub upper: f64,
    /// Number of `(event, action)` pairs whose prediction fell in the bucket.
    pub count: usize,
    pub mean_predicted: f64,
    /// Fraction of those pairs where the action was the logged one.
    pub empirical: f64,
}

/// Mean held-out log-loss plus a decile calibration table.
pub fn behavior_eval(
    head: &BehaviorHead,
    params: &PolicyParameters,
    heldout: &TrajectoryBatch,
) -> Result<(f64, Vec<CalibrationBucket>)> {
    let (loss, _) = log_loss_and_gradient(heldout, params, head, false)?;
    let probs = behavior_probs_for_batch(heldout, params, head)?;
    let mut sums = [(0usize, 0.0f64, 0usize); 10];
    for (traj, p) in heldout.trajectories.iter().zip(&probs) {
        for (e, dist) in traj.events.iter().zip(p) {
            for (a, &q) in dist.iter().enumerate() {
                let bucket = ((q * 10.0) as usize).min(9);
                let slot = &mut sums[bucket];
                slot.0 += 1;
                slot.1 += q;
                slot.2 += usize::from(a == e.action);
            }
        }
    }
    let table = sums
        .iter()
        .enumerate()
        .map(|(b, &(count, pred, hits))| CalibrationBucket {
            lower: b as f64 / 10.0,
            upper: (b + 1) as f64 / 10.0,
            count,
            mean_predicted: if count > 0 { pred / count as f64 } else { 0.0 },
            empirical: if count > 0 { hits as f64 / count as f64 } else { 0.0 },
        })
        .collect();
    Ok((loss, table))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::{LoggedEvent, Trajectory};
    use crate::policy::TensorId;

    fn batch_from_actions(seqs: Vec<Vec<usize>>) -> TrajectoryBatch {
        TrajectoryBatch::new(
            seqs.into_iter()
                .enumerate()
                .map(|(id, acts)| Trajectory {
                    id: id as u64,
                    events: acts
                        .into_iter()
                        .enumerate()
                        .map(|(step, action)| LoggedEvent {
                            step,
                            action,
                            reward: 0.0,
                            behavior_prob: 1.0,
                        })
                        .collect(),
                })
                .collect(),
            "test",
        )
    }

    #[test]
    fn probs_examples() {
        let dims = ModelDims::new(2, 2, 2).unwrap();
        let head = BehaviorHead::init(dims, &mut RngStream::new(1, 0));
        assert_eq!(behavior_probs(&UserState::initial(2), &head).unwrap(), vec![0.5, 0.5]);
        let mut v = Mat::zeros(2, 2);
        v.set(0, 0, 3f64.ln());
        let head = BehaviorHead::from_mat(v, dims).unwrap();
        let p = behavior_probs(&UserState { s: vec![1.0, 0.0], step: 1 }, &head).unwrap();
        assert!((p[0] - 0.75).abs() < 1e-15 && (p[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn uniform_head_on_uniform_data_has_log_a_loss() {
        let dims = ModelDims::new(3, 2, 10).unwrap();
        let params = PolicyParameters::random(dims, 1.0, &mut RngStream::new(2, 0));
        let head = BehaviorHead::zeros(dims);
        let mut rng = RngStream::new(2, 1);
        let seqs = (0..20).map(|_| (0..8).map(|_| rng.below(10)).collect()).collect();
        let (loss, table) = behavior_eval(&head, &params, &batch_from_actions(seqs)).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        assert_eq!(table.iter().map(|b| b.count).sum::<usize>(), 160 * 10);
    }

    #[test]
    fn training_never_touches_policy() {
        let dims = ModelDims::new(4, 3, 6).unwrap();
        let params = PolicyParameters::random(dims, 0.7, &mut RngStream::new(3, 0));
        let snapshot = params.clone();
        let mut head = BehaviorHead::init(dims, &mut RngStream::new(3, 1));
        let mut rng = RngStream::new(3, 2);
        let seqs = (0..10).map(|_| (0..6).map(|_| rng.below(6)).collect()).collect();
        let batch = batch_from_actions(seqs);
        for _ in 0..100 {
            train_behavior(&batch, &params, &mut head, 0.5).unwrap();
        }
        for (id, t) in params.tensors() {
            let bits: Vec<u64> = t.as_slice().iter().map(|x| x.to_bits()).collect();
            let before: Vec<u64> = snapshot.tensor(id).as_slice().iter().map(|x| x.to_bits()).collect();
            assert_eq!(bits, before, "{id} changed");
        }
        assert_eq!(params.tensor(TensorId::V), snapshot.tensor(TensorId::V));
    }

    #[test]
    fn deterministic_logger_is_learned() {
        let dims = ModelDims::new(4, 3, 5).unwrap();
        let params = PolicyParameters::random(dims, 1.0, &mut RngStream::new(4, 0));
        let mut head = BehaviorHead::zeros(dims);
        let batch = batch_from_actions(vec![vec![0; 10]; 20]);
        let first = train_behavior(&batch, &params, &mut head, 5.0).unwrap();
        let mut last = first;
        for _ in 0..3000 {
            last = train_behavior(&batch, &params, &mut head, 5.0).unwrap();
        }
        assert!(last < first);
        // s₀ = 0 gives every head a uniform prediction; check later states.
        for s in policy::unroll(&[0; 9], &params).unwrap() {
            assert!(behavior_probs(&s, &head).unwrap()[0] > 0.99);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let dims = ModelDims::new(3, 2, 4).unwrap();
        let params = PolicyParameters::random(dims, 1.0, &mut RngStream::new(5, 0));
        let head = BehaviorHead::init(dims, &mut RngStream::new(5, 1));
        let batch = batch_from_actions(vec![vec![1, 3, 0, 2], vec![2, 2, 1]]);
        let (_, grad) = log_loss_and_gradient(&batch, &params, &head, true).unwrap();
        let grad = grad.unwrap();
        let eps = 1e-6;
        for idx in 0..head.v.len() {
            let mut plus = head.clone();
            plus.v.as_mut_slice()[idx] += eps;
            let mut minus = head.clone();
            minus.v.as_mut_slice()[idx] -= eps;
            let lp = log_loss_and_gradient(&batch, &params, &plus, false).unwrap().0;
            let lm = log_loss_and_gradient(&batch, &params, &minus, false).unwrap().0;
            let numeric = (lp - lm) / (2.0 * eps);
            assert!((numeric - grad.as_slice()[idx]).abs() < 1e-8);
        }
    }

    #[test]
    fn empty_batch_is_rejected() {
        let dims = ModelDims::new(2, 2, 3).unwrap();
        let params = PolicyParameters::zeros(dims);
        let mut head = BehaviorHead::zeros(dims);
        let empty = TrajectoryBatch::new(vec![], "empty");
        assert!(train_behavior(&empty, &params, &mut head, 0.1).is_err());
    }
}
