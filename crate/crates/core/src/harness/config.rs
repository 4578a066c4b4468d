//! Flat TOML experiment configuration.
//!
//! Every key is optional and falls back to [`ExperimentConfig::default`].
//! Unknown keys are rejected so that typos fail loudly.
//!
//! ```toml
//! recipe = "train"
//! seed = 7
//! environment = "stateless"
//! rewards = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0]
//! behavior = "zipf"
//! zipf_exponent = 1.5
//! mode = "topk"
//! k = 2
//! log_cap = 3.0      # cap c = e^3; use `inf` to disable capping
//! steps = 500
//! ```

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::grad::{CorrectionConfig, CorrectionMode, OptimizerKind, SampledSoftmax};
use crate::numerics::RngStream;
use crate::policy::{ModelDims, PolicyConfig, PolicyParameters, ServeMode, INIT_SCALE};
use crate::sim::{BehaviorPolicy, BucketSplit, EnvironmentSpec, ExplorationConfig};
use crate::train::{BehaviorSource, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recipe {
    /// Generate data, train one model, evaluate it.
    Train,
    /// Uncorrected vs corrected nomination rank CDF.
    RankCdf,
    /// Standard vs top-K policy mass.
    MassSpreading,
    /// One run per axis value per seed.
    Sweep,
    /// 90/5/5 exploration bucket split.
    Exploration,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    Stateless,
    Sequential,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BehaviorKind {
    Uniform,
    Zipf,
    StaleModel,
    Mixture,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerName {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    K,
    Cap,
    Temperature,
    Nis,
}

impl std::fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SweepAxis::K => "k",
            SweepAxis::Cap => "log_cap",
            SweepAxis::Temperature => "temperature",
            SweepAxis::Nis => "nis",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub recipe: Recipe,
    pub seed: u64,
    /// Seeds for sweeps and the exploration recipe.
    pub seeds: Vec<u64>,

    pub environment: EnvKind,
    /// Per-action rewards of the stateless environment.
    pub rewards: Vec<f64>,
    /// Action count of the sequential environment.
    pub num_actions: usize,
    pub interest_dim: usize,
    pub drift: f64,
    pub sharpness: f64,
    pub no_click_utility: f64,
    pub episode_length: usize,
    pub env_seed: u64,

    pub behavior: BehaviorKind,
    pub zipf_exponent: f64,
    /// Checkpoint of the stale model; a random model is drawn from
    /// `env_seed` when absent.
    pub behavior_checkpoint: Option<PathBuf>,
    pub behavior_temperature: f64,
    pub stale_model_scale: f64,
    pub mixture_components: Vec<BehaviorKind>,
    pub mixture_weights: Vec<f64>,

    pub events: usize,
    /// Held-out events used as probe users.
    pub heldout_events: usize,

    pub state_dim: usize,
    pub embed_dim: usize,
    pub init_scale: f64,

    pub mode: CorrectionMode,
    pub k: usize,
    /// Natural log of the weight cap; `inf` disables capping.
    pub log_cap: f64,
    /// Self-normalise weights over the batch. Capping is applied first.
    pub nis: bool,
    pub kl_coefficient: f64,
    /// Return discount γ.
    pub discount: f64,
    pub temperature: f64,
    /// Negatives per event for sampled softmax; 0 uses the full softmax.
    pub sampled_negatives: usize,

    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerName,
    pub behavior_source: BehaviorSource,
    pub behavior_learning_rate: f64,

    pub serve_mode: ServeMode,
    /// Candidates kept by retrieval; 0 keeps every action.
    pub retrieval_width: usize,
    pub serve_k: usize,
    pub eval_rollouts: usize,

    pub sweep_axis: Option<SweepAxis>,
    pub sweep_values: Vec<f64>,

    /// Correction mode of the control model in the rank-CDF recipe.
    pub control_mode: CorrectionMode,
    /// Nominations per probe state in the rank-CDF recipe.
    pub nominations: usize,

    pub bucket_control: f64,
    pub bucket_holdout: f64,
    pub bucket_exploration: f64,
    pub exploration_temperature: f64,
    /// Steps of uncorrected training on uniform data that produce the base
    /// model of the exploration recipe.
    pub warmup_steps: usize,

    pub grad_check_epsilon: f64,
    pub grad_check_tolerance: f64,
    pub grad_check_events: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            recipe: Recipe::Train,
            seed: 0,
            seeds: vec![0, 1, 2],
            environment: EnvKind::Stateless,
            rewards: (1..=10).map(|i| i as f64 / 10.0).collect(),
            num_actions: 20,
            interest_dim: 4,
            drift: 0.3,
            sharpness: 2.0,
            no_click_utility: 4.0,
            episode_length: 10,
            env_seed: 7,
            behavior: BehaviorKind::Uniform,
            zipf_exponent: 1.0,
            behavior_checkpoint: None,
            behavior_temperature: 1.0,
            stale_model_scale: 1.0,
            mixture_components: Vec::new(),
            mixture_weights: Vec::new(),
            events: 5000,
            heldout_events: 1000,
            state_dim: 8,
            embed_dim: 8,
            init_scale: INIT_SCALE,
            mode: CorrectionMode::Standard,
            k: 2,
            log_cap: 3.0,
            nis: false,
            kl_coefficient: 0.0,
            discount: 1.0,
            temperature: 1.0,
            sampled_negatives: 0,
            steps: 500,
            batch_size: 64,
            learning_rate: 0.05,
            optimizer: OptimizerName::Adam,
            behavior_source: BehaviorSource::Logged,
            behavior_learning_rate: 0.5,
            serve_mode: ServeMode::Stochastic,
            retrieval_width: 10,
            serve_k: 2,
            eval_rollouts: 500,
            sweep_axis: None,
            sweep_values: Vec::new(),
            control_mode: CorrectionMode::None,
            nominations: 3,
            bucket_control: 0.90,
            bucket_holdout: 0.05,
            bucket_exploration: 0.05,
            exploration_temperature: 1.0,
            warmup_steps: 200,
            grad_check_epsilon: 1e-5,
            grad_check_tolerance: 1e-4,
            grad_check_events: 30,
        }
    }
}

fn cfg_err(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

fn hex16(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().take(8).map(|b| format!("{b:02x}")).collect()
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(ck) = &cfg.behavior_checkpoint {
            if ck.is_relative() {
                if let Some(dir) = path.parent() {
                    cfg.behavior_checkpoint = Some(dir.join(ck));
                }
            }
        }
        Ok(cfg)
    }

    /// Snapshot written to every run directory. The leading comment records
    /// the weight pipeline order, which is fixed rather than configurable.
    pub fn to_toml(&self) -> String {
        format!(
            "# weights: pi/beta, then cap, then NIS, then top-K multiplier\n{}",
            toml::to_string(self).expect("config serialises")
        )
    }

    /// First 16 hex digits of the SHA-256 of the TOML snapshot.
    pub fn hash(&self) -> String {
        hex16(self.to_toml().as_bytes())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        ExperimentConfig {
            seed,
            ..self.clone()
        }
    }

    pub fn env_spec(&self) -> EnvironmentSpec {
        match self.environment {
            EnvKind::Stateless => EnvironmentSpec::Stateless {
                rewards: self.rewards.clone(),
                sharpness: self.sharpness,
                no_click_utility: self.no_click_utility,
                episode_length: self.episode_length,
            },
            EnvKind::Sequential => EnvironmentSpec::Sequential {
                num_actions: self.num_actions,
                interest_dim: self.interest_dim,
                drift: self.drift,
                sharpness: self.sharpness,
                no_click_utility: self.no_click_utility,
                episode_length: self.episode_length,
                seed: self.env_seed,
            },
        }
    }

    pub fn action_count(&self) -> usize {
        self.env_spec().num_actions()
    }

    pub fn dims(&self) -> Result<ModelDims> {
        ModelDims::new(self.state_dim, self.embed_dim, self.action_count()).map_err(cfg_err)
    }

    /// Initial parameters for a run with `seed`.
    pub fn init_params(&self, seed: u64) -> Result<PolicyParameters> {
        Ok(PolicyParameters::random(
            self.dims()?,
            self.init_scale,
            &mut RngStream::named(seed, "init"),
        ))
    }

    fn stale_model(&self) -> Result<PolicyParameters> {
        match &self.behavior_checkpoint {
            Some(path) => {
                let ck = Checkpoint::load(path)
                    .map_err(|e| Error::Config(format!("behavior checkpoint {}: {e}", path.display())))?;
                Ok(ck.policy)
            }
            None => Ok(PolicyParameters::random(
                self.dims()?,
                self.stale_model_scale,
                &mut RngStream::named(self.env_seed, "stale-model"),
            )),
        }
    }

    fn single_behavior(&self, kind: BehaviorKind) -> Result<BehaviorPolicy> {
        Ok(match kind {
            BehaviorKind::Uniform => BehaviorPolicy::Uniform,
            BehaviorKind::Zipf => BehaviorPolicy::Zipf {
                exponent: self.zipf_exponent,
            },
            BehaviorKind::StaleModel => BehaviorPolicy::StaleModel {
                params: Arc::new(self.stale_model()?),
                temperature: self.behavior_temperature,
            },
            BehaviorKind::Mixture => {
                return Err(Error::Config("mixture components cannot be mixtures".into()))
            }
        })
    }

    pub fn behavior_policy(&self) -> Result<BehaviorPolicy> {
        let policy = match self.behavior {
            BehaviorKind::Mixture => {
                if self.mixture_components.len() != self.mixture_weights.len() {
                    return Err(Error::Config(format!(
                        "{} mixture components but {} weights",
                        self.mixture_components.len(),
                        self.mixture_weights.len()
                    )));
                }
                BehaviorPolicy::Mixture(
                    self.mixture_weights
                        .iter()
                        .zip(&self.mixture_components)
                        .map(|(&w, &k)| Ok((w, self.single_behavior(k)?)))
                        .collect::<Result<_>>()?,
                )
            }
            kind => self.single_behavior(kind)?,
        };
        policy.validate(self.action_count()).map_err(cfg_err)?;
        Ok(policy)
    }

    pub fn cap(&self) -> Option<f64> {
        self.log_cap.is_finite().then(|| self.log_cap.exp())
    }

    pub fn correction(&self, seed: u64) -> CorrectionConfig {
        CorrectionConfig {
            mode: self.mode,
            k: self.k,
            cap: self.cap(),
            nis: self.nis,
            kl_coefficient: self.kl_coefficient,
            discount: self.discount,
            temperature: self.temperature,
            sampled_softmax: (self.sampled_negatives > 0).then_some(SampledSoftmax {
                negatives: self.sampled_negatives,
                seed,
            }),
        }
    }

    pub fn policy_config(&self) -> PolicyConfig {
        let width = match self.retrieval_width {
            0 => self.action_count(),
            w => w,
        };
        PolicyConfig {
            temperature: self.temperature,
            retrieval_width: width,
            serve_mode: self.serve_mode,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            optimizer: match self.optimizer {
                OptimizerName::Sgd => OptimizerKind::Sgd,
                OptimizerName::Adam => OptimizerKind::adam(),
            },
            correction: self.correction(seed),
            behavior_source: self.behavior_source,
            behavior_learning_rate: self.behavior_learning_rate,
            seed,
        }
    }

    pub fn exploration_config(&self, seed: u64) -> ExplorationConfig {
        let mut train = self.train_config(seed);
        train.correction.mode = CorrectionMode::None;
        ExplorationConfig {
            events: self.events,
            split: BucketSplit {
                control: self.bucket_control,
                holdout: self.bucket_holdout,
                exploration: self.bucket_exploration,
            },
            exploration_temperature: self.exploration_temperature,
            train,
            eval_policy: self.policy_config(),
            eval_k: self.serve_k,
            eval_rollouts: self.eval_rollouts,
        }
    }

    /// Copy of the config with one sweep axis set to `value`.
    pub fn with_axis(&self, axis: SweepAxis, value: f64) -> Result<Self> {
        let mut cfg = self.clone();
        match axis {
            SweepAxis::K => {
                if !(value >= 1.0) || value.fract() != 0.0 {
                    return Err(Error::Config(format!("K sweep value {value} is not a positive integer")));
                }
                cfg.k = value as usize;
                cfg.serve_k = value as usize;
            }
            SweepAxis::Cap => cfg.log_cap = value,
            SweepAxis::Temperature => cfg.temperature = value,
            SweepAxis::Nis => cfg.nis = value != 0.0,
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.env_spec().validate()?;
        self.dims()?;
        if self.events == 0 {
            return Err(Error::Config("events must be at least 1".into()));
        }
        if self.log_cap.is_nan() {
            return Err(Error::Config("log_cap must be a number or inf".into()));
        }
        if self.init_scale < 0.0 || !self.init_scale.is_finite() {
            return Err(Error::Config("init_scale must be finite and non-negative".into()));
        }
        if self.serve_k == 0 {
            return Err(Error::Config("serve_k must be at least 1".into()));
        }
        if self.eval_rollouts == 0 {
            return Err(Error::Config("eval_rollouts must be at least 1".into()));
        }
        if self.nominations == 0 || self.nominations > self.action_count() {
            return Err(Error::Config(format!(
                "nominations must be in 1..={}",
                self.action_count()
            )));
        }
        if self.sampled_negatives >= self.action_count() {
            return Err(Error::Config("sampled_negatives must be below the action count".into()));
        }
        if self.behavior == BehaviorKind::Mixture && self.mixture_components.is_empty() {
            return Err(Error::Config("mixture behavior needs mixture_components".into()));
        }
        if !(1e-7..=1e-3).contains(&self.grad_check_epsilon) {
            return Err(Error::Config("grad_check_epsilon must lie in [1e-7, 1e-3]".into()));
        }
        self.train_config(self.seed).validate()?;
        self.policy_config().validate(self.action_count()).map_err(cfg_err)?;
        if self.recipe == Recipe::Sweep {
            if self.sweep_axis.is_none() {
                return Err(Error::Config("sweep recipe needs sweep_axis".into()));
            }
            if self.sweep_values.is_empty() {
                return Err(Error::Config("sweep_values is empty".into()));
            }
        }
        if matches!(self.recipe, Recipe::Sweep | Recipe::Exploration) && self.seeds.is_empty() {
            return Err(Error::Config("seeds is empty".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn empty_file_is_the_default() {
        assert_eq!(ExperimentConfig::from_toml("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        assert!(matches!(ExperimentConfig::from_toml("stepz = 3"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::from_toml("k = 0"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::from_toml("mode = \"fancy\""), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::from_toml("events = 0"), Err(Error::Config(_))));
        assert!(matches!(
            ExperimentConfig::from_toml("recipe = \"sweep\"\nsweep_axis = \"k\""),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn infinite_log_cap_disables_capping() {
        let cfg = ExperimentConfig::from_toml("log_cap = inf").unwrap();
        assert_eq!(cfg.cap(), None);
        let cfg = ExperimentConfig::from_toml("log_cap = 5.0").unwrap();
        assert_eq!(cfg.cap(), Some(5f64.exp()));
        let back = ExperimentConfig::from_toml(&ExperimentConfig::from_toml("log_cap = inf").unwrap().to_toml()).unwrap();
        assert_eq!(back.cap(), None);
    }

    #[test]
    fn axis_application() {
        // K counts draws, so it may exceed the retrieval width.
        let cfg = ExperimentConfig::default();
        let k = cfg.with_axis(SweepAxis::K, 16.0).unwrap();
        assert_eq!((k.k, k.serve_k), (16, 16));
        assert!(cfg.with_axis(SweepAxis::K, 1.5).is_err());
        assert!(cfg.with_axis(SweepAxis::Nis, 1.0).unwrap().nis);
    }

    #[test]
    fn mixture_behavior() {
        let cfg = ExperimentConfig::from_toml(
            "behavior = \"mixture\"\nmixture_components = [\"uniform\", \"zipf\"]\nmixture_weights = [0.25, 0.75]",
        )
        .unwrap();
        assert!(matches!(cfg.behavior_policy().unwrap(), BehaviorPolicy::Mixture(p) if p.len() == 2));
        let bad = ExperimentConfig::from_toml(
            "behavior = \"mixture\"\nmixture_components = [\"uniform\"]\nmixture_weights = [0.5]",
        )
        .unwrap();
        assert!(matches!(bad.behavior_policy(), Err(Error::Config(_))));
    }
}
