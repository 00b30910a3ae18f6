//! Experiment configuration: a flat TOML file of typed keys, every key
//! optional.

use std::path::Path;

use moie_core::projection::EntropySchedule;
use moie_core::search::SearchConfig;
use moie_core::update::{OptimConfig, Optimizer};
use moie_core::value::GaeConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: String,
    pub clusters: usize,
    pub seed: u64,
    pub iterations: usize,
    pub steps_per_iteration: usize,
    pub eval_rollouts: usize,
    pub epsilon: f64,
    pub initial_sigma: f64,
    pub tau: f64,
    pub entropy_decrease_per_dim: f64,
    pub entropy_floor_per_dim: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub value_epochs: usize,
    pub value_minibatch: usize,
    pub value_step_size: f64,
    pub value_hidden: Vec<usize>,
    pub top_n: usize,
    pub swap_candidates: usize,
    pub rank_alpha: f64,
    pub max_swap_attempts: usize,
    pub optimizer: String,
    pub step_size: f64,
    pub epochs: usize,
    pub diffproto: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let gae = GaeConfig::default();
        let search = SearchConfig::default();
        let optim = OptimConfig::default();
        Self {
            env: "pendulum".into(),
            clusters: 10,
            seed: 0,
            iterations: 300,
            steps_per_iteration: 3000,
            eval_rollouts: 5,
            epsilon: 0.015,
            initial_sigma: 1.0,
            tau: moie_core::policy::DEFAULT_TAU,
            entropy_decrease_per_dim: 0.15,
            entropy_floor_per_dim: -5.0,
            gamma: gae.gamma,
            lambda: gae.lambda,
            value_epochs: gae.epochs,
            value_minibatch: gae.minibatch,
            value_step_size: gae.step_size,
            value_hidden: gae.hidden,
            top_n: search.top_n,
            swap_candidates: search.candidates,
            rank_alpha: search.alpha,
            max_swap_attempts: search.max_attempts,
            optimizer: optim.optimizer.as_str().into(),
            step_size: optim.step_size,
            epochs: optim.epochs,
            diffproto: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |msg: &str| Err(ConfigError::Invalid(msg.into()));
        if !moie_core::envs::ENV_IDS.contains(&self.env.as_str()) {
            return Err(ConfigError::Invalid(format!(
                "unknown env {:?}, expected one of {:?}",
                self.env,
                moie_core::envs::ENV_IDS
            )));
        }
        if self.clusters == 0 {
            return bad("clusters must be at least 1");
        }
        if self.iterations == 0 {
            return bad("iterations must be at least 1");
        }
        if self.steps_per_iteration == 0 || self.eval_rollouts == 0 {
            return bad("steps_per_iteration and eval_rollouts must be positive");
        }
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return bad("epsilon must be a nonnegative number");
        }
        if !(self.initial_sigma > 0.0) || !(self.tau > 0.0) {
            return bad("initial_sigma and tau must be positive");
        }
        if !self.entropy_decrease_per_dim.is_finite() || !self.entropy_floor_per_dim.is_finite() {
            return bad("entropy schedule must be finite");
        }
        if Optimizer::parse(&self.optimizer).is_none() {
            return bad("optimizer must be \"adam\" or \"gradient\"");
        }
        if !(self.step_size > 0.0) {
            return bad("step_size must be positive");
        }
        self.gae().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.search().validate(self.clusters).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    pub fn gae(&self) -> GaeConfig {
        GaeConfig {
            gamma: self.gamma,
            lambda: self.lambda,
            epochs: self.value_epochs,
            minibatch: self.value_minibatch,
            step_size: self.value_step_size,
            hidden: self.value_hidden.clone(),
        }
    }

    pub fn search(&self) -> SearchConfig {
        SearchConfig {
            top_n: self.top_n,
            candidates: self.swap_candidates,
            alpha: self.rank_alpha,
            max_attempts: self.max_swap_attempts,
        }
    }

    pub fn optim(&self) -> OptimConfig {
        OptimConfig {
            optimizer: Optimizer::parse(&self.optimizer).unwrap_or(Optimizer::Adam),
            step_size: self.step_size,
            epochs: self.epochs,
        }
    }

    /// Entropy floor starting at the entropy of the initial Gaussian.
    pub fn entropy_schedule(&self, dim_action: usize) -> EntropySchedule {
        let initial = moie_core::policy::gaussian_entropy(&vec![self.initial_sigma; dim_action]);
        EntropySchedule {
            initial,
            decrease_per_dim_per_100: self.entropy_decrease_per_dim,
            floor_per_dim: self.entropy_floor_per_dim,
            dim_action,
        }
    }

    /// The default configuration as a commented TOML file.
    pub fn documented(&self) -> String {
        let hidden = self.value_hidden.iter().map(|h| h.to_string()).collect::<Vec<_>>().join(", ");
        format!(
            "\
# Experiment configuration. Every key is optional; omitted keys take the
# value shown here.

# Environment: \"pendulum\" or \"pointmass\".
env = {env:?}
# Number of expert slots K.
clusters = {clusters}
# Master seed; every random stream of the run derives from it.
seed = {seed}
# Policy iterations after initialization.
iterations = {iterations}
# Environment steps collected per iteration (rounded up to whole episodes).
steps_per_iteration = {steps}
# Deterministic mean-action episodes evaluated after every update.
eval_rollouts = {eval}

# Bound on the state-averaged KL between consecutive policies.
epsilon = {epsilon:?}
# Initial standard deviation of every action dimension.
initial_sigma = {sigma:?}
# RBF temperature in normalized state coordinates.
tau = {tau:?}
# The entropy floor starts at the initial entropy and drops by this many nats
# per action dimension every 100 iterations ...
entropy_decrease_per_dim = {dec:?}
# ... down to this many nats per action dimension.
entropy_floor_per_dim = {floor:?}

# Advantage estimation and value function.
gamma = {gamma:?}
lambda = {lambda:?}
value_epochs = {vepochs}
value_minibatch = {vmb}
value_step_size = {vlr:?}
value_hidden = [{hidden}]

# Prototype search: top-N margin, proposals per round, rank bias exponent,
# and the cap on proposal rounds.
top_n = {top_n}
swap_candidates = {cands}
rank_alpha = {alpha:?}
max_swap_attempts = {attempts}

# Projected gradient ascent on the surrogate: \"adam\" or plain \"gradient\"
# steps, the step size, and the number of full-batch steps per update.
optimizer = {opt:?}
step_size = {lr:?}
epochs = {epochs}

# Learn the centers by gradient instead of selecting them from data.
diffproto = {diffproto}
",
            env = self.env,
            clusters = self.clusters,
            seed = self.seed,
            iterations = self.iterations,
            steps = self.steps_per_iteration,
            eval = self.eval_rollouts,
            epsilon = self.epsilon,
            sigma = self.initial_sigma,
            tau = self.tau,
            dec = self.entropy_decrease_per_dim,
            floor = self.entropy_floor_per_dim,
            gamma = self.gamma,
            lambda = self.lambda,
            vepochs = self.value_epochs,
            vmb = self.value_minibatch,
            vlr = self.value_step_size,
            top_n = self.top_n,
            cands = self.swap_candidates,
            alpha = self.rank_alpha,
            attempts = self.max_swap_attempts,
            opt = self.optimizer,
            lr = self.step_size,
            epochs = self.epochs,
            diffproto = self.diffproto,
        )
    }
}
