//! The policy-iteration loop.
//!
//! Iteration 0 collects data with the initial policy, freezes the state
//! normalizer, fits the value function and fills the free expert slots; it
//! then runs a full update. Odd iterations update `(c, M, Sigma)`. Even
//! iterations first search the center list, compress it, and then update
//! `(M, Sigma)` for the new centers, or all parameters when the list did
//! not change.

use moie_core::envs::{evaluate_mean_policy, make_env, rollout, Environment};
use moie_core::gae::{compute_gae, normalize_advantages};
use moie_core::policy::MoiePolicy;
use moie_core::projection::UpdateConstraints;
use moie_core::search::{add_clusters, compress_policy, swap_clusters};
use moie_core::types::{substream_rng, Rng, StateNormalizer, TrajectoryDataset};
use moie_core::update::{update_full_policy, update_mean_and_cov, SurrogateBatch, UpdateReport};
use moie_core::value::{fit_value, ValueFunction};
use moie_core::PolicyTag;

use crate::config::ExperimentConfig;

const STREAM_ROLLOUT: u64 = 1;
const STREAM_EVAL: u64 = 2;
const STREAM_VALUE_INIT: u64 = 3;
const STREAM_VALUE_FIT: u64 = 4;
const STREAM_SEARCH: u64 = 5;

/// Which parameters the update of an iteration touched.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateKind {
    Full,
    MeanAndCov,
    /// The changed center list alone broke the KL bound; the policy was kept.
    Rejected,
    Centers,
}

impl UpdateKind {
    pub fn as_str(self) -> &'static str {
        match self {
            UpdateKind::Full => "full",
            UpdateKind::MeanAndCov => "mean_cov",
            UpdateKind::Rejected => "rejected",
            UpdateKind::Centers => "centers",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub eval_mean: f64,
    pub eval_returns: Vec<f64>,
    /// Mean undiscounted return of the training episodes.
    pub train_return: f64,
    /// Closed-form expected KL of the new policy to the data-collecting one.
    pub expected_kl: f64,
    /// Largest expected KL over all projected gradient iterates.
    pub max_step_kl: f64,
    pub entropy: f64,
    pub beta: f64,
    pub epsilon: f64,
    pub update: UpdateKind,
    /// Whether a center search ran this iteration.
    pub searched: bool,
    pub swapped: usize,
    pub objective_before: f64,
    pub objective_after: f64,
    /// Expected KL to the data-collecting policy after the accepted swaps.
    pub swap_kl: f64,
    pub compress_removed: usize,
    pub compress_kl: f64,
    pub active_before: usize,
    pub active: usize,
    pub value_mse: f64,
    pub surrogate_gain: f64,
}

impl IterationRecord {
    pub const SCHEMA: &'static str = "moie-metrics v1";

    pub fn columns() -> &'static [&'static str] {
        &[
            "iteration",
            "eval_mean",
            "eval_returns",
            "train_return",
            "expected_kl",
            "max_step_kl",
            "entropy",
            "beta",
            "epsilon",
            "update",
            "searched",
            "swapped",
            "objective_before",
            "objective_after",
            "swap_kl",
            "compress_removed",
            "compress_kl",
            "active_before",
            "active",
            "value_mse",
            "surrogate_gain",
        ]
    }

    pub fn tsv_row(&self) -> String {
        let returns = self.eval_returns.iter().map(|r| format!("{r:?}")).collect::<Vec<_>>().join(",");
        [
            self.iteration.to_string(),
            format!("{:?}", self.eval_mean),
            returns,
            format!("{:?}", self.train_return),
            format!("{:?}", self.expected_kl),
            format!("{:?}", self.max_step_kl),
            format!("{:?}", self.entropy),
            format!("{:?}", self.beta),
            format!("{:?}", self.epsilon),
            self.update.as_str().to_string(),
            (self.searched as u8).to_string(),
            self.swapped.to_string(),
            format!("{:?}", self.objective_before),
            format!("{:?}", self.objective_after),
            format!("{:?}", self.swap_kl),
            self.compress_removed.to_string(),
            format!("{:?}", self.compress_kl),
            self.active_before.to_string(),
            self.active.to_string(),
            format!("{:?}", self.value_mse),
            format!("{:?}", self.surrogate_gain),
        ]
        .join("\t")
    }
}

/// The header lines of a metrics file.
pub fn metrics_header() -> String {
    format!("# {}\n{}\n", IterationRecord::SCHEMA, IterationRecord::columns().join("\t"))
}

pub fn metrics_tsv(records: &[IterationRecord]) -> String {
    let mut out = metrics_header();
    for r in records {
        out.push_str(&r.tsv_row());
        out.push('\n');
    }
    out
}

#[derive(Debug, thiserror::Error)]
#[error("iteration {iteration}: {source}")]
pub struct RunError {
    pub iteration: usize,
    #[source]
    pub source: moie_core::Error,
    /// Policy in effect when the error happened.
    pub policy: Option<Box<MoiePolicy>>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: Vec<IterationRecord>,
    pub policy: MoiePolicy,
    /// Every state visited by the training rollouts, when archiving is on.
    pub visited: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub archive_states: bool,
}

fn fail(iteration: usize, policy: Option<&MoiePolicy>) -> impl FnOnce(moie_core::Error) -> RunError + '_ {
    move |source| RunError { iteration, source, policy: policy.map(|p| Box::new(p.clone())) }
}

struct Run<'a> {
    cfg: &'a ExperimentConfig,
    env: Box<dyn Environment>,
    rollout_rng: Rng,
    value_rng: Rng,
    search_rng: Rng,
    value: ValueFunction,
    episodes: usize,
    visited: Option<Vec<Vec<f64>>>,
}

/// Runs the standard algorithm, or the gradient-learned-centers variant when
/// `cfg.diffproto` is set.
pub fn run_experiment(cfg: &ExperimentConfig, opts: RunOptions) -> Result<RunOutput, RunError> {
    run_with_observer(cfg, opts, |_, _, _| {})
}

/// Runs the variant where centers are learned by gradient steps and never
/// searched or compressed. The output policy is tagged `diffproto`.
pub fn run_diffproto(cfg: &ExperimentConfig, opts: RunOptions) -> Result<RunOutput, RunError> {
    let cfg = ExperimentConfig { diffproto: true, ..cfg.clone() };
    run_experiment(&cfg, opts)
}

/// As [`run_experiment`], calling `observe` after every iteration with its
/// record, the new policy and the data the update used.
pub fn run_with_observer<F>(cfg: &ExperimentConfig, opts: RunOptions, mut observe: F) -> Result<RunOutput, RunError>
where
    F: FnMut(&IterationRecord, &MoiePolicy, &TrajectoryDataset),
{
    cfg.validate().map_err(|e| fail(0, None)(moie_core::Error::InvalidConfig(e.to_string())))?;
    let env = make_env(&cfg.env).map_err(fail(0, None))?;
    let (ds, da) = (env.dim_state(), env.dim_action());
    let horizon = env.horizon();
    let mut value_init = substream_rng(cfg.seed, STREAM_VALUE_INIT);
    let mut run = Run {
        cfg,
        value: ValueFunction::new(ds, &cfg.value_hidden, &mut value_init),
        env,
        rollout_rng: substream_rng(cfg.seed, STREAM_ROLLOUT),
        value_rng: substream_rng(cfg.seed, STREAM_VALUE_FIT),
        search_rng: substream_rng(cfg.seed, STREAM_SEARCH),
        episodes: cfg.steps_per_iteration.div_ceil(horizon),
        visited: opts.archive_states.then(Vec::new),
    };
    let schedule = cfg.entropy_schedule(da);

    // The placeholder center is replaced by the first collected state; with
    // all action rows at zero the distribution does not depend on it.
    let mut q = MoiePolicy::initial(&vec![0.0; ds], cfg.clusters, da, cfg.initial_sigma, cfg.tau, StateNormalizer::unit(ds))
        .map_err(fail(0, None))?;
    if cfg.diffproto {
        q.tag = PolicyTag::Diffproto;
    }
    let mut records = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let (policy, record, data) = run.iterate(it, &q, schedule.beta_at(it)).map_err(fail(it, Some(&q)))?;
        observe(&record, &policy, &data);
        records.push(record);
        q = policy;
    }
    Ok(RunOutput { records, policy: q, visited: run.visited })
}

impl Run<'_> {
    fn collect(&mut self, q: &MoiePolicy) -> moie_core::Result<TrajectoryDataset> {
        let data = rollout(self.env.as_mut(), q, &mut self.rollout_rng, self.episodes)?;
        if let Some(v) = self.visited.as_mut() {
            v.extend(data.transitions().map(|t| t.state.clone()));
        }
        Ok(data)
    }

    fn evaluate(&mut self, policy: &MoiePolicy) -> Vec<f64> {
        // The same start states every iteration, so curves compare policies.
        let mut rng = substream_rng(self.cfg.seed, STREAM_EVAL);
        (0..self.cfg.eval_rollouts).map(|_| evaluate_mean_policy(self.env.as_mut(), policy, &mut rng)).collect()
    }

    fn iterate(
        &mut self,
        it: usize,
        q: &MoiePolicy,
        beta: f64,
    ) -> moie_core::Result<(MoiePolicy, IterationRecord, TrajectoryDataset)> {
        let cfg = self.cfg;
        let gae_cfg = cfg.gae();
        let mut data = self.collect(q)?;
        let mut q = q.clone();
        let states = data.states();
        if it == 0 {
            let first = states[0].clone();
            for c in q.centers.iter_mut() {
                c.clone_from(&first);
            }
            q.normalizer.fit(&states)?;
            q.normalizer.freeze();
            let warm = compute_gae(&data, |_| 0.0, gae_cfg.gamma, gae_cfg.lambda)?;
            self.value.calibrate(q.normalizer.clone(), &warm.value_targets);
        }
        let value = &self.value;
        let gae = compute_gae(&data, |s| value.value(s), gae_cfg.gamma, gae_cfg.lambda)?;
        let value_mse = fit_value(&mut self.value, &states, &gae.value_targets, &gae_cfg, &mut self.value_rng)?;
        data.advantages = gae.advantages;
        data.value_targets = gae.value_targets;
        if it == 0 {
            q = add_clusters(&q, &data)?;
        }

        let advantages = normalize_advantages(&data.advantages)?;
        let batch = SurrogateBatch::from_dataset(&data, &advantages)?;
        let constraints = UpdateConstraints { epsilon: cfg.epsilon, beta };
        let optim = cfg.optim();
        let episodes = data.episodes.len().max(1) as f64;
        let train_return = data.transitions().map(|t| t.reward).sum::<f64>() / episodes;

        let mut record = IterationRecord {
            iteration: it,
            eval_mean: 0.0,
            eval_returns: Vec::new(),
            train_return,
            expected_kl: 0.0,
            max_step_kl: 0.0,
            entropy: 0.0,
            beta,
            epsilon: cfg.epsilon,
            update: UpdateKind::Full,
            searched: false,
            swapped: 0,
            objective_before: f64::NAN,
            objective_after: f64::NAN,
            swap_kl: 0.0,
            compress_removed: 0,
            compress_kl: 0.0,
            active_before: q.active_count(),
            active: 0,
            value_mse,
            surrogate_gain: 0.0,
        };

        let even = it > 0 && it % 2 == 0;
        let (policy, report): (MoiePolicy, UpdateReport) = if even && cfg.diffproto {
            let (p, r) = update_mean_and_cov(&q, &q, &batch, constraints, &optim, true)?;
            record.update = UpdateKind::Centers;
            (p, r)
        } else if even {
            record.searched = true;
            let (swapped, swap) = swap_clusters(&q, &data, cfg.epsilon, &cfg.search(), &mut self.search_rng)?;
            record.swapped = swap.swapped_centers();
            record.objective_before = swap.objective_before;
            record.objective_after = swap.objective_after;
            record.swap_kl = swap.expected_kl;
            let (compressed, compress) = compress_policy(&swapped, &q, &batch, cfg.epsilon);
            record.compress_removed = compress.removed.len();
            record.compress_kl = compress.expected_kl;
            if compressed != q {
                let (p, r) = update_mean_and_cov(&q, &compressed, &batch, constraints, &optim, false)?;
                record.update = if r.rejected { UpdateKind::Rejected } else { UpdateKind::MeanAndCov };
                (p, r)
            } else {
                update_full_policy(&q, &batch, constraints, &optim)?
            }
        } else {
            update_full_policy(&q, &batch, constraints, &optim)?
        };

        record.expected_kl = report.expected_kl;
        record.max_step_kl = report.max_step_kl;
        record.entropy = report.entropy;
        record.surrogate_gain = report.surrogate_end - report.surrogate_start;
        record.active = policy.active_count();
        record.eval_returns = self.evaluate(&policy);
        record.eval_mean = record.eval_returns.iter().sum::<f64>() / record.eval_returns.len() as f64;
        Ok((policy, record, data))
    }
}
