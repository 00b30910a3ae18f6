//! Differentiable update of the cluster weights, action matrix and
//! covariance: projected gradient ascent on the importance-weighted
//! advantage surrogate `L(pi) = E[pi(a|s) / q(a|s) * A(s, a)]`.
//!
//! After every gradient step the parameters are projected back onto the
//! trust region, so each iterate satisfies the KL and entropy constraints.
//! The interpolation coefficients of the projection are not differentiated
//! through.

use crate::error::{Error, Result};
use crate::policy::{
    expected_kl_from_means, gaussian_log_density, mahalanobis_sq, memberships_from_features, MoiePolicy, SIGMA_FLOOR,
};
use crate::projection::{kl_projection_linear_gaussian, moe_projection, KlReference, ProjectionReport, UpdateConstraints};
use crate::types::TrajectoryDataset;

/// Log importance ratios are clamped to this magnitude.
pub const LOG_RATIO_CLIP: f64 = 20.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateBatch {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub behavior_logp: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl SurrogateBatch {
    /// Batch over every transition of `data`, paired with `advantages` in
    /// dataset order.
    pub fn from_dataset(data: &TrajectoryDataset, advantages: &[f64]) -> Result<Self> {
        crate::types::check_dim(data.len(), advantages.len())?;
        let mut batch = Self { states: Vec::new(), actions: Vec::new(), behavior_logp: Vec::new(), advantages: advantages.to_vec() };
        for t in data.transitions() {
            batch.states.push(t.state.clone());
            batch.actions.push(t.action.clone());
            batch.behavior_logp.push(t.behavior_logp);
        }
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    fn validate(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let n = self.len();
        crate::types::check_dim(n, self.actions.len())?;
        crate::types::check_dim(n, self.behavior_logp.len())?;
        crate::types::check_dim(n, self.advantages.len())?;
        if self.behavior_logp.iter().any(|l| !l.is_finite()) {
            return Err(Error::NonFinite("behavior log-density"));
        }
        Ok(())
    }
}

/// Gradient of the surrogate with respect to every policy parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyGradient {
    pub weights: Vec<f64>,
    pub actions: Vec<Vec<f64>>,
    /// With respect to the standard deviations.
    pub sigma: Vec<f64>,
    /// With respect to the raw center coordinates.
    pub centers: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Surrogate {
    pub value: f64,
    /// Samples whose log ratio hit the clip.
    pub clipped: usize,
    pub gradient: PolicyGradient,
}

fn log_ratio(policy_logp: f64, behavior_logp: f64) -> (f64, bool) {
    let lr = policy_logp - behavior_logp;
    if lr > LOG_RATIO_CLIP {
        (LOG_RATIO_CLIP, true)
    } else if lr < -LOG_RATIO_CLIP {
        (-LOG_RATIO_CLIP, true)
    } else {
        (lr, false)
    }
}

/// Surrogate value only.
pub fn surrogate_value(policy: &MoiePolicy, batch: &SurrogateBatch) -> Result<f64> {
    batch.validate()?;
    let phi = policy.feature_matrix(&batch.states);
    Ok(surrogate_value_from_features(policy, &phi, batch))
}

pub(crate) fn surrogate_value_from_features(policy: &MoiePolicy, phi: &[Vec<f64>], batch: &SurrogateBatch) -> f64 {
    let means = policy.means_from_features(phi);
    let n = batch.len() as f64;
    means
        .iter()
        .zip(&batch.actions)
        .zip(&batch.behavior_logp)
        .zip(&batch.advantages)
        .map(|(((mu, a), lq), adv)| {
            let (lr, _) = log_ratio(gaussian_log_density(mu, &policy.sigma, a), *lq);
            lr.exp() * adv
        })
        .sum::<f64>()
        / n
}

/// Surrogate value and its analytic gradient through the memberships, the
/// mean and the Gaussian density. Clipped samples contribute no gradient.
pub fn surrogate_loss(policy: &MoiePolicy, batch: &SurrogateBatch) -> Result<Surrogate> {
    batch.validate()?;
    let k = policy.k();
    let da = policy.dim_action();
    let ds = policy.dim_state();
    let n = batch.len() as f64;
    let centers = policy.normalized_centers();
    let mut grad = PolicyGradient {
        weights: vec![0.0; k],
        actions: vec![vec![0.0; da]; k],
        sigma: vec![0.0; da],
        centers: vec![vec![0.0; ds]; k],
    };
    let mut value = 0.0;
    let mut clipped = 0;
    let mut ns = vec![0.0; ds];
    for (((s, a), lq), adv) in batch.states.iter().zip(&batch.actions).zip(&batch.behavior_logp).zip(&batch.advantages) {
        policy.normalizer.normalize_into(s, &mut ns);
        let phi: Vec<f64> = centers
            .iter()
            .map(|c| (-policy.tau * c.iter().zip(&ns).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()).exp())
            .collect();
        let psi = memberships_from_features(&phi, &policy.weights);
        let mu = policy.mean_from_memberships(&psi);
        let (lr, hit) = log_ratio(gaussian_log_density(&mu, &policy.sigma, a), *lq);
        let ratio = lr.exp();
        value += ratio * adv / n;
        if hit {
            clipped += 1;
            continue;
        }
        // d L / d log pi for this sample
        let g = ratio * adv / n;
        if g == 0.0 {
            continue;
        }
        let mut g_mu = vec![0.0; da];
        for j in 0..da {
            let sd = policy.sigma[j];
            let diff = a[j] - mu[j];
            g_mu[j] = g * diff / (sd * sd);
            grad.sigma[j] += g * (diff * diff / (sd * sd * sd) - 1.0 / sd);
        }
        let mut g_psi = vec![0.0; k];
        for i in 0..k {
            let row = &policy.actions[i];
            for j in 0..da {
                grad.actions[i][j] += g_mu[j] * psi[i];
                g_psi[i] += g_mu[j] * row[j];
            }
        }
        // psi = w / (S + 1): dL/dw_k = (g_psi_k - g_psi . psi) / (S + 1)
        let w_sum: f64 = phi.iter().zip(&policy.weights).map(|(p, c)| p * c).sum();
        let z = w_sum + 1.0;
        let dot: f64 = g_psi.iter().zip(&psi).map(|(a, b)| a * b).sum();
        for i in 0..k {
            let g_w = (g_psi[i] - dot) / z;
            grad.weights[i] += g_w * phi[i];
            // dphi_i / d center_i = 2 tau phi_i (n(s) - n(c_i)) / std
            let g_phi = g_w * policy.weights[i];
            if g_phi != 0.0 {
                let scale = 2.0 * policy.tau * phi[i] * g_phi;
                for d in 0..ds {
                    grad.centers[i][d] += scale * (ns[d] - centers[i][d]) / policy.normalizer.std[d];
                }
            }
        }
    }
    Ok(Surrogate { value, clipped, gradient: grad })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Optimizer {
    /// `theta += step_size * gradient`.
    GradientAscent,
    /// Adam moments per parameter group, kept across the epochs of one update.
    Adam,
}

impl Optimizer {
    pub fn as_str(self) -> &'static str {
        match self {
            Optimizer::GradientAscent => "gradient",
            Optimizer::Adam => "adam",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "gradient" => Some(Optimizer::GradientAscent),
            "adam" => Some(Optimizer::Adam),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub optimizer: Optimizer,
    pub step_size: f64,
    pub epochs: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { optimizer: Optimizer::Adam, step_size: 1e-2, epochs: 30 }
    }
}

const GROUP_WEIGHTS: usize = 0;
const GROUP_ACTIONS: usize = 1;
const GROUP_SIGMA: usize = 2;
const GROUP_CENTERS: usize = 3;

/// Turns gradients into parameter increments.
struct Stepper {
    optimizer: Optimizer,
    lr: f64,
    t: i32,
    moments: [(Vec<f64>, Vec<f64>); 4],
}

impl Stepper {
    fn new(cfg: &OptimConfig) -> Self {
        Self { optimizer: cfg.optimizer, lr: cfg.step_size, t: 0, moments: Default::default() }
    }

    /// Advance to the next step; call once per epoch before [`Stepper::delta`].
    fn tick(&mut self) {
        self.t += 1;
    }

    fn delta(&mut self, group: usize, grad: &[f64]) -> Vec<f64> {
        match self.optimizer {
            Optimizer::GradientAscent => grad.iter().map(|g| self.lr * g).collect(),
            Optimizer::Adam => {
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                let (m, v) = &mut self.moments[group];
                if m.len() != grad.len() {
                    *m = vec![0.0; grad.len()];
                    *v = vec![0.0; grad.len()];
                }
                let c1 = 1.0 - B1.powi(self.t);
                let c2 = 1.0 - B2.powi(self.t);
                grad.iter()
                    .zip(m.iter_mut().zip(v.iter_mut()))
                    .map(|(g, (m, v))| {
                        *m = B1 * *m + (1.0 - B1) * g;
                        *v = B2 * *v + (1.0 - B2) * g * g;
                        self.lr * (*m / c1) / ((*v / c2).sqrt() + 1e-8)
                    })
                    .collect()
            }
        }
    }

    fn delta_rows(&mut self, group: usize, grad: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let flat: Vec<f64> = grad.iter().flatten().copied().collect();
        let d = self.delta(group, &flat);
        let width = grad.first().map_or(0, Vec::len);
        d.chunks(width.max(1)).map(<[f64]>::to_vec).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateReport {
    pub steps: usize,
    pub surrogate_start: f64,
    pub surrogate_end: f64,
    /// Largest expected KL to `q` over all projected iterates.
    pub max_step_kl: f64,
    /// Smallest entropy over all projected iterates.
    pub min_step_entropy: f64,
    pub expected_kl: f64,
    pub entropy: f64,
    pub clipped: usize,
    /// The candidate's center change alone broke the KL bound.
    pub rejected: bool,
    pub last_projection: Option<ProjectionReport>,
}

impl UpdateReport {
    fn start(surrogate: f64, kl: f64, entropy: f64) -> Self {
        Self {
            steps: 0,
            surrogate_start: surrogate,
            surrogate_end: surrogate,
            max_step_kl: kl,
            min_step_entropy: entropy,
            expected_kl: kl,
            entropy,
            clipped: 0,
            rejected: false,
            last_projection: None,
        }
    }
}

fn ascend_weights(weights: &[f64], delta: &[f64]) -> Vec<f64> {
    weights.iter().zip(delta).map(|(c, d)| (c + d).max(0.0)).collect()
}

fn ascend_rows(rows: &[Vec<f64>], delta: &[Vec<f64>], scale: f64) -> Vec<Vec<f64>> {
    rows.iter()
        .zip(delta)
        .map(|(r, d)| r.iter().zip(d).map(|(x, d)| x + scale * d).collect())
        .collect()
}

fn ascend_sigma(sigma: &[f64], delta: &[f64]) -> Vec<f64> {
    sigma.iter().zip(delta).map(|(s, d)| (s + d).max(SIGMA_FLOOR)).collect()
}

/// Gradient ascent on `(c, M, Sigma)` for a candidate sharing `q`'s centers,
/// projecting every iterate. Returns the iterate with the best surrogate,
/// which is never worse than `q` itself.
pub fn update_full_policy(
    q: &MoiePolicy,
    batch: &SurrogateBatch,
    constraints: UpdateConstraints,
    cfg: &OptimConfig,
) -> Result<(MoiePolicy, UpdateReport)> {
    batch.validate()?;
    let phi = q.feature_matrix(&batch.states);
    let q_means = q.means_from_features(&phi);
    let start = surrogate_value_from_features(q, &phi, batch);
    let mut report = UpdateReport::start(start, 0.0, q.entropy());
    let mut best = (start, q.clone());
    let mut theta = q.clone();
    let mut stepper = Stepper::new(cfg);
    for _ in 0..cfg.epochs {
        let s = surrogate_loss(&theta, batch)?;
        report.clipped = s.clipped;
        let mut raw = theta.clone();
        stepper.tick();
        raw.weights = ascend_weights(&theta.weights, &stepper.delta(GROUP_WEIGHTS, &s.gradient.weights));
        raw.actions = ascend_rows(&theta.actions, &stepper.delta_rows(GROUP_ACTIONS, &s.gradient.actions), 1.0);
        raw.sigma = ascend_sigma(&theta.sigma, &stepper.delta(GROUP_SIGMA, &s.gradient.sigma));
        let (projected, proj) = moe_projection(&raw, q, &phi, &q_means, constraints)?;
        theta = projected;
        report.steps += 1;
        report.max_step_kl = report.max_step_kl.max(proj.kl_after);
        report.min_step_entropy = report.min_step_entropy.min(proj.entropy_after);
        report.last_projection = Some(proj);
        let value = surrogate_value_from_features(&theta, &phi, batch);
        if value > best.0 {
            best = (value, theta.clone());
        }
    }
    let (value, policy) = best;
    report.surrogate_end = value;
    let means = policy.means_from_features(&phi);
    report.expected_kl = expected_kl_from_means(&means, &policy.sigma, &q_means, &q.sigma);
    report.entropy = policy.entropy();
    Ok((policy, report))
}

/// Expected KL mean part `E|M psi - mu_q|^2 / 2` induced by the features of
/// `policy` alone.
fn feature_shift(policy: &MoiePolicy, phi: &[Vec<f64>], q_means: &[Vec<f64>], sigma_q: &[f64]) -> f64 {
    let means = policy.means_from_features(phi);
    0.5 * means.iter().zip(q_means).map(|(m, mq)| mahalanobis_sq(m, mq, sigma_q)).sum::<f64>() / means.len().max(1) as f64
}

/// Gradient ascent on `(M, Sigma)` for a candidate whose centers may differ
/// from `q`'s; the cluster weights stay frozen. Each iterate is projected
/// with the candidate's own action matrix as anchor. If the center change
/// alone already exceeds the KL bound the update is rejected and `q` is
/// returned unchanged.
///
/// With `learn_centers`, centers take gradient steps as well; a center step is
/// halved until the feature change it causes stays within half the budget.
pub fn update_mean_and_cov(
    q: &MoiePolicy,
    candidate: &MoiePolicy,
    batch: &SurrogateBatch,
    constraints: UpdateConstraints,
    cfg: &OptimConfig,
    learn_centers: bool,
) -> Result<(MoiePolicy, UpdateReport)> {
    batch.validate()?;
    let q_phi = q.feature_matrix(&batch.states);
    let q_means = q.means_from_features(&q_phi);
    let q_value = surrogate_value_from_features(q, &q_phi, batch);
    let mut phi = candidate.feature_matrix(&batch.states);
    let anchor_kl = {
        let means = candidate.means_from_features(&phi);
        expected_kl_from_means(&means, &candidate.sigma, &q_means, &q.sigma)
    };
    if anchor_kl > constraints.epsilon {
        let mut report = UpdateReport::start(q_value, 0.0, q.entropy());
        report.rejected = true;
        return Ok((q.clone(), report));
    }
    let start = surrogate_value_from_features(candidate, &phi, batch);
    let mut report = UpdateReport::start(start, anchor_kl, candidate.entropy());
    let mut best = (start, candidate.clone());
    let mut anchor = candidate.clone();
    let mut theta = candidate.clone();
    let mut stepper = Stepper::new(cfg);
    let reference = KlReference { means: &q_means, sigma: &q.sigma };
    for _ in 0..cfg.epochs {
        let s = surrogate_loss(&theta, batch)?;
        report.clipped = s.clipped;
        stepper.tick();
        if learn_centers {
            let delta = stepper.delta_rows(GROUP_CENTERS, &s.gradient.centers);
            let mut step = 1.0;
            for _ in 0..30 {
                let mut moved = anchor.clone();
                moved.centers = ascend_rows(&theta.centers, &delta, step);
                let moved_phi = moved.feature_matrix(&batch.states);
                if feature_shift(&moved, &moved_phi, &q_means, &q.sigma) <= 0.5 * constraints.epsilon {
                    anchor = moved;
                    phi = moved_phi;
                    break;
                }
                step *= 0.5;
            }
        }
        let psi: Vec<Vec<f64>> = phi.iter().map(|f| memberships_from_features(f, &anchor.weights)).collect();
        let raw_actions = ascend_rows(&theta.actions, &stepper.delta_rows(GROUP_ACTIONS, &s.gradient.actions), 1.0);
        let raw_sigma = ascend_sigma(&theta.sigma, &stepper.delta(GROUP_SIGMA, &s.gradient.sigma));
        let (actions, sigma, proj) =
            kl_projection_linear_gaussian(&psi, &raw_actions, &raw_sigma, &anchor.actions, reference, constraints)?;
        theta = MoiePolicy { actions, sigma, ..anchor.clone() };
        report.steps += 1;
        report.max_step_kl = report.max_step_kl.max(proj.kl_after);
        report.min_step_entropy = report.min_step_entropy.min(proj.entropy_after);
        report.last_projection = Some(proj);
        let value = surrogate_value_from_features(&theta, &phi, batch);
        if value > best.0 {
            best = (value, theta.clone());
        }
    }
    let (value, policy) = best;
    report.surrogate_end = value;
    let p_phi = policy.feature_matrix(&batch.states);
    let means = policy.means_from_features(&p_phi);
    report.expected_kl = expected_kl_from_means(&means, &policy.sigma, &q_means, &q.sigma);
    report.entropy = policy.entropy();
    Ok((policy, report))
}
