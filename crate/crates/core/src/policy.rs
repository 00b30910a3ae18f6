//! The mixture-of-interpretable-experts Gaussian policy.
//!
//! For a state `s` the policy computes RBF similarities to each prototype,
//! `phi_i(s) = exp(-tau * |n(s) - n(s_i)|^2)` in normalized coordinates,
//! scales them by the cluster weights, `w = c * phi`, and normalizes with a
//! default expert whose unnormalized membership is always one:
//! `psi = w / (|w|_1 + 1)`. The action mean is `sum_i psi_i * M_i`; the default
//! expert's action is the null vector, so far from every prototype the mean
//! falls back to zero.

use std::f64::consts::PI;

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::types::{check_dim, Rng, StateNormalizer};

pub const DEFAULT_TAU: f64 = 0.5;
pub const SIGMA_FLOOR: f64 = 1e-4;

/// Whether prototypes were selected from data or moved by gradient steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyTag {
    Standard,
    Diffproto,
}

impl PolicyTag {
    pub fn as_str(self) -> &'static str {
        match self {
            PolicyTag::Standard => "standard",
            PolicyTag::Diffproto => "diffproto",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "standard" => Some(PolicyTag::Standard),
            "diffproto" => Some(PolicyTag::Diffproto),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoiePolicy {
    /// Prototype states in raw coordinates, one per slot.
    pub centers: Vec<Vec<f64>>,
    /// Slot holds a selected prototype. Uninitialized slots hold a copy of
    /// the first state with zero weight.
    pub active: Vec<bool>,
    /// Cluster weights `c`, nonnegative.
    pub weights: Vec<f64>,
    /// Action row of each expert (K rows of dim A).
    pub actions: Vec<Vec<f64>>,
    /// Per-dimension standard deviation of the Gaussian.
    pub sigma: Vec<f64>,
    pub tau: f64,
    pub normalizer: StateNormalizer,
    pub tag: PolicyTag,
}

/// The three closed-form parts of `KL(p || q)` between diagonal Gaussians:
/// `KL = (mean + rotation + entropy) / 2`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct KlBreakdown {
    /// `|mu_p - mu_q|^2` in the metric of `Sigma_q^-1`.
    pub mean: f64,
    /// `tr(Sigma_q^-1 Sigma_p) - d`.
    pub rotation: f64,
    /// `log(|Sigma_q| / |Sigma_p|)`.
    pub entropy: f64,
}

impl KlBreakdown {
    pub fn total(&self) -> f64 {
        0.5 * (self.mean + self.rotation + self.entropy)
    }
}

impl MoiePolicy {
    /// Policy before any prototype search: `first_state` is the only active
    /// expert with weight one; all action rows are zero.
    pub fn initial(
        first_state: &[f64],
        k: usize,
        dim_action: usize,
        sigma: f64,
        tau: f64,
        normalizer: StateNormalizer,
    ) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidConfig("at least one cluster is required".into()));
        }
        check_dim(normalizer.dim(), first_state.len())?;
        let mut weights = vec![0.0; k];
        weights[0] = 1.0;
        let mut active = vec![false; k];
        active[0] = true;
        let policy = Self {
            centers: vec![first_state.to_vec(); k],
            active,
            weights,
            actions: vec![vec![0.0; dim_action]; k],
            sigma: vec![sigma.max(SIGMA_FLOOR); dim_action],
            tau,
            normalizer,
            tag: PolicyTag::Standard,
        };
        policy.validate()?;
        Ok(policy)
    }

    pub fn k(&self) -> usize {
        self.centers.len()
    }

    pub fn dim_state(&self) -> usize {
        self.normalizer.dim()
    }

    pub fn dim_action(&self) -> usize {
        self.sigma.len()
    }

    pub fn parameter_count(&self) -> usize {
        crate::types::parameter_count(self.dim_state(), self.dim_action(), self.k())
    }

    /// Experts with a strictly positive weight.
    pub fn active_count(&self) -> usize {
        self.weights.iter().filter(|&&c| c > 0.0).count()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        let (ds, da) = (self.dim_state(), self.dim_action());
        check_dim(k, self.active.len())?;
        check_dim(k, self.weights.len())?;
        check_dim(k, self.actions.len())?;
        check_dim(ds, self.normalizer.std.len())?;
        for c in &self.centers {
            check_dim(ds, c.len())?;
            if c.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("center"));
            }
        }
        for row in &self.actions {
            check_dim(da, row.len())?;
            if row.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("action row"));
            }
        }
        if self.weights.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(Error::InvalidConfig("cluster weights must be finite and nonnegative".into()));
        }
        if self.sigma.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(Error::InvalidConfig("sigma must be finite and positive".into()));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::InvalidConfig("tau must be positive".into()));
        }
        Ok(())
    }

    pub fn normalized_centers(&self) -> Vec<Vec<f64>> {
        self.centers
            .iter()
            .map(|c| {
                let mut out = vec![0.0; c.len()];
                self.normalizer.normalize_into(c, &mut out);
                out
            })
            .collect()
    }

    /// RBF similarities `phi(s)` to every slot, in `(0, 1]`.
    pub fn rbf_features(&self, s: &[f64]) -> Vec<f64> {
        features_against(&self.normalized_centers(), &self.normalizer, self.tau, s)
    }

    /// `phi(s)` for every state in `states`, one row per state.
    pub fn feature_matrix(&self, states: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let centers = self.normalized_centers();
        states
            .iter()
            .map(|s| features_against(&centers, &self.normalizer, self.tau, s))
            .collect()
    }

    pub fn memberships(&self, s: &[f64]) -> Vec<f64> {
        memberships_from_features(&self.rbf_features(s), &self.weights)
    }

    pub fn mean_action(&self, s: &[f64]) -> Vec<f64> {
        self.mean_from_memberships(&self.memberships(s))
    }

    pub fn mean_from_memberships(&self, psi: &[f64]) -> Vec<f64> {
        mix_actions(&self.actions, psi, self.dim_action())
    }

    /// Mean action at every row of a feature matrix built for this policy's
    /// centers.
    pub fn means_from_features(&self, phi: &[Vec<f64>]) -> Vec<Vec<f64>> {
        phi.iter()
            .map(|f| self.mean_from_memberships(&memberships_from_features(f, &self.weights)))
            .collect()
    }

    /// Draws `a = mu(s) + sigma * z` and returns it with its log-density.
    pub fn sample(&self, s: &[f64], rng: &mut Rng) -> (Vec<f64>, f64) {
        let mean = self.mean_action(s);
        let action: Vec<f64> = mean
            .iter()
            .zip(&self.sigma)
            .map(|(m, sd)| {
                let z: f64 = StandardNormal.sample(rng);
                m + sd * z
            })
            .collect();
        let logp = gaussian_log_density(&mean, &self.sigma, &action);
        (action, logp)
    }

    pub fn log_density(&self, s: &[f64], a: &[f64]) -> f64 {
        gaussian_log_density(&self.mean_action(s), &self.sigma, a)
    }

    /// Differential entropy of the Gaussian; independent of the state.
    pub fn entropy(&self) -> f64 {
        gaussian_entropy(&self.sigma)
    }
}

fn features_against(
    normalized_centers: &[Vec<f64>],
    normalizer: &StateNormalizer,
    tau: f64,
    s: &[f64],
) -> Vec<f64> {
    debug_assert_eq!(s.len(), normalizer.dim());
    let mut ns = vec![0.0; s.len()];
    normalizer.normalize_into(s, &mut ns);
    normalized_centers
        .iter()
        .map(|c| {
            let d2: f64 = c.iter().zip(&ns).map(|(a, b)| (a - b) * (a - b)).sum();
            (-tau * d2).exp()
        })
        .collect()
}

/// `psi = w / (|w|_1 + 1)` with `w = c * phi`.
pub fn memberships_from_features(phi: &[f64], weights: &[f64]) -> Vec<f64> {
    let w: Vec<f64> = phi.iter().zip(weights).map(|(f, c)| f * c).collect();
    let denom = w.iter().sum::<f64>() + 1.0;
    w.into_iter().map(|x| x / denom).collect()
}

/// `sum_i psi_i * rows_i`.
pub fn mix_actions(rows: &[Vec<f64>], psi: &[f64], dim_action: usize) -> Vec<f64> {
    let mut mean = vec![0.0; dim_action];
    for (row, p) in rows.iter().zip(psi) {
        if *p == 0.0 {
            continue;
        }
        for (m, a) in mean.iter_mut().zip(row) {
            *m += p * a;
        }
    }
    mean
}

pub fn gaussian_log_density(mean: &[f64], sigma: &[f64], a: &[f64]) -> f64 {
    mean.iter()
        .zip(sigma)
        .zip(a)
        .map(|((m, sd), x)| {
            let z = (x - m) / sd;
            -0.5 * z * z - sd.ln() - 0.5 * (2.0 * PI).ln()
        })
        .sum()
}

pub fn gaussian_entropy(sigma: &[f64]) -> f64 {
    sigma
        .iter()
        .map(|sd| 0.5 * (2.0 * PI * std::f64::consts::E * sd * sd).ln())
        .sum()
}

/// Closed-form `KL(N(mu_p, diag sigma_p^2) || N(mu_q, diag sigma_q^2))`.
pub fn gaussian_kl(mu_p: &[f64], sigma_p: &[f64], mu_q: &[f64], sigma_q: &[f64]) -> KlBreakdown {
    KlBreakdown {
        mean: mahalanobis_sq(mu_p, mu_q, sigma_q),
        rotation: covariance_rotation(sigma_p, sigma_q),
        entropy: covariance_entropy_change(sigma_p, sigma_q),
    }
}

/// `|x - y|^2` weighted by `1 / sigma^2`.
pub fn mahalanobis_sq(x: &[f64], y: &[f64], sigma: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .zip(sigma)
        .map(|((a, b), sd)| {
            let d = (a - b) / sd;
            d * d
        })
        .sum()
}

pub fn covariance_rotation(sigma_p: &[f64], sigma_q: &[f64]) -> f64 {
    sigma_p
        .iter()
        .zip(sigma_q)
        .map(|(p, q)| (p * p) / (q * q) - 1.0)
        .sum()
}

pub fn covariance_entropy_change(sigma_p: &[f64], sigma_q: &[f64]) -> f64 {
    sigma_p.iter().zip(sigma_q).map(|(p, q)| 2.0 * (q.ln() - p.ln())).sum()
}

/// KL between the action distributions of `p` and `q` at state `s`.
pub fn state_kl(p: &MoiePolicy, q: &MoiePolicy, s: &[f64]) -> (f64, KlBreakdown) {
    let kl = gaussian_kl(&p.mean_action(s), &p.sigma, &q.mean_action(s), &q.sigma);
    (kl.total(), kl)
}

/// State-averaged KL `E_s[KL(p(.|s) || q(.|s))]` over `states`.
pub fn expected_kl(p: &MoiePolicy, q: &MoiePolicy, states: &[Vec<f64>]) -> f64 {
    if states.is_empty() {
        return 0.0;
    }
    let pm = p.means_from_features(&p.feature_matrix(states));
    let qm = q.means_from_features(&q.feature_matrix(states));
    expected_kl_from_means(&pm, &p.sigma, &qm, &q.sigma)
}

pub fn expected_kl_from_means(
    p_means: &[Vec<f64>],
    sigma_p: &[f64],
    q_means: &[Vec<f64>],
    sigma_q: &[f64],
) -> f64 {
    if p_means.is_empty() {
        return 0.0;
    }
    let mean_term: f64 = p_means
        .iter()
        .zip(q_means)
        .map(|(a, b)| mahalanobis_sq(a, b, sigma_q))
        .sum::<f64>()
        / p_means.len() as f64;
    0.5 * (mean_term
        + covariance_rotation(sigma_p, sigma_q)
        + covariance_entropy_change(sigma_p, sigma_q))
}
