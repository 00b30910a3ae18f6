//! Closed-form projections onto the trust region
//! `E_s[KL(pi(.|s) || q(.|s))] <= epsilon`, `H(pi) >= beta`.
//!
//! Every projection interpolates the candidate parameters toward those of
//! the data-collecting policy `q`, with coefficients solved in closed form
//! from (upper bounds of) the constraint.
//!
//! Throughout, the mean-shift part of the KL at a state is
//! `m = |mu(s) - mu_q(s)|^2` in the metric of `Sigma_q^-1`, and the state
//! averages run over all states of the current dataset.

use crate::error::{Error, Result};
use crate::policy::{
    covariance_entropy_change, covariance_rotation, gaussian_entropy, mahalanobis_sq,
    memberships_from_features, mix_actions, MoiePolicy,
};

/// Slack used when comparing a closed-form KL against its bound.
const KL_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateConstraints {
    /// Bound on the state-averaged KL to the previous policy.
    pub epsilon: f64,
    /// Floor on the policy entropy, in nats.
    pub beta: f64,
}

/// Linearly decreasing entropy floor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntropySchedule {
    pub initial: f64,
    /// Nats per action dimension removed every 100 iterations.
    pub decrease_per_dim_per_100: f64,
    /// Lowest floor, in nats per action dimension.
    pub floor_per_dim: f64,
    pub dim_action: usize,
}

impl EntropySchedule {
    pub fn new(initial: f64, dim_action: usize) -> Self {
        Self { initial, decrease_per_dim_per_100: 0.15, floor_per_dim: -5.0, dim_action }
    }

    pub fn beta_at(&self, iteration: usize) -> f64 {
        let d = self.dim_action as f64;
        let decayed = self.initial - self.decrease_per_dim_per_100 * d * iteration as f64 / 100.0;
        decayed.max(self.floor_per_dim * d)
    }
}

/// Which upper bound on the mean shift fixed the cluster-weight coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightBound {
    /// The unprojected weights already fit the budget.
    NotNeeded,
    /// `m(0, eta) <= eta^2 max(|w|^2/|w_q|^2, 1) m(0, 1)`.
    Quadratic,
    /// `m(0, eta) <= eta |w|^2 / (2|w_q||w| - |w_q|^2) m(0, 1)`.
    Linear,
}

impl WeightBound {
    pub fn as_str(self) -> &'static str {
        match self {
            WeightBound::NotNeeded => "none",
            WeightBound::Quadratic => "quadratic",
            WeightBound::Linear => "linear",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionReport {
    pub eta_weights: f64,
    pub bound: WeightBound,
    /// Covariance interpolation coefficient; 1 when the step did not fire.
    pub eta_g: f64,
    pub covariance_fired: bool,
    /// Action-matrix interpolation coefficient; 1 when the step did not fire.
    pub eta_m: f64,
    pub mean_fired: bool,
    /// `(a, b, c)` of the mean-interpolation quadratic when it fired.
    pub quadratic: Option<(f64, f64, f64)>,
    pub kl_before: f64,
    pub kl_after: f64,
    pub entropy_before: f64,
    pub entropy_after: f64,
}

impl Default for ProjectionReport {
    fn default() -> Self {
        Self {
            eta_weights: 1.0,
            bound: WeightBound::NotNeeded,
            eta_g: 1.0,
            covariance_fired: false,
            eta_m: 1.0,
            mean_fired: false,
            quadratic: None,
            kl_before: 0.0,
            kl_after: 0.0,
            entropy_before: 0.0,
            entropy_after: 0.0,
        }
    }
}

/// The distribution KL is measured against: `q`'s mean at each dataset state
/// and `q`'s standard deviations.
#[derive(Debug, Clone, Copy)]
pub struct KlReference<'a> {
    pub means: &'a [Vec<f64>],
    pub sigma: &'a [f64],
}

/// Scale every variance by a common factor so the entropy reaches `beta`;
/// identity when the entropy is already high enough.
pub fn entropy_projection(sigma: &[f64], beta: f64) -> Vec<f64> {
    let h = gaussian_entropy(sigma);
    if h >= beta {
        return sigma.to_vec();
    }
    // variance factor exp(2 (beta - h) / d), i.e. std factor exp((beta - h) / d)
    let factor = ((beta - h) / sigma.len() as f64).exp();
    sigma.iter().map(|s| s * factor).collect()
}

/// Half of the rotation and entropy-change parts of `KL(N(., sigma) || N(., sigma_q))`.
fn covariance_kl(sigma: &[f64], sigma_q: &[f64]) -> f64 {
    0.5 * (covariance_rotation(sigma, sigma_q) + covariance_entropy_change(sigma, sigma_q))
}

fn interpolate_sigma(sigma: &[f64], sigma_q: &[f64], eta: f64) -> Vec<f64> {
    if eta == 0.0 {
        return sigma_q.to_vec();
    }
    sigma
        .iter()
        .zip(sigma_q)
        .map(|(s, q)| (eta * s * s + (1.0 - eta) * q * q).sqrt())
        .collect()
}

fn interpolate_rows(rows: &[Vec<f64>], anchor: &[Vec<f64>], eta: f64) -> Vec<Vec<f64>> {
    if eta == 0.0 {
        return anchor.to_vec();
    }
    rows.iter()
        .zip(anchor)
        .map(|(r, a)| r.iter().zip(a).map(|(x, y)| eta * x + (1.0 - eta) * y).collect())
        .collect()
}

/// Per-state mean-shift statistics of a linear-Gaussian candidate, split into
/// the part caused by moving the action matrix (`u = (M - M_0) psi`) and the
/// part caused by the features alone (`v = M_0 psi - mu_q`).
struct MeanShiftTerms {
    /// `E |v|^2 / 2`: KL mean part with the anchor actions.
    anchor: f64,
    /// `E |u + v|^2 / 2`: KL mean part with the candidate actions.
    candidate: f64,
    /// `E |u|^2 / 2`.
    a: f64,
    /// `E u^T Sigma_q^-1 v / 2`.
    b: f64,
}

impl MeanShiftTerms {
    fn new(psi: &[Vec<f64>], actions: &[Vec<f64>], anchor: &[Vec<f64>], reference: KlReference<'_>) -> Self {
        let da = reference.sigma.len();
        let n = psi.len().max(1) as f64;
        let (mut anc, mut cand, mut a, mut b) = (0.0, 0.0, 0.0, 0.0);
        for (p, mu_q) in psi.iter().zip(reference.means) {
            let m_cand = mix_actions(actions, p, da);
            let m_anchor = mix_actions(anchor, p, da);
            for j in 0..da {
                let inv = 1.0 / (reference.sigma[j] * reference.sigma[j]);
                let u = m_cand[j] - m_anchor[j];
                let v = m_anchor[j] - mu_q[j];
                anc += v * v * inv;
                cand += (u + v) * (u + v) * inv;
                a += u * u * inv;
                b += u * v * inv;
            }
        }
        Self { anchor: 0.5 * anc / n, candidate: 0.5 * cand / n, a: 0.5 * a / n, b: 0.5 * b / n }
    }

    /// KL mean part after `M <- eta M + (1 - eta) M_0`.
    fn at(&self, eta: f64) -> f64 {
        self.a * eta * eta + 2.0 * self.b * eta + self.anchor
    }
}

/// Projects the action matrix and covariance of a linear-Gaussian policy
/// `N(M psi(s), Sigma)` onto the trust region around `reference`.
///
/// `psi` holds the candidate's features at every dataset state and `anchor`
/// is the action matrix interpolated toward (the previous policy's). The
/// features alone must already satisfy the KL bound:
/// `E[KL(N(M_0 psi, Sigma_q) || q)] <= epsilon`.
///
/// Order: entropy projection, then covariance interpolation if the KL with
/// the anchor actions is still too large, then action interpolation if the
/// KL with the candidate actions is too large.
pub fn kl_projection_linear_gaussian(
    psi: &[Vec<f64>],
    actions: &[Vec<f64>],
    sigma: &[f64],
    anchor: &[Vec<f64>],
    reference: KlReference<'_>,
    constraints: UpdateConstraints,
) -> Result<(Vec<Vec<f64>>, Vec<f64>, ProjectionReport)> {
    let eps = constraints.epsilon;
    let sigma_q = reference.sigma;
    let shift = MeanShiftTerms::new(psi, actions, anchor, reference);
    if shift.anchor > eps + KL_SLACK {
        return Err(Error::PreconditionViolated { kl: shift.anchor, epsilon: eps });
    }
    let mut report = ProjectionReport {
        kl_before: shift.candidate + covariance_kl(sigma, sigma_q),
        entropy_before: gaussian_entropy(sigma),
        ..ProjectionReport::default()
    };

    let mut sigma = entropy_projection(sigma, constraints.beta);

    if shift.anchor + covariance_kl(&sigma, sigma_q) > eps {
        let denom = shift.candidate + covariance_kl(&sigma, sigma_q);
        let eta_g = if denom > 0.0 { ((eps - shift.anchor) / denom).clamp(0.0, 1.0) } else { 0.0 };
        sigma = interpolate_sigma(&sigma, sigma_q, eta_g);
        report.eta_g = eta_g;
        report.covariance_fired = true;
    }

    let cov = covariance_kl(&sigma, sigma_q);
    let mut actions = actions.to_vec();
    if shift.candidate + cov > eps {
        let (a, b) = (shift.a, shift.b);
        let c = shift.anchor + cov - eps;
        report.quadratic = Some((a, b, c));
        report.mean_fired = true;
        let eta_m = if a <= 0.0 {
            0.0
        } else {
            let mut disc = b * b - a * c;
            if disc < 0.0 {
                if disc < -1e-12 * (b * b).max(a * c.abs()).max(f64::MIN_POSITIVE) {
                    return Err(Error::NegativeDiscriminant(disc));
                }
                disc = 0.0;
            }
            let root = disc.sqrt();
            // (-b + root) / a, rearranged to avoid cancellation when b > 0
            let eta = if b > 0.0 { -c / (b + root) } else { (-b + root) / a };
            let mut eta = eta.clamp(0.0, 1.0);
            // guard the last few ulps
            let mut guard = 0;
            while eta > 0.0 && shift.at(eta) + cov > eps && guard < 64 {
                eta *= 1.0 - 1e-9;
                guard += 1;
            }
            if shift.at(eta) + cov > eps {
                eta = 0.0;
            }
            eta
        };
        actions = interpolate_rows(&actions, anchor, eta_m);
        report.eta_m = eta_m;
    }

    report.kl_after = MeanShiftTerms::new(psi, &actions, anchor, reference).candidate + cov;
    report.entropy_after = gaussian_entropy(&sigma);
    Ok((actions, sigma, report))
}

/// Result of projecting the cluster weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightProjection {
    pub weights: Vec<f64>,
    pub eta: f64,
    pub bound: WeightBound,
    /// `E_s[m_s(0, 1)]`: mean shift of the unprojected weights.
    pub shift_before: f64,
}

/// `max(|w|^2 / |w_q|^2, 1)`.
pub fn quadratic_bound_factor(w_norm: f64, wq_norm: f64) -> f64 {
    ((w_norm * w_norm) / (wq_norm * wq_norm)).max(1.0)
}

/// `|w|^2 / (2 |w_q| |w| - |w_q|^2)`, when the denominator is positive.
pub fn linear_bound_factor(w_norm: f64, wq_norm: f64) -> Option<f64> {
    let denom = 2.0 * wq_norm * w_norm - wq_norm * wq_norm;
    (denom > 0.0).then(|| w_norm * w_norm / denom)
}

/// Interpolates `c_eta = eta c + (1 - eta) c_q` with the largest `eta` that
/// one of the two upper bounds certifies for `E_s[m_s(0, eta)] <= budget`,
/// where `m_s(0, eta)` is the mean shift at `s` with the action matrix held
/// at `M_q`.
///
/// `phi` holds the RBF features of each dataset state; the centers must be
/// shared by `q` and the candidate. The default expert enters both norms as
/// its constant unit membership.
pub fn weight_projection(weights: &[f64], q: &MoiePolicy, phi: &[Vec<f64>], budget: f64) -> WeightProjection {
    let da = q.dim_action();
    let n = phi.len().max(1) as f64;
    let (mut shift, mut quad, mut lin) = (0.0, 0.0, 0.0);
    let mut linear_valid = true;
    for f in phi {
        let psi = memberships_from_features(f, weights);
        let psi_q = memberships_from_features(f, &q.weights);
        let m1 = mahalanobis_sq(&mix_actions(&q.actions, &psi, da), &mix_actions(&q.actions, &psi_q, da), &q.sigma);
        if m1 == 0.0 {
            continue;
        }
        let w_norm: f64 = f.iter().zip(weights).map(|(p, c)| p * c).sum::<f64>() + 1.0;
        let wq_norm: f64 = f.iter().zip(&q.weights).map(|(p, c)| p * c).sum::<f64>() + 1.0;
        shift += m1;
        quad += quadratic_bound_factor(w_norm, wq_norm) * m1;
        match linear_bound_factor(w_norm, wq_norm) {
            Some(factor) => lin += factor * m1,
            None => linear_valid = false,
        }
    }
    let (shift, quad, lin) = (shift / n, quad / n, lin / n);
    if shift <= budget {
        return WeightProjection { weights: weights.to_vec(), eta: 1.0, bound: WeightBound::NotNeeded, shift_before: shift };
    }
    let eta_quad = (budget / quad).sqrt().min(1.0);
    let eta_lin = if linear_valid && lin > 0.0 { (budget / lin).min(1.0) } else { 0.0 };
    let (eta, bound) =
        if eta_lin > eta_quad { (eta_lin, WeightBound::Linear) } else { (eta_quad, WeightBound::Quadratic) };
    let projected = if eta == 0.0 {
        q.weights.clone()
    } else {
        weights.iter().zip(&q.weights).map(|(c, cq)| (eta * c + (1.0 - eta) * cq).max(0.0)).collect()
    };
    WeightProjection { weights: projected, eta, bound, shift_before: shift }
}

/// Projects all differentiable parameters `(c, M, Sigma)` of a candidate that
/// shares `q`'s centers: first the cluster weights with `M` held at `M_q`
/// (budget `epsilon` on the expected mean shift), then `M` and `Sigma` by the
/// linear-Gaussian projection with the features induced by the projected
/// weights.
///
/// `phi` are the shared RBF features of the dataset states and `q_means` are
/// `q`'s means at those states.
pub fn moe_projection(
    candidate: &MoiePolicy,
    q: &MoiePolicy,
    phi: &[Vec<f64>],
    q_means: &[Vec<f64>],
    constraints: UpdateConstraints,
) -> Result<(MoiePolicy, ProjectionReport)> {
    let kl_before = {
        let means = candidate.means_from_features(phi);
        crate::policy::expected_kl_from_means(&means, &candidate.sigma, q_means, &q.sigma)
    };
    let wp = weight_projection(&candidate.weights, q, phi, constraints.epsilon);
    let psi: Vec<Vec<f64>> = phi.iter().map(|f| memberships_from_features(f, &wp.weights)).collect();
    let reference = KlReference { means: q_means, sigma: &q.sigma };
    let (actions, sigma, mut report) =
        kl_projection_linear_gaussian(&psi, &candidate.actions, &candidate.sigma, &q.actions, reference, constraints)?;
    report.eta_weights = wp.eta;
    report.bound = wp.bound;
    report.kl_before = kl_before;
    let mut projected = candidate.clone();
    projected.weights = wp.weights;
    projected.actions = actions;
    projected.sigma = sigma;
    Ok((projected, report))
}

/// [`moe_projection`] evaluated on raw dataset states.
pub fn moe_projection_on_states(
    candidate: &MoiePolicy,
    q: &MoiePolicy,
    states: &[Vec<f64>],
    constraints: UpdateConstraints,
) -> Result<(MoiePolicy, ProjectionReport)> {
    let phi = q.feature_matrix(states);
    let q_means = q.means_from_features(&phi);
    moe_projection(candidate, q, &phi, &q_means, constraints)
}
