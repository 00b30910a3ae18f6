//! Discrete optimization of the prototype list.
//!
//! Prototypes are only ever copied from dataset states, so every center of
//! a policy produced here is bit-identical to some visited state. The search
//! maximizes a margin objective that rewards states being close to exactly
//! one prototype, under the same KL trust region as the continuous update.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::policy::{expected_kl_from_means, MoiePolicy};
use crate::types::{Rng, TrajectoryDataset};
use crate::update::{surrogate_value_from_features, SurrogateBatch};

#[derive(Debug, Clone, PartialEq)]
pub struct SearchConfig {
    /// Size of the top-N average in the margin objective.
    pub top_n: usize,
    /// Proposals generated per swap count.
    pub candidates: usize,
    /// Exponent of the polynomial rank bias.
    pub alpha: f64,
    /// Upper bound on proposal rounds in one search.
    pub max_attempts: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self { top_n: 3, candidates: 10, alpha: 2.0, max_attempts: 64 }
    }
}

impl SearchConfig {
    pub fn validate(&self, k: usize) -> Result<()> {
        if self.top_n == 0 || self.top_n > k {
            return Err(Error::InvalidTopN { n: self.top_n, k });
        }
        if self.candidates == 0 || !(self.alpha > 0.0) {
            return Err(Error::InvalidConfig("candidates and alpha must be positive".into()));
        }
        Ok(())
    }
}

/// Margin objective on precomputed features: the state average of
/// `phi_(1)(s) - mean(phi_(1..N)(s))` where `phi_(i)` are the features sorted
/// in descending order.
pub fn swap_objective_from_features(phi: &[Vec<f64>], top_n: usize) -> Result<f64> {
    let Some(first) = phi.first() else { return Ok(0.0) };
    if top_n == 0 || top_n > first.len() {
        return Err(Error::InvalidTopN { n: top_n, k: first.len() });
    }
    let mut total = 0.0;
    let mut top = vec![f64::NEG_INFINITY; top_n];
    for f in phi {
        top.iter_mut().for_each(|t| *t = f64::NEG_INFINITY);
        for &x in f {
            // insertion into a short descending buffer
            if x > top[top_n - 1] {
                let mut i = top_n - 1;
                while i > 0 && top[i - 1] < x {
                    top[i] = top[i - 1];
                    i -= 1;
                }
                top[i] = x;
            }
        }
        total += top[0] - top.iter().sum::<f64>() / top_n as f64;
    }
    Ok(total / phi.len() as f64)
}

pub fn swap_objective(policy: &MoiePolicy, states: &[Vec<f64>], top_n: usize) -> Result<f64> {
    if top_n > policy.k() {
        return Err(Error::InvalidTopN { n: top_n, k: policy.k() });
    }
    swap_objective_from_features(&policy.feature_matrix(states), top_n)
}

/// Average share of each cluster in the unnormalized memberships,
/// `h1_i = E_s[w_i(s) / |w(s)|_1]`, with `0/0 = 0`. Low values mark clusters
/// that are cheap to replace.
pub fn heuristic_h1(policy: &MoiePolicy, states: &[Vec<f64>]) -> Vec<f64> {
    h1_from_features(&policy.feature_matrix(states), &policy.weights)
}

fn h1_from_features(phi: &[Vec<f64>], weights: &[f64]) -> Vec<f64> {
    let mut h = vec![0.0; weights.len()];
    if phi.is_empty() {
        return h;
    }
    for f in phi {
        let w: Vec<f64> = f.iter().zip(weights).map(|(p, c)| p * c).collect();
        let total: f64 = w.iter().sum();
        if total > 0.0 {
            for (h, x) in h.iter_mut().zip(&w) {
                *h += x / total;
            }
        }
    }
    h.iter_mut().for_each(|x| *x /= phi.len() as f64);
    h
}

/// `|phi(s)|_1`: small for states far from every prototype.
pub fn heuristic_h2(state: &[f64], policy: &MoiePolicy) -> f64 {
    policy.rbf_features(state).iter().sum()
}

/// Samples `count` distinct entries from `ranked` (best first) without
/// replacement; each draw picks a remaining entry of 1-based rank `r` with
/// probability proportional to `r^-alpha`.
pub fn polynomial_rank_sample<T: Clone>(ranked: &[T], count: usize, alpha: f64, rng: &mut Rng) -> Result<Vec<T>> {
    if count > ranked.len() {
        return Err(Error::SampleTooLarge { count, available: ranked.len() });
    }
    let mut weights: Vec<f64> = (1..=ranked.len()).map(|r| (r as f64).powf(-alpha)).collect();
    let mut total: f64 = weights.iter().sum();
    let mut picked = Vec::with_capacity(count);
    for _ in 0..count {
        let mut target = rng.random::<f64>() * total;
        let mut chosen = None;
        for (i, w) in weights.iter().enumerate() {
            if *w == 0.0 {
                continue;
            }
            chosen = Some(i);
            if target < *w {
                break;
            }
            target -= w;
        }
        // the fallback to the last live entry absorbs rounding in `total`
        let i = chosen.expect("count <= len leaves a live entry");
        picked.push(ranked[i].clone());
        total -= weights[i];
        weights[i] = 0.0;
    }
    Ok(picked)
}

/// Indices `0..values.len()` ordered by ascending value, ties by index.
fn ascending_ranking(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    idx
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwapProposal {
    /// Center slots that were replaced.
    pub removed: Vec<usize>,
    /// Flattened dataset indices of the inserted states, aligned with `removed`.
    pub inserted: Vec<usize>,
    pub objective: f64,
    pub expected_kl: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SwapReport {
    pub objective_before: f64,
    pub objective_after: f64,
    pub accepted: Vec<SwapProposal>,
    pub rounds: usize,
    pub proposals: usize,
    pub infeasible: usize,
    /// Expected KL of the returned policy to the input policy.
    pub expected_kl: f64,
}

impl SwapReport {
    pub fn swapped_centers(&self) -> usize {
        self.accepted.iter().map(|p| p.removed.len()).sum()
    }
}

/// Randomized swap search over the centers of `q`.
///
/// Starting with `k = K`, each round draws `cfg.candidates` proposals that
/// replace `k` centers (rank-biased toward low `h1`) by `k` dataset states
/// (rank-biased toward low `h2`). Inserted experts inherit the replaced
/// weight and take the inserted state's logged action as their action row.
/// Proposals whose expected KL to `q` exceeds `epsilon` are discarded; the
/// best remaining one is accepted if it strictly improves the objective,
/// otherwise `k` is halved. The search stops at `k = 0`.
pub fn swap_clusters(
    q: &MoiePolicy,
    data: &TrajectoryDataset,
    epsilon: f64,
    cfg: &SearchConfig,
    rng: &mut Rng,
) -> Result<(MoiePolicy, SwapReport)> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    cfg.validate(q.k())?;
    let transitions: Vec<_> = data.transitions().collect();
    let states: Vec<Vec<f64>> = transitions.iter().map(|t| t.state.clone()).collect();
    let normalized_states: Vec<Vec<f64>> =
        states.iter().map(|s| q.normalizer.normalize(s)).collect::<Result<_>>()?;
    let q_means = q.means_from_features(&q.feature_matrix(&states));

    let mut current = q.clone();
    let mut phi = current.feature_matrix(&states);
    let mut objective = swap_objective_from_features(&phi, cfg.top_n)?;
    let mut report = SwapReport { objective_before: objective, ..SwapReport::default() };

    let column = |center: &[f64]| -> Vec<f64> {
        let mut c = vec![0.0; center.len()];
        q.normalizer.normalize_into(center, &mut c);
        normalized_states
            .iter()
            .map(|s| {
                let d2: f64 = s.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum();
                (-q.tau * d2).exp()
            })
            .collect()
    };

    let mut k = q.k();
    while k > 0 && report.rounds < cfg.max_attempts {
        report.rounds += 1;
        let center_rank = ascending_ranking(&h1_from_features(&phi, &current.weights));
        let h2: Vec<f64> = phi.iter().map(|f| f.iter().sum()).collect();
        let state_rank = ascending_ranking(&h2);

        let draws: Vec<(Vec<usize>, Vec<usize>)> = (0..cfg.candidates)
            .map(|_| {
                let removed = polynomial_rank_sample(&center_rank, k, cfg.alpha, rng)?;
                let inserted = polynomial_rank_sample(&state_rank, k, cfg.alpha, rng)?;
                Ok((removed, inserted))
            })
            .collect::<Result<_>>()?;

        let mut best: Option<(SwapProposal, MoiePolicy, Vec<Vec<f64>>)> = None;
        for (removed, inserted) in draws {
            report.proposals += 1;
            let mut cand = current.clone();
            let mut cand_phi = phi.clone();
            for (&slot, &idx) in removed.iter().zip(&inserted) {
                cand.centers[slot] = transitions[idx].state.clone();
                cand.actions[slot] = transitions[idx].action.clone();
                cand.active[slot] = true;
                let col = column(&cand.centers[slot]);
                for (row, v) in cand_phi.iter_mut().zip(col) {
                    row[slot] = v;
                }
            }
            let means = cand.means_from_features(&cand_phi);
            let kl = expected_kl_from_means(&means, &cand.sigma, &q_means, &q.sigma);
            if kl > epsilon {
                report.infeasible += 1;
                continue;
            }
            let obj = swap_objective_from_features(&cand_phi, cfg.top_n)?;
            if best.as_ref().is_none_or(|(b, _, _)| obj > b.objective) {
                best = Some((SwapProposal { removed, inserted, objective: obj, expected_kl: kl }, cand, cand_phi));
            }
        }

        match best {
            Some((proposal, cand, cand_phi)) if proposal.objective > objective => {
                objective = proposal.objective;
                report.expected_kl = proposal.expected_kl;
                report.accepted.push(proposal);
                current = cand;
                phi = cand_phi;
            }
            _ => k /= 2,
        }
    }
    report.objective_after = objective;
    Ok((current, report))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CompressReport {
    pub removed: Vec<usize>,
    pub expected_kl: f64,
    pub surrogate: f64,
}

/// Tries to zero each positive cluster weight in turn. A deletion is kept
/// when the expected KL to `reference` stays within `epsilon` and the
/// surrogate on `batch` does not decrease, so compression never undoes
/// progress the previous updates made.
pub fn compress_policy(
    policy: &MoiePolicy,
    reference: &MoiePolicy,
    batch: &SurrogateBatch,
    epsilon: f64,
) -> (MoiePolicy, CompressReport) {
    let states = &batch.states;
    let phi = policy.feature_matrix(states);
    let ref_means = reference.means_from_features(&reference.feature_matrix(states));
    let kl_of = |p: &MoiePolicy| expected_kl_from_means(&p.means_from_features(&phi), &p.sigma, &ref_means, &reference.sigma);
    let mut out = policy.clone();
    let mut report = CompressReport {
        expected_kl: kl_of(&out),
        surrogate: surrogate_value_from_features(&out, &phi, batch),
        ..CompressReport::default()
    };
    for i in 0..out.k() {
        if out.weights[i] == 0.0 {
            continue;
        }
        let mut trial = out.clone();
        trial.weights[i] = 0.0;
        let kl = kl_of(&trial);
        if kl > epsilon {
            continue;
        }
        let value = surrogate_value_from_features(&trial, &phi, batch);
        if value >= report.surrogate {
            out = trial;
            report.removed.push(i);
            report.expected_kl = kl;
            report.surrogate = value;
        }
    }
    (out, report)
}

/// Fills the uninitialized center slots with the states of the
/// highest-advantage transitions and their logged actions. Weights stay at
/// zero, so the action distribution is unchanged.
pub fn add_clusters(policy: &MoiePolicy, data: &TrajectoryDataset) -> Result<MoiePolicy> {
    if !data.has_advantages() {
        return Err(Error::InvalidConfig("advantages must be computed before adding clusters".into()));
    }
    let transitions: Vec<_> = data.transitions().collect();
    let mut order: Vec<usize> = (0..transitions.len()).collect();
    order.sort_by(|&a, &b| data.advantages[b].total_cmp(&data.advantages[a]).then(a.cmp(&b)));
    let mut out = policy.clone();
    let free: Vec<usize> = (0..out.k()).filter(|&i| !out.active[i]).collect();
    for (slot, idx) in free.into_iter().zip(order) {
        out.centers[slot] = transitions[idx].state.clone();
        out.actions[slot] = transitions[idx].action.clone();
        out.active[slot] = true;
    }
    Ok(out)
}
