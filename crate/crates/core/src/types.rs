//! Shared domain types: transitions, trajectory datasets, the frozen state
//! normalizer and the experiment RNG.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// The single RNG type used across an experiment. Streams are reproducible
/// across platforms.
pub type Rng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent substream `stream` of the master `seed`.
pub fn substream_rng(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Number of free parameters of a policy with `k` experts: centers, action
/// rows, cluster weights and the diagonal covariance.
pub fn parameter_count(dim_state: usize, dim_action: usize, k: usize) -> usize {
    k * (dim_state + dim_action + 1) + dim_action
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    /// Sampled action, before any clipping applied by the environment.
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub terminal: bool,
    /// Log-density of `action` under the policy that generated it.
    pub behavior_logp: f64,
}

/// Episodes in collection order. `advantages` and `value_targets` are
/// flattened in the same order as [`TrajectoryDataset::transitions`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrajectoryDataset {
    pub episodes: Vec<Vec<Transition>>,
    pub advantages: Vec<f64>,
    pub value_targets: Vec<f64>,
}

impl TrajectoryDataset {
    pub fn new(episodes: Vec<Vec<Transition>>) -> Self {
        Self { episodes, advantages: Vec::new(), value_targets: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.episodes.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn transitions(&self) -> impl Iterator<Item = &Transition> {
        self.episodes.iter().flatten()
    }

    pub fn states(&self) -> Vec<Vec<f64>> {
        self.transitions().map(|t| t.state.clone()).collect()
    }

    pub fn has_advantages(&self) -> bool {
        !self.is_empty() && self.advantages.len() == self.len()
    }
}

/// Per-dimension affine normalization `(s - mean) / std`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateNormalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub frozen: bool,
}

impl StateNormalizer {
    pub const STD_FLOOR: f64 = 1e-6;

    /// Identity normalization (mean 0, std 1), not frozen.
    pub fn unit(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], std: vec![1.0; dim], frozen: false }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Refit to `states` unless frozen. Returns whether the statistics changed.
    pub fn fit(&mut self, states: &[Vec<f64>]) -> Result<bool> {
        if self.frozen {
            return Ok(false);
        }
        if states.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let dim = self.dim();
        let n = states.len() as f64;
        let mut mean = vec![0.0; dim];
        for s in states {
            check_dim(dim, s.len())?;
            for (m, x) in mean.iter_mut().zip(s) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for s in states {
            for ((v, x), m) in var.iter_mut().zip(s).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        self.std = var.iter().map(|v| (v / n).sqrt().max(Self::STD_FLOOR)).collect();
        self.mean = mean;
        Ok(true)
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn normalize(&self, s: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), s.len())?;
        let mut out = vec![0.0; s.len()];
        self.normalize_into(s, &mut out);
        Ok(out)
    }

    /// Unchecked variant for hot loops; dimensions must already agree.
    pub fn normalize_into(&self, s: &[f64], out: &mut [f64]) {
        for (((o, x), m), sd) in out.iter_mut().zip(s).zip(&self.mean).zip(&self.std) {
            *o = (x - m) / sd;
        }
    }
}

pub(crate) fn check_dim(expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, actual })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn unit_normalizer_is_identity() {
        let n = StateNormalizer::unit(2);
        assert_eq!(n.normalize(&[2.0, -1.0]).unwrap(), vec![2.0, -1.0]);
    }

    #[test]
    fn normalize_shifts_and_scales() {
        let n = StateNormalizer { mean: vec![1.0, 1.0], std: vec![2.0, 2.0], frozen: true };
        assert_eq!(n.normalize(&[3.0, -1.0]).unwrap(), vec![1.0, -1.0]);
    }

    #[test]
    fn normalize_matches_elementwise_recomputation() {
        let mut rng = seeded_rng(7);
        for _ in 0..100 {
            let mean: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
            let std: Vec<f64> = (0..4).map(|_| rng.random_range(0.1..3.0)).collect();
            let s: Vec<f64> = (0..4).map(|_| rng.random_range(-5.0..5.0)).collect();
            let n = StateNormalizer { mean: mean.clone(), std: std.clone(), frozen: true };
            let got = n.normalize(&s).unwrap();
            for j in 0..4 {
                assert_eq!(got[j], (s[j] - mean[j]) / std[j]);
            }
        }
    }

    #[test]
    fn normalize_rejects_wrong_dimension() {
        let n = StateNormalizer::unit(3);
        assert!(matches!(n.normalize(&[1.0]), Err(Error::DimensionMismatch { expected: 3, actual: 1 })));
    }

    #[test]
    fn frozen_normalizer_ignores_refit() {
        let mut n = StateNormalizer::unit(1);
        n.fit(&[vec![1.0], vec![3.0]]).unwrap();
        assert_eq!(n.mean, vec![2.0]);
        assert_eq!(n.std, vec![1.0]);
        n.freeze();
        assert!(!n.fit(&[vec![10.0], vec![30.0]]).unwrap());
        assert_eq!(n.mean, vec![2.0]);
    }

    #[test]
    fn std_floor_applies_to_constant_dimension() {
        let mut n = StateNormalizer::unit(1);
        n.fit(&[vec![4.0], vec![4.0]]).unwrap();
        assert_eq!(n.std, vec![StateNormalizer::STD_FLOOR]);
    }

    #[test]
    fn parameter_counts_for_28_by_8() {
        assert_eq!(parameter_count(28, 8, 10), 378);
        assert_eq!(parameter_count(28, 8, 20), 748);
        assert_eq!(parameter_count(28, 8, 40), 1488);
    }

    #[test]
    fn same_seed_same_stream() {
        let mut a = seeded_rng(42);
        let mut b = seeded_rng(42);
        let xs: Vec<u64> = (0..100).map(|_| a.random()).collect();
        let ys: Vec<u64> = (0..100).map(|_| b.random()).collect();
        assert_eq!(xs, ys);
    }

    #[test]
    fn different_seeds_differ() {
        let mut a = seeded_rng(1);
        let mut b = seeded_rng(2);
        let xs: Vec<u64> = (0..100).map(|_| a.random()).collect();
        let ys: Vec<u64> = (0..100).map(|_| b.random()).collect();
        assert_ne!(xs, ys);
    }

    #[test]
    fn substreams_are_independent_of_each_other() {
        let mut a = substream_rng(5, 0);
        let mut b = substream_rng(5, 1);
        assert_ne!(a.random::<u64>(), b.random::<u64>());
    }
}
