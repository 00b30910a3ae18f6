//! Generalized Advantage Estimation.

use crate::error::{Error, Result};
use crate::types::TrajectoryDataset;

#[derive(Debug, Clone, PartialEq)]
pub struct GaeOutput {
    pub advantages: Vec<f64>,
    pub value_targets: Vec<f64>,
}

/// Backward recursion `A_t = delta_t + gamma * lambda * A_{t+1}` inside each
/// episode, with `delta_t = r_t + gamma * V(s_{t+1}) * (1 - terminal_t) - V(s_t)`.
/// Episodes cut by the horizon are not terminal and bootstrap from
/// `V(next_state)`.
pub fn compute_gae<V>(data: &TrajectoryDataset, value: V, gamma: f64, lambda: f64) -> Result<GaeOutput>
where
    V: Fn(&[f64]) -> f64,
{
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut advantages = Vec::with_capacity(data.len());
    let mut value_targets = Vec::with_capacity(data.len());
    for episode in &data.episodes {
        let values: Vec<f64> = episode.iter().map(|t| value(&t.state)).collect();
        let mut adv = vec![0.0; episode.len()];
        let mut running = 0.0;
        for (i, t) in episode.iter().enumerate().rev() {
            let next_value = if t.terminal {
                0.0
            } else if i + 1 < episode.len() {
                values[i + 1]
            } else {
                value(&t.next_state)
            };
            let delta = t.reward + gamma * next_value - values[i];
            running = if t.terminal { delta } else { delta + gamma * lambda * running };
            adv[i] = running;
        }
        value_targets.extend(adv.iter().zip(&values).map(|(a, v)| a + v));
        advantages.extend(adv);
    }
    Ok(GaeOutput { advantages, value_targets })
}

/// Standardize to zero mean and unit standard deviation (population std,
/// floored at 1e-8).
pub fn normalize_advantages(advantages: &[f64]) -> Result<Vec<f64>> {
    if advantages.len() < 2 {
        return Err(Error::TooFewSamples { needed: 2, actual: advantages.len() });
    }
    let n = advantages.len() as f64;
    let mean = advantages.iter().sum::<f64>() / n;
    let var = advantages.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < 1e-8 {
        return Ok(vec![0.0; advantages.len()]);
    }
    Ok(advantages.iter().map(|a| (a - mean) / std).collect())
}
