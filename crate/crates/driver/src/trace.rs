//! Per-timestep expert activations along one deterministic episode.
//!
//! The TSV has a header `t psi_0 .. psi_{K-1} psi_sum action_0 ..` and one
//! row per step. `psi_sum` is the total membership; `1 - psi_sum` is the
//! share of the default action.

use moie_core::envs::Environment;
use moie_core::policy::MoiePolicy;
use moie_core::types::seeded_rng;
use moie_core::Error;

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub t: usize,
    pub state: Vec<f64>,
    pub memberships: Vec<f64>,
    pub membership_sum: f64,
    pub action: Vec<f64>,
}

/// Runs one episode from a start state drawn with `seed`, acting with the
/// policy mean.
pub fn activation_trace(policy: &MoiePolicy, env: &mut dyn Environment, seed: u64) -> Result<Vec<TraceRow>, Error> {
    if policy.dim_state() != env.dim_state() {
        return Err(Error::DimensionMismatch { expected: env.dim_state(), actual: policy.dim_state() });
    }
    if policy.dim_action() != env.dim_action() {
        return Err(Error::DimensionMismatch { expected: env.dim_action(), actual: policy.dim_action() });
    }
    let mut rng = seeded_rng(seed);
    let mut state = env.reset(&mut rng);
    let mut rows = Vec::with_capacity(env.horizon());
    for t in 0..env.horizon() {
        let memberships = policy.memberships(&state);
        let action = policy.mean_from_memberships(&memberships);
        let step = env.step(&action);
        rows.push(TraceRow {
            t,
            membership_sum: memberships.iter().sum(),
            memberships,
            action,
            state: std::mem::replace(&mut state, step.observation),
        });
        if step.terminal {
            break;
        }
    }
    Ok(rows)
}

pub fn trace_tsv(rows: &[TraceRow], k: usize, dim_action: usize) -> String {
    let mut header = vec!["t".to_string()];
    header.extend((0..k).map(|i| format!("psi_{i}")));
    header.push("psi_sum".into());
    header.extend((0..dim_action).map(|j| format!("action_{j}")));
    let mut out = header.join("\t");
    out.push('\n');
    for r in rows {
        let mut cells = vec![r.t.to_string()];
        cells.extend(r.memberships.iter().map(|x| format!("{x:?}")));
        cells.push(format!("{:?}", r.membership_sum));
        cells.extend(r.action.iter().map(|x| format!("{x:?}")));
        out.push_str(&cells.join("\t"));
        out.push('\n');
    }
    out
}

pub fn export_activation_trace(
    policy: &MoiePolicy,
    env: &mut dyn Environment,
    seed: u64,
    path: &std::path::Path,
) -> Result<(), Box<dyn std::error::Error>> {
    let rows = activation_trace(policy, env, seed)?;
    std::fs::write(path, trace_tsv(&rows, policy.k(), policy.dim_action()))?;
    Ok(())
}
