//! Deterministic, seedable continuous-control environments and rollouts.

use std::f64::consts::PI;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::policy::MoiePolicy;
use crate::types::{Rng, TrajectoryDataset, Transition};

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub observation: Vec<f64>,
    pub reward: f64,
    pub terminal: bool,
}

pub trait Environment {
    fn dim_state(&self) -> usize;
    fn dim_action(&self) -> usize;
    fn horizon(&self) -> usize;
    /// Samples an initial state and returns its observation.
    fn reset(&mut self, rng: &mut Rng) -> Vec<f64>;
    /// Applies `action` (clipped to the action bounds inside).
    fn step(&mut self, action: &[f64]) -> Step;
}

/// Environment ids accepted by [`make_env`].
pub const ENV_IDS: [&str; 2] = ["pendulum", "pointmass"];

pub fn make_env(id: &str) -> Result<Box<dyn Environment>> {
    match id {
        "pendulum" => Ok(Box::new(Pendulum::default())),
        "pointmass" => Ok(Box::new(PointMass::default())),
        other => Err(Error::InvalidConfig(format!("unknown environment `{other}`"))),
    }
}

/// Wraps an angle into `[-pi, pi)`.
pub fn angle_norm(x: f64) -> f64 {
    (x + PI).rem_euclid(2.0 * PI) - PI
}

/// Torque-limited pendulum swing-up. The hidden state is `(theta,
/// theta_dot)` with `theta = 0` upright; observations are
/// `(cos theta, sin theta, theta_dot)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Pendulum {
    pub theta: f64,
    pub theta_dot: f64,
}

impl Default for Pendulum {
    fn default() -> Self {
        Self { theta: PI, theta_dot: 0.0 }
    }
}

impl Pendulum {
    pub const G: f64 = 10.0;
    pub const MASS: f64 = 1.0;
    pub const LENGTH: f64 = 1.0;
    pub const DT: f64 = 0.05;
    pub const MAX_SPEED: f64 = 8.0;
    pub const MAX_TORQUE: f64 = 2.0;
    pub const HORIZON: usize = 200;

    pub fn observation(&self) -> Vec<f64> {
        vec![self.theta.cos(), self.theta.sin(), self.theta_dot]
    }

    /// One step of the dynamics from `(theta, theta_dot)` under `torque`.
    /// Returns the next `(theta, theta_dot)` and the reward of the current
    /// state-action pair.
    pub fn dynamics(theta: f64, theta_dot: f64, torque: f64) -> (f64, f64, f64) {
        let u = torque.clamp(-Self::MAX_TORQUE, Self::MAX_TORQUE);
        let cost = angle_norm(theta).powi(2) + 0.1 * theta_dot * theta_dot + 0.001 * u * u;
        let acc = 3.0 * Self::G / (2.0 * Self::LENGTH) * theta.sin() + 3.0 / (Self::MASS * Self::LENGTH * Self::LENGTH) * u;
        let new_dot = (theta_dot + acc * Self::DT).clamp(-Self::MAX_SPEED, Self::MAX_SPEED);
        let new_theta = theta + new_dot * Self::DT;
        (new_theta, new_dot, -cost)
    }
}

impl Environment for Pendulum {
    fn dim_state(&self) -> usize {
        3
    }

    fn dim_action(&self) -> usize {
        1
    }

    fn horizon(&self) -> usize {
        Self::HORIZON
    }

    fn reset(&mut self, rng: &mut Rng) -> Vec<f64> {
        self.theta = rng.random_range(-PI..PI);
        self.theta_dot = rng.random_range(-1.0..1.0);
        self.observation()
    }

    fn step(&mut self, action: &[f64]) -> Step {
        let (theta, theta_dot, reward) = Self::dynamics(self.theta, self.theta_dot, action[0]);
        self.theta = theta;
        self.theta_dot = theta_dot;
        Step { observation: self.observation(), reward, terminal: false }
    }
}

/// Planar double integrator driven toward the origin. State
/// `(x, y, vx, vy)`, action a force in `[-1, 1]^2`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointMass {
    pub position: [f64; 2],
    pub velocity: [f64; 2],
}

impl PointMass {
    pub const DT: f64 = 0.1;
    pub const MAX_FORCE: f64 = 1.0;
    pub const HORIZON: usize = 100;
    pub const GOAL: [f64; 2] = [0.0, 0.0];

    pub fn observation(&self) -> Vec<f64> {
        vec![self.position[0], self.position[1], self.velocity[0], self.velocity[1]]
    }
}

impl Environment for PointMass {
    fn dim_state(&self) -> usize {
        4
    }

    fn dim_action(&self) -> usize {
        2
    }

    fn horizon(&self) -> usize {
        Self::HORIZON
    }

    fn reset(&mut self, rng: &mut Rng) -> Vec<f64> {
        self.position = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        self.velocity = [0.0, 0.0];
        self.observation()
    }

    fn step(&mut self, action: &[f64]) -> Step {
        let f = [
            action[0].clamp(-Self::MAX_FORCE, Self::MAX_FORCE),
            action[1].clamp(-Self::MAX_FORCE, Self::MAX_FORCE),
        ];
        let dist2: f64 = (0..2).map(|i| (self.position[i] - Self::GOAL[i]).powi(2)).sum();
        let reward = -dist2 - 0.01 * (f[0] * f[0] + f[1] * f[1]);
        for i in 0..2 {
            self.velocity[i] += Self::DT * f[i];
            self.position[i] += Self::DT * self.velocity[i];
        }
        Step { observation: self.observation(), reward, terminal: false }
    }
}

/// Runs `episodes` stochastic episodes, recording pre-clipping actions and
/// their log-densities under `policy`.
pub fn rollout(env: &mut dyn Environment, policy: &MoiePolicy, rng: &mut Rng, episodes: usize) -> Result<TrajectoryDataset> {
    if policy.dim_state() != env.dim_state() {
        return Err(Error::DimensionMismatch { expected: env.dim_state(), actual: policy.dim_state() });
    }
    if policy.dim_action() != env.dim_action() {
        return Err(Error::DimensionMismatch { expected: env.dim_action(), actual: policy.dim_action() });
    }
    let mut out = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut state = env.reset(rng);
        let mut episode = Vec::with_capacity(env.horizon());
        for _ in 0..env.horizon() {
            let (action, logp) = policy.sample(&state, rng);
            let step = env.step(&action);
            if step.observation.iter().any(|x| !x.is_finite()) || !step.reward.is_finite() {
                return Err(Error::NonFinite("environment state"));
            }
            let terminal = step.terminal;
            episode.push(Transition {
                state: std::mem::replace(&mut state, step.observation.clone()),
                action,
                reward: step.reward,
                next_state: step.observation,
                terminal,
                behavior_logp: logp,
            });
            if terminal {
                break;
            }
        }
        out.push(episode);
    }
    Ok(TrajectoryDataset::new(out))
}

/// Undiscounted return of one episode acting with the policy mean.
pub fn evaluate_mean_policy(env: &mut dyn Environment, policy: &MoiePolicy, rng: &mut Rng) -> f64 {
    let mut state = env.reset(rng);
    let mut total = 0.0;
    for _ in 0..env.horizon() {
        let step = env.step(&policy.mean_action(&state));
        total += step.reward;
        state = step.observation;
        if step.terminal {
            break;
        }
    }
    total
}
