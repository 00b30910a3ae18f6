//! State-value approximation: a small tanh MLP trained with Adam on squared
//! error. Backpropagation is written out by hand.

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::types::{Rng, StateNormalizer};

/// Value-fitting and advantage-estimation settings.
#[derive(Debug, Clone, PartialEq)]
pub struct GaeConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub step_size: f64,
    pub hidden: Vec<usize>,
}

impl Default for GaeConfig {
    fn default() -> Self {
        Self { gamma: 0.99, lambda: 0.95, epochs: 10, minibatch: 64, step_size: 3e-4, hidden: vec![64, 64] }
    }
}

impl GaeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::InvalidConfig(format!("gamma {} outside (0, 1]", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidConfig(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if self.minibatch == 0 || !(self.step_size > 0.0) {
            return Err(Error::InvalidConfig("minibatch and step size must be positive".into()));
        }
        Ok(())
    }
}

/// Fully connected network, tanh on hidden layers, linear scalar output.
/// Parameters live in one flat vector: per layer, a row-major `out x in`
/// weight block followed by `out` biases.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

impl Mlp {
    pub fn new(input: usize, hidden: &[usize], rng: &mut Rng) -> Self {
        let mut sizes = vec![input];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        let mut params = Vec::new();
        let last = sizes.len() - 2;
        for (l, pair) in sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let mut limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            if l == last {
                limit *= 0.1;
            }
            params.extend((0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)));
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Self { sizes, params }
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn forward(&self, x: &[f64]) -> f64 {
        let mut act = x.to_vec();
        let mut offset = 0;
        let layers = self.sizes.len() - 1;
        for l in 0..layers {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.params[offset..offset + n_in * n_out];
            let b = &self.params[offset + n_in * n_out..offset + n_in * n_out + n_out];
            offset += n_in * n_out + n_out;
            let mut next: Vec<f64> = (0..n_out)
                .map(|o| b[o] + w[o * n_in..(o + 1) * n_in].iter().zip(&act).map(|(a, b)| a * b).sum::<f64>())
                .collect();
            if l + 1 < layers {
                next.iter_mut().for_each(|v| *v = v.tanh());
            }
            act = next;
        }
        act[0]
    }

    /// Accumulates `scale * d output / d params` into `grad` and returns the
    /// output.
    fn backward(&self, x: &[f64], scale: f64, grad: &mut [f64]) -> f64 {
        let layers = self.sizes.len() - 1;
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(layers + 1);
        acts.push(x.to_vec());
        let mut offsets = Vec::with_capacity(layers);
        let mut offset = 0;
        for l in 0..layers {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            offsets.push(offset);
            let w = &self.params[offset..offset + n_in * n_out];
            let b = &self.params[offset + n_in * n_out..offset + n_in * n_out + n_out];
            offset += n_in * n_out + n_out;
            let prev = &acts[l];
            let mut next: Vec<f64> = (0..n_out)
                .map(|o| b[o] + w[o * n_in..(o + 1) * n_in].iter().zip(prev).map(|(a, b)| a * b).sum::<f64>())
                .collect();
            if l + 1 < layers {
                next.iter_mut().for_each(|v| *v = v.tanh());
            }
            acts.push(next);
        }
        let out = acts[layers][0];
        let mut delta = vec![scale];
        for l in (0..layers).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let off = offsets[l];
            let prev = &acts[l];
            for o in 0..n_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let row = &mut grad[off + o * n_in..off + (o + 1) * n_in];
                for (g, a) in row.iter_mut().zip(prev) {
                    *g += d * a;
                }
                grad[off + n_in * n_out + o] += d;
            }
            if l > 0 {
                let w = &self.params[off..off + n_in * n_out];
                delta = (0..n_in)
                    .map(|i| {
                        let back: f64 = (0..n_out).map(|o| w[o * n_in + i] * delta[o]).sum();
                        back * (1.0 - prev[i] * prev[i])
                    })
                    .collect();
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    /// Descent step on `params` along `grad`.
    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
            *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
        }
    }
}

/// `V(s) = offset + scale * mlp(normalize(s))`. The input normalizer and the
/// output affine map are fixed once by [`ValueFunction::calibrate`].
#[derive(Debug, Clone, PartialEq)]
pub struct ValueFunction {
    net: Mlp,
    adam: Adam,
    pub input: StateNormalizer,
    pub output_offset: f64,
    pub output_scale: f64,
    calibrated: bool,
}

impl ValueFunction {
    pub fn new(dim_state: usize, hidden: &[usize], rng: &mut Rng) -> Self {
        let net = Mlp::new(dim_state, hidden, rng);
        let adam = Adam::new(net.params.len());
        Self {
            net,
            adam,
            input: StateNormalizer::unit(dim_state),
            output_offset: 0.0,
            output_scale: 1.0,
            calibrated: false,
        }
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    /// Fix the input normalization and the output scale from the first batch
    /// of targets. Later calls are no-ops.
    pub fn calibrate(&mut self, input: StateNormalizer, targets: &[f64]) {
        if self.calibrated || targets.is_empty() {
            return;
        }
        let n = targets.len() as f64;
        let mean = targets.iter().sum::<f64>() / n;
        let var = targets.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / n;
        self.input = input;
        self.output_offset = mean;
        self.output_scale = var.sqrt().max(1.0);
        self.calibrated = true;
    }

    pub fn value(&self, s: &[f64]) -> f64 {
        let mut x = vec![0.0; s.len()];
        self.input.normalize_into(s, &mut x);
        self.output_offset + self.output_scale * self.net.forward(&x)
    }

    /// Mean squared error in target units.
    pub fn mse(&self, states: &[Vec<f64>], targets: &[f64]) -> f64 {
        let n = states.len().max(1) as f64;
        states
            .iter()
            .zip(targets)
            .map(|(s, t)| (self.value(s) - t).powi(2))
            .sum::<f64>()
            / n
    }

    /// MSE (target units) over the given samples and its gradient with respect
    /// to the raw network parameters.
    pub fn loss_and_grad(&self, states: &[&[f64]], targets: &[f64]) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; self.net.params.len()];
        let n = states.len() as f64;
        let mut loss = 0.0;
        let mut x = vec![0.0; self.input.dim()];
        for (s, t) in states.iter().zip(targets) {
            self.input.normalize_into(s, &mut x);
            let out = self.net.forward(&x);
            let err = self.output_offset + self.output_scale * out - t;
            loss += err * err / n;
            self.net.backward(&x, 2.0 * err * self.output_scale / n, &mut grad);
        }
        (loss, grad)
    }
}

/// Fits `v` to `targets` by minibatch Adam and returns the final training MSE.
/// If the fit ends worse than it started, the starting parameters are kept.
pub fn fit_value(
    v: &mut ValueFunction,
    states: &[Vec<f64>],
    targets: &[f64],
    cfg: &GaeConfig,
    rng: &mut Rng,
) -> Result<f64> {
    if states.is_empty() {
        return Err(Error::EmptyDataset);
    }
    crate::types::check_dim(states.len(), targets.len())?;
    if targets.iter().any(|t| !t.is_finite()) {
        return Err(Error::NonFinite("value targets"));
    }
    let before = v.mse(states, targets);
    let snapshot = (v.net.clone(), v.adam.clone());
    // Adam normalizes gradient magnitude, so the step size is in units of the
    // raw network output; scaled targets keep that meaningful.
    let mut order: Vec<usize> = (0..states.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.minibatch.max(1)) {
            let xs: Vec<&[f64]> = chunk.iter().map(|&i| states[i].as_slice()).collect();
            let ts: Vec<f64> = chunk.iter().map(|&i| targets[i]).collect();
            let (_, grad) = v.loss_and_grad(&xs, &ts);
            v.adam.step(&mut v.net.params, &grad, cfg.step_size);
        }
    }
    let after = v.mse(states, targets);
    if !after.is_finite() || after > before {
        v.net = snapshot.0;
        v.adam = snapshot.1;
        return Ok(before);
    }
    Ok(after)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::seeded_rng;

    #[test]
    fn gradient_matches_central_differences_on_three_parameter_model() {
        // no hidden layer, two inputs: w1, w2, b
        let mut rng = seeded_rng(1);
        let v = ValueFunction::new(2, &[], &mut rng);
        assert_eq!(v.net.params.len(), 3);
        check_gradient(v, &mut rng);
    }

    #[test]
    fn gradient_matches_central_differences_on_hidden_layers() {
        let mut rng = seeded_rng(2);
        let mut v = ValueFunction::new(3, &[5, 4], &mut rng);
        v.output_offset = 0.3;
        v.output_scale = 2.0;
        check_gradient(v, &mut rng);
    }

    fn check_gradient(mut v: ValueFunction, rng: &mut Rng) {
        let dim = v.input.dim();
        let states: Vec<Vec<f64>> = (0..6).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let targets: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
        let refs: Vec<&[f64]> = states.iter().map(|s| s.as_slice()).collect();
        let (_, grad) = v.loss_and_grad(&refs, &targets);
        let h = 1e-6;
        for i in 0..grad.len() {
            let orig = v.net.params[i];
            v.net.params[i] = orig + h;
            let up = v.loss_and_grad(&refs, &targets).0;
            v.net.params[i] = orig - h;
            let down = v.loss_and_grad(&refs, &targets).0;
            v.net.params[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-8);
            assert!(rel <= 1e-4, "param {i}: fd {fd} analytic {}", grad[i]);
        }
    }

    #[test]
    fn fitting_own_outputs_is_a_fixed_point() {
        let mut rng = seeded_rng(3);
        let mut v = ValueFunction::new(2, &[8], &mut rng);
        let states: Vec<Vec<f64>> = (0..32).map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
        let targets: Vec<f64> = states.iter().map(|s| v.value(s)).collect();
        let before = v.net.params.clone();
        let loss = fit_value(&mut v, &states, &targets, &GaeConfig::default(), &mut rng).unwrap();
        assert!(loss < 1e-20);
        let drift = before.iter().zip(&v.net.params).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(drift < 1e-9);
    }

    #[test]
    fn constant_targets_are_learned() {
        let mut rng = seeded_rng(4);
        let mut v = ValueFunction::new(1, &[16, 16], &mut rng);
        let states: Vec<Vec<f64>> = (0..64).map(|i| vec![-1.0 + 2.0 * i as f64 / 63.0]).collect();
        let targets = vec![3.0; 64];
        let cfg = GaeConfig { epochs: 400, minibatch: 16, step_size: 3e-3, ..GaeConfig::default() };
        fit_value(&mut v, &states, &targets, &cfg, &mut rng).unwrap();
        for s in &states {
            assert!((v.value(s) - 3.0).abs() < 0.3, "{}", v.value(s));
        }
    }

    #[test]
    fn single_pair_loss_strictly_decreases() {
        let mut rng = seeded_rng(5);
        let mut v = ValueFunction::new(2, &[64, 64], &mut rng);
        let states = vec![vec![0.5, -0.5]];
        let targets = vec![2.0];
        let cfg = GaeConfig { epochs: 1, ..GaeConfig::default() };
        let mut last = v.mse(&states, &targets);
        for _ in 0..20 {
            let loss = fit_value(&mut v, &states, &targets, &cfg, &mut rng).unwrap();
            assert!(loss < last, "{loss} !< {last}");
            last = loss;
        }
    }

    #[test]
    fn fit_never_ends_worse_than_it_started() {
        let mut rng = seeded_rng(6);
        let mut v = ValueFunction::new(2, &[64, 64], &mut rng);
        let states: Vec<Vec<f64>> = (0..200).map(|_| vec![rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)]).collect();
        let targets: Vec<f64> = states.iter().map(|s| (s[0] * 3.0).sin() * 10.0 + s[1]).collect();
        for _ in 0..5 {
            let before = v.mse(&states, &targets);
            let after = fit_value(&mut v, &states, &targets, &GaeConfig::default(), &mut rng).unwrap();
            assert!(after <= before);
        }
    }

    #[test]
    fn rejects_non_finite_targets() {
        let mut rng = seeded_rng(7);
        let mut v = ValueFunction::new(1, &[4], &mut rng);
        let err = fit_value(&mut v, &[vec![0.0]], &[f64::NAN], &GaeConfig::default(), &mut rng);
        assert!(matches!(err, Err(Error::NonFinite(_))));
    }

    #[test]
    fn calibration_happens_once() {
        let mut rng = seeded_rng(8);
        let mut v = ValueFunction::new(1, &[4], &mut rng);
        v.calibrate(StateNormalizer::unit(1), &[-10.0, -30.0]);
        assert_eq!(v.output_offset, -20.0);
        assert_eq!(v.output_scale, 10.0);
        v.calibrate(StateNormalizer::unit(1), &[100.0, 300.0]);
        assert_eq!(v.output_offset, -20.0);
    }
}
