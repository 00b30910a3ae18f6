//! End-to-end acceptance checks. Runs as a plain binary: one PASS/FAIL line
//! per criterion, nonzero exit if any failed. Pass criterion numbers as
//! arguments to run a subset, e.g. `cargo test --test acceptance -- 2 9`.

use std::process::ExitCode;
use std::time::Instant;

use moie_core::policy::{
    expected_kl, mahalanobis_sq, memberships_from_features, mix_actions, MoiePolicy, DEFAULT_TAU,
};
use moie_core::projection::{
    linear_bound_factor, moe_projection_on_states, quadratic_bound_factor, UpdateConstraints,
};
use moie_core::gae::compute_gae;
use moie_core::search::swap_objective_from_features;
use moie_core::types::{parameter_count, seeded_rng, Rng, StateNormalizer, TrajectoryDataset, Transition};
use moie_core::update::{surrogate_loss, surrogate_value, SurrogateBatch};
use moie_driver::archive::{unmatched_centers, ProvenanceIndex};
use moie_driver::artifacts::{train_to_dir, METRICS_FILE, POLICY_FILE};
use moie_driver::experiment::{run_diffproto, run_with_observer, RunOptions, RunOutput};
use moie_driver::serialize::{parse_policy, policy_to_string};
use moie_driver::ExperimentConfig;
use rand::Rng as _;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_policy(rng: &mut Rng, k: usize, ds: usize, da: usize) -> MoiePolicy {
    let norm = StateNormalizer {
        mean: (0..ds).map(|_| rng.random_range(-0.5..0.5)).collect(),
        std: (0..ds).map(|_| rng.random_range(0.5..2.0)).collect(),
        frozen: true,
    };
    let mut p = MoiePolicy::initial(&vec![0.0; ds], k, da, 1.0, DEFAULT_TAU, norm).unwrap();
    for i in 0..k {
        p.centers[i] = (0..ds).map(|_| rng.random_range(-2.0..2.0)).collect();
        p.actions[i] = (0..da).map(|_| rng.random_range(-2.0..2.0)).collect();
        p.weights[i] = rng.random_range(0.05..3.0);
        p.active[i] = true;
    }
    p.sigma = (0..da).map(|_| rng.random_range(0.3..1.5)).collect();
    p
}

fn random_states(rng: &mut Rng, n: usize, ds: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..ds).map(|_| rng.random_range(-3.0..3.0)).collect()).collect()
}

fn parameter_counts() -> Outcome {
    let got: Vec<usize> = [10, 20, 40].iter().map(|&k| parameter_count(28, 8, k)).collect();
    check(got == [378, 748, 1488], format!("counts {got:?}"))
}

/// Mean shift at one state between `w_eta = eta w + (1 - eta) w_q` and `w_q`,
/// with the action matrix fixed.
fn shift_at(phi: &[f64], w: &[f64], wq: &[f64], eta: f64, m_q: &[Vec<f64>], sigma: &[f64]) -> f64 {
    let da = sigma.len();
    let w_eta: Vec<f64> = w.iter().zip(wq).map(|(a, b)| eta * a + (1.0 - eta) * b).collect();
    let a = mix_actions(m_q, &memberships_from_features(phi, &w_eta), da);
    let b = mix_actions(m_q, &memberships_from_features(phi, wq), da);
    mahalanobis_sq(&a, &b, sigma)
}

fn bound_validity() -> Outcome {
    let mut rng = seeded_rng(2);
    let (mut quad_viol, mut lin_viol, mut lin_cases) = (0, 0, 0);
    let (mut quad_done, mut lin_done) = (0, 0);
    while quad_done < 10_000 || lin_done < 10_000 {
        let k = rng.random_range(1..=8);
        let da = rng.random_range(1..=3);
        let scale = 10f64.powf(rng.random_range(-2.0..1.5));
        let w: Vec<f64> = (0..k).map(|_| scale * rng.random_range(0.0..2.0)).collect();
        let wq: Vec<f64> = (0..k).map(|_| scale * rng.random_range(0.0..2.0)).collect();
        let phi: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..=1.0)).collect();
        let m_q: Vec<Vec<f64>> = (0..k).map(|_| (0..da).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
        let sigma: Vec<f64> = (0..da).map(|_| rng.random_range(0.1..2.0)).collect();
        // the default expert contributes a unit membership to both norms
        let w_norm = phi.iter().zip(&w).map(|(p, c)| p * c).sum::<f64>() + 1.0;
        let wq_norm = phi.iter().zip(&wq).map(|(p, c)| p * c).sum::<f64>() + 1.0;
        let m1 = shift_at(&phi, &w, &wq, 1.0, &m_q, &sigma);
        let quad = quadratic_bound_factor(w_norm, wq_norm);
        let lin = linear_bound_factor(w_norm, wq_norm);
        for step in 0..=10 {
            let eta = step as f64 / 10.0;
            let m = shift_at(&phi, &w, &wq, eta, &m_q, &sigma);
            if quad_done < 10_000 && m > eta * eta * quad * m1 + 1e-10 {
                quad_viol += 1;
            }
            if let (Some(f), true) = (lin, lin_done < 10_000) {
                if m > eta * f * m1 + 1e-10 {
                    lin_viol += 1;
                }
            }
        }
        quad_done += 1;
        if lin.is_some() && lin_done < 10_000 {
            lin_done += 1;
            lin_cases += 1;
        }
    }
    check(
        quad_viol == 0 && lin_viol == 0,
        format!("quadratic: {quad_viol} violations in 10000; linear: {lin_viol} violations in {lin_cases}"),
    )
}

fn projection_oracle() -> Outcome {
    let mut rng = seeded_rng(3);
    let mut failures = 0;
    let mut worst_kl = f64::NEG_INFINITY;
    let mut done = 0;
    while done < 1000 {
        let k = rng.random_range(1..=8);
        let ds = rng.random_range(1..=4);
        let da = rng.random_range(1..=3);
        let q = random_policy(&mut rng, k, ds, da);
        let n_states = rng.random_range(5..60);
        let states = random_states(&mut rng, n_states, ds);
        let epsilon = 10f64.powf(rng.random_range(-3.0..-0.5));
        let beta = q.entropy() - rng.random_range(0.0..1.5);
        let mut cand = q.clone();
        for c in cand.weights.iter_mut() {
            *c = (*c * rng.random_range(-1.0f64..1.5).exp() + rng.random_range(0.0..1.0)).max(0.0);
        }
        for row in cand.actions.iter_mut() {
            for a in row.iter_mut() {
                *a += rng.random_range(-3.0..3.0);
            }
        }
        for s in cand.sigma.iter_mut() {
            *s *= rng.random_range(-2.5f64..1.0).exp();
        }
        let c = UpdateConstraints { epsilon, beta };
        if expected_kl(&cand, &q, &states) <= epsilon && cand.entropy() >= beta {
            continue;
        }
        done += 1;
        let (p, _) = match moe_projection_on_states(&cand, &q, &states, c) {
            Ok(out) => out,
            Err(_) => {
                failures += 1;
                continue;
            }
        };
        let kl = expected_kl(&p, &q, &states);
        worst_kl = worst_kl.max(kl - epsilon);
        if kl > epsilon + 1e-8 || p.entropy() < beta - 1e-8 {
            failures += 1;
        }
    }
    check(failures == 0, format!("{failures} of 1000 failed; worst KL excess {worst_kl:.2e}"))
}

fn gae_equivalence() -> Outcome {
    let mut rng = seeded_rng(4);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let len = rng.random_range(1..=30);
        let terminal = rng.random_bool(0.5);
        let gamma = rng.random_range(0.0..=1.0);
        let lambda = rng.random_range(0.0..=1.0);
        let path: Vec<f64> = (0..=len).map(|_| rng.random_range(-2.0..2.0)).collect();
        let ep: Vec<Transition> = (0..len)
            .map(|t| Transition {
                state: vec![path[t]],
                action: vec![0.0],
                reward: rng.random_range(-5.0..5.0),
                next_state: vec![path[t + 1]],
                terminal: terminal && t + 1 == len,
                behavior_logp: 0.0,
            })
            .collect();
        let v = |s: &[f64]| s[0].powi(3) - 0.5 * s[0];
        let fast = compute_gae(&TrajectoryDataset::new(vec![ep.clone()]), v, gamma, lambda)
            .map_err(|e| e.to_string())?;
        let delta: Vec<f64> = ep
            .iter()
            .map(|t| t.reward + if t.terminal { 0.0 } else { gamma * v(&t.next_state) } - v(&t.state))
            .collect();
        for t in 0..len {
            let brute: f64 = (t..len).map(|l| (gamma * lambda).powi((l - t) as i32) * delta[l]).sum();
            worst = worst.max((brute - fast.advantages[t]).abs());
        }
    }
    check(worst <= 1e-10, format!("max abs difference {worst:.2e} over 200 episodes"))
}

fn gradient_checks() -> Outcome {
    let mut rng = seeded_rng(5);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let k = rng.random_range(1..=5);
        let ds = rng.random_range(1..=3);
        let da = rng.random_range(1..=2);
        let behavior = random_policy(&mut rng, k, ds, da);
        let states = random_states(&mut rng, 20, ds);
        let actions: Vec<Vec<f64>> = states.iter().map(|s| behavior.sample(s, &mut rng).0).collect();
        let behavior_logp = states.iter().zip(&actions).map(|(s, a)| behavior.log_density(s, a)).collect();
        let advantages = (0..states.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let batch = SurrogateBatch { states, actions, behavior_logp, advantages };
        let mut p = behavior.clone();
        for c in p.weights.iter_mut() {
            *c *= rng.random_range(0.7..1.3);
        }
        for row in p.actions.iter_mut() {
            row.iter_mut().for_each(|a| *a += rng.random_range(-0.2..0.2));
        }
        for c in p.centers.iter_mut() {
            c.iter_mut().for_each(|x| *x += rng.random_range(-0.2..0.2));
        }
        let analytic = surrogate_loss(&p, &batch).map_err(|e| e.to_string())?.gradient;

        let h = 1e-6;
        let mut compare = |a: f64, perturb: &dyn Fn(&mut MoiePolicy, f64)| -> Result<(), String> {
            let (mut plus, mut minus) = (p.clone(), p.clone());
            perturb(&mut plus, h);
            perturb(&mut minus, -h);
            let fd = (surrogate_value(&plus, &batch).map_err(|e| e.to_string())?
                - surrogate_value(&minus, &batch).map_err(|e| e.to_string())?)
                / (2.0 * h);
            worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-4));
            Ok(())
        };
        for i in 0..k {
            compare(analytic.weights[i], &|q, d| q.weights[i] += d)?;
            for j in 0..da {
                compare(analytic.actions[i][j], &|q, d| q.actions[i][j] += d)?;
            }
            for j in 0..ds {
                compare(analytic.centers[i][j], &|q, d| q.centers[i][j] += d)?;
            }
        }
        for j in 0..da {
            compare(analytic.sigma[j], &|q, d| q.sigma[j] += d)?;
        }
    }
    check(worst <= 1e-4, format!("max relative error {worst:.2e} over 50 instances"))
}

fn pendulum(seed: u64, iterations: usize) -> ExperimentConfig {
    ExperimentConfig { seed, iterations, ..ExperimentConfig::default() }
}

fn constraint_safety() -> Outcome {
    let cfg = pendulum(0, 50);
    let eps = cfg.epsilon;
    let mut prev: Option<MoiePolicy> = None;
    let mut problems = Vec::new();
    let mut worst_kl: f64 = 0.0;
    let (mut swaps, mut compressions) = (0, 0);
    run_with_observer(&cfg, RunOptions::default(), |r, policy, data| {
        // iteration 0 re-anchors the initial policy before updating, so its
        // reference is only visible through the record
        let kl = match &prev {
            Some(q) => expected_kl(policy, q, &data.states()),
            None => r.expected_kl,
        };
        worst_kl = worst_kl.max(kl);
        if kl > eps + 1e-8 {
            problems.push(format!("iteration {} KL {kl}", r.iteration));
        }
        if policy.entropy() < r.beta - 1e-8 {
            problems.push(format!("iteration {} entropy {} < {}", r.iteration, policy.entropy(), r.beta));
        }
        if r.swapped > 0 {
            swaps += 1;
            if r.swap_kl > eps {
                problems.push(format!("iteration {} swap KL {}", r.iteration, r.swap_kl));
            }
        }
        if r.compress_removed > 0 {
            compressions += 1;
            if r.compress_kl > eps {
                problems.push(format!("iteration {} compression KL {}", r.iteration, r.compress_kl));
            }
        }
        prev = Some(policy.clone());
    })
    .map_err(|e| e.to_string())?;
    check(
        problems.is_empty(),
        format!(
            "max KL {worst_kl:.5} (eps {eps}), {swaps} swaps, {compressions} compressions{}",
            if problems.is_empty() { String::new() } else { format!("; {}", problems.join(", ")) }
        ),
    )
}

fn unmatched(out: &RunOutput) -> Vec<usize> {
    let visited = out.visited.as_ref().expect("states archived");
    unmatched_centers(&out.policy, &ProvenanceIndex::new(visited))
}

fn provenance(standard: &[RunOutput]) -> Outcome {
    let bad: Vec<String> = standard
        .iter()
        .enumerate()
        .filter_map(|(seed, out)| {
            let u = unmatched(out);
            (!u.is_empty()).then(|| format!("seed {seed} centers {u:?}"))
        })
        .collect();
    let diff = run_diffproto(&pendulum(0, 100), RunOptions { archive_states: true }).map_err(|e| e.to_string())?;
    let diff_unmatched = unmatched(&diff).len();
    check(
        bad.is_empty() && diff_unmatched >= 1,
        format!(
            "standard runs: {} unmatched; diffproto: {diff_unmatched} of {} active centers off the data",
            if bad.is_empty() { "none".to_string() } else { bad.join(", ") },
            diff.policy.active_count()
        ),
    )
}

fn learning_progress(runs: &[RunOutput]) -> Outcome {
    let mut improved = 0;
    let mut reached = 0;
    let mut lines = Vec::new();
    for (seed, out) in runs.iter().enumerate() {
        let evals: Vec<f64> = out.records.iter().map(|r| r.eval_mean).collect();
        let first = evals[..10].iter().sum::<f64>() / 10.0;
        let last = evals[evals.len() - 10..].iter().sum::<f64>() / 10.0;
        improved += usize::from(last - first >= 300.0);
        reached += usize::from(last >= -400.0);
        lines.push(format!("seed {seed}: {first:.0} -> {last:.0}"));
    }
    check(
        improved >= 4 && reached >= 3,
        format!("{improved}/5 improved by 300, {reached}/5 reached -400 ({})", lines.join("; ")),
    )
}

fn swap_objective_oracle() -> Outcome {
    let mut rng = seeded_rng(9);
    let mut worst: f64 = 0.0;
    for _ in 0..500 {
        let k = rng.random_range(1..=8);
        let n = rng.random_range(1..=k);
        let phi: Vec<Vec<f64>> =
            (0..rng.random_range(1..40)).map(|_| (0..k).map(|_| rng.random_range(0.0..=1.0)).collect()).collect();
        let fast = swap_objective_from_features(&phi, n).map_err(|e| e.to_string())?;
        let naive = phi
            .iter()
            .map(|f| {
                let mut sorted = f.clone();
                sorted.sort_by(|a, b| b.total_cmp(a));
                sorted[0] - sorted[..n].iter().sum::<f64>() / n as f64
            })
            .sum::<f64>()
            / phi.len() as f64;
        worst = worst.max((fast - naive).abs());
    }
    check(worst <= 1e-12, format!("max abs difference {worst:.2e} over 500 instances"))
}

fn determinism() -> Outcome {
    let cfg = pendulum(7, 20);
    let dirs = [tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?];
    for d in &dirs {
        train_to_dir(&cfg, d.path(), RunOptions::default()).map_err(|e| e.to_string())?;
    }
    let read = |name: &str| -> Result<Vec<Vec<u8>>, String> {
        dirs.iter().map(|d| std::fs::read(d.path().join(name)).map_err(|e| e.to_string())).collect()
    };
    let metrics = read(METRICS_FILE)?;
    let policy = read(POLICY_FILE)?;
    check(
        metrics[0] == metrics[1] && policy[0] == policy[1],
        format!(
            "metrics identical: {}, policy identical: {} ({} + {} bytes)",
            metrics[0] == metrics[1],
            policy[0] == policy[1],
            metrics[0].len(),
            policy[0].len()
        ),
    )
}

fn round_trip() -> Outcome {
    let mut rng = seeded_rng(11);
    let mut mismatches = 0;
    for _ in 0..100 {
        let k = rng.random_range(1..=12);
        let ds = rng.random_range(1..=6);
        let da = rng.random_range(1..=4);
        let mut p = random_policy(&mut rng, k, ds, da);
        for i in 0..k {
            if rng.random_bool(0.3) {
                p.weights[i] = 0.0;
                p.active[i] = false;
            }
        }
        p.tau = rng.random_range(0.01..5.0);
        p.normalizer.frozen = rng.random_bool(0.5);
        let text = policy_to_string(&p);
        let again = parse_policy(&text).map(|q| policy_to_string(&q));
        if again.as_deref() != Ok(text.as_str()) {
            mismatches += 1;
        }
    }
    check(mismatches == 0, format!("{mismatches} of 100 policies changed on a round trip"))
}

fn main() -> ExitCode {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let run = |n: usize| wanted.is_empty() || wanted.contains(&n);
    let mut failed = 0;
    let mut report = |n: usize, name: &str, start: Instant, outcome: Outcome| {
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n:>2} PASS  {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name}: {detail} [{secs:.1}s]");
            }
        }
    };

    let simple: [(usize, &str, fn() -> Outcome); 6] = [
        (1, "parameter counts", parameter_counts),
        (2, "bound validity", bound_validity),
        (3, "projection oracle", projection_oracle),
        (4, "GAE equivalence", gae_equivalence),
        (5, "gradient checks", gradient_checks),
        (6, "constraint safety", constraint_safety),
    ];
    for (n, name, f) in simple {
        if run(n) {
            let t = Instant::now();
            report(n, name, t, f());
        }
    }

    if run(7) || run(8) {
        let t = Instant::now();
        let runs: Result<Vec<RunOutput>, String> = (0..5)
            .map(|seed| {
                run_with_observer(&pendulum(seed, 300), RunOptions { archive_states: true }, |_, _, _| {})
                    .map_err(|e| format!("seed {seed}: {e}"))
            })
            .collect();
        match runs {
            Ok(runs) => {
                if run(8) {
                    report(8, "learning progress", t, learning_progress(&runs));
                }
                if run(7) {
                    let t = Instant::now();
                    report(7, "provenance", t, provenance(&runs));
                }
            }
            Err(e) => {
                for n in [7, 8] {
                    if run(n) {
                        report(n, "standard runs", t, Err(e.clone()));
                    }
                }
            }
        }
    }

    let rest: [(usize, &str, fn() -> Outcome); 3] =
        [(9, "swap objective oracle", swap_objective_oracle), (10, "determinism", determinism), (11, "round trip", round_trip)];
    for (n, name, f) in rest {
        if run(n) {
            let t = Instant::now();
            report(n, name, t, f());
        }
    }

    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    }
}
