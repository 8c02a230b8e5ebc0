mod common;

use lge_core::agent::{AgentConfig, Sac};
use lge_core::replay::{Batch, GoalPredicate, HerConfig, ReplayBuffer, TransitionIn};
use lge_core::Result;
use ndarray::{concatenate, ArrayView2, Axis};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_config(tau: f64, target_entropy: f64) -> AgentConfig {
    AgentConfig {
        networks: vec![8, 8],
        batch_size: 16,
        polyak_update_coefficient: tau,
        target_entropy,
        ..AgentConfig::default()
    }
}

fn random_batch(n: usize, rng: &mut ChaCha8Rng) -> Batch {
    Batch {
        obs: common::random_matrix(n, 2, 3.0, rng),
        actions: common::random_matrix(n, 2, 1.0, rng),
        next_obs: common::random_matrix(n, 2, 3.0, rng),
        goals: common::random_matrix(n, 2, 3.0, rng),
        rewards: (0..n).map(|_| if rng.random_bool(0.3) { 0.0 } else { -1.0 }).collect(),
        dones: (0..n).map(|_| if rng.random_bool(0.2) { 1.0 } else { 0.0 }).collect(),
        sources: Vec::new(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn target_networks_are_exact_convex_combinations(tau in 0.001f64..=1.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sac = Sac::new(small_config(tau, -2.0), 2, 2, &mut rng).unwrap();
        for _ in 0..3 {
            let batch = random_batch(16, &mut rng);
            let old: Vec<Vec<f64>> = [sac.target_critics().0, sac.target_critics().1]
                .iter()
                .map(|m| m.params().to_vec())
                .collect();
            sac.update(&batch, &mut rng).unwrap();
            let (c1, c2) = sac.critics();
            let (t1, t2) = sac.target_critics();
            for ((online, target), old) in [(c1, t1), (c2, t2)].iter().zip(&old) {
                for ((o, t), p) in online.params().iter().zip(target.params()).zip(old) {
                    prop_assert_eq!(t.to_bits(), ((1.0 - tau) * p + tau * o).to_bits());
                }
            }
        }
    }

    #[test]
    fn temperature_stays_positive(target_entropy in -20.0f64..20.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sac = Sac::new(small_config(0.005, target_entropy), 2, 2, &mut rng).unwrap();
        for _ in 0..20 {
            let batch = random_batch(16, &mut rng);
            sac.update(&batch, &mut rng).unwrap();
            prop_assert!(sac.temperature() > 0.0 && sac.temperature().is_finite());
        }
    }

    #[test]
    fn critic_target_uses_twin_minimum(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sac = Sac::new(small_config(0.5, -2.0), 2, 2, &mut rng).unwrap();
        // Let the two target critics drift apart.
        for _ in 0..5 {
            let batch = random_batch(16, &mut rng);
            sac.update(&batch, &mut rng).unwrap();
        }
        let batch = random_batch(16, &mut rng);
        let noise = common::random_matrix(16, 2, 2.0, &mut rng);
        let details = sac.critic_target(&batch, &noise).unwrap();

        let x = concatenate(Axis(1), &[batch.next_obs.view(), batch.goals.view()]).unwrap();
        let out = sac.actor().forward_batch(x.view()).unwrap();
        let (t1, t2) = sac.target_critics();
        for i in 0..16 {
            let mut a = [0.0; 2];
            let mut logp = 0.0;
            for j in 0..2 {
                let log_std = out[(i, 2 + j)].clamp(-20.0, 2.0);
                let e = noise[(i, j)];
                a[j] = (out[(i, j)] + log_std.exp() * e).tanh();
                logp += -0.5 * e * e - 0.5 * (2.0 * std::f64::consts::PI).ln() - log_std - (1.0 - a[j] * a[j] + 1e-6).ln();
            }
            let qin: Vec<f64> = x.row(i).iter().copied().chain(a).collect();
            let q1 = t1.forward(&qin).unwrap()[0];
            let q2 = t2.forward(&qin).unwrap()[0];
            let y = batch.rewards[i] + 0.99 * (1.0 - batch.dones[i]) * (q1.min(q2) - sac.temperature() * logp);
            prop_assert!((details.target[i] - y).abs() < 1e-9, "{} vs {}", details.target[i], y);
            prop_assert!((details.next_q1[i] - q1).abs() < 1e-12 && (details.next_q2[i] - q2).abs() < 1e-12);
        }
    }
}

struct Within(f64);

impl GoalPredicate for Within {
    fn achieved_batch(&self, achieved: ArrayView2<'_, f64>, goals: ArrayView2<'_, f64>) -> Result<Vec<bool>> {
        Ok(achieved
            .rows()
            .into_iter()
            .zip(goals.rows())
            .map(|(a, g)| a.iter().zip(g).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt() < self.0)
            .collect())
    }
}

/// One-step task: from the origin, move onto one of four neighbouring
/// goals. The agent must learn to steer by the goal input; success is
/// measured with the greedy (mean) action.
#[test]
fn learns_one_step_goal_task() {
    let goals = [[0.7, 0.0], [-0.7, 0.0], [0.0, 0.7], [0.0, -0.7]];
    let cfg = AgentConfig {
        networks: vec![64, 64],
        batch_size: 64,
        target_entropy: -2.0,
        ..AgentConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut sac = Sac::new(cfg, 2, 2, &mut rng).unwrap();
    let mut buf = ReplayBuffer::new(2, 2, 100_000).unwrap();
    let pred = Within(0.3);
    let start = [0.0, 0.0];
    let mut updates = 0;
    let mut steps = 0;
    while updates < 5000 {
        let g = goals[rng.random_range(0..4)];
        let a = sac.act(&start, &g, false, &mut rng).unwrap();
        buf.begin_episode(&start).unwrap();
        buf.append(TransitionIn {
            action: &a,
            next_obs: &a,
            goal: Some(&g),
            done: true,
            terminal: true,
        })
        .unwrap();
        steps += 1;
        if steps >= 100 {
            let batch = buf.sample_batch(64, HerConfig::default(), &pred, &mut rng).unwrap();
            sac.update(&batch, &mut rng).unwrap();
            updates += 1;
        }
    }
    let trials = 200;
    let hits = (0..trials)
        .filter(|i| {
            let g = goals[i % 4];
            let a = sac.act(&start, &g, true, &mut rng).unwrap();
            pred.achieved(&a, &g).unwrap()
        })
        .count();
    let rate = hits as f64 / trials as f64;
    assert!(rate > 0.9, "success rate {rate}");
}
