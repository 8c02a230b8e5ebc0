//! Oracles shared by the integration tests.
#![allow(dead_code)]

use lge_core::tensor::{Activation, Graph, Matrix, Mlp};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_matrix<R: Rng>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Matrix {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-scale..scale))
}

fn projected_output(net: &Mlp, x: &Matrix, c: &Matrix) -> f64 {
    (net.forward_batch(x.view()).unwrap() * c).sum()
}

/// Largest relative error between tape gradients of `sum(c * net(x))` and
/// central differences, over `checks` sampled parameters and every input.
pub fn mlp_gradient_error(widths: &[usize], act: Activation, seed: u64, checks: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Mlp::new(widths, act, &mut rng).unwrap();
    let batch = 3;
    let x = random_matrix(batch, widths[0], 1.0, &mut rng);
    let c = random_matrix(batch, *widths.last().unwrap(), 1.0, &mut rng);

    let mut g = Graph::new();
    let xin = g.variable(x.clone());
    let nodes = net.record(&mut g, xin, true).unwrap();
    let cn = g.constant(c.clone());
    let prod = g.mul(nodes.output, cn).unwrap();
    let loss = g.sum(prod);
    let grads = g.backward(loss).unwrap();
    let analytic = net.flat_grad(&nodes, &grads).unwrap();
    let input_grad = grads.get(xin).unwrap().clone();

    let eps = 1e-6;
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-7);
    let mut worst: f64 = 0.0;
    let n = net.params().len();
    for _ in 0..checks.min(n) {
        let i = rng.random_range(0..n);
        let orig = net.params()[i];
        net.params_mut()[i] = orig + eps;
        let up = projected_output(&net, &x, &c);
        net.params_mut()[i] = orig - eps;
        let down = projected_output(&net, &x, &c);
        net.params_mut()[i] = orig;
        worst = worst.max(rel(analytic[i], (up - down) / (2.0 * eps)));
    }
    for ((r, k), a) in input_grad.indexed_iter() {
        let mut xp = x.clone();
        xp[(r, k)] += eps;
        let up = projected_output(&net, &xp, &c);
        xp[(r, k)] -= 2.0 * eps;
        let down = projected_output(&net, &xp, &c);
        worst = worst.max(rel(*a, (up - down) / (2.0 * eps)));
    }
    worst
}

/// Volume of the unit ball by the two-step recursion `V_d = V_{d-2} 2 pi / d`.
pub fn ball_volume(d: usize) -> f64 {
    match d {
        0 => 1.0,
        1 => 2.0,
        _ => ball_volume(d - 2) * 2.0 * std::f64::consts::PI / d as f64,
    }
}

/// Exhaustive k-th neighbour distances and log-densities.
pub fn brute_force_density(points: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = points.dim();
    let k = ((2.0 * (n as f64).powf(1.0 / d as f64) + 0.5).floor() as usize).clamp(1, n - 1);
    let mut kth = Vec::with_capacity(n);
    for i in 0..n {
        let mut dists: Vec<f64> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (0..d).map(|c| (points[(i, c)] - points[(j, c)]).powi(2)).sum::<f64>())
            .collect();
        dists.sort_by(f64::total_cmp);
        kth.push(dists[k - 1]);
    }
    let logf = kth
        .iter()
        .map(|&sq| (k as f64 / (n as f64 * ball_volume(d) * sq.sqrt().powi(d as i32))).ln())
        .collect();
    (kth, logf)
}

/// Ranks from the k-th neighbour distances: largest distance is rank 1,
/// ties broken by index.
pub fn oracle_ranks(kth: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..kth.len()).collect();
    order.sort_by(|&a, &b| kth[b].total_cmp(&kth[a]).then(a.cmp(&b)));
    let mut rank = vec![0; kth.len()];
    for (pos, &i) in order.iter().enumerate() {
        rank[i] = pos + 1;
    }
    rank
}

/// Truncated geometric probability of rank `r` among `n`.
pub fn truncated_geometric(p: f64, n: usize, r: usize) -> f64 {
    p * (1.0 - p).powi(r as i32 - 1) / (1.0 - (1.0 - p).powi(n as i32))
}

/// Backward-greedy gaps: every consecutive kept pair farther than `d`.
pub fn gaps_exceed(latents: &Matrix, kept: &[usize], d: f64) -> bool {
    kept.windows(2).all(|w| {
        let dist = latents
            .row(w[0])
            .iter()
            .zip(latents.row(w[1]).iter())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        dist > d
    })
}
