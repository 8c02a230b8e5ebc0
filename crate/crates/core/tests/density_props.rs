mod common;

use lge_core::density::{knn_log_density, kth_sq_distances_brute, kth_sq_distances_tree, neighbour_count, GoalSampler};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn dims() -> impl Strategy<Value = usize> {
    prop_oneof![Just(1usize), Just(2), Just(4), Just(16)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn ranks_and_densities_match_exhaustive_oracle(n in 2usize..=64, d in dims(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = common::random_matrix(n, d, 3.0, &mut rng);
        let table = knn_log_density(pts.view()).unwrap();
        let (kth, logf) = common::brute_force_density(&pts);
        prop_assert_eq!(&table.rank, &common::oracle_ranks(&kth));
        for (a, b) in table.log_density.iter().zip(&logf) {
            prop_assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn ranks_invariant_under_positive_scaling(n in 2usize..=64, d in dims(), c in 0.01f64..100.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = common::random_matrix(n, d, 3.0, &mut rng);
        let a = knn_log_density(pts.view()).unwrap();
        let b = knn_log_density((&pts * c).view()).unwrap();
        prop_assert_eq!(&a.rank, &b.rank);
        let shift = -(d as f64) * c.ln();
        for (x, y) in a.log_density.iter().zip(&b.log_density) {
            prop_assert!((y - x - shift).abs() < 1e-8 * x.abs().max(1.0));
        }
    }

    #[test]
    fn tree_search_equals_brute_force(n in 2usize..600, d in dims(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = common::random_matrix(n, d, 3.0, &mut rng);
        let k = neighbour_count(n, d);
        prop_assert_eq!(
            kth_sq_distances_tree(pts.view(), k).unwrap(),
            kth_sq_distances_brute(pts.view(), k).unwrap()
        );
    }

    #[test]
    fn sampler_stays_in_range_and_sums_to_one(p in 0.001f64..=1.0, n in 1usize..3000, seed in any::<u64>()) {
        let s = GoalSampler::new(p).unwrap();
        let total: f64 = (1..=n).map(|r| s.rank_probability(r, n)).sum();
        prop_assert!((total - 1.0).abs() < 1e-9, "{total}");
        for r in [1, n / 2 + 1, n] {
            let want = common::truncated_geometric(p, n, r);
            prop_assert!((s.rank_probability(r, n) - want).abs() <= 1e-12 + 1e-9 * want);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..200 {
            let r = s.sample_rank(n, &mut rng);
            prop_assert!((1..=n).contains(&r));
        }
    }
}

#[test]
fn tree_handles_duplicates_and_large_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut pts = common::random_matrix(3000, 16, 1.0, &mut rng);
    for i in 0..50 {
        let row = pts.row(i).to_owned();
        pts.row_mut(i + 100).assign(&row);
    }
    let k = neighbour_count(3000, 16);
    assert_eq!(
        kth_sq_distances_tree(pts.view(), k).unwrap(),
        kth_sq_distances_brute(pts.view(), k).unwrap()
    );
}
