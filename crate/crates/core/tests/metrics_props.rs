use std::collections::HashSet;

use lge_core::envsim::{EnvConfig, WallSegment};
use lge_core::experiment::{run, Algorithm, RunConfig, RunOptions};
use lge_core::metrics::{flood_fill_reachable, iqm, iqm_trim, RunLog};
use proptest::prelude::*;

/// Depth-first search visiting neighbours in the reverse order of the
/// breadth-first implementation.
fn dfs_reachable(maze: &EnvConfig, cell: f64) -> Option<HashSet<(usize, usize)>> {
    let n = (2.0 * maze.half_width / cell).round() as usize;
    let centre = |c: (usize, usize)| {
        [
            -maze.half_width + (c.0 as f64 + 0.5) * cell,
            -maze.half_width + (c.1 as f64 + 0.5) * cell,
        ]
    };
    let idx = |v: f64| (((v + maze.half_width) / cell).floor().max(0.0) as usize).min(n - 1);
    let start = (idx(maze.start[0]), idx(maze.start[1]));
    if !maze.path_is_clear(centre(start), centre(start)) {
        return None;
    }
    let mut seen = HashSet::from([start]);
    let mut stack = vec![start];
    while let Some(c) = stack.pop() {
        let mut next = Vec::new();
        if c.1 + 1 < n {
            next.push((c.0, c.1 + 1));
        }
        if c.1 > 0 {
            next.push((c.0, c.1 - 1));
        }
        if c.0 + 1 < n {
            next.push((c.0 + 1, c.1));
        }
        if c.0 > 0 {
            next.push((c.0 - 1, c.1));
        }
        for m in next {
            if !seen.contains(&m) && maze.path_is_clear(centre(c), centre(m)) {
                seen.insert(m);
                stack.push(m);
            }
        }
    }
    Some(seen)
}

fn walls() -> impl Strategy<Value = Vec<WallSegment>> {
    prop::collection::vec((-6i32..=6, -6i32..=6, 0i32..8, any::<bool>()), 0..12).prop_map(|v| {
        v.into_iter()
            .map(|(x, y, len, horizontal)| {
                let (x, y) = (x as f64, y as f64);
                let len = len as f64;
                if horizontal {
                    WallSegment::new(x, y, (x + len).min(6.0), y)
                } else {
                    WallSegment::new(x, y, x, (y + len).min(6.0))
                }
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn flood_fill_independent_of_visit_order(walls in walls(), cell in prop_oneof![Just(0.5f64), Just(1.0), Just(2.0)]) {
        let maze = EnvConfig { walls, ..EnvConfig::open_arena(6.0) };
        match (flood_fill_reachable(&maze, cell), dfs_reachable(&maze, cell)) {
            (Ok(a), Some(b)) => prop_assert_eq!(a, b),
            (Err(_), None) => {}
            (a, b) => prop_assert!(false, "disagreement: {:?} vs {:?}", a.map(|s| s.len()), b.map(|s| s.len())),
        }
    }

    #[test]
    fn iqm_trims_a_quarter_and_ignores_order(mut values in prop::collection::vec(-100.0f64..100.0, 1..40), rot in 0usize..40) {
        let n = values.len();
        prop_assert_eq!(iqm_trim(n), n / 4);
        let mut sorted = values.clone();
        sorted.sort_by(f64::total_cmp);
        let k = n / 4;
        let oracle = sorted[k..n - k].iter().sum::<f64>() / (n - 2 * k) as f64;
        let a = iqm(&values).unwrap();
        prop_assert_eq!(a, oracle);
        values.rotate_left(rot % n);
        values.reverse();
        prop_assert_eq!(iqm(&values).unwrap().to_bits(), a.to_bits());
    }

    #[test]
    fn outer_pair_is_trimmed_when_count_reaches_multiple_of_four(values in prop::collection::vec(-100.0f64..100.0, 1..10)) {
        // Length 4m + 2 grows to 4(m + 1): one more value is dropped per end.
        let mut v: Vec<f64> = values.iter().cycle().take(4 * values.len() + 2).copied().collect();
        let before = iqm(&v).unwrap();
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min) - 1.0;
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 1.0;
        v.push(lo);
        v.push(hi);
        prop_assert_eq!(iqm(&v).unwrap(), before);
    }
}

#[test]
fn coverage_is_monotone_over_a_run() {
    let mut cfg = RunConfig::new(Algorithm::Random);
    cfg.total_steps = 5000;
    let log: RunLog = run(&cfg, &EnvConfig::default_maze(), &RunOptions::default())
        .unwrap()
        .log;
    assert_eq!(log.records.len(), 5000);
    for w in log.records.windows(2) {
        assert!(w[1].cells_visited >= w[0].cells_visited);
        assert!(w[1].coverage >= w[0].coverage);
        assert_eq!(w[1].timestep, w[0].timestep + 1);
    }
    assert!((0.0..=1.0).contains(&log.final_coverage()));
}
