use cgsr::graphs::build_session_graph;
use cgsr::stats::{build_grid, build_grid_oriented, pab, pair_probabilities, Orientation, StatsError, GROUPS};
use cgsr::Session;
use proptest::prelude::*;

fn sessions(items: &[Vec<usize>]) -> Vec<Session> {
    items
        .iter()
        .enumerate()
        .map(|(k, s)| Session::new(format!("s{k}"), s.clone()))
        .collect()
}

#[test]
fn worked_example_conditionals() {
    let s = sessions(&[vec![0, 1, 2, 4, 3], vec![1, 2, 4], vec![0, 2, 1]]);
    let g = build_session_graph(&s, 5).unwrap();
    // item 3 follows item 2 every time; item 2 follows item 3 a third of the time
    assert_eq!(pab(&g, 2, 1), Ok(1.0));
    assert_eq!(pab(&g, 1, 2), Ok(1.0 / 3.0));
    assert_eq!(pab(&g, 0, 3), Err(StatsError::NoOutgoing(3)));
    assert_eq!(pab(&g, 9, 0), Err(StatsError::IndexOutOfRange { index: 9, n: 5 }));
}

/// Forty pairs where `b` always moves to `a` while `a` wanders off to a sink
/// more and more often, so `p(b|a)` falls as `p(a|b)` stays at 1.
fn planted() -> (Vec<Session>, usize) {
    let n = 40;
    let sink = 2 * n;
    let mut out = Vec::new();
    for k in 0..n {
        let (a, b) = (k, n + k);
        out.push(vec![b, a]);
        out.push(vec![a, b]);
        for _ in 0..=k {
            out.push(vec![a, sink]);
        }
    }
    (sessions(&out), sink + 1)
}

#[test]
fn planted_asymmetry_lands_off_the_diagonal() {
    let (s, n) = planted();
    let g = build_session_graph(&s, n).unwrap();
    let grid = build_grid(&g, Some(0.5)).unwrap();
    assert_eq!(grid.pairs, 40);
    assert_eq!(grid.asymmetric_pairs, Some(40));
    for i in 0..GROUPS {
        assert_eq!(grid.grid[i][GROUPS - 1 - i], 4, "{:?}", grid.grid);
    }
    assert_eq!(grid.upper_a_given_b, [1.0; GROUPS]);

    let mut csv = Vec::new();
    grid.write_csv(&mut csv).unwrap();
    let csv = String::from_utf8(csv).unwrap();
    assert_eq!(csv.lines().count(), GROUPS);
    assert_eq!(csv.lines().next().unwrap(), "0,0,0,0,0,0,0,0,0,4");

    let mut b = Vec::new();
    grid.write_boundaries(&mut b).unwrap();
    let b = String::from_utf8(b).unwrap();
    assert!(b.starts_with("group,upper_p_a_given_b,upper_p_b_given_a\n0,1.00000000000,"));
    assert!(b.contains("# pairs = 40\n# epsilon = 0.5\n# asymmetric_pairs = 40\n"));
}

fn corpus() -> impl Strategy<Value = Vec<Session>> {
    prop::collection::vec(prop::collection::vec(0usize..15, 2..8), 10..40).prop_map(|v| sessions(&v))
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn grid_conserves_pairs_and_balances_rows(s in corpus()) {
        let g = build_session_graph(&s, 15).unwrap();
        let Ok(grid) = build_grid(&g, None) else { return Ok(()) };
        prop_assert_eq!(grid.total(), grid.pairs as u64);
        let rows: Vec<u64> = grid.grid.iter().map(|r| r.iter().sum()).collect();
        let cols: Vec<u64> = (0..GROUPS).map(|j| grid.grid.iter().map(|r| r[j]).sum()).collect();
        for sums in [rows, cols] {
            let (lo, hi) = (sums.iter().min().unwrap(), sums.iter().max().unwrap());
            prop_assert!(hi - lo <= 1, "{:?}", sums);
        }
        for w in grid.upper_a_given_b.windows(2).chain(grid.upper_b_given_a.windows(2)) {
            prop_assert!(w[0] <= w[1]);
        }
    }

    #[test]
    fn swapping_roles_transposes_the_grid(s in corpus()) {
        let g = build_session_graph(&s, 15).unwrap();
        if let Ok(low) = build_grid(&g, Some(0.1)) {
            let high = build_grid_oriented(&g, Orientation::HigherFirst, Some(0.1)).unwrap();
            prop_assert_eq!(high.grid, low.transposed());
            prop_assert_eq!(high.upper_a_given_b, low.upper_b_given_a);
            prop_assert_eq!(high.asymmetric_pairs, low.asymmetric_pairs);
        }
    }

    #[test]
    fn conditionals_are_probabilities(s in corpus()) {
        let g = build_session_graph(&s, 15).unwrap();
        for p in pair_probabilities(&g, Orientation::LowerFirst) {
            prop_assert!(p.a < p.b);
            prop_assert!((0.0..=1.0).contains(&p.p_a_given_b) && (0.0..=1.0).contains(&p.p_b_given_a));
            prop_assert!(p.p_a_given_b > 0.0 || p.p_b_given_a > 0.0);
            prop_assert_eq!(Ok(p.p_a_given_b), pab(&g, p.a, p.b));
        }
    }
}
