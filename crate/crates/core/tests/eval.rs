use cgsr::eval::{metrics, rank_target, RankingResult};
use proptest::prelude::*;

#[test]
fn hand_computed_metrics() {
    // ranks 1, 3, 30
    let m = metrics(&[1, 3, 30], 20).unwrap();
    assert_eq!(m.hr, 2.0 / 3.0);
    assert_eq!(m.mrr, (1.0 + 1.0 / 3.0) / 3.0);
    assert_eq!(m.ndcg, (1.0 + 1.0 / 4f64.log2()) / 3.0);
}

#[test]
fn csv_and_summary_layout() {
    let r = RankingResult::from_ranks(vec![1, 2], &[1, 5]).unwrap();
    let mut buf = Vec::new();
    r.write_csv(&mut buf).unwrap();
    let ndcg5 = (1.0 + 1.0 / 3f64.log2()) / 2.0;
    assert_eq!(
        String::from_utf8(buf).unwrap(),
        format!("metric,K,value\nHR,1,0.5\nHR,5,1\nMRR,1,0.5\nMRR,5,0.75\nNDCG,1,0.5\nNDCG,5,{ndcg5}\n")
    );
    let mut buf = Vec::new();
    r.write_summary(&mut buf).unwrap();
    assert!(String::from_utf8(buf).unwrap().starts_with("samples = 2\nhr@1 = 0.5\n"));
}

#[test]
fn invalid_inputs() {
    assert!(metrics(&[], 5).is_err());
    assert!(metrics(&[1], 0).is_err());
    assert!(metrics(&[0], 5).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 128, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn metrics_grow_with_cutoff(ranks in prop::collection::vec(1usize..60, 1..40), k in 1usize..50) {
        let a = metrics(&ranks, k).unwrap();
        let b = metrics(&ranks, k + 1).unwrap();
        prop_assert!(a.hr <= b.hr && a.mrr <= b.mrr && a.ndcg <= b.ndcg);
        prop_assert!(0.0 <= a.mrr && a.mrr <= a.ndcg + 1e-15 && a.ndcg <= a.hr + 1e-15 && a.hr <= 1.0);
    }

    #[test]
    fn rank_is_invariant_to_monotone_rescaling(scores in prop::collection::vec(-5i32..5, 1..30), t in 0usize..30, shift in -3i32..3) {
        let t = t % scores.len();
        let base: Vec<f64> = scores.iter().map(|&s| s as f64).collect();
        let scaled: Vec<f64> = base.iter().map(|s| 4.0 * s + shift as f64).collect();
        let r = rank_target(&base, t);
        prop_assert_eq!(r, rank_target(&scaled, t));
        prop_assert_eq!(r, 1 + base.iter().enumerate().filter(|&(i, &s)| s > base[t] || (s == base[t] && i < t)).count());
    }

    #[test]
    fn ranks_are_a_permutation(scores in prop::collection::vec(-3i32..3, 1..20)) {
        let s: Vec<f64> = scores.iter().map(|&x| x as f64).collect();
        let mut ranks: Vec<usize> = (0..s.len()).map(|t| rank_target(&s, t)).collect();
        ranks.sort_unstable();
        prop_assert_eq!(ranks, (1..=s.len()).collect::<Vec<_>>());
    }
}
