use std::sync::Arc;

use cgsr::numcore::{grad_check, Array, NumError, Segments, Tape, Var};
use proptest::prelude::*;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-5;

fn arr(rows: usize, cols: usize) -> impl Strategy<Value = Array> {
    prop::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |v| Array::from_vec(rows, cols, v))
}

/// Projects an op's output onto fixed random weights so every output
/// coordinate contributes to a scalar loss.
fn project(tape: &mut Tape, out: Var, weights: &Array) -> Result<Var, NumError> {
    let w = tape.leaf(weights.clone());
    tape.dot(out, w)
}

fn assert_grads<F>(f: F, params: &[Array])
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, NumError>,
{
    let report = grad_check(f, params, STEP, TOL).unwrap();
    assert!(
        report.passed(),
        "max rel error {:.3e} in {:?}",
        report.max_rel_error(),
        report.failures().map(|p| p.param).collect::<Vec<_>>()
    );
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn matmul_gradients(a in arr(3, 4), b in arr(4, 2), w in arr(3, 2)) {
        assert_grads(|t, v| { let o = t.matmul(v[0], v[1])?; project(t, o, &w) }, &[a, b]);
    }

    #[test]
    fn add_sub_hadamard_gradients(a in arr(2, 3), b in arr(2, 3), w in arr(2, 3)) {
        assert_grads(|t, v| {
            let s = t.add(v[0], v[1])?;
            let d = t.sub(s, v[1])?;
            let h = t.hadamard(d, v[1])?;
            project(t, h, &w)
        }, &[a, b]);
    }

    #[test]
    fn broadcast_row_gradients(a in arr(4, 3), r in arr(1, 3), w in arr(4, 3)) {
        assert_grads(|t, v| { let o = t.add(v[0], v[1])?; project(t, o, &w) }, &[a, r]);
    }

    #[test]
    fn scale_affine_mul_scalar_gradients(a in arr(3, 2), s in arr(1, 1), w in arr(3, 2)) {
        assert_grads(|t, v| {
            let x = t.scale(v[0], -1.5)?;
            let x = t.affine(x, 0.5, 2.0)?;
            let x = t.mul_scalar(x, v[1])?;
            project(t, x, &w)
        }, &[a, s]);
    }

    #[test]
    fn concat_and_transpose_gradients(a in arr(2, 3), b in arr(1, 3), c in arr(3, 2), w in arr(3, 5)) {
        assert_grads(|t, v| {
            let rows = t.concat_rows(&[v[0], v[1]])?;
            let ct = t.transpose(v[2])?;
            let ct = t.transpose(ct)?;
            let cols = t.concat_cols(&[rows, ct])?;
            project(t, cols, &w)
        }, &[a, b, c]);
    }

    #[test]
    fn gather_with_repeats_gradients(a in arr(4, 2), w in arr(5, 2)) {
        assert_grads(|t, v| { let g = t.gather_rows(v[0], &[3, 0, 3, 1, 3])?; project(t, g, &w) }, &[a]);
    }

    #[test]
    fn segment_softmax_and_sum_gradients(e in arr(6, 1), x in arr(6, 3), w in arr(3, 3)) {
        let seg = Arc::new(Segments::from_sorted_ids(&[0, 0, 0, 2, 2, 2], 3).unwrap());
        assert_grads(|t, v| {
            let a = t.segment_softmax(v[0], Arc::clone(&seg))?;
            let s = t.segment_weighted_sum(v[1], a, Arc::clone(&seg))?;
            project(t, s, &w)
        }, &[e, x]);
    }

    #[test]
    fn pointwise_gradients(a in arr(3, 3), w in arr(3, 3)) {
        // Keep clear of the leaky ReLU kink for a clean comparison.
        let a = a.map(|x| if x.abs() < 0.05 { x + 0.1 } else { x });
        assert_grads(|t, v| {
            let l = t.leaky_relu(v[0], 0.2)?;
            let s = t.sigmoid(l)?;
            let lg = t.log_clamped(s, 1e-12, 1.0 - 1e-12)?;
            project(t, lg, &w)
        }, &[a]);
    }

    #[test]
    fn mean_dot_sum_gradients(a in arr(2, 2), b in arr(2, 2), c in arr(2, 2)) {
        assert_grads(|t, v| {
            let m = t.mean_of(&[v[0], v[1], v[2]])?;
            let d = t.dot(m, v[0])?;
            let s = t.sum(v[2])?;
            t.add(d, s)
        }, &[a, b, c]);
    }

    #[test]
    fn softmax_sums_to_one(e in arr(7, 1)) {
        let mut t = Tape::new();
        let x = t.leaf(e.map(|v| 40.0 * v));
        let seg = Arc::new(Segments::from_sorted_ids(&[0, 0, 1, 1, 1, 3, 3], 4).unwrap());
        let p = t.segment_softmax(x, Arc::clone(&seg)).unwrap();
        for s in 0..4 {
            let r = seg.range(s);
            if r.is_empty() { continue; }
            let total: f64 = t.value(p).data()[r].iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn fan_out_accumulates() {
    // f(x) = x·x + 3x at x = 2 → f' = 2x + 3 = 7
    let mut t = Tape::new();
    let x = t.leaf(Array::scalar(2.0));
    let sq = t.hadamard(x, x).unwrap();
    let lin = t.scale(x, 3.0).unwrap();
    let f = t.add(sq, lin).unwrap();
    let g = t.backward(f).unwrap();
    assert_eq!(g.get(x).item(), 7.0);
}

#[test]
fn unreached_leaf_has_zero_gradient() {
    let mut t = Tape::new();
    let x = t.leaf(Array::scalar(1.0));
    let y = t.leaf(Array::from_vec(2, 2, vec![1.0; 4]));
    let g = t.backward(x).unwrap();
    assert!(!g.is_reached(y));
    assert_eq!(g.get(y), Array::zeros(2, 2));
}

#[test]
fn errors() {
    let mut t = Tape::new();
    let a = t.leaf(Array::zeros(2, 3));
    let b = t.leaf(Array::zeros(2, 3));
    assert!(matches!(t.matmul(a, b), Err(NumError::Shape { op: "matmul", .. })));
    assert!(matches!(t.backward(a), Err(NumError::NotScalar { shape: (2, 3) })));
    assert!(matches!(t.gather_rows(a, &[2]), Err(NumError::IndexOutOfRange { .. })));
    assert!(matches!(t.mean_of(&[]), Err(NumError::EmptyInput { .. })));
    let big = t.leaf(Array::scalar(f64::MAX));
    assert!(matches!(t.scale(big, 10.0), Err(NumError::NonFinite { op: "scale" })));
    assert!(Segments::from_sorted_ids(&[1, 0], 2).is_err());
}

#[test]
fn leaky_relu_kink_is_detected() {
    // Central differences straddling 0 are skipped rather than failed.
    let report = grad_check(
        |t, v| {
            let l = t.leaky_relu(v[0], 0.2)?;
            t.sum(l)
        },
        &[Array::scalar(1e-9)],
        1e-6,
        1e-8,
    )
    .unwrap();
    assert_eq!(report.params[0].near_kink, vec![0]);
    assert!(report.passed());
}

#[test]
fn forward_is_bit_reproducible() {
    let run = || {
        let mut t = Tape::new();
        let a = t.leaf(Array::from_vec(3, 3, (0..9).map(|i| (i as f64).sin()).collect()));
        let b = t.matmul(a, a).unwrap();
        let s = t.sigmoid(b).unwrap();
        let l = t.sum(s).unwrap();
        let g = t.backward(l).unwrap();
        (
            t.value(l).item().to_bits(),
            g.get(a).data().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
        )
    };
    assert_eq!(run(), run());
}
