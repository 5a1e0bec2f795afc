use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn ops_all() -> OperatorSet {
    OperatorSet::new(BinaryOp::ALL.to_vec(), UnaryOp::ALL.to_vec()).unwrap()
}

fn ops_safe() -> OperatorSet {
    OperatorSet::new(
        vec![BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul],
        vec![UnaryOp::Sin, UnaryOp::Cos],
    )
    .unwrap()
}

#[test]
fn parse_minimal_sum() {
    let t = ExpressionTree::parse("x0 + x1", 2).unwrap();
    assert_eq!(t.to_canonical(), "(x0 + x1)");
    assert_eq!(t.node_count(), 3);
    assert_eq!(t.count_open_constants(), 0);
    let vars: BTreeSet<usize> = [0, 1].into_iter().collect();
    assert_eq!(t.free_variables(), vars);
}

#[test]
fn parse_open_constants_get_sequential_slots() {
    let t = ExpressionTree::parse("C*cos(x0) + C", 1).unwrap();
    assert_eq!(t.count_open_constants(), 2);
    let mut slots = Vec::new();
    t.for_each(&mut |n| {
        if let NodeKind::OpenConst { slot } = n.kind {
            slots.push(slot);
        }
    });
    assert_eq!(slots, vec![0, 1]);
    assert_eq!(t.free_variables(), [0].into_iter().collect());
}

#[test]
fn parse_rejects_malformed_input_with_position() {
    let err = ExpressionTree::parse("x2 + sin(", 3).unwrap_err();
    match err {
        ExprError::Syntax { pos, .. } => assert_eq!(pos, 9),
        other => panic!("expected syntax error, got {other:?}"),
    }
}

#[test]
fn parse_rejects_out_of_range_variable() {
    let err = ExpressionTree::parse("x5 + 1", 2).unwrap_err();
    match err {
        ExprError::VariableOutOfRange { index, n_vars, .. } => {
            assert_eq!(index, 5);
            assert_eq!(n_vars, 2);
        }
        other => panic!("unexpected error {other:?}"),
    }
}

#[test]
fn parse_literals_are_frozen() {
    let t = ExpressionTree::parse("3.14*x1", 2).unwrap();
    assert_eq!(t.count_open_constants(), 0);
    assert_eq!(t.free_variables(), [1].into_iter().collect());
    t.for_each(&mut |n| {
        if let NodeKind::Literal(v) = n.kind {
            assert_eq!(v, 3.14);
            assert!(!n.editable);
        }
    });
}

#[test]
fn parse_scientific_notation_and_unary_minus() {
    let t = ExpressionTree::parse("6.6743e-11*x0", 1).unwrap();
    t.for_each(&mut |n| {
        if let NodeKind::Literal(v) = n.kind {
            assert_eq!(v, 6.6743e-11);
        }
    });
    let neg_lit = ExpressionTree::parse("-2.5*x0", 1).unwrap();
    let y = neg_lit.evaluate(&[vec![2.0]], &[]).unwrap();
    assert_eq!(y[0], -5.0);
    let neg_var = ExpressionTree::parse("-x0", 1).unwrap();
    assert_eq!(neg_var.to_canonical(), "(0 - x0)");
    let inner = ExpressionTree::parse("(x0 * -2.5)", 1).unwrap();
    assert_eq!(inner.evaluate(&[vec![2.0]], &[]).unwrap()[0], -5.0);
}

#[test]
fn evaluate_simple_sum() {
    let t = ExpressionTree::parse("x0 + x1", 2).unwrap();
    let y = t.evaluate(&[vec![1.0, 2.0]], &[]).unwrap();
    assert_eq!(y, vec![3.0]);
}

#[test]
fn evaluate_with_open_constants() {
    let t = ExpressionTree::parse("C*cos(x0)+C", 1).unwrap();
    let y = t.evaluate(&[vec![0.0]], &[0.5, 0.16]).unwrap();
    assert!((y[0] - 0.66).abs() < 1e-12, "got {}", y[0]);
}

#[test]
fn evaluate_tags_domain_violations_as_nan() {
    let t = ExpressionTree::parse("log(x0)", 1).unwrap();
    let y = t.evaluate(&[vec![-1.0]], &[]).unwrap();
    assert!(y[0].is_nan());
    let s = ExpressionTree::parse("sqrt(x0)", 1).unwrap();
    assert!(s.evaluate(&[vec![-4.0]], &[]).unwrap()[0].is_nan());
    let d = ExpressionTree::parse("x0 / x1", 2).unwrap();
    assert!(d.evaluate(&[vec![1.0, 0.0]], &[]).unwrap()[0].is_nan());
}

#[test]
fn evaluate_checks_dimensions() {
    let t = ExpressionTree::parse("C*x0", 1).unwrap();
    assert!(matches!(
        t.evaluate(&[vec![1.0]], &[]),
        Err(ExprError::DimensionMismatch { .. })
    ));
    assert!(matches!(
        t.evaluate(&[vec![1.0, 2.0]], &[0.5]),
        Err(ExprError::DimensionMismatch { .. })
    ));
}

#[test]
fn evaluate_is_deterministic_bitwise() {
    let t = ExpressionTree::parse("sin(x0)*C + cos(x1)*0.25", 2).unwrap();
    let rows = vec![vec![0.3, 1.7], vec![-2.2, 0.9], vec![5.5, -4.1]];
    let a = t.evaluate(&rows, &[0.77]).unwrap();
    let b = t.evaluate(&rows, &[0.77]).unwrap();
    assert_eq!(a, b);
}

#[test]
fn random_tree_depth_one_is_leaf() {
    let free: BTreeSet<usize> = [0].into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let t = random_tree(&free, &ops_all(), 1, 1, &mut rng);
        assert_eq!(t.node_count(), 1);
        let ok = matches!(
            t.root().kind,
            NodeKind::Variable(0) | NodeKind::OpenConst { .. }
        );
        assert!(ok, "unexpected leaf {:?}", t.root().kind);
    }
}

#[test]
fn random_tree_respects_free_variables_and_depth() {
    let free: BTreeSet<usize> = [1].into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..200 {
        let t = random_tree(&free, &ops_all(), 4, 3, &mut rng);
        assert!(t.depth() <= 4);
        assert!(t.free_variables().is_subset(&free));
        t.for_each(&mut |n| assert!(n.editable || matches!(n.kind, NodeKind::Literal(_))));
    }
}

#[test]
fn random_tree_is_seed_deterministic() {
    let free: BTreeSet<usize> = [0, 2].into_iter().collect();
    let mut a = ChaCha8Rng::seed_from_u64(99);
    let mut b = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..20 {
        let ta = random_tree(&free, &ops_all(), 5, 3, &mut a);
        let tb = random_tree(&free, &ops_all(), 5, 3, &mut b);
        assert_eq!(ta, tb);
    }
}

#[test]
fn prefix_form_is_emitted() {
    let t = ExpressionTree::parse("C*cos(x0) + C", 1).unwrap();
    assert_eq!(t.to_prefix(), "(+ (* C (cos x0)) C)");
}

#[test]
fn substitute_open_constants_freezes_values() {
    let t = ExpressionTree::parse("C*x0 + C", 1).unwrap();
    let s = t.substitute_open_constants(&[2.0, -1.5]).unwrap();
    assert_eq!(s.count_open_constants(), 0);
    assert_eq!(s.to_canonical(), "((2 * x0) + -1.5)");
    let y = s.evaluate(&[vec![3.0]], &[]).unwrap();
    assert_eq!(y[0], 4.5);
}

fn arbitrary_tree(seed: u64, with_literals: bool) -> ExpressionTree {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let free: BTreeSet<usize> = [0, 1, 2].into_iter().collect();
    let t = random_tree(&free, &ops_all(), 4, 3, &mut rng);
    if with_literals {
        use rand::Rng;
        let values: Vec<f64> = (0..t.count_open_constants())
            .map(|_| rng.gen_range(-2.0..2.0))
            .collect();
        t.substitute_open_constants(&values).unwrap()
    } else {
        t
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn roundtrip_canonical_form(seed in any::<u64>(), with_literals in any::<bool>()) {
        let t = arbitrary_tree(seed, with_literals);
        let back = ExpressionTree::parse(&t.to_canonical(), 3).unwrap();
        prop_assert!(back.same_structure(&t), "roundtrip changed {}", t.to_canonical());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    // add/sub/mul with sin/cos stays finite on finite bounded inputs.
    #[test]
    fn closure_on_safe_operators(seed in any::<u64>(), x0 in -5.0..5.0f64, x1 in -5.0..5.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let free: BTreeSet<usize> = [0, 1].into_iter().collect();
        let t = random_tree(&free, &ops_safe(), 4, 2, &mut rng);
        let consts = vec![0.5; t.count_open_constants()];
        let y = t.evaluate(&[vec![x0, x1]], &consts).unwrap();
        prop_assert!(y[0].is_finite());
    }
}
