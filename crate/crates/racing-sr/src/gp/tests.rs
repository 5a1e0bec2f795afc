use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::expr::{BinaryOp, UnaryOp};
use crate::oracle::BenchmarkSpec;

fn ops(spec: &str) -> OperatorSet {
    OperatorSet::parse(spec).unwrap()
}

fn set(vars: &[usize]) -> BTreeSet<usize> {
    vars.iter().copied().collect()
}

fn entry(id: u64, expr: &str, n_vars: usize, control: &[usize]) -> PoolEntry {
    PoolEntry {
        id,
        tree: ExpressionTree::parse(expr, n_vars).unwrap(),
        result: None,
        schedule: Schedule::initial(set(control)),
        control_set: set(control),
    }
}

fn with_fitness(mut e: PoolEntry, fitness: Vec<f64>) -> PoolEntry {
    let l = e.tree.count_open_constants();
    e.result = Some(TrialResult {
        constants: vec![vec![0.0; l]; fitness.len()],
        fitness,
    });
    e
}

#[test]
fn mutate_on_single_leaf_grows_or_replaces_but_never_deletes() {
    let tree = ExpressionTree::parse("x0", 1).unwrap();
    let free = set(&[0]);
    let mut grew = false;
    for seed in 0..60 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = mutate(&tree, &ops("+,-,*"), &free, 60, &mut rng);
        assert!(out.node_count() >= 1);
        assert!(out.free_variables().is_subset(&free));
        if out.depth() >= 2 {
            grew = true;
            // Insertion keeps the original subtree somewhere below the new op.
            let mut found_leaf = false;
            out.for_each(&mut |n| {
                if matches!(n.kind, NodeKind::Variable(0) | NodeKind::OpenConst { .. }) {
                    found_leaf = true;
                }
            });
            assert!(found_leaf);
        }
    }
    assert!(grew, "insert was never selected across 60 seeds");
}

#[test]
fn mutate_arity_preserving_replace_keeps_children() {
    // Leaves frozen: only the root is editable, so the applicable kinds are
    // same-arity replacement and insertion above the root.
    let mut tree = ExpressionTree::parse("x0 + x1", 2).unwrap();
    tree.for_each_mut(&mut |n| {
        if n.is_leaf() {
            n.editable = false;
        }
    });
    let free = set(&[0, 1]);
    let mut replaced = false;
    for seed in 0..60 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = mutate(&tree, &ops("+,-,*,/"), &free, 60, &mut rng);
        if out.node_count() == 3 {
            match out.root().kind {
                NodeKind::Binary(op) => {
                    assert_ne!(op, BinaryOp::Add, "same-arity replace must change the op");
                    replaced = true;
                }
                ref other => panic!("unexpected root {other:?}"),
            }
            assert_eq!(out.root().children[0].kind, NodeKind::Variable(0));
            assert_eq!(out.root().children[1].kind, NodeKind::Variable(1));
        } else {
            // Insertion above the root; the frozen sum must survive intact.
            assert!(out.node_count() > 3);
            assert_eq!(out.frozen_signature(), tree.frozen_signature());
        }
    }
    assert!(replaced);
}

#[test]
fn mutate_never_shrinks_a_single_node_tree() {
    let tree = ExpressionTree::parse("x0", 1).unwrap();
    for seed in 0..40 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = mutate(&tree, &ops("+,sin"), &set(&[0]), 60, &mut rng);
        assert!(out.node_count() >= 1);
    }
}

#[test]
fn mutate_fully_frozen_tree_is_identity() {
    let mut tree = ExpressionTree::parse("sin(x0) + 1.5", 1).unwrap();
    tree.for_each_mut(&mut |n| n.editable = false);
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = mutate(&tree, &ops("+,-,*,sin,cos"), &set(&[0]), 60, &mut rng);
        assert_eq!(out, tree);
    }
}

#[test]
fn mutate_respects_node_cap() {
    let tree = ExpressionTree::parse("x0 + x0*x0", 1).unwrap();
    for seed in 0..80 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = mutate(&tree, &ops("+,-,*"), &set(&[0]), 7, &mut rng);
        assert!(out.node_count() <= 7, "cap violated: {}", out.node_count());
    }
}

#[test]
fn mutate_inserted_material_respects_free_set() {
    let tree = ExpressionTree::parse("x0 + x1", 3).unwrap();
    let free = set(&[2]);
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = mutate(&tree, &ops("+,-,*,sin"), &free, 60, &mut rng);
        // Pre-existing references to x0/x1 may survive (or vanish); anything
        // new may reference only x2.
        let mut vars = out.free_variables();
        vars.remove(&0);
        vars.remove(&1);
        assert!(vars.is_subset(&free));
    }
}

#[test]
fn mate_requires_matching_control_sets() {
    let a = with_fitness(entry(0, "x0 + C", 2, &[1]), vec![-0.5]);
    let b = with_fitness(entry(1, "sin(x0)", 2, &[0]), vec![-0.5]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    assert_eq!(
        mate(&a, &b, 60, &mut rng).unwrap_err(),
        MateError::ControlSetMismatch
    );
}

#[test]
fn mate_conserves_total_node_count_and_can_swap_roots() {
    let a = entry(0, "x0 + C", 2, &[1]);
    let b = entry(1, "sin(x0)", 2, &[1]);
    let total = a.tree.node_count() + b.tree.node_count();
    let mut saw_root_swap = false;
    for seed in 0..60 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (ca, cb) = mate(&a, &b, 60, &mut rng).unwrap();
        assert_eq!(ca.tree.node_count() + cb.tree.node_count(), total);
        assert!(ca.result.is_none() && cb.result.is_none());
        assert_eq!(ca.id, a.id);
        assert_eq!(cb.id, b.id);
        if ca.tree.to_canonical() == "sin(x0)" && cb.tree.to_canonical() == "(x0 + C)" {
            saw_root_swap = true;
        }
    }
    assert!(saw_root_swap, "whole-tree swap never drawn");
}

#[test]
fn mate_is_symmetric_under_argument_order() {
    let a = entry(0, "x0*x1 + C", 2, &[]);
    let b = entry(1, "cos(x0) - 0.5", 2, &[]);
    for seed in 0..40 {
        let mut r1 = ChaCha8Rng::seed_from_u64(seed);
        let mut r2 = ChaCha8Rng::seed_from_u64(seed);
        let (x, y) = mate(&a, &b, 60, &mut r1).unwrap();
        let (u, v) = mate(&b, &a, 60, &mut r2).unwrap();
        // Same unordered pair of offspring trees.
        assert_eq!(x.tree, v.tree);
        assert_eq!(y.tree, u.tree);
    }
}

#[test]
fn select_topk_orders_by_fitness_size_then_insertion() {
    let pool = vec![
        with_fitness(entry(0, "x0 + x0*x0", 1, &[]), vec![-0.1]),
        with_fitness(entry(1, "x0", 1, &[]), vec![-0.5]),
        with_fitness(entry(2, "C*x0", 1, &[]), vec![-0.01]),
    ];
    let picked = select_topk(pool, 2);
    assert_eq!(picked.len(), 2);
    assert_eq!(picked[0].id, 2);
    assert_eq!(picked[1].id, 0);

    // k beyond the pool keeps everything.
    let pool = vec![with_fitness(entry(0, "x0", 1, &[]), vec![-1.0])];
    assert_eq!(select_topk(pool, 10).len(), 1);

    // Equal fitness: the smaller tree wins.
    let pool = vec![
        with_fitness(entry(0, "x0 + x0*x0 + x0", 1, &[]), vec![-0.2]),
        with_fitness(entry(1, "x0", 1, &[]), vec![-0.2]),
    ];
    let picked = select_topk(pool, 1);
    assert_eq!(picked[0].id, 1);

    // Fully tied: earlier insertion wins.
    let pool = vec![
        with_fitness(entry(5, "x0", 1, &[]), vec![-0.2]),
        with_fitness(entry(9, "x1", 2, &[]), vec![-0.2]),
    ];
    assert_eq!(select_topk(pool, 1)[0].id, 5);
}

#[test]
fn hall_of_fame_dedups_and_keeps_best() {
    let mut hof = HallOfFame::new(2);
    hof.update(&[
        with_fitness(entry(0, "x0", 1, &[]), vec![-0.9]),
        with_fitness(entry(1, "x0 + C", 1, &[]), vec![-0.5]),
    ]);
    assert_eq!(hof.entries().len(), 2);
    assert_eq!(hof.best_fitness(), Some(-0.5));

    // Same canonical form with better fitness replaces in place.
    hof.update(&[with_fitness(entry(2, "x0", 1, &[]), vec![-0.1])]);
    assert_eq!(hof.entries().len(), 2);
    assert_eq!(hof.best_fitness(), Some(-0.1));
    let canon: Vec<String> = hof.entries().iter().map(|e| e.tree.to_canonical()).collect();
    assert_eq!(canon, vec!["x0".to_string(), "(x0 + C)".to_string()]);

    // Capacity is enforced and the archive best never degrades.
    hof.update(&[with_fitness(entry(3, "sin(x0)", 1, &[]), vec![-0.3])]);
    assert_eq!(hof.entries().len(), 2);
    assert_eq!(hof.best_fitness(), Some(-0.1));
}

fn tiny_cfg() -> RacingConfig {
    RacingConfig {
        trials: 3,
        pool_size: 4,
        generations: 3,
        batch_size: 32,
        restarts: 3,
        init_generations: 2,
        test_size: 32,
        ..RacingConfig::default()
    }
}

fn tiny_oracle(expr: &str, n: usize) -> Oracle {
    let spec = BenchmarkSpec::new(
        "gp-test",
        n,
        ExpressionTree::parse(expr, n).unwrap(),
        ops("+,-,*,sin,cos"),
        vec![(-5.0, 5.0); n],
        0.0,
    )
    .unwrap();
    Oracle::new(spec, 17)
}

#[test]
fn gp_run_zero_generations_is_identity() {
    let mut oracle = tiny_oracle("2*x0", 1);
    let cfg = tiny_cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut fit_calls = 0;
    let mut pool = vec![with_fitness(entry(0, "C*x0", 1, &[]), vec![-0.4, -0.2, -0.3])];
    let before = pool[0].clone();
    let mut hof = HallOfFame::new(4);
    let mut next_id = 100;
    let mut ctx = GpCtx {
        oracle: &mut oracle,
        cfg: &cfg,
        exec: Executor::Sequential,
        rng: &mut rng,
        deadline: None,
        fit_calls: &mut fit_calls,
        next_id: &mut next_id,
    };
    assert!(gp_run(&mut pool, &mut hof, 0, &mut ctx));
    assert_eq!(pool[0].tree, before.tree);
    assert_eq!(pool[0].result, before.result);
    assert!(hof.entries().is_empty());
    assert_eq!(fit_calls, 0);
}

#[test]
fn gp_run_without_edits_only_updates_hof() {
    let mut oracle = tiny_oracle("2*x0", 1);
    let cfg = RacingConfig {
        p_mutate: 0.0,
        p_mate: 0.0,
        ..tiny_cfg()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut fit_calls = 0;
    let mut pool = vec![
        with_fitness(entry(0, "C*x0", 1, &[]), vec![-0.4, -0.2, -0.3]),
        with_fitness(entry(1, "x0 + x0", 1, &[]), vec![-0.1, -0.1, -0.1]),
    ];
    let trees: Vec<String> = pool.iter().map(|e| e.tree.to_canonical()).collect();
    let mut hof = HallOfFame::new(4);
    let mut next_id = 100;
    let mut ctx = GpCtx {
        oracle: &mut oracle,
        cfg: &cfg,
        exec: Executor::Sequential,
        rng: &mut rng,
        deadline: None,
        fit_calls: &mut fit_calls,
        next_id: &mut next_id,
    };
    assert!(gp_run(&mut pool, &mut hof, 5, &mut ctx));
    let mut after: Vec<String> = pool.iter().map(|e| e.tree.to_canonical()).collect();
    after.sort();
    let mut expected = trees;
    expected.sort();
    assert_eq!(expected, after, "no edits happen at zero probabilities");
    assert_eq!(fit_calls, 0);
    assert_eq!(hof.entries().len(), 2);
    assert!((hof.best_fitness().unwrap() + 0.1).abs() < 1e-12);
}

#[test]
fn gp_run_single_exact_skeleton_reaches_hof_in_one_generation() {
    // The exact reduced-form skeleton is in the pool; whatever variation
    // does, the fitted parent itself survives into the archive.
    for seed in 0..5u64 {
        let mut oracle = tiny_oracle("2*x0", 1);
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fit_calls = 0;
        let mut pool = vec![entry(0, "C*x0", 1, &[])];
        let mut next_id = 100;
        let mut ctx = GpCtx {
            oracle: &mut oracle,
            cfg: &cfg,
            exec: Executor::Sequential,
            rng: &mut rng,
            deadline: None,
            fit_calls: &mut fit_calls,
            next_id: &mut next_id,
        };
        refit_entries(&mut pool, &[0], &mut ctx);
        let mut hof = HallOfFame::new(4);
        assert!(gp_run(&mut pool, &mut hof, 1, &mut ctx));
        assert!(
            hof.best_fitness().unwrap() >= -1e-6,
            "seed {seed}: best {:?}",
            hof.best_fitness()
        );
    }
}

#[test]
fn gp_run_elitism_is_monotone() {
    let mut oracle = tiny_oracle("x1*cos(x0) + x2", 3);
    let cfg = tiny_cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut fit_calls = 0;
    let control = set(&[1, 2]);
    let mut pool: Vec<PoolEntry> = (0..4)
        .map(|i| {
            let mut e = entry(i, "C*cos(x0) + C", 3, &[1, 2]);
            e.control_set = control.clone();
            e
        })
        .collect();
    let mut next_id = 100;
    let mut ctx = GpCtx {
        oracle: &mut oracle,
        cfg: &cfg,
        exec: Executor::Sequential,
        rng: &mut rng,
        deadline: None,
        fit_calls: &mut fit_calls,
        next_id: &mut next_id,
    };
    refit_entries(&mut pool, &[0, 1, 2, 3], &mut ctx);
    let mut hof = HallOfFame::new(4);
    let mut best = f64::NEG_INFINITY;
    for _ in 0..6 {
        assert!(gp_run(&mut pool, &mut hof, 1, &mut ctx));
        let now = hof.best_fitness().unwrap();
        assert!(now >= best, "elitism violated: {now} < {best}");
        best = now;
        for e in pool.iter() {
            // Round-trip validity after every generation.
            let back = ExpressionTree::parse(&e.tree.to_canonical(), 3).unwrap();
            assert!(back.same_structure(&e.tree));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    // The frozen multiset is preserved by arbitrary mutation chains.
    #[test]
    fn frozen_nodes_survive_mutation(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let free = set(&[0, 1]);
        let all = ops("+,-,*,sin,cos");
        let mut tree = crate::expr::random_tree(&free, &all, 4, 2, &mut rng);
        // Freeze a pseudo-random subset of operator/variable nodes.
        let mut i = 0u64;
        tree.for_each_mut(&mut |node| {
            i += 1;
            if !matches!(node.kind, NodeKind::OpenConst { .. }) && (seed >> (i % 60)) & 1 == 1 {
                node.editable = false;
            }
        });
        let frozen = tree.frozen_signature();
        let mut current = tree;
        for _ in 0..6 {
            current = mutate(&current, &all, &free, 60, &mut rng);
        }
        prop_assert_eq!(current.frozen_signature(), frozen);
    }

    // Crossover moves frozen material between lineages but never edits it.
    #[test]
    fn frozen_nodes_survive_mating(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let free = set(&[0, 1]);
        let all = ops("+,-,*,sin,cos");
        let mut ta = crate::expr::random_tree(&free, &all, 4, 2, &mut rng);
        let tb = crate::expr::random_tree(&free, &all, 4, 2, &mut rng);
        let mut i = 0u64;
        ta.for_each_mut(&mut |node| {
            i += 1;
            if !matches!(node.kind, NodeKind::OpenConst { .. }) && (seed >> (i % 59)) & 1 == 1 {
                node.editable = false;
            }
        });
        let a = PoolEntry { id: 0, tree: ta, result: None, schedule: Schedule::initial(set(&[])), control_set: set(&[]) };
        let b = PoolEntry { id: 1, tree: tb, result: None, schedule: Schedule::initial(set(&[])), control_set: set(&[]) };
        let mut combined = a.tree.frozen_signature();
        combined.extend(b.tree.frozen_signature());
        combined.sort();
        let (ca, cb) = mate(&a, &b, 120, &mut rng).unwrap();
        let mut after = ca.tree.frozen_signature();
        after.extend(cb.tree.frozen_signature());
        after.sort();
        prop_assert_eq!(after, combined);
    }
}
