use std::collections::BTreeSet;

use racing_sr::expr::{ExpressionTree, OperatorSet};
use racing_sr::oracle::BenchmarkSpec;
use racing_sr::racing::{build_gp_pool, RacingConfig};
use racing_sr::Executor;

fn trig_spec(expr: &str, n: usize) -> BenchmarkSpec {
    BenchmarkSpec::new(
        "scratch",
        n,
        ExpressionTree::parse(expr, n).unwrap(),
        OperatorSet::parse("+,-,*,sin,cos").unwrap(),
        vec![(-5.0, 5.0); n],
        0.0,
    )
    .unwrap()
}

#[test]
#[ignore]
fn probe_build_pool() {
    let spec = trig_spec("x1*cos(x0) + x2", 3);
    for seed in 0..5u64 {
        let cfg = RacingConfig {
            trials: 3,
            pool_size: 12,
            batch_size: 64,
            restarts: 3,
            init_generations: 20,
            seed,
            ..RacingConfig::default()
        };
        let t0 = std::time::Instant::now();
        let pool = build_gp_pool(&spec, &cfg, Executor::default()).unwrap();
        let target: BTreeSet<usize> = [1, 2].into_iter().collect();
        let mut best = f64::NEG_INFINITY;
        let mut best_expr = String::new();
        for e in &pool {
            if e.control_set == target && e.scalar_fitness() > best {
                best = e.scalar_fitness();
                best_expr = e.tree.to_canonical();
            }
        }
        println!(
            "seed {seed}: best {best:.3e}  {best_expr}  ({} entries, {:.2?})",
            pool.len(),
            t0.elapsed()
        );
    }
}

#[test]
#[ignore]
fn probe_full_scale_racing() {
    // Acceptance-scale config on one trig-3-2-2 expression.
    let spec = racing_sr::suites::benchmark("trig-3-2-2-eq01").unwrap();
    let cfg = RacingConfig {
        seed: 1,
        ..RacingConfig::default()
    };
    racing_sr::fit::stats::init_from_env();
    let t0 = std::time::Instant::now();
    let out = racing_sr::racing::racing_run(&spec, &cfg, Executor::default(), None).unwrap();
    println!("fit stats: {}", racing_sr::fit::stats::report());
    let best = out.best().unwrap();
    println!(
        "wall {:.1?}  fit_calls {}  rows {:.2e}  best test nmse {:.3e}\n  {}",
        t0.elapsed(),
        out.report.fit_calls,
        out.report.train_rows as f64,
        best.test_nmse,
        best.concrete_tree().to_canonical()
    );
    for r in &out.report.rounds {
        let hist: Vec<String> = r
            .survivors
            .iter()
            .map(|(set, c)| format!("{set:?}x{c}"))
            .collect();
        println!("  round {}: best {:.2e}  {}", r.round, r.best_train_fitness, hist.join(" "));
    }
}

#[test]
#[ignore]
fn probe_fit_cost() {
    use racing_sr::expr::{random_tree, BatchEvaluator};
    use racing_sr::fit::{optimize, OptimizerId};
    use racing_sr::oracle::Oracle;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    let spec = racing_sr::suites::benchmark("trig-3-2-2-eq01").unwrap();
    let ops = spec.op_set.clone();
    let mut oracle = Oracle::new(spec, 3);
    let control: BTreeSet<usize> = [1].into_iter().collect();
    let free: BTreeSet<usize> = [0, 2].into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(9);

    // Raw eval speed on a big tree.
    let big = loop {
        let t = random_tree(&free, &ops, 6, 3, &mut rng);
        if t.node_count() >= 40 {
            break t;
        }
    };
    let batches = oracle.sample(&control, 1, 256);
    let mut be = BatchEvaluator::new(&big, &batches[0].columns, 256);
    let consts = vec![0.3; big.count_open_constants()];
    let t0 = std::time::Instant::now();
    for _ in 0..2000 {
        let _ = be.mse(&consts, &batches[0].outputs);
    }
    println!(
        "big tree: nodes {} L {} -> {:.1?}/eval",
        big.node_count(),
        big.count_open_constants(),
        t0.elapsed() / 2000
    );

    // Fit cost distribution across random trees.
    for depth in [3usize, 5, 6] {
        let mut total = std::time::Duration::ZERO;
        let mut n_nodes = 0usize;
        let mut n_l = 0usize;
        let samples = 40u32;
        for i in 0..u64::from(samples) {
            let t = random_tree(&free, &ops, depth, 3, &mut rng);
            n_nodes += t.node_count();
            n_l += t.count_open_constants();
            let batches = oracle.sample(&control, 5, 256);
            let mut fit_rng = ChaCha8Rng::seed_from_u64(i);
            let t0 = std::time::Instant::now();
            let _ = optimize(&t, &batches, OptimizerId::Bfgs, 5, &mut fit_rng);
            total += t0.elapsed();
        }
        println!(
            "depth {depth}: avg nodes {:.1} avg L {:.1} avg fit {:.2?}",
            n_nodes as f64 / f64::from(samples),
            n_l as f64 / f64::from(samples),
            total / samples
        );
    }
}
