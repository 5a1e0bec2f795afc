//! Parallel vs sequential execution of the hot loops: batch constant fits
//! across a pool, and one full racing round.

use std::collections::BTreeSet;
use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use racing_sr::expr::ExpressionTree;
use racing_sr::fit::{optimize, OptimizerId};
use racing_sr::oracle::{BenchmarkSpec, Oracle, TrialBatch};
use racing_sr::racing::{racing_run, RacingConfig};
use racing_sr::suites;
use racing_sr::Executor;

fn trig_spec() -> BenchmarkSpec {
    suites::benchmark("trig-3-2-2-eq01").expect("builtin suite")
}

fn pool_fit_workload() -> Vec<(ExpressionTree, Vec<TrialBatch>)> {
    let mut oracle = Oracle::new(trig_spec(), 7);
    let skeletons = [
        "C*sin(x0) + C*cos(x0) + C",
        "C*x0 + C*cos(x0) + C",
        "C*x0*sin(x0) + C",
        "C + C*x0",
    ];
    let control: BTreeSet<usize> = [1, 2].into_iter().collect();
    (0..16)
        .map(|i| {
            let tree = ExpressionTree::parse(skeletons[i % skeletons.len()], 3).unwrap();
            let batches = oracle.sample(&control, 5, 256);
            (tree, batches)
        })
        .collect()
}

fn bench_pool_fits(c: &mut Criterion) {
    let workload = pool_fit_workload();
    let mut group = c.benchmark_group("pool_constant_fits");
    group.sample_size(10);
    for (name, exec) in [
        ("sequential", Executor::Sequential),
        ("parallel", Executor::default()),
    ] {
        group.bench_function(name, |b| {
            b.iter(|| {
                let jobs: Vec<_> = workload
                    .iter()
                    .enumerate()
                    .map(|(i, (tree, batches))| (i as u64, tree.clone(), batches.clone()))
                    .collect();
                let results = exec.map(jobs, |(seed, tree, batches)| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    optimize(&tree, &batches, OptimizerId::Bfgs, 3, &mut rng)
                });
                black_box(results)
            })
        });
    }
    group.finish();
}

fn bench_small_racing_run(c: &mut Criterion) {
    let spec = trig_spec();
    let cfg = RacingConfig {
        trials: 3,
        pool_size: 8,
        generations: 4,
        batch_size: 64,
        restarts: 3,
        init_generations: 3,
        test_size: 64,
        seed: 11,
        ..RacingConfig::default()
    };
    let mut group = c.benchmark_group("racing_run_small");
    group.sample_size(10);
    for (name, exec) in [
        ("sequential", Executor::Sequential),
        ("parallel", Executor::default()),
    ] {
        group.bench_function(name, |b| {
            b.iter(|| black_box(racing_run(&spec, &cfg, exec, None).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_pool_fits, bench_small_racing_run);
criterion_main!(benches);
