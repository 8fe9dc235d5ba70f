//! Sequential vs parallel execution on the three data-parallel hot paths.

use std::hint::black_box;

use calib_core::env::{Environment, WorldSpec};
use calib_core::eval::{evaluate_rows, EvalOptions, InputFormat, InputRow, NumberedRow};
use calib_core::metrics::{bootstrap_ci, Binning, MetricId, ScoredSample};
use calib_core::policy::{collect_batch, TabularPolicy};
use calib_core::reward::RewardSpec;
use calib_core::Execution;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn rollouts(c: &mut Criterion) {
    let world = WorldSpec::default();
    let policy = TabularPolicy::uniform(world.confidence_mode, world.n_buckets);
    let env = Environment::new(world, RewardSpec::default()).unwrap();
    let mut group = c.benchmark_group("collect_batch");
    for n in [256, 4096] {
        for (name, exec) in MODES {
            group.bench_with_input(BenchmarkId::new(name, n), &n, |b, &n| {
                b.iter(|| collect_batch(&env, &policy, n, 0, 42, exec))
            });
        }
    }
    group.finish();
}

fn samples(n: usize) -> Vec<ScoredSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    (0..n)
        .map(|_| {
            let c = rng.random_range(0..=10) as f64 / 10.0;
            ScoredSample::new(c, rng.random::<f64>() < c).unwrap()
        })
        .collect()
}

fn bootstrap(c: &mut Criterion) {
    let data = samples(10_000);
    let mut group = c.benchmark_group("bootstrap_ci");
    group.sample_size(10);
    for metric in [MetricId::Ece(Binning::DiscreteLevels), MetricId::Auroc] {
        for (name, exec) in MODES {
            group.bench_function(BenchmarkId::new(name, metric.name()), |b| {
                b.iter(|| bootstrap_ci(metric, black_box(&data), 200, 0.05, 7, exec).unwrap())
            });
        }
    }
    group.finish();
}

fn eval_rows(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let rows: Vec<NumberedRow> = (0..5_000)
        .map(|i| {
            let line = format!(
                r#"{{"id": {i}, "raw_response": "Answer: city number {}, Confidence: {}", "gold_candidates": ["city number {}", "town {i}"]}}"#,
                rng.random_range(0..20),
                rng.random_range(0..=10),
                rng.random_range(0..20)
            );
            NumberedRow {
                line: i + 1,
                row: serde_json::from_str::<InputRow>(&line).unwrap(),
            }
        })
        .collect();
    let mut group = c.benchmark_group("evaluate_rows");
    group.sample_size(10);
    for (name, exec) in MODES {
        let mut opts = EvalOptions::new(InputFormat::Single);
        opts.report.exec = exec;
        opts.report.bootstrap_resamples = 100;
        group.bench_function(name, |b| b.iter(|| evaluate_rows(&rows, &opts).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, rollouts, bootstrap, eval_rows);
criterion_main!(benches);
