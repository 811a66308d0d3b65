use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use remembra::baselines::SgdRule;
use remembra::config::{Experiment, ExperimentConfig};
use remembra::engine::{unroll, UnrollConfig};
use remembra::experiment::{probe_tasks, Setup};
use remembra::par::{self, Parallelism};
use remembra::probe::{forgetting_curve, ReadoutConfig};

fn setup() -> (ExperimentConfig, Setup) {
    let mut cfg = ExperimentConfig::defaults(Experiment::Synthetic);
    cfg.set("train_per_class", "100").unwrap();
    cfg.set("test_per_class", "100").unwrap();
    cfg.set("pretrain_steps", "200").unwrap();
    let setup = Setup::build(&cfg).unwrap();
    (cfg, setup)
}

fn modes() -> Vec<Parallelism> {
    if par::available() {
        vec![Parallelism::Sequential, Parallelism::Parallel]
    } else {
        vec![Parallelism::Sequential]
    }
}

fn bench_forgetting_curve(c: &mut Criterion) {
    let (_, setup) = setup();
    let stream = setup.test_stream(0).unwrap();
    let cfg = UnrollConfig {
        steps_per_task: 80,
        cadence: 10,
        ..UnrollConfig::default()
    };
    let run = unroll(&mut SgdRule { scale: 1.0 }, &stream, &setup.test_checkpoint, &cfg, 1).unwrap();
    let tasks = probe_tasks(&stream);
    let readout = ReadoutConfig {
        steps: 100,
        ..ReadoutConfig::default()
    };
    let mut group = c.benchmark_group("forgetting_curve");
    group.sample_size(10);
    for mode in modes() {
        group.bench_with_input(BenchmarkId::from_parameter(format!("{mode:?}")), &mode, |b, &mode| {
            b.iter(|| black_box(forgetting_curve("sgd", 0, &run.snapshots, &tasks, &readout, mode).unwrap()))
        });
    }
    group.finish();
}

fn bench_seeds(c: &mut Criterion) {
    let (_, setup) = setup();
    let cfg = UnrollConfig {
        steps_per_task: 60,
        ..UnrollConfig::default()
    };
    let mut group = c.benchmark_group("unroll_4_seeds");
    group.sample_size(10);
    for mode in modes() {
        group.bench_with_input(BenchmarkId::from_parameter(format!("{mode:?}")), &mode, |b, &mode| {
            b.iter(|| {
                let out = par::map(mode, (0..4u64).collect(), |seed| {
                    let stream = setup.test_stream(seed).unwrap();
                    unroll(&mut SgdRule { scale: 1.0 }, &stream, &setup.test_checkpoint, &cfg, seed)
                        .unwrap()
                        .snapshots
                        .len()
                });
                black_box(out)
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_forgetting_curve, bench_seeds);
criterion_main!(benches);
