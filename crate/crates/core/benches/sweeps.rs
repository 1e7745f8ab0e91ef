use criterion::{black_box, criterion_group, criterion_main, Criterion};

use aurora_core::experiment::{run_with, ExperimentConfig, ExperimentKind};
use aurora_core::par::Exec;

fn small_sweep() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.dims.d_in = 16;
    cfg.dims.d_out = 16;
    cfg.target.n_train = 256;
    cfg.target.n_test = 256;
    cfg.adapter.ranks = vec![2, 4];
    cfg.train.epochs = 10;
    cfg.train.batch_size = 64;
    cfg.train.seeds = vec![0, 1, 2, 3];
    cfg
}

fn rank_sweep(c: &mut Criterion) {
    let cfg = small_sweep();
    let mut group = c.benchmark_group("rank_sweep");
    group.sample_size(10);
    for (name, exec) in [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)] {
        group.bench_function(name, |b| {
            b.iter(|| run_with(exec, ExperimentKind::RankSweep, black_box(&cfg)).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, rank_sweep);
criterion_main!(benches);
