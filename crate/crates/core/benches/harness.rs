use criterion::{criterion_group, criterion_main, Criterion};

use bimtwin_core::experiment::{run_experiment, ExperimentConfig};
use bimtwin_core::par::ExecutionMode;
use bimtwin_core::perception::NoiseModel;

fn config(mode: ExecutionMode) -> ExperimentConfig {
    let noise = NoiseModel { sigma_translation: 0.002, sigma_rotation: 0.01, seed: 0 };
    ExperimentConfig { trials: 16, mode, ..ExperimentConfig::standard(noise, 11) }
}

fn block_experiment(c: &mut Criterion) {
    let mut group = c.benchmark_group("block_experiment_4x16");
    group.sample_size(10);
    for (name, mode) in [("sequential", ExecutionMode::Sequential), ("parallel", ExecutionMode::Parallel)] {
        let cfg = config(mode);
        group.bench_function(name, |b| b.iter(|| run_experiment(&cfg).expect("valid config")));
    }
    group.finish();
}

criterion_group!(benches, block_experiment);
criterion_main!(benches);
