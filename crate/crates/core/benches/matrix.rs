use criterion::{criterion_group, criterion_main, Criterion};

use pcnsim::runner::{run_cells, run_cells_sequential};
use pcnsim::scenarios::{cell_matrix, ScenarioConfig, SizePreset};

fn small_matrix() -> Vec<ScenarioConfig> {
    let base = ScenarioConfig {
        payments: Some(200),
        ..Default::default()
    };
    cell_matrix(&base).into_iter().filter(|c| c.size == SizePreset::Sm).collect()
}

fn bench_matrix(c: &mut Criterion) {
    let cells = small_matrix();
    let jobs = std::thread::available_parallelism().map_or(1, |n| n.get()).max(2);
    let mut group = c.benchmark_group("matrix_sm");
    group.sample_size(10);
    group.bench_function("sequential", |b| b.iter(|| run_cells_sequential(&cells).unwrap()));
    group.bench_function(format!("parallel_{jobs}"), |b| b.iter(|| run_cells(&cells, jobs).unwrap()));
    group.finish();
}

criterion_group!(benches, bench_matrix);
criterion_main!(benches);
