use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ephemstore::bench::{hacc_region, run_ior, BenchSpec, DirMount, Mode};
use ephemstore::parallel::Execution;

const PATHS: [(&str, Execution); 2] = [("parallel", Execution::Parallel), ("sequential", Execution::Sequential)];

fn ior_baseline(c: &mut Criterion) {
    let dir = tempfile::tempdir().unwrap();
    let mount = DirMount::new(dir.path());
    let mut group = c.benchmark_group("ior_fpp_8x1MiB");
    group.sample_size(10);
    for (name, exec) in PATHS {
        let mut spec = BenchSpec::ior(2, 4, Mode::FilePerProcess, 1 << 20, 256 << 10);
        spec.iterations = 1;
        spec.execution = exec;
        group.bench_with_input(BenchmarkId::from_parameter(name), &spec, |b, spec| {
            b.iter(|| run_ior(spec, &mount).unwrap())
        });
    }
    group.finish();
}

fn hacc_serialize(c: &mut Criterion) {
    let mut group = c.benchmark_group("hacc_serialize_16x25000");
    for (name, exec) in PATHS {
        group.bench_function(name, |b| {
            b.iter(|| exec.map_range(16, |rank| hacc_region(7, rank as u64, black_box(25_000)).len()))
        });
    }
    group.finish();
}

criterion_group!(benches, ior_baseline, hacc_serialize);
criterion_main!(benches);
