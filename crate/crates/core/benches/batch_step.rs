use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use uvmtl::afd::DecoupleMode;
use uvmtl::config::RunConfig;
use uvmtl::model::Model;
use uvmtl::parallel::{init_from_env, Execution};
use uvmtl::synth::{generate_with, GenConfig};
use uvmtl::train::batch_gradients;

const PATHS: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn batch_step(c: &mut Criterion) {
    init_from_env();
    let data = generate_with(
        &GenConfig {
            num_samples: 16,
            ..Default::default()
        },
        Execution::Sequential,
    )
    .unwrap();
    let cfg = RunConfig::default();
    let (model, ps) = Model::init(&cfg, &data.config).unwrap();
    let coeffs = vec![1.0; data.num_tasks()];
    let mut group = c.benchmark_group("batch_step");
    group.sample_size(20);
    for batch in [4usize, 16] {
        let idx: Vec<usize> = (0..batch).collect();
        for (name, exec) in PATHS {
            group.bench_with_input(BenchmarkId::new(name, batch), &idx, |b, idx| {
                b.iter(|| {
                    batch_gradients(&model, &ps, &data, idx, &coeffs, Some((0.05, DecoupleMode::AbsCos)), exec, 0)
                        .map(|(g, l)| black_box((g.norm(), l)))
                        .unwrap()
                })
            });
        }
    }
    group.finish();
}

fn generation(c: &mut Criterion) {
    init_from_env();
    let cfg = GenConfig {
        num_samples: 256,
        ..Default::default()
    };
    let mut group = c.benchmark_group("generate");
    group.sample_size(20);
    for (name, exec) in PATHS {
        group.bench_function(name, |b| b.iter(|| black_box(generate_with(&cfg, exec).unwrap().len())));
    }
    group.finish();
}

criterion_group!(benches, batch_step, generation);
criterion_main!(benches);
