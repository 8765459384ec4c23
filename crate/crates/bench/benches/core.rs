use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use vcl_bench::filled;
use vcl_core::losses::{beta_nt_xent, LossConfig, Pairing};
use vcl_core::trainer::{batch_for_step, initial_params, pretraining_data, train_step, OptimState};
use vcl_core::{RunConfig, Tape};

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [64usize, 256] {
        let a = filled::<f32>(n, n, 1.0);
        let b = filled::<f32>(n, n, 2.0);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let mut tape = Tape::new();
                let x = tape.constant(a.clone());
                let y = tape.constant(b.clone());
                black_box(tape.matmul(x, y).unwrap());
            })
        });
    }
    group.finish();
}

fn contrastive_loss(c: &mut Criterion) {
    let cfg = LossConfig::default();
    let views = 256;
    let z = filled::<f32>(views, 32, 3.0);
    let pairing = Pairing::adjacent(views).unwrap();
    c.bench_function("beta_nt_xent/forward", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let zv = tape.constant(z.clone());
            black_box(beta_nt_xent(&mut tape, zv, &pairing, &cfg).unwrap());
        })
    });
    c.bench_function("beta_nt_xent/forward_backward", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let zv = tape.leaf(z.clone());
            let loss = beta_nt_xent(&mut tape, zv, &pairing, &cfg).unwrap();
            black_box(tape.backward(loss).unwrap());
        })
    });
}

fn train(c: &mut Criterion) {
    let run = RunConfig { steps: 1000, ..RunConfig::default() };
    let ds = pretraining_data(&run).unwrap();
    let mut params = initial_params(&run).unwrap();
    let mut state = OptimState::new(params.tensors().iter().map(|t| &t.tensor));
    let batch = batch_for_step(&run, &ds, 0).unwrap();
    let mut group = c.benchmark_group("train_step");
    group.sample_size(20);
    group.bench_function("default_config", |bench| {
        let mut step = 0;
        bench.iter(|| {
            black_box(train_step(&mut params, &mut state, &batch, &run, step, 1e-4).unwrap());
            step += 1;
        })
    });
    group.finish();
}

criterion_group!(benches, matmul, contrastive_loss, train);
criterion_main!(benches);
