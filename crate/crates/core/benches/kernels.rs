//! Parallel vs sequential dispatch for the batch-level hot paths, plus the
//! structured kernels on their own.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use peft_forge::adapters::{butterfly_matvec, cayley_orthonormal, unitary_matvec, BoftState, UnitaryParam};
use peft_forge::config::RunConfig;
use peft_forge::harness::{evaluate, init_model, make_task, sweep, Method, SweepSpec, TrainConfig};
use peft_forge::numerics::{Matrix, C64};
use peft_forge::par;

const MODES: [(&str, bool); 2] = [("parallel", true), ("sequential", false)];

fn batch_paths(c: &mut Criterion) {
    let rc = RunConfig::default();
    let data = make_task(&rc.task).unwrap();
    let cfg = TrainConfig {
        method: Method::Hybrid,
        ..TrainConfig::default()
    };
    let model = init_model(&cfg, &rc.model, &data.train, 1).unwrap();
    let batch = &data.train[..64];

    let mut g = c.benchmark_group("hybrid_grads_batch64");
    for (name, on) in MODES {
        par::set_parallel(on);
        g.bench_function(name, |b| b.iter(|| model.grads(black_box(batch), false).unwrap()));
    }
    g.finish();

    let mut g = c.benchmark_group("evaluate_val200");
    for (name, on) in MODES {
        par::set_parallel(on);
        g.bench_function(name, |b| b.iter(|| evaluate(&model, black_box(&data.val)).unwrap()));
    }
    g.finish();
    par::set_parallel(true);
}

fn sweep_cells(c: &mut Criterion) {
    let mut rc = RunConfig::default();
    rc.task.train_size = 128;
    rc.task.val_size = 32;
    let data = make_task(&rc.task).unwrap();
    let spec = SweepSpec {
        train: TrainConfig {
            epochs: 1,
            record_wall_time: false,
            ..TrainConfig::default()
        },
        methods: vec![Method::Lora, Method::Boft, Method::Hybrid],
        seeds: vec![1, 2],
        jobs: 0,
        inject_nan: None,
    };
    let mut g = c.benchmark_group("sweep_3x2_cells");
    g.sample_size(10);
    for (name, on) in MODES {
        par::set_parallel(on);
        g.bench_function(name, |b| b.iter(|| sweep(&spec, &rc.model, &data).unwrap()));
    }
    g.finish();
    par::set_parallel(true);
}

fn structured_kernels(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = c.benchmark_group("structured_matvec");
    for n in [16usize, 64, 256] {
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let st = BoftState::butterfly(n, n.ilog2() as usize).unwrap();
        g.bench_with_input(BenchmarkId::new("butterfly", n), &x, |b, x| {
            b.iter(|| butterfly_matvec(&st, black_box(x)).unwrap())
        });
        let p = UnitaryParam::init(n, &mut rng).unwrap();
        let xc: Vec<C64> = x.iter().map(|&v| C64::new(v, 0.0)).collect();
        g.bench_with_input(BenchmarkId::new("unitary", n), &xc, |b, x| {
            b.iter(|| unitary_matvec(&p, black_box(x)).unwrap())
        });
        let dense = Matrix::random_normal(n, n, 1.0, &mut rng);
        let col = Matrix::from_fn(n, 1, |i, _| x[i]);
        g.bench_with_input(BenchmarkId::new("dense", n), &col, |b, col| {
            b.iter(|| dense.matmul(black_box(col)).unwrap())
        });
    }
    g.finish();

    let mut g = c.benchmark_group("cayley_orthonormal");
    for n in [16usize, 32, 64] {
        let a = Matrix::random_normal(n, n, 0.3, &mut rng);
        let q = Matrix::from_fn(n, n, |i, j| a[(i, j)] - a[(j, i)]);
        g.bench_with_input(BenchmarkId::from_parameter(n), &q, |b, q| {
            b.iter(|| cayley_orthonormal(black_box(q), 1.0).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, batch_paths, sweep_cells, structured_kernels);
criterion_main!(benches);
