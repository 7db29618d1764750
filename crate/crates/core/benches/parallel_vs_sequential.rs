//! Per-unit workloads through `par::map_range` (rayon when the `parallel`
//! feature is on) against the sequential reference `par::map_range_seq`.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use deep_panel::nn::{NetworkParams, NetworkSpec};
use deep_panel::optim::{fit, TrainConfig};
use deep_panel::par;

struct Unit {
    x: Array2<f64>,
    y: Array1<f64>,
}

fn units(n: usize, t: usize, p: usize) -> Vec<Unit> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    (0..n)
        .map(|_| {
            let x = Array2::from_shape_fn((t, p), |_| -> f64 { StandardNormal.sample(&mut rng) });
            let y = x.column(0).mapv(f64::sin) + x.column(1).mapv(|v| v * v);
            Unit { x, y }
        })
        .collect()
}

fn gradients(c: &mut Criterion) {
    let p = 32;
    let data = units(64, 400, p);
    let net = NetworkParams::init(&NetworkSpec::deep(p, 3, 30).with_seed(1)).unwrap();
    let job = |k: usize| {
        let u = &data[k];
        let w = Array1::from_elem(u.x.nrows(), 1.0 / u.x.nrows() as f64);
        net.grad_params(u.x.view(), w.view()).unwrap().iter().sum::<f64>()
    };
    let mut g = c.benchmark_group("unit_gradients");
    let backend = if par::is_parallel() { "rayon" } else { "rayon-disabled" };
    g.bench_function(BenchmarkId::new(backend, data.len()), |b| {
        b.iter(|| black_box(par::map_range(data.len(), job)))
    });
    g.bench_function(BenchmarkId::new("sequential", data.len()), |b| {
        b.iter(|| black_box(par::map_range_seq(data.len(), job)))
    });
    g.finish();
}

fn unit_fits(c: &mut Criterion) {
    let p = 8;
    let data = units(16, 200, p);
    let cfg = TrainConfig {
        batch_size: 32,
        max_epochs: 20,
        early_stop_patience: 20,
        ..TrainConfig::default()
    };
    let job = |k: usize| {
        let u = &data[k];
        let spec = NetworkSpec::deep(p, 2, 16).with_seed(k as u64);
        let (tr, va) = (0..160, 160..200);
        let (params, _) = fit(
            &spec,
            u.x.slice(ndarray::s![tr.clone(), ..]),
            u.y.slice(ndarray::s![tr]),
            u.x.slice(ndarray::s![va.clone(), ..]),
            u.y.slice(ndarray::s![va]),
            &cfg,
        )
        .unwrap();
        params.flatten().len()
    };
    let mut g = c.benchmark_group("unit_fits");
    g.sample_size(10);
    let backend = if par::is_parallel() { "rayon" } else { "rayon-disabled" };
    g.bench_function(BenchmarkId::new(backend, data.len()), |b| {
        b.iter(|| black_box(par::map_range(data.len(), job)))
    });
    g.bench_function(BenchmarkId::new("sequential", data.len()), |b| {
        b.iter(|| black_box(par::map_range_seq(data.len(), job)))
    });
    g.finish();
}

criterion_group!(benches, gradients, unit_fits);
criterion_main!(benches);
