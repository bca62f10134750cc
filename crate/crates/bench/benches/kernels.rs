use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stitchkit::cka::{cka_linear, ActivationMatrix};
use stitchkit::generate::{generate, GenerationConfig};
use stitchkit::nn::{FragmentPool, Granularity, Network};
use stitchkit::tensor::{conv2d, matmul, solve_projection};
use stitchkit::zoo::{make_synthetic_dataset, train_network, train_test_split, ArchSpec, TrainConfig};
use stitchkit::Tensor;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn kernels(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (a, b) = (random(&mut rng, &[128, 128]), random(&mut rng, &[128, 128]));
    c.bench_function("matmul 128", |bch| bch.iter(|| matmul(black_box(&a), black_box(&b)).unwrap()));

    let x = random(&mut rng, &[32, 8, 16, 16]);
    let (w, bias) = (random(&mut rng, &[16, 8, 3, 3]), random(&mut rng, &[16]));
    c.bench_function("conv2d 32x8x16x16 -> 16", |bch| {
        bch.iter(|| conv2d(black_box(&x), &w, &bias, 1, 1).unwrap())
    });

    let p = ActivationMatrix::new(random(&mut rng, &[32, 512]), "p").unwrap();
    let q = ActivationMatrix::new(random(&mut rng, &[24, 512]), "q").unwrap();
    c.bench_function("cka 32/24 features, 512 samples", |bch| {
        bch.iter(|| cka_linear(black_box(&p), black_box(&q)).unwrap())
    });

    let (xs, ys) = (random(&mut rng, &[32, 256]), random(&mut rng, &[24, 256]));
    c.bench_function("solve_projection 32 -> 24", |bch| {
        bch.iter(|| solve_projection(black_box(&xs), black_box(&ys), 1e-8).unwrap())
    });
}

fn search(c: &mut Criterion) {
    let full = make_synthetic_dataset(8, 40, 16, 0).unwrap();
    let (train, _) = train_test_split(&full, 0).unwrap();
    let cfg = TrainConfig { epochs: 1, ..TrainConfig::default() };
    let nets: Vec<Network> = ArchSpec::desk_zoo(8)
        .iter()
        .map(|a| train_network(a, &a.name, &train, &cfg).unwrap().network)
        .collect();
    let pool = FragmentPool::new(nets, Granularity::SingleCut).unwrap();
    let gen = GenerationConfig::default();
    let mut group = c.benchmark_group("search");
    group.sample_size(10);
    group.bench_function("generate desk pool", |bch| bch.iter(|| generate(&pool, &train, &gen).unwrap()));
    group.finish();
}

criterion_group!(benches, kernels, search);
criterion_main!(benches);
