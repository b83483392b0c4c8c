//! Sequential vs data-parallel timings for the hot kernels. Each group runs
//! the same workload under both execution modes; with one core the two
//! should match within noise.

use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use pyrstyle::drafting::{DraftingNet, StyleContext};
use pyrstyle::extractor::{Extractor, VggVariant};
use pyrstyle::imagery::{aggregate, decompose};
use pyrstyle::losses::{remd_loss, self_similarity_loss, FeatureVectors};
use pyrstyle::ops;
use pyrstyle::par::{self, Mode};
use pyrstyle::revision::{RevisionNet, StylizationStack};
use pyrstyle::{Image, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MODES: [(Mode, &str); 2] = [(Mode::Sequential, "sequential"), (Mode::Parallel, "parallel")];

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn random_image(rng: &mut ChaCha8Rng, size: usize) -> Image {
    Image::from_fn(size, size, |_, _, _| rng.gen_range(0.0..1.0))
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_tensor(&mut rng, &[2, 64, 64, 64]);
    let w = random_tensor(&mut rng, &[64, 64, 3, 3]);
    let b = random_tensor(&mut rng, &[64]);
    let mut g = c.benchmark_group("conv3x3_64ch_64px_batch2");
    for (mode, name) in MODES {
        par::set_mode(mode);
        g.bench_function(BenchmarkId::from_parameter(name), |bench| {
            bench.iter(|| ops::conv2d(black_box(&x), &w, Some(&b), 1))
        });
    }
    g.finish();
}

fn pyramid(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let img = random_image(&mut rng, 512);
    let mut g = c.benchmark_group("pyramid_512px_3_levels");
    for (mode, name) in MODES {
        par::set_mode(mode);
        g.bench_function(BenchmarkId::from_parameter(name), |bench| {
            bench.iter(|| {
                let p = decompose(black_box(&img), 3).unwrap();
                aggregate(&p.base, &p.residuals).unwrap()
            })
        });
    }
    g.finish();
}

fn losses(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut fv =
        |n: usize| FeatureVectors::new(n, 256, (0..n * 256).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
    let (a, b) = (fv(1024), fv(1024));
    let mut g = c.benchmark_group("losses_1024x256");
    for (mode, name) in MODES {
        par::set_mode(mode);
        g.bench_function(BenchmarkId::new("remd", name), |bench| {
            bench.iter(|| remd_loss::<f64>(black_box(&a), &b).unwrap())
        });
        g.bench_function(BenchmarkId::new("self_similarity", name), |bench| {
            bench.iter(|| self_similarity_loss::<f64>(black_box(&a), &b).unwrap())
        });
    }
    g.finish();
}

fn stylize(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let ex = Arc::new(Extractor::random(VggVariant::Vgg19, 5));
    let style = random_image(&mut rng, 128);
    let stack = StylizationStack {
        style: StyleContext::new(&ex, &style).unwrap(),
        extractor: ex,
        drafting: DraftingNet::new(6),
        revisions: vec![RevisionNet::new(1, 7)],
    };
    let content = random_image(&mut rng, 256);
    let mut g = c.benchmark_group("stylize_256px_1_level");
    g.sample_size(10);
    for (mode, name) in MODES {
        par::set_mode(mode);
        g.bench_function(BenchmarkId::from_parameter(name), |bench| {
            bench.iter(|| stack.stylize(black_box(&content), 1).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, conv, pyramid, losses, stylize);
criterion_main!(benches);
