use std::hint::black_box;

use corrmix::backbone::FeatureMap;
use corrmix::corrsynth::compute_bcm;
use corrmix::eval::{surface_metrics, Hd95Mode, MaskRef};
use corrmix_bench::noise;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul");
    for n in [64, 256] {
        let a = noise(&[n, n], 1);
        let b = noise(&[n, n], 2);
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bch, _| {
            bch.iter(|| black_box(a.matmul(&b).unwrap()))
        });
    }
    g.finish();
}

fn conv2d(c: &mut Criterion) {
    let x = noise(&[8, 64, 64], 3);
    let k = noise(&[8, 8, 3, 3], 4);
    c.bench_function("conv2d 8x64x64 k3", |b| b.iter(|| black_box(x.conv2d(&k, 1, 1).unwrap())));
}

fn correlation(c: &mut Criterion) {
    let mut g = c.benchmark_group("compute_bcm");
    for wp in [8, 16] {
        let fx = FeatureMap { values: noise(&[16, 64, 64], 5) };
        let fu = FeatureMap { values: noise(&[16, 64, 64], 6) };
        g.bench_with_input(BenchmarkId::from_parameter(wp), &wp, |b, &wp| {
            b.iter(|| black_box(compute_bcm(&fx, &fu, wp).unwrap()))
        });
    }
    g.finish();
}

fn surface(c: &mut Criterion) {
    let disc = |cy: f32, cx: f32, r: f32| -> Vec<bool> {
        (0..64 * 64)
            .map(|i| {
                let (y, x) = ((i / 64) as f32, (i % 64) as f32);
                (y - cy).powi(2) + (x - cx).powi(2) < r * r
            })
            .collect()
    };
    let a = disc(30.0, 30.0, 14.0);
    let b = disc(34.0, 28.0, 12.0);
    let (ma, mb) = (MaskRef::new(&a, 64, 64).unwrap(), MaskRef::new(&b, 64, 64).unwrap());
    c.bench_function("surface_metrics 64x64", |bch| {
        bch.iter(|| black_box(surface_metrics(ma, mb, Hd95Mode::Directed).unwrap()))
    });
}

criterion_group!(benches, matmul, conv2d, correlation, surface);
criterion_main!(benches);
