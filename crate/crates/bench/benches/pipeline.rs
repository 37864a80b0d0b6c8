use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use eyolo_bench::{random_conv, random_pairs, random_tensor};
use eyolo_core::bench::random_candidates;
use eyolo_core::geometry::{iou3d, nms3d, nms_two_pass_2d, NmsConfig};
use eyolo_core::tensor::conv2d;
use eyolo_core::{NetConfig, Network};

fn conv(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv2d");
    for (name, k, stride) in [("1x1", 1, 1), ("3x3", 3, 1), ("3x3_s2", 3, 2)] {
        let x = random_tensor([1, 32, 64, 64], 1);
        let p = random_conv(64, 32, k, stride, 2);
        g.bench_function(name, |b| b.iter(|| conv2d(black_box(&x), &p).unwrap()));
    }
    g.finish();
}

fn iou(c: &mut Criterion) {
    let pairs = random_pairs(1000, 3);
    c.bench_function("iou3d_1000_pairs", |b| {
        b.iter(|| pairs.iter().map(|(a, q)| iou3d(a, q)).sum::<f64>())
    });
}

fn nms(c: &mut Criterion) {
    let cfg = NmsConfig::default();
    let mut g = c.benchmark_group("nms");
    for n in [100, 1000] {
        let boxes = random_candidates(n, 4);
        g.bench_with_input(BenchmarkId::new("single_pass_3d", n), &boxes, |b, bx| {
            b.iter(|| nms3d(black_box(bx), &cfg))
        });
        g.bench_with_input(BenchmarkId::new("two_pass_2d", n), &boxes, |b, bx| {
            b.iter(|| nms_two_pass_2d(black_box(bx), &cfg))
        });
    }
    g.finish();
}

fn forward(c: &mut Criterion) {
    let net = Network::build(NetConfig::tiny(), 0).unwrap();
    let x = random_tensor([1, 4, 128, 128], 5);
    let mut g = c.benchmark_group("forward");
    g.sample_size(10);
    g.bench_function("tiny", |b| b.iter(|| net.forward(black_box(&x)).unwrap()));
    g.finish();
}

criterion_group!(benches, conv, iou, nms, forward);
criterion_main!(benches);
