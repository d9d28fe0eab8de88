use criterion::{criterion_group, criterion_main, Criterion};
use fastsal::ops::{self, ConvParams};
use fastsal::Shape;
use fastsal_bench::random_tensor;
use std::hint::black_box;

fn conv(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv2d");
    let cases = [
        ("stem_3x3_s2", Shape::new(1, 3, 192, 256), Shape::new(32, 3, 3, 3), ConvParams::new(2, 1)),
        ("depthwise_3x3", Shape::new(1, 144, 48, 64), Shape::new(144, 1, 3, 3), ConvParams::new(1, 1).with_groups(144)),
        ("pointwise", Shape::new(1, 144, 48, 64), Shape::new(24, 144, 1, 1), ConvParams::default()),
        ("im2col_3x3", Shape::new(1, 32, 48, 64), Shape::new(64, 32, 3, 3), ConvParams::new(1, 1)),
        ("head_3x3_to_1", Shape::new(1, 352, 96, 128), Shape::new(1, 352, 3, 3), ConvParams::new(1, 1)),
    ];
    for (name, xs, ws, p) in cases {
        let x = random_tensor(xs, 1);
        let w = random_tensor(ws, 2);
        let b = random_tensor(Shape::vector(ws.n), 3);
        g.bench_function(name, |bench| bench.iter(|| ops::conv2d(black_box(&x), &w, Some(&b), p).unwrap()));
    }
    g.finish();
}

fn layout(c: &mut Criterion) {
    let x = random_tensor(Shape::new(1, 96, 24, 32), 1);
    c.bench_function("bilinear_resize_2x", |b| b.iter(|| ops::bilinear_resize(black_box(&x), 48, 64).unwrap()));
    let x = random_tensor(Shape::new(1, 1408, 48, 64), 2);
    c.bench_function("pixel_shuffle_r2", |b| b.iter(|| ops::pixel_shuffle(black_box(&x), 2).unwrap()));
    let x = random_tensor(Shape::new(1, 1, 192, 256), 3);
    c.bench_function("softmax_spatial", |b| b.iter(|| ops::softmax_spatial(black_box(&x)).unwrap()));
}

criterion_group!(benches, conv, layout);
criterion_main!(benches);
