use fastsal::ops::{self, ConvParams};
use fastsal::{Shape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: Shape, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Direct seven-loop convolution.
fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, p: ConvParams) -> Tensor<f64> {
    let (xs, ws) = (x.shape(), w.shape());
    let (sh, sw) = p.stride;
    let (ph, pw) = p.padding;
    let oh = (xs.h + 2 * ph - ws.h) / sh + 1;
    let ow = (xs.w + 2 * pw - ws.w) / sw + 1;
    let cin_g = xs.c / p.groups;
    let cout_g = ws.n / p.groups;
    Tensor::from_fn(Shape::new(xs.n, ws.n, oh, ow), |[n, co, y, xx]| {
        let g = co / cout_g;
        let mut acc = b.data()[co];
        for ci in 0..cin_g {
            for ki in 0..ws.h {
                for kj in 0..ws.w {
                    let iy = (y * sh + ki) as isize - ph as isize;
                    let ix = (xx * sw + kj) as isize - pw as isize;
                    if iy >= 0 && ix >= 0 && (iy as usize) < xs.h && (ix as usize) < xs.w {
                        acc += w.at(co, ci, ki, kj) * x.at(n, g * cin_g + ci, iy as usize, ix as usize);
                    }
                }
            }
        }
        acc
    })
}

fn conv_case() -> impl Strategy<Value = (Shape, Shape, ConvParams)> {
    (1..3usize, 1..4usize, 1..4usize, 1..3usize, prop_oneof![Just(1usize), Just(3)], 1..3usize, 3..9usize, 3..9usize, 0..2usize).prop_map(
        |(n, groups, cin_g, cout_g, k, stride, h, w, extra)| {
            let pad = if k == 3 { 1 } else { extra };
            (
                Shape::new(n, groups * cin_g, h, w),
                Shape::new(groups * cout_g, cin_g, k, k),
                ConvParams::new(stride, pad).with_groups(groups),
            )
        },
    )
}

proptest! {
    #[test]
    fn conv_matches_naive_oracle((xs, ws, p) in conv_case(), seed in 0..1000u64) {
        let x = random(xs, seed);
        let w = random(ws, seed + 1);
        let b = random(Shape::vector(ws.n), seed + 2);
        let got = ops::conv2d(&x, &w, Some(&b), p).unwrap();
        let want = naive_conv(&x, &w, &b, p);
        prop_assert_eq!(got.shape(), want.shape());
        prop_assert!(got.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn wide_tap_sum_path_matches_naive_oracle(cin in 10..24usize, h in 2..7usize, w in 2..7usize, seed in 0..1000u64) {
        let x = random(Shape::new(1, cin, h, w), seed);
        let wt = random(Shape::new(1, cin, 3, 3), seed + 1);
        let b = random(Shape::vector(1), seed + 2);
        let p = ConvParams::new(1, 1);
        prop_assert!(ops::conv2d(&x, &wt, Some(&b), p).unwrap().max_abs_diff(&naive_conv(&x, &wt, &b, p)) < 1e-12);
    }

    #[test]
    fn pixel_shuffle_inverts_space_to_depth(c in 1..4usize, h in 1..5usize, w in 1..5usize, r in 1..4usize, seed in 0..100u64) {
        let x = random(Shape::new(2, c, h * r, w * r), seed);
        let packed = ops::space_to_depth(&x, r).unwrap();
        prop_assert_eq!(packed.shape(), Shape::new(2, c * r * r, h, w));
        prop_assert_eq!(ops::pixel_shuffle(&packed, r).unwrap(), x);
    }

    #[test]
    fn concat_then_split_is_identity(a in 1..4usize, b in 1..4usize, seed in 0..100u64) {
        let x = random(Shape::new(2, a, 3, 2), seed);
        let y = random(Shape::new(2, b, 3, 2), seed + 1);
        let cat = ops::concat_channels(&[&x, &y]).unwrap();
        let parts = ops::split_channels(&cat, &[a, b]).unwrap();
        prop_assert_eq!(&parts[0], &x);
        prop_assert_eq!(&parts[1], &y);
    }

    #[test]
    fn resize_and_pool_preserve_constants(v in -5.0..5.0f64, h in 1..9usize, w in 1..9usize, oh in 1..12usize, ow in 1..12usize) {
        let x = Tensor::full(Shape::new(1, 2, h, w), v);
        let r = ops::bilinear_resize(&x, oh, ow).unwrap();
        prop_assert!(r.data().iter().all(|&y| (y - v).abs() < 1e-12));
        let p = ops::avg_pool2(&Tensor::full(Shape::new(1, 2, 2 * h, 2 * w), v)).unwrap();
        prop_assert!(p.data().iter().all(|&y| (y - v).abs() < 1e-12));
    }

    #[test]
    fn activation_ranges(seed in 0..1000u64) {
        let x = random(Shape::new(1, 2, 4, 4), seed).map(|v| v * 20.0);
        prop_assert!(ops::relu6(&x).data().iter().all(|&v| (0.0..=6.0).contains(&v)));
        prop_assert!(ops::sigmoid(&x).data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let m = ops::minmax_normalize(&x);
        let (lo, hi) = m.data().iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        prop_assert!(lo.abs() < 1e-15 && (hi - 1.0).abs() < 1e-15);
        let s = ops::softmax_spatial(&random(Shape::new(3, 1, 4, 4), seed)).unwrap();
        for item in s.data().chunks(16) {
            prop_assert!((item.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn batch_norm_eval_matches_formula() {
    let x = random(Shape::new(2, 3, 2, 2), 1);
    let g = Tensor::vector(vec![1.0, 2.0, 0.5]);
    let b = Tensor::vector(vec![0.0, -1.0, 3.0]);
    let m = Tensor::vector(vec![0.1, 0.2, -0.3]);
    let v = Tensor::vector(vec![1.0, 4.0, 0.25]);
    let eps = 1e-5;
    let y = ops::batch_norm_eval(&x, &g, &b, &m, &v, eps).unwrap();
    let expect = Tensor::from_fn(x.shape(), |[n, c, h, w]| {
        g.data()[c] * (x.at(n, c, h, w) - m.data()[c]) / (v.data()[c] + eps).sqrt() + b.data()[c]
    });
    assert!(y.max_abs_diff(&expect) < 1e-12);
    assert!(ops::batch_norm_eval(&x, &g, &b, &m, &Tensor::vector(vec![1.0, -1.0, 1.0]), eps).is_err());
}

#[test]
fn pixel_shuffle_layout() {
    let x = Tensor::from_vec(Shape::new(1, 4, 1, 1), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let y = ops::pixel_shuffle(&x, 2).unwrap();
    assert_eq!(y.shape(), Shape::new(1, 1, 2, 2));
    assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
    assert!(ops::pixel_shuffle(&Tensor::<f64>::zeros(Shape::new(1, 3, 1, 1)), 2).is_err());
}

#[test]
fn conv_is_identical_across_thread_counts() {
    let x = random(Shape::new(1, 16, 24, 20), 3).cast::<f32>();
    let w = random(Shape::new(32, 16, 3, 3), 4).cast::<f32>();
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| ops::conv2d(&x, &w, None, ConvParams::new(1, 1)).unwrap())
    };
    let one = run(1);
    let four = run(4);
    assert!(one.data().iter().zip(four.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
}
