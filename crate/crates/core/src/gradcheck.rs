//! Finite-difference checks for every differentiable op and loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, GradCheckReport, Tape, Var};
use crate::distill::{deepgaze_loss, hint_loss, salgan_loss};
use crate::error::Result;
use crate::network::{init_weights, modified_inverted_residual_graph, BnMode, TapeBackend};
use crate::ops::ConvParams;
use crate::tensor::{Shape, Tensor};

/// Central-difference step used by [`run_check`].
pub const STEP: f64 = 1e-6;
/// Relative error accepted by [`run_check`].
pub const TOLERANCE: f64 = 1e-4;

/// Names accepted by [`run_check`], in reporting order.
pub const CHECKS: &[&str] = &[
    "conv2d",
    "conv2d.weight",
    "conv2d.strided",
    "conv2d.depthwise",
    "conv2d.grouped",
    "conv2d.pointwise",
    "conv2d.tap_sum",
    "batch_norm.train",
    "batch_norm.eval",
    "relu6",
    "sigmoid",
    "softmax_spatial",
    "minmax_normalize",
    "bilinear_resize.up",
    "bilinear_resize.down",
    "avg_pool2",
    "pixel_shuffle",
    "concat",
    "add",
    "mul",
    "modified_inverted_residual",
    "hint_loss",
    "salgan_loss",
    "deepgaze_loss",
];

fn random(rng: &mut ChaCha8Rng, shape: Shape, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// `sum(y * r)` for a fixed random `r`, so every output element matters.
fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let r = random(&mut rng, tape.value(y).shape(), -1.0, 1.0);
    let r = tape.leaf(r, false);
    let p = tape.mul(y, r)?;
    Ok(tape.sum(p))
}

fn conv_check(seed: u64, x: Shape, w: Shape, p: ConvParams, wrt_weight: bool) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xv = random(&mut rng, x, -1.0, 1.0);
    let wv = random(&mut rng, w, -1.0, 1.0);
    let bv = random(&mut rng, Shape::vector(w.n), -1.0, 1.0);
    if wrt_weight {
        grad_check(
            |t, wvar| {
                let xl = t.leaf(xv.clone(), false);
                let b = t.leaf(bv.clone(), false);
                let y = t.conv2d(xl, wvar, Some(b), p)?;
                project(t, y, seed)
            },
            &wv,
            STEP,
            TOLERANCE,
        )
    } else {
        grad_check(
            |t, xvar| {
                let wl = t.leaf(wv.clone(), false);
                let b = t.leaf(bv.clone(), false);
                let y = t.conv2d(xvar, wl, Some(b), p)?;
                project(t, y, seed)
            },
            &xv,
            STEP,
            TOLERANCE,
        )
    }
}

fn unary(seed: u64, shape: Shape, lo: f64, hi: f64, f: impl Fn(&mut Tape<f64>, Var) -> Result<Var>) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random(&mut rng, shape, lo, hi);
    grad_check(
        |t, v| {
            let y = f(t, v)?;
            project(t, y, seed)
        },
        &x,
        STEP,
        TOLERANCE,
    )
}

/// Values kept at least `gap` away from each kink.
fn avoid_kinks(x: Tensor<f64>, kinks: &[f64], gap: f64) -> Tensor<f64> {
    x.map(|v| {
        let mut v = v;
        for &k in kinks {
            if (v - k).abs() < gap {
                v = k + gap.copysign(v - k);
            }
        }
        v
    })
}

/// Runs the named check for one seed.
pub fn run_check(name: &str, seed: u64) -> Result<GradCheckReport> {
    let s = Shape::new;
    match name {
        "conv2d" => conv_check(seed, s(2, 3, 5, 6), s(4, 3, 3, 3), ConvParams::new(1, 1), false),
        "conv2d.weight" => conv_check(seed, s(2, 3, 5, 6), s(4, 3, 3, 3), ConvParams::new(1, 1), true),
        "conv2d.strided" => conv_check(seed, s(1, 3, 7, 6), s(4, 3, 3, 3), ConvParams::new(2, 1), false),
        "conv2d.depthwise" => conv_check(seed, s(2, 4, 5, 5), s(4, 1, 3, 3), ConvParams::new(1, 1).with_groups(4), false),
        "conv2d.grouped" => conv_check(seed, s(1, 4, 5, 5), s(6, 2, 3, 3), ConvParams::new(1, 1).with_groups(2), false),
        "conv2d.pointwise" => conv_check(seed, s(2, 5, 4, 4), s(3, 5, 1, 1), ConvParams::default(), false),
        "conv2d.tap_sum" => conv_check(seed, s(1, 12, 4, 5), s(1, 12, 3, 3), ConvParams::new(1, 1), false),
        "batch_norm.train" => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = random(&mut rng, Shape::vector(3), 0.5, 1.5);
            let b = random(&mut rng, Shape::vector(3), -0.5, 0.5);
            unary(seed, s(2, 3, 3, 4), -1.0, 1.0, |t, x| {
                let (g, b) = (t.leaf(g.clone(), false), t.leaf(b.clone(), false));
                Ok(t.batch_norm_train(x, g, b, 1e-5)?.0)
            })
        }
        "batch_norm.eval" => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = random(&mut rng, Shape::vector(3), 0.5, 1.5);
            let b = random(&mut rng, Shape::vector(3), -0.5, 0.5);
            let m = random(&mut rng, Shape::vector(3), -0.5, 0.5);
            let v = random(&mut rng, Shape::vector(3), 0.5, 1.5);
            unary(seed, s(2, 3, 3, 4), -1.0, 1.0, |t, x| {
                let (gl, bl) = (t.leaf(g.clone(), false), t.leaf(b.clone(), false));
                t.batch_norm_eval(x, gl, bl, &m, &v, 1e-5)
            })
        }
        "relu6" => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = avoid_kinks(random(&mut rng, s(2, 2, 3, 4), -2.0, 8.0), &[0.0, 6.0], 1e-3);
            grad_check(
                |t, v| {
                    let y = t.relu6(v);
                    project(t, y, seed)
                },
                &x,
                STEP,
                TOLERANCE,
            )
        }
        "sigmoid" => unary(seed, s(2, 2, 3, 4), -4.0, 4.0, |t, x| Ok(t.sigmoid(x))),
        "softmax_spatial" => unary(seed, s(2, 1, 3, 4), -3.0, 3.0, |t, x| t.softmax_spatial(x)),
        "minmax_normalize" => unary(seed, s(2, 1, 3, 4), -3.0, 3.0, |t, x| Ok(t.minmax_normalize(x))),
        "bilinear_resize.up" => unary(seed, s(1, 2, 3, 4), -1.0, 1.0, |t, x| t.bilinear_resize(x, 7, 9)),
        "bilinear_resize.down" => unary(seed, s(1, 2, 8, 9), -1.0, 1.0, |t, x| t.bilinear_resize(x, 3, 4)),
        "avg_pool2" => unary(seed, s(2, 2, 5, 6), -1.0, 1.0, |t, x| t.avg_pool2(x)),
        "pixel_shuffle" => unary(seed, s(1, 8, 2, 3), -1.0, 1.0, |t, x| t.pixel_shuffle(x, 2)),
        "concat" => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let other = random(&mut rng, s(2, 3, 3, 3), -1.0, 1.0);
            unary(seed, s(2, 2, 3, 3), -1.0, 1.0, |t, x| {
                let o = t.leaf(other.clone(), false);
                t.concat(&[o, x, x])
            })
        }
        "add" => unary(seed, s(2, 2, 3, 3), -1.0, 1.0, |t, x| {
            let y = t.sigmoid(x);
            t.add(x, y)
        }),
        "mul" => unary(seed, s(2, 2, 3, 3), -1.0, 1.0, |t, x| t.mul(x, x)),
        "modified_inverted_residual" => {
            let g = modified_inverted_residual_graph("m", 4, 4, true)?;
            let w = init_weights(&g, seed).cast::<f64>();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let prev = random(&mut rng, s(2, 4, 4, 4), -1.0, 1.0);
            unary(seed, s(2, 4, 4, 4), -1.0, 1.0, |t, x| {
                let p = t.leaf(prev.clone(), false);
                let mut be = TapeBackend::new(t, &w, BnMode::Train, |_| false);
                let acts = g.run(&mut be, vec![x, p], &[g.output()])?;
                Ok(*acts.get(g.output()).expect("kept"))
            })
        }
        "hint_loss" => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let teacher = random(&mut rng, s(2, 3, 3, 4), -1.0, 1.0);
            let other = random(&mut rng, s(1, 2, 2, 2), -1.0, 1.0);
            let other_t = random(&mut rng, s(1, 2, 2, 2), -1.0, 1.0);
            let x = random(&mut rng, s(2, 3, 3, 4), -1.0, 1.0);
            grad_check(
                |t, v| {
                    let o = t.leaf(other.clone(), false);
                    let l = hint_loss(&[t.value(v), t.value(o)], &[&teacher, &other_t])?;
                    l.record(t, &[v, o])
                },
                &x,
                STEP,
                TOLERANCE,
            )
        }
        "salgan_loss" => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gt = random(&mut rng, s(2, 1, 3, 4), 0.0, 1.0);
            let pseudo = random(&mut rng, s(2, 1, 3, 4), 0.0, 1.0);
            let x = random(&mut rng, s(2, 1, 3, 4), -3.0, 3.0);
            grad_check(
                |t, v| salgan_loss(t.value(v), Some(&gt), Some(&pseudo))?.record(t, &[v]),
                &x,
                STEP,
                TOLERANCE,
            )
        }
        "deepgaze_loss" => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let raw = random(&mut rng, s(2, 1, 3, 4), 0.0, 1.0);
            let mut dist = raw.clone();
            for item in dist.data_mut().chunks_mut(12) {
                let sum: f64 = item.iter().sum();
                item.iter_mut().for_each(|v| *v /= sum);
            }
            let x = random(&mut rng, s(2, 1, 3, 4), -3.0, 3.0);
            grad_check(|t, v| deepgaze_loss(t.value(v), &dist)?.record(t, &[v]), &x, STEP, TOLERANCE)
        }
        other => Err(crate::Error::config(format!("unknown gradient check `{other}`"))),
    }
}

/// Worst report over `seeds` seeds starting at `first_seed`.
pub fn run_seeds(name: &str, first_seed: u64, seeds: usize) -> Result<GradCheckReport> {
    let mut worst: Option<GradCheckReport> = None;
    for s in 0..seeds as u64 {
        let r = run_check(name, first_seed + s)?;
        if worst.as_ref().is_none_or(|w| r.max_rel_error > w.max_rel_error) {
            worst = Some(r);
        }
    }
    worst.ok_or_else(|| crate::Error::config("at least one seed is required"))
}
