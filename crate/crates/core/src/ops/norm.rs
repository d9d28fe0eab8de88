//! Per-channel batch normalization.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};

/// Default running-statistics momentum and epsilon (MobileNetV2 defaults).
pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

fn check_vectors<T: Element>(x: Shape, vecs: &[(&'static str, &Tensor<T>)], eps: T) -> Result<()> {
    for (axis, v) in vecs {
        if v.numel() != x.c {
            return Err(Error::Shape {
                op: "batch_norm",
                axis,
                expected: x.c,
                got: v.numel(),
            });
        }
    }
    if eps < T::zero() || !eps.is_finite() {
        return Err(Error::config("batch_norm: eps must be a non-negative finite number"));
    }
    Ok(())
}

fn inv_std<T: Element>(var: &[T], eps: T) -> Result<Vec<T>> {
    var.iter()
        .enumerate()
        .map(|(c, &v)| {
            let d = v + eps;
            if d > T::zero() {
                Ok(T::one() / d.sqrt())
            } else {
                Err(Error::numeric(format!(
                    "batch_norm: variance + eps = {d} is not positive on channel {c}"
                )))
            }
        })
        .collect()
}

/// Applies `y = gamma * (x - mean) * inv_std + beta` channel-wise.
fn affine<T: Element>(x: &Tensor<T>, mean: &[T], inv: &[T], gamma: &[T], beta: &[T]) -> Tensor<T> {
    let s = x.shape();
    let mut out = x.clone();
    out.data_mut()
        .par_chunks_mut(s.plane().max(1))
        .enumerate()
        .for_each(|(i, plane)| {
            let c = i % s.c;
            let scale = gamma[c] * inv[c];
            let shift = beta[c] - mean[c] * scale;
            plane.iter_mut().for_each(|v| *v = *v * scale + shift);
        });
    out
}

/// Batch mean and (biased) variance per channel.
pub(crate) fn channel_stats<T: Element>(x: &Tensor<T>) -> (Vec<T>, Vec<T>) {
    let s = x.shape();
    let count = T::of((s.n * s.plane()) as f64);
    (0..s.c)
        .map(|c| {
            let mut sum = T::zero();
            for n in 0..s.n {
                sum = sum + x.plane(n, c).iter().copied().sum();
            }
            let mean = sum / count;
            let mut sq = T::zero();
            for n in 0..s.n {
                sq = sq + x.plane(n, c).iter().map(|&v| (v - mean) * (v - mean)).sum();
            }
            (mean, sq / count)
        })
        .unzip()
}

/// Batch normalization with running statistics.
///
/// In training mode the batch statistics normalize the input and the running
/// statistics are blended with momentum [`BN_MOMENTUM`] (the running variance
/// receives the unbiased batch variance). In eval mode the running
/// statistics are used as-is.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &mut Tensor<T>,
    running_var: &mut Tensor<T>,
    eps: T,
    training: bool,
) -> Result<Tensor<T>> {
    if !training {
        return batch_norm_eval(x, gamma, beta, running_mean, running_var, eps);
    }
    check_vectors(
        x.shape(),
        &[("running_mean", running_mean), ("running_var", running_var)],
        eps,
    )?;
    let out = batch_norm_train(x, gamma, beta, eps)?;
    update_running_stats(x.shape(), &out, running_mean, running_var, T::of(BN_MOMENTUM));
    Ok(out.output)
}

pub fn batch_norm_eval<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &Tensor<T>,
    var: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    check_vectors(
        x.shape(),
        &[("gamma", gamma), ("beta", beta), ("running_mean", mean), ("running_var", var)],
        eps,
    )?;
    let inv = inv_std(var.data(), eps)?;
    Ok(affine(x, mean.data(), &inv, gamma.data(), beta.data()))
}

/// Forward results kept for the training-mode backward pass.
#[derive(Debug, Clone)]
pub struct BatchNormTrain<T> {
    pub output: Tensor<T>,
    pub normalized: Tensor<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub inv_std: Vec<T>,
}

pub fn batch_norm_train<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<BatchNormTrain<T>> {
    check_vectors(x.shape(), &[("gamma", gamma), ("beta", beta)], eps)?;
    let (mean, var) = channel_stats(x);
    let inv = inv_std(&var, eps)?;
    let c = x.shape().c;
    let ones = vec![T::one(); c];
    let zeros = vec![T::zero(); c];
    let normalized = affine(x, &mean, &inv, &ones, &zeros);
    let output = affine(&normalized, &zeros, &ones, gamma.data(), beta.data());
    Ok(BatchNormTrain {
        output,
        normalized,
        mean,
        var,
        inv_std: inv,
    })
}

/// Blends batch statistics into the running estimates.
pub fn update_running_stats<T: Element>(
    shape: Shape,
    stats: &BatchNormTrain<T>,
    running_mean: &mut Tensor<T>,
    running_var: &mut Tensor<T>,
    momentum: T,
) {
    let m = shape.n * shape.plane();
    let unbias = if m > 1 {
        T::of(m as f64 / (m - 1) as f64)
    } else {
        T::one()
    };
    let keep = T::one() - momentum;
    for (r, &b) in running_mean.data_mut().iter_mut().zip(&stats.mean) {
        *r = keep * *r + momentum * b;
    }
    for (r, &b) in running_var.data_mut().iter_mut().zip(&stats.var) {
        *r = keep * *r + momentum * b * unbias;
    }
}

/// Parameter gradients shared by both modes.
fn affine_param_grads<T: Element>(grad: &Tensor<T>, normalized: &Tensor<T>) -> (Vec<T>, Vec<T>) {
    let s = grad.shape();
    (0..s.c)
        .map(|c| {
            let mut gg = T::zero();
            let mut gb = T::zero();
            for n in 0..s.n {
                for (&g, &xh) in grad.plane(n, c).iter().zip(normalized.plane(n, c)) {
                    gg = gg + g * xh;
                    gb = gb + g;
                }
            }
            (gg, gb)
        })
        .unzip()
}

/// Gradients `(input, gamma, beta)` for training mode.
pub fn batch_norm_train_backward<T: Element>(
    grad: &Tensor<T>,
    normalized: &Tensor<T>,
    inv_std: &[T],
    gamma: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let s = grad.shape();
    let (gg, gb) = affine_param_grads(grad, normalized);
    let m = T::of((s.n * s.plane()) as f64);
    let mut gx = Tensor::zeros(s);
    let plane = s.plane();
    gx.data_mut()
        .par_chunks_mut(plane.max(1))
        .enumerate()
        .for_each(|(i, dst)| {
            let (n, c) = (i / s.c, i % s.c);
            let k = gamma.data()[c] * inv_std[c] / m;
            let sum_g = gb[c];
            let sum_gx = gg[c];
            for ((d, &g), &xh) in dst.iter_mut().zip(grad.plane(n, c)).zip(normalized.plane(n, c)) {
                *d = k * (m * g - sum_g - xh * sum_gx);
            }
        });
    (gx, Tensor::vector(gg), Tensor::vector(gb))
}

/// Gradients `(input, gamma, beta)` for eval mode with fixed statistics.
pub fn batch_norm_eval_backward<T: Element>(
    grad: &Tensor<T>,
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    mean: &Tensor<T>,
    var: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let inv = inv_std(var.data(), eps)?;
    let c = x.shape().c;
    let normalized = affine(x, mean.data(), &inv, &vec![T::one(); c], &vec![T::zero(); c]);
    let (gg, gb) = affine_param_grads(grad, &normalized);
    let scale: Vec<T> = (0..c).map(|i| gamma.data()[i] * inv[i]).collect();
    let gx = affine(grad, &vec![T::zero(); c], &scale, &vec![T::one(); c], &vec![T::zero(); c]);
    Ok((gx, Tensor::vector(gg), Tensor::vector(gb)))
}
