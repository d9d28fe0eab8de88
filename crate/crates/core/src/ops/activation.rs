//! Elementwise activations and per-item normalizations.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub fn relu6<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let six = T::of(6.0);
    x.map(|v| v.max(T::zero()).min(six))
}

/// Passes the gradient where `0 < x < 6`.
pub fn relu6_backward<T: Element>(x: &Tensor<T>, grad: &Tensor<T>) -> Tensor<T> {
    let six = T::of(6.0);
    let mut g = grad.clone();
    for (g, &v) in g.data_mut().iter_mut().zip(x.data()) {
        if v <= T::zero() || v >= six {
            *g = T::zero();
        }
    }
    g
}

pub fn sigmoid<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

/// Numerically stable logistic function.
pub fn sigmoid_scalar<T: Element>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Gradient given the forward output `y`.
pub fn sigmoid_backward<T: Element>(y: &Tensor<T>, grad: &Tensor<T>) -> Tensor<T> {
    let mut g = grad.clone();
    for (g, &s) in g.data_mut().iter_mut().zip(y.data()) {
        *g = *g * s * (T::one() - s);
    }
    g
}

/// Softmax over all H·W pixels of each single-channel batch item.
pub fn softmax_spatial<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.c != 1 {
        return Err(Error::Shape {
            op: "softmax_spatial",
            axis: "channels",
            expected: 1,
            got: s.c,
        });
    }
    let mut out = x.clone();
    for item in out.data_mut().chunks_mut(s.item().max(1)) {
        softmax_in_place(item);
    }
    Ok(out)
}

pub(crate) fn softmax_in_place<T: Element>(v: &mut [T]) {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = 0.0f64;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += x.f64();
    }
    let inv = 1.0 / sum;
    for x in v.iter_mut() {
        *x = T::of(x.f64() * inv);
    }
}

/// Gradient given the forward output `y`: `y * (g - <g, y>)` per item.
pub fn softmax_spatial_backward<T: Element>(y: &Tensor<T>, grad: &Tensor<T>) -> Tensor<T> {
    let len = y.shape().item().max(1);
    let mut out = grad.clone();
    for (g, p) in out.data_mut().chunks_mut(len).zip(y.data().chunks(len)) {
        let dot: T = g.iter().zip(p).map(|(&a, &b)| a * b).sum();
        for (g, &p) in g.iter_mut().zip(p) {
            *g = p * (*g - dot);
        }
    }
    out
}

/// Min-max scaling to [0, 1] over each batch item; constant items map to zeros.
pub fn minmax_normalize<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let len = x.shape().item().max(1);
    let mut out = x.clone();
    for item in out.data_mut().chunks_mut(len) {
        minmax_in_place(item);
    }
    out
}

pub(crate) fn minmax_in_place<T: Element>(v: &mut [T]) {
    let (lo, hi) = v
        .iter()
        .fold((T::infinity(), T::neg_infinity()), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    let range = hi - lo;
    if range > T::zero() {
        v.iter_mut().for_each(|x| *x = (*x - lo) / range);
    } else {
        v.fill(T::zero());
    }
}

/// Gradient of [`minmax_normalize`] with the extreme positions held fixed.
pub fn minmax_normalize_backward<T: Element>(x: &Tensor<T>, grad: &Tensor<T>) -> Tensor<T> {
    let len = x.shape().item().max(1);
    let mut out = grad.clone();
    for (g, xs) in out.data_mut().chunks_mut(len).zip(x.data().chunks(len)) {
        let (mut imin, mut imax) = (0, 0);
        for (i, &v) in xs.iter().enumerate() {
            if v < xs[imin] {
                imin = i;
            }
            if v > xs[imax] {
                imax = i;
            }
        }
        let range = xs[imax] - xs[imin];
        if range <= T::zero() {
            g.fill(T::zero());
            continue;
        }
        let (mut to_min, mut to_max) = (T::zero(), T::zero());
        for (&gi, &xi) in g.iter().zip(xs) {
            let y = (xi - xs[imin]) / range;
            to_min = to_min + gi * (y - T::one());
            to_max = to_max - gi * y;
        }
        for gi in g.iter_mut() {
            *gi = *gi / range;
        }
        g[imin] = g[imin] + to_min / range;
        g[imax] = g[imax] + to_max / range;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn row(v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(Shape::new(1, 1, 1, v.len()), v.to_vec()).unwrap()
    }

    #[test]
    fn relu6_clamps() {
        assert_eq!(relu6(&row(&[-1.0, 3.0, 9.0])).data(), &[0.0, 3.0, 6.0]);
    }

    #[test]
    fn sigmoid_at_zero_and_extremes() {
        assert_eq!(sigmoid(&row(&[0.0])).data(), &[0.5]);
        let y = sigmoid(&row(&[-800.0, 800.0]));
        assert_eq!(y.data(), &[0.0, 1.0]);
    }

    #[test]
    fn softmax_of_constant_is_uniform() {
        for k in [1usize, 3, 12] {
            let x = Tensor::full(Shape::new(2, 1, 1, k), 4.2f64);
            let y = softmax_spatial(&x).unwrap();
            for &v in y.data() {
                assert!((v - 1.0 / k as f64).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn softmax_is_stable_and_rejects_channels() {
        let y = softmax_spatial(&row(&[1000.0, 1000.0])).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
        let x = Tensor::<f64>::zeros(Shape::new(1, 2, 2, 2));
        assert!(matches!(softmax_spatial(&x), Err(Error::Shape { axis: "channels", .. })));
    }

    #[test]
    fn minmax_cases() {
        assert_eq!(minmax_normalize(&row(&[2.0, 4.0, 6.0])).data(), &[0.0, 0.5, 1.0]);
        assert_eq!(minmax_normalize(&row(&[3.0, 3.0])).data(), &[0.0, 0.0]);
        let fixed = row(&[0.0, 0.3, 1.0, 0.7]);
        assert_eq!(minmax_normalize(&fixed), fixed);
    }

    #[test]
    fn minmax_is_per_item() {
        let x = Tensor::from_vec(Shape::new(2, 1, 1, 2), vec![0.0, 2.0, 10.0, 20.0]).unwrap();
        assert_eq!(minmax_normalize(&x).data(), &[0.0, 1.0, 0.0, 1.0]);
    }
}
