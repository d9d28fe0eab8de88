//! Bilinear resizing (half-pixel centers) and 2×2 average pooling.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};

/// Source taps `(i0, i1, frac)` for each output coordinate along one axis.
fn axis_taps<T: Element>(input: usize, output: usize) -> Vec<(usize, usize, T)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, T::of(src - i0 as f64))
        })
        .collect()
}

/// Resizes every plane to `out_h`×`out_w` (align-corners = false).
pub fn bilinear_resize<T: Element>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if out_h == 0 || out_w == 0 {
        return Err(Error::config("bilinear_resize: output size must be at least 1x1"));
    }
    if s.h == 0 || s.w == 0 {
        return Err(Error::config("bilinear_resize: empty input plane"));
    }
    if (s.h, s.w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let rows = axis_taps::<T>(s.h, out_h);
    let cols = axis_taps::<T>(s.w, out_w);
    let mut out = Tensor::zeros(s.with_spatial(out_h, out_w));
    let plane_in = s.plane();
    out.data_mut()
        .par_chunks_mut(out_h * out_w)
        .enumerate()
        .for_each(|(i, dst)| {
            let src = &x.data()[i * plane_in..(i + 1) * plane_in];
            let mut horiz = vec![T::zero(); s.h * out_w];
            for (row, hrow) in src.chunks_exact(s.w).zip(horiz.chunks_exact_mut(out_w)) {
                for (h, &(x0, x1, fx)) in hrow.iter_mut().zip(&cols) {
                    *h = row[x0] + (row[x1] - row[x0]) * fx;
                }
            }
            for (drow, &(y0, y1, fy)) in dst.chunks_exact_mut(out_w).zip(&rows) {
                let top = &horiz[y0 * out_w..(y0 + 1) * out_w];
                let bot = &horiz[y1 * out_w..(y1 + 1) * out_w];
                for ((d, &t), &b) in drow.iter_mut().zip(top).zip(bot) {
                    *d = t + (b - t) * fy;
                }
            }
        });
    Ok(out)
}

/// Adjoint of [`bilinear_resize`]: scatters output gradients onto the input grid.
pub fn bilinear_resize_backward<T: Element>(input: Shape, grad: &Tensor<T>) -> Tensor<T> {
    let g = grad.shape();
    if (input.h, input.w) == (g.h, g.w) {
        return grad.clone();
    }
    let rows = axis_taps::<T>(input.h, g.h);
    let cols = axis_taps::<T>(input.w, g.w);
    let mut out = Tensor::zeros(input);
    let plane_out = g.plane();
    out.data_mut()
        .par_chunks_mut(input.plane())
        .enumerate()
        .for_each(|(i, dst)| {
            let src = &grad.data()[i * plane_out..(i + 1) * plane_out];
            for (oy, &(y0, y1, fy)) in rows.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in cols.iter().enumerate() {
                    let v = src[oy * g.w + ox];
                    let top = v * (T::one() - fy);
                    let bot = v * fy;
                    dst[y0 * input.w + x0] = dst[y0 * input.w + x0] + top * (T::one() - fx);
                    dst[y0 * input.w + x1] = dst[y0 * input.w + x1] + top * fx;
                    dst[y1 * input.w + x0] = dst[y1 * input.w + x0] + bot * (T::one() - fx);
                    dst[y1 * input.w + x1] = dst[y1 * input.w + x1] + bot * fx;
                }
            }
        });
    out
}

/// 2×2 average pooling with stride 2; odd trailing rows/columns are dropped.
pub fn avg_pool2<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    let (oh, ow) = (s.h / 2, s.w / 2);
    if oh == 0 || ow == 0 {
        return Err(Error::Shape {
            op: "avg_pool2",
            axis: if oh == 0 { "height" } else { "width" },
            expected: 2,
            got: if oh == 0 { s.h } else { s.w },
        });
    }
    let quarter = T::of(0.25);
    let mut out = Tensor::zeros(s.with_spatial(oh, ow));
    out.data_mut()
        .par_chunks_mut(oh * ow)
        .enumerate()
        .for_each(|(i, dst)| {
            let src = &x.data()[i * s.plane()..(i + 1) * s.plane()];
            for y in 0..oh {
                for xo in 0..ow {
                    let a = src[2 * y * s.w + 2 * xo] + src[2 * y * s.w + 2 * xo + 1];
                    let b = src[(2 * y + 1) * s.w + 2 * xo] + src[(2 * y + 1) * s.w + 2 * xo + 1];
                    dst[y * ow + xo] = (a + b) * quarter;
                }
            }
        });
    Ok(out)
}

pub fn avg_pool2_backward<T: Element>(input: Shape, grad: &Tensor<T>) -> Tensor<T> {
    let g = grad.shape();
    let quarter = T::of(0.25);
    let mut out = Tensor::zeros(input);
    out.data_mut()
        .par_chunks_mut(input.plane())
        .enumerate()
        .for_each(|(i, dst)| {
            let src = &grad.data()[i * g.plane()..(i + 1) * g.plane()];
            for y in 0..g.h {
                for x in 0..g.w {
                    let v = src[y * g.w + x] * quarter;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            dst[(2 * y + dy) * input.w + 2 * x + dx] = v;
                        }
                    }
                }
            }
        });
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_size_is_bit_identical() {
        let x = Tensor::from_fn(Shape::new(1, 2, 3, 5), |[_, c, h, w]| (c as f32 + 0.1) * (h as f32 - w as f32).sin());
        assert_eq!(bilinear_resize(&x, 3, 5).unwrap(), x);
    }

    #[test]
    fn constant_stays_constant() {
        let x = Tensor::full(Shape::new(1, 1, 3, 4), 0.7f64);
        for (h, w) in [(1, 1), (5, 7), (12, 2)] {
            let y = bilinear_resize(&x, h, w).unwrap();
            assert!(y.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
        }
    }

    #[test]
    fn half_pixel_row_pattern() {
        let x = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![0.0f64, 1.0, 0.0, 1.0]).unwrap();
        let y = bilinear_resize(&x, 2, 4).unwrap();
        assert_eq!(y.data(), &[0.0, 0.25, 0.75, 1.0, 0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn zero_size_rejected() {
        let x = Tensor::<f64>::zeros(Shape::new(1, 1, 2, 2));
        assert!(bilinear_resize(&x, 0, 3).is_err());
    }

    #[test]
    fn pooling_averages_quads() {
        let x = Tensor::from_vec(Shape::new(1, 1, 2, 4), vec![1.0f64, 3.0, 0.0, 0.0, 5.0, 7.0, 4.0, 8.0]).unwrap();
        assert_eq!(avg_pool2(&x).unwrap().data(), &[4.0, 3.0]);
    }
}
