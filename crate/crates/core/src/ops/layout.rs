//! Channel/space rearrangements, concatenation and elementwise arithmetic.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};

/// Sub-pixel upsampling: N×C×H×W → N×(C/r²)×rH×rW.
///
/// Output pixel `(c, r·y + dy, r·x + dx)` reads input channel `c·r² + dy·r + dx`.
pub fn pixel_shuffle<T: Element>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if r == 0 || !s.c.is_multiple_of(r * r) {
        return Err(Error::config(format!(
            "pixel_shuffle: {} channels not divisible by r² = {}",
            s.c,
            r * r
        )));
    }
    let oc = s.c / (r * r);
    let out_shape = Shape::new(s.n, oc, s.h * r, s.w * r);
    let mut out = Tensor::zeros(out_shape);
    let (ow, plane_in) = (out_shape.w, s.plane());
    out.data_mut()
        .par_chunks_mut(out_shape.plane())
        .enumerate()
        .for_each(|(i, dst)| {
            let src = &x.data()[i * r * r * plane_in..(i + 1) * r * r * plane_in];
            for (oy, drow) in dst.chunks_exact_mut(ow).enumerate() {
                let (y, dy) = (oy / r, oy % r);
                for dx in 0..r {
                    let srow = &src[(dy * r + dx) * plane_in + y * s.w..][..s.w];
                    for (d, &v) in drow[dx..].iter_mut().step_by(r).zip(srow) {
                        *d = v;
                    }
                }
            }
        });
    Ok(out)
}

/// Inverse of [`pixel_shuffle`]: N×C×rH×rW → N×(C·r²)×H×W.
pub fn space_to_depth<T: Element>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if r == 0 || !s.h.is_multiple_of(r) || !s.w.is_multiple_of(r) {
        return Err(Error::config(format!(
            "space_to_depth: spatial size {}x{} not divisible by {r}",
            s.h, s.w
        )));
    }
    let (h, w) = (s.h / r, s.w / r);
    let out_shape = Shape::new(s.n, s.c * r * r, h, w);
    let mut out = Tensor::zeros(out_shape);
    let dst = out.data_mut();
    for n in 0..s.n {
        for c in 0..s.c {
            for dy in 0..r {
                for dx in 0..r {
                    let oc = c * r * r + dy * r + dx;
                    for y in 0..h {
                        for xx in 0..w {
                            dst[out_shape.offset(n, oc, y, xx)] = x.at(n, c, r * y + dy, r * xx + dx);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Concatenates along channels, preserving list order.
pub fn concat_channels<T: Element>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::contract("concat_channels: empty input list"))?
        .shape();
    let mut channels = 0;
    for t in inputs {
        let s = t.shape();
        for (axis, a, b) in [("batch", first.n, s.n), ("height", first.h, s.h), ("width", first.w, s.w)] {
            if a != b {
                return Err(Error::Shape {
                    op: "concat_channels",
                    axis,
                    expected: a,
                    got: b,
                });
            }
        }
        channels += s.c;
    }
    let out_shape = first.with_channels(channels);
    let mut data = Vec::with_capacity(out_shape.numel());
    for n in 0..first.n {
        for t in inputs {
            data.extend_from_slice(t.item(n));
        }
    }
    Tensor::from_vec(out_shape, data)
}

/// Splits a channel-concatenated tensor back into parts of the given widths.
pub fn split_channels<T: Element>(x: &Tensor<T>, widths: &[usize]) -> Result<Vec<Tensor<T>>> {
    let s = x.shape();
    let total: usize = widths.iter().sum();
    if total != s.c {
        return Err(Error::Shape {
            op: "split_channels",
            axis: "channels",
            expected: total,
            got: s.c,
        });
    }
    let mut parts: Vec<Vec<T>> = widths.iter().map(|&c| Vec::with_capacity(s.n * c * s.plane())).collect();
    for n in 0..s.n {
        let mut offset = 0;
        for (part, &c) in parts.iter_mut().zip(widths) {
            part.extend_from_slice(&x.item(n)[offset * s.plane()..(offset + c) * s.plane()]);
            offset += c;
        }
    }
    parts
        .into_iter()
        .zip(widths)
        .map(|(d, &c)| Tensor::from_vec(s.with_channels(c), d))
        .collect()
}

/// Concatenates tensors with equal C, H and W along the batch axis.
pub fn stack_batch<T: Element>(items: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = items
        .first()
        .ok_or_else(|| Error::contract("stack_batch: no tensors"))?
        .shape();
    let mut data = Vec::with_capacity(first.numel() * items.len());
    let mut n = 0;
    for t in items {
        let s = t.shape();
        for (axis, x, y) in [("channels", first.c, s.c), ("height", first.h, s.h), ("width", first.w, s.w)] {
            if x != y {
                return Err(Error::Shape {
                    op: "stack_batch",
                    axis,
                    expected: x,
                    got: y,
                });
            }
        }
        n += s.n;
        data.extend_from_slice(t.data());
    }
    Tensor::from_vec(Shape::new(n, first.c, first.h, first.w), data)
}

fn same_shape<T: Element>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    let (sa, sb) = (a.shape(), b.shape());
    for (axis, x, y) in [("batch", sa.n, sb.n), ("channels", sa.c, sb.c), ("height", sa.h, sb.h), ("width", sa.w, sb.w)] {
        if x != y {
            return Err(Error::Shape {
                op,
                axis,
                expected: x,
                got: y,
            });
        }
    }
    Ok(())
}

pub fn add<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("add", a, b)?;
    let mut out = a.clone();
    out.data_mut().iter_mut().zip(b.data()).for_each(|(o, &v)| *o = *o + v);
    Ok(out)
}

pub fn mul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("mul", a, b)?;
    let mut out = a.clone();
    out.data_mut().iter_mut().zip(b.data()).for_each(|(o, &v)| *o = *o * v);
    Ok(out)
}
