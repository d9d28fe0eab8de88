//! 2-D convolution (cross-correlation) with stride, zero padding and groups.
//!
//! Grouped convolutions lower onto GEMM through an im2col buffer; the
//! pointwise case multiplies the input planes directly and depthwise
//! convolutions use a direct loop. Work is split into fixed-size chunks, so
//! every output element is reduced in the same order regardless of how many
//! threads run the chunks.

use rayon::prelude::*;

use super::gemm::{gemm, MatRef};
use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};

/// Output channels handled per parallel task.
const ROW_CHUNK: usize = 16;
/// Upper bound on im2col buffer elements in the forward pass.
const COL_BUDGET: usize = 1 << 21;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvParams {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub groups: usize,
}

impl Default for ConvParams {
    fn default() -> Self {
        ConvParams {
            stride: (1, 1),
            padding: (0, 0),
            groups: 1,
        }
    }
}

impl ConvParams {
    pub fn new(stride: usize, padding: usize) -> Self {
        ConvParams {
            stride: (stride, stride),
            padding: (padding, padding),
            groups: 1,
        }
    }

    pub fn with_groups(self, groups: usize) -> Self {
        ConvParams { groups, ..self }
    }

    /// Output spatial size for an input of `h`×`w` and a `kh`×`kw` kernel.
    pub fn output_size(&self, h: usize, w: usize, kh: usize, kw: usize) -> Option<(usize, usize)> {
        let (sh, sw) = self.stride;
        let (ph, pw) = self.padding;
        if sh == 0 || sw == 0 || h + 2 * ph < kh || w + 2 * pw < kw {
            return None;
        }
        Some(((h + 2 * ph - kh) / sh + 1, (w + 2 * pw - kw) / sw + 1))
    }
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    cin_g: usize,
    cout_g: usize,
    groups: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn new(x: Shape, w: Shape, bias: Option<Shape>, p: ConvParams) -> Result<Self> {
        let groups = p.groups;
        if groups == 0 {
            return Err(Error::config("conv2d: groups must be positive"));
        }
        if p.stride.0 == 0 || p.stride.1 == 0 {
            return Err(Error::config("conv2d: stride must be positive"));
        }
        if !x.c.is_multiple_of(groups) {
            return Err(Error::config(format!(
                "conv2d: {groups} groups do not divide {} input channels",
                x.c
            )));
        }
        if !w.n.is_multiple_of(groups) {
            return Err(Error::config(format!(
                "conv2d: {groups} groups do not divide {} output channels",
                w.n
            )));
        }
        if w.c != x.c / groups {
            return Err(Error::Shape {
                op: "conv2d",
                axis: "channels",
                expected: x.c / groups,
                got: w.c,
            });
        }
        if let Some(b) = bias {
            if b.numel() != w.n {
                return Err(Error::Shape {
                    op: "conv2d",
                    axis: "bias",
                    expected: w.n,
                    got: b.numel(),
                });
            }
        }
        if x.h + 2 * p.padding.0 < w.h {
            return Err(Error::Shape {
                op: "conv2d",
                axis: "height",
                expected: w.h,
                got: x.h + 2 * p.padding.0,
            });
        }
        if x.w + 2 * p.padding.1 < w.w {
            return Err(Error::Shape {
                op: "conv2d",
                axis: "width",
                expected: w.w,
                got: x.w + 2 * p.padding.1,
            });
        }
        let (oh, ow) = p.output_size(x.h, x.w, w.h, w.w).expect("validated above");
        Ok(Geometry {
            n: x.n,
            cin: x.c,
            h: x.h,
            w: x.w,
            cout: w.n,
            cin_g: w.c,
            cout_g: w.n / groups,
            groups,
            kh: w.h,
            kw: w.w,
            sh: p.stride.0,
            sw: p.stride.1,
            ph: p.padding.0,
            pw: p.padding.1,
            oh,
            ow,
        })
    }

    fn out_shape(&self) -> Shape {
        Shape::new(self.n, self.cout, self.oh, self.ow)
    }

    fn depthwise(&self) -> bool {
        self.cin_g == 1 && self.cout_g == 1
    }

    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.sh == 1 && self.sw == 1 && self.ph == 0 && self.pw == 0
    }

    /// Stride-1 convs with few output taps relative to input channels are
    /// cheaper as one GEMM per output channel followed by shifted sums.
    fn tap_sum(&self) -> bool {
        self.sh == 1 && self.sw == 1 && self.cout_g * self.kh * self.kw < self.cin_g && !self.pointwise()
    }

    fn k_len(&self) -> usize {
        self.cin_g * self.kh * self.kw
    }

    /// Output columns `[lo, hi)` whose tap `kj` lands inside the input row.
    fn col_range(&self, kj: usize) -> (usize, usize) {
        valid_range(self.ow, self.sw, self.pw, kj, self.w)
    }
}

/// Range of output positions `o` with `o * stride + k - pad` in `[0, len)`.
fn valid_range(out: usize, stride: usize, pad: usize, k: usize, len: usize) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if len + pad > k {
        ((len + pad - k - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Gathers input patches for output rows `rows` into `cols` (`k_len` × rows·ow).
fn im2col<T: Element>(g: &Geometry, x_g: &[T], rows: std::ops::Range<usize>, cols: &mut [T]) {
    let ncols = rows.len() * g.ow;
    let plane = g.h * g.w;
    cols[..g.k_len() * ncols]
        .par_chunks_mut(ncols)
        .enumerate()
        .for_each(|(r, dst)| {
            let kj = r % g.kw;
            let ki = (r / g.kw) % g.kh;
            let ci = r / (g.kw * g.kh);
            let src = &x_g[ci * plane..(ci + 1) * plane];
            let (lo, hi) = g.col_range(kj);
            for (i, oh) in rows.clone().enumerate() {
                let seg = &mut dst[i * g.ow..(i + 1) * g.ow];
                let ih = (oh * g.sh + ki) as isize - g.ph as isize;
                if ih < 0 || ih >= g.h as isize {
                    seg.fill(T::zero());
                    continue;
                }
                let row = &src[ih as usize * g.w..(ih as usize + 1) * g.w];
                seg[..lo].fill(T::zero());
                seg[hi..].fill(T::zero());
                for (ow, v) in seg.iter_mut().enumerate().take(hi).skip(lo) {
                    *v = row[ow * g.sw + kj - g.pw];
                }
            }
        });
}

/// Scatter-adds patch gradients back onto the input plane of one channel.
fn col2im_channel<T: Element>(g: &Geometry, gcols: &[T], ci: usize, gx: &mut [T]) {
    let ncols = g.oh * g.ow;
    for ki in 0..g.kh {
        for kj in 0..g.kw {
            let r = (ci * g.kh + ki) * g.kw + kj;
            let src = &gcols[r * ncols..(r + 1) * ncols];
            let (lo, hi) = g.col_range(kj);
            for oh in 0..g.oh {
                let ih = (oh * g.sh + ki) as isize - g.ph as isize;
                if ih < 0 || ih >= g.h as isize {
                    continue;
                }
                let row = &mut gx[ih as usize * g.w..(ih as usize + 1) * g.w];
                let seg = &src[oh * g.ow..(oh + 1) * g.ow];
                for ow in lo..hi {
                    row[ow * g.sw + kj - g.pw] = row[ow * g.sw + kj - g.pw] + seg[ow];
                }
            }
        }
    }
}

/// Convolves `x` (N×C_in×H×W) with `weight` (C_out×C_in/groups×K_h×K_w).
pub fn conv2d<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    p: ConvParams,
) -> Result<Tensor<T>> {
    let g = Geometry::new(x.shape(), weight.shape(), bias.map(|b| b.shape()), p)?;
    let mut out = Tensor::zeros(g.out_shape());
    if g.depthwise() {
        depthwise_forward(&g, x.data(), weight.data(), out.data_mut());
    } else {
        gemm_forward(&g, x.data(), weight.data(), out.data_mut());
    }
    if let Some(b) = bias {
        let b = b.data();
        let plane = g.oh * g.ow;
        out.data_mut()
            .par_chunks_mut(plane)
            .enumerate()
            .for_each(|(i, dst)| {
                let v = b[i % g.cout];
                dst.iter_mut().for_each(|o| *o = *o + v);
            });
    }
    Ok(out)
}

fn depthwise_forward<T: Element>(g: &Geometry, x: &[T], w: &[T], out: &mut [T]) {
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let kk = g.kh * g.kw;
    out.par_chunks_mut(plane_out).enumerate().for_each(|(i, dst)| {
        let c = i % g.cout;
        let src = &x[i * plane_in..(i + 1) * plane_in];
        let k = &w[c * kk..(c + 1) * kk];
        for oh in 0..g.oh {
            let drow = &mut dst[oh * g.ow..(oh + 1) * g.ow];
            for ki in 0..g.kh {
                let ih = (oh * g.sh + ki) as isize - g.ph as isize;
                if ih < 0 || ih >= g.h as isize {
                    continue;
                }
                let srow = &src[ih as usize * g.w..(ih as usize + 1) * g.w];
                for kj in 0..g.kw {
                    let wv = k[ki * g.kw + kj];
                    let (lo, hi) = g.col_range(kj);
                    if lo >= hi {
                        continue;
                    }
                    let start = lo * g.sw + kj - g.pw;
                    let dseg = &mut drow[lo..hi];
                    if g.sw == 1 {
                        for (d, &v) in dseg.iter_mut().zip(&srow[start..start + hi - lo]) {
                            *d = *d + wv * v;
                        }
                    } else {
                        for (d, &v) in dseg.iter_mut().zip(srow[start..].iter().step_by(g.sw)) {
                            *d = *d + wv * v;
                        }
                    }
                }
            }
        }
    });
}

fn tap_forward<T: Element>(g: &Geometry, x: &[T], w: &[T], out: &mut [T]) {
    let plane_in = g.h * g.w;
    let p_out = g.oh * g.ow;
    let kk = g.kh * g.kw;
    let k_len = g.k_len();
    let mut z = vec![T::zero(); kk * plane_in];
    for n in 0..g.n {
        for grp in 0..g.groups {
            let x_g = &x[(n * g.cin + grp * g.cin_g) * plane_in..][..g.cin_g * plane_in];
            let b = MatRef::row_major(x_g, g.cin_g, plane_in);
            for co in 0..g.cout_g {
                let w_co = &w[(grp * g.cout_g + co) * k_len..][..k_len];
                let a = MatRef::row_major(w_co, g.cin_g, kk).t();
                gemm(a, b, &mut z, plane_in, false);
                let dst = &mut out[(n * g.cout + grp * g.cout_g + co) * p_out..][..p_out];
                dst.par_chunks_mut(g.ow).enumerate().for_each(|(oh, drow)| {
                    for ki in 0..g.kh {
                        let ih = (oh + ki) as isize - g.ph as isize;
                        if ih < 0 || ih >= g.h as isize {
                            continue;
                        }
                        for kj in 0..g.kw {
                            let zrow = &z[(ki * g.kw + kj) * plane_in + ih as usize * g.w..][..g.w];
                            let (lo, hi) = g.col_range(kj);
                            for ow in lo..hi {
                                drow[ow] = drow[ow] + zrow[ow + kj - g.pw];
                            }
                        }
                    }
                });
            }
        }
    }
}

fn gemm_forward<T: Element>(g: &Geometry, x: &[T], w: &[T], out: &mut [T]) {
    let plane_in = g.h * g.w;
    let p_out = g.oh * g.ow;
    let k_len = g.k_len();
    let rows_per_block = (COL_BUDGET / (k_len * g.ow).max(1)).clamp(1, g.oh);
    if g.tap_sum() {
        return tap_forward(g, x, w, out);
    }
    let mut cols = if g.pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); k_len * rows_per_block * g.ow]
    };
    for n in 0..g.n {
        for grp in 0..g.groups {
            let x_g = &x[(n * g.cin + grp * g.cin_g) * plane_in..][..g.cin_g * plane_in];
            let w_g = &w[grp * g.cout_g * k_len..][..g.cout_g * k_len];
            let out_g = &mut out[(n * g.cout + grp * g.cout_g) * p_out..][..g.cout_g * p_out];
            if g.pointwise() {
                let b = MatRef::row_major(x_g, g.cin_g, p_out);
                out_g
                    .par_chunks_mut(ROW_CHUNK * p_out)
                    .enumerate()
                    .for_each(|(ci, chunk)| {
                        let rows = chunk.len() / p_out;
                        let a = MatRef::row_major(&w_g[ci * ROW_CHUNK * k_len..], rows, k_len);
                        gemm(a, b, chunk, p_out, false);
                    });
                continue;
            }
            let mut r0 = 0;
            while r0 < g.oh {
                let r1 = (r0 + rows_per_block).min(g.oh);
                let ncols = (r1 - r0) * g.ow;
                im2col(g, x_g, r0..r1, &mut cols);
                let b = MatRef::row_major(&cols[..k_len * ncols], k_len, ncols);
                out_g
                    .par_chunks_mut(ROW_CHUNK * p_out)
                    .enumerate()
                    .for_each(|(ci, chunk)| {
                        let rows = chunk.len() / p_out;
                        let a = MatRef::row_major(&w_g[ci * ROW_CHUNK * k_len..], rows, k_len);
                        gemm(a, b, &mut chunk[r0 * g.ow..], p_out, false);
                    });
                r0 = r1;
            }
        }
    }
}

/// Gradients of a convolution with respect to its operands.
#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

/// Which operand gradients to compute.
#[derive(Debug, Clone, Copy)]
pub struct ConvGradMask {
    pub input: bool,
    pub weight: bool,
    pub bias: bool,
}

impl ConvGradMask {
    pub const ALL: ConvGradMask = ConvGradMask {
        input: true,
        weight: true,
        bias: true,
    };
}

pub fn conv2d_backward<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    p: ConvParams,
    mask: ConvGradMask,
) -> Result<ConvGrads<T>> {
    let g = Geometry::new(x.shape(), weight.shape(), None, p)?;
    if grad_out.shape() != g.out_shape() {
        return Err(Error::contract(format!(
            "conv2d_backward: gradient shape {} does not match output {}",
            grad_out.shape(),
            g.out_shape()
        )));
    }
    let mut gx = mask.input.then(|| Tensor::zeros(x.shape()));
    let mut gw = mask.weight.then(|| Tensor::zeros(weight.shape()));
    if g.depthwise() {
        depthwise_backward(
            &g,
            x.data(),
            weight.data(),
            grad_out.data(),
            gx.as_mut().map(|t| t.data_mut()),
            gw.as_mut().map(|t| t.data_mut()),
        );
    } else {
        gemm_backward(
            &g,
            x.data(),
            weight.data(),
            grad_out.data(),
            gx.as_mut().map(|t| t.data_mut()),
            gw.as_mut().map(|t| t.data_mut()),
        );
    }
    let gb = mask.bias.then(|| {
        let plane = g.oh * g.ow;
        let mut b = vec![T::zero(); g.cout];
        for n in 0..g.n {
            for (c, acc) in b.iter_mut().enumerate() {
                let s: T = grad_out.data()[(n * g.cout + c) * plane..][..plane].iter().copied().sum();
                *acc = *acc + s;
            }
        }
        Tensor::vector(b)
    });
    Ok(ConvGrads {
        input: gx,
        weight: gw,
        bias: gb,
    })
}

fn depthwise_backward<T: Element>(
    g: &Geometry,
    x: &[T],
    w: &[T],
    gout: &[T],
    gx: Option<&mut [T]>,
    gw: Option<&mut [T]>,
) {
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let kk = g.kh * g.kw;
    if let Some(gx) = gx {
        gx.par_chunks_mut(plane_in).enumerate().for_each(|(i, dst)| {
            let c = i % g.cout;
            let src = &gout[i * plane_out..(i + 1) * plane_out];
            let k = &w[c * kk..(c + 1) * kk];
            for oh in 0..g.oh {
                let grow = &src[oh * g.ow..(oh + 1) * g.ow];
                for ki in 0..g.kh {
                    let ih = (oh * g.sh + ki) as isize - g.ph as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let drow = &mut dst[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for kj in 0..g.kw {
                        let wv = k[ki * g.kw + kj];
                        let (lo, hi) = g.col_range(kj);
                        for ow in lo..hi {
                            let iw = ow * g.sw + kj - g.pw;
                            drow[iw] = drow[iw] + wv * grow[ow];
                        }
                    }
                }
            }
        });
    }
    if let Some(gw) = gw {
        gw.par_chunks_mut(kk).enumerate().for_each(|(c, dk)| {
            for n in 0..g.n {
                let i = n * g.cout + c;
                let src = &x[i * plane_in..(i + 1) * plane_in];
                let grad = &gout[i * plane_out..(i + 1) * plane_out];
                for ki in 0..g.kh {
                    for kj in 0..g.kw {
                        let (lo, hi) = g.col_range(kj);
                        let mut acc = T::zero();
                        for oh in 0..g.oh {
                            let ih = (oh * g.sh + ki) as isize - g.ph as isize;
                            if ih < 0 || ih >= g.h as isize {
                                continue;
                            }
                            let srow = &src[ih as usize * g.w..(ih as usize + 1) * g.w];
                            let grow = &grad[oh * g.ow..(oh + 1) * g.ow];
                            for ow in lo..hi {
                                acc = acc + grow[ow] * srow[ow * g.sw + kj - g.pw];
                            }
                        }
                        dk[ki * g.kw + kj] = dk[ki * g.kw + kj] + acc;
                    }
                }
            }
        });
    }
}

fn gemm_backward<T: Element>(
    g: &Geometry,
    x: &[T],
    w: &[T],
    gout: &[T],
    mut gx: Option<&mut [T]>,
    mut gw: Option<&mut [T]>,
) {
    let plane_in = g.h * g.w;
    let p_out = g.oh * g.ow;
    let k_len = g.k_len();
    let mut cols = if g.pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); k_len * p_out]
    };
    let mut gcols = cols.clone();
    for n in 0..g.n {
        for grp in 0..g.groups {
            let x_off = (n * g.cin + grp * g.cin_g) * plane_in;
            let x_g = &x[x_off..][..g.cin_g * plane_in];
            let w_g = &w[grp * g.cout_g * k_len..][..g.cout_g * k_len];
            let go_g = &gout[(n * g.cout + grp * g.cout_g) * p_out..][..g.cout_g * p_out];
            let go = MatRef::row_major(go_g, g.cout_g, p_out);
            let wt = MatRef::row_major(w_g, g.cout_g, k_len).t();

            if let Some(gx) = gx.as_deref_mut() {
                let gx_g = &mut gx[x_off..][..g.cin_g * plane_in];
                let target: &mut [T] = if g.pointwise() { gx_g } else { &mut gcols };
                target
                    .par_chunks_mut(ROW_CHUNK * p_out)
                    .enumerate()
                    .for_each(|(ci, chunk)| {
                        let rows = chunk.len() / p_out;
                        let mut a = wt;
                        a.data = &w_g[ci * ROW_CHUNK..];
                        a.rows = rows;
                        gemm(a, go, chunk, p_out, false);
                    });
                if !g.pointwise() {
                    let gx_g = &mut gx[x_off..][..g.cin_g * plane_in];
                    gx_g.par_chunks_mut(plane_in).enumerate().for_each(|(ci, dst)| {
                        col2im_channel(g, &gcols, ci, dst);
                    });
                }
            }

            if let Some(gw) = gw.as_deref_mut() {
                let patches: &[T] = if g.pointwise() {
                    x_g
                } else {
                    im2col(g, x_g, 0..g.oh, &mut cols);
                    &cols
                };
                let pt = MatRef::row_major(patches, k_len, p_out).t();
                let gw_g = &mut gw[grp * g.cout_g * k_len..][..g.cout_g * k_len];
                gw_g.par_chunks_mut(ROW_CHUNK * k_len)
                    .enumerate()
                    .for_each(|(ci, chunk)| {
                        let rows = chunk.len() / k_len;
                        let a = MatRef::row_major(&go_g[ci * ROW_CHUNK * p_out..], rows, p_out);
                        gemm(a, pt, chunk, k_len, true);
                    });
            }
        }
    }
}
