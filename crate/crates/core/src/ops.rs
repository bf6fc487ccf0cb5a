//! Numeric kernels: 2-D convolution and transposed convolution (forward,
//! input-gradient, weight-gradient), GEMM helpers, and small reductions.
//!
//! Convolutions are lowered to GEMM through im2col / col2im. All kernels split
//! their output into fixed-size chunks; the `parallel` feature only changes
//! whether chunks run on the rayon pool or in a loop, never the arithmetic
//! order, so results are bit-identical across thread counts and with the
//! sequential fallback.
//!
//! Weight layouts follow the torch convention:
//! - convolution: `(out_channels, in_channels, kh, kw)`
//! - transposed convolution: `(in_channels, out_channels, kh, kw)`
//!
//! A transposed convolution is the adjoint of a convolution, so all three
//! deconv kernels are expressed through the conv kernels with input/output
//! roles swapped.

use ndarray::linalg::general_mat_mul;
use ndarray::prelude::*;

use crate::maybe_par_for_each;

/// Column chunk width for GEMM and im2col work splitting. Fixed so that the
/// decomposition (and therefore float accumulation order) never depends on
/// thread count.
const COL_CHUNK: usize = 1024;
/// Row chunk height for weight-gradient GEMMs.
const ROW_CHUNK: usize = 64;

/// Output spatial size of a convolution (floor semantics).
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    assert!(input + 2 * pad >= kernel, "kernel larger than padded input");
    (input + 2 * pad - kernel) / stride + 1
}

/// Output spatial size of a transposed convolution:
/// `(input - 1) * stride - 2 * pad + kernel`.
pub fn deconv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    let raw = (input - 1) * stride + kernel;
    assert!(raw > 2 * pad, "transposed conv output size would be non-positive");
    raw - 2 * pad
}

/// GEMM `c = alpha * a.dot(b) + beta * c`, split over fixed column chunks.
pub fn gemm_chunked(
    alpha: f32,
    a: &ArrayView2<f32>,
    b: &ArrayView2<f32>,
    beta: f32,
    c: &mut ArrayViewMut2<f32>,
) {
    assert_eq!(a.shape()[1], b.shape()[0]);
    assert_eq!(c.shape()[0], a.shape()[0]);
    assert_eq!(c.shape()[1], b.shape()[1]);
    let n = b.shape()[1];
    maybe_par_for_each!(
        c.axis_chunks_iter_mut(Axis(1), COL_CHUNK).enumerate(),
        c.axis_chunks_iter_mut(Axis(1), COL_CHUNK)
            .into_par_iter()
            .enumerate(),
        |(j, mut cc)| {
            let j0 = j * COL_CHUNK;
            let j1 = (j0 + COL_CHUNK).min(n);
            let bc = b.slice(s![.., j0..j1]);
            general_mat_mul(alpha, a, &bc, beta, &mut cc);
        }
    );
}

/// GEMM `c += a.dot(b)` split over fixed row chunks of `c` (used for weight
/// gradients where the row dimension is the output-channel axis).
fn gemm_rows_accum(a: &ArrayView2<f32>, b: &ArrayView2<f32>, c: &mut ArrayViewMut2<f32>) {
    assert_eq!(a.shape()[1], b.shape()[0]);
    let m = a.shape()[0];
    maybe_par_for_each!(
        c.axis_chunks_iter_mut(Axis(0), ROW_CHUNK).enumerate(),
        c.axis_chunks_iter_mut(Axis(0), ROW_CHUNK)
            .into_par_iter()
            .enumerate(),
        |(i, mut cc)| {
            let i0 = i * ROW_CHUNK;
            let i1 = (i0 + ROW_CHUNK).min(m);
            let ar = a.slice(s![i0..i1, ..]);
            general_mat_mul(1.0, &ar, b, 1.0, &mut cc);
        }
    );
}

/// im2col for one image of a batch: `(ci, h, w)` -> `(ci*kh*kw, oh*ow)`.
/// Out-of-bounds taps read as zero (zero padding).
fn im2col_one(
    x: &Array4<f32>,
    b: usize,
    kernel: (usize, usize),
    stride: usize,
    pad: usize,
    out_hw: (usize, usize),
    col: &mut Array2<f32>,
) {
    let (_, _, h, w) = dims4(x);
    let (kh, kw) = kernel;
    let (oh, ow) = out_hw;
    let img = x.index_axis(Axis(0), b);
    assert_eq!(col.shape(), [img.shape()[0] * kh * kw, oh * ow]);
    maybe_par_for_each!(
        col.axis_chunks_iter_mut(Axis(0), kh * kw).enumerate(),
        col.axis_chunks_iter_mut(Axis(0), kh * kw)
            .into_par_iter()
            .enumerate(),
        |(c, mut block)| {
            let plane = img.index_axis(Axis(0), c);
            for ky in 0..kh {
                for kx in 0..kw {
                    let mut row = block.row_mut(ky * kw + kx);
                    let row = row.as_slice_mut().expect("col row must be contiguous");
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let seg = &mut row[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= h as isize {
                            seg.fill(0.0);
                            continue;
                        }
                        let src = plane.index_axis(Axis(0), iy as usize);
                        let src = src.as_slice().expect("input row must be contiguous");
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            seg[ox] = if ix < 0 || ix >= w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    );
}

/// col2im scatter-add for one image of a batch: `(ci*kh*kw, oh*ow)` -> `+=
/// (ci, h, w)`. Rows are grouped by input channel, so channel tasks write
/// disjoint planes and can run in parallel.
fn col2im_one(
    col: &Array2<f32>,
    b: usize,
    kernel: (usize, usize),
    stride: usize,
    pad: usize,
    out_hw: (usize, usize),
    gx: &mut Array4<f32>,
) {
    let (_, ci, h, w) = dims4(gx);
    let (kh, kw) = kernel;
    let (oh, ow) = out_hw;
    assert_eq!(col.shape(), [ci * kh * kw, oh * ow]);
    let mut img = gx.index_axis_mut(Axis(0), b);
    maybe_par_for_each!(
        img.axis_iter_mut(Axis(0)).enumerate(),
        img.axis_iter_mut(Axis(0)).into_par_iter().enumerate(),
        |(c, mut plane)| {
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = col.row(c * kh * kw + ky * kw + kx);
                    let row = row.to_slice().expect("col row must be contiguous");
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let mut dst = plane.index_axis_mut(Axis(0), iy as usize);
                        let dst = dst.as_slice_mut().expect("grad row must be contiguous");
                        let seg = &row[oy * ow..(oy + 1) * ow];
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += seg[ox];
                            }
                        }
                    }
                }
            }
        }
    );
}

/// Convolution forward: `x (b,ci,h,w) * w (co,ci,kh,kw) -> (b,co,oh,ow)`.
pub fn conv2d_fwd(
    x: &Array4<f32>,
    w: &Array4<f32>,
    bias: Option<&Array1<f32>>,
    stride: usize,
    pad: usize,
) -> Array4<f32> {
    let (bsz, ci, h, width) = dims4(x);
    let (co, wci, kh, kw) = dims4(w);
    assert_eq!(ci, wci, "conv2d: input channels {} != weight channels {}", ci, wci);
    let oh = conv_out_size(h, kh, stride, pad);
    let ow = conv_out_size(width, kw, stride, pad);
    let w_mat = w
        .view()
        .into_shape((co, ci * kh * kw))
        .expect("conv weights must be standard layout");
    let mut y = Array4::<f32>::zeros((bsz, co, oh, ow));
    let mut col = Array2::<f32>::zeros((ci * kh * kw, oh * ow));
    for b in 0..bsz {
        im2col_one(x, b, (kh, kw), stride, pad, (oh, ow), &mut col);
        let mut y_mat = y
            .index_axis_mut(Axis(0), b)
            .into_shape((co, oh * ow))
            .expect("output must be standard layout");
        gemm_chunked(1.0, &w_mat, &col.view(), 0.0, &mut y_mat);
    }
    if let Some(bias) = bias {
        assert_eq!(bias.len(), co);
        add_channel_bias(&mut y, bias);
    }
    y
}

/// Convolution input gradient: adjoint of [`conv2d_fwd`] with respect to `x`.
pub fn conv2d_dx(
    gy: &Array4<f32>,
    w: &Array4<f32>,
    stride: usize,
    pad: usize,
    in_hw: (usize, usize),
) -> Array4<f32> {
    let (bsz, co, oh, ow) = dims4(gy);
    let (wco, ci, kh, kw) = dims4(w);
    assert_eq!(co, wco);
    assert_eq!(oh, conv_out_size(in_hw.0, kh, stride, pad), "conv2d_dx: spatial mismatch");
    assert_eq!(ow, conv_out_size(in_hw.1, kw, stride, pad), "conv2d_dx: spatial mismatch");
    let w_mat = w
        .view()
        .into_shape((co, ci * kh * kw))
        .expect("conv weights must be standard layout");
    let w_t = w_mat.t();
    let mut gx = Array4::<f32>::zeros((bsz, ci, in_hw.0, in_hw.1));
    let mut gcol = Array2::<f32>::zeros((ci * kh * kw, oh * ow));
    for b in 0..bsz {
        let gy_mat = gy
            .index_axis(Axis(0), b)
            .into_shape((co, oh * ow))
            .expect("grad must be standard layout");
        gemm_chunked(1.0, &w_t, &gy_mat, 0.0, &mut gcol.view_mut());
        col2im_one(&gcol, b, (kh, kw), stride, pad, (oh, ow), &mut gx);
    }
    gx
}

/// Convolution weight gradient, accumulated into `gw` (shape of the weights).
pub fn conv2d_dw_accum(
    x: &Array4<f32>,
    gy: &Array4<f32>,
    stride: usize,
    pad: usize,
    gw: &mut Array4<f32>,
) {
    let (bsz, ci, h, width) = dims4(x);
    let (gb, co, oh, ow) = dims4(gy);
    assert_eq!(bsz, gb);
    let (wco, wci, kh, kw) = dims4(gw);
    assert_eq!(co, wco);
    assert_eq!(ci, wci);
    assert_eq!(oh, conv_out_size(h, kh, stride, pad));
    assert_eq!(ow, conv_out_size(width, kw, stride, pad));
    let mut gw_mat = gw
        .view_mut()
        .into_shape((co, ci * kh * kw))
        .expect("conv weights must be standard layout");
    let mut col = Array2::<f32>::zeros((ci * kh * kw, oh * ow));
    for b in 0..bsz {
        im2col_one(x, b, (kh, kw), stride, pad, (oh, ow), &mut col);
        let gy_mat = gy
            .index_axis(Axis(0), b)
            .into_shape((co, oh * ow))
            .expect("grad must be standard layout");
        gemm_rows_accum(&gy_mat, &col.t(), &mut gw_mat);
    }
}

/// Per-output-channel bias gradient: sum of `gy` over batch and space.
pub fn bias_grad_accum(gy: &Array4<f32>, gb: &mut Array1<f32>) {
    let (_, co, _, _) = dims4(gy);
    assert_eq!(gb.len(), co);
    for c in 0..co {
        let mut acc = 0.0f64;
        for v in gy.index_axis(Axis(1), c).iter() {
            acc += *v as f64;
        }
        gb[c] += acc as f32;
    }
}

/// Transposed convolution forward:
/// `x (b,ci,h,w) * w (ci,co,kh,kw) -> (b,co,(h-1)s-2p+kh,(w-1)s-2p+kw)`.
pub fn deconv2d_fwd(
    x: &Array4<f32>,
    w: &Array4<f32>,
    bias: Option<&Array1<f32>>,
    stride: usize,
    pad: usize,
) -> Array4<f32> {
    let (_, ci, h, width) = dims4(x);
    let (wci, co, kh, kw) = dims4(w);
    assert_eq!(ci, wci, "deconv2d: input channels {} != weight channels {}", ci, wci);
    let oh = deconv_out_size(h, kh, stride, pad);
    let ow = deconv_out_size(width, kw, stride, pad);
    // Scatter through the conv input-gradient kernel with roles swapped.
    let mut y = conv2d_dx(x, w, stride, pad, (oh, ow));
    if let Some(bias) = bias {
        assert_eq!(bias.len(), co);
        add_channel_bias(&mut y, bias);
    }
    y
}

/// Transposed convolution input gradient (= convolution forward with the same
/// weights, no bias).
pub fn deconv2d_dx(gy: &Array4<f32>, w: &Array4<f32>, stride: usize, pad: usize) -> Array4<f32> {
    conv2d_fwd(gy, w, None, stride, pad)
}

/// Transposed convolution weight gradient, accumulated into `gw (ci,co,kh,kw)`.
pub fn deconv2d_dw_accum(
    x: &Array4<f32>,
    gy: &Array4<f32>,
    stride: usize,
    pad: usize,
    gw: &mut Array4<f32>,
) {
    // conv2d_dw with x <-> gy swapped yields exactly the (ci, co, kh, kw) layout.
    conv2d_dw_accum(gy, x, stride, pad, gw);
}

/// Linear forward: `x (b,i) * w (o,i) + bias -> (b,o)`.
pub fn linear_fwd(x: &Array2<f32>, w: &Array2<f32>, bias: Option<&Array1<f32>>) -> Array2<f32> {
    let (bsz, i) = (x.shape()[0], x.shape()[1]);
    let (o, wi) = (w.shape()[0], w.shape()[1]);
    assert_eq!(i, wi);
    let mut y = Array2::<f32>::zeros((bsz, o));
    gemm_chunked(1.0, &x.view(), &w.t(), 0.0, &mut y.view_mut());
    if let Some(bias) = bias {
        assert_eq!(bias.len(), o);
        for mut row in y.rows_mut() {
            row += &bias.view();
        }
    }
    y
}

/// Linear input gradient.
pub fn linear_dx(gy: &Array2<f32>, w: &Array2<f32>) -> Array2<f32> {
    let mut gx = Array2::<f32>::zeros((gy.shape()[0], w.shape()[1]));
    gemm_chunked(1.0, &gy.view(), &w.view(), 0.0, &mut gx.view_mut());
    gx
}

/// Linear weight/bias gradients, accumulated.
pub fn linear_dw_accum(
    x: &Array2<f32>,
    gy: &Array2<f32>,
    gw: &mut Array2<f32>,
    gb: Option<&mut Array1<f32>>,
) {
    gemm_rows_accum(&gy.t(), &x.view(), &mut gw.view_mut());
    if let Some(gb) = gb {
        for c in 0..gy.shape()[1] {
            let mut acc = 0.0f64;
            for b in 0..gy.shape()[0] {
                acc += gy[[b, c]] as f64;
            }
            gb[c] += acc as f32;
        }
    }
}

/// Channel-wise bias add on a `(b,c,h,w)` tensor.
pub fn add_channel_bias(y: &mut Array4<f32>, bias: &Array1<f32>) {
    for mut img in y.axis_iter_mut(Axis(0)) {
        for (c, mut plane) in img.axis_iter_mut(Axis(0)).enumerate() {
            plane += bias[c];
        }
    }
}

/// Concatenate two `(b,c,h,w)` tensors along the channel axis. Builds the
/// output explicitly so it is always standard layout.
pub fn concat_channels(a: &Array4<f32>, b: &Array4<f32>) -> Array4<f32> {
    let (bsz, ca, h, w) = dims4(a);
    assert_eq!(bsz, b.shape()[0]);
    assert_eq!(h, b.shape()[2]);
    assert_eq!(w, b.shape()[3]);
    let cb = b.shape()[1];
    let mut out = Array4::<f32>::zeros((bsz, ca + cb, h, w));
    out.slice_mut(s![.., ..ca, .., ..]).assign(a);
    out.slice_mut(s![.., ca.., .., ..]).assign(b);
    out
}

/// Split a channel-concatenated gradient back into its two parts.
pub fn split_channels(g: &Array4<f32>, first: usize) -> (Array4<f32>, Array4<f32>) {
    let ga = g.slice(s![.., ..first, .., ..]).to_owned();
    let gb = g.slice(s![.., first.., .., ..]).to_owned();
    (ga, gb)
}

/// Deterministic f64 sum of an f32 slice.
pub fn sum_f64(values: &[f32]) -> f64 {
    values.iter().map(|v| *v as f64).sum()
}

pub(crate) fn dims4<S: ndarray::Data<Elem = f32>>(a: &ArrayBase<S, Ix4>) -> (usize, usize, usize, usize) {
    let s = a.shape();
    (s[0], s[1], s[2], s[3])
}
