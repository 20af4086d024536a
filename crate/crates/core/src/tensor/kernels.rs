use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

struct ConvGeometry {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    h_out: usize,
    w_out: usize,
}

fn geometry<S: Scalar>(
    input: &Tensor<S>,
    kernel: &Tensor<S>,
    bias: &Tensor<S>,
    stride: usize,
    padding: usize,
) -> Result<ConvGeometry> {
    let mismatch = || Error::ShapeMismatch {
        op: "conv2d",
        lhs: input.shape().to_vec(),
        rhs: kernel.shape().to_vec(),
    };
    if input.rank() != 3 || kernel.rank() != 4 {
        return Err(mismatch());
    }
    let (c_in, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (c_out, kc, kh, kw) = (
        kernel.shape()[0],
        kernel.shape()[1],
        kernel.shape()[2],
        kernel.shape()[3],
    );
    if kc != c_in || kh != kw {
        return Err(mismatch());
    }
    if kh % 2 == 0 {
        return Err(Error::invalid(format!("conv2d kernel size {kh} must be odd")));
    }
    if bias.shape() != [c_out] {
        return Err(Error::ShapeMismatch {
            op: "conv2d bias",
            lhs: kernel.shape().to_vec(),
            rhs: bias.shape().to_vec(),
        });
    }
    if stride == 0 {
        return Err(Error::invalid("conv2d stride must be positive"));
    }
    let span_h = h + 2 * padding;
    let span_w = w + 2 * padding;
    if span_h < kh || span_w < kh || (span_h - kh) % stride != 0 || (span_w - kh) % stride != 0 {
        return Err(Error::invalid(format!(
            "conv2d output size is not a positive integer for input {:?}, kernel {:?}, stride {stride}, padding {padding}",
            input.shape(),
            kernel.shape()
        )));
    }
    Ok(ConvGeometry {
        c_in,
        h,
        w,
        c_out,
        k: kh,
        h_out: (span_h - kh) / stride + 1,
        w_out: (span_w - kh) / stride + 1,
    })
}

/// Output columns `ox` for which `ox*stride + kx - padding` falls inside `0..w`.
fn valid_range(w: usize, w_out: usize, kx: usize, stride: usize, padding: usize) -> (usize, usize) {
    let lo = if kx >= padding {
        0
    } else {
        (padding - kx).div_ceil(stride)
    };
    // largest ox with ox*stride + kx - padding <= w - 1
    let hi = if w + padding < kx + 1 {
        0
    } else {
        ((w + padding - kx - 1) / stride + 1).min(w_out)
    };
    (lo, hi.max(lo))
}

/// Cross-correlation of a `[C_in, H, W]` map with a `[C_out, C_in, k, k]` kernel.
pub fn conv2d<S: Scalar>(
    input: &Tensor<S>,
    kernel: &Tensor<S>,
    bias: &Tensor<S>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<S>> {
    let g = geometry(input, kernel, bias, stride, padding)?;
    let (x, wt, b) = (input.data(), kernel.data(), bias.data());
    let plane = g.h_out * g.w_out;
    let mut out = vec![S::zero(); g.c_out * plane];
    for co in 0..g.c_out {
        let dst = &mut out[co * plane..(co + 1) * plane];
        dst.iter_mut().for_each(|v| *v = b[co]);
        for ci in 0..g.c_in {
            let src = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.k {
                let (oy_lo, oy_hi) = valid_range(g.h, g.h_out, ky, stride, padding);
                for kx in 0..g.k {
                    let wv = wt[((co * g.c_in + ci) * g.k + ky) * g.k + kx];
                    let (ox_lo, ox_hi) = valid_range(g.w, g.w_out, kx, stride, padding);
                    for oy in oy_lo..oy_hi {
                        let iy = oy * stride + ky - padding;
                        let row = &src[iy * g.w..(iy + 1) * g.w];
                        let out_row = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                        if stride == 1 {
                            let ix0 = ox_lo + kx - padding;
                            let n = ox_hi - ox_lo;
                            for (o, &v) in out_row[ox_lo..ox_hi].iter_mut().zip(&row[ix0..ix0 + n]) {
                                *o += wv * v;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                out_row[ox] += wv * row[ox * stride + kx - padding];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![g.c_out, g.h_out, g.w_out], out)
}

pub struct ConvGrads<S> {
    pub input: Tensor<S>,
    pub kernel: Tensor<S>,
    pub bias: Tensor<S>,
}

/// Gradients of [`conv2d`] given the upstream gradient of its output.
pub fn conv2d_backward<S: Scalar>(
    input: &Tensor<S>,
    kernel: &Tensor<S>,
    bias: &Tensor<S>,
    stride: usize,
    padding: usize,
    grad_out: &Tensor<S>,
) -> Result<ConvGrads<S>> {
    conv2d_backward_opt(input, kernel, bias, stride, padding, grad_out, true)
}

/// As [`conv2d_backward`]; the input gradient is left at zero unless `want_input`.
pub(crate) fn conv2d_backward_opt<S: Scalar>(
    input: &Tensor<S>,
    kernel: &Tensor<S>,
    bias: &Tensor<S>,
    stride: usize,
    padding: usize,
    grad_out: &Tensor<S>,
    want_input: bool,
) -> Result<ConvGrads<S>> {
    let g = geometry(input, kernel, bias, stride, padding)?;
    if grad_out.shape() != [g.c_out, g.h_out, g.w_out] {
        return Err(Error::ShapeMismatch {
            op: "conv2d backward",
            lhs: vec![g.c_out, g.h_out, g.w_out],
            rhs: grad_out.shape().to_vec(),
        });
    }
    let (x, wt, go) = (input.data(), kernel.data(), grad_out.data());
    let plane = g.h_out * g.w_out;
    let mut gx = vec![S::zero(); x.len()];
    let mut gw = vec![S::zero(); wt.len()];
    let mut gb = vec![S::zero(); g.c_out];
    for co in 0..g.c_out {
        let gplane = &go[co * plane..(co + 1) * plane];
        gb[co] = gplane.iter().copied().sum();
        for ci in 0..g.c_in {
            let src = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            let gsrc = &mut gx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.k {
                let (oy_lo, oy_hi) = valid_range(g.h, g.h_out, ky, stride, padding);
                for kx in 0..g.k {
                    let widx = ((co * g.c_in + ci) * g.k + ky) * g.k + kx;
                    let wv = wt[widx];
                    let (ox_lo, ox_hi) = valid_range(g.w, g.w_out, kx, stride, padding);
                    let mut acc = S::zero();
                    for oy in oy_lo..oy_hi {
                        let iy = oy * stride + ky - padding;
                        let grow = &gplane[oy * g.w_out..(oy + 1) * g.w_out];
                        if stride == 1 {
                            let ix0 = ox_lo + kx - padding;
                            let n = ox_hi - ox_lo;
                            let gs = &grow[ox_lo..ox_hi];
                            let xs = &src[iy * g.w + ix0..iy * g.w + ix0 + n];
                            acc += gs.iter().zip(xs).map(|(&a, &b)| a * b).sum::<S>();
                            if want_input {
                                let dst = &mut gsrc[iy * g.w + ix0..iy * g.w + ix0 + n];
                                for (d, &gv) in dst.iter_mut().zip(gs) {
                                    *d += gv * wv;
                                }
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                let ix = ox * stride + kx - padding;
                                let gv = grow[ox];
                                acc += gv * src[iy * g.w + ix];
                                if want_input {
                                    gsrc[iy * g.w + ix] += gv * wv;
                                }
                            }
                        }
                    }
                    gw[widx] += acc;
                }
            }
        }
    }
    Ok(ConvGrads {
        input: Tensor::new(input.shape().to_vec(), gx)?,
        kernel: Tensor::new(kernel.shape().to_vec(), gw)?,
        bias: Tensor::new(vec![g.c_out], gb)?,
    })
}

fn pyramid_geometry<S: Scalar>(x: &Tensor<S>, divisions: &[usize]) -> Result<(usize, usize, usize)> {
    let (c, h, w) = match *x.shape() {
        [c, h, w] => (c, h, w),
        _ => return Err(Error::invalid(format!("pyramid pooling expects [C, H, W], got {:?}", x.shape()))),
    };
    for &d in divisions {
        if d == 0 || h % d != 0 || w % d != 0 {
            return Err(Error::invalid(format!(
                "division {d} does not divide feature size H={h}, W={w}"
            )));
        }
    }
    Ok((c, h, w))
}

/// Length of [`pyramid_pool`] output: `sum_d d * (H + W) * C`.
pub fn pyramid_len(c: usize, h: usize, w: usize, divisions: &[usize]) -> usize {
    divisions.iter().map(|d| d * (h + w) * c).sum()
}

/// Visits every output entry of [`pyramid_pool`] in order with the pixels it
/// averages: `f(entry, channel, pixel rows, pixel cols)`.
fn for_each_pool_entry(
    (h, w): (usize, usize),
    c_n: usize,
    divisions: &[usize],
    mut f: impl FnMut(usize, usize, std::ops::Range<usize>, std::ops::Range<usize>),
) {
    let mut k = 0;
    for &d in divisions {
        let (rh, rw) = (h / d, w / d);
        for i in 0..d {
            for j in 0..d {
                let (rows, cols) = (i * rh..(i + 1) * rh, j * rw..(j + 1) * rw);
                for y in rows.clone() {
                    for c in 0..c_n {
                        f(k, c, y..y + 1, cols.clone());
                        k += 1;
                    }
                }
                for xx in cols.clone() {
                    for c in 0..c_n {
                        f(k, c, rows.clone(), xx..xx + 1);
                        k += 1;
                    }
                }
            }
        }
    }
}

/// Spatial-pyramid POD statistics of a `[C, H, W]` map. For each division `d`
/// (in order) and each of its `d x d` regions (row-major): the mean over
/// columns for every (row, channel), then the mean over rows for every
/// (column, channel). Values are squared first when `square`.
pub fn pyramid_pool<S: Scalar>(x: &Tensor<S>, divisions: &[usize], square: bool) -> Result<Tensor<S>> {
    let (c_n, h, w) = pyramid_geometry(x, divisions)?;
    let data = x.data();
    let mut out = vec![S::zero(); pyramid_len(c_n, h, w, divisions)];
    for_each_pool_entry((h, w), c_n, divisions, |k, c, rows, cols| {
        let n = S::of_usize(rows.len() * cols.len());
        let mut s = S::zero();
        for y in rows {
            for &v in &data[(c * h + y) * w + cols.start..(c * h + y) * w + cols.end] {
                s += if square { v * v } else { v };
            }
        }
        out[k] = s / n;
    });
    Tensor::new(vec![out.len()], out)
}

/// Gradient of [`pyramid_pool`] with respect to `x`.
pub fn pyramid_pool_backward<S: Scalar>(
    x: &Tensor<S>,
    divisions: &[usize],
    square: bool,
    grad: &Tensor<S>,
) -> Result<Tensor<S>> {
    let (c_n, h, w) = pyramid_geometry(x, divisions)?;
    if grad.shape() != [pyramid_len(c_n, h, w, divisions)] {
        return Err(Error::ShapeMismatch {
            op: "pyramid pool backward",
            lhs: x.shape().to_vec(),
            rhs: grad.shape().to_vec(),
        });
    }
    let (data, g) = (x.data(), grad.data());
    let mut out = vec![S::zero(); data.len()];
    for_each_pool_entry((h, w), c_n, divisions, |k, c, rows, cols| {
        let share = g[k] / S::of_usize(rows.len() * cols.len());
        for y in rows {
            let base = (c * h + y) * w;
            for p in base + cols.start..base + cols.end {
                out[p] += if square { share * (data[p] + data[p]) } else { share };
            }
        }
    });
    Tensor::new(x.shape().to_vec(), out)
}
