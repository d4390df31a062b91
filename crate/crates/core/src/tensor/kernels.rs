//! Raw forward/backward kernels on flat NCHW buffers.
//!
//! The tape calls into these; so do the non-differentiable paths (target
//! generation, augmentation, multi-scale inference) so that both share one
//! definition of every resampling operator.

use super::Tensor;
use crate::error::{param_err, shape_err, Result};

/// `c[m×n] = a·b + beta·c`. `a` is stored `m×k` (or `k×m` when `ta`), `b` is
/// stored `k×n` (or `n×k` when `tb`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds checked above; strides describe exactly the stored layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(
        x: &[usize],
        weight: &[usize],
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Self> {
        let (n, cin, h, w) = match *x {
            [n, c, h, w] => (n, c, h, w),
            _ => return Err(shape_err!("conv2d input must be NCHW, got {:?}", x)),
        };
        let (cout, cg, k) = match *weight {
            [o, i, kh, kw] if kh == kw => (o, i, kh),
            _ => {
                return Err(shape_err!(
                    "conv2d weight must be O×I×k×k, got {:?}",
                    weight
                ))
            }
        };
        if stride == 0 {
            return Err(param_err!("conv2d stride must be ≥ 1"));
        }
        if groups == 0 || cin % groups != 0 || cout % groups != 0 {
            return Err(shape_err!(
                "groups {} must divide input channels {} and output channels {}",
                groups,
                cin,
                cout
            ));
        }
        if cg * groups != cin {
            return Err(shape_err!(
                "weight expects {} input channels per group, input has {} over {} groups",
                cg,
                cin,
                groups
            ));
        }
        if h + 2 * pad < k || w + 2 * pad < k || k == 0 {
            return Err(shape_err!(
                "kernel {} does not fit padded input {}×{} (padding {})",
                k,
                h,
                w,
                pad
            ));
        }
        Ok(ConvGeom {
            n,
            cin,
            h,
            w,
            cout,
            k,
            stride,
            pad,
            groups,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }

    fn col_rows(&self) -> usize {
        self.cin_g() * self.k * self.k
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.cout, self.ho, self.wo]
    }
}

/// Unfolds `channels` planes of `x` (each `h×w`) into `(channels·k·k) × (ho·wo)`.
fn im2col(g: &ConvGeom, x: &[f64], cols: &mut [f64]) {
    let (k, s, p) = (g.k, g.stride, g.pad as isize);
    let plane = g.h * g.w;
    let ncols = g.ho * g.wo;
    for ci in 0..g.cin_g() {
        let src = &x[ci * plane..(ci + 1) * plane];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.ho {
                    let iy = (oy * s + ki) as isize - p;
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * s + kj) as isize - p;
                        *o = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeom, cols: &[f64], dx: &mut [f64]) {
    let (k, s, p) = (g.k, g.stride, g.pad as isize);
    let plane = g.h * g.w;
    let ncols = g.ho * g.wo;
    for ci in 0..g.cin_g() {
        let dst = &mut dx[ci * plane..(ci + 1) * plane];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.ho {
                    let iy = (oy * s + ki) as isize - p;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = iy as usize * g.w;
                    for ox in 0..g.wo {
                        let ix = (ox * s + kj) as isize - p;
                        if ix >= 0 && ix < g.w as isize {
                            dst[base + ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward(
    g: &ConvGeom,
    x: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let ncols = g.ho * g.wo;
    let rows = g.col_rows();
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    let mut out = vec![0.0; g.n * g.cout * ncols];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; rows * ncols]
    };
    for n in 0..g.n {
        for grp in 0..g.groups {
            let xs = &x[(n * g.cin + grp * cin_g) * g.h * g.w..][..cin_g * g.h * g.w];
            let colsref: &[f64] = if g.is_pointwise() {
                xs
            } else {
                im2col(g, xs, &mut cols);
                &cols
            };
            let wg = &weight[grp * cout_g * rows..(grp + 1) * cout_g * rows];
            let og = &mut out[(n * g.cout + grp * cout_g) * ncols..][..cout_g * ncols];
            gemm(cout_g, rows, ncols, wg, false, colsref, false, 0.0, og);
        }
    }
    if let Some(b) = bias {
        for n in 0..g.n {
            for co in 0..g.cout {
                let bv = b[co];
                for v in &mut out[(n * g.cout + co) * ncols..][..ncols] {
                    *v += bv;
                }
            }
        }
    }
    out
}

pub struct ConvGrads {
    pub dx: Option<Vec<f64>>,
    pub dw: Option<Vec<f64>>,
    pub db: Vec<f64>,
}

pub fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    weight: &[f64],
    gy: &[f64],
    want_dx: bool,
    want_dw: bool,
) -> ConvGrads {
    let ncols = g.ho * g.wo;
    let rows = g.col_rows();
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    let mut db = vec![0.0; g.cout];
    for n in 0..g.n {
        for (co, d) in db.iter_mut().enumerate() {
            *d += gy[(n * g.cout + co) * ncols..][..ncols].iter().sum::<f64>();
        }
    }
    let mut dx = want_dx.then(|| vec![0.0; g.n * g.cin * g.h * g.w]);
    let mut dw = want_dw.then(|| vec![0.0; g.cout * rows]);
    let pointwise = g.is_pointwise();
    let mut cols = vec![0.0; if pointwise { 0 } else { rows * ncols }];
    let mut dcols = vec![0.0; if pointwise { 0 } else { rows * ncols }];
    for n in 0..g.n {
        for grp in 0..g.groups {
            let xoff = (n * g.cin + grp * cin_g) * g.h * g.w;
            let gyg = &gy[(n * g.cout + grp * cout_g) * ncols..][..cout_g * ncols];
            let wg = &weight[grp * cout_g * rows..(grp + 1) * cout_g * rows];
            if let Some(dw) = dw.as_mut() {
                let xs = &x[xoff..][..cin_g * g.h * g.w];
                let colsref: &[f64] = if pointwise {
                    xs
                } else {
                    im2col(g, xs, &mut cols);
                    &cols
                };
                let dwg = &mut dw[grp * cout_g * rows..(grp + 1) * cout_g * rows];
                gemm(cout_g, ncols, rows, gyg, false, colsref, true, 1.0, dwg);
            }
            if let Some(dx) = dx.as_mut() {
                let dxs = &mut dx[xoff..][..cin_g * g.h * g.w];
                if pointwise {
                    gemm(rows, cout_g, ncols, wg, true, gyg, false, 1.0, dxs);
                } else {
                    gemm(rows, cout_g, ncols, wg, true, gyg, false, 0.0, &mut dcols);
                    col2im(g, &dcols, dxs);
                }
            }
        }
    }
    ConvGrads { dx, dw, db }
}

/// Sum over the border-clipped `(2r+1)²` neighbourhood of every cell of an `h×w` plane.
fn box_sum_clipped(src: &[f64], h: usize, w: usize, r: usize, out: &mut [f64]) {
    let mut rows = vec![0.0; h * w];
    for y in 0..h {
        let line = &src[y * w..(y + 1) * w];
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(w - 1);
            rows[y * w + x] = line[lo..=hi].iter().sum();
        }
    }
    for y in 0..h {
        let lo = y.saturating_sub(r);
        let hi = (y + r).min(h - 1);
        for x in 0..w {
            let mut acc = 0.0;
            for yy in lo..=hi {
                acc += rows[yy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
}

fn clipped_count(i: usize, len: usize, r: usize) -> usize {
    (i + r).min(len - 1) - i.saturating_sub(r) + 1
}

fn check_window(window: usize) -> Result<()> {
    if window == 0 || window % 2 == 0 {
        return Err(param_err!(
            "pooling window must be odd and ≥ 1, got {}",
            window
        ));
    }
    Ok(())
}

/// Mean over the valid (border-clipped) `window×window` neighbourhood.
pub fn avg_pool_window(x: &Tensor, window: usize) -> Result<Tensor> {
    check_window(window)?;
    let (n, c, h, w) = x.dims4()?;
    let r = window / 2;
    let plane = h * w;
    let mut out = vec![0.0; x.numel()];
    for p in 0..n * c {
        let dst = &mut out[p * plane..(p + 1) * plane];
        box_sum_clipped(&x.data()[p * plane..(p + 1) * plane], h, w, r, dst);
        for y in 0..h {
            let cy = clipped_count(y, h, r);
            for xx in 0..w {
                dst[y * w + xx] /= (cy * clipped_count(xx, w, r)) as f64;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub(crate) fn avg_pool_window_backward(shape: &[usize], window: usize, gy: &[f64]) -> Vec<f64> {
    let (h, w) = (shape[2], shape[3]);
    let r = window / 2;
    let plane = h * w;
    let mut dx = vec![0.0; gy.len()];
    let mut q = vec![0.0; plane];
    for p in 0..gy.len() / plane {
        let g = &gy[p * plane..(p + 1) * plane];
        for y in 0..h {
            let cy = clipped_count(y, h, r);
            for xx in 0..w {
                q[y * w + xx] = g[y * w + xx] / (cy * clipped_count(xx, w, r)) as f64;
            }
        }
        box_sum_clipped(&q, h, w, r, &mut dx[p * plane..(p + 1) * plane]);
    }
    dx
}

#[derive(Clone, Copy, Debug)]
struct Lerp {
    i0: usize,
    i1: usize,
    frac: f64,
}

/// Half-pixel-centre (align-corners = false) sampling positions.
fn lerp_table(in_len: usize, out_len: usize) -> Vec<Lerp> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = if i0 + 1 < in_len { i0 + 1 } else { i0 };
            Lerp {
                i0,
                i1,
                frac: src - i0 as f64,
            }
        })
        .collect()
}

pub fn bilinear_resize(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(shape_err!(
            "bilinear resize from {}×{} to {}×{}",
            h,
            w,
            out_h,
            out_w
        ));
    }
    let ty = lerp_table(h, out_h);
    let tx = lerp_table(w, out_w);
    let mut out = vec![0.0; n * c * out_h * out_w];
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * out_h * out_w..(p + 1) * out_h * out_w];
        for (oy, ly) in ty.iter().enumerate() {
            let r0 = &src[ly.i0 * w..(ly.i0 + 1) * w];
            let r1 = &src[ly.i1 * w..(ly.i1 + 1) * w];
            for (ox, lx) in tx.iter().enumerate() {
                let top = (1.0 - lx.frac) * r0[lx.i0] + lx.frac * r0[lx.i1];
                let bot = (1.0 - lx.frac) * r1[lx.i0] + lx.frac * r1[lx.i1];
                dst[oy * out_w + ox] = (1.0 - ly.frac) * top + ly.frac * bot;
            }
        }
    }
    Tensor::new(vec![n, c, out_h, out_w], out)
}

pub(crate) fn bilinear_resize_backward(
    in_shape: &[usize],
    out_h: usize,
    out_w: usize,
    gy: &[f64],
) -> Vec<f64> {
    let (h, w) = (in_shape[2], in_shape[3]);
    let planes = in_shape[0] * in_shape[1];
    let ty = lerp_table(h, out_h);
    let tx = lerp_table(w, out_w);
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        let g = &gy[p * out_h * out_w..(p + 1) * out_h * out_w];
        let d = &mut dx[p * h * w..(p + 1) * h * w];
        for (oy, ly) in ty.iter().enumerate() {
            for (ox, lx) in tx.iter().enumerate() {
                let v = g[oy * out_w + ox];
                let top = (1.0 - ly.frac) * v;
                let bot = ly.frac * v;
                d[ly.i0 * w + lx.i0] += (1.0 - lx.frac) * top;
                d[ly.i0 * w + lx.i1] += lx.frac * top;
                d[ly.i1 * w + lx.i0] += (1.0 - lx.frac) * bot;
                d[ly.i1 * w + lx.i1] += lx.frac * bot;
            }
        }
    }
    dx
}

fn adaptive_bins(in_len: usize, out_len: usize) -> Vec<(usize, usize)> {
    (0..out_len)
        .map(|i| {
            let start = i * in_len / out_len;
            let end = ((i + 1) * in_len).div_ceil(out_len);
            (start, end)
        })
        .collect()
}

/// Adaptive average pooling to a fixed `out_h×out_w` grid.
pub fn adaptive_avg_pool(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if out_h == 0 || out_w == 0 || out_h > h || out_w > w {
        return Err(shape_err!(
            "adaptive pool from {}×{} to {}×{}",
            h,
            w,
            out_h,
            out_w
        ));
    }
    let by = adaptive_bins(h, out_h);
    let bx = adaptive_bins(w, out_w);
    let mut out = vec![0.0; n * c * out_h * out_w];
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1)) in by.iter().enumerate() {
            for (ox, &(x0, x1)) in bx.iter().enumerate() {
                let mut acc = 0.0;
                for yy in y0..y1 {
                    acc += src[yy * w + x0..yy * w + x1].iter().sum::<f64>();
                }
                out[p * out_h * out_w + oy * out_w + ox] = acc / ((y1 - y0) * (x1 - x0)) as f64;
            }
        }
    }
    Tensor::new(vec![n, c, out_h, out_w], out)
}

pub(crate) fn adaptive_avg_pool_backward(
    in_shape: &[usize],
    out_h: usize,
    out_w: usize,
    gy: &[f64],
) -> Vec<f64> {
    let (h, w) = (in_shape[2], in_shape[3]);
    let planes = in_shape[0] * in_shape[1];
    let by = adaptive_bins(h, out_h);
    let bx = adaptive_bins(w, out_w);
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        for (oy, &(y0, y1)) in by.iter().enumerate() {
            for (ox, &(x0, x1)) in bx.iter().enumerate() {
                let v = gy[p * out_h * out_w + oy * out_w + ox] / ((y1 - y0) * (x1 - x0)) as f64;
                for yy in y0..y1 {
                    for d in &mut dx[p * h * w + yy * w + x0..p * h * w + yy * w + x1] {
                        *d += v;
                    }
                }
            }
        }
    }
    dx
}

/// Per-pixel softmax over the channel axis, with max subtraction.
pub fn softmax_channel(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if c == 0 {
        return Err(shape_err!("softmax over zero channels"));
    }
    let plane = h * w;
    let src = x.data();
    let mut out = vec![0.0; x.numel()];
    for b in 0..n {
        let base = b * c * plane;
        for p in 0..plane {
            let mut m = f64::NEG_INFINITY;
            for k in 0..c {
                m = m.max(src[base + k * plane + p]);
            }
            let mut z = 0.0;
            for k in 0..c {
                let e = (src[base + k * plane + p] - m).exp();
                out[base + k * plane + p] = e;
                z += e;
            }
            for k in 0..c {
                out[base + k * plane + p] /= z;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Nearest-neighbour resampling of an integer plane (label maps).
pub fn nearest_resize_u8(src: &[u8], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<u8> {
    let mut out = vec![0u8; out_h * out_w];
    for oy in 0..out_h {
        let sy = ((oy as f64 + 0.5) * h as f64 / out_h as f64).floor() as usize;
        let sy = sy.min(h - 1);
        for ox in 0..out_w {
            let sx = ((ox as f64 + 0.5) * w as f64 / out_w as f64).floor() as usize;
            out[oy * out_w + ox] = src[sy * w + sx.min(w - 1)];
        }
    }
    out
}
