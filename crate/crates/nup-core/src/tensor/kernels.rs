//! Raw array kernels shared by the autodiff ops.
//!
//! Every kernel here is a plain function on `ndarray` arrays with no graph
//! involvement. Linear kernels come in adjoint pairs (`im2col`/`col2im`,
//! `resize_bilinear`/`resize_bilinear_t`, ...) so the op layer can wire each
//! one up as the other's backward.

use ndarray::{Array2, Array4, ArrayD, ArrayView4, ArrayViewD, Ix2, Ix4};

/// Convolution geometry shared by `im2col` and `col2im`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvGeom {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.pad - self.kh) / self.stride + 1;
        let ow = (w + 2 * self.pad - self.kw) / self.stride + 1;
        (oh, ow)
    }
}

/// Lower a `[B, C, H, W]` tensor to patch columns `[C*kh*kw, B*Ho*Wo]`.
///
/// Column index is `(b*Ho + oi)*Wo + oj`, row index `(c*kh + di)*kw + dj`,
/// so a plain matmul with a reshaped `[O, C*kh*kw]` weight gives the
/// convolution output in `[O, B*Ho*Wo]` layout.
pub fn im2col(x: &ArrayViewD<f32>, g: ConvGeom) -> ArrayD<f32> {
    let x = x.view().into_dimensionality::<Ix4>().expect("im2col: 4-d input");
    let (b, c, h, w) = x.dim();
    let (oh, ow) = g.out_hw(h, w);
    let xo = x.as_standard_layout();
    let xs = xo.as_slice().unwrap();
    let mut cols = Array2::<f32>::zeros((c * g.kh * g.kw, b * oh * ow));
    let cs = cols.as_slice_mut().unwrap();
    let l = oh * ow;
    for ci in 0..c {
        for di in 0..g.kh {
            for dj in 0..g.kw {
                let row = (ci * g.kh + di) * g.kw + dj;
                let rbase = row * (b * l);
                let (lo, hi) = col_range(g, w, ow, dj);
                for bi in 0..b {
                    for oi in 0..oh {
                        let ii = (oi * g.stride + di) as isize - g.pad as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        let xbase = ((bi * c + ci) * h + ii as usize) * w;
                        let obase = rbase + (bi * oh + oi) * ow;
                        for oj in lo..hi {
                            cs[obase + oj] = xs[xbase + (oj * g.stride + dj - g.pad)];
                        }
                    }
                }
            }
        }
    }
    cols.into_dyn()
}

/// Adjoint of [`im2col`]: scatter-add patch columns back to `[B, C, H, W]`.
pub fn col2im(cols: &ArrayViewD<f32>, g: ConvGeom, bchw: [usize; 4]) -> ArrayD<f32> {
    let [b, c, h, w] = bchw;
    let (oh, ow) = g.out_hw(h, w);
    let co = cols.view().into_dimensionality::<Ix2>().expect("col2im: 2-d input");
    assert_eq!(co.dim(), (c * g.kh * g.kw, b * oh * ow), "col2im: shape mismatch");
    let co = co.as_standard_layout();
    let cs = co.as_slice().unwrap();
    let mut x = Array4::<f32>::zeros((b, c, h, w));
    let xs = x.as_slice_mut().unwrap();
    let l = oh * ow;
    for ci in 0..c {
        for di in 0..g.kh {
            for dj in 0..g.kw {
                let row = (ci * g.kh + di) * g.kw + dj;
                let rbase = row * (b * l);
                let (lo, hi) = col_range(g, w, ow, dj);
                for bi in 0..b {
                    for oi in 0..oh {
                        let ii = (oi * g.stride + di) as isize - g.pad as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        let xbase = ((bi * c + ci) * h + ii as usize) * w;
                        let obase = rbase + (bi * oh + oi) * ow;
                        for oj in lo..hi {
                            xs[xbase + (oj * g.stride + dj - g.pad)] += cs[obase + oj];
                        }
                    }
                }
            }
        }
    }
    x.into_dyn()
}

/// Output-column range `[lo, hi)` for which `oj*stride + dj - pad` lands in `[0, w)`.
fn col_range(g: ConvGeom, w: usize, ow: usize, dj: usize) -> (usize, usize) {
    let lo = if g.pad > dj { (g.pad - dj).div_ceil(g.stride) } else { 0 };
    let hi = ow.min((w + g.pad - dj).div_ceil(g.stride));
    (lo, hi.max(lo))
}

/// `[m, k] x [k, n] -> [m, n]` via `matrixmultiply::sgemm`.
pub fn matmul(a: &ArrayViewD<f32>, b: &ArrayViewD<f32>) -> ArrayD<f32> {
    let a = a.view().into_dimensionality::<Ix2>().expect("matmul: lhs 2-d");
    let b = b.view().into_dimensionality::<Ix2>().expect("matmul: rhs 2-d");
    let (m, ka) = a.dim();
    let (kb, n) = b.dim();
    assert_eq!(ka, kb, "matmul: inner dims {ka} vs {kb}");
    let ao = a.as_standard_layout();
    let bo = b.as_standard_layout();
    let mut c = Array2::<f32>::zeros((m, n));
    unsafe {
        matrixmultiply::sgemm(
            m,
            ka,
            n,
            1.0,
            ao.as_ptr(),
            ka as isize,
            1,
            bo.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c.into_dyn()
}

/// Nearest-neighbour 2x upsample of `[B, C, H, W]`.
pub fn up_nearest_2x(x: &ArrayViewD<f32>) -> ArrayD<f32> {
    let x = x.view().into_dimensionality::<Ix4>().unwrap();
    let (b, c, h, w) = x.dim();
    let mut y = Array4::<f32>::zeros((b, c, 2 * h, 2 * w));
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let v = x[[bi, ci, i, j]];
                    y[[bi, ci, 2 * i, 2 * j]] = v;
                    y[[bi, ci, 2 * i, 2 * j + 1]] = v;
                    y[[bi, ci, 2 * i + 1, 2 * j]] = v;
                    y[[bi, ci, 2 * i + 1, 2 * j + 1]] = v;
                }
            }
        }
    }
    y.into_dyn()
}

/// 2x2 sum pool; the adjoint of [`up_nearest_2x`].
pub fn sum_pool_2x(x: &ArrayViewD<f32>) -> ArrayD<f32> {
    let x = x.view().into_dimensionality::<Ix4>().unwrap();
    let (b, c, h, w) = x.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "sum_pool_2x: odd spatial dims {h}x{w}");
    let mut y = Array4::<f32>::zeros((b, c, h / 2, w / 2));
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..h / 2 {
                for j in 0..w / 2 {
                    y[[bi, ci, i, j]] = x[[bi, ci, 2 * i, 2 * j]]
                        + x[[bi, ci, 2 * i, 2 * j + 1]]
                        + x[[bi, ci, 2 * i + 1, 2 * j]]
                        + x[[bi, ci, 2 * i + 1, 2 * j + 1]];
                }
            }
        }
    }
    y.into_dyn()
}

/// Half-pixel source coordinates and weights for 1-d bilinear resize with
/// border clamp: output index `i` samples `w0*src[i0] + w1*src[i0+1]`.
fn bilinear_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f32, f32)> {
    let scale = n_in as f32 / n_out as f32;
    (0..n_out)
        .map(|i| {
            let u = (i as f32 + 0.5) * scale - 0.5;
            let u = u.max(0.0).min((n_in - 1) as f32);
            let i0 = (u.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let f = u - i0 as f32;
            (i0, i1, 1.0 - f, f)
        })
        .collect()
}

/// Bilinear resize of `[B, C, H, W]` to `[B, C, oh, ow]` (half-pixel centres,
/// clamped borders).
pub fn resize_bilinear(x: &ArrayViewD<f32>, oh: usize, ow: usize) -> ArrayD<f32> {
    let x = x.view().into_dimensionality::<Ix4>().unwrap();
    let (b, c, h, w) = x.dim();
    let rt = bilinear_taps(h, oh);
    let ct = bilinear_taps(w, ow);
    let mut y = Array4::<f32>::zeros((b, c, oh, ow));
    for bi in 0..b {
        for ci in 0..c {
            for (i, &(i0, i1, wi0, wi1)) in rt.iter().enumerate() {
                for (j, &(j0, j1, wj0, wj1)) in ct.iter().enumerate() {
                    y[[bi, ci, i, j]] = wi0 * wj0 * x[[bi, ci, i0, j0]]
                        + wi0 * wj1 * x[[bi, ci, i0, j1]]
                        + wi1 * wj0 * x[[bi, ci, i1, j0]]
                        + wi1 * wj1 * x[[bi, ci, i1, j1]];
                }
            }
        }
    }
    y.into_dyn()
}

/// Adjoint of [`resize_bilinear`]: scatter `[B, C, oh, ow]` cotangents back
/// to `[B, C, h, w]` with the same tap weights.
pub fn resize_bilinear_t(g: &ArrayViewD<f32>, h: usize, w: usize) -> ArrayD<f32> {
    let gv = g.view().into_dimensionality::<Ix4>().unwrap();
    let (b, c, oh, ow) = gv.dim();
    let rt = bilinear_taps(h, oh);
    let ct = bilinear_taps(w, ow);
    let mut x = Array4::<f32>::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            for (i, &(i0, i1, wi0, wi1)) in rt.iter().enumerate() {
                for (j, &(j0, j1, wj0, wj1)) in ct.iter().enumerate() {
                    let v = gv[[bi, ci, i, j]];
                    x[[bi, ci, i0, j0]] += wi0 * wj0 * v;
                    x[[bi, ci, i0, j1]] += wi0 * wj1 * v;
                    x[[bi, ci, i1, j0]] += wi1 * wj0 * v;
                    x[[bi, ci, i1, j1]] += wi1 * wj1 * v;
                }
            }
        }
    }
    x.into_dyn()
}

/// Per-sample affine warp matrices. Row `b` maps *output* pixel coordinates
/// (centred on the image midpoint) to input coordinates:
/// `x_in = m[0]*x + m[1]*y + m[2]`, `y_in = m[3]*x + m[4]*y + m[5]`.
#[derive(Clone, Debug)]
pub struct WarpGrid {
    pub mats: Vec<[f32; 6]>,
}

impl WarpGrid {
    pub fn identity(batch: usize) -> Self {
        WarpGrid { mats: vec![[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]; batch] }
    }

    pub fn is_identity(&self) -> bool {
        self.mats.iter().all(|m| *m == [1.0, 0.0, 0.0, 0.0, 1.0, 0.0])
    }
}

/// Bilinear affine warp with zero padding outside the source image.
pub fn affine_warp(x: &ArrayViewD<f32>, grid: &WarpGrid) -> ArrayD<f32> {
    warp_impl(x, grid, false)
}

/// Adjoint of [`affine_warp`] under the same grid.
pub fn affine_warp_t(g: &ArrayViewD<f32>, grid: &WarpGrid) -> ArrayD<f32> {
    warp_impl(g, grid, true)
}

fn warp_impl(x: &ArrayViewD<f32>, grid: &WarpGrid, transpose: bool) -> ArrayD<f32> {
    let x = x.view().into_dimensionality::<Ix4>().unwrap();
    let (b, c, h, w) = x.dim();
    assert_eq!(grid.mats.len(), b, "warp: one matrix per sample");
    let cx = (w as f32 - 1.0) / 2.0;
    let cy = (h as f32 - 1.0) / 2.0;
    let mut y = Array4::<f32>::zeros((b, c, h, w));
    for bi in 0..b {
        let m = grid.mats[bi];
        for oi in 0..h {
            for oj in 0..w {
                let xo = oj as f32 - cx;
                let yo = oi as f32 - cy;
                let xi = m[0] * xo + m[1] * yo + m[2] + cx;
                let yi = m[3] * xo + m[4] * yo + m[5] + cy;
                if xi < -1.0 || xi > w as f32 || yi < -1.0 || yi > h as f32 {
                    continue;
                }
                let j0 = xi.floor() as isize;
                let i0 = yi.floor() as isize;
                let fx = xi - j0 as f32;
                let fy = yi - i0 as f32;
                let taps = [
                    (i0, j0, (1.0 - fy) * (1.0 - fx)),
                    (i0, j0 + 1, (1.0 - fy) * fx),
                    (i0 + 1, j0, fy * (1.0 - fx)),
                    (i0 + 1, j0 + 1, fy * fx),
                ];
                for (ti, tj, tw) in taps {
                    if tw == 0.0 || ti < 0 || tj < 0 || ti >= h as isize || tj >= w as isize {
                        continue;
                    }
                    let (ti, tj) = (ti as usize, tj as usize);
                    for ci in 0..c {
                        if transpose {
                            y[[bi, ci, ti, tj]] += tw * x[[bi, ci, oi, oj]];
                        } else {
                            y[[bi, ci, oi, oj]] += tw * x[[bi, ci, ti, tj]];
                        }
                    }
                }
            }
        }
    }
    y.into_dyn()
}

/// Per-sample 3x3 channel mix: `y[b,o] = sum_c m[b][o][c] * x[b,c] + bias[b][o]`.
#[derive(Clone, Debug)]
pub struct ChannelMix {
    pub mats: Vec<[[f32; 3]; 3]>,
    pub bias: Vec<[f32; 3]>,
}

impl ChannelMix {
    pub fn transposed(&self) -> ChannelMix {
        let mats = self
            .mats
            .iter()
            .map(|m| {
                let mut t = [[0.0f32; 3]; 3];
                for (o, row) in m.iter().enumerate() {
                    for (c, v) in row.iter().enumerate() {
                        t[c][o] = *v;
                    }
                }
                t
            })
            .collect();
        ChannelMix { mats, bias: vec![[0.0; 3]; self.bias.len()] }
    }
}

pub fn channel_mix(x: &ArrayViewD<f32>, mix: &ChannelMix) -> ArrayD<f32> {
    let x = x.view().into_dimensionality::<Ix4>().unwrap();
    let (b, c, h, w) = x.dim();
    assert_eq!(c, 3, "channel_mix: expects 3 channels");
    assert_eq!(mix.mats.len(), b);
    let mut y = Array4::<f32>::zeros((b, c, h, w));
    for bi in 0..b {
        let m = mix.mats[bi];
        let bias = mix.bias[bi];
        for i in 0..h {
            for j in 0..w {
                for o in 0..3 {
                    y[[bi, o, i, j]] = m[o][0] * x[[bi, 0, i, j]]
                        + m[o][1] * x[[bi, 1, i, j]]
                        + m[o][2] * x[[bi, 2, i, j]]
                        + bias[o];
                }
            }
        }
    }
    y.into_dyn()
}

/// One region of interest in image coordinates, assigned to a batch sample.
#[derive(Clone, Copy, Debug)]
pub struct Roi {
    pub batch: usize,
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
}

/// RoIAlign geometry: output bin grid, feature stride, and samples per bin.
#[derive(Clone, Copy, Debug)]
pub struct RoiAlignGeom {
    pub out: usize,
    pub spatial_scale: f32,
    pub sampling_ratio: usize,
}

/// Walk all bilinear sampling taps of an RoIAlign pass. The callback sees
/// `(roi index, batch, out i, out j, tap i, tap j, weight)`; gather and
/// scatter drivers share this so the two directions are exact adjoints.
fn roi_taps(
    h: usize,
    w: usize,
    rois: &[Roi],
    geom: RoiAlignGeom,
    mut visit: impl FnMut(usize, usize, usize, usize, usize, usize, f32),
) {
    let n = geom.out;
    let sr = geom.sampling_ratio.max(1);
    let inv = 1.0 / (sr * sr) as f32;
    for (ri, roi) in rois.iter().enumerate() {
        let x1 = roi.x1 * geom.spatial_scale - 0.5;
        let y1 = roi.y1 * geom.spatial_scale - 0.5;
        let x2 = roi.x2 * geom.spatial_scale - 0.5;
        let y2 = roi.y2 * geom.spatial_scale - 0.5;
        let bw = ((x2 - x1) / n as f32).max(1e-6);
        let bh = ((y2 - y1) / n as f32).max(1e-6);
        for pi in 0..n {
            for pj in 0..n {
                for si in 0..sr {
                    for sj in 0..sr {
                        let sy = y1 + (pi as f32 + (si as f32 + 0.5) / sr as f32) * bh;
                        let sx = x1 + (pj as f32 + (sj as f32 + 0.5) / sr as f32) * bw;
                        if sy < -1.0 || sy > h as f32 || sx < -1.0 || sx > w as f32 {
                            continue;
                        }
                        let sy = sy.max(0.0).min((h - 1) as f32);
                        let sx = sx.max(0.0).min((w - 1) as f32);
                        let i0 = sy.floor() as usize;
                        let j0 = sx.floor() as usize;
                        let i1 = (i0 + 1).min(h - 1);
                        let j1 = (j0 + 1).min(w - 1);
                        let fy = sy - i0 as f32;
                        let fx = sx - j0 as f32;
                        visit(ri, roi.batch, pi, pj, i0, j0, (1.0 - fy) * (1.0 - fx) * inv);
                        visit(ri, roi.batch, pi, pj, i0, j1, (1.0 - fy) * fx * inv);
                        visit(ri, roi.batch, pi, pj, i1, j0, fy * (1.0 - fx) * inv);
                        visit(ri, roi.batch, pi, pj, i1, j1, fy * fx * inv);
                    }
                }
            }
        }
    }
}

/// Bilinear RoIAlign over a single feature map, half-pixel aligned.
/// Output is `[R, C, out, out]`.
pub fn roi_align(feat: &ArrayViewD<f32>, rois: &[Roi], geom: RoiAlignGeom) -> ArrayD<f32> {
    let f = feat.view().into_dimensionality::<Ix4>().unwrap();
    let (_b, c, h, w) = f.dim();
    let mut y = Array4::<f32>::zeros((rois.len(), c, geom.out, geom.out));
    roi_taps(h, w, rois, geom, |ri, bi, pi, pj, ti, tj, tw| {
        for ci in 0..c {
            y[[ri, ci, pi, pj]] += tw * f[[bi, ci, ti, tj]];
        }
    });
    y.into_dyn()
}

/// Adjoint of [`roi_align`]: scatter `[R, C, out, out]` cotangents into a
/// zero feature map of shape `feat_shape`.
pub fn roi_align_t(
    g: &ArrayViewD<f32>,
    rois: &[Roi],
    geom: RoiAlignGeom,
    feat_shape: [usize; 4],
) -> ArrayD<f32> {
    let gv = g.view().into_dimensionality::<Ix4>().unwrap();
    let [b, c, h, w] = feat_shape;
    let mut out = Array4::<f32>::zeros((b, c, h, w));
    roi_taps(h, w, rois, geom, |ri, bi, pi, pj, ti, tj, tw| {
        for ci in 0..c {
            out[[bi, ci, ti, tj]] += tw * gv[[ri, ci, pi, pj]];
        }
    });
    out.into_dyn()
}

/// Stack row indices out of axis 0: `y[i] = x[idx[i]]`.
pub fn index_select0(x: &ArrayViewD<f32>, idx: &[usize]) -> ArrayD<f32> {
    let d0 = x.shape()[0];
    for &i in idx {
        assert!(i < d0, "index_select0: index {i} out of {d0}");
    }
    let rest: usize = x.shape()[1..].iter().product();
    let xo = x.as_standard_layout();
    let xs = xo.as_slice().unwrap();
    let mut out = Vec::with_capacity(idx.len() * rest);
    for &i in idx {
        out.extend_from_slice(&xs[i * rest..(i + 1) * rest]);
    }
    let mut shape = x.shape().to_vec();
    shape[0] = idx.len();
    ArrayD::from_shape_vec(shape, out).unwrap()
}

/// Adjoint of [`index_select0`]: scatter-add rows back into `out_dim0` slots.
pub fn scatter_add0(g: &ArrayViewD<f32>, idx: &[usize], out_dim0: usize) -> ArrayD<f32> {
    assert_eq!(g.shape()[0], idx.len());
    let rest: usize = g.shape()[1..].iter().product();
    let go = g.as_standard_layout();
    let gs = go.as_slice().unwrap();
    let mut shape = g.shape().to_vec();
    shape[0] = out_dim0;
    let mut out = ArrayD::<f32>::zeros(shape);
    {
        let os = out.as_slice_mut().unwrap();
        for (r, &i) in idx.iter().enumerate() {
            assert!(i < out_dim0);
            for k in 0..rest {
                os[i * rest + k] += gs[r * rest + k];
            }
        }
    }
    out
}

/// Expose a 4-d view for callers that hold dynamic-dim arrays.
pub fn as4(x: &ArrayD<f32>) -> ArrayView4<'_, f32> {
    x.view().into_dimensionality::<Ix4>().unwrap()
}
