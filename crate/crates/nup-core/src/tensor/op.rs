//! Op set for the tape: forward evaluation and backward (vjp) rules.
//!
//! Backward rules emit ordinary graph nodes, so a gradient is itself a
//! differentiable function of the inputs. That is what lets the R1 penalty
//! (a norm of a gradient) be trained through.
//!
//! Linear data-movement ops come in adjoint pairs; each one's vjp is its
//! partner applied to the cotangent.

use std::rc::Rc;

use ndarray::{ArrayD, ArrayViewD, Axis, IxDyn, Slice as NdSlice};

use super::kernels::{self, ChannelMix, ConvGeom, Roi, RoiAlignGeom, WarpGrid};
use super::{Graph, Tensor};

#[derive(Clone)]
pub(crate) enum Op {
    Leaf,
    Neg(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Recip(usize),
    Abs(usize),
    LeakyRelu(usize, f32),
    Sigmoid(usize),
    Tanh(usize),
    Softplus(usize),
    MulScalar(usize, f32),
    AddScalar(usize, f32),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Reshape(usize, Vec<usize>),
    Permute(usize, Vec<usize>),
    Broadcast(usize, Vec<usize>),
    SumAxes(usize, Vec<usize>),
    Slice(usize, Vec<(usize, usize)>),
    PadSlice(usize, Vec<(usize, usize)>, Vec<usize>),
    Concat(Vec<usize>, usize),
    IndexSelect0(usize, Rc<Vec<usize>>),
    ScatterAdd0(usize, Rc<Vec<usize>>, usize),
    Matmul(usize, usize),
    Im2col(usize, ConvGeom),
    Col2im(usize, ConvGeom, [usize; 4]),
    UpNearest2x(usize),
    SumPool2x(usize),
    ResizeBilinear(usize, usize, usize),
    ResizeBilinearT(usize, usize, usize),
    AffineWarp(usize, Rc<WarpGrid>),
    AffineWarpT(usize, Rc<WarpGrid>),
    ChannelMixOp(usize, Rc<ChannelMix>),
    RoiAlignOp(usize, Rc<Vec<Roi>>, RoiAlignGeom),
    RoiAlignTOp(usize, Rc<Vec<Roi>>, RoiAlignGeom, [usize; 4]),
}

impl Op {
    pub(crate) fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            Neg(a) | Exp(a) | Log(a) | Sqrt(a) | Recip(a) | Abs(a) | LeakyRelu(a, _)
            | Sigmoid(a) | Tanh(a) | Softplus(a) | MulScalar(a, _) | AddScalar(a, _)
            | Reshape(a, _) | Permute(a, _) | Broadcast(a, _) | SumAxes(a, _) | Slice(a, _)
            | PadSlice(a, _, _) | IndexSelect0(a, _) | ScatterAdd0(a, _, _) | Im2col(a, _)
            | Col2im(a, _, _) | UpNearest2x(a) | SumPool2x(a) | ResizeBilinear(a, _, _)
            | ResizeBilinearT(a, _, _) | AffineWarp(a, _) | AffineWarpT(a, _)
            | ChannelMixOp(a, _) | RoiAlignOp(a, _, _) | RoiAlignTOp(a, _, _, _) => vec![*a],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | Matmul(a, b) => vec![*a, *b],
            Concat(parts, _) => parts.clone(),
        }
    }

    pub(crate) fn eval(&self, vals: &[ArrayViewD<f32>]) -> ArrayD<f32> {
        use Op::*;
        match self {
            Leaf => unreachable!("leaf nodes carry their own value"),
            Neg(_) => vals[0].mapv(|v| -v),
            Exp(_) => vals[0].mapv(f32::exp),
            Log(_) => vals[0].mapv(f32::ln),
            Sqrt(_) => vals[0].mapv(f32::sqrt),
            Recip(_) => vals[0].mapv(|v| 1.0 / v),
            Abs(_) => vals[0].mapv(f32::abs),
            LeakyRelu(_, alpha) => vals[0].mapv(|v| if v >= 0.0 { v } else { alpha * v }),
            Sigmoid(_) => vals[0].mapv(stable_sigmoid),
            Tanh(_) => vals[0].mapv(f32::tanh),
            Softplus(_) => vals[0].mapv(stable_softplus),
            MulScalar(_, c) => vals[0].mapv(|v| v * c),
            AddScalar(_, c) => vals[0].mapv(|v| v + c),
            Add(_, _) => &vals[0] + &vals[1],
            Sub(_, _) => &vals[0] - &vals[1],
            Mul(_, _) => &vals[0] * &vals[1],
            Div(_, _) => &vals[0] / &vals[1],
            Reshape(_, shape) => reshape_copy(&vals[0], shape),
            Permute(_, perm) => vals[0]
                .view()
                .permuted_axes(IxDyn(perm))
                .as_standard_layout()
                .into_owned(),
            Broadcast(_, shape) => vals[0].broadcast(IxDyn(shape)).expect("broadcast").to_owned(),
            SumAxes(_, axes) => {
                let mut acc = vals[0].to_owned();
                let mut sorted = axes.clone();
                sorted.sort_unstable_by(|a, b| b.cmp(a));
                for ax in sorted {
                    acc = acc.sum_axis(Axis(ax));
                }
                acc
            }
            Slice(_, ranges) => vals[0]
                .slice_each_axis(|ad| {
                    let (s, e) = ranges[ad.axis.index()];
                    NdSlice::from(s..e)
                })
                .to_owned(),
            PadSlice(_, ranges, full) => {
                let mut out = ArrayD::<f32>::zeros(IxDyn(full));
                out.slice_each_axis_mut(|ad| {
                    let (s, e) = ranges[ad.axis.index()];
                    NdSlice::from(s..e)
                })
                .assign(&vals[0]);
                out
            }
            Concat(_, axis) => ndarray::concatenate(Axis(*axis), vals).expect("concat"),
            IndexSelect0(_, idx) => kernels::index_select0(&vals[0], idx),
            ScatterAdd0(_, idx, d0) => kernels::scatter_add0(&vals[0], idx, *d0),
            Matmul(_, _) => kernels::matmul(&vals[0], &vals[1]),
            Im2col(_, g) => kernels::im2col(&vals[0], *g),
            Col2im(_, g, shape) => kernels::col2im(&vals[0], *g, *shape),
            UpNearest2x(_) => kernels::up_nearest_2x(&vals[0]),
            SumPool2x(_) => kernels::sum_pool_2x(&vals[0]),
            ResizeBilinear(_, oh, ow) => kernels::resize_bilinear(&vals[0], *oh, *ow),
            ResizeBilinearT(_, h, w) => kernels::resize_bilinear_t(&vals[0], *h, *w),
            AffineWarp(_, grid) => kernels::affine_warp(&vals[0], grid),
            AffineWarpT(_, grid) => kernels::affine_warp_t(&vals[0], grid),
            ChannelMixOp(_, mix) => kernels::channel_mix(&vals[0], mix),
            RoiAlignOp(_, rois, geom) => kernels::roi_align(&vals[0], rois, *geom),
            RoiAlignTOp(_, rois, geom, shape) => {
                kernels::roi_align_t(&vals[0], rois, *geom, *shape)
            }
        }
    }

    /// Cotangent contributions to each input, as `(input id, tensor)` pairs.
    /// `out` is the primal output of this node, `g` the incoming cotangent.
    pub(crate) fn vjp(&self, graph: &Graph, out: &Tensor, g: &Tensor) -> Vec<(usize, Tensor)> {
        use Op::*;
        let t = |id: usize| Tensor { graph: graph.clone(), id };
        match self {
            Leaf => vec![],
            Neg(a) => vec![(*a, g.neg())],
            Exp(a) => vec![(*a, g.mul(out))],
            Log(a) => vec![(*a, g.mul(&t(*a).recip()))],
            Sqrt(a) => vec![(*a, g.mul(&out.recip()).mul_scalar(0.5))],
            Recip(a) => vec![(*a, g.mul(out).mul(out).neg())],
            Abs(a) => {
                let sign = graph.constant(t(*a).value().mapv(|v| {
                    if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                }));
                vec![(*a, g.mul(&sign))]
            }
            LeakyRelu(a, alpha) => {
                let alpha = *alpha;
                let mask = graph
                    .constant(t(*a).value().mapv(|v| if v >= 0.0 { 1.0 } else { alpha }));
                vec![(*a, g.mul(&mask))]
            }
            Sigmoid(a) => {
                let one_minus = out.neg().add_scalar(1.0);
                vec![(*a, g.mul(out).mul(&one_minus))]
            }
            Tanh(a) => {
                let one_minus_sq = out.mul(out).neg().add_scalar(1.0);
                vec![(*a, g.mul(&one_minus_sq))]
            }
            Softplus(a) => vec![(*a, g.mul(&t(*a).sigmoid()))],
            MulScalar(a, c) => vec![(*a, g.mul_scalar(*c))],
            AddScalar(a, _) => vec![(*a, g.clone())],
            Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Sub(a, b) => vec![(*a, g.clone()), (*b, g.neg())],
            Mul(a, b) => vec![(*a, g.mul(&t(*b))), (*b, g.mul(&t(*a)))],
            Div(a, b) => {
                let tb = t(*b);
                vec![(*a, g.div(&tb)), (*b, g.mul(out).div(&tb).neg())]
            }
            Reshape(a, _) => vec![(*a, g.reshape(&t(*a).shape()))],
            Permute(a, perm) => {
                let mut inv = vec![0usize; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                vec![(*a, g.permute(&inv))]
            }
            Broadcast(a, shape) => {
                let in_shape = t(*a).shape();
                let axes: Vec<usize> = (0..shape.len())
                    .filter(|&i| in_shape[i] == 1 && shape[i] != 1)
                    .collect();
                let summed = if axes.is_empty() { g.clone() } else { g.sum_axes(&axes) };
                vec![(*a, summed.reshape(&in_shape))]
            }
            SumAxes(a, axes) => {
                let in_shape = t(*a).shape();
                let mut keep = in_shape.clone();
                for &ax in axes {
                    keep[ax] = 1;
                }
                vec![(*a, g.reshape(&keep).broadcast_to(&in_shape))]
            }
            Slice(a, ranges) => {
                vec![(*a, g.pad_slice(ranges, &t(*a).shape()))]
            }
            PadSlice(a, ranges, _) => vec![(*a, g.slice(ranges))],
            Concat(parts, axis) => {
                let mut outs = Vec::with_capacity(parts.len());
                let mut offset = 0usize;
                for &p in parts {
                    let pshape = t(p).shape();
                    let mut ranges: Vec<(usize, usize)> =
                        g.shape().iter().map(|&d| (0, d)).collect();
                    ranges[*axis] = (offset, offset + pshape[*axis]);
                    offset += pshape[*axis];
                    outs.push((p, g.slice(&ranges)));
                }
                outs
            }
            IndexSelect0(a, idx) => {
                let d0 = t(*a).shape()[0];
                vec![(*a, g.scatter_add0(idx.clone(), d0))]
            }
            ScatterAdd0(a, idx, _) => vec![(*a, g.index_select0(idx.clone()))],
            Matmul(a, b) => {
                let (ta, tb) = (t(*a), t(*b));
                vec![(*a, g.matmul(&tb.t2())), (*b, ta.t2().matmul(g))]
            }
            Im2col(a, geom) => {
                let s = t(*a).shape();
                vec![(*a, g.col2im(*geom, [s[0], s[1], s[2], s[3]]))]
            }
            Col2im(a, geom, _) => vec![(*a, g.im2col(*geom))],
            UpNearest2x(a) => vec![(*a, g.sum_pool_2x())],
            SumPool2x(a) => vec![(*a, g.up_nearest_2x())],
            ResizeBilinear(a, _, _) => {
                let s = t(*a).shape();
                vec![(*a, g.resize_bilinear_t(s[2], s[3]))]
            }
            ResizeBilinearT(a, _, _) => {
                let s = t(*a).shape();
                vec![(*a, g.resize_bilinear(s[2], s[3]))]
            }
            AffineWarp(a, grid) => vec![(*a, g.affine_warp_t(grid.clone()))],
            AffineWarpT(a, grid) => vec![(*a, g.affine_warp(grid.clone()))],
            ChannelMixOp(a, mix) => {
                vec![(*a, g.channel_mix(Rc::new(mix.transposed())))]
            }
            RoiAlignOp(a, rois, geom) => {
                let s = t(*a).shape();
                vec![(*a, g.roi_align_t(rois.clone(), *geom, [s[0], s[1], s[2], s[3]]))]
            }
            RoiAlignTOp(a, rois, geom, _) => vec![(*a, g.roi_align(rois.clone(), *geom))],
        }
    }
}

fn reshape_copy(v: &ArrayViewD<f32>, shape: &[usize]) -> ArrayD<f32> {
    let owned = v.as_standard_layout().into_owned();
    owned.into_shape_with_order(IxDyn(shape)).expect("reshape: element count mismatch")
}

fn stable_sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn stable_softplus(x: f32) -> f32 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
