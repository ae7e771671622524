//! A small eager tape for reverse-mode differentiation on `f32` arrays.
//!
//! Values are computed as nodes are created; `Graph::grad` walks the tape
//! backwards and emits cotangents as new nodes, so higher-order gradients
//! (gradient penalties) fall out of the same machinery. A graph lives for
//! one training step and is dropped wholesale afterwards.

mod adam;
pub mod kernels;
mod op;
mod param;

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};

pub use adam::Adam;
pub use kernels::{ChannelMix, ConvGeom, Roi, RoiAlignGeom, WarpGrid};
use op::Op;
pub use param::{Bound, Init, ParamId, ParamStore, Scope};

struct Node {
    value: ArrayD<f32>,
    op: Op,
    requires_grad: bool,
}

struct Inner {
    nodes: Vec<Node>,
}

/// Handle to a shared tape. Cheap to clone.
#[derive(Clone)]
pub struct Graph {
    inner: Rc<RefCell<Inner>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to one node of a [`Graph`].
#[derive(Clone)]
pub struct Tensor {
    graph: Graph,
    id: usize,
}

impl Graph {
    pub fn new() -> Graph {
        Graph { inner: Rc::new(RefCell::new(Inner { nodes: Vec::new() })) }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: Op, value: ArrayD<f32>, requires_grad: bool) -> Tensor {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node { value, op, requires_grad });
        Tensor { graph: self.clone(), id: inner.nodes.len() - 1 }
    }

    /// A leaf that does not require gradients.
    pub fn constant(&self, value: ArrayD<f32>) -> Tensor {
        self.push(Op::Leaf, value, false)
    }

    /// A leaf that requires gradients (network inputs under a penalty,
    /// bound parameters).
    pub fn input(&self, value: ArrayD<f32>) -> Tensor {
        self.push(Op::Leaf, value, true)
    }

    pub fn zeros(&self, shape: &[usize]) -> Tensor {
        self.constant(ArrayD::zeros(IxDyn(shape)))
    }

    pub fn scalar(&self, v: f32) -> Tensor {
        self.constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    fn new_op(&self, op: Op) -> Tensor {
        let (value, rg) = {
            let inner = self.inner.borrow();
            let ids = op.inputs();
            let vals: Vec<_> = ids.iter().map(|&i| inner.nodes[i].value.view()).collect();
            let rg = ids.iter().any(|&i| inner.nodes[i].requires_grad);
            (op.eval(&vals), rg)
        };
        self.push(op, value, rg)
    }

    pub fn concat(&self, parts: &[Tensor], axis: usize) -> Tensor {
        assert!(!parts.is_empty());
        for p in parts {
            assert!(Rc::ptr_eq(&self.inner, &p.graph.inner), "concat: mixed graphs");
        }
        self.new_op(Op::Concat(parts.iter().map(|p| p.id).collect(), axis))
    }

    /// Reverse-mode gradients of a scalar `loss` with respect to `wrt`.
    ///
    /// Returns one entry per requested tensor; `None` means the loss does not
    /// depend on it. Cotangents are emitted as graph nodes, so the results
    /// can be differentiated again.
    pub fn grad(&self, loss: &Tensor, wrt: &[&Tensor]) -> Vec<Option<Tensor>> {
        assert!(
            loss.value().len() == 1,
            "grad: loss must be a scalar, got shape {:?}",
            loss.shape()
        );
        let n = loss.id + 1;
        let mut cot: Vec<Option<Tensor>> = Vec::new();
        cot.resize(n, None);
        let seed = ArrayD::from_elem(IxDyn(&loss.shape()), 1.0f32);
        cot[loss.id] = Some(self.constant(seed));

        for i in (0..n).rev() {
            let Some(ci) = cot[i].clone() else { continue };
            let (op, rg) = {
                let inner = self.inner.borrow();
                (inner.nodes[i].op.clone(), inner.nodes[i].requires_grad)
            };
            if !rg || matches!(op, Op::Leaf) {
                continue;
            }
            let out = Tensor { graph: self.clone(), id: i };
            for (pid, contrib) in op.vjp(self, &out, &ci) {
                let parent_rg = self.inner.borrow().nodes[pid].requires_grad;
                if !parent_rg {
                    continue;
                }
                cot[pid] = Some(match cot[pid].take() {
                    None => contrib,
                    Some(prev) => prev.add(&contrib),
                });
            }
            // This node's cotangent is no longer needed once propagated,
            // unless the caller asked for it.
            if !wrt.iter().any(|t| t.id == i) {
                cot[i] = None;
            }
        }

        wrt.iter().map(|t| if t.id < n { cot[t.id].clone() } else { None }).collect()
    }
}

impl Tensor {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn value(&self) -> ArrayD<f32> {
        self.graph.inner.borrow().nodes[self.id].value.clone()
    }

    /// Read the value without cloning the backing storage.
    pub fn with_value<R>(&self, f: impl FnOnce(&ArrayD<f32>) -> R) -> R {
        f(&self.graph.inner.borrow().nodes[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.inner.borrow().nodes[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> f32 {
        self.with_value(|v| {
            assert_eq!(v.len(), 1, "item: tensor has {} elements", v.len());
            *v.iter().next().unwrap()
        })
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.inner.borrow().nodes[self.id].requires_grad
    }

    /// Copy of this value as a fresh constant leaf (stops gradient flow).
    pub fn detach(&self) -> Tensor {
        self.graph.constant(self.value())
    }

    fn unary(&self, op: Op) -> Tensor {
        self.graph.new_op(op)
    }

    pub fn neg(&self) -> Tensor {
        self.unary(Op::Neg(self.id))
    }
    pub fn exp(&self) -> Tensor {
        self.unary(Op::Exp(self.id))
    }
    pub fn log(&self) -> Tensor {
        self.unary(Op::Log(self.id))
    }
    pub fn sqrt(&self) -> Tensor {
        self.unary(Op::Sqrt(self.id))
    }
    pub fn recip(&self) -> Tensor {
        self.unary(Op::Recip(self.id))
    }
    pub fn abs(&self) -> Tensor {
        self.unary(Op::Abs(self.id))
    }
    pub fn lrelu(&self, alpha: f32) -> Tensor {
        self.unary(Op::LeakyRelu(self.id, alpha))
    }
    pub fn relu(&self) -> Tensor {
        self.lrelu(0.0)
    }
    pub fn sigmoid(&self) -> Tensor {
        self.unary(Op::Sigmoid(self.id))
    }
    pub fn tanh(&self) -> Tensor {
        self.unary(Op::Tanh(self.id))
    }
    pub fn softplus(&self) -> Tensor {
        self.unary(Op::Softplus(self.id))
    }
    pub fn mul_scalar(&self, c: f32) -> Tensor {
        self.unary(Op::MulScalar(self.id, c))
    }
    pub fn add_scalar(&self, c: f32) -> Tensor {
        self.unary(Op::AddScalar(self.id, c))
    }
    pub fn square(&self) -> Tensor {
        self.mul(self)
    }

    fn binary(&self, other: &Tensor, f: impl Fn(usize, usize) -> Op) -> Tensor {
        assert!(
            Rc::ptr_eq(&self.graph.inner, &other.graph.inner),
            "binary op across different graphs"
        );
        let (a, b) = broadcast_pair(self, other);
        self.graph.new_op(f(a.id, b.id))
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.binary(other, Op::Add)
    }
    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.binary(other, Op::Sub)
    }
    pub fn mul(&self, other: &Tensor) -> Tensor {
        self.binary(other, Op::Mul)
    }
    pub fn div(&self, other: &Tensor) -> Tensor {
        self.binary(other, Op::Div)
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        self.unary(Op::Reshape(self.id, shape.to_vec()))
    }

    pub fn permute(&self, perm: &[usize]) -> Tensor {
        self.unary(Op::Permute(self.id, perm.to_vec()))
    }

    /// 2-d transpose.
    pub fn t2(&self) -> Tensor {
        self.permute(&[1, 0])
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Tensor {
        if self.shape() == shape {
            return self.clone();
        }
        self.unary(Op::Broadcast(self.id, shape.to_vec()))
    }

    /// Sum over `axes`, dropping them.
    pub fn sum_axes(&self, axes: &[usize]) -> Tensor {
        self.unary(Op::SumAxes(self.id, axes.to_vec()))
    }

    pub fn sum_all(&self) -> Tensor {
        let all: Vec<usize> = (0..self.shape().len()).collect();
        if all.is_empty() {
            return self.clone();
        }
        self.sum_axes(&all)
    }

    pub fn mean_all(&self) -> Tensor {
        let n: usize = self.shape().iter().product();
        self.sum_all().mul_scalar(1.0 / n as f32)
    }

    pub fn mean_axes(&self, axes: &[usize]) -> Tensor {
        let shape = self.shape();
        let n: usize = axes.iter().map(|&a| shape[a]).product();
        self.sum_axes(axes).mul_scalar(1.0 / n as f32)
    }

    pub fn slice(&self, ranges: &[(usize, usize)]) -> Tensor {
        self.unary(Op::Slice(self.id, ranges.to_vec()))
    }

    /// Embed into zeros of `full` shape at `ranges` (adjoint of `slice`).
    pub fn pad_slice(&self, ranges: &[(usize, usize)], full: &[usize]) -> Tensor {
        self.unary(Op::PadSlice(self.id, ranges.to_vec(), full.to_vec()))
    }

    pub fn index_select0(&self, idx: Rc<Vec<usize>>) -> Tensor {
        self.unary(Op::IndexSelect0(self.id, idx))
    }

    pub fn scatter_add0(&self, idx: Rc<Vec<usize>>, out_dim0: usize) -> Tensor {
        self.unary(Op::ScatterAdd0(self.id, idx, out_dim0))
    }

    pub fn matmul(&self, other: &Tensor) -> Tensor {
        assert!(Rc::ptr_eq(&self.graph.inner, &other.graph.inner));
        self.graph.new_op(Op::Matmul(self.id, other.id))
    }

    pub fn im2col(&self, geom: ConvGeom) -> Tensor {
        self.unary(Op::Im2col(self.id, geom))
    }

    pub fn col2im(&self, geom: ConvGeom, bchw: [usize; 4]) -> Tensor {
        self.unary(Op::Col2im(self.id, geom, bchw))
    }

    pub fn up_nearest_2x(&self) -> Tensor {
        self.unary(Op::UpNearest2x(self.id))
    }

    pub fn sum_pool_2x(&self) -> Tensor {
        self.unary(Op::SumPool2x(self.id))
    }

    pub fn avg_pool_2x(&self) -> Tensor {
        self.sum_pool_2x().mul_scalar(0.25)
    }

    pub fn resize_bilinear(&self, oh: usize, ow: usize) -> Tensor {
        self.unary(Op::ResizeBilinear(self.id, oh, ow))
    }

    pub fn resize_bilinear_t(&self, h: usize, w: usize) -> Tensor {
        self.unary(Op::ResizeBilinearT(self.id, h, w))
    }

    pub fn affine_warp(&self, grid: Rc<WarpGrid>) -> Tensor {
        self.unary(Op::AffineWarp(self.id, grid))
    }

    pub fn affine_warp_t(&self, grid: Rc<WarpGrid>) -> Tensor {
        self.unary(Op::AffineWarpT(self.id, grid))
    }

    pub fn channel_mix(&self, mix: Rc<ChannelMix>) -> Tensor {
        self.unary(Op::ChannelMixOp(self.id, mix))
    }

    pub fn roi_align(&self, rois: Rc<Vec<Roi>>, geom: RoiAlignGeom) -> Tensor {
        self.unary(Op::RoiAlignOp(self.id, rois, geom))
    }

    pub fn roi_align_t(
        &self,
        rois: Rc<Vec<Roi>>,
        geom: RoiAlignGeom,
        feat_shape: [usize; 4],
    ) -> Tensor {
        self.unary(Op::RoiAlignTOp(self.id, rois, geom, feat_shape))
    }
}

/// NumPy-style broadcasting: align ranks with leading 1s, then expand.
fn broadcast_pair(a: &Tensor, b: &Tensor) -> (Tensor, Tensor) {
    let sa = a.shape();
    let sb = b.shape();
    if sa == sb {
        return (a.clone(), b.clone());
    }
    let rank = sa.len().max(sb.len());
    let pad = |s: &[usize]| -> Vec<usize> {
        let mut v = vec![1usize; rank - s.len()];
        v.extend_from_slice(s);
        v
    };
    let pa = pad(&sa);
    let pb = pad(&sb);
    let mut target = Vec::with_capacity(rank);
    for i in 0..rank {
        let (da, db) = (pa[i], pb[i]);
        assert!(
            da == db || da == 1 || db == 1,
            "broadcast: incompatible shapes {sa:?} vs {sb:?}"
        );
        target.push(da.max(db));
    }
    let fix = |t: &Tensor, padded: &[usize], orig: &[usize]| -> Tensor {
        let mut out = t.clone();
        if padded != orig {
            out = out.reshape(padded);
        }
        out.broadcast_to(&target)
    };
    (fix(a, &pa, &sa), fix(b, &pb, &sb))
}
