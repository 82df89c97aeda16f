use super::conv::{self, ConvGeom};
use super::params::{Bound, ParamId};
use crate::error::{bail, Result};
use crate::real::Real;
use crate::tensor::Tensor;
use alloc::vec;
use alloc::vec::Vec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// `k / 2` on every side.
    Same,
    Valid,
}

/// Element-wise unary operations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Swish,
    LeakyRelu(f64),
    Relu,
    Tanh,
    Exp,
    Abs,
    Square,
    Sqrt,
    Scale(f64),
    AddScalar(f64),
    /// Gradient passes where `lo <= x <= hi`.
    Clamp(f64, f64),
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param { tag: usize, id: ParamId },
    Unary(NodeId, Unary),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    /// `(N, C, H, W) * (N, 1, H, W)`
    MulBcastCh(NodeId, NodeId),
    /// `(N, C, H, W) + (N, C)`
    AddVecBcast(NodeId, NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    SumChannels(NodeId),
    Conv { x: NodeId, w: NodeId, b: Option<NodeId>, geom: ConvGeom },
    Upsample2x(NodeId),
    Linear { x: NodeId, w: NodeId, b: Option<NodeId> },
    GroupNorm { x: NodeId, gamma: NodeId, beta: NodeId, groups: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    Concat(NodeId, NodeId),
    SliceCh { x: NodeId, start: usize },
    Gram(NodeId),
    GatherPositions { x: NodeId, idx: Vec<usize> },
}

impl Op {
    fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param { .. } => "param",
            Op::Unary(..) => "unary",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::MulBcastCh(..) => "mul_bcast_channels",
            Op::AddVecBcast(..) => "add_vec_bcast",
            Op::SumAll(..) => "sum",
            Op::MeanAll(..) => "mean",
            Op::SumChannels(..) => "sum_channels",
            Op::Conv { .. } => "conv2d",
            Op::Upsample2x(..) => "nearest_upsample2x",
            Op::Linear { .. } => "linear",
            Op::GroupNorm { .. } => "group_norm",
            Op::Concat(..) => "concat_channels",
            Op::SliceCh { .. } => "slice_channels",
            Op::Gram(..) => "position_gram",
            Op::GatherPositions { .. } => "gather_positions",
        }
    }
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op,
    needs_grad: bool,
}

/// A single forward pass. Nodes are appended in creation order, which is a
/// topological order, so backward is a reverse sweep.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    bound: Vec<(usize, ParamId, NodeId)>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err<T>(op: &str, a: &[usize], b: &[usize]) -> Result<T> {
    bail!(Dimension, "{}: incompatible shapes {:?} and {:?}", op, a, b)
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), bound: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|i| self.nodes[i.0].needs_grad)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn scalar(&self, id: NodeId) -> T {
        self.nodes[id.0].value.data()[0]
    }

    /// Provenance of a node's value.
    pub fn op_tag(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.tag()
    }

    /// `(store tag, parameter)` when `id` is a trainable parameter leaf.
    pub fn param_binding(&self, id: NodeId) -> Option<(usize, ParamId)> {
        match self.nodes[id.0].op {
            Op::Param { tag, id } => Some((tag, id)),
            _ => None,
        }
    }

    /// A constant input.
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// An input whose gradient is wanted (gradient checks, latent probes).
    pub fn input_with_grad(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// A copy of `x` that stops gradients.
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].value.clone();
        self.input(v)
    }

    /// Bind parameter `id` of a store; repeated binds reuse the node.
    pub fn param(&mut self, p: &Bound<'_, T>, id: ParamId) -> NodeId {
        if let Some(&(_, _, n)) = self.bound.iter().find(|(t, i, _)| *t == p.tag && *i == id) {
            return n;
        }
        let v = p.store.get(id).clone();
        let n = if p.trainable { self.push(v, Op::Param { tag: p.tag, id }, true) } else { self.input(v) };
        self.bound.push((p.tag, id, n));
        n
    }

    pub fn unary(&mut self, x: NodeId, kind: Unary) -> NodeId {
        let v = self.nodes[x.0].value.map(|a| unary_forward(kind, a));
        let ng = self.ng(&[x]);
        self.push(v, Op::Unary(x, kind), ng)
    }

    pub fn swish(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Unary::Swish)
    }
    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        self.unary(x, Unary::LeakyRelu(slope))
    }
    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Unary::Relu)
    }
    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Unary::Tanh)
    }
    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Unary::Exp)
    }
    pub fn abs(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Unary::Abs)
    }
    pub fn square(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Unary::Square)
    }
    pub fn sqrt(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Unary::Sqrt)
    }
    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        self.unary(x, Unary::Scale(c))
    }
    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        self.unary(x, Unary::AddScalar(c))
    }
    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        self.unary(x, Unary::Clamp(lo, hi))
    }

    fn binary(&mut self, a: NodeId, b: NodeId, name: &str, f: impl Fn(T, T) -> T, op: Op) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return shape_err(name, va.shape(), vb.shape());
        }
        let v = va.zip_map(vb, f)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, op, ng))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    pub fn mul_bcast_channels(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let (vx, vs) = (&self.nodes[x.0].value, &self.nodes[s.0].value);
        if vx.rank() != 4 || vs.rank() != 4 {
            return shape_err("mul_bcast_channels", vx.shape(), vs.shape());
        }
        let (n, c, h, w) = vx.dims4();
        if vs.shape() != [n, 1, h, w] {
            return shape_err("mul_bcast_channels", vx.shape(), vs.shape());
        }
        let p = h * w;
        let mut out = vx.clone();
        let sd = vs.data();
        for (k, v) in out.data_mut().iter_mut().enumerate() {
            let (b, r) = (k / (c * p), k % p);
            *v *= sd[b * p + r];
        }
        let ng = self.ng(&[x, s]);
        Ok(self.push(out, Op::MulBcastCh(x, s), ng))
    }

    pub fn add_vec_bcast(&mut self, x: NodeId, v: NodeId) -> Result<NodeId> {
        let (vx, vv) = (&self.nodes[x.0].value, &self.nodes[v.0].value);
        if vx.rank() != 4 || vv.shape() != [vx.shape()[0], vx.shape()[1]] {
            return shape_err("add_vec_bcast", vx.shape(), vv.shape());
        }
        let (_, _, h, w) = vx.dims4();
        let p = h * w;
        let mut out = vx.clone();
        let vd = vv.data();
        for (k, o) in out.data_mut().iter_mut().enumerate() {
            *o += vd[k / p];
        }
        let ng = self.ng(&[x, v]);
        Ok(self.push(out, Op::AddVecBcast(x, v), ng))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.nodes[x.0].value.sum());
        let ng = self.ng(&[x]);
        self.push(v, Op::SumAll(x), ng)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.nodes[x.0].value.mean());
        let ng = self.ng(&[x]);
        self.push(v, Op::MeanAll(x), ng)
    }

    /// `(N, C, H, W) -> (N, 1, H, W)`
    pub fn sum_channels(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = &self.nodes[x.0].value;
        if vx.rank() != 4 {
            bail!(Dimension, "sum_channels needs rank 4, got {:?}", vx.shape());
        }
        let (n, c, h, w) = vx.dims4();
        let p = h * w;
        let mut out = vec![T::zero(); n * p];
        for (k, &v) in vx.data().iter().enumerate() {
            let (b, r) = (k / (c * p), k % p);
            out[b * p + r] += v;
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::from_vec(&[n, 1, h, w], out), Op::SumChannels(x), ng))
    }

    /// 2-D convolution; `w` is `(Co, Ci, k, k)` with odd `k` for `Same`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: Padding) -> Result<NodeId> {
        let (vx, vw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        if vx.rank() != 4 || vw.rank() != 4 || vx.shape()[1] != vw.shape()[1] || vw.shape()[2] != vw.shape()[3] {
            return shape_err("conv2d", vx.shape(), vw.shape());
        }
        let (n, ci, h, wd) = vx.dims4();
        let (co, _, k, _) = vw.dims4();
        let p = match pad {
            Padding::Same => k / 2,
            Padding::Valid => 0,
        };
        let Some(geom) = ConvGeom::new(n, ci, h, wd, co, k, stride, p) else {
            return shape_err("conv2d", vx.shape(), vw.shape());
        };
        let bias = match b {
            Some(bid) => {
                let vb = &self.nodes[bid.0].value;
                if vb.shape() != [co] {
                    return shape_err("conv2d bias", vw.shape(), vb.shape());
                }
                Some(vb.data())
            }
            None => None,
        };
        let out = conv::forward(&geom, vx.data(), vw.data(), bias);
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.ng(&deps);
        Ok(self.push(Tensor::from_vec(&[n, co, geom.ho, geom.wo], out), Op::Conv { x, w, b, geom }, ng))
    }

    pub fn upsample2x(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = &self.nodes[x.0].value;
        if vx.rank() != 4 {
            bail!(Dimension, "nearest_upsample2x needs rank 4, got {:?}", vx.shape());
        }
        let (n, c, h, w) = vx.dims4();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); n * c * h2 * w2];
        for pl in 0..n * c {
            for y in 0..h2 {
                for xx in 0..w2 {
                    out[pl * h2 * w2 + y * w2 + xx] = vx.data()[pl * h * w + (y / 2) * w + xx / 2];
                }
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::from_vec(&[n, c, h2, w2], out), Op::Upsample2x(x), ng))
    }

    /// `x: (N, in)`, `w: (out, in)`, `b: (out)`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (vx, vw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        if vx.rank() != 2 || vw.rank() != 2 || vx.shape()[1] != vw.shape()[1] {
            return shape_err("linear", vx.shape(), vw.shape());
        }
        let (n, din) = (vx.shape()[0], vx.shape()[1]);
        let dout = vw.shape()[0];
        let mut out = vec![T::zero(); n * dout];
        for r in 0..n {
            let xr = &vx.data()[r * din..(r + 1) * din];
            for o in 0..dout {
                let wr = &vw.data()[o * din..(o + 1) * din];
                out[r * dout + o] = xr.iter().zip(wr).fold(T::zero(), |a, (&p, &q)| a + p * q);
            }
        }
        if let Some(bid) = b {
            let vb = &self.nodes[bid.0].value;
            if vb.shape() != [dout] {
                return shape_err("linear bias", vw.shape(), vb.shape());
            }
            for r in 0..n {
                for o in 0..dout {
                    out[r * dout + o] += vb.data()[o];
                }
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.ng(&deps);
        Ok(self.push(Tensor::from_vec(&[n, dout], out), Op::Linear { x, w, b }, ng))
    }

    /// Group normalization over `(C / groups, H, W)` per sample and group,
    /// followed by a per-channel affine map.
    pub fn group_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, groups: usize, eps: f64) -> Result<NodeId> {
        let vx = &self.nodes[x.0].value;
        if vx.rank() != 4 {
            bail!(Dimension, "group_norm needs rank 4, got {:?}", vx.shape());
        }
        let (n, c, h, w) = vx.dims4();
        let (vg, vb) = (&self.nodes[gamma.0].value, &self.nodes[beta.0].value);
        if groups == 0 || c % groups != 0 || vg.shape() != [c] || vb.shape() != [c] {
            return shape_err("group_norm", vx.shape(), vg.shape());
        }
        let per = (c / groups) * h * w;
        let mut xhat = vec![0.0f64; vx.len()];
        let mut inv_std = vec![0.0f64; n * groups];
        let mut out = vec![T::zero(); vx.len()];
        for b in 0..n {
            for gi in 0..groups {
                let off = (b * c + gi * (c / groups)) * h * w;
                let seg = &vx.data()[off..off + per];
                let mean = seg.iter().map(|v| v.as_f64()).sum::<f64>() / per as f64;
                let var = seg.iter().map(|v| { let d = v.as_f64() - mean; d * d }).sum::<f64>() / per as f64;
                let inv = 1.0 / libm::sqrt(var + eps);
                inv_std[b * groups + gi] = inv;
                for (j, v) in seg.iter().enumerate() {
                    let xh = (v.as_f64() - mean) * inv;
                    let ch = gi * (c / groups) + j / (h * w);
                    xhat[off + j] = xh;
                    out[off + j] = T::of(xh) * vg.data()[ch] + vb.data()[ch];
                }
            }
        }
        let ng = self.ng(&[x, gamma, beta]);
        Ok(self.push(Tensor::from_vec(&[n, c, h, w], out), Op::GroupNorm { x, gamma, beta, groups, xhat, inv_std }, ng))
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = Tensor::concat_channels(&self.nodes[a.0].value, &self.nodes[b.0].value)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::Concat(a, b), ng))
    }

    pub fn slice_channels(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let v = self.nodes[x.0].value.slice_channels(start, len)?;
        let ng = self.ng(&[x]);
        Ok(self.push(v, Op::SliceCh { x, start }, ng))
    }

    /// `(N, C, H, W) -> (N, P, P)` with `P = H W`: inner products between
    /// the channel vectors at every pair of positions.
    pub fn position_gram(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = &self.nodes[x.0].value;
        if vx.rank() != 4 {
            bail!(Dimension, "position_gram needs rank 4, got {:?}", vx.shape());
        }
        let (n, c, h, w) = vx.dims4();
        let p = h * w;
        let d = vx.data();
        let mut out = vec![T::zero(); n * p * p];
        for b in 0..n {
            for i in 0..p {
                for j in 0..p {
                    let mut acc = T::zero();
                    for ch in 0..c {
                        acc += d[(b * c + ch) * p + i] * d[(b * c + ch) * p + j];
                    }
                    out[(b * p + i) * p + j] = acc;
                }
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::from_vec(&[n, p, p], out), Op::Gram(x), ng))
    }

    /// Keep positions `idx` (flattened `y * W + x`) as `(N, C, 1, K)`.
    pub fn gather_positions(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId> {
        let vx = &self.nodes[x.0].value;
        if vx.rank() != 4 {
            bail!(Dimension, "gather_positions needs rank 4, got {:?}", vx.shape());
        }
        let (n, c, h, w) = vx.dims4();
        let p = h * w;
        if let Some(&bad) = idx.iter().find(|&&i| i >= p) {
            bail!(Dimension, "position {} out of range for {:?}", bad, vx.shape());
        }
        let mut out = Vec::with_capacity(n * c * idx.len());
        for pl in 0..n * c {
            for &i in idx {
                out.push(vx.data()[pl * p + i]);
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::from_vec(&[n, c, 1, idx.len()], out), Op::GatherPositions { x, idx: idx.to_vec() }, ng))
    }

    /// Mean squared error.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let d = self.sub(a, b)?;
        let s = self.square(d);
        Ok(self.mean(s))
    }

    /// Mean absolute error.
    pub fn l1(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let d = self.sub(a, b)?;
        let s = self.abs(d);
        Ok(self.mean(s))
    }

    /// Reverse sweep from `loss`, seeded with ones.
    pub fn backward(&self, loss: NodeId) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), T::one()));
        for id in (0..=loss.0).rev() {
            let Some(gout) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.needs_grad {
                self.propagate(node, &gout, &mut grads);
            }
            grads[id] = Some(gout);
        }
        Gradients { grads, bound: self.bound.clone() }
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let val = |n: NodeId| &self.nodes[n.0].value;
        let acc = |n: NodeId, t: Tensor<T>, grads: &mut [Option<Tensor<T>>]| {
            if !self.nodes[n.0].needs_grad {
                return;
            }
            match grads[n.0].as_mut() {
                Some(e) => e.add_assign(&t),
                None => grads[n.0] = Some(t),
            }
        };
        match &node.op {
            Op::Leaf | Op::Param { .. } => {}
            Op::Unary(x, kind) => {
                let xv = val(*x);
                let data: Vec<T> = xv.data().iter().zip(node.value.data()).zip(g.data()).map(|((&a, &y), &gv)| gv * unary_deriv(*kind, a, y)).collect();
                acc(*x, Tensor::from_vec(xv.shape(), data), grads);
            }
            Op::Add(a, b) => {
                acc(*a, g.clone(), grads);
                acc(*b, g.clone(), grads);
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone(), grads);
                acc(*b, g.map(|v| -v), grads);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, g.zip_map(vb, |gv, y| gv * y).unwrap(), grads);
                acc(*b, g.zip_map(va, |gv, x| gv * x).unwrap(), grads);
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, g.zip_map(vb, |gv, y| gv / y).unwrap(), grads);
                let gb: Vec<T> = g.data().iter().zip(va.data()).zip(vb.data()).map(|((&gv, &x), &y)| -gv * x / (y * y)).collect();
                acc(*b, Tensor::from_vec(vb.shape(), gb), grads);
            }
            Op::MulBcastCh(x, s) => {
                let (vx, vs) = (val(*x), val(*s));
                let (_, c, h, w) = vx.dims4();
                let p = h * w;
                let mut gx = g.clone();
                let mut gs = vec![T::zero(); vs.len()];
                for (k, gv) in gx.data_mut().iter_mut().enumerate() {
                    let si = (k / (c * p)) * p + k % p;
                    gs[si] += *gv * vx.data()[k];
                    *gv *= vs.data()[si];
                }
                acc(*x, gx, grads);
                acc(*s, Tensor::from_vec(vs.shape(), gs), grads);
            }
            Op::AddVecBcast(x, v) => {
                let vv = val(*v);
                let (_, _, h, w) = g.dims4();
                let p = h * w;
                let mut gv = vec![T::zero(); vv.len()];
                for (k, &gg) in g.data().iter().enumerate() {
                    gv[k / p] += gg;
                }
                acc(*x, g.clone(), grads);
                acc(*v, Tensor::from_vec(vv.shape(), gv), grads);
            }
            Op::SumAll(x) => {
                acc(*x, Tensor::full(val(*x).shape(), g.data()[0]), grads);
            }
            Op::MeanAll(x) => {
                let xv = val(*x);
                acc(*x, Tensor::full(xv.shape(), g.data()[0] / T::of(xv.len() as f64)), grads);
            }
            Op::SumChannels(x) => {
                let xv = val(*x);
                let (_, c, h, w) = xv.dims4();
                let p = h * w;
                let data: Vec<T> = (0..xv.len()).map(|k| g.data()[(k / (c * p)) * p + k % p]).collect();
                acc(*x, Tensor::from_vec(xv.shape(), data), grads);
            }
            Op::Conv { x, w, b, geom } => {
                let (vx, vw) = (val(*x), val(*w));
                let need_x = self.nodes[x.0].needs_grad;
                let need_w = self.nodes[w.0].needs_grad;
                let (gx, gw, gb) = conv::backward(geom, vx.data(), vw.data(), g.data(), need_x, need_w);
                if need_x {
                    acc(*x, Tensor::from_vec(vx.shape(), gx), grads);
                }
                if need_w {
                    acc(*w, Tensor::from_vec(vw.shape(), gw), grads);
                }
                if let Some(b) = b {
                    acc(*b, Tensor::from_vec(&[geom.co], gb), grads);
                }
            }
            Op::Upsample2x(x) => {
                let xv = val(*x);
                let (n, c, h, w) = xv.dims4();
                let w2 = 2 * w;
                let mut gx = vec![T::zero(); xv.len()];
                for pl in 0..n * c {
                    for y in 0..2 * h {
                        for xx in 0..w2 {
                            gx[pl * h * w + (y / 2) * w + xx / 2] += g.data()[pl * 4 * h * w + y * w2 + xx];
                        }
                    }
                }
                acc(*x, Tensor::from_vec(xv.shape(), gx), grads);
            }
            Op::Linear { x, w, b } => {
                let (vx, vw) = (val(*x), val(*w));
                let (n, din) = (vx.shape()[0], vx.shape()[1]);
                let dout = vw.shape()[0];
                let mut gx = vec![T::zero(); vx.len()];
                let mut gw = vec![T::zero(); vw.len()];
                let mut gb = vec![T::zero(); dout];
                for r in 0..n {
                    for o in 0..dout {
                        let gv = g.data()[r * dout + o];
                        gb[o] += gv;
                        for i in 0..din {
                            gx[r * din + i] += gv * vw.data()[o * din + i];
                            gw[o * din + i] += gv * vx.data()[r * din + i];
                        }
                    }
                }
                acc(*x, Tensor::from_vec(vx.shape(), gx), grads);
                acc(*w, Tensor::from_vec(vw.shape(), gw), grads);
                if let Some(b) = b {
                    acc(*b, Tensor::from_vec(&[dout], gb), grads);
                }
            }
            Op::GroupNorm { x, gamma, beta, groups, xhat, inv_std } => {
                let xv = val(*x);
                let vg = val(*gamma);
                let (n, c, h, w) = xv.dims4();
                let cg = c / groups;
                let per = cg * h * w;
                let mut gx = vec![T::zero(); xv.len()];
                let mut ggam = vec![0.0f64; c];
                let mut gbet = vec![0.0f64; c];
                for b in 0..n {
                    for gi in 0..*groups {
                        let off = (b * c + gi * cg) * h * w;
                        let inv = inv_std[b * groups + gi];
                        let (mut s1, mut s2) = (0.0f64, 0.0f64);
                        for j in 0..per {
                            let ch = gi * cg + j / (h * w);
                            let gv = g.data()[off + j].as_f64();
                            let dxh = gv * vg.data()[ch].as_f64();
                            s1 += dxh;
                            s2 += dxh * xhat[off + j];
                            ggam[ch] += gv * xhat[off + j];
                            gbet[ch] += gv;
                        }
                        let m = per as f64;
                        for j in 0..per {
                            let ch = gi * cg + j / (h * w);
                            let dxh = g.data()[off + j].as_f64() * vg.data()[ch].as_f64();
                            gx[off + j] = T::of(inv / m * (m * dxh - s1 - xhat[off + j] * s2));
                        }
                    }
                }
                acc(*x, Tensor::from_vec(xv.shape(), gx), grads);
                acc(*gamma, Tensor::from_vec(&[c], ggam.into_iter().map(T::of).collect()), grads);
                acc(*beta, Tensor::from_vec(&[c], gbet.into_iter().map(T::of).collect()), grads);
            }
            Op::Concat(a, b) => {
                let ca = val(*a).shape()[1];
                let cb = val(*b).shape()[1];
                acc(*a, g.slice_channels(0, ca).unwrap(), grads);
                acc(*b, g.slice_channels(ca, cb).unwrap(), grads);
            }
            Op::SliceCh { x, start } => {
                let xv = val(*x);
                let (n, c, h, w) = xv.dims4();
                let len = g.shape()[1];
                let p = h * w;
                let mut gx = vec![T::zero(); xv.len()];
                for b in 0..n {
                    let dst = (b * c + start) * p;
                    let src = b * len * p;
                    gx[dst..dst + len * p].copy_from_slice(&g.data()[src..src + len * p]);
                }
                acc(*x, Tensor::from_vec(xv.shape(), gx), grads);
            }
            Op::Gram(x) => {
                let xv = val(*x);
                let (n, c, h, w) = xv.dims4();
                let p = h * w;
                let d = xv.data();
                let gd = g.data();
                let mut gx = vec![T::zero(); xv.len()];
                for b in 0..n {
                    for i in 0..p {
                        for j in 0..p {
                            let s = gd[(b * p + i) * p + j] + gd[(b * p + j) * p + i];
                            for ch in 0..c {
                                gx[(b * c + ch) * p + i] += s * d[(b * c + ch) * p + j];
                            }
                        }
                    }
                }
                acc(*x, Tensor::from_vec(xv.shape(), gx), grads);
            }
            Op::GatherPositions { x, idx } => {
                let xv = val(*x);
                let (n, c, h, w) = xv.dims4();
                let p = h * w;
                let k = idx.len();
                let mut gx = vec![T::zero(); xv.len()];
                for pl in 0..n * c {
                    for (j, &i) in idx.iter().enumerate() {
                        gx[pl * p + i] += g.data()[pl * k + j];
                    }
                }
                acc(*x, Tensor::from_vec(xv.shape(), gx), grads);
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

fn unary_forward<T: Real>(kind: Unary, a: T) -> T {
    match kind {
        Unary::Swish => a * T::of(sigmoid(a.as_f64())),
        Unary::LeakyRelu(s) => {
            if a > T::zero() {
                a
            } else {
                a * T::of(s)
            }
        }
        Unary::Relu => a.max(T::zero()),
        Unary::Tanh => a.tanh(),
        Unary::Exp => a.exp(),
        Unary::Abs => a.abs(),
        Unary::Square => a * a,
        Unary::Sqrt => a.sqrt(),
        Unary::Scale(c) => a * T::of(c),
        Unary::AddScalar(c) => a + T::of(c),
        Unary::Clamp(lo, hi) => a.max(T::of(lo)).min(T::of(hi)),
    }
}

fn unary_deriv<T: Real>(kind: Unary, a: T, y: T) -> T {
    match kind {
        Unary::Swish => {
            let s = sigmoid(a.as_f64());
            T::of(s + a.as_f64() * s * (1.0 - s))
        }
        Unary::LeakyRelu(s) => {
            if a > T::zero() {
                T::one()
            } else {
                T::of(s)
            }
        }
        Unary::Relu => {
            if a > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
        Unary::Tanh => T::one() - y * y,
        Unary::Exp => y,
        Unary::Abs => {
            if a > T::zero() {
                T::one()
            } else if a < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        }
        Unary::Square => T::of(2.0) * a,
        Unary::Sqrt => T::of(0.5) / y,
        Unary::Scale(c) => T::of(c),
        Unary::AddScalar(_) => T::one(),
        Unary::Clamp(lo, hi) => {
            if a >= T::of(lo) && a <= T::of(hi) {
                T::one()
            } else {
                T::zero()
            }
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
    bound: Vec<(usize, ParamId, NodeId)>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }

    /// Gradient for every parameter of the store bound under `tag`, zeros
    /// for parameters that did not take part in the pass.
    pub fn for_store(&self, tag: usize, store: &super::ParamStore<T>) -> Vec<Tensor<T>> {
        store
            .ids()
            .map(|pid| {
                self.bound
                    .iter()
                    .find(|(t, i, _)| *t == tag && *i == pid)
                    .and_then(|(_, _, n)| self.grads[n.0].clone())
                    .unwrap_or_else(|| Tensor::zeros(store.get(pid).shape()))
            })
            .collect()
    }
}
