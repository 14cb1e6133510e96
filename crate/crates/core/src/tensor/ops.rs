//! Primitive differentiable operations.
//!
//! Every forward rule lives on [`Var`]; the matching reverse rule is a branch
//! of [`backward_node`]. Reductions accumulate in `f64`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::array::Tensor;
use crate::tensor::kernels::{col2im, corner, gemm_acc, im2col, split_axis, transpose, AxisPlan, ConvGeom};
use crate::tensor::tape::{Node, NodeId, Var};

const GN_EPS: f64 = 1e-5;
const GELU_A: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_B: f64 = 0.044_715;

pub(crate) enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Broadcast {
        x: NodeId,
        b: NodeId,
        mul: bool,
        outer: usize,
        n: usize,
        inner: usize,
    },
    Matmul {
        a: NodeId,
        b: NodeId,
        m: usize,
        k: usize,
        n: usize,
        a_idx: Vec<usize>,
        b_idx: Vec<usize>,
    },
    TransposeLast2 {
        x: NodeId,
        outer: usize,
        m: usize,
        n: usize,
    },
    Reshape(NodeId),
    Concat {
        parts: Vec<(NodeId, usize)>,
        outer: usize,
        inner: usize,
    },
    Slice {
        x: NodeId,
        outer: usize,
        axis_len: usize,
        start: usize,
        len: usize,
        inner: usize,
    },
    Softmax {
        x: NodeId,
        outer: usize,
        n: usize,
        inner: usize,
    },
    Tanh(NodeId),
    Gelu(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Bilinear {
        feat: NodeId,
        points: NodeId,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        geom: ConvGeom,
        cout: usize,
    },
    GroupNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    Resize {
        x: NodeId,
        c: usize,
        ry: AxisPlan,
        rx: AxisPlan,
    },
    AvgPool {
        x: NodeId,
        k: usize,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
    },
}

fn f64s<T: Scalar>(t: &Tensor<T>) -> Vec<f64> {
    t.to_f64()
}

fn from_f64s<T: Scalar>(shape: &[usize], v: Vec<f64>) -> Result<Tensor<T>> {
    Tensor::new(shape, v.into_iter().map(T::c).collect())
}

fn same_tape<T>(a: &Var<'_, T>, b: &Var<'_, T>) {
    assert!(std::ptr::eq(a.tape, b.tape), "operands recorded on different tapes");
}

fn resolve_axis(axis: isize, ndim: usize) -> Result<usize> {
    let a = if axis < 0 { axis + ndim as isize } else { axis };
    if a < 0 || a as usize >= ndim {
        return Err(Error::input(format!("axis {axis} out of range for rank {ndim}")));
    }
    Ok(a as usize)
}

impl<'t, T: Scalar> Var<'t, T> {
    fn binary(self, other: Var<'t, T>, name: &'static str, op: Op, f: fn(f64, f64) -> f64) -> Result<Self> {
        same_tape(&self, &other);
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            if a.shape() != b.shape() {
                return Err(Error::shape(name, a.shape(), b.shape()));
            }
            let data = a.data().iter().zip(b.data()).map(|(x, y)| T::c(f(x.real(), y.real()))).collect();
            Tensor::new(a.shape(), data)?
        };
        self.tape.push(name, value, op, &[self.id, other.id])
    }

    #[allow(clippy::should_implement_trait)]
    pub fn add(self, other: Var<'t, T>) -> Result<Self> {
        self.binary(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn sub(self, other: Var<'t, T>) -> Result<Self> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn mul(self, other: Var<'t, T>) -> Result<Self> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn scale(self, c: f64) -> Result<Self> {
        let value = self.value_ref().map(|v| T::c(v.real() * c));
        self.tape.push("scale", value, Op::Scale(self.id, c), &[self.id])
    }

    fn broadcast(self, b: Var<'t, T>, axis: isize, mul: bool) -> Result<Self> {
        same_tape(&self, &b);
        let name = if mul { "broadcast_mul" } else { "broadcast_add" };
        let (value, outer, n, inner) = {
            let nodes = self.tape.nodes.borrow();
            let (x, bv) = (&nodes[self.id].value, &nodes[b.id].value);
            let ax = resolve_axis(axis, x.ndim())?;
            let (outer, n, inner) = split_axis(x.shape(), ax);
            if bv.len() != n {
                return Err(Error::shape(name, x.shape(), bv.shape()));
            }
            let xd = x.data();
            let bd = bv.data();
            let mut out = Vec::with_capacity(xd.len());
            for o in 0..outer {
                for (j, &bj) in bd.iter().enumerate() {
                    let base = (o * n + j) * inner;
                    for &xv in &xd[base..base + inner] {
                        out.push(if mul { xv * bj } else { xv + bj });
                    }
                }
            }
            (Tensor::new(x.shape(), out)?, outer, n, inner)
        };
        let op = Op::Broadcast {
            x: self.id,
            b: b.id,
            mul,
            outer,
            n,
            inner,
        };
        self.tape.push(name, value, op, &[self.id, b.id])
    }

    /// `x + b` with `b` a vector spanning `axis` of `x`.
    pub fn add_along(self, b: Var<'t, T>, axis: isize) -> Result<Self> {
        self.broadcast(b, axis, false)
    }

    /// `x * b` with `b` a vector spanning `axis` of `x`.
    pub fn mul_along(self, b: Var<'t, T>, axis: isize) -> Result<Self> {
        self.broadcast(b, axis, true)
    }

    /// Batched matrix product `[.., M, K] × [.., K, N]` with numpy-style
    /// broadcasting of the leading dimensions.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Self> {
        same_tape(&self, &other);
        let (value, m, k, n, a_idx, b_idx) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            let (sa, sb) = (a.shape(), b.shape());
            if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
                return Err(Error::shape("matmul", sa, sb));
            }
            let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
            let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
            let nb = ba.len().max(bb.len());
            let mut batch = vec![0; nb];
            for i in 0..nb {
                let da = if i + ba.len() >= nb { ba[i + ba.len() - nb] } else { 1 };
                let db = if i + bb.len() >= nb { bb[i + bb.len() - nb] } else { 1 };
                batch[i] = match (da, db) {
                    (x, y) if x == y => x,
                    (1, y) => y,
                    (x, 1) => x,
                    _ => return Err(Error::shape("matmul", sa, sb)),
                };
            }
            let total: usize = batch.iter().product();
            let map = |dims: &[usize]| -> Vec<usize> {
                (0..total)
                    .map(|flat| {
                        let mut rem = flat;
                        let mut idx = 0;
                        let mut stride = 1;
                        for i in (0..nb).rev() {
                            let coord = rem % batch[i];
                            rem /= batch[i];
                            if i + dims.len() >= nb {
                                let d = dims[i + dims.len() - nb];
                                if d != 1 {
                                    idx += coord * stride;
                                }
                                stride *= d;
                            }
                        }
                        idx
                    })
                    .collect()
            };
            let a_idx = map(ba);
            let b_idx = map(bb);
            let ad = f64s(a);
            let bd = f64s(b);
            let mut out = vec![0.0; total * m * n];
            for (bi, (&ia, &ib)) in a_idx.iter().zip(&b_idx).enumerate() {
                gemm_acc(
                    &ad[ia * m * k..(ia + 1) * m * k],
                    &bd[ib * k * n..(ib + 1) * k * n],
                    m,
                    k,
                    n,
                    &mut out[bi * m * n..(bi + 1) * m * n],
                );
            }
            let mut shape = batch;
            shape.extend([m, n]);
            (from_f64s(&shape, out)?, m, k, n, a_idx, b_idx)
        };
        let op = Op::Matmul {
            a: self.id,
            b: other.id,
            m,
            k,
            n,
            a_idx,
            b_idx,
        };
        self.tape.push("matmul", value, op, &[self.id, other.id])
    }

    /// Swap the last two axes.
    pub fn transpose(self) -> Result<Self> {
        let (value, outer, m, n) = {
            let x = self.value_ref();
            let s = x.shape();
            if s.len() < 2 {
                return Err(Error::shape("transpose", s, &[]));
            }
            let (m, n) = (s[s.len() - 2], s[s.len() - 1]);
            let outer = x.len() / (m * n);
            let xd = x.data();
            let mut out = Vec::with_capacity(x.len());
            for o in 0..outer {
                let blk = &xd[o * m * n..(o + 1) * m * n];
                for j in 0..n {
                    for i in 0..m {
                        out.push(blk[i * n + j]);
                    }
                }
            }
            let mut shape = s.to_vec();
            let r = shape.len();
            shape.swap(r - 1, r - 2);
            (Tensor::new(&shape, out)?, outer, m, n)
        };
        let op = Op::TransposeLast2 { x: self.id, outer, m, n };
        self.tape.push("transpose", value, op, &[self.id])
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let value = self.value().reshape(shape)?;
        self.tape.push("reshape", value, Op::Reshape(self.id), &[self.id])
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t, T>], axis: isize) -> Result<Self> {
        let first = *parts.first().ok_or_else(|| Error::input("concat of zero tensors"))?;
        let (value, meta, outer, inner) = {
            let nodes = first.tape.nodes.borrow();
            let s0 = nodes[first.id].value.shape().to_vec();
            let ax = resolve_axis(axis, s0.len())?;
            let (outer, _, inner) = split_axis(&s0, ax);
            let mut meta = Vec::with_capacity(parts.len());
            let mut total = 0;
            for p in parts {
                same_tape(&first, p);
                let s = nodes[p.id].value.shape();
                let ok = s.len() == s0.len() && s.iter().zip(&s0).enumerate().all(|(i, (a, b))| i == ax || a == b);
                if !ok {
                    return Err(Error::shape("concat", &s0, s));
                }
                meta.push((p.id, s[ax]));
                total += s[ax];
            }
            let mut out = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for &(id, len) in &meta {
                    let d = nodes[id].value.data();
                    out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
                }
            }
            let mut shape = s0.clone();
            shape[ax] = total;
            (Tensor::new(&shape, out)?, meta, outer, inner)
        };
        let ids: Vec<NodeId> = meta.iter().map(|m| m.0).collect();
        let op = Op::Concat { parts: meta, outer, inner };
        first.tape.push("concat", value, op, &ids)
    }

    /// Contiguous sub-range `[start, start+len)` along `axis`.
    pub fn slice(self, axis: isize, start: usize, len: usize) -> Result<Self> {
        let (value, outer, axis_len, inner) = {
            let x = self.value_ref();
            let ax = resolve_axis(axis, x.ndim())?;
            let (outer, axis_len, inner) = split_axis(x.shape(), ax);
            if len == 0 || start + len > axis_len {
                return Err(Error::shape("slice", x.shape(), &[start, len]));
            }
            let xd = x.data();
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * axis_len + start) * inner;
                out.extend_from_slice(&xd[base..base + len * inner]);
            }
            let mut shape = x.shape().to_vec();
            shape[ax] = len;
            (Tensor::new(&shape, out)?, outer, axis_len, inner)
        };
        let op = Op::Slice {
            x: self.id,
            outer,
            axis_len,
            start,
            len,
            inner,
        };
        self.tape.push("slice", value, op, &[self.id])
    }

    pub fn softmax(self, axis: isize) -> Result<Self> {
        let (value, outer, n, inner) = {
            let x = self.value_ref();
            let ax = resolve_axis(axis, x.ndim())?;
            let (outer, n, inner) = split_axis(x.shape(), ax);
            let xd = x.data();
            let mut out = vec![T::zero(); xd.len()];
            let mut buf = vec![0.0f64; n];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * n + j) * inner + i;
                    let mx = (0..n).map(|j| xd[at(j)].real()).fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for (j, b) in buf.iter_mut().enumerate() {
                        *b = (xd[at(j)].real() - mx).exp();
                        sum += *b;
                    }
                    for (j, b) in buf.iter().enumerate() {
                        out[at(j)] = T::c(b / sum);
                    }
                }
            }
            (Tensor::new(x.shape(), out)?, outer, n, inner)
        };
        let op = Op::Softmax {
            x: self.id,
            outer,
            n,
            inner,
        };
        self.tape.push("softmax", value, op, &[self.id])
    }

    pub fn tanh(self) -> Result<Self> {
        let value = self.value_ref().map(|v| T::c(v.real().tanh()));
        self.tape.push("tanh", value, Op::Tanh(self.id), &[self.id])
    }

    /// Gaussian error linear unit, tanh approximation.
    pub fn gelu(self) -> Result<Self> {
        let value = self.value_ref().map(|v| {
            let x = v.real();
            T::c(0.5 * x * (1.0 + (GELU_A * (x + GELU_B * x * x * x)).tanh()))
        });
        self.tape.push("gelu", value, Op::Gelu(self.id), &[self.id])
    }

    pub fn sum(self) -> Result<Self> {
        let s: f64 = self.value_ref().data().iter().map(|v| v.real()).sum();
        self.tape.push("sum", Tensor::scalar(T::c(s)), Op::Sum(self.id), &[self.id])
    }

    pub fn mean(self) -> Result<Self> {
        let x = self.value_ref();
        let s: f64 = x.data().iter().map(|v| v.real()).sum::<f64>() / x.len() as f64;
        drop(x);
        self.tape.push("mean", Tensor::scalar(T::c(s)), Op::Mean(self.id), &[self.id])
    }

    /// Sample a `[C, H, W]` map at fractional `[P, 2]` points given as
    /// `(row, col)` in pixels of the map. Points are clamped to the grid.
    pub fn bilinear_sample(self, points: Var<'t, T>) -> Result<Self> {
        same_tape(&self, &points);
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (f, p) = (&nodes[self.id].value, &nodes[points.id].value);
            let fs = f.shape();
            let ps = p.shape();
            if fs.len() != 3 || ps.len() != 2 || ps[1] != 2 {
                return Err(Error::shape("bilinear_sample", fs, ps));
            }
            if !p.is_finite() {
                return Err(Error::input("bilinear_sample: non-finite coordinates"));
            }
            let (c, h, w) = (fs[0], fs[1], fs[2]);
            let np = ps[0];
            let fd = f.data();
            let pd = p.data();
            let mut out = Vec::with_capacity(np * c);
            for q in 0..np {
                let cr = corner(pd[2 * q].real(), pd[2 * q + 1].real(), h, w);
                let (w00, w01) = ((1.0 - cr.fy) * (1.0 - cr.fx), (1.0 - cr.fy) * cr.fx);
                let (w10, w11) = (cr.fy * (1.0 - cr.fx), cr.fy * cr.fx);
                for ch in 0..c {
                    let pl = &fd[ch * h * w..(ch + 1) * h * w];
                    let v = w00 * pl[cr.y0 * w + cr.x0].real()
                        + w01 * pl[cr.y0 * w + cr.x1].real()
                        + w10 * pl[cr.y1 * w + cr.x0].real()
                        + w11 * pl[cr.y1 * w + cr.x1].real();
                    out.push(T::c(v));
                }
            }
            Tensor::new(&[np, c], out)?
        };
        let op = Op::Bilinear {
            feat: self.id,
            points: points.id,
        };
        self.tape.push("bilinear_sample", value, op, &[self.id, points.id])
    }

    /// 2-D convolution of a `[Cin, H, W]` map with `[Cout, Cin, kh, kw]`
    /// weights, symmetric zero padding.
    pub fn conv2d(self, weight: Var<'t, T>, bias: Option<Var<'t, T>>, stride: usize, pad: usize) -> Result<Self> {
        same_tape(&self, &weight);
        let (value, geom, cout) = {
            let nodes = self.tape.nodes.borrow();
            let (x, wt) = (&nodes[self.id].value, &nodes[weight.id].value);
            let (xs, ws) = (x.shape(), wt.shape());
            if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] || stride == 0 {
                return Err(Error::shape("conv2d", xs, ws));
            }
            let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
            if xs[1] + 2 * pad < kh || xs[2] + 2 * pad < kw {
                return Err(Error::shape("conv2d", xs, ws));
            }
            let geom = ConvGeom {
                cin: xs[0],
                h: xs[1],
                w: xs[2],
                kh,
                kw,
                stride,
                pad,
                ho: (xs[1] + 2 * pad - kh) / stride + 1,
                wo: (xs[2] + 2 * pad - kw) / stride + 1,
            };
            let cols = im2col(&f64s(x), &geom);
            let mut out = vec![0.0; cout * geom.cols()];
            gemm_acc(&f64s(wt), &cols, cout, geom.rows(), geom.cols(), &mut out);
            if let Some(b) = bias {
                let bv = &nodes[b.id].value;
                if bv.len() != cout {
                    return Err(Error::shape("conv2d bias", bv.shape(), &[cout]));
                }
                for (co, bval) in bv.data().iter().enumerate() {
                    for o in &mut out[co * geom.cols()..(co + 1) * geom.cols()] {
                        *o += bval.real();
                    }
                }
            }
            (from_f64s(&[cout, geom.ho, geom.wo], out)?, geom, cout)
        };
        let op = Op::Conv2d {
            x: self.id,
            w: weight.id,
            b: bias.map(|b| b.id),
            geom,
            cout,
        };
        let mut parents = vec![self.id, weight.id];
        parents.extend(bias.map(|b| b.id));
        self.tape.push("conv2d", value, op, &parents)
    }

    /// Group normalisation of a `[C, H, W]` map with per-channel affine.
    pub fn group_norm(self, gamma: Var<'t, T>, beta: Var<'t, T>, groups: usize) -> Result<Self> {
        let (value, mean, rstd) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let (g, b) = (&nodes[gamma.id].value, &nodes[beta.id].value);
            let xs = x.shape();
            if xs.len() != 3 || groups == 0 || !xs[0].is_multiple_of(groups) || g.len() != xs[0] || b.len() != xs[0] {
                return Err(Error::shape("group_norm", xs, g.shape()));
            }
            let hw = xs[1] * xs[2];
            let per = xs[0] / groups * hw;
            let xd = f64s(x);
            let (gd, bd) = (f64s(g), f64s(b));
            let mut mean = Vec::with_capacity(groups);
            let mut rstd = Vec::with_capacity(groups);
            let mut out = vec![0.0; xd.len()];
            for gi in 0..groups {
                let blk = &xd[gi * per..(gi + 1) * per];
                let mu = blk.iter().sum::<f64>() / per as f64;
                let var = blk.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / per as f64;
                let rs = 1.0 / (var + GN_EPS).sqrt();
                mean.push(mu);
                rstd.push(rs);
                for (i, v) in blk.iter().enumerate() {
                    let ch = (gi * per + i) / hw;
                    out[gi * per + i] = (v - mu) * rs * gd[ch] + bd[ch];
                }
            }
            (from_f64s(xs, out)?, mean, rstd)
        };
        let op = Op::GroupNorm {
            x: self.id,
            gamma: gamma.id,
            beta: beta.id,
            groups,
            mean,
            rstd,
        };
        self.tape.push("group_norm", value, op, &[self.id, gamma.id, beta.id])
    }

    /// Bilinear resize of a `[C, H, W]` map with half-pixel centres.
    pub fn resize(self, out_h: usize, out_w: usize) -> Result<Self> {
        let (value, c, ry, rx) = {
            let x = self.value_ref();
            let s = x.shape();
            if s.len() != 3 || out_h == 0 || out_w == 0 {
                return Err(Error::shape("resize", s, &[out_h, out_w]));
            }
            let (c, h, w) = (s[0], s[1], s[2]);
            let ry = AxisPlan::new(h, out_h);
            let rx = AxisPlan::new(w, out_w);
            let xd = x.data();
            let mut out = Vec::with_capacity(c * out_h * out_w);
            for ch in 0..c {
                let pl = &xd[ch * h * w..(ch + 1) * h * w];
                for oy in 0..out_h {
                    let (y0, y1, fy) = (ry.lo[oy], ry.hi[oy], ry.frac[oy]);
                    for ox in 0..out_w {
                        let (x0, x1, fx) = (rx.lo[ox], rx.hi[ox], rx.frac[ox]);
                        let top = (1.0 - fx) * pl[y0 * w + x0].real() + fx * pl[y0 * w + x1].real();
                        let bot = (1.0 - fx) * pl[y1 * w + x0].real() + fx * pl[y1 * w + x1].real();
                        out.push(T::c((1.0 - fy) * top + fy * bot));
                    }
                }
            }
            (Tensor::new(&[c, out_h, out_w], out)?, c, ry, rx)
        };
        let op = Op::Resize { x: self.id, c, ry, rx };
        self.tape.push("resize", value, op, &[self.id])
    }

    /// Non-overlapping `k × k` average pooling of a `[C, H, W]` map.
    pub fn avg_pool(self, k: usize) -> Result<Self> {
        let value = {
            let x = self.value_ref();
            let s = x.shape();
            if s.len() != 3 || k == 0 || !s[1].is_multiple_of(k) || !s[2].is_multiple_of(k) {
                return Err(Error::shape("avg_pool", s, &[k, k]));
            }
            let (c, h, w) = (s[0], s[1], s[2]);
            let (ho, wo) = (h / k, w / k);
            let xd = x.data();
            let norm = 1.0 / (k * k) as f64;
            let mut out = Vec::with_capacity(c * ho * wo);
            for ch in 0..c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for dy in 0..k {
                            let row = ch * h * w + (oy * k + dy) * w + ox * k;
                            acc += xd[row..row + k].iter().map(|v| v.real()).sum::<f64>();
                        }
                        out.push(T::c(acc * norm));
                    }
                }
            }
            Tensor::new(&[c, ho, wo], out)?
        };
        self.tape.push("avg_pool", value, Op::AvgPool { x: self.id, k }, &[self.id])
    }

    /// Mean negative log-likelihood of integer `targets` under row-wise
    /// softmax of `[N, K]` logits.
    pub fn cross_entropy(self, targets: &[usize]) -> Result<Self> {
        let value = {
            let x = self.value_ref();
            let s = x.shape();
            if s.len() != 2 || s[0] != targets.len() {
                return Err(Error::shape("cross_entropy", s, &[targets.len()]));
            }
            let k = s[1];
            if let Some(&t) = targets.iter().find(|&&t| t >= k) {
                return Err(Error::input(format!("cross_entropy target {t} >= {k} classes")));
            }
            let xd = x.data();
            let mut total = 0.0;
            for (r, &t) in targets.iter().enumerate() {
                let row = &xd[r * k..(r + 1) * k];
                let mx = row.iter().map(|v| v.real()).fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + row.iter().map(|v| (v.real() - mx).exp()).sum::<f64>().ln();
                total += lse - row[t].real();
            }
            Tensor::scalar(T::c(total / targets.len() as f64))
        };
        let op = Op::CrossEntropy {
            logits: self.id,
            targets: targets.to_vec(),
        };
        self.tape.push("cross_entropy", value, op, &[self.id])
    }
}

/// Reverse rule for node `id` given its adjoint `g`; parent adjoint
/// contributions are handed to `emit`.
pub(crate) fn backward_node<T: Scalar>(nodes: &[Node<T>], id: NodeId, g: &[f64], fault: bool, emit: &mut dyn FnMut(NodeId, Vec<f64>)) {
    let val = |i: NodeId| &nodes[i].value;
    let wants = |i: NodeId| nodes[i].requires_grad;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            emit(*a, g.to_vec());
            emit(*b, g.to_vec());
        }
        Op::Sub(a, b) => {
            emit(*a, g.to_vec());
            emit(*b, g.iter().map(|v| -v).collect());
        }
        Op::Mul(a, b) => {
            if wants(*a) {
                emit(*a, g.iter().zip(val(*b).data()).map(|(g, y)| g * y.real()).collect());
            }
            if wants(*b) {
                emit(*b, g.iter().zip(val(*a).data()).map(|(g, x)| g * x.real()).collect());
            }
        }
        Op::Scale(x, c) => emit(*x, g.iter().map(|v| v * c).collect()),
        Op::Broadcast {
            x,
            b,
            mul,
            outer,
            n,
            inner,
        } => {
            let (outer, n, inner) = (*outer, *n, *inner);
            let bd = val(*b).data();
            let xd = val(*x).data();
            if wants(*x) {
                let dx = if *mul {
                    let mut dx = vec![0.0; g.len()];
                    for o in 0..outer {
                        for j in 0..n {
                            let base = (o * n + j) * inner;
                            for i in base..base + inner {
                                dx[i] = g[i] * bd[j].real();
                            }
                        }
                    }
                    dx
                } else {
                    g.to_vec()
                };
                emit(*x, dx);
            }
            if wants(*b) {
                let mut db = vec![0.0; n];
                for o in 0..outer {
                    for (j, d) in db.iter_mut().enumerate() {
                        let base = (o * n + j) * inner;
                        for i in base..base + inner {
                            *d += if *mul { g[i] * xd[i].real() } else { g[i] };
                        }
                    }
                }
                emit(*b, db);
            }
        }
        Op::Matmul {
            a,
            b,
            m,
            k,
            n,
            a_idx,
            b_idx,
        } => {
            let (m, k, n) = (*m, *k, *n);
            let ad = f64s(val(*a));
            let bd = f64s(val(*b));
            if wants(*a) {
                let mut da = vec![0.0; ad.len()];
                for (bi, (&ia, &ib)) in a_idx.iter().zip(b_idx).enumerate() {
                    let bt = transpose(&bd[ib * k * n..(ib + 1) * k * n], k, n);
                    gemm_acc(
                        &g[bi * m * n..(bi + 1) * m * n],
                        &bt,
                        m,
                        n,
                        k,
                        &mut da[ia * m * k..(ia + 1) * m * k],
                    );
                }
                if fault {
                    da.iter_mut().for_each(|v| *v *= 1.5);
                }
                emit(*a, da);
            }
            if wants(*b) {
                let mut db = vec![0.0; bd.len()];
                for (bi, (&ia, &ib)) in a_idx.iter().zip(b_idx).enumerate() {
                    let at = transpose(&ad[ia * m * k..(ia + 1) * m * k], m, k);
                    gemm_acc(
                        &at,
                        &g[bi * m * n..(bi + 1) * m * n],
                        k,
                        m,
                        n,
                        &mut db[ib * k * n..(ib + 1) * k * n],
                    );
                }
                emit(*b, db);
            }
        }
        Op::TransposeLast2 { x, outer, m, n } => {
            let (m, n) = (*m, *n);
            let mut dx = vec![0.0; g.len()];
            for o in 0..*outer {
                for j in 0..n {
                    for i in 0..m {
                        dx[o * m * n + i * n + j] = g[o * m * n + j * m + i];
                    }
                }
            }
            emit(*x, dx);
        }
        Op::Reshape(x) => emit(*x, g.to_vec()),
        Op::Concat { parts, outer, inner } => {
            let total: usize = parts.iter().map(|p| p.1).sum();
            let mut offset = 0;
            for &(pid, len) in parts {
                if wants(pid) {
                    let mut d = Vec::with_capacity(outer * len * inner);
                    for o in 0..*outer {
                        let base = (o * total + offset) * inner;
                        d.extend_from_slice(&g[base..base + len * inner]);
                    }
                    emit(pid, d);
                }
                offset += len;
            }
        }
        Op::Slice {
            x,
            outer,
            axis_len,
            start,
            len,
            inner,
        } => {
            let mut dx = vec![0.0; outer * axis_len * inner];
            for o in 0..*outer {
                let dst = (o * axis_len + start) * inner;
                let src = o * len * inner;
                dx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
            }
            emit(*x, dx);
        }
        Op::Softmax { x, outer, n, inner } => {
            let y = nodes[id].value.data();
            let (n, inner) = (*n, *inner);
            let mut dx = vec![0.0; g.len()];
            for o in 0..*outer {
                for i in 0..inner {
                    let at = |j: usize| (o * n + j) * inner + i;
                    let dot: f64 = (0..n).map(|j| g[at(j)] * y[at(j)].real()).sum();
                    for j in 0..n {
                        dx[at(j)] = y[at(j)].real() * (g[at(j)] - dot);
                    }
                }
            }
            emit(*x, dx);
        }
        Op::Tanh(x) => {
            let y = nodes[id].value.data();
            emit(*x, g.iter().zip(y).map(|(g, y)| g * (1.0 - y.real() * y.real())).collect());
        }
        Op::Gelu(x) => {
            let xd = val(*x).data();
            let dx = g
                .iter()
                .zip(xd)
                .map(|(g, xv)| {
                    let x = xv.real();
                    let t = (GELU_A * (x + GELU_B * x * x * x)).tanh();
                    let du = GELU_A * (1.0 + 3.0 * GELU_B * x * x);
                    g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                })
                .collect();
            emit(*x, dx);
        }
        Op::Sum(x) => emit(*x, vec![g[0]; val(*x).len()]),
        Op::Mean(x) => {
            let n = val(*x).len();
            emit(*x, vec![g[0] / n as f64; n]);
        }
        Op::Bilinear { feat, points } => {
            let f = val(*feat);
            let p = val(*points);
            let (c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2]);
            let fd = f.data();
            let pd = p.data();
            let np = p.shape()[0];
            let mut df = if wants(*feat) { Some(vec![0.0; fd.len()]) } else { None };
            let mut dp = if wants(*points) { Some(vec![0.0; pd.len()]) } else { None };
            for q in 0..np {
                let cr = corner(pd[2 * q].real(), pd[2 * q + 1].real(), h, w);
                let (w00, w01) = ((1.0 - cr.fy) * (1.0 - cr.fx), (1.0 - cr.fy) * cr.fx);
                let (w10, w11) = (cr.fy * (1.0 - cr.fx), cr.fy * cr.fx);
                let (i00, i01) = (cr.y0 * w + cr.x0, cr.y0 * w + cr.x1);
                let (i10, i11) = (cr.y1 * w + cr.x0, cr.y1 * w + cr.x1);
                let mut gy = 0.0;
                let mut gx = 0.0;
                for ch in 0..c {
                    let go = g[q * c + ch];
                    let base = ch * h * w;
                    if let Some(df) = df.as_mut() {
                        df[base + i00] += w00 * go;
                        df[base + i01] += w01 * go;
                        df[base + i10] += w10 * go;
                        df[base + i11] += w11 * go;
                    }
                    if dp.is_some() {
                        let (v00, v01) = (fd[base + i00].real(), fd[base + i01].real());
                        let (v10, v11) = (fd[base + i10].real(), fd[base + i11].real());
                        gy += go * ((1.0 - cr.fx) * (v10 - v00) + cr.fx * (v11 - v01));
                        gx += go * ((1.0 - cr.fy) * (v01 - v00) + cr.fy * (v11 - v10));
                    }
                }
                if let Some(dp) = dp.as_mut() {
                    dp[2 * q] = if cr.live_y { gy } else { 0.0 };
                    dp[2 * q + 1] = if cr.live_x { gx } else { 0.0 };
                }
            }
            if let Some(df) = df {
                emit(*feat, df);
            }
            if let Some(dp) = dp {
                emit(*points, dp);
            }
        }
        Op::Conv2d { x, w, b, geom, cout } => {
            let cout = *cout;
            let ncol = geom.cols();
            if let Some(b) = b {
                if wants(*b) {
                    let db = (0..cout).map(|co| g[co * ncol..(co + 1) * ncol].iter().sum()).collect();
                    emit(*b, db);
                }
            }
            if wants(*w) {
                let cols = im2col(&f64s(val(*x)), geom);
                let ct = transpose(&cols, geom.rows(), ncol);
                let mut dw = vec![0.0; cout * geom.rows()];
                gemm_acc(g, &ct, cout, ncol, geom.rows(), &mut dw);
                emit(*w, dw);
            }
            if wants(*x) {
                let wt = transpose(&f64s(val(*w)), cout, geom.rows());
                let mut dcols = vec![0.0; geom.rows() * ncol];
                gemm_acc(&wt, g, geom.rows(), cout, ncol, &mut dcols);
                let mut dx = vec![0.0; geom.cin * geom.h * geom.w];
                col2im(&dcols, geom, &mut dx);
                emit(*x, dx);
            }
        }
        Op::GroupNorm {
            x,
            gamma,
            beta,
            groups,
            mean,
            rstd,
        } => {
            let xv = val(*x);
            let s = xv.shape();
            let hw = s[1] * s[2];
            let per = s[0] / groups * hw;
            let xd = f64s(xv);
            let gd = f64s(val(*gamma));
            let xhat = |i: usize| (xd[i] - mean[i / per]) * rstd[i / per];
            if wants(*beta) {
                let db = (0..s[0]).map(|c| g[c * hw..(c + 1) * hw].iter().sum()).collect();
                emit(*beta, db);
            }
            if wants(*gamma) {
                let dg = (0..s[0]).map(|c| (c * hw..(c + 1) * hw).map(|i| g[i] * xhat(i)).sum()).collect();
                emit(*gamma, dg);
            }
            if wants(*x) {
                let mut dx = vec![0.0; xd.len()];
                for gi in 0..*groups {
                    let range = gi * per..(gi + 1) * per;
                    let dxhat = |i: usize| g[i] * gd[i / hw];
                    let m1: f64 = range.clone().map(dxhat).sum::<f64>() / per as f64;
                    let m2: f64 = range.clone().map(|i| dxhat(i) * xhat(i)).sum::<f64>() / per as f64;
                    for i in range {
                        dx[i] = rstd[gi] * (dxhat(i) - m1 - xhat(i) * m2);
                    }
                }
                emit(*x, dx);
            }
        }
        Op::Resize { x, c, ry, rx } => {
            let s = val(*x).shape();
            let (h, w) = (s[1], s[2]);
            let (oh, ow) = (ry.lo.len(), rx.lo.len());
            let mut dx = vec![0.0; c * h * w];
            for ch in 0..*c {
                let pl = &mut dx[ch * h * w..(ch + 1) * h * w];
                for oy in 0..oh {
                    let (y0, y1, fy) = (ry.lo[oy], ry.hi[oy], ry.frac[oy]);
                    for ox in 0..ow {
                        let (x0, x1, fx) = (rx.lo[ox], rx.hi[ox], rx.frac[ox]);
                        let go = g[(ch * oh + oy) * ow + ox];
                        pl[y0 * w + x0] += go * (1.0 - fy) * (1.0 - fx);
                        pl[y0 * w + x1] += go * (1.0 - fy) * fx;
                        pl[y1 * w + x0] += go * fy * (1.0 - fx);
                        pl[y1 * w + x1] += go * fy * fx;
                    }
                }
            }
            emit(*x, dx);
        }
        Op::AvgPool { x, k } => {
            let s = val(*x).shape();
            let (c, h, w) = (s[0], s[1], s[2]);
            let (ho, wo) = (h / k, w / k);
            let norm = 1.0 / (k * k) as f64;
            let mut dx = vec![0.0; c * h * w];
            for ch in 0..c {
                for yy in 0..h {
                    for xx in 0..w {
                        dx[(ch * h + yy) * w + xx] = g[(ch * ho + yy / k) * wo + xx / k] * norm;
                    }
                }
            }
            emit(*x, dx);
        }
        Op::CrossEntropy { logits, targets } => {
            let x = val(*logits);
            let k = x.shape()[1];
            let xd = x.data();
            let scale = g[0] / targets.len() as f64;
            let mut dx = vec![0.0; xd.len()];
            for (r, &t) in targets.iter().enumerate() {
                let row = &xd[r * k..(r + 1) * k];
                let mx = row.iter().map(|v| v.real()).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|v| (v.real() - mx).exp()).sum();
                for j in 0..k {
                    let p = (row[j].real() - mx).exp() / z;
                    dx[r * k + j] = scale * (p - if j == t { 1.0 } else { 0.0 });
                }
            }
            emit(*logits, dx);
        }
    }
}
