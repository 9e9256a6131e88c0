//! Computation record for reverse-mode differentiation.
//!
//! Every primitive evaluates eagerly, appends its result to the record, and
//! rejects non-finite output. [`Graph::backward`] walks the record once in
//! reverse, accumulating adjoints into the nodes that require them.

use crate::error::{invalid_shape, mismatch, Result, TensorError};
use crate::kernels::{self, ConvGeom};
use crate::real::Real;
use crate::tensor::{numel, Tensor};

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Affine { x: Var, scale: f64 },
    Exp(Var),
    Log(Var),
    Relu(Var),
    Sqrt(Var),
    Softplus(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    AvgPool2d { x: Var, kernel: usize, stride: usize },
    Resize { x: Var },
    Concat { parts: Vec<Var>, axis: usize },
    Sum { x: Var },
    L2Norm { x: Var, axis: usize },
    LogSumExp { x: Var, axis: usize },
    ChannelMean(Var),
    ChannelStd { x: Var, mean: Var },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => {
                vec![*a, *b]
            }
            Op::Affine { x, .. }
            | Op::Clamp { x, .. }
            | Op::AvgPool2d { x, .. }
            | Op::Resize { x }
            | Op::Sum { x }
            | Op::L2Norm { x, .. }
            | Op::LogSumExp { x, .. } => vec![*x],
            Op::Exp(x)
            | Op::Log(x)
            | Op::Relu(x)
            | Op::Sqrt(x)
            | Op::Softplus(x)
            | Op::Transpose(x)
            | Op::Reshape(x)
            | Op::ChannelMean(x) => vec![*x],
            Op::ChannelStd { x, mean } => vec![*x, *mean],
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::Concat { parts, .. } => parts.clone(),
        }
    }
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// An ordered record of primitive applications.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Adjoints produced by [`Graph::backward`].
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
    visited: usize,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Number of non-leaf records processed during the reverse sweep.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let len = shape[axis];
    let inner = numel(&shape[axis + 1..]);
    (outer, len, inner)
}

fn keepdim_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s[axis] = 1;
    s
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a value whose gradient is wanted.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a value that gradients do not flow into.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, v: T) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op) -> Result<Var> {
        value.ensure_finite(name)?;
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---- elementwise ---------------------------------------------------

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() == bv.shape() {
            return av.zip_map(bv, name, f);
        }
        let shape = kernels::broadcast_shape(name, av.shape(), bv.shape())?;
        let sa = kernels::broadcast_strides(av.shape(), &shape);
        let sb = kernels::broadcast_strides(bv.shape(), &shape);
        let mut out = vec![T::zero(); numel(&shape)];
        let (ad, bd) = (av.data(), bv.data());
        kernels::broadcast_for_each(&shape, &sa, &sb, |o, i, j| out[o] = f(ad[i], bd[j]));
        Tensor::new(shape, out)
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("add", a, b, |x, y| x + y)?;
        self.push("add", v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("sub", a, b, |x, y| x - y)?;
        self.push("sub", v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("mul", a, b, |x, y| x * y)?;
        self.push("mul", v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("div", a, b, |x, y| x / y)?;
        self.push("div", v, Op::Div(a, b))
    }

    /// `scale·x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let (s, t) = (T::lit(scale), T::lit(shift));
        let v = self.value(x).map(|e| e * s + t);
        self.push("affine", v, Op::Affine { x, scale })
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.affine(x, s, 0.0)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.affine(x, -1.0, 0.0)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(T::exp);
        self.push("exp", v, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(T::ln);
        self.push("log", v, Op::Log(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|e| e.max(T::zero()));
        self.push("relu", v, Op::Relu(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(T::sqrt);
        self.push("sqrt", v, Op::Sqrt(x))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(softplus);
        self.push("softplus", v, Op::Softplus(x))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let (l, h) = (T::lit(lo), T::lit(hi));
        let v = self.value(x).map(|e| e.max(l).min(h));
        self.push("clamp", v, Op::Clamp { x, lo, hi })
    }

    // ---- linear algebra & layout ----------------------------------------

    /// `[m,k] × [k,n] → [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::gemm(m, k, n, av.data(), false, bv.data(), false, T::zero(), &mut out);
        let v = Tensor::new([m, n], out)?;
        self.push("matmul", v, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.ndim() != 2 {
            return Err(invalid_shape("transpose", xv.shape(), "expected a matrix"));
        }
        let v = transpose2(xv);
        self.push("transpose", v, Op::Transpose(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape.to_vec())?;
        self.push("reshape", v, Op::Reshape(x))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(invalid_shape("concat", &[], "nothing to concatenate"));
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(invalid_shape("concat", &base, format!("axis {axis} out of range")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len()
                || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(mismatch("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = lanes(&base, axis);
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &p in parts {
                let pv = self.value(p);
                let chunk = pv.shape()[axis] * inner;
                out.extend_from_slice(&pv.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let v = Tensor::new(shape, out)?;
        self.push(
            "concat",
            v,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        )
    }

    // ---- reductions -----------------------------------------------------

    /// Sum over `axes` (all axes when empty).
    pub fn sum(&mut self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let axes: Vec<usize> = if axes.is_empty() {
            (0..shape.len()).collect()
        } else {
            axes.to_vec()
        };
        if let Some(&bad) = axes.iter().find(|&&a| a >= shape.len()) {
            return Err(invalid_shape("sum", &shape, format!("axis {bad} out of range")));
        }
        let mut kept = shape.clone();
        for &a in &axes {
            kept[a] = 1;
        }
        let data = kernels::reduce_to(self.value(x).data(), &shape, &kept);
        let v = Tensor::new(kept.clone(), data)?;
        let s = self.push("sum", v, Op::Sum { x })?;
        if keepdim {
            Ok(s)
        } else {
            let squeezed: Vec<usize> = kept
                .iter()
                .enumerate()
                .filter(|(i, _)| !axes.contains(i))
                .map(|(_, &d)| d)
                .collect();
            self.reshape(s, &squeezed)
        }
    }

    pub fn mean(&mut self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let count: usize = if axes.is_empty() {
            numel(&shape)
        } else {
            axes.iter().map(|&a| shape.get(a).copied().unwrap_or(1)).product()
        };
        if count == 0 {
            return Err(invalid_shape("mean", &shape, "empty reduction"));
        }
        let s = self.sum(x, axes, keepdim)?;
        self.scale(s, 1.0 / count as f64)
    }

    /// Euclidean norm along `axis`, keeping the axis with extent one.
    pub fn l2_norm(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        if axis >= shape.len() {
            return Err(invalid_shape("l2_norm", &shape, format!("axis {axis} out of range")));
        }
        let (outer, len, inner) = lanes(&shape, axis);
        let d = xv.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut acc = T::zero();
                for l in 0..len {
                    let e = d[(o * len + l) * inner + i];
                    acc += e * e;
                }
                out[o * inner + i] = acc.sqrt();
            }
        }
        let v = Tensor::new(keepdim_shape(&shape, axis), out)?;
        self.push("l2_norm", v, Op::L2Norm { x, axis })
    }

    /// `log Σ exp(x)` along `axis` with max subtraction, keeping the axis.
    pub fn logsumexp(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(invalid_shape("logsumexp", &shape, format!("bad axis {axis}")));
        }
        let (outer, len, inner) = lanes(&shape, axis);
        let d = xv.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| d[(o * len + l) * inner + i];
                let m = (0..len).map(at).fold(T::neg_infinity(), T::max);
                let s: T = (0..len).map(|l| (at(l) - m).exp()).sum();
                out[o * inner + i] = m + s.ln();
            }
        }
        let v = Tensor::new(keepdim_shape(&shape, axis), out)?;
        self.push("logsumexp", v, Op::LogSumExp { x, axis })
    }

    // ---- image primitives ----------------------------------------------

    /// 2-D convolution of `[N,Cin,H,W]` with `[Cout,Cin,kh,kw]`, optional bias `[Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(mismatch("conv2d", &xs, &ws));
        }
        if stride == 0 {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                reason: "stride must be positive".into(),
            });
        }
        if let Some(b) = b {
            let bs = self.shape(b);
            if bs != [ws[0]] {
                return Err(mismatch("conv2d", &ws, bs));
            }
        }
        let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(mismatch("conv2d", &xs, &ws));
        }
        let geom = ConvGeom {
            cin,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (wd + 2 * pad - kw) / stride + 1,
        };
        let plane = geom.oh * geom.ow;
        let k = geom.cols_rows();
        let mut cols = vec![T::zero(); geom.cols_len()];
        let mut out = vec![T::zero(); n * cout * plane];
        let (xd, wdta) = (self.value(x).data(), self.value(w).data());
        let bias = b.map(|b| self.value(b).data().to_vec());
        for s in 0..n {
            kernels::im2col(&xd[s * cin * h * wd..(s + 1) * cin * h * wd], &geom, &mut cols);
            let dst = &mut out[s * cout * plane..(s + 1) * cout * plane];
            kernels::gemm(cout, k, plane, wdta, false, &cols, false, T::zero(), dst);
            if let Some(bias) = &bias {
                for (c, row) in dst.chunks_mut(plane).enumerate() {
                    row.iter_mut().for_each(|e| *e += bias[c]);
                }
            }
        }
        let v = Tensor::new([n, cout, geom.oh, geom.ow], out)?;
        self.push("conv2d", v, Op::Conv2d { x, w, b, geom })
    }

    /// Average pooling over `kernel×kernel` windows without padding.
    pub fn avg_pool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || kernel == 0 || stride == 0 || xs[2] < kernel || xs[3] < kernel {
            return Err(invalid_shape("avg_pool2d", &xs, format!("kernel {kernel}, stride {stride}")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (oh, ow) = ((h - kernel) / stride + 1, (w - kernel) / stride + 1);
        let d = self.value(x).data();
        let norm = T::lit(1.0 / (kernel * kernel) as f64);
        let mut out = vec![T::zero(); n * c * oh * ow];
        for p in 0..n * c {
            let src = &d[p * h * w..(p + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = T::zero();
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            acc += src[(oy * stride + ky) * w + ox * stride + kx];
                        }
                    }
                    out[(p * oh + oy) * ow + ox] = acc * norm;
                }
            }
        }
        let v = Tensor::new([n, c, oh, ow], out)?;
        self.push("avg_pool2d", v, Op::AvgPool2d { x, kernel, stride })
    }

    /// Mean over the spatial support of `[N,C,H,W]`, giving `[N,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.channel_mean(x)
    }

    fn check_nchw(&self, op: &'static str, x: Var) -> Result<[usize; 4]> {
        let s = self.shape(x);
        if s.len() != 4 || s[2] * s[3] == 0 {
            return Err(invalid_shape(op, s, "expected non-empty [N, C, H, W]"));
        }
        Ok([s[0], s[1], s[2], s[3]])
    }

    fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.check_nchw("channel_mean", x)?;
        let hw = h * w;
        let inv = T::lit(1.0 / hw as f64);
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let v = Tensor::new([n, c], out)?;
        self.push("channel_mean", v, Op::ChannelMean(x))
    }

    /// Per-channel mean and population standard deviation over the spatial
    /// support of `[N,C,H,W]`, each shaped `[N,C]`.
    pub fn instance_stats(&mut self, x: Var) -> Result<(Var, Var)> {
        let mean = self.channel_mean(x)?;
        let [n, c, h, w] = self.check_nchw("instance_stats", x)?;
        let hw = h * w;
        let inv = T::lit(1.0 / hw as f64);
        let (xd, md) = (self.value(x).data(), self.value(mean).data());
        let out: Vec<T> = xd
            .chunks(hw)
            .zip(md)
            .map(|(p, &m)| {
                let var: T = p.iter().map(|&e| (e - m) * (e - m)).sum::<T>() * inv;
                var.sqrt()
            })
            .collect();
        let v = Tensor::new([n, c], out)?;
        let std = self.push("instance_stats", v, Op::ChannelStd { x, mean })?;
        Ok((mean, std))
    }

    /// Bilinear resize of `[N,C,H,W]` to `[N,C,oh,ow]` with half-pixel centers
    /// and edge clamping.
    pub fn resize_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let [n, c, h, w] = self.check_nchw("resize_bilinear", x)?;
        if oh == 0 || ow == 0 {
            return Err(invalid_shape("resize_bilinear", &[oh, ow], "empty output"));
        }
        let out = kernels::resize_bilinear(self.value(x).data(), n * c, h, w, oh, ow);
        let v = Tensor::new([n, c, oh, ow], out)?;
        self.push("resize_bilinear", v, Op::Resize { x })
    }

    // ---- reverse sweep --------------------------------------------------

    /// Accumulates d(sum of `root`)/d(node) for every node that requires a
    /// gradient. Each record is visited once, newest first.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut visited = 0;
        if !self.nodes[root.0].requires_grad {
            return Ok(Gradients { grads, visited });
        }
        grads[root.0] = Some(Tensor::ones(self.shape(root).to_vec()));
        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            visited += 1;
            self.backprop(&node.op, &node.value, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.is_finite() {
                    return Err(TensorError::NonFinite { op: op_name(&self.nodes[i].op) });
                }
            }
        }
        Ok(Gradients { grads, visited })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, data: Vec<T>) -> Result<()> {
        if !self.wants(v) {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(data) {
                    *e += d;
                }
            }
            slot @ None => *slot = Some(Tensor::new(self.shape(v).to_vec(), data)?),
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn binary_backward(
        &self,
        a: Var,
        b: Var,
        out_shape: &[usize],
        g: &[T],
        grads: &mut [Option<Tensor<T>>],
        da: impl Fn(T, T, T) -> T,
        db: impl Fn(T, T, T) -> T,
    ) -> Result<()> {
        let (av, bv) = (self.value(a), self.value(b));
        let sa = kernels::broadcast_strides(av.shape(), out_shape);
        let sb = kernels::broadcast_strides(bv.shape(), out_shape);
        let (ad, bd) = (av.data(), bv.data());
        let mut ga = vec![T::zero(); av.numel()];
        let mut gb = vec![T::zero(); bv.numel()];
        let (wa, wb) = (self.wants(a), self.wants(b));
        kernels::broadcast_for_each(out_shape, &sa, &sb, |o, i, j| {
            if wa {
                ga[i] += da(g[o], ad[i], bd[j]);
            }
            if wb {
                gb[j] += db(g[o], ad[i], bd[j]);
            }
        });
        if wa {
            self.accumulate(grads, a, ga)?;
        }
        if wb {
            self.accumulate(grads, b, gb)?;
        }
        Ok(())
    }

    fn backprop(&self, op: &Op, out: &Tensor<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let gd = g.data();
        let unary = |x: Var, f: &dyn Fn(usize, T) -> T| -> Vec<T> {
            let _ = x;
            gd.iter().enumerate().map(|(i, &gi)| f(i, gi)).collect()
        };
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => self.binary_backward(a, b, out.shape(), gd, grads, |g, _, _| g, |g, _, _| g)?,
            Op::Sub(a, b) => self.binary_backward(a, b, out.shape(), gd, grads, |g, _, _| g, |g, _, _| -g)?,
            Op::Mul(a, b) => {
                self.binary_backward(a, b, out.shape(), gd, grads, |g, _, y| g * y, |g, x, _| g * x)?
            }
            Op::Div(a, b) => self.binary_backward(
                a,
                b,
                out.shape(),
                gd,
                grads,
                |g, _, y| g / y,
                |g, x, y| -g * x / (y * y),
            )?,
            Op::Affine { x, scale } => {
                let s = T::lit(scale);
                self.accumulate(grads, x, unary(x, &|_, gi| gi * s))?;
            }
            Op::Exp(x) => {
                let y = out.data();
                self.accumulate(grads, x, unary(x, &|i, gi| gi * y[i]))?;
            }
            Op::Log(x) => {
                let xv = self.value(x).data();
                self.accumulate(grads, x, unary(x, &|i, gi| gi / xv[i]))?;
            }
            Op::Relu(x) => {
                let xv = self.value(x).data();
                self.accumulate(
                    grads,
                    x,
                    unary(x, &|i, gi| if xv[i] > T::zero() { gi } else { T::zero() }),
                )?;
            }
            Op::Sqrt(x) => {
                let y = out.data();
                let half = T::lit(0.5);
                self.accumulate(
                    grads,
                    x,
                    unary(x, &|i, gi| if y[i] > T::zero() { gi * half / y[i] } else { T::zero() }),
                )?;
            }
            Op::Softplus(x) => {
                let xv = self.value(x).data();
                self.accumulate(grads, x, unary(x, &|i, gi| gi * sigmoid(xv[i])))?;
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(x).data();
                let (l, h) = (T::lit(lo), T::lit(hi));
                self.accumulate(
                    grads,
                    x,
                    unary(x, &|i, gi| if xv[i] > l && xv[i] < h { gi } else { T::zero() }),
                )?;
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.wants(a) {
                    let mut ga = vec![T::zero(); m * k];
                    kernels::gemm(m, n, k, gd, false, bv.data(), true, T::zero(), &mut ga);
                    self.accumulate(grads, a, ga)?;
                }
                if self.wants(b) {
                    let mut gb = vec![T::zero(); k * n];
                    kernels::gemm(k, m, n, av.data(), true, gd, false, T::zero(), &mut gb);
                    self.accumulate(grads, b, gb)?;
                }
            }
            Op::Transpose(x) => {
                self.accumulate(grads, x, transpose2(g).into_data())?;
            }
            Op::Reshape(x) => {
                self.accumulate(grads, x, gd.to_vec())?;
            }
            Op::Conv2d { x, w, b, geom } => self.conv2d_backward(x, w, b, &geom, gd, grads)?,
            Op::AvgPool2d { x, kernel, stride } => {
                let xs = self.shape(x);
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let (oh, ow) = (out.shape()[2], out.shape()[3]);
                let norm = T::lit(1.0 / (kernel * kernel) as f64);
                let mut gx = vec![T::zero(); n * c * h * w];
                for p in 0..n * c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let v = gd[(p * oh + oy) * ow + ox] * norm;
                            for ky in 0..kernel {
                                for kx in 0..kernel {
                                    gx[p * h * w + (oy * stride + ky) * w + ox * stride + kx] += v;
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, x, gx)?;
            }
            Op::Resize { x } => {
                let xs = self.shape(x);
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let (oh, ow) = (out.shape()[2], out.shape()[3]);
                let gx = kernels::resize_bilinear_backward(gd, n * c, h, w, oh, ow);
                self.accumulate(grads, x, gx)?;
            }
            Op::Concat { ref parts, axis } => {
                let (outer, _, inner) = lanes(out.shape(), axis);
                let mut offset = 0;
                let total = out.shape()[axis] * inner;
                for &p in parts {
                    let chunk = self.shape(p)[axis] * inner;
                    if self.wants(p) {
                        let mut gp = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            gp.extend_from_slice(&gd[o * total + offset..o * total + offset + chunk]);
                        }
                        self.accumulate(grads, p, gp)?;
                    }
                    offset += chunk;
                }
            }
            Op::Sum { x } => {
                let xs = self.shape(x).to_vec();
                let sx = kernels::broadcast_strides(&xs, &xs);
                let sg = kernels::broadcast_strides(out.shape(), &xs);
                let mut gx = vec![T::zero(); numel(&xs)];
                kernels::broadcast_for_each(&xs, &sx, &sg, |_, i, j| gx[i] = gd[j]);
                self.accumulate(grads, x, gx)?;
            }
            Op::L2Norm { x, axis } => {
                let xv = self.value(x);
                let (outer, len, inner) = lanes(xv.shape(), axis);
                let (xd, nd) = (xv.data(), out.data());
                let mut gx = vec![T::zero(); xv.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let (nv, gv) = (nd[o * inner + i], gd[o * inner + i]);
                        if nv > T::zero() {
                            for l in 0..len {
                                let at = (o * len + l) * inner + i;
                                gx[at] = gv * xd[at] / nv;
                            }
                        }
                    }
                }
                self.accumulate(grads, x, gx)?;
            }
            Op::LogSumExp { x, axis } => {
                let xv = self.value(x);
                let (outer, len, inner) = lanes(xv.shape(), axis);
                let (xd, yd) = (xv.data(), out.data());
                let mut gx = vec![T::zero(); xv.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let (y, gv) = (yd[o * inner + i], gd[o * inner + i]);
                        for l in 0..len {
                            let at = (o * len + l) * inner + i;
                            gx[at] = gv * (xd[at] - y).exp();
                        }
                    }
                }
                self.accumulate(grads, x, gx)?;
            }
            Op::ChannelMean(x) => {
                let xs = self.shape(x);
                let hw = xs[2] * xs[3];
                let inv = T::lit(1.0 / hw as f64);
                let gx: Vec<T> = gd.iter().flat_map(|&v| std::iter::repeat_n(v * inv, hw)).collect();
                self.accumulate(grads, x, gx)?;
            }
            Op::ChannelStd { x, mean } => {
                // d std / d x_i = (x_i - mean) / (HW · std); the path through
                // `mean` contributes zero because Σ (x_i - mean) = 0.
                let xs = self.shape(x);
                let hw = xs[2] * xs[3];
                let (xd, md, sd) = (self.value(x).data(), self.value(mean).data(), out.data());
                let inv = T::lit(1.0 / hw as f64);
                let mut gx = vec![T::zero(); xd.len()];
                for (p, ((gv, &m), &s)) in gd.iter().zip(md).zip(sd).enumerate() {
                    if s > T::zero() {
                        let coef = *gv * inv / s;
                        for i in p * hw..(p + 1) * hw {
                            gx[i] = coef * (xd[i] - m);
                        }
                    }
                }
                self.accumulate(grads, x, gx)?;
            }
        }
        Ok(())
    }

    fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: &ConvGeom,
        gd: &[T],
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let xs = self.shape(x);
        let n = xs[0];
        let cout = self.shape(w)[0];
        let plane = geom.oh * geom.ow;
        let k = geom.cols_rows();
        let img = geom.cin * geom.h * geom.w;
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        if let Some(b) = b.filter(|&b| self.wants(b)) {
            let mut gb = vec![T::zero(); cout];
            for s in 0..n {
                for (c, row) in gd[s * cout * plane..(s + 1) * cout * plane].chunks(plane).enumerate() {
                    gb[c] += row.iter().copied().sum::<T>();
                }
            }
            self.accumulate(grads, b, gb)?;
        }
        let (want_w, want_x) = (self.wants(w), self.wants(x));
        if !want_w && !want_x {
            return Ok(());
        }
        let mut cols = vec![T::zero(); geom.cols_len()];
        let mut gw = if want_w { vec![T::zero(); cout * k] } else { Vec::new() };
        let mut gx = if want_x { vec![T::zero(); n * img] } else { Vec::new() };
        for s in 0..n {
            let gs = &gd[s * cout * plane..(s + 1) * cout * plane];
            if want_w {
                kernels::im2col(&xd[s * img..(s + 1) * img], geom, &mut cols);
                kernels::gemm(cout, plane, k, gs, false, &cols, true, T::one(), &mut gw);
            }
            if want_x {
                kernels::gemm(k, cout, plane, wd, true, gs, false, T::zero(), &mut cols);
                kernels::col2im(&cols, geom, &mut gx[s * img..(s + 1) * img]);
            }
        }
        if want_w {
            self.accumulate(grads, w, gw)?;
        }
        if want_x {
            self.accumulate(grads, x, gx)?;
        }
        Ok(())
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Div(..) => "div",
        Op::Affine { .. } => "affine",
        Op::Exp(_) => "exp",
        Op::Log(_) => "log",
        Op::Relu(_) => "relu",
        Op::Sqrt(_) => "sqrt",
        Op::Softplus(_) => "softplus",
        Op::Clamp { .. } => "clamp",
        Op::MatMul(..) => "matmul",
        Op::Transpose(_) => "transpose",
        Op::Reshape(_) => "reshape",
        Op::Conv2d { .. } => "conv2d",
        Op::AvgPool2d { .. } => "avg_pool2d",
        Op::Resize { .. } => "resize_bilinear",
        Op::Concat { .. } => "concat",
        Op::Sum { .. } => "sum",
        Op::L2Norm { .. } => "l2_norm",
        Op::LogSumExp { .. } => "logsumexp",
        Op::ChannelMean(_) => "channel_mean",
        Op::ChannelStd { .. } => "instance_stats",
    }
}

fn transpose2<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    let d = t.data();
    Tensor::from_fn([c, r], |i| d[(i % r) * c + i / r])
}

pub(crate) fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
