use std::collections::{HashMap, HashSet};

use super::kernels::{col2im, gemm_nn, gemm_nt, gemm_tn, im2col, ConvGeom};
use crate::error::{config_err, contract_err, shape_err, Error, Result};
use crate::param::{Param, ParamId};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Avg,
    Max,
    Sum,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    /// Statistics per (sample, channel) over the spatial extent.
    Instance,
    /// Statistics per sample over channels and space.
    Layer,
}

#[derive(Clone, Copy, Debug)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
enum UnaryKind {
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    Tanh,
    Log,
    Exp,
    Sqrt,
    Square,
    Abs,
    Clamp(f64, f64),
    AddScalar(f64),
    MulScalar(f64),
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary(Var, Var, BinaryKind),
    Unary(Var, UnaryKind),
    Sum(Var),
    Mean(Var),
    MatMul(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ReflectPad(Var, usize),
    GlobalPool(Var, PoolMode),
    ChannelPool(Var, PoolMode),
    Softmax(Var),
    Concat(Vec<Var>),
    Upsample2x(Var),
    Reshape(Var),
    Normalize(Var, NormKind, f64),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Ordered record of differentiable operations.
///
/// Every operation appends a node whose inputs have smaller indices, so
/// reverse index order is a valid reverse topological order. A tape supports
/// exactly one [`Tape::backward`] call.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    frozen: HashSet<ParamId>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::Numeric(format!(
                "non-finite value produced by {}",
                op_name(&op)
            )));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient accumulated for `v` by [`Tape::backward`], if it was reached.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape(), g.clone()).expect("grad shape"))
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Parameters bound after this call are recorded as constants.
    pub fn freeze(&mut self, ids: impl IntoIterator<Item = ParamId>) {
        self.frozen.extend(ids);
    }

    /// Binds a parameter as a leaf. Repeated binds return the same leaf, so
    /// a network applied several times accumulates one gradient.
    pub fn param(&mut self, p: &Param) -> Result<Var> {
        if let Some(&v) = self.params.get(&p.id()) {
            return Ok(v);
        }
        let requires = !self.frozen.contains(&p.id());
        let v = self.leaf(p.value.clone(), requires)?;
        self.params.insert(p.id(), v);
        Ok(v)
    }

    /// Makes later [`Tape::param`] calls for `p` return `v`.
    pub fn bind(&mut self, p: &Param, v: Var) {
        self.bind_id(p.id(), v);
    }

    pub fn bind_id(&mut self, id: ParamId, v: Var) {
        self.params.insert(id, v);
    }

    pub fn param_grad(&self, p: &Param) -> Option<Tensor> {
        self.params.get(&p.id()).and_then(|&v| self.grad(v))
    }

    // ---------------------------------------------------------------------
    // elementwise
    // ---------------------------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, kind: BinaryKind) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = broadcast_shape(&sa, &sb)?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let out = if sa == sb {
            av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let n: usize = out_shape.iter().product();
            let mut out = vec![0.0; n];
            let (stra, strb) = (bcast_strides(&sa, &out_shape), bcast_strides(&sb, &out_shape));
            for_each_bcast(&out_shape, &stra, &strb, |o, ia, ib| out[o] = f(av[ia], bv[ib]));
            out
        };
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(&out_shape, out)?, Op::Binary(a, b, kind), rg)
    }

    /// Elementwise sum; same-rank operands broadcast along size-1 extents and
    /// one-element operands broadcast everywhere.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Div)
    }

    fn unary(&mut self, x: Var, kind: UnaryKind) -> Result<Var> {
        let f = |v: f64| match kind {
            UnaryKind::Relu => v.max(0.0),
            UnaryKind::LeakyRelu(s) => {
                if v > 0.0 {
                    v
                } else {
                    s * v
                }
            }
            UnaryKind::Sigmoid => sigmoid(v),
            UnaryKind::Tanh => v.tanh(),
            UnaryKind::Log => v.ln(),
            UnaryKind::Exp => v.exp(),
            UnaryKind::Sqrt => v.sqrt(),
            UnaryKind::Square => v * v,
            UnaryKind::Abs => v.abs(),
            UnaryKind::Clamp(lo, hi) => v.clamp(lo, hi),
            UnaryKind::AddScalar(c) => v + c,
            UnaryKind::MulScalar(c) => v * c,
        };
        let out = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(out, Op::Unary(x, kind), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, UnaryKind::AddScalar(c))
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, UnaryKind::MulScalar(c))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.mul_scalar(x, -1.0)
    }

    /// `c - x`
    pub fn rsub_scalar(&mut self, c: f64, x: Var) -> Result<Var> {
        let n = self.neg(x)?;
        self.add_scalar(n, c)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Relu)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.unary(x, UnaryKind::LeakyRelu(slope))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Tanh)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Log)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Exp)
    }

    /// Square root; the gradient at exactly zero is taken as zero.
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Sqrt)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Square)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Abs)
    }

    /// Clamps into `[lo, hi]`; gradient is zero outside the interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(x, UnaryKind::Clamp(lo, hi))
    }

    // ---------------------------------------------------------------------
    // reductions and shape ops
    // ---------------------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let m = self.value(x).mean();
        let rg = self.rg(x);
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    /// `[m,k] x [k,n] -> [m,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n) = match (self.shape(a), self.shape(b)) {
            (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
            (sa, sb) => {
                return Err(shape_err!("matmul of {:?} and {:?}", sa, sb));
            }
        };
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg)
    }

    /// Cross-correlation of `x: [N,C,H,W]` with `w: [F,C,kh,kw]` and optional
    /// bias `b: [F]`, zero padding.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (n, c, h, wd) = self.value(x).dims4()?;
        let (f, kc, kh, kw) = self.value(w).dims4()?;
        if kc != c {
            return Err(shape_err!(
                "conv2d kernel expects {} input channels, input has {}",
                kc,
                c
            ));
        }
        if stride == 0 {
            return Err(config_err!("conv2d stride must be positive"));
        }
        if let Some(b) = b {
            if self.shape(b) != [f] {
                return Err(shape_err!(
                    "conv2d bias shape {:?} does not match {} filters",
                    self.shape(b),
                    f
                ));
            }
        }
        let oh = out_extent(h, kh, stride, padding)?;
        let ow = out_extent(wd, kw, stride, padding)?;
        let geom = ConvGeom {
            c,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad: padding,
            oh,
            ow,
        };
        let (rows, p) = (geom.col_rows(), geom.col_cols());
        let mut out = vec![0.0; n * f * p];
        let mut cols = vec![0.0; rows * p];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        for s in 0..n {
            im2col(&xv[s * c * h * wd..(s + 1) * c * h * wd], &geom, &mut cols);
            let o = &mut out[s * f * p..(s + 1) * f * p];
            gemm_nn(wv, &cols, o, f, rows, p);
            if let Some(b) = b {
                let bv = self.value(b).data();
                for (fi, row) in o.chunks_exact_mut(p).enumerate() {
                    row.iter_mut().for_each(|v| *v += bv[fi]);
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(
            Tensor::new(&[n, f, oh, ow], out)?,
            Op::Conv2d { x, w, b, geom },
            rg,
        )
    }

    /// Mirror padding without repeating the edge sample.
    pub fn reflect_pad(&mut self, x: Var, pad: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if pad >= h || pad >= w {
            return Err(shape_err!(
                "reflect padding {} needs spatial extent above {}, got {}x{}",
                pad,
                pad,
                h,
                w
            ));
        }
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * c * ph * pw];
        for plane in 0..n * c {
            let src = &xv[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * ph * pw..(plane + 1) * ph * pw];
            for y in 0..ph {
                let sy = reflect_index(y as isize - pad as isize, h);
                for xx in 0..pw {
                    let sx = reflect_index(xx as isize - pad as isize, w);
                    dst[y * pw + xx] = src[sy * w + sx];
                }
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(&[n, c, ph, pw], out)?, Op::ReflectPad(x, pad), rg)
    }

    /// Reduces `[N,C,H,W]` over space to `[N,C,1,1]`.
    pub fn pool_global(&mut self, x: Var, mode: PoolMode) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if h * w == 0 {
            return Err(shape_err!("global pooling over an empty spatial extent"));
        }
        let xv = self.value(x).data();
        let hw = h * w;
        let out: Vec<f64> = xv
            .chunks_exact(hw)
            .map(|plane| match mode {
                PoolMode::Avg => plane.iter().sum::<f64>() / hw as f64,
                PoolMode::Sum => plane.iter().sum::<f64>(),
                PoolMode::Max => plane.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            })
            .collect();
        let rg = self.rg(x);
        self.push(Tensor::new(&[n, c, 1, 1], out)?, Op::GlobalPool(x, mode), rg)
    }

    /// Reduces `[N,C,H,W]` over channels to `[N,1,H,W]`.
    pub fn pool_channels(&mut self, x: Var, mode: PoolMode) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if c == 0 {
            return Err(shape_err!("channel pooling over zero channels"));
        }
        let hw = h * w;
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * hw];
        for s in 0..n {
            let o = &mut out[s * hw..(s + 1) * hw];
            if mode == PoolMode::Max {
                o.fill(f64::NEG_INFINITY);
            }
            for ch in 0..c {
                let plane = &xv[(s * c + ch) * hw..(s * c + ch + 1) * hw];
                for (ov, &v) in o.iter_mut().zip(plane) {
                    match mode {
                        PoolMode::Max => *ov = ov.max(v),
                        _ => *ov += v,
                    }
                }
            }
            if mode == PoolMode::Avg {
                o.iter_mut().for_each(|v| *v /= c as f64);
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(&[n, 1, h, w], out)?, Op::ChannelPool(x, mode), rg)
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let last = *shape
            .last()
            .ok_or_else(|| shape_err!("softmax of a rank-0 tensor"))?;
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(last) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        let rg = self.rg(x);
        self.push(Tensor::new(&shape, out)?, Op::Softmax(x), rg)
    }

    /// Concatenates along axis 1; all other extents must agree.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| contract_err!("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if base.len() < 2 {
            return Err(shape_err!("concat along axis 1 needs rank >= 2"));
        }
        let mut channels = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != base.len() || s[0] != base[0] || s[2..] != base[2..] {
                return Err(shape_err!("cannot concat {:?} with {:?}", s, base));
            }
            channels += s[1];
        }
        let n = base[0];
        let inner: usize = base[2..].iter().product();
        let mut out_shape = base.clone();
        out_shape[1] = channels;
        let mut out = Vec::with_capacity(n * channels * inner);
        for s in 0..n {
            for &v in xs {
                let c = self.shape(v)[1];
                out.extend_from_slice(&self.value(v).data()[s * c * inner..(s + 1) * c * inner]);
            }
        }
        let rg = xs.iter().any(|&v| self.rg(v));
        self.push(Tensor::new(&out_shape, out)?, Op::Concat(xs.to_vec()), rg)
    }

    /// Nearest-neighbour upsampling by two in both spatial axes.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let xv = self.value(x).data();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; n * c * oh * ow];
        for plane in 0..n * c {
            let src = &xv[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            for y in 0..oh {
                for xx in 0..ow {
                    dst[y * ow + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(&[n, c, oh, ow], out)?, Op::Upsample2x(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        self.push(t, Op::Reshape(x), rg)
    }

    /// Standardises `[N,C,H,W]` without affine terms:
    /// `(x - mean) / sqrt(var + eps)` with biased variance.
    pub fn normalize(&mut self, x: Var, kind: NormKind, eps: f64) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let group = match kind {
            NormKind::Instance => h * w,
            NormKind::Layer => c * h * w,
        };
        if group < 2 {
            return Err(contract_err!(
                "{:?} normalisation needs more than one element per group, shape is {:?}",
                kind,
                [n, c, h, w]
            ));
        }
        let mut out = self.value(x).data().to_vec();
        for g in out.chunks_exact_mut(group) {
            let (mean, inv_std) = group_stats(g, eps);
            g.iter_mut().for_each(|v| *v = (*v - mean) * inv_std);
        }
        let rg = self.rg(x);
        self.push(
            Tensor::new(&[n, c, h, w], out)?,
            Op::Normalize(x, kind, eps),
            rg,
        )
    }

    // ---------------------------------------------------------------------
    // reverse pass
    // ---------------------------------------------------------------------

    /// Back-propagates from a one-element `seed`, accumulating `d seed / d t`
    /// into every reachable node that requires a gradient.
    pub fn backward(&mut self, seed: Var) -> Result<()> {
        if self.consumed {
            return Err(contract_err!("backward already ran on this tape"));
        }
        if !self.value(seed).is_scalar() {
            return Err(contract_err!(
                "backward seed must be a scalar, got shape {:?}",
                self.shape(seed)
            ));
        }
        self.consumed = true;
        if !self.rg(seed) {
            return Ok(());
        }
        self.nodes[seed.0].grad = Some(vec![1.0]);

        for i in (0..=seed.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = node.grad.as_deref() else {
                continue;
            };
            for (input, contrib) in local_grads(before, node, g) {
                let target = &mut before[input.0];
                match &mut target.grad {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contrib),
                }
            }
            // interior grads are not needed once propagated
            node.grad = None;
        }
        Ok(())
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Binary(..) => "binary op",
        Op::Unary(_, k) => match k {
            UnaryKind::Log => "log",
            UnaryKind::Sqrt => "sqrt",
            UnaryKind::Exp => "exp",
            _ => "unary op",
        },
        Op::Sum(_) => "sum",
        Op::Mean(_) => "mean",
        Op::MatMul(..) => "matmul",
        Op::Conv2d { .. } => "conv2d",
        Op::ReflectPad(..) => "reflect_pad",
        Op::GlobalPool(..) => "pool_global",
        Op::ChannelPool(..) => "pool_channels",
        Op::Softmax(_) => "softmax",
        Op::Concat(_) => "concat",
        Op::Upsample2x(_) => "upsample2x",
        Op::Reshape(_) => "reshape",
        Op::Normalize(..) => "normalize",
    }
}

/// Gradient contributions of one node to each of its inputs that needs one.
fn local_grads(before: &[Node], node: &Node, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
    let val = |v: Var| &before[v.0].value;
    let wants = |v: Var| before[v.0].requires_grad;
    let mut out = Vec::new();
    match &node.op {
        Op::Leaf => {}
        Op::Binary(a, b, kind) => {
            let (a, b, kind) = (*a, *b, *kind);
            let (av, bv) = (val(a), val(b));
            let out_shape = node.value.shape();
            let mut ga = wants(a).then(|| vec![0.0; av.numel()]);
            let mut gb = wants(b).then(|| vec![0.0; bv.numel()]);
            let (ad, bd) = (av.data(), bv.data());
            let stra = bcast_strides(av.shape(), out_shape);
            let strb = bcast_strides(bv.shape(), out_shape);
            for_each_bcast(out_shape, &stra, &strb, |o, ia, ib| {
                let go = g[o];
                let (x, y) = (ad[ia], bd[ib]);
                let (da, db) = match kind {
                    BinaryKind::Add => (go, go),
                    BinaryKind::Sub => (go, -go),
                    BinaryKind::Mul => (go * y, go * x),
                    BinaryKind::Div => (go / y, -go * x / (y * y)),
                };
                if let Some(ga) = ga.as_mut() {
                    ga[ia] += da;
                }
                if let Some(gb) = gb.as_mut() {
                    gb[ib] += db;
                }
            });
            if let Some(ga) = ga {
                out.push((a, ga));
            }
            if let Some(gb) = gb {
                out.push((b, gb));
            }
        }
        Op::Unary(x, kind) => {
            if wants(*x) {
                let xv = val(*x).data();
                let yv = node.value.data();
                let dx = xv
                    .iter()
                    .zip(yv)
                    .zip(g)
                    .map(|((&x, &y), &go)| {
                        go * match *kind {
                            UnaryKind::Relu => f64::from(x > 0.0),
                            UnaryKind::LeakyRelu(s) => {
                                if x > 0.0 {
                                    1.0
                                } else {
                                    s
                                }
                            }
                            UnaryKind::Sigmoid => y * (1.0 - y),
                            UnaryKind::Tanh => 1.0 - y * y,
                            UnaryKind::Log => 1.0 / x,
                            UnaryKind::Exp => y,
                            UnaryKind::Sqrt => {
                                if y > 0.0 {
                                    0.5 / y
                                } else {
                                    0.0
                                }
                            }
                            UnaryKind::Square => 2.0 * x,
                            UnaryKind::Abs => {
                                if x > 0.0 {
                                    1.0
                                } else if x < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                }
                            }
                            UnaryKind::Clamp(lo, hi) => f64::from(x >= lo && x <= hi),
                            UnaryKind::AddScalar(_) => 1.0,
                            UnaryKind::MulScalar(c) => c,
                        }
                    })
                    .collect();
                out.push((*x, dx));
            }
        }
        Op::Sum(x) => {
            if wants(*x) {
                out.push((*x, vec![g[0]; val(*x).numel()]));
            }
        }
        Op::Mean(x) => {
            if wants(*x) {
                let n = val(*x).numel();
                out.push((*x, vec![g[0] / n as f64; n]));
            }
        }
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k) = (av.shape()[0], av.shape()[1]);
            let n = bv.shape()[1];
            if wants(*a) {
                let mut da = vec![0.0; m * k];
                gemm_nt(g, bv.data(), &mut da, m, n, k);
                out.push((*a, da));
            }
            if wants(*b) {
                let mut db = vec![0.0; k * n];
                gemm_tn(av.data(), g, &mut db, k, m, n);
                out.push((*b, db));
            }
        }
        Op::Conv2d { x, w, b, geom } => {
            let (xv, wv) = (val(*x), val(*w));
            let n = xv.shape()[0];
            let f = wv.shape()[0];
            let (rows, p) = (geom.col_rows(), geom.col_cols());
            let img = geom.c * geom.h * geom.w;
            let mut dw = wants(*w).then(|| vec![0.0; wv.numel()]);
            let mut dx = wants(*x).then(|| vec![0.0; xv.numel()]);
            let mut cols = vec![0.0; rows * p];
            for s in 0..n {
                let gs = &g[s * f * p..(s + 1) * f * p];
                if let Some(dw) = dw.as_mut() {
                    im2col(&xv.data()[s * img..(s + 1) * img], geom, &mut cols);
                    gemm_nt(gs, &cols, dw, f, p, rows);
                }
                if let Some(dx) = dx.as_mut() {
                    cols.fill(0.0);
                    gemm_tn(wv.data(), gs, &mut cols, rows, f, p);
                    col2im(&cols, geom, &mut dx[s * img..(s + 1) * img]);
                }
            }
            if let Some(b) = b.filter(|&b| wants(b)) {
                let mut db = vec![0.0; f];
                for s in 0..n {
                    for (fi, row) in g[s * f * p..(s + 1) * f * p].chunks_exact(p).enumerate() {
                        db[fi] += row.iter().sum::<f64>();
                    }
                }
                out.push((b, db));
            }
            if let Some(dw) = dw {
                out.push((*w, dw));
            }
            if let Some(dx) = dx {
                out.push((*x, dx));
            }
        }
        Op::ReflectPad(x, pad) => {
            if wants(*x) {
                let xv = val(*x);
                let (n, c, h, w) = xv.dims4().expect("4-D");
                let (ph, pw) = (h + 2 * pad, w + 2 * pad);
                let mut dx = vec![0.0; xv.numel()];
                for plane in 0..n * c {
                    let src = &g[plane * ph * pw..(plane + 1) * ph * pw];
                    let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
                    for y in 0..ph {
                        let sy = reflect_index(y as isize - *pad as isize, h);
                        for xx in 0..pw {
                            let sx = reflect_index(xx as isize - *pad as isize, w);
                            dst[sy * w + sx] += src[y * pw + xx];
                        }
                    }
                }
                out.push((*x, dx));
            }
        }
        Op::GlobalPool(x, mode) => {
            if wants(*x) {
                let xv = val(*x);
                let (_, _, h, w) = xv.dims4().expect("4-D");
                let hw = h * w;
                let mut dx = vec![0.0; xv.numel()];
                for ((plane, dplane), &go) in xv.data().chunks_exact(hw).zip(dx.chunks_exact_mut(hw)).zip(g) {
                    match mode {
                        PoolMode::Avg => dplane.fill(go / hw as f64),
                        PoolMode::Sum => dplane.fill(go),
                        PoolMode::Max => dplane[argmax(plane)] += go,
                    }
                }
                out.push((*x, dx));
            }
        }
        Op::ChannelPool(x, mode) => {
            if wants(*x) {
                let xv = val(*x);
                let (n, c, h, w) = xv.dims4().expect("4-D");
                let hw = h * w;
                let mut dx = vec![0.0; xv.numel()];
                let xd = xv.data();
                for s in 0..n {
                    for i in 0..hw {
                        let go = g[s * hw + i];
                        match mode {
                            PoolMode::Avg => {
                                for ch in 0..c {
                                    dx[(s * c + ch) * hw + i] += go / c as f64;
                                }
                            }
                            PoolMode::Sum => {
                                for ch in 0..c {
                                    dx[(s * c + ch) * hw + i] += go;
                                }
                            }
                            PoolMode::Max => {
                                let best = (0..c)
                                    .max_by(|&p, &q| {
                                        xd[(s * c + p) * hw + i]
                                            .partial_cmp(&xd[(s * c + q) * hw + i])
                                            .unwrap()
                                            .then(q.cmp(&p))
                                    })
                                    .unwrap();
                                dx[(s * c + best) * hw + i] += go;
                            }
                        }
                    }
                }
                out.push((*x, dx));
            }
        }
        Op::Softmax(x) => {
            if wants(*x) {
                let y = node.value.data();
                let last = *node.value.shape().last().unwrap();
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), dr) in y
                    .chunks_exact(last)
                    .zip(g.chunks_exact(last))
                    .zip(dx.chunks_exact_mut(last))
                {
                    let s: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, &yi), &gi) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yi * (gi - s);
                    }
                }
                out.push((*x, dx));
            }
        }
        Op::Concat(xs) => {
            let shape = node.value.shape();
            let n = shape[0];
            let total_c = shape[1];
            let inner: usize = shape[2..].iter().product();
            let mut offset = 0;
            for &v in xs {
                let c = val(v).shape()[1];
                if wants(v) {
                    let mut dx = Vec::with_capacity(n * c * inner);
                    for s in 0..n {
                        let start = (s * total_c + offset) * inner;
                        dx.extend_from_slice(&g[start..start + c * inner]);
                    }
                    out.push((v, dx));
                }
                offset += c;
            }
        }
        Op::Upsample2x(x) => {
            if wants(*x) {
                let xv = val(*x);
                let (n, c, h, w) = xv.dims4().expect("4-D");
                let ow = 2 * w;
                let mut dx = vec![0.0; xv.numel()];
                for plane in 0..n * c {
                    let src = &g[plane * 4 * h * w..(plane + 1) * 4 * h * w];
                    let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
                    for y in 0..2 * h {
                        for xx in 0..ow {
                            dst[(y / 2) * w + xx / 2] += src[y * ow + xx];
                        }
                    }
                }
                out.push((*x, dx));
            }
        }
        Op::Reshape(x) => {
            if wants(*x) {
                out.push((*x, g.to_vec()));
            }
        }
        Op::Normalize(x, kind, eps) => {
            if wants(*x) {
                let xv = val(*x);
                let (_, c, h, w) = xv.dims4().expect("4-D");
                let group = match kind {
                    NormKind::Instance => h * w,
                    NormKind::Layer => c * h * w,
                };
                let y = node.value.data();
                let mut dx = vec![0.0; y.len()];
                for (((xg, yg), gg), dg) in xv
                    .data()
                    .chunks_exact(group)
                    .zip(y.chunks_exact(group))
                    .zip(g.chunks_exact(group))
                    .zip(dx.chunks_exact_mut(group))
                {
                    let (_, inv_std) = group_stats(xg, *eps);
                    let m = group as f64;
                    let mean_g = gg.iter().sum::<f64>() / m;
                    let mean_gy = gg.iter().zip(yg).map(|(a, b)| a * b).sum::<f64>() / m;
                    for ((d, &gi), &yi) in dg.iter_mut().zip(gg).zip(yg) {
                        *d = inv_std * (gi - mean_g - yi * mean_gy);
                    }
                }
                out.push((*x, dx));
            }
        }
    }
    out
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

fn group_stats(xs: &[f64], eps: f64) -> (f64, f64) {
    let m = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / m;
    let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
    (mean, 1.0 / (var + eps).sqrt())
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

pub(crate) fn out_extent(size: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = size + 2 * pad;
    if padded < k {
        return Err(config_err!(
            "kernel extent {} exceeds padded input extent {}",
            k,
            padded
        ));
    }
    if (padded - k) % stride != 0 {
        return Err(config_err!(
            "input extent {} with kernel {}, stride {}, padding {} gives a non-integral output",
            size,
            k,
            stride,
            pad
        ));
    }
    Ok((padded - k) / stride + 1)
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b {
        return Ok(a.to_vec());
    }
    let (na, nb): (usize, usize) = (a.iter().product(), b.iter().product());
    if nb == 1 {
        return Ok(a.to_vec());
    }
    if na == 1 {
        return Ok(b.to_vec());
    }
    if a.len() != b.len() {
        return Err(shape_err!("cannot broadcast {:?} with {:?}", a, b));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, y) => Ok(y),
            (x, 1) => Ok(x),
            _ => Err(shape_err!("cannot broadcast {:?} with {:?}", a, b)),
        })
        .collect()
}

/// Strides of `shape` when read through `out` indices; zero on broadcast axes.
fn bcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let numel: usize = shape.iter().product();
    if numel == 1 {
        return vec![0; out.len()];
    }
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        strides[d] = if shape[d] == 1 && out[d] != 1 { 0 } else { acc };
        acc *= shape[d];
    }
    strides
}

fn for_each_bcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let total: usize = out.iter().product();
    if total == 0 {
        return;
    }
    if out.is_empty() {
        f(0, 0, 0);
        return;
    }
    let r = out.len();
    let inner = out[r - 1];
    let (ia_step, ib_step) = (sa[r - 1], sb[r - 1]);
    let mut idx = vec![0usize; r];
    let mut o = 0;
    while o < total {
        let base_a: usize = idx.iter().zip(sa).map(|(i, s)| i * s).sum();
        let base_b: usize = idx.iter().zip(sb).map(|(i, s)| i * s).sum();
        for k in 0..inner {
            f(o + k, base_a + k * ia_step, base_b + k * ib_step);
        }
        o += inner;
        // odometer over all but the last axis
        let mut d = r - 1;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}
