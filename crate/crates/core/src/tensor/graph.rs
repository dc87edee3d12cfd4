//! Reverse-mode tape. Every operation appends a node holding its forward
//! value; [`Graph::backward`] replays the tape in reverse creation order,
//! which is a valid topological order because a node can only reference
//! nodes created before it.

use super::conv::{self, Geom};
use super::{ActivationKind, Tensor};
use crate::error::{Error, Result};
use rand::Rng;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ConvKind {
    Standard,
    Depthwise,
    Pointwise,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddChannel(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Abs(Var),
    Sqrt(Var),
    Tanh(Var),
    Activate(Var, ActivationKind),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Narrow { x: Var, axis: usize, start: usize },
    Reduce { x: Var, axis: usize, mean: bool },
    SumAll(Var),
    Softmax(Var, f64),
    LogSoftmax(Var, f64),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Dropout(Var, Vec<f64>),
    Conv { x: Var, w: Var, kind: ConvKind, geom: Geom },
    GlobalAvgPool(Var),
    GatherRows(Var, Vec<usize>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A single forward/backward computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    macs: u64,
    check_finite: bool,
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let mut strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let new_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..data.len() {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(data[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < new_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out, new_shape)
}

fn matmul_into(a: &[f64], b: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * m..(p + 1) * m]) {
                *o += av * bv;
            }
        }
    }
}

// out[n,m] += a[n,k] * b[m,k]^T
fn matmul_bt_into(a: &[f64], b: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    for i in 0..n {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let br = &b[j * k..(j + 1) * k];
            out[i * m + j] += ar.iter().zip(br).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

// out[k,m] += a[n,k]^T * b[n,m]
fn matmul_at_into(a: &[f64], b: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    for i in 0..n {
        let br = &b[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in out[p * m..(p + 1) * m].iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            op,
            format!("shapes {:?} and {:?} differ", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn last_dim(op: &'static str, t: &Tensor) -> Result<usize> {
    t.shape()
        .last()
        .copied()
        .ok_or_else(|| Error::dim(op, "rank-0 tensor has no last axis"))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Graph that rejects any operation producing NaN or infinity.
    pub fn with_finite_check() -> Self {
        Self {
            check_finite: true,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulates performed by convolution kernels so far.
    pub fn mac_count(&self) -> u64 {
        self.macs
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated into a leaf by the last [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    fn push(&mut self, value: Tensor, op: Op, op_name: &'static str, needs_grad: bool) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(true);
        t.clear_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(false);
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(t, op, name, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn row_broadcast(
        &mut self,
        name: &'static str,
        x: Var,
        r: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (tx, tr) = (self.value(x), self.value(r));
        let n = last_dim(name, tx)?;
        if tr.rank() != 1 || tr.numel() != n {
            return Err(Error::dim(
                name,
                format!("row vector {:?} does not match last axis of {:?}", tr.shape(), tx.shape()),
            ));
        }
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| f(v, tr.data()[i % n]))
            .collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let needs = self.needs(x) || self.needs(r);
        self.push(t, op, name, needs)
    }

    /// `x + b` with `b` broadcast along the last axis.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        self.row_broadcast("add_row", x, b, |v, r| v + r, Op::AddRow(x, b))
    }

    /// `x * g` with `g` broadcast along the last axis.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Result<Var> {
        self.row_broadcast("mul_row", x, g, |v, r| v * r, Op::MulRow(x, g))
    }

    /// Per-channel bias on a `[B, C, H, W]` map.
    pub fn add_channel(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        if tx.rank() != 4 || tb.rank() != 1 || tb.numel() != tx.shape()[1] {
            return Err(Error::dim(
                "add_channel",
                format!("bias {:?} vs feature map {:?}", tb.shape(), tx.shape()),
            ));
        }
        let (c, hw) = (tx.shape()[1], tx.shape()[2] * tx.shape()[3]);
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + tb.data()[(i / hw) % c])
            .collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let needs = self.needs(x) || self.needs(b);
        self.push(t, Op::AddChannel(x, b), "add_channel", needs)
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let needs = self.needs(x);
        self.push(t, op, name, needs)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary("scale", x, |v| v * c, Op::Scale(x, c))
    }

    pub fn offset(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary("offset", x, |v| v + c, Op::Offset(x))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary("abs", x, f64::abs, Op::Abs(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary("sqrt", x, f64::sqrt, Op::Sqrt(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, f64::tanh, Op::Tanh(x))
    }

    pub fn activate(&mut self, x: Var, kind: ActivationKind) -> Result<Var> {
        if kind == ActivationKind::Identity {
            return Ok(x);
        }
        self.unary("activate", x, |v| kind.apply(v), Op::Activate(x, kind))
    }

    /// `[n, k] x [k, m] -> [n, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::dim(
                "matmul",
                format!("cannot multiply {:?} by {:?}", ta.shape(), tb.shape()),
            ));
        }
        let (n, k, m) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; n * m];
        matmul_into(ta.data(), tb.data(), n, k, m, &mut out);
        let t = Tensor::new(vec![n, m], out)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(t, Op::MatMul(a, b), "matmul", needs)
    }

    /// `[B, n, k] x [B, k, m] -> [B, n, m]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 3
            || tb.rank() != 3
            || ta.shape()[0] != tb.shape()[0]
            || ta.shape()[2] != tb.shape()[1]
        {
            return Err(Error::dim(
                "batch_matmul",
                format!("cannot multiply {:?} by {:?}", ta.shape(), tb.shape()),
            ));
        }
        let (bs, n, k, m) = (ta.shape()[0], ta.shape()[1], ta.shape()[2], tb.shape()[2]);
        let mut out = vec![0.0; bs * n * m];
        for i in 0..bs {
            matmul_into(
                &ta.data()[i * n * k..(i + 1) * n * k],
                &tb.data()[i * k * m..(i + 1) * k * m],
                n,
                k,
                m,
                &mut out[i * n * m..(i + 1) * n * m],
            );
        }
        let t = Tensor::new(vec![bs, n, m], out)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(t, Op::BatchMatMul(a, b), "batch_matmul", needs)
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let rank = tx.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::dim(
                "permute",
                format!("axes {axes:?} are not a permutation for {:?}", tx.shape()),
            ));
        }
        let (data, shape) = permute_data(tx.data(), tx.shape(), axes);
        let t = Tensor::new(shape, data)?;
        let needs = self.needs(x);
        self.push(t, Op::Permute(x, axes.to_vec()), "permute", needs)
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let rank = self.value(x).rank();
        if rank < 2 {
            return Err(Error::dim("transpose", "need rank >= 2"));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(x, &axes)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        let needs = self.needs(x);
        self.push(t, Op::Reshape(x), "reshape", needs)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat", "no inputs"))?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(Error::dim("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.value(*p).shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::dim(
                    "concat",
                    format!("{s:?} incompatible with {base:?} along axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = outer_inner(&base, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let t = self.value(*p);
                let block = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let t = Tensor::new(shape, out)?;
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(t, Op::Concat(parts.to_vec(), axis), "concat", needs)
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        if axis >= tx.rank() || len == 0 || start + len > tx.shape()[axis] {
            return Err(Error::dim(
                "narrow",
                format!("[{start}, {}) along axis {axis} of {:?}", start + len, tx.shape()),
            ));
        }
        let (outer, n, inner) = outer_inner(tx.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&tx.data()[base..base + len * inner]);
        }
        let mut shape = tx.shape().to_vec();
        shape[axis] = len;
        let t = Tensor::new(shape, out)?;
        let needs = self.needs(x);
        self.push(t, Op::Narrow { x, axis, start }, "narrow", needs)
    }

    fn reduce(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let tx = self.value(x);
        if axis >= tx.rank() {
            return Err(Error::dim("reduce", format!("axis {axis} out of range for {:?}", tx.shape())));
        }
        let (outer, n, inner) = outer_inner(tx.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..n {
                let src = &tx.data()[(o * n + a) * inner..(o * n + a + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        if mean {
            let inv = 1.0 / n as f64;
            out.iter_mut().for_each(|v| *v *= inv);
        }
        let mut shape: Vec<usize> = tx.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let t = Tensor::new(shape, out)?;
        let needs = self.needs(x);
        self.push(t, Op::Reduce { x, axis, mean }, "reduce", needs)
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, axis, false)
    }

    /// Mean over one axis, removing it.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, axis, true)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), "sum", needs)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    fn check_temperature(op: &'static str, temperature: f64) -> Result<()> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Config(format!("{op}: temperature must be > 0, got {temperature}")));
        }
        Ok(())
    }

    /// Softmax of `x / temperature` over the last axis.
    pub fn softmax(&mut self, x: Var, temperature: f64) -> Result<Var> {
        Self::check_temperature("softmax", temperature)?;
        let tx = self.value(x);
        let n = last_dim("softmax", tx)?;
        let mut out = Vec::with_capacity(tx.numel());
        for row in tx.data().chunks(n) {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let exps: Vec<f64> = row.iter().map(|&v| ((v - max) / temperature).exp()).collect();
            let z: f64 = exps.iter().sum();
            out.extend(exps.into_iter().map(|e| e / z));
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let needs = self.needs(x);
        self.push(t, Op::Softmax(x, temperature), "softmax", needs)
    }

    /// Log-softmax of `x / temperature` over the last axis.
    pub fn log_softmax(&mut self, x: Var, temperature: f64) -> Result<Var> {
        Self::check_temperature("log_softmax", temperature)?;
        let tx = self.value(x);
        let n = last_dim("log_softmax", tx)?;
        let mut out = Vec::with_capacity(tx.numel());
        for row in tx.data().chunks(n) {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v)) / temperature;
            let lse = max + row.iter().map(|&v| (v / temperature - max).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|&v| v / temperature - lse));
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let needs = self.needs(x);
        self.push(t, Op::LogSoftmax(x, temperature), "log_softmax", needs)
    }

    /// Normalize over the last axis (population variance), then scale and shift.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let n = last_dim("layer_norm", tx)?;
        if tg.shape() != [n] || tb.shape() != [n] {
            return Err(Error::dim(
                "layer_norm",
                format!(
                    "gain {:?} / bias {:?} do not match last axis of {:?}",
                    tg.shape(),
                    tb.shape(),
                    tx.shape()
                ),
            ));
        }
        let rows = tx.numel() / n;
        let mut xhat = Vec::with_capacity(tx.numel());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(tx.numel());
        for row in tx.data().chunks(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let denom = var + eps;
            let is = if denom > 0.0 { 1.0 / denom.sqrt() } else { 0.0 };
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * tg.data()[j] + tb.data()[j]);
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            "layer_norm",
            needs,
        )
    }

    /// Inverted dropout: kept units are scaled by `1 / (1 - rate)`. With
    /// `train == false` this is the identity and draws nothing from `rng`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, train: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate must be in [0, 1), got {rate}")));
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let tx = self.value(x);
        let mask: Vec<f64> = (0..tx.numel())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let data = tx.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let needs = self.needs(x);
        self.push(t, Op::Dropout(x, mask), "dropout", needs)
    }

    fn conv(&mut self, x: Var, w: Var, kind: ConvKind, stride: usize) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let name = match kind {
            ConvKind::Standard => "conv2d",
            ConvKind::Depthwise => "depthwise_conv2d",
            ConvKind::Pointwise => "pointwise_conv2d",
        };
        if tx.rank() != 4 {
            return Err(Error::dim(name, format!("input must be [B,C,H,W], got {:?}", tx.shape())));
        }
        let (b, c, h, wd) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
        let ws = tw.shape();
        let (out_c, k, ok) = match kind {
            ConvKind::Standard => (ws[0], *ws.last().unwrap_or(&0), ws.len() == 4 && ws[1] == c && ws[2] == ws[3]),
            ConvKind::Depthwise => (c, *ws.last().unwrap_or(&0), ws.len() == 3 && ws[0] == c && ws[1] == ws[2]),
            ConvKind::Pointwise => (ws[0], 1, ws.len() == 2 && ws[1] == c),
        };
        if !ok {
            return Err(Error::dim(
                name,
                format!("kernel {ws:?} incompatible with input {:?}", tx.shape()),
            ));
        }
        let stride = if kind == ConvKind::Pointwise { 1 } else { stride };
        let geom = Geom::new(b, c, out_c, h, wd, k, stride)
            .ok_or_else(|| Error::dim(name, format!("invalid geometry: kernel {k}, stride {stride}")))?;
        let mut out = vec![0.0; b * out_c * geom.oh * geom.ow];
        let macs = match kind {
            ConvKind::Standard => conv::standard_forward(tx.data(), tw.data(), &geom, &mut out),
            ConvKind::Depthwise => conv::depthwise_forward(tx.data(), tw.data(), &geom, &mut out),
            ConvKind::Pointwise => conv::pointwise_forward(tx.data(), tw.data(), &geom, &mut out),
        };
        self.macs += macs;
        let t = Tensor::new(vec![b, out_c, geom.oh, geom.ow], out)?;
        let needs = self.needs(x) || self.needs(w);
        self.push(t, Op::Conv { x, w, kind, geom }, name, needs)
    }

    /// Standard convolution, kernel `[N, M, k, k]`, "same" zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        self.conv(x, w, ConvKind::Standard, stride)
    }

    /// Per-channel spatial convolution, kernel `[C, k, k]`, "same" zero padding.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        self.conv(x, w, ConvKind::Depthwise, stride)
    }

    /// 1x1 cross-channel convolution, kernel `[N, M]`.
    pub fn pointwise_conv2d(&mut self, x: Var, w: Var) -> Result<Var> {
        self.conv(x, w, ConvKind::Pointwise, 1)
    }

    /// `[B, C, H, W] -> [B, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 4 {
            return Err(Error::dim("global_avg_pool", format!("expected [B,C,H,W], got {:?}", tx.shape())));
        }
        let (b, c, hw) = (tx.shape()[0], tx.shape()[1], tx.shape()[2] * tx.shape()[3]);
        let out = tx
            .data()
            .chunks(hw)
            .map(|ch| ch.iter().sum::<f64>() / hw as f64)
            .collect();
        let t = Tensor::new(vec![b, c], out)?;
        let needs = self.needs(x);
        self.push(t, Op::GlobalAvgPool(x), "global_avg_pool", needs)
    }

    /// Rows of a `[V, d]` table, e.g. an embedding lookup. Out-of-range
    /// indices are dimension errors.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        if tt.rank() != 2 || indices.is_empty() {
            return Err(Error::dim("gather_rows", format!("table {:?}, {} indices", tt.shape(), indices.len())));
        }
        let (v, d) = (tt.shape()[0], tt.shape()[1]);
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= v {
                return Err(Error::dim("gather_rows", format!("index {i} out of range for {v} rows")));
            }
            out.extend_from_slice(&tt.data()[i * d..(i + 1) * d]);
        }
        let t = Tensor::new(vec![indices.len(), d], out)?;
        let needs = self.needs(table);
        self.push(t, Op::GatherRows(table, indices.to_vec()), "gather_rows", needs)
    }

    /// `x W + b` for `x: [n, in]`, `W: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    /// Reverse sweep from a single-element output. Gradients are stored on
    /// every trainable leaf and can be read back with [`Graph::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let numel = self.value(loss).numel();
        if numel != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        for node in &mut self.nodes {
            node.value.clear_grad();
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].value.set_grad(gy)?;
                continue;
            }
            self.propagate(i, &gy, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let needs = |v: Var| nodes[v.0].needs_grad;
        let out = &nodes[i].value;

        fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; len])
        }
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if needs(v) {
                let len = val(v).numel();
                f(slot(grads, v, len));
            }
        };

        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |g| g.iter_mut().zip(gy).for_each(|(d, s)| *d += s));
                acc(*b, &mut |g| g.iter_mut().zip(gy).for_each(|(d, s)| *d += s));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |g| g.iter_mut().zip(gy).for_each(|(d, s)| *d += s));
                acc(*b, &mut |g| g.iter_mut().zip(gy).for_each(|(d, s)| *d -= s));
            }
            Op::Mul(a, b) => {
                let (da, db) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |g| {
                    for ((d, s), y) in g.iter_mut().zip(gy).zip(db) {
                        *d += s * y;
                    }
                });
                acc(*b, &mut |g| {
                    for ((d, s), x) in g.iter_mut().zip(gy).zip(da) {
                        *d += s * x;
                    }
                });
            }
            Op::Div(a, b) => {
                let (da, db) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |g| {
                    for ((d, s), y) in g.iter_mut().zip(gy).zip(db) {
                        *d += s / y;
                    }
                });
                acc(*b, &mut |g| {
                    for (((d, s), x), y) in g.iter_mut().zip(gy).zip(da).zip(db) {
                        *d -= s * x / (y * y);
                    }
                });
            }
            Op::AddRow(x, r) => {
                let n = val(*r).numel();
                acc(*x, &mut |g| g.iter_mut().zip(gy).for_each(|(d, s)| *d += s));
                acc(*r, &mut |g| {
                    for (j, s) in gy.iter().enumerate() {
                        g[j % n] += s;
                    }
                });
            }
            Op::MulRow(x, r) => {
                let (dx, dr) = (val(*x).data(), val(*r).data());
                let n = dr.len();
                acc(*x, &mut |g| {
                    for (j, (d, s)) in g.iter_mut().zip(gy).enumerate() {
                        *d += s * dr[j % n];
                    }
                });
                acc(*r, &mut |g| {
                    for (j, s) in gy.iter().enumerate() {
                        g[j % n] += s * dx[j];
                    }
                });
            }
            Op::AddChannel(x, b) => {
                let s = val(*x).shape();
                let (c, hw) = (s[1], s[2] * s[3]);
                acc(*x, &mut |g| g.iter_mut().zip(gy).for_each(|(d, s)| *d += s));
                acc(*b, &mut |g| {
                    for (j, s) in gy.iter().enumerate() {
                        g[(j / hw) % c] += s;
                    }
                });
            }
            Op::Scale(x, c) => {
                acc(*x, &mut |g| g.iter_mut().zip(gy).for_each(|(d, s)| *d += s * c));
            }
            Op::Offset(x) | Op::Reshape(x) => {
                acc(*x, &mut |g| g.iter_mut().zip(gy).for_each(|(d, s)| *d += s));
            }
            Op::Abs(x) => {
                let dx = val(*x).data();
                acc(*x, &mut |g| {
                    for ((d, s), v) in g.iter_mut().zip(gy).zip(dx) {
                        *d += s * if *v > 0.0 { 1.0 } else if *v < 0.0 { -1.0 } else { 0.0 };
                    }
                });
            }
            Op::Sqrt(x) => {
                let dy = out.data();
                acc(*x, &mut |g| {
                    for ((d, s), y) in g.iter_mut().zip(gy).zip(dy) {
                        if *y > 0.0 {
                            *d += s * 0.5 / y;
                        }
                    }
                });
            }
            Op::Tanh(x) => {
                let dy = out.data();
                acc(*x, &mut |g| {
                    for ((d, s), y) in g.iter_mut().zip(gy).zip(dy) {
                        *d += s * (1.0 - y * y);
                    }
                });
            }
            Op::Activate(x, kind) => {
                let dx = val(*x).data();
                acc(*x, &mut |g| {
                    for ((d, s), v) in g.iter_mut().zip(gy).zip(dx) {
                        *d += s * kind.derivative(*v);
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (n, k, m) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                acc(*a, &mut |g| matmul_bt_into(gy, tb.data(), n, m, k, g));
                acc(*b, &mut |g| matmul_at_into(ta.data(), gy, n, k, m, g));
            }
            Op::BatchMatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (bs, n, k, m) = (ta.shape()[0], ta.shape()[1], ta.shape()[2], tb.shape()[2]);
                acc(*a, &mut |g| {
                    for i in 0..bs {
                        matmul_bt_into(
                            &gy[i * n * m..(i + 1) * n * m],
                            &tb.data()[i * k * m..(i + 1) * k * m],
                            n,
                            m,
                            k,
                            &mut g[i * n * k..(i + 1) * n * k],
                        );
                    }
                });
                acc(*b, &mut |g| {
                    for i in 0..bs {
                        matmul_at_into(
                            &ta.data()[i * n * k..(i + 1) * n * k],
                            &gy[i * n * m..(i + 1) * n * m],
                            n,
                            k,
                            m,
                            &mut g[i * k * m..(i + 1) * k * m],
                        );
                    }
                });
            }
            Op::Permute(x, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let (back, _) = permute_data(gy, out.shape(), &inverse);
                acc(*x, &mut |g| g.iter_mut().zip(&back).for_each(|(d, s)| *d += s));
            }
            Op::Concat(parts, axis) => {
                let (outer, _, inner) = outer_inner(out.shape(), *axis);
                let total = out.shape()[*axis];
                let mut offset = 0;
                for p in parts {
                    let len = val(*p).shape()[*axis];
                    acc(*p, &mut |g| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * len * inner;
                            for j in 0..len * inner {
                                g[dst + j] += gy[src + j];
                            }
                        }
                    });
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let (outer, n, inner) = outer_inner(val(*x).shape(), *axis);
                let len = out.shape()[*axis];
                acc(*x, &mut |g| {
                    for o in 0..outer {
                        let dst = (o * n + start) * inner;
                        let src = o * len * inner;
                        for j in 0..len * inner {
                            g[dst + j] += gy[src + j];
                        }
                    }
                });
            }
            Op::Reduce { x, axis, mean } => {
                let (outer, n, inner) = outer_inner(val(*x).shape(), *axis);
                let scale = if *mean { 1.0 / n as f64 } else { 1.0 };
                acc(*x, &mut |g| {
                    for o in 0..outer {
                        for a in 0..n {
                            for j in 0..inner {
                                g[(o * n + a) * inner + j] += gy[o * inner + j] * scale;
                            }
                        }
                    }
                });
            }
            Op::SumAll(x) => {
                acc(*x, &mut |g| g.iter_mut().for_each(|d| *d += gy[0]));
            }
            Op::Softmax(x, temp) => {
                let n = *out.shape().last().unwrap_or(&1);
                let y = out.data();
                acc(*x, &mut |g| {
                    for r in 0..y.len() / n {
                        let row = r * n..(r + 1) * n;
                        let dot: f64 = gy[row.clone()].iter().zip(&y[row.clone()]).map(|(a, b)| a * b).sum();
                        for j in row {
                            g[j] += y[j] * (gy[j] - dot) / temp;
                        }
                    }
                });
            }
            Op::LogSoftmax(x, temp) => {
                let n = *out.shape().last().unwrap_or(&1);
                let y = out.data();
                acc(*x, &mut |g| {
                    for r in 0..y.len() / n {
                        let row = r * n..(r + 1) * n;
                        let total: f64 = gy[row.clone()].iter().sum();
                        for j in row {
                            g[j] += (gy[j] - y[j].exp() * total) / temp;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gd = val(*gain).data();
                let n = gd.len();
                acc(*gain, &mut |g| {
                    for (j, (s, h)) in gy.iter().zip(xhat).enumerate() {
                        g[j % n] += s * h;
                    }
                });
                acc(*bias, &mut |g| {
                    for (j, s) in gy.iter().enumerate() {
                        g[j % n] += s;
                    }
                });
                acc(*x, &mut |g| {
                    for (r, is) in inv_std.iter().enumerate() {
                        let row = r * n..(r + 1) * n;
                        let dh: Vec<f64> = gy[row.clone()].iter().zip(gd).map(|(s, w)| s * w).collect();
                        let mean_dh = dh.iter().sum::<f64>() / n as f64;
                        let mean_dh_h =
                            dh.iter().zip(&xhat[row.clone()]).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for (j, idx) in row.enumerate() {
                            g[idx] += is * (dh[j] - mean_dh - xhat[idx] * mean_dh_h);
                        }
                    }
                });
            }
            Op::Dropout(x, mask) => {
                acc(*x, &mut |g| {
                    for ((d, s), m) in g.iter_mut().zip(gy).zip(mask) {
                        *d += s * m;
                    }
                });
            }
            Op::Conv { x, w, kind, geom } => {
                let (tx, tw) = (val(*x).data(), val(*w).data());
                let backward = match kind {
                    ConvKind::Standard => conv::standard_backward,
                    ConvKind::Depthwise => conv::depthwise_backward,
                    ConvKind::Pointwise => conv::pointwise_backward,
                };
                acc(*x, &mut |g| backward(tx, tw, geom, gy, Some(g), None));
                acc(*w, &mut |g| backward(tx, tw, geom, gy, None, Some(g)));
            }
            Op::GlobalAvgPool(x) => {
                let s = val(*x).shape();
                let hw = s[2] * s[3];
                let inv = 1.0 / hw as f64;
                acc(*x, &mut |g| {
                    for (j, d) in g.iter_mut().enumerate() {
                        *d += gy[j / hw] * inv;
                    }
                });
            }
            Op::GatherRows(table, indices) => {
                let d = val(*table).shape()[1];
                acc(*table, &mut |g| {
                    for (r, &i) in indices.iter().enumerate() {
                        for j in 0..d {
                            g[i * d + j] += gy[r * d + j];
                        }
                    }
                });
            }
        }
    }
}
