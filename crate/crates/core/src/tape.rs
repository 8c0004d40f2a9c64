//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value and the inputs it
//! consumed. Nodes are appended in execution order, so walking the tape
//! backwards visits them in reverse topological order. A tape supports one
//! backward pass; record a fresh forward pass for the next one.

use crate::error::{Error, Result};
use crate::ops::{self, attention, conv, norm, pool, resize, Conv2dSpec};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a batch-norm node obtains its statistics.
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a> {
    /// Per-batch statistics. When `key` is set, the batch mean and unbiased
    /// variance are recorded for a later running-statistics update.
    Train { key: Option<usize> },
    /// Fixed running statistics.
    Eval { mean: &'a [f32], var: &'a [f32] },
}

/// Batch statistics observed by a training-mode batch-norm node.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub key: usize,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: Conv2dSpec,
    },
    MaxPool2x2 {
        x: Var,
        argmax: Vec<u32>,
    },
    Upsample {
        x: Var,
    },
    Relu(Var),
    Sigmoid(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f32>,
        inv_std: Vec<f32>,
        batch_stats: bool,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Matmul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    GlobalAvgPool(Var),
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale {
        x: Var,
        alpha: Var,
    },
    MulScalar(Var, f32),
    AddScalar(Var),
    Ln(Var),
    Clamp {
        x: Var,
        lo: f32,
        hi: f32,
    },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    BroadcastChannels(Var),
    ChannelMax {
        x: Var,
        argmax: Vec<u32>,
    },
    ChannelMean(Var),
    CrissCross {
        q: Var,
        k: Var,
        v: Var,
        attn: Vec<f32>,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Tensor>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
    bn_updates: Vec<BnUpdate>,
}

/// Splits a shape around `axis` into `(outer, axis_len, inner)`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("operands have shapes {:?} and {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn add_into(dst: &mut Option<Vec<f32>>, src: Vec<f32>) {
    match dst {
        Some(d) => d.iter_mut().zip(&src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src),
    }
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        value.debug_assert_finite("tape node");
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds an input tensor. Gradients are retained for leaves that require them.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn bn_updates(&self) -> &[BnUpdate] {
        &self.bn_updates
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let g = conv::geometry(
            self.shape(x),
            self.shape(w),
            b.map(|b| self.value(b).numel()),
            spec,
        )?;
        let y = conv::forward(
            &g,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let out = Tensor::new(vec![g.n, g.cout, g.ho, g.wo], y)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::Conv2d { x, w, b, spec }, &inputs))
    }

    pub fn maxpool2x2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if h < 2 || w < 2 {
            return Err(Error::Config(format!(
                "maxpool2x2 needs at least 2x2 input, got {h}x{w}"
            )));
        }
        let (y, argmax) = pool::maxpool2x2(self.value(x).data(), n * c, h, w);
        let out = Tensor::new(vec![n, c, h / 2, w / 2], y)?;
        Ok(self.push(out, Op::MaxPool2x2 { x, argmax }, &[x]))
    }

    pub fn upsample_bilinear(&mut self, x: Var, th: usize, tw: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if th == 0 || tw == 0 {
            return Err(Error::Config("upsample target must be non-empty".into()));
        }
        let y = resize::bilinear(self.value(x).data(), n * c, h, w, th, tw);
        let out = Tensor::new(vec![n, c, th, tw], y)?;
        Ok(self.push(out, Op::Upsample { x }, &[x]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(out, Op::Sigmoid(x), &[x])
    }

    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, mode: BnMode<'_>) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            if self.value(p).numel() != c {
                return Err(Error::shape(
                    "batch_norm",
                    format!("{name} has {} entries for {c} channels", self.value(p).numel()),
                ));
            }
        }
        let plane = h * w;
        let (y, mean, inv_std, batch_stats) = match mode {
            BnMode::Train { key } => {
                let f = norm::train_forward(
                    self.value(x).data(),
                    n,
                    c,
                    plane,
                    self.value(gamma).data(),
                    self.value(beta).data(),
                );
                if let Some(key) = key {
                    self.bn_updates.push(BnUpdate {
                        key,
                        mean: f.mean.clone(),
                        var: f.var_unbiased,
                    });
                }
                (f.y, f.mean, f.inv_std, true)
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape(
                        "batch_norm",
                        format!("running stats sized {} for {c} channels", mean.len()),
                    ));
                }
                let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + norm::BN_EPS).sqrt()).collect();
                let y = norm::apply(
                    self.value(x).data(),
                    n,
                    c,
                    plane,
                    mean,
                    &inv_std,
                    self.value(gamma).data(),
                    self.value(beta).data(),
                );
                (y, mean.to_vec(), inv_std, false)
            }
        };
        let out = Tensor::new(vec![n, c, h, w], y)?;
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(Error::Axis {
                axis,
                rank: t.rank(),
            });
        }
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let src = t.data();
        let mut y = vec![0.0f32; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| src[at(j)]).fold(f32::NEG_INFINITY, f32::max);
                let mut z = 0.0f64;
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    y[at(j)] = e;
                    z += e as f64;
                }
                let inv = (1.0 / z) as f32;
                for j in 0..len {
                    y[at(j)] *= inv;
                }
            }
        }
        let out = Tensor::new(t.shape().to_vec(), y)?;
        Ok(self.push(out, Op::Softmax { x, axis }, &[x]))
    }

    /// `[M,K]·[K,N]`, or batched `[B,M,K]·[B,K,N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (batch, m, k, k2, n) = match (sa, sb) {
            (&[m, k], &[k2, n]) => (1, m, k, k2, n),
            (&[ba, m, k], &[bb, k2, n]) if ba == bb => (ba, m, k, k2, n),
            _ => {
                return Err(Error::shape(
                    "matmul",
                    format!("unsupported operand shapes {sa:?} and {sb:?}"),
                ))
            }
        };
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dimensions differ: {sa:?} x {sb:?}"),
            ));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut y = vec![0.0f32; batch * m * n];
        for i in 0..batch {
            ops::gemm(
                m,
                k,
                n,
                &ad[i * m * k..],
                false,
                &bd[i * k * n..],
                false,
                0.0,
                &mut y[i * m * n..(i + 1) * m * n],
            );
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let out = Tensor::new(shape, y)?;
        Ok(self.push(
            out,
            Op::Matmul {
                a,
                b,
                batch,
                m,
                k,
                n,
            },
            &[a, b],
        ))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let y = pool::global_avg_pool(self.value(x).data(), n * c, h * w);
        let out = Tensor::new(vec![n, c, 1, 1], y)?;
        Ok(self.push(out, Op::GlobalAvgPool(x), &[x]))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Axis {
                axis,
                rank: base.len(),
            });
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::shape(
                    "concat",
                    format!("shape {s:?} incompatible with {base:?} off axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut y = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis] * inner;
                y.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::new(shape, y)?;
        Ok(self.push(
            out,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            xs,
        ))
    }

    /// Slice `start..start+len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Axis {
                axis,
                rank: shape.len(),
            });
        }
        if start + len > shape[axis] {
            return Err(Error::shape(
                "narrow",
                format!("range {start}..{} exceeds axis size {}", start + len, shape[axis]),
            ));
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut y = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            y.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let out = Tensor::new(out_shape, y)?;
        Ok(self.push(out, Op::Narrow { x, axis, start }, &[x]))
    }

    fn zip_with(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(op, ta, tb)?;
        Tensor::new(
            ta.shape().to_vec(),
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect(),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("sub", a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("div", a, b, |x, y| x / y)?;
        Ok(self.push(out, Op::Div(a, b), &[a, b]))
    }

    /// `alpha · x` for a single-element `alpha` that may be trainable.
    pub fn scale(&mut self, x: Var, alpha: Var) -> Result<Var> {
        if self.value(alpha).numel() != 1 {
            return Err(Error::shape(
                "scale",
                format!("alpha must hold one value, got {:?}", self.shape(alpha)),
            ));
        }
        let s = self.value(alpha).item();
        let out = self.value(x).map(|v| s * v);
        Ok(self.push(out, Op::Scale { x, alpha }, &[x, alpha]))
    }

    pub fn mul_scalar(&mut self, x: Var, c: f32) -> Var {
        let out = self.value(x).map(|v| c * v);
        self.push(out, Op::MulScalar(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f32) -> Var {
        let out = self.value(x).map(|v| v + c);
        self.push(out, Op::AddScalar(x), &[x])
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f32::ln);
        self.push(out, Op::Ln(x), &[x])
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(&mut self, x: Var, lo: f32, hi: f32) -> Var {
        let out = self.value(x).map(|v| v.clamp(lo, hi));
        self.push(out, Op::Clamp { x, lo, hi }, &[x])
    }

    /// Sum of all elements, accumulated in f64.
    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum_f64() as f32);
        self.push(out, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::scalar((t.sum_f64() / t.numel() as f64) as f32);
        self.push(out, Op::Mean(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Repeats an `N×1×H×W` map across `c` channels.
    pub fn broadcast_channels(&mut self, x: Var, c: usize) -> Result<Var> {
        let (n, one, h, w) = self.value(x).dims4()?;
        if one != 1 {
            return Err(Error::shape(
                "broadcast_channels",
                format!("expected a single channel, got {one}"),
            ));
        }
        let src = self.value(x).data();
        let plane = h * w;
        let mut y = Vec::with_capacity(n * c * plane);
        for b in 0..n {
            for _ in 0..c {
                y.extend_from_slice(&src[b * plane..(b + 1) * plane]);
            }
        }
        let out = Tensor::new(vec![n, c, h, w], y)?;
        Ok(self.push(out, Op::BroadcastChannels(x), &[x]))
    }

    pub fn channel_max(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let (y, argmax) = pool::channel_max(self.value(x).data(), n, c, h * w);
        let out = Tensor::new(vec![n, 1, h, w], y)?;
        Ok(self.push(out, Op::ChannelMax { x, argmax }, &[x]))
    }

    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let y = pool::channel_mean(self.value(x).data(), n, c, h * w);
        let out = Tensor::new(vec![n, 1, h, w], y)?;
        Ok(self.push(out, Op::ChannelMean(x), &[x]))
    }

    /// Criss-cross aggregation of `v[N,C,H,W]` under single-channel
    /// queries/keys `q, k[N,1,H,W]` (see [`crate::ops::attention`]).
    pub fn criss_cross(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(v).dims4()?;
        for (name, t) in [("query", q), ("key", k)] {
            if self.shape(t) != [n, 1, h, w] {
                return Err(Error::shape(
                    "criss_cross",
                    format!("{name} must be {:?}, got {:?}", [n, 1, h, w], self.shape(t)),
                ));
            }
        }
        let (y, attn) = attention::forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            n,
            c,
            h,
            w,
        );
        let out = Tensor::new(vec![n, c, h, w], y)?;
        Ok(self.push(out, Op::CrissCross { q, k, v, attn }, &[q, k, v]))
    }

    /// Criss-cross attention weights recorded by a [`Tape::criss_cross`] node,
    /// laid out `[N, H*W, H+W-1]`.
    pub fn criss_cross_weights(&self, node: Var) -> Option<&[f32]> {
        match &self.nodes[node.0].op {
            Op::CrissCross { attn, .. } => Some(attn),
            _ => None,
        }
    }

    /// Back-propagates from a scalar `loss`, filling the gradients of every
    /// leaf that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f32>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                let shape = self.nodes[i].value.shape().to_vec();
                self.nodes[i].grad = Some(Tensor::new(shape, g)?);
                continue;
            }
            self.propagate(i, g, &mut grads)?;
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: Vec<f32>, grads: &mut [Option<Vec<f32>>]) -> Result<()> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut send = |v: Var, d: Vec<f32>| {
            if self.nodes[v.0].requires_grad {
                add_into(&mut grads[v.0], d);
            }
        };
        match &node.op {
            Op::Leaf => unreachable!(),
            Op::Conv2d { x, w, b, spec } => {
                let geom = conv::geometry(
                    val(*x).shape(),
                    val(*w).shape(),
                    b.map(|b| val(b).numel()),
                    *spec,
                )?;
                let need_db = b.is_some_and(wants);
                let r = conv::backward(
                    &geom,
                    val(*x).data(),
                    val(*w).data(),
                    &g,
                    (wants(*x), wants(*w), need_db),
                );
                if let Some(dx) = r.dx {
                    send(*x, dx);
                }
                if let Some(dw) = r.dw {
                    send(*w, dw);
                }
                if let (Some(b), Some(db)) = (b, r.db) {
                    send(*b, db);
                }
            }
            Op::MaxPool2x2 { x, argmax } => {
                let mut dx = vec![0.0; val(*x).numel()];
                for (&a, &gv) in argmax.iter().zip(&g) {
                    dx[a as usize] += gv;
                }
                send(*x, dx);
            }
            Op::Upsample { x } => {
                let (n, c, h, w) = val(*x).dims4()?;
                let (_, _, th, tw) = node.value.dims4()?;
                send(*x, resize::bilinear_backward(&g, n * c, h, w, th, tw));
            }
            Op::Relu(x) => {
                let dx = val(*x)
                    .data()
                    .iter()
                    .zip(&g)
                    .map(|(&v, &d)| if v > 0.0 { d } else { 0.0 })
                    .collect();
                send(*x, dx);
            }
            Op::Sigmoid(x) => {
                let dx = node
                    .value
                    .data()
                    .iter()
                    .zip(&g)
                    .map(|(&s, &d)| d * s * (1.0 - s))
                    .collect();
                send(*x, dx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            } => {
                let (n, c, h, w) = val(*x).dims4()?;
                let r = norm::backward(
                    val(*x).data(),
                    &g,
                    n,
                    c,
                    h * w,
                    mean,
                    inv_std,
                    val(*gamma).data(),
                    *batch_stats,
                );
                send(*x, r.dx);
                send(*gamma, r.dgamma);
                send(*beta, r.dbeta);
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                let mut dx = vec![0.0f32; y.len()];
                for o in 0..outer {
                    for k in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + k;
                        let dot: f32 = (0..len).map(|j| y[at(j)] * g[at(j)]).sum();
                        for j in 0..len {
                            dx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                send(*x, dx);
            }
            Op::Matmul {
                a,
                b,
                batch,
                m,
                k,
                n,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let (ad, bd) = (val(*a).data(), val(*b).data());
                if wants(*a) {
                    let mut da = vec![0.0f32; batch * m * k];
                    for bi in 0..*batch {
                        // dA = dC · Bᵀ
                        ops::gemm(
                            m,
                            n,
                            k,
                            &g[bi * m * n..],
                            false,
                            &bd[bi * k * n..],
                            true,
                            0.0,
                            &mut da[bi * m * k..(bi + 1) * m * k],
                        );
                    }
                    send(*a, da);
                }
                if wants(*b) {
                    let mut db = vec![0.0f32; batch * k * n];
                    for bi in 0..*batch {
                        // dB = Aᵀ · dC
                        ops::gemm(
                            k,
                            m,
                            n,
                            &ad[bi * m * k..],
                            true,
                            &g[bi * m * n..],
                            false,
                            0.0,
                            &mut db[bi * k * n..(bi + 1) * k * n],
                        );
                    }
                    send(*b, db);
                }
            }
            Op::GlobalAvgPool(x) => {
                let (_, _, h, w) = val(*x).dims4()?;
                let plane = h * w;
                let inv = 1.0 / plane as f32;
                let dx = g
                    .iter()
                    .flat_map(|&d| std::iter::repeat_n(d * inv, plane))
                    .collect();
                send(*x, dx);
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in xs {
                    let len = val(v).shape()[*axis];
                    if wants(v) {
                        let mut dx = Vec::with_capacity(val(v).numel());
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            dx.extend_from_slice(&g[base..base + len * inner]);
                        }
                        send(v, dx);
                    }
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let (outer, full, inner) = split_axis(val(*x).shape(), *axis);
                let len = node.value.shape()[*axis];
                let mut dx = vec![0.0f32; val(*x).numel()];
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    dx[base..base + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                send(*x, dx);
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g);
            }
            Op::Sub(a, b) => {
                send(*b, g.iter().map(|v| -v).collect());
                send(*a, g);
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (val(*a).data(), val(*b).data());
                send(*a, g.iter().zip(bd).map(|(d, y)| d * y).collect());
                send(*b, g.iter().zip(ad).map(|(d, x)| d * x).collect());
            }
            Op::Div(a, b) => {
                let (ad, bd) = (val(*a).data(), val(*b).data());
                let db = g
                    .iter()
                    .zip(ad.iter().zip(bd))
                    .map(|(d, (x, y))| -d * x / (y * y))
                    .collect();
                send(*a, g.iter().zip(bd).map(|(d, y)| d / y).collect());
                send(*b, db);
            }
            Op::Scale { x, alpha } => {
                let s = val(*alpha).item();
                let dalpha: f64 = g
                    .iter()
                    .zip(val(*x).data())
                    .map(|(&d, &v)| d as f64 * v as f64)
                    .sum();
                send(*alpha, vec![dalpha as f32]);
                send(*x, g.iter().map(|d| d * s).collect());
            }
            Op::MulScalar(x, c) => send(*x, g.iter().map(|d| d * c).collect()),
            Op::AddScalar(x) => send(*x, g),
            Op::Ln(x) => {
                let dx = val(*x).data().iter().zip(&g).map(|(v, d)| d / v).collect();
                send(*x, dx);
            }
            Op::Clamp { x, lo, hi } => {
                let dx = val(*x)
                    .data()
                    .iter()
                    .zip(&g)
                    .map(|(&v, &d)| if v < *lo || v > *hi { 0.0 } else { d })
                    .collect();
                send(*x, dx);
            }
            Op::Sum(x) => send(*x, vec![g[0]; val(*x).numel()]),
            Op::Mean(x) => {
                let n = val(*x).numel();
                send(*x, vec![g[0] / n as f32; n]);
            }
            Op::Reshape(x) => send(*x, g),
            Op::BroadcastChannels(x) => {
                let (n, c, h, w) = node.value.dims4()?;
                let plane = h * w;
                let mut dx = vec![0.0f32; n * plane];
                for b in 0..n {
                    let dst = &mut dx[b * plane..(b + 1) * plane];
                    for ch in 0..c {
                        let src = &g[(b * c + ch) * plane..(b * c + ch + 1) * plane];
                        dst.iter_mut().zip(src).for_each(|(a, s)| *a += s);
                    }
                }
                send(*x, dx);
            }
            Op::ChannelMax { x, argmax } => {
                let (n, c, h, w) = val(*x).dims4()?;
                let plane = h * w;
                let mut dx = vec![0.0f32; n * c * plane];
                for b in 0..n {
                    for p in 0..plane {
                        let ch = argmax[b * plane + p] as usize;
                        dx[(b * c + ch) * plane + p] += g[b * plane + p];
                    }
                }
                send(*x, dx);
            }
            Op::ChannelMean(x) => {
                let (n, c, h, w) = val(*x).dims4()?;
                let plane = h * w;
                let inv = 1.0 / c as f32;
                let mut dx = Vec::with_capacity(n * c * plane);
                for b in 0..n {
                    for _ in 0..c {
                        dx.extend(g[b * plane..(b + 1) * plane].iter().map(|d| d * inv));
                    }
                }
                send(*x, dx);
            }
            Op::CrissCross { q, k, v, attn } => {
                let (n, c, h, w) = val(*v).dims4()?;
                let r = attention::backward(
                    val(*q).data(),
                    val(*k).data(),
                    val(*v).data(),
                    attn,
                    &g,
                    n,
                    c,
                    h,
                    w,
                );
                send(*q, r.dq);
                send(*k, r.dk);
                send(*v, r.dv);
            }
        }
        Ok(())
    }
}
