//! Append-only reverse-mode differentiation graph.
//!
//! Every node stores its forward value. Inputs always carry smaller ids than
//! the node that consumes them, so a single descending sweep from the root
//! visits nodes in a valid reverse topological order. Gradients are only
//! propagated through nodes that (transitively) depend on a leaf created with
//! `requires_grad = true`.
//!
//! Feature maps use the `[C, H, W]` layout, conv kernels `[Co, Ci, KH, KW]`,
//! and reductions produce scalars of shape `[]`.

mod conv;
pub mod gradcheck;

pub use conv::Padding;
pub use gradcheck::{grad_check, grad_check_subset, GradCheckReport};

use crate::error::{Error, Result};
use crate::grid::Tensor;
use conv::ConvGeom;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Max(NodeId, NodeId),
    ScalarMul(NodeId, f64),
    AddScalar(NodeId),
    MaxScalar(NodeId, f64),
    ClampRange(NodeId, f64, f64),
    Powf(NodeId, f64),
    Exp(NodeId),
    Ln(NodeId),
    Relu(NodeId),
    LeakyRelu(NodeId, f64),
    Sigmoid(NodeId),
    Tanh01(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    ChannelMean(NodeId),
    ChannelLogSumExp(NodeId, f64),
    SliceChannels(NodeId, usize),
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        geom: ConvGeom,
    },
    /// Selected input offset per output cell (row-major first on ties).
    Pool3(NodeId, Vec<u32>),
    Downsample2(NodeId),
    Upsample2(NodeId),
    InstanceNorm { input: NodeId, inv_std: Vec<f64> },
    Crop {
        input: NodeId,
        top: usize,
        left: usize,
    },
    PadReplicate(NodeId, usize),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
}

fn same_shape(g: &Graph, a: NodeId, b: NodeId, what: &str) -> Result<()> {
    let (sa, sb) = (g.value(a).shape(), g.value(b).shape());
    if sa != sb {
        return Err(Error::Dimension(format!(
            "{what}: shape mismatch {sa:?} vs {sb:?}"
        )));
    }
    Ok(())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Input or parameter leaf.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(Op::Leaf, value, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn scalar_const(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.item()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        same_shape(self, a, b, what)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(op, value, rg))
    }

    fn unary(&mut self, a: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let value = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(op, value, rg)
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

    /// Elementwise maximum; the gradient goes to `a` on ties.
    pub fn max(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "max", |x, y| if x >= y { x } else { y }, Op::Max(a, b))
    }

    pub fn scalar_mul(&mut self, a: NodeId, s: f64) -> NodeId {
        self.unary(a, |x| x * s, Op::ScalarMul(a, s))
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> NodeId {
        self.unary(a, |x| x + s, Op::AddScalar(a))
    }

    /// `max(a, floor)`; gradient passes where `a >= floor`.
    pub fn max_scalar(&mut self, a: NodeId, floor: f64) -> NodeId {
        self.unary(a, |x| x.max(floor), Op::MaxScalar(a, floor))
    }

    /// Clamp into `[lo, hi]`; gradient passes inside the closed interval.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        self.unary(a, |x| x.clamp(lo, hi), Op::ClampRange(a, lo, hi))
    }

    pub fn clamp01(&mut self, a: NodeId) -> NodeId {
        self.clamp(a, 0.0, 1.0)
    }

    pub fn powf(&mut self, a: NodeId, p: f64) -> NodeId {
        self.unary(a, |x| x.powf(p), Op::Powf(a, p))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::ln, Op::Ln(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: NodeId, alpha: f64) -> NodeId {
        self.unary(
            a,
            |x| if x > 0.0 { x } else { alpha * x },
            Op::LeakyRelu(a, alpha),
        )
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    /// `(tanh(x) + 1) / 2`, mapping the reals onto (0, 1).
    pub fn tanh01(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| 0.5 * (x.tanh() + 1.0), Op::Tanh01(a))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.scalar_mul(a, -1.0)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Op::Sum(a), Tensor::scalar(s), rg)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let s: f64 = v.data().iter().sum();
        let m = s / v.len() as f64;
        let rg = self.rg(&[a]);
        self.push(Op::Mean(a), Tensor::scalar(m), rg)
    }

    /// `[C, H, W] -> [C]` spatial mean per channel.
    pub fn channel_mean(&mut self, a: NodeId) -> Result<NodeId> {
        let (c, h, w) = self.value(a).chw()?;
        let n = h * w;
        let data = self
            .value(a)
            .data()
            .chunks(n)
            .map(|ch| ch.iter().sum::<f64>() / n as f64)
            .collect();
        let rg = self.rg(&[a]);
        Ok(self.push(Op::ChannelMean(a), Tensor::new(vec![c], data)?, rg))
    }

    /// `[C, H, W] -> [1, H, W]`, `(1/t) · ln Σ_c exp(t · x_c)` per pixel.
    pub fn channel_logsumexp(&mut self, a: NodeId, temperature: f64) -> Result<NodeId> {
        let (c, h, w) = self.value(a).chw()?;
        let n = h * w;
        let x = self.value(a).data();
        let mut out = vec![0.0; n];
        for (p, o) in out.iter_mut().enumerate() {
            let m = (0..c).map(|k| x[k * n + p]).fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = (0..c)
                .map(|k| (temperature * (x[k * n + p] - m)).exp())
                .sum();
            *o = m + s.ln() / temperature;
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            Op::ChannelLogSumExp(a, temperature),
            Tensor::new(vec![1, h, w], out)?,
            rg,
        ))
    }

    pub fn slice_channels(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (c, h, w) = self.value(a).chw()?;
        if len == 0 || start + len > c {
            return Err(Error::Dimension(format!(
                "channel slice {start}..{} out of range for {c} channels",
                start + len
            )));
        }
        let n = h * w;
        let data = self.value(a).data()[start * n..(start + len) * n].to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(
            Op::SliceChannels(a, start),
            Tensor::new(vec![len, h, w], data)?,
            rg,
        ))
    }

    /// Cross-correlation of a `[Ci, H, W]` input with `[Co, Ci, KH, KW]`
    /// kernels and an optional `[Co]` bias.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: Padding,
    ) -> Result<NodeId> {
        let geom = ConvGeom::new(
            self.value(input).chw()?,
            self.value(kernel).shape(),
            stride,
            padding,
        )?;
        if let Some(b) = bias {
            if self.value(b).shape() != [geom.co] {
                return Err(Error::Dimension(format!(
                    "bias shape {:?} does not match {} output channels",
                    self.value(b).shape(),
                    geom.co
                )));
            }
        }
        let out = conv::forward(
            &geom,
            self.value(input).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
        );
        let mut deps = vec![input, kernel];
        deps.extend(bias);
        let rg = self.rg(&deps);
        Ok(self.push(
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            Tensor::new(vec![geom.co, geom.ho, geom.wo], out)?,
            rg,
        ))
    }

    fn pool3(&mut self, a: NodeId, take_max: bool) -> Result<NodeId> {
        let (c, h, w) = self.value(a).chw()?;
        let x = self.value(a).data();
        let mut out = vec![0.0; c * h * w];
        let mut arg = vec![0u32; c * h * w];
        for ch in 0..c {
            let base = ch * h * w;
            for r in 0..h {
                for col in 0..w {
                    let mut best_i = usize::MAX;
                    let mut best = 0.0;
                    for rr in r.saturating_sub(1)..=(r + 1).min(h - 1) {
                        for cc in col.saturating_sub(1)..=(col + 1).min(w - 1) {
                            let i = base + rr * w + cc;
                            let v = x[i];
                            let better = if take_max { v > best } else { v < best };
                            if best_i == usize::MAX || better {
                                best = v;
                                best_i = i;
                            }
                        }
                    }
                    out[base + r * w + col] = best;
                    arg[base + r * w + col] = best_i as u32;
                }
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Pool3(a, arg), Tensor::new(vec![c, h, w], out)?, rg))
    }

    /// 3×3 stride-1 minimum over in-bounds neighbours.
    pub fn minpool3(&mut self, a: NodeId) -> Result<NodeId> {
        self.pool3(a, false)
    }

    /// 3×3 stride-1 maximum over in-bounds neighbours.
    pub fn maxpool3(&mut self, a: NodeId) -> Result<NodeId> {
        self.pool3(a, true)
    }

    /// Mean of non-overlapping 2×2 blocks; an odd trailing row/column is dropped.
    pub fn downsample2(&mut self, a: NodeId) -> Result<NodeId> {
        let (c, h, w) = self.value(a).chw()?;
        let (ho, wo) = (h / 2, w / 2);
        if ho == 0 || wo == 0 {
            return Err(Error::Dimension(format!("cannot downsample {h}x{w}")));
        }
        let x = self.value(a).data();
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            for r in 0..ho {
                for col in 0..wo {
                    let i = (ch * h + 2 * r) * w + 2 * col;
                    out[(ch * ho + r) * wo + col] = 0.25 * (x[i] + x[i + 1] + x[i + w] + x[i + w + 1]);
                }
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Downsample2(a), Tensor::new(vec![c, ho, wo], out)?, rg))
    }

    /// Nearest-neighbour ×2 upsampling.
    pub fn upsample2(&mut self, a: NodeId) -> Result<NodeId> {
        let (c, h, w) = self.value(a).chw()?;
        let (ho, wo) = (2 * h, 2 * w);
        let x = self.value(a).data();
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            for r in 0..ho {
                for col in 0..wo {
                    out[(ch * ho + r) * wo + col] = x[(ch * h + r / 2) * w + col / 2];
                }
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Upsample2(a), Tensor::new(vec![c, ho, wo], out)?, rg))
    }

    /// Per-channel standardisation with biased variance.
    pub fn instance_norm(&mut self, a: NodeId, eps: f64) -> Result<NodeId> {
        let (c, h, w) = self.value(a).chw()?;
        let n = h * w;
        let x = self.value(a).data();
        let mut out = vec![0.0; c * n];
        let mut inv_std = Vec::with_capacity(c);
        for ch in 0..c {
            let xs = &x[ch * n..(ch + 1) * n];
            let mu = xs.iter().sum::<f64>() / n as f64;
            let var = xs.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            for (o, v) in out[ch * n..(ch + 1) * n].iter_mut().zip(xs) {
                *o = (v - mu) * is;
            }
            inv_std.push(is);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            Op::InstanceNorm { input: a, inv_std },
            Tensor::new(vec![c, h, w], out)?,
            rg,
        ))
    }

    pub fn crop(&mut self, a: NodeId, top: usize, left: usize, h: usize, w: usize) -> Result<NodeId> {
        let (c, ih, iw) = self.value(a).chw()?;
        if h == 0 || w == 0 || top + h > ih || left + w > iw {
            return Err(Error::Dimension(format!(
                "crop {h}x{w} at ({top},{left}) exceeds {ih}x{iw}"
            )));
        }
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for r in 0..h {
                let s = (ch * ih + top + r) * iw + left;
                out.extend_from_slice(&x[s..s + w]);
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            Op::Crop { input: a, top, left },
            Tensor::new(vec![c, h, w], out)?,
            rg,
        ))
    }

    /// Pads each side by `n` cells repeating the nearest edge value.
    pub fn pad_replicate(&mut self, a: NodeId, n: usize) -> Result<NodeId> {
        let (c, h, w) = self.value(a).chw()?;
        let (ho, wo) = (h + 2 * n, w + 2 * n);
        let x = self.value(a).data();
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            for r in 0..ho {
                let sr = r.saturating_sub(n).min(h - 1);
                for col in 0..wo {
                    let sc = col.saturating_sub(n).min(w - 1);
                    out[(ch * ho + r) * wo + col] = x[(ch * h + sr) * w + sc];
                }
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Op::PadReplicate(a, n), Tensor::new(vec![c, ho, wo], out)?, rg))
    }

    /// Clears accumulated gradients so `backward` may run again.
    pub fn zero_grad(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    /// Gradient of `root` w.r.t. every node, `None` where no path exists.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient w.r.t. `id`, zeros when unreachable from the root.
    pub fn grad_or_zeros(&self, id: NodeId) -> Tensor {
        self.grad(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.value(id).shape()))
    }

    /// Reverse sweep from a one-element `root`.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.value(root).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.value(root).shape()
            )));
        }
        self.backward_done = true;
        self.grads = vec![None; self.nodes.len()];
        self.grads[root.0] = Some(Tensor::filled(self.value(root).shape(), 1.0));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &gout)?;
            self.grads[i] = Some(gout);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, g: Tensor) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut self.grads[id.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate_with(&mut self, id: NodeId, f: impl FnOnce(&Graph) -> Tensor) {
        if self.nodes[id.0].requires_grad {
            let g = f(self);
            self.accumulate(id, g);
        }
    }

    fn propagate(&mut self, i: usize, gout: &Tensor) -> Result<()> {
        let op = self.nodes[i].op.clone();
        let shape_of = |g: &Graph, id: NodeId| g.value(id).shape().to_vec();
        let ew = |g: &Graph, id: NodeId, f: &dyn Fn(usize, f64) -> f64| -> Tensor {
            let data = gout.data().iter().enumerate().map(|(k, &d)| f(k, d)).collect();
            Tensor::new(shape_of(g, id), data).expect("gradient shape follows the forward shape")
        };
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate_with(a, |_| gout.clone());
                self.accumulate_with(b, |_| gout.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate_with(a, |_| gout.clone());
                self.accumulate_with(b, |_| gout.map(|d| -d));
            }
            Op::Mul(a, b) => {
                self.accumulate_with(a, |g| {
                    let vb = g.value(b).data();
                    ew(g, a, &|k, d| d * vb[k])
                });
                self.accumulate_with(b, |g| {
                    let va = g.value(a).data();
                    ew(g, b, &|k, d| d * va[k])
                });
            }
            Op::Div(a, b) => {
                self.accumulate_with(a, |g| {
                    let vb = g.value(b).data();
                    ew(g, a, &|k, d| d / vb[k])
                });
                self.accumulate_with(b, |g| {
                    let (va, vb) = (g.value(a).data(), g.value(b).data());
                    ew(g, b, &|k, d| -d * va[k] / (vb[k] * vb[k]))
                });
            }
            Op::Max(a, b) => {
                self.accumulate_with(a, |g| {
                    let (va, vb) = (g.value(a).data(), g.value(b).data());
                    ew(g, a, &|k, d| if va[k] >= vb[k] { d } else { 0.0 })
                });
                self.accumulate_with(b, |g| {
                    let (va, vb) = (g.value(a).data(), g.value(b).data());
                    ew(g, b, &|k, d| if va[k] >= vb[k] { 0.0 } else { d })
                });
            }
            Op::ScalarMul(a, s) => self.accumulate_with(a, |_| gout.map(|d| d * s)),
            Op::AddScalar(a) => self.accumulate_with(a, |_| gout.clone()),
            Op::MaxScalar(a, floor) => self.accumulate_with(a, |g| {
                let va = g.value(a).data();
                ew(g, a, &|k, d| if va[k] >= floor { d } else { 0.0 })
            }),
            Op::ClampRange(a, lo, hi) => self.accumulate_with(a, |g| {
                let va = g.value(a).data();
                ew(g, a, &|k, d| if va[k] >= lo && va[k] <= hi { d } else { 0.0 })
            }),
            Op::Powf(a, p) => self.accumulate_with(a, |g| {
                let va = g.value(a).data();
                ew(g, a, &|k, d| d * p * va[k].powf(p - 1.0))
            }),
            Op::Exp(a) => {
                let out = self.value(NodeId(i)).data().to_vec();
                self.accumulate_with(a, |g| ew(g, a, &|k, d| d * out[k]));
            }
            Op::Ln(a) => self.accumulate_with(a, |g| {
                let va = g.value(a).data();
                ew(g, a, &|k, d| d / va[k])
            }),
            Op::Relu(a) => self.accumulate_with(a, |g| {
                let va = g.value(a).data();
                ew(g, a, &|k, d| if va[k] > 0.0 { d } else { 0.0 })
            }),
            Op::LeakyRelu(a, alpha) => self.accumulate_with(a, |g| {
                let va = g.value(a).data();
                ew(g, a, &|k, d| if va[k] > 0.0 { d } else { alpha * d })
            }),
            Op::Sigmoid(a) => {
                let out = self.value(NodeId(i)).data().to_vec();
                self.accumulate_with(a, |g| ew(g, a, &|k, d| d * out[k] * (1.0 - out[k])));
            }
            Op::Tanh01(a) => self.accumulate_with(a, |g| {
                let va = g.value(a).data();
                ew(g, a, &|k, d| {
                    let t = va[k].tanh();
                    0.5 * d * (1.0 - t * t)
                })
            }),
            Op::Sum(a) => {
                let d = gout.item();
                self.accumulate_with(a, |g| Tensor::filled(g.value(a).shape(), d));
            }
            Op::Mean(a) => {
                let d = gout.item();
                self.accumulate_with(a, |g| {
                    let n = g.value(a).len() as f64;
                    Tensor::filled(g.value(a).shape(), d / n)
                });
            }
            Op::ChannelMean(a) => self.accumulate_with(a, |g| {
                let (c, h, w) = g.value(a).chw().expect("checked in forward");
                let n = h * w;
                let mut out = vec![0.0; c * n];
                for ch in 0..c {
                    let v = gout.data()[ch] / n as f64;
                    out[ch * n..(ch + 1) * n].iter_mut().for_each(|o| *o = v);
                }
                Tensor::new(vec![c, h, w], out).expect("shape")
            }),
            Op::ChannelLogSumExp(a, t) => {
                let y = self.value(NodeId(i)).data().to_vec();
                self.accumulate_with(a, |g| {
                    let (c, h, w) = g.value(a).chw().expect("checked in forward");
                    let n = h * w;
                    let x = g.value(a).data();
                    let mut out = vec![0.0; c * n];
                    for k in 0..c {
                        for p in 0..n {
                            out[k * n + p] = gout.data()[p] * (t * (x[k * n + p] - y[p])).exp();
                        }
                    }
                    Tensor::new(vec![c, h, w], out).expect("shape")
                });
            }
            Op::SliceChannels(a, start) => self.accumulate_with(a, |g| {
                let mut out = Tensor::zeros(g.value(a).shape());
                let (_, h, w) = g.value(a).chw().expect("checked in forward");
                let off = start * h * w;
                out.data_mut()[off..off + gout.len()].copy_from_slice(gout.data());
                out
            }),
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                self.accumulate_with(input, |g| {
                    let d = conv::backward_input(&geom, g.value(kernel).data(), gout.data());
                    Tensor::new(shape_of(g, input), d).expect("shape")
                });
                self.accumulate_with(kernel, |g| {
                    let d = conv::backward_kernel(&geom, g.value(input).data(), gout.data());
                    Tensor::new(shape_of(g, kernel), d).expect("shape")
                });
                if let Some(b) = bias {
                    self.accumulate_with(b, |_| {
                        Tensor::new(vec![geom.co], conv::backward_bias(&geom, gout.data()))
                            .expect("shape")
                    });
                }
            }
            Op::Pool3(a, arg) => self.accumulate_with(a, |g| {
                let mut out = Tensor::zeros(g.value(a).shape());
                let o = out.data_mut();
                for (k, &src) in arg.iter().enumerate() {
                    o[src as usize] += gout.data()[k];
                }
                out
            }),
            Op::Downsample2(a) => self.accumulate_with(a, |g| {
                let (c, h, w) = g.value(a).chw().expect("checked in forward");
                let (ho, wo) = (h / 2, w / 2);
                let mut out = vec![0.0; c * h * w];
                for ch in 0..c {
                    for r in 0..ho {
                        for col in 0..wo {
                            let d = 0.25 * gout.data()[(ch * ho + r) * wo + col];
                            let i = (ch * h + 2 * r) * w + 2 * col;
                            out[i] += d;
                            out[i + 1] += d;
                            out[i + w] += d;
                            out[i + w + 1] += d;
                        }
                    }
                }
                Tensor::new(vec![c, h, w], out).expect("shape")
            }),
            Op::Upsample2(a) => self.accumulate_with(a, |g| {
                let (c, h, w) = g.value(a).chw().expect("checked in forward");
                let (ho, wo) = (2 * h, 2 * w);
                let mut out = vec![0.0; c * h * w];
                for ch in 0..c {
                    for r in 0..ho {
                        for col in 0..wo {
                            out[(ch * h + r / 2) * w + col / 2] += gout.data()[(ch * ho + r) * wo + col];
                        }
                    }
                }
                Tensor::new(vec![c, h, w], out).expect("shape")
            }),
            Op::InstanceNorm { input, inv_std } => {
                let y = self.value(NodeId(i)).data().to_vec();
                self.accumulate_with(input, |g| {
                    let (c, h, w) = g.value(input).chw().expect("checked in forward");
                    let n = h * w;
                    let mut out = vec![0.0; c * n];
                    for ch in 0..c {
                        let dy = &gout.data()[ch * n..(ch + 1) * n];
                        let ys = &y[ch * n..(ch + 1) * n];
                        let mean_dy = dy.iter().sum::<f64>() / n as f64;
                        let mean_dyy = dy.iter().zip(ys).map(|(d, y)| d * y).sum::<f64>() / n as f64;
                        for p in 0..n {
                            out[ch * n + p] = inv_std[ch] * (dy[p] - mean_dy - ys[p] * mean_dyy);
                        }
                    }
                    Tensor::new(vec![c, h, w], out).expect("shape")
                });
            }
            Op::Crop { input, top, left } => self.accumulate_with(input, |g| {
                let (c, ih, iw) = g.value(input).chw().expect("checked in forward");
                let (_, h, w) = gout.chw().expect("crop output is CHW");
                let mut out = vec![0.0; c * ih * iw];
                for ch in 0..c {
                    for r in 0..h {
                        let s = (ch * ih + top + r) * iw + left;
                        out[s..s + w].copy_from_slice(&gout.data()[(ch * h + r) * w..][..w]);
                    }
                }
                Tensor::new(vec![c, ih, iw], out).expect("shape")
            }),
            Op::PadReplicate(a, n) => self.accumulate_with(a, |g| {
                let (c, h, w) = g.value(a).chw().expect("checked in forward");
                let (ho, wo) = (h + 2 * n, w + 2 * n);
                let mut out = vec![0.0; c * h * w];
                for ch in 0..c {
                    for r in 0..ho {
                        let sr = r.saturating_sub(n).min(h - 1);
                        for col in 0..wo {
                            let sc = col.saturating_sub(n).min(w - 1);
                            out[(ch * h + sr) * w + sc] += gout.data()[(ch * ho + r) * wo + col];
                        }
                    }
                }
                Tensor::new(vec![c, h, w], out).expect("shape")
            }),
        }
        Ok(())
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
