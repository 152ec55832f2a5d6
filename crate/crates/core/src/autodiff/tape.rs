//! Reverse-mode tape over [`Tensor`] values.
//!
//! Every operation appends a node holding its forward value; `backward`
//! walks the nodes in reverse insertion order, which is a reverse topological
//! order because a node can only reference earlier nodes.

use super::kernels::{self, SpatialGeom, TemporalGeom};
use super::tensor::Tensor;
use crate::error::{bail, Result};
use crate::scalar::Real;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    ConvSpatial { x: Var, w: Var, b: Var, geom: SpatialGeom },
    ConvTemporal { x: Var, w: Var, b: Var, geom: TemporalGeom },
    ChannelMix { x: Var, w: Var, b: Var, c_in: usize, c_out: usize },
    Dense { x: Var, w: Var, b: Var, d_in: usize, d_out: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// `gate` is `1×rest`, `x` is `C×rest`.
    MulBroadcast { gate: Var, x: Var },
    AddChannelBias { x: Var, bias: Var },
    Concat { a: Var, b: Var },
    SelectChannel { x: Var, channel: usize },
    Upsample2 { x: Var, outer: usize, h: usize, w: usize },
    Softplus(Var),
    Silu(Var),
    Ln(Var),
    SoftmaxChannels(Var),
    SoftmaxLast(Var),
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    BceWithLogits { logits: Var, targets: Var },
    CvSquared(Var),
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// Single-owner recording of one forward pass.
#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of one `backward` call, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0].as_ref().map(|g| Tensor::new(&self.shapes[v.0], g.clone()).unwrap())
    }

    /// Gradient of `v`, zeros when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        self.get(v).unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        bail!(Shape, "{}: shapes {:?} and {:?} differ", what, a.shape(), b.shape());
    }
    Ok(())
}

fn features4<T: Real>(x: &Tensor<T>, what: &str) -> Result<[usize; 4]> {
    match x.shape() {
        &[c, l, h, w] => Ok([c, l, h, w]),
        s => bail!(Shape, "{} expects a C×L×H×W tensor, got {:?}", what, s),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input (a parameter or an input under test).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// `1×3×3` convolution with zero same-padding; `stride` 1 or 2 in H and W.
    pub fn conv_spatial(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let [c_in, frames, height, width] = features4(self.value(x), "conv_spatial")?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 5 || ws[1] != c_in || ws[2] != 1 || ws[3] != 3 || ws[4] != 3 {
            bail!(Shape, "spatial kernel {:?} does not match {} input channels (want Co×{}×1×3×3)", ws, c_in, c_in);
        }
        if self.shape(b) != [ws[0]] {
            bail!(Shape, "bias {:?} does not match {} output channels", self.shape(b), ws[0]);
        }
        if stride == 0 {
            bail!(Shape, "stride must be positive");
        }
        let geom = SpatialGeom { c_in, c_out: ws[0], frames, height, width, stride };
        let y = kernels::conv_spatial_forward(self.value(x).data(), self.value(w).data(), self.value(b).data(), &geom);
        let value = Tensor::new(&[geom.c_out, frames, geom.out_height(), geom.out_width()], y)?;
        Ok(self.push(value, Op::ConvSpatial { x, w, b, geom }, &[x, w, b]))
    }

    /// `3×1×1` convolution over frames with replicate-edge padding.
    pub fn conv_temporal(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let [c_in, frames, height, width] = features4(self.value(x), "conv_temporal")?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 5 || ws[1] != c_in || ws[2] != 3 || ws[3] != 1 || ws[4] != 1 {
            bail!(Shape, "temporal kernel {:?} does not match {} input channels (want Co×{}×3×1×1)", ws, c_in, c_in);
        }
        if self.shape(b) != [ws[0]] {
            bail!(Shape, "bias {:?} does not match {} output channels", self.shape(b), ws[0]);
        }
        let geom = TemporalGeom { c_in, c_out: ws[0], frames, plane: height * width };
        let y = kernels::conv_temporal_forward(self.value(x).data(), self.value(w).data(), self.value(b).data(), &geom);
        let value = Tensor::new(&[geom.c_out, frames, height, width], y)?;
        Ok(self.push(value, Op::ConvTemporal { x, w, b, geom }, &[x, w, b]))
    }

    /// Per-position dense layer over the leading (channel) axis; `w` is `Ci×Co`.
    pub fn channel_mix(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.is_empty() || ws.len() != 2 || ws[0] != xs[0] || self.shape(b) != [ws[1]] {
            bail!(Shape, "channel_mix: input {:?}, weight {:?}, bias {:?}", xs, ws, self.shape(b));
        }
        let (c_in, c_out) = (ws[0], ws[1]);
        let plane = self.value(x).plane();
        let y = kernels::channel_mix_forward(self.value(x).data(), self.value(w).data(), self.value(b).data(), c_in, c_out, plane);
        let mut shape = xs;
        shape[0] = c_out;
        let value = Tensor::new(&shape, y)?;
        Ok(self.push(value, Op::ChannelMix { x, w, b, c_in, c_out }, &[x, w, b]))
    }

    /// Dense layer over the last axis; `w` is `D_in×D_out`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let d_in = xs.last().copied().unwrap_or(1);
        if ws.len() != 2 || ws[0] != d_in || self.shape(b) != [ws[1]] {
            bail!(Shape, "dense: input {:?}, weight {:?}, bias {:?}", xs, ws, self.shape(b));
        }
        let d_out = ws[1];
        let y = kernels::dense_forward(self.value(x).data(), self.value(w).data(), self.value(b).data(), d_in, d_out);
        let mut shape = if xs.is_empty() { vec![1] } else { xs };
        *shape.last_mut().unwrap() = d_out;
        let value = Tensor::new(&shape, y)?;
        Ok(self.push(value, Op::Dense { x, w, b, d_in, d_out }, &[x, w, b]))
    }

    fn zip_op(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T, op: Op) -> Result<Var> {
        same_shape(self.value(a), self.value(b), what)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| f(*x, *y)).collect();
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let kt = T::c(k);
        let value = self.value(a).map(|v| v * kt);
        self.push(value, Op::Scale(a, k), &[a])
    }

    /// `gate ⊙ x` with a one-channel gate broadcast over the channels of `x`.
    pub fn mul_broadcast(&mut self, gate: Var, x: Var) -> Result<Var> {
        let (gs, xs) = (self.shape(gate).to_vec(), self.shape(x).to_vec());
        if gs.is_empty() || gs[0] != 1 || gs[1..] != xs[1..] {
            bail!(Shape, "mul_broadcast: gate {:?} cannot scale {:?}", gs, xs);
        }
        let g = self.value(gate).data();
        let plane = g.len();
        let data = self.value(x).data().chunks_exact(plane).flat_map(|c| c.iter().zip(g).map(|(a, b)| *a * *b)).collect();
        let value = Tensor::new(&xs, data)?;
        Ok(self.push(value, Op::MulBroadcast { gate, x }, &[gate, x]))
    }

    /// Adds `bias[c]` to every element of channel `c`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let c = self.value(x).channels();
        if self.value(bias).numel() != c {
            bail!(Shape, "channel bias {:?} for input {:?}", self.shape(bias), xs);
        }
        let plane = self.value(x).plane();
        let bv = self.value(bias).data().to_vec();
        let data = self.value(x).data().chunks_exact(plane).zip(&bv).flat_map(|(ch, b)| ch.iter().map(move |v| *v + *b)).collect();
        let value = Tensor::new(&xs, data)?;
        Ok(self.push(value, Op::AddChannelBias { x, bias }, &[x, bias]))
    }

    /// Concatenate along the leading axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sa[1..] != sb[1..] {
            bail!(Shape, "concat: {:?} and {:?}", sa, sb);
        }
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let mut shape = sa;
        shape[0] += sb[0];
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(value, Op::Concat { a, b }, &[a, b]))
    }

    pub fn select_channel(&mut self, x: Var, channel: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.is_empty() || channel >= xs[0] {
            bail!(Shape, "channel {} out of range for {:?}", channel, xs);
        }
        let plane = self.value(x).plane();
        let data = self.value(x).data()[channel * plane..(channel + 1) * plane].to_vec();
        let mut shape = xs;
        shape[0] = 1;
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(value, Op::SelectChannel { x, channel }, &[x]))
    }

    /// Nearest-neighbor ×2 upsampling of the last two axes.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            bail!(Shape, "upsample2 needs at least 2 axes, got {:?}", xs);
        }
        let (h, w) = (xs[xs.len() - 2], xs[xs.len() - 1]);
        let outer = self.value(x).numel() / (h * w).max(1);
        let y = kernels::upsample2_forward(self.value(x).data(), outer, h, w);
        let mut shape = xs;
        let n = shape.len();
        shape[n - 2] *= 2;
        shape[n - 1] *= 2;
        let value = Tensor::new(&shape, y)?;
        Ok(self.push(value, Op::Upsample2 { x, outer, h, w }, &[x]))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(kernels::softplus);
        self.push(value, Op::Softplus(a), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v * kernels::sigmoid(v));
        self.push(value, Op::Silu(a), &[a])
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.ln());
        self.push(value, Op::Ln(a), &[a])
    }

    /// Softmax across the leading axis at every trailing position.
    pub fn softmax_channels(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (c, plane) = (t.channels(), t.plane());
        let src = t.data();
        let mut out = vec![T::zero(); src.len()];
        for p in 0..plane {
            let max = (0..c).map(|k| src[k * plane + p]).fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for k in 0..c {
                let e = (src[k * plane + p] - max).exp();
                out[k * plane + p] = e;
                sum += e;
            }
            for k in 0..c {
                out[k * plane + p] /= sum;
            }
        }
        let value = Tensor::new(t.shape(), out).unwrap();
        self.push(value, Op::SoftmaxChannels(a), &[a])
    }

    /// Softmax over the last axis.
    pub fn softmax_lastdim(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let d = t.shape().last().copied().unwrap_or(1);
        let mut out = vec![T::zero(); t.numel()];
        for (row, o) in t.data().chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            crate::uncertainty::softmax_row(row, o);
        }
        let value = Tensor::new(t.shape(), out).unwrap();
        self.push(value, Op::SoftmaxLast(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s: T = t.data().iter().copied().sum();
        let m = s / T::c(t.numel() as f64);
        self.push(Tensor::scalar(m), Op::Mean(a), &[a])
    }

    /// Mean squared difference.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "mse")?;
        let n = T::c(self.value(a).numel() as f64);
        let s: T = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| (*x - *y) * (*x - *y)).sum();
        Ok(self.push(Tensor::scalar(s / n), Op::Mse(a, b), &[a, b]))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `targets ∈ [0, 1]`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Var) -> Result<Var> {
        same_shape(self.value(logits), self.value(targets), "bce_with_logits")?;
        if self.value(targets).data().iter().any(|t| *t < T::zero() || *t > T::one()) {
            bail!(Input, "bce targets must lie in [0, 1]");
        }
        let n = T::c(self.value(logits).numel() as f64);
        let s: T = self
            .value(logits)
            .data()
            .iter()
            .zip(self.value(targets).data())
            .map(|(z, t)| kernels::softplus(*z) - *t * *z)
            .sum();
        Ok(self.push(Tensor::scalar(s / n), Op::BceWithLogits { logits, targets }, &[logits, targets]))
    }

    /// Squared coefficient of variation `Var(x)/E[x]²`, population variance.
    pub fn cv_squared(&mut self, a: Var) -> Var {
        let (mean, var) = moments(self.value(a).data());
        self.push(Tensor::scalar(var / (mean * mean)), Op::CvSquared(a), &[a])
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if !self.value(loss).is_scalar() {
            bail!(Usage, "backward needs a scalar loss, got shape {:?}", self.shape(loss));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(&node.op, i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        // leaves that do not require grad report nothing
        for (slot, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.requires_grad {
                *slot = None;
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, op: &Op, me: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, d: Vec<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(d).for_each(|(e, x)| *e += x),
                slot @ None => *slot = Some(d),
            }
        };
        match *op {
            Op::Leaf => {}
            Op::ConvSpatial { x, w, b, geom } => {
                let (dx, dw, db) = kernels::conv_spatial_backward(val(x), val(w), g, &geom);
                acc(x, dx);
                acc(w, dw);
                acc(b, db);
            }
            Op::ConvTemporal { x, w, b, geom } => {
                let (dx, dw, db) = kernels::conv_temporal_backward(val(x), val(w), g, &geom);
                acc(x, dx);
                acc(w, dw);
                acc(b, db);
            }
            Op::ChannelMix { x, w, b, c_in, c_out } => {
                let plane = self.nodes[x.0].value.plane();
                let (dx, dw, db) = kernels::channel_mix_backward(val(x), val(w), g, c_in, c_out, plane);
                acc(x, dx);
                acc(w, dw);
                acc(b, db);
            }
            Op::Dense { x, w, b, d_in, d_out } => {
                let (dx, dw, db) = kernels::dense_backward(val(x), val(w), g, d_in, d_out);
                acc(x, dx);
                acc(w, dw);
                acc(b, db);
            }
            Op::Add(a, b) => {
                acc(a, g.to_vec());
                acc(b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(a, g.to_vec());
                acc(b, g.iter().map(|v| -*v).collect());
            }
            Op::Mul(a, b) => {
                if wants(a) {
                    acc(a, g.iter().zip(val(b)).map(|(d, y)| *d * *y).collect());
                }
                if wants(b) {
                    acc(b, g.iter().zip(val(a)).map(|(d, x)| *d * *x).collect());
                }
            }
            Op::Scale(a, k) => {
                let k = T::c(k);
                acc(a, g.iter().map(|d| *d * k).collect());
            }
            Op::MulBroadcast { gate, x } => {
                let gv = val(gate);
                let xv = val(x);
                let plane = gv.len();
                if wants(x) {
                    acc(x, g.chunks_exact(plane).flat_map(|c| c.iter().zip(gv).map(|(d, s)| *d * *s)).collect());
                }
                if wants(gate) {
                    let mut dg = vec![T::zero(); plane];
                    for (dc, xc) in g.chunks_exact(plane).zip(xv.chunks_exact(plane)) {
                        for ((slot, d), xx) in dg.iter_mut().zip(dc).zip(xc) {
                            *slot += *d * *xx;
                        }
                    }
                    acc(gate, dg);
                }
            }
            Op::AddChannelBias { x, bias } => {
                acc(x, g.to_vec());
                let plane = self.nodes[x.0].value.plane();
                acc(bias, g.chunks_exact(plane).map(|c| c.iter().copied().sum()).collect());
            }
            Op::Concat { a, b } => {
                let na = self.nodes[a.0].value.numel();
                acc(a, g[..na].to_vec());
                acc(b, g[na..].to_vec());
            }
            Op::SelectChannel { x, channel } => {
                let xt = &self.nodes[x.0].value;
                let plane = xt.plane();
                let mut d = vec![T::zero(); xt.numel()];
                d[channel * plane..(channel + 1) * plane].copy_from_slice(g);
                acc(x, d);
            }
            Op::Upsample2 { x, outer, h, w } => acc(x, kernels::upsample2_backward(g, outer, h, w)),
            Op::Softplus(a) => acc(a, g.iter().zip(val(a)).map(|(d, x)| *d * kernels::sigmoid(*x)).collect()),
            Op::Silu(a) => acc(
                a,
                g.iter()
                    .zip(val(a))
                    .map(|(d, x)| {
                        let s = kernels::sigmoid(*x);
                        *d * (s + *x * s * (T::one() - s))
                    })
                    .collect(),
            ),
            Op::Ln(a) => acc(a, g.iter().zip(val(a)).map(|(d, x)| *d / *x).collect()),
            Op::SoftmaxChannels(a) => {
                let y = self.nodes[me].value.data();
                let t = &self.nodes[a.0].value;
                let (c, plane) = (t.channels(), t.plane());
                let mut d = vec![T::zero(); y.len()];
                for p in 0..plane {
                    let dot: T = (0..c).map(|k| g[k * plane + p] * y[k * plane + p]).sum();
                    for k in 0..c {
                        d[k * plane + p] = y[k * plane + p] * (g[k * plane + p] - dot);
                    }
                }
                acc(a, d);
            }
            Op::SoftmaxLast(a) => {
                let y = self.nodes[me].value.data();
                let dim = self.nodes[a.0].value.shape().last().copied().unwrap_or(1);
                let mut d = vec![T::zero(); y.len()];
                for ((yr, gr), dr) in y.chunks_exact(dim).zip(g.chunks_exact(dim)).zip(d.chunks_exact_mut(dim)) {
                    let dot: T = yr.iter().zip(gr).map(|(a, b)| *a * *b).sum();
                    for k in 0..dim {
                        dr[k] = yr[k] * (gr[k] - dot);
                    }
                }
                acc(a, d);
            }
            Op::Sum(a) => acc(a, vec![g[0]; self.nodes[a.0].value.numel()]),
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.numel();
                acc(a, vec![g[0] / T::c(n as f64); n]);
            }
            Op::Mse(a, b) => {
                let n = T::c(val(a).len() as f64);
                let k = T::c(2.0) * g[0] / n;
                let diff: Vec<T> = val(a).iter().zip(val(b)).map(|(x, y)| (*x - *y) * k).collect();
                if wants(b) {
                    acc(b, diff.iter().map(|v| -*v).collect());
                }
                acc(a, diff);
            }
            Op::BceWithLogits { logits, targets } => {
                let n = T::c(val(logits).len() as f64);
                let k = g[0] / n;
                if wants(logits) {
                    acc(logits, val(logits).iter().zip(val(targets)).map(|(z, t)| (kernels::sigmoid(*z) - *t) * k).collect());
                }
                if wants(targets) {
                    acc(targets, val(logits).iter().map(|z| -*z * k).collect());
                }
            }
            Op::CvSquared(a) => {
                // r = v/m², ∂v/∂x_i = 2(x_i − m)/n, ∂m/∂x_i = 1/n
                let x = val(a);
                let n = T::c(x.len() as f64);
                let (m, v) = moments(x);
                let m2 = m * m;
                let two = T::c(2.0);
                acc(
                    a,
                    x.iter()
                        .map(|xi| g[0] * (two * (*xi - m) / (n * m2) - two * v / (m2 * m * n)))
                        .collect(),
                );
            }
        }
    }
}

/// Population mean and variance.
pub fn moments<T: Real>(x: &[T]) -> (T, T) {
    let n = T::c(x.len() as f64);
    let k = x.first().copied().unwrap_or_else(T::zero);
    let shift = x.iter().map(|v| *v - k).sum::<T>() / n;
    let var = x.iter().map(|v| (*v - k - shift) * (*v - k - shift)).sum::<T>() / n;
    (k + shift, var)
}
