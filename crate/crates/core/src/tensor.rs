//! Dense f64 tensors with tape-based reverse-mode automatic differentiation.
//!
//! The engine is deliberately small: a [`Graph`] is rebuilt for every forward
//! pass (define-by-run), nodes are appended in topological order, and
//! [`Graph::backward`] walks the tape in reverse accumulating `d loss / d node`
//! into each node's tensor. The primitive set is closed — convolution, a dense
//! layer, the activations the detector uses, elementwise arithmetic,
//! reductions, the two classification losses, total variation, and a bilinear
//! paste used by patch optimization — which keeps every backward rule small
//! enough to check against finite differences.
//!
//! Everything is f64. At the image sizes this crate works with, the cost is
//! irrelevant and it removes accumulation-order noise from tests.

use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

/// A dense row-major tensor. `grad`, when present, has the same length as
/// `data` and holds `d loss / d self` after a backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            grad: None,
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::shape(format!(
                "grad length {} does not match data length {}",
                grad.len(),
                self.data.len()
            )));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }
}

// ---------------------------------------------------------------------------
// Numeric helpers
// ---------------------------------------------------------------------------

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Stable softmax of a slice.
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|&v| (v - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

// ---------------------------------------------------------------------------
// Graph
// ---------------------------------------------------------------------------

/// Index of a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// One placement of the patch inside a target image, in pixel units.
#[derive(Debug, Clone, PartialEq)]
pub struct Placement {
    pub center_x: f64,
    pub center_y: f64,
    /// Side length of the pasted square, in pixels.
    pub side: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d { stride: usize, pad: usize },
    ChannelBias,
    Linear,
    Sigmoid,
    Silu,
    LeakyRelu { alpha: f64 },
    SoftmaxLastDim,
    Add,
    Sub,
    Mul,
    AddScalar,
    MulScalar { c: f64 },
    Sum,
    Mean,
    GatherCell { i: usize, j: usize },
    Index { idx: usize },
    GatherExcept { skip: usize },
    ReduceMax,
    Min2,
    BceWithLogits,
    SoftmaxCrossEntropy { target: usize },
    TotalVariation,
    PasteResized { placements: Vec<Placement> },
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
}

/// A define-by-run computation tape. Nodes are appended in topological order
/// by construction; [`Graph::backward`] visits them in reverse.
pub struct Graph {
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, inputs, value });
        NodeId(self.nodes.len() - 1)
    }

    /// Registers an input tensor on the tape. Gradients flow into every leaf.
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Leaf, vec![], t)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn data(&self, id: NodeId) -> &[f64] {
        self.nodes[id.0].value.data()
    }

    /// Gradient of the last backward target with respect to this node.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].value.grad()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // -- primitive ops ------------------------------------------------------

    /// 2-D cross-correlation, channels-last: input `[h,w,cin]`, kernel
    /// `[k,k,cin,cout]`, output `[ho,wo,cout]` with
    /// `ho = (h + 2 pad - k) / stride + 1`.
    pub fn conv2d(&mut self, x: NodeId, kernel: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        let ks = self.value(kernel).shape().to_vec();
        if xs.len() != 3 || ks.len() != 4 {
            return Err(Error::shape(format!(
                "conv2d expects input [h,w,cin] and kernel [k,k,cin,cout], got {:?} and {:?}",
                xs, ks
            )));
        }
        let (h, w, cin) = (xs[0], xs[1], xs[2]);
        let (k, cout) = (ks[0], ks[3]);
        if ks[1] != k {
            return Err(Error::shape("conv2d kernel must be square"));
        }
        if ks[2] != cin {
            return Err(Error::shape(format!(
                "conv2d channel mismatch: input has {} channels, kernel expects {}",
                cin, ks[2]
            )));
        }
        if k % 2 == 0 {
            return Err(Error::invalid("conv2d kernel size must be odd"));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be >= 1"));
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::shape(
                "conv2d kernel larger than padded input",
            ));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;

        let xd = self.data(x);
        let kd = self.data(kernel);
        let mut out = vec![0.0; ho * wo * cout];
        for oy in 0..ho {
            for ox in 0..wo {
                for co in 0..cout {
                    let mut acc = 0.0;
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let xbase = (iy as usize * w + ix as usize) * cin;
                            let kbase = ((ky * k + kx) * cin) * cout;
                            for ci in 0..cin {
                                acc += xd[xbase + ci] * kd[kbase + ci * cout + co];
                            }
                        }
                    }
                    out[(oy * wo + ox) * cout + co] = acc;
                }
            }
        }
        let value = Tensor::from_vec(vec![ho, wo, cout], out)?;
        Ok(self.push(Op::Conv2d { stride, pad }, vec![x, kernel], value))
    }

    /// Adds a per-channel bias to a `[h,w,c]` tensor.
    pub fn channel_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        let bs = self.value(bias).shape().to_vec();
        if xs.len() != 3 || bs.len() != 1 || bs[0] != xs[2] {
            return Err(Error::shape(format!(
                "channel_bias expects [h,w,c] and [c], got {:?} and {:?}",
                xs, bs
            )));
        }
        let c = xs[2];
        let bd = self.data(bias).to_vec();
        let mut out = self.data(x).to_vec();
        for (i, v) in out.iter_mut().enumerate() {
            *v += bd[i % c];
        }
        let value = Tensor::from_vec(xs, out)?;
        Ok(self.push(Op::ChannelBias, vec![x, bias], value))
    }

    /// Dense layer `y = W^T x + b` with `x: [n]`, `w: [n,m]`, `b: [m]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let bs = self.value(b).shape().to_vec();
        if xs.len() != 1 || ws.len() != 2 || bs.len() != 1 || ws[0] != xs[0] || ws[1] != bs[0] {
            return Err(Error::shape(format!(
                "linear expects x [n], w [n,m], b [m]; got {:?}, {:?}, {:?}",
                xs, ws, bs
            )));
        }
        let (n, m) = (ws[0], ws[1]);
        let xd = self.data(x);
        let wd = self.data(w);
        let mut out = self.data(b).to_vec();
        for i in 0..n {
            let xi = xd[i];
            for j in 0..m {
                out[j] += xi * wd[i * m + j];
            }
        }
        let value = Tensor::from_vec(vec![m], out)?;
        Ok(self.push(Op::Linear, vec![x, w, b], value))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let shape = self.value(x).shape().to_vec();
        let out: Vec<f64> = self.data(x).iter().map(|&v| sigmoid(v)).collect();
        self.push(Op::Sigmoid, vec![x], Tensor { shape, data: out, grad: None })
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let shape = self.value(x).shape().to_vec();
        let out: Vec<f64> = self.data(x).iter().map(|&v| v * sigmoid(v)).collect();
        self.push(Op::Silu, vec![x], Tensor { shape, data: out, grad: None })
    }

    pub fn leaky_relu(&mut self, x: NodeId, alpha: f64) -> NodeId {
        let shape = self.value(x).shape().to_vec();
        let out: Vec<f64> = self
            .data(x)
            .iter()
            .map(|&v| if v > 0.0 { v } else { alpha * v })
            .collect();
        self.push(
            Op::LeakyRelu { alpha },
            vec![x],
            Tensor { shape, data: out, grad: None },
        )
    }

    /// Softmax over the last dimension, applied independently per row.
    pub fn softmax_lastdim(&mut self, x: NodeId) -> NodeId {
        let shape = self.value(x).shape().to_vec();
        let last = *shape.last().expect("softmax on rank-0 tensor");
        let xd = self.data(x);
        let mut out = vec![0.0; xd.len()];
        for row in 0..xd.len() / last {
            let s = softmax(&xd[row * last..(row + 1) * last]);
            out[row * last..(row + 1) * last].copy_from_slice(&s);
        }
        self.push(
            Op::SoftmaxLastDim,
            vec![x],
            Tensor { shape, data: out, grad: None },
        )
    }

    fn binary_same_shape(&mut self, a: NodeId, b: NodeId, op: Op) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(format!(
                "elementwise op on mismatched shapes {:?} and {:?}",
                sa, sb
            )));
        }
        let shape = sa.to_vec();
        let ad = self.data(a);
        let bd = self.data(b);
        let out: Vec<f64> = match op {
            Op::Add => ad.iter().zip(bd).map(|(x, y)| x + y).collect(),
            Op::Sub => ad.iter().zip(bd).map(|(x, y)| x - y).collect(),
            Op::Mul => ad.iter().zip(bd).map(|(x, y)| x * y).collect(),
            _ => unreachable!(),
        };
        Ok(self.push(op, vec![a, b], Tensor { shape, data: out, grad: None }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, Op::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, Op::Sub)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, Op::Mul)
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        let shape = self.value(x).shape().to_vec();
        let out: Vec<f64> = self.data(x).iter().map(|&v| v + c).collect();
        self.push(Op::AddScalar, vec![x], Tensor { shape, data: out, grad: None })
    }

    pub fn mul_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        let shape = self.value(x).shape().to_vec();
        let out: Vec<f64> = self.data(x).iter().map(|&v| v * c).collect();
        self.push(
            Op::MulScalar { c },
            vec![x],
            Tensor { shape, data: out, grad: None },
        )
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.data(x).iter().sum();
        self.push(Op::Sum, vec![x], Tensor::scalar(s))
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).numel().max(1) as f64;
        let s: f64 = self.data(x).iter().sum();
        self.push(Op::Mean, vec![x], Tensor::scalar(s / n))
    }

    /// Extracts the channel vector at grid cell `(i, j)` from a `[g,g,c]`
    /// tensor, producing `[c]`.
    pub fn gather_cell(&mut self, x: NodeId, i: usize, j: usize) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 3 {
            return Err(Error::shape(format!(
                "gather_cell expects [g,g,c], got {:?}",
                xs
            )));
        }
        if i >= xs[0] || j >= xs[1] {
            return Err(Error::invalid(format!(
                "cell ({}, {}) outside {}x{} grid",
                i, j, xs[0], xs[1]
            )));
        }
        let c = xs[2];
        let base = (i * xs[1] + j) * c;
        let out = self.data(x)[base..base + c].to_vec();
        Ok(self.push(
            Op::GatherCell { i, j },
            vec![x],
            Tensor { shape: vec![c], data: out, grad: None },
        ))
    }

    /// Single element of a rank-1 tensor, as a scalar node.
    pub fn index(&mut self, x: NodeId, idx: usize) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 1 || idx >= xs[0] {
            return Err(Error::invalid(format!(
                "index {} invalid for shape {:?}",
                idx, xs
            )));
        }
        let v = self.data(x)[idx];
        Ok(self.push(Op::Index { idx }, vec![x], Tensor::scalar(v)))
    }

    /// All elements of a rank-1 tensor except `skip`.
    pub fn gather_except(&mut self, x: NodeId, skip: usize) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 1 || skip >= xs[0] || xs[0] < 2 {
            return Err(Error::invalid(format!(
                "gather_except skip={} invalid for shape {:?}",
                skip, xs
            )));
        }
        let out: Vec<f64> = self
            .data(x)
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != skip)
            .map(|(_, &v)| v)
            .collect();
        let n = out.len();
        Ok(self.push(
            Op::GatherExcept { skip },
            vec![x],
            Tensor { shape: vec![n], data: out, grad: None },
        ))
    }

    /// Maximum element of a rank-1 tensor. The gradient is routed to the
    /// first occurrence of the maximum, so ties resolve deterministically.
    pub fn reduce_max(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 1 || xs[0] == 0 {
            return Err(Error::invalid(format!(
                "reduce_max expects nonempty rank-1, got {:?}",
                xs
            )));
        }
        let m = self.data(x).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Ok(self.push(Op::ReduceMax, vec![x], Tensor::scalar(m)))
    }

    /// Minimum of two scalars; the gradient follows the smaller input
    /// (the first on ties).
    pub fn min2(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).numel() != 1 || self.value(b).numel() != 1 {
            return Err(Error::shape("min2 expects two scalar nodes"));
        }
        let v = self.data(a)[0].min(self.data(b)[0]);
        Ok(self.push(Op::Min2, vec![a, b], Tensor::scalar(v)))
    }

    /// Mean binary cross-entropy between `logits` and `targets` (same shape),
    /// computed in the numerically stable logits form.
    pub fn bce_with_logits(&mut self, logits: NodeId, targets: NodeId) -> Result<NodeId> {
        let (ls, ts) = (self.value(logits).shape(), self.value(targets).shape());
        if ls != ts {
            return Err(Error::shape(format!(
                "bce_with_logits shapes differ: {:?} vs {:?}",
                ls, ts
            )));
        }
        let ld = self.data(logits);
        let td = self.data(targets);
        let n = ld.len().max(1) as f64;
        let total: f64 = ld
            .iter()
            .zip(td)
            .map(|(&l, &t)| l.max(0.0) - l * t + (1.0 + (-l.abs()).exp()).ln())
            .sum();
        Ok(self.push(
            Op::BceWithLogits,
            vec![logits, targets],
            Tensor::scalar(total / n),
        ))
    }

    /// Cross-entropy of a softmax over rank-1 `logits` against a hard target.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, target: usize) -> Result<NodeId> {
        let ls = self.value(logits).shape().to_vec();
        if ls.len() != 1 || target >= ls[0] {
            return Err(Error::invalid(format!(
                "softmax_cross_entropy target {} invalid for shape {:?}",
                target, ls
            )));
        }
        let ld = self.data(logits);
        let ce = logsumexp(ld) - ld[target];
        Ok(self.push(
            Op::SoftmaxCrossEntropy { target },
            vec![logits],
            Tensor::scalar(ce),
        ))
    }

    /// Mean squared difference between horizontal and vertical neighbors of a
    /// `[p,p,c]` tensor (channel pairs counted independently).
    pub fn total_variation(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 3 || xs[0] < 2 || xs[1] < 2 {
            return Err(Error::shape(format!(
                "total_variation expects [p,p,c] with p >= 2, got {:?}",
                xs
            )));
        }
        let (h, w, c) = (xs[0], xs[1], xs[2]);
        let xd = self.data(x);
        let at = |i: usize, j: usize, k: usize| xd[(i * w + j) * c + k];
        let mut total = 0.0;
        let mut count = 0usize;
        for i in 0..h {
            for j in 0..w {
                for k in 0..c {
                    if j + 1 < w {
                        let d = at(i, j, k) - at(i, j + 1, k);
                        total += d * d;
                        count += 1;
                    }
                    if i + 1 < h {
                        let d = at(i, j, k) - at(i + 1, j, k);
                        total += d * d;
                        count += 1;
                    }
                }
            }
        }
        Ok(self.push(
            Op::TotalVariation,
            vec![x],
            Tensor::scalar(total / count.max(1) as f64),
        ))
    }

    /// Pastes `patch` (`[p,p,c]`), bilinearly resized to each placement's
    /// side, over `base` (`[h,w,c]`). Later placements overwrite earlier
    /// ones; placements partially outside the image are clipped.
    pub fn paste_resized(
        &mut self,
        patch: NodeId,
        base: NodeId,
        placements: Vec<Placement>,
    ) -> Result<NodeId> {
        let ps = self.value(patch).shape().to_vec();
        let bs = self.value(base).shape().to_vec();
        if ps.len() != 3 || bs.len() != 3 || ps[2] != bs[2] {
            return Err(Error::shape(format!(
                "paste_resized expects patch [p,p,c] and base [h,w,c], got {:?} and {:?}",
                ps, bs
            )));
        }
        if ps[0] != ps[1] {
            return Err(Error::shape("patch must be square"));
        }
        let mut out = self.data(base).to_vec();
        {
            let pd = self.data(patch);
            paste_forward(pd, ps[0], ps[2], &mut out, bs[0], bs[1], &placements);
        }
        let value = Tensor::from_vec(bs, out)?;
        Ok(self.push(
            Op::PasteResized { placements },
            vec![patch, base],
            value,
        ))
    }

    // -- backward ------------------------------------------------------------

    /// Populates `grad` on every node reachable from `loss` with
    /// `d loss / d node`. `loss` must be a scalar node of this graph.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::invalid("backward target not in graph"));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        for node in &mut self.nodes {
            let n = node.value.numel();
            node.value.grad = Some(vec![0.0; n]);
        }
        self.nodes[loss.0].value.grad.as_mut().unwrap()[0] = 1.0;

        for id in (0..=loss.0).rev() {
            let op = self.nodes[id].op.clone();
            let inputs = self.nodes[id].inputs.clone();
            let g = self.nodes[id].value.grad.clone().unwrap();
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            match op {
                Op::Leaf => {}
                Op::Conv2d { stride, pad } => {
                    self.backward_conv2d(inputs[0], inputs[1], &g, stride, pad);
                }
                Op::ChannelBias => {
                    let c = self.nodes[inputs[1].0].value.numel();
                    self.accumulate(inputs[0], &g);
                    let mut gb = vec![0.0; c];
                    for (i, &gv) in g.iter().enumerate() {
                        gb[i % c] += gv;
                    }
                    self.accumulate(inputs[1], &gb);
                }
                Op::Linear => {
                    let xd = self.nodes[inputs[0].0].value.data.clone();
                    let wd = self.nodes[inputs[1].0].value.data.clone();
                    let (n, m) = (xd.len(), g.len());
                    let mut gx = vec![0.0; n];
                    let mut gw = vec![0.0; n * m];
                    for i in 0..n {
                        for j in 0..m {
                            gx[i] += wd[i * m + j] * g[j];
                            gw[i * m + j] += xd[i] * g[j];
                        }
                    }
                    self.accumulate(inputs[0], &gx);
                    self.accumulate(inputs[1], &gw);
                    self.accumulate(inputs[2], &g);
                }
                Op::Sigmoid => {
                    let out = self.nodes[id].value.data.clone();
                    let gx: Vec<f64> = out
                        .iter()
                        .zip(&g)
                        .map(|(&s, &gv)| s * (1.0 - s) * gv)
                        .collect();
                    self.accumulate(inputs[0], &gx);
                }
                Op::Silu => {
                    let xd = self.nodes[inputs[0].0].value.data.clone();
                    let gx: Vec<f64> = xd
                        .iter()
                        .zip(&g)
                        .map(|(&x, &gv)| {
                            let s = sigmoid(x);
                            (s + x * s * (1.0 - s)) * gv
                        })
                        .collect();
                    self.accumulate(inputs[0], &gx);
                }
                Op::LeakyRelu { alpha } => {
                    let xd = self.nodes[inputs[0].0].value.data.clone();
                    let gx: Vec<f64> = xd
                        .iter()
                        .zip(&g)
                        .map(|(&x, &gv)| if x > 0.0 { gv } else { alpha * gv })
                        .collect();
                    self.accumulate(inputs[0], &gx);
                }
                Op::SoftmaxLastDim => {
                    let out = self.nodes[id].value.data.clone();
                    let shape = self.nodes[id].value.shape.clone();
                    let last = *shape.last().unwrap();
                    let mut gx = vec![0.0; out.len()];
                    for row in 0..out.len() / last {
                        let s = &out[row * last..(row + 1) * last];
                        let gr = &g[row * last..(row + 1) * last];
                        let dot: f64 = s.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for i in 0..last {
                            gx[row * last + i] = s[i] * (gr[i] - dot);
                        }
                    }
                    self.accumulate(inputs[0], &gx);
                }
                Op::Add => {
                    self.accumulate(inputs[0], &g);
                    self.accumulate(inputs[1], &g);
                }
                Op::Sub => {
                    self.accumulate(inputs[0], &g);
                    let neg: Vec<f64> = g.iter().map(|&v| -v).collect();
                    self.accumulate(inputs[1], &neg);
                }
                Op::Mul => {
                    let ad = self.nodes[inputs[0].0].value.data.clone();
                    let bd = self.nodes[inputs[1].0].value.data.clone();
                    let ga: Vec<f64> = bd.iter().zip(&g).map(|(&b, &gv)| b * gv).collect();
                    let gb: Vec<f64> = ad.iter().zip(&g).map(|(&a, &gv)| a * gv).collect();
                    self.accumulate(inputs[0], &ga);
                    self.accumulate(inputs[1], &gb);
                }
                Op::AddScalar => {
                    self.accumulate(inputs[0], &g);
                }
                Op::MulScalar { c } => {
                    let gx: Vec<f64> = g.iter().map(|&v| c * v).collect();
                    self.accumulate(inputs[0], &gx);
                }
                Op::Sum => {
                    let n = self.nodes[inputs[0].0].value.numel();
                    self.accumulate(inputs[0], &vec![g[0]; n]);
                }
                Op::Mean => {
                    let n = self.nodes[inputs[0].0].value.numel();
                    let gv = g[0] / n.max(1) as f64;
                    self.accumulate(inputs[0], &vec![gv; n]);
                }
                Op::GatherCell { i, j } => {
                    let shape = self.nodes[inputs[0].0].value.shape.clone();
                    let c = shape[2];
                    let mut gx = vec![0.0; shape.iter().product()];
                    let base = (i * shape[1] + j) * c;
                    gx[base..base + c].copy_from_slice(&g);
                    self.accumulate(inputs[0], &gx);
                }
                Op::Index { idx } => {
                    let n = self.nodes[inputs[0].0].value.numel();
                    let mut gx = vec![0.0; n];
                    gx[idx] = g[0];
                    self.accumulate(inputs[0], &gx);
                }
                Op::GatherExcept { skip } => {
                    let n = self.nodes[inputs[0].0].value.numel();
                    let mut gx = vec![0.0; n];
                    let mut k = 0;
                    for (i, slot) in gx.iter_mut().enumerate() {
                        if i != skip {
                            *slot = g[k];
                            k += 1;
                        }
                    }
                    self.accumulate(inputs[0], &gx);
                }
                Op::ReduceMax => {
                    let xd = self.nodes[inputs[0].0].value.data.clone();
                    let m = self.nodes[id].value.data[0];
                    let argmax = xd.iter().position(|&v| v == m).unwrap();
                    let mut gx = vec![0.0; xd.len()];
                    gx[argmax] = g[0];
                    self.accumulate(inputs[0], &gx);
                }
                Op::Min2 => {
                    let a = self.nodes[inputs[0].0].value.data[0];
                    let b = self.nodes[inputs[1].0].value.data[0];
                    if a <= b {
                        self.accumulate(inputs[0], &g);
                    } else {
                        self.accumulate(inputs[1], &g);
                    }
                }
                Op::BceWithLogits => {
                    let ld = self.nodes[inputs[0].0].value.data.clone();
                    let td = self.nodes[inputs[1].0].value.data.clone();
                    let n = ld.len().max(1) as f64;
                    let gl: Vec<f64> = ld
                        .iter()
                        .zip(&td)
                        .map(|(&l, &t)| (sigmoid(l) - t) * g[0] / n)
                        .collect();
                    let gt: Vec<f64> = ld.iter().map(|&l| -l * g[0] / n).collect();
                    self.accumulate(inputs[0], &gl);
                    self.accumulate(inputs[1], &gt);
                }
                Op::SoftmaxCrossEntropy { target } => {
                    let ld = self.nodes[inputs[0].0].value.data.clone();
                    let mut gx = softmax(&ld);
                    gx[target] -= 1.0;
                    for v in gx.iter_mut() {
                        *v *= g[0];
                    }
                    self.accumulate(inputs[0], &gx);
                }
                Op::TotalVariation => {
                    let shape = self.nodes[inputs[0].0].value.shape.clone();
                    let (h, w, c) = (shape[0], shape[1], shape[2]);
                    let xd = self.nodes[inputs[0].0].value.data.clone();
                    let count = (h * (w - 1) * c + (h - 1) * w * c).max(1) as f64;
                    let scale = 2.0 * g[0] / count;
                    let mut gx = vec![0.0; xd.len()];
                    let at = |i: usize, j: usize, k: usize| (i * w + j) * c + k;
                    for i in 0..h {
                        for j in 0..w {
                            for k in 0..c {
                                if j + 1 < w {
                                    let d = xd[at(i, j, k)] - xd[at(i, j + 1, k)];
                                    gx[at(i, j, k)] += scale * d;
                                    gx[at(i, j + 1, k)] -= scale * d;
                                }
                                if i + 1 < h {
                                    let d = xd[at(i, j, k)] - xd[at(i + 1, j, k)];
                                    gx[at(i, j, k)] += scale * d;
                                    gx[at(i + 1, j, k)] -= scale * d;
                                }
                            }
                        }
                    }
                    self.accumulate(inputs[0], &gx);
                }
                Op::PasteResized { placements } => {
                    let ps = self.nodes[inputs[0].0].value.shape.clone();
                    let bs = self.nodes[inputs[1].0].value.shape.clone();
                    let (p, c) = (ps[0], ps[2]);
                    let (h, w) = (bs[0], bs[1]);
                    let owner = ownership_map(h, w, &placements);
                    let mut gpatch = vec![0.0; p * p * c];
                    let mut gbase = vec![0.0; h * w * c];
                    for y in 0..h {
                        for x in 0..w {
                            match owner[y * w + x] {
                                None => {
                                    for k in 0..c {
                                        gbase[(y * w + x) * c + k] = g[(y * w + x) * c + k];
                                    }
                                }
                                Some(pi) => {
                                    let pl = &placements[pi];
                                    let taps = bilinear_taps(y, x, pl, p);
                                    for k in 0..c {
                                        let gv = g[(y * w + x) * c + k];
                                        for &(py, px, wt) in &taps {
                                            gpatch[(py * p + px) * c + k] += wt * gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    self.accumulate(inputs[0], &gpatch);
                    self.accumulate(inputs[1], &gbase);
                }
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, g: &[f64]) {
        let grad = self.nodes[id.0].value.grad.as_mut().unwrap();
        debug_assert_eq!(grad.len(), g.len());
        for (slot, &v) in grad.iter_mut().zip(g) {
            *slot += v;
        }
    }

    fn backward_conv2d(&mut self, x: NodeId, kernel: NodeId, g: &[f64], stride: usize, pad: usize) {
        let xs = self.nodes[x.0].value.shape.clone();
        let ks = self.nodes[kernel.0].value.shape.clone();
        let (h, w, cin) = (xs[0], xs[1], xs[2]);
        let (k, cout) = (ks[0], ks[3]);
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        let xd = self.nodes[x.0].value.data.clone();
        let kd = self.nodes[kernel.0].value.data.clone();
        let mut gx = vec![0.0; xd.len()];
        let mut gk = vec![0.0; kd.len()];
        for oy in 0..ho {
            for ox in 0..wo {
                for co in 0..cout {
                    let gv = g[(oy * wo + ox) * cout + co];
                    if gv == 0.0 {
                        continue;
                    }
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let xbase = (iy as usize * w + ix as usize) * cin;
                            let kbase = ((ky * k + kx) * cin) * cout;
                            for ci in 0..cin {
                                gx[xbase + ci] += kd[kbase + ci * cout + co] * gv;
                                gk[kbase + ci * cout + co] += xd[xbase + ci] * gv;
                            }
                        }
                    }
                }
            }
        }
        self.accumulate(x, &gx);
        self.accumulate(kernel, &gk);
    }
}

// ---------------------------------------------------------------------------
// Bilinear paste, shared by the graph op and by the plain (non-recorded)
// dataset patching path so both produce identical pixels.
// ---------------------------------------------------------------------------

/// For a destination pixel inside a placement, the up-to-four patch taps and
/// their bilinear weights.
fn bilinear_taps(y: usize, x: usize, pl: &Placement, p: usize) -> Vec<(usize, usize, f64)> {
    let s = pl.side as f64;
    let top = pl.center_y - s / 2.0;
    let left = pl.center_x - s / 2.0;
    // Destination pixel center mapped into patch coordinates.
    let sy = ((y as f64 + 0.5 - top) * p as f64 / s - 0.5).clamp(0.0, (p - 1) as f64);
    let sx = ((x as f64 + 0.5 - left) * p as f64 / s - 0.5).clamp(0.0, (p - 1) as f64);
    let y0 = sy.floor() as usize;
    let x0 = sx.floor() as usize;
    let y1 = (y0 + 1).min(p - 1);
    let x1 = (x0 + 1).min(p - 1);
    let wy = sy - y0 as f64;
    let wx = sx - x0 as f64;
    vec![
        (y0, x0, (1.0 - wy) * (1.0 - wx)),
        (y0, x1, (1.0 - wy) * wx),
        (y1, x0, wy * (1.0 - wx)),
        (y1, x1, wy * wx),
    ]
}

/// Which placement (if any) owns each destination pixel. Later placements
/// overwrite earlier ones.
fn ownership_map(h: usize, w: usize, placements: &[Placement]) -> Vec<Option<usize>> {
    let mut owner = vec![None; h * w];
    for (pi, pl) in placements.iter().enumerate() {
        let s = pl.side as f64;
        let y_lo = (pl.center_y - s / 2.0).floor().max(0.0) as usize;
        let x_lo = (pl.center_x - s / 2.0).floor().max(0.0) as usize;
        let y_hi = ((pl.center_y + s / 2.0).ceil() as usize).min(h);
        let x_hi = ((pl.center_x + s / 2.0).ceil() as usize).min(w);
        for y in y_lo..y_hi {
            for x in x_lo..x_hi {
                // A pixel belongs to the placement if its center is inside.
                let cy = y as f64 + 0.5;
                let cx = x as f64 + 0.5;
                if cy >= pl.center_y - s / 2.0
                    && cy < pl.center_y + s / 2.0
                    && cx >= pl.center_x - s / 2.0
                    && cx < pl.center_x + s / 2.0
                {
                    owner[y * w + x] = Some(pi);
                }
            }
        }
    }
    owner
}

/// Applies the placements to `out` (a `[h,w,c]` buffer) by bilinear resize of
/// the patch. This is the exact forward used by [`Graph::paste_resized`].
pub(crate) fn paste_forward(
    patch: &[f64],
    p: usize,
    c: usize,
    out: &mut [f64],
    h: usize,
    w: usize,
    placements: &[Placement],
) {
    let owner = ownership_map(h, w, placements);
    for y in 0..h {
        for x in 0..w {
            if let Some(pi) = owner[y * w + x] {
                let taps = bilinear_taps(y, x, &placements[pi], p);
                for k in 0..c {
                    let mut v = 0.0;
                    for &(py, px, wt) in &taps {
                        v += wt * patch[(py * p + px) * c + k];
                    }
                    out[(y * w + x) * c + k] = v.clamp(0.0, 1.0);
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// SGD with momentum
// ---------------------------------------------------------------------------

/// Plain SGD with heavy-ball momentum. Velocity buffers are keyed by
/// parameter position, so the same optimizer must be stepped with the same
/// parameter list every time.
pub struct Sgd {
    lr: f64,
    momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Sgd {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    /// Updates every parameter in place from its populated gradient, advances
    /// the momentum buffers, and clears the gradients.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::invalid(
                "optimizer stepped with a different parameter list",
            ));
        }
        for (param, vel) in params.iter_mut().zip(self.velocity.iter_mut()) {
            let grad = param
                .grad()
                .ok_or_else(|| Error::invalid("sgd step with missing gradient"))?
                .to_vec();
            for ((p, v), g) in param.data_mut().iter_mut().zip(vel.iter_mut()).zip(&grad) {
                *v = self.momentum * *v + g;
                *p -= self.lr * *v;
            }
            param.clear_grad();
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn conv_identity_kernel() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![3, 3, 1], (1..=9).map(|v| v as f64).collect()).unwrap());
        let k = g.leaf(Tensor::from_vec(vec![1, 1, 1, 1], vec![1.0]).unwrap());
        let y = g.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(g.data(y), g.data(x));
    }

    #[test]
    fn conv_ones_sums_window() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::filled(vec![3, 3, 1], 1.0));
        let k = g.leaf(Tensor::filled(vec![3, 3, 1, 1], 1.0));
        let y = g.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 1]);
        assert_eq!(g.data(y)[0], 9.0);
    }

    #[test]
    fn conv_channel_mismatch_errors() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(vec![4, 4, 2]));
        let k = g.leaf(Tensor::zeros(vec![3, 3, 3, 1]));
        assert!(g.conv2d(x, k, 1, 1).is_err());
    }

    /// Direct quintuple-loop convolution, independent of the graph path.
    fn conv_oracle(
        x: &[f64],
        (h, w, cin): (usize, usize, usize),
        k: &[f64],
        (ks, cout): (usize, usize),
        stride: usize,
        pad: usize,
    ) -> Vec<f64> {
        let ho = (h + 2 * pad - ks) / stride + 1;
        let wo = (w + 2 * pad - ks) / stride + 1;
        let mut out = vec![0.0; ho * wo * cout];
        for oy in 0..ho {
            for ox in 0..wo {
                for co in 0..cout {
                    for ky in 0..ks {
                        for kx in 0..ks {
                            for ci in 0..cin {
                                let iy = oy as isize * stride as isize + ky as isize - pad as isize;
                                let ix = ox as isize * stride as isize + kx as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                out[(oy * wo + ox) * cout + co] += x
                                    [(iy as usize * w + ix as usize) * cin + ci]
                                    * k[((ky * ks + kx) * cin + ci) * cout + co];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(h, w, cin, cout, ks, stride, pad) in &[
            (5, 5, 1, 1, 3, 1, 0),
            (8, 8, 3, 2, 5, 1, 2),
            (8, 6, 2, 3, 3, 2, 1),
            (7, 7, 3, 4, 1, 1, 0),
            (6, 8, 1, 2, 5, 2, 2),
        ] {
            let x = rand_tensor(&mut rng, vec![h, w, cin], -1.0, 1.0);
            let k = rand_tensor(&mut rng, vec![ks, ks, cin, cout], -1.0, 1.0);
            let expected = conv_oracle(x.data(), (h, w, cin), k.data(), (ks, cout), stride, pad);
            let mut g = Graph::new();
            let xi = g.leaf(x);
            let ki = g.leaf(k);
            let y = g.conv2d(xi, ki, stride, pad).unwrap();
            for (a, b) in g.data(y).iter().zip(&expected) {
                assert!((a - b).abs() < 1e-12, "conv mismatch: {} vs {}", a, b);
            }
        }
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(0.0));
        let y = g.sigmoid(x);
        assert_eq!(g.data(y)[0], 0.5);
    }

    #[test]
    fn softmax_symmetry() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![2], vec![0.0, 0.0]).unwrap());
        let y = g.softmax_lastdim(x);
        assert_eq!(g.data(y), &[0.5, 0.5]);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap());
        let loss = g.sum(x);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![3], vec![1.0, -2.0, 3.0]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(vec![3]));
        let y = g.sigmoid(x);
        assert!(g.backward(y).is_err());
    }

    /// Central finite difference of `f` at one coordinate of one leaf.
    fn finite_diff<F: Fn(&[Tensor]) -> f64>(
        f: &F,
        leaves: &[Tensor],
        which: usize,
        coord: usize,
        step: f64,
    ) -> f64 {
        let mut plus = leaves.to_vec();
        plus[which].data_mut()[coord] += step;
        let mut minus = leaves.to_vec();
        minus[which].data_mut()[coord] -= step;
        (f(&plus) - f(&minus)) / (2.0 * step)
    }

    fn check_grads<F: Fn(&[Tensor]) -> f64, B: Fn(&mut Graph, &[NodeId]) -> NodeId>(
        leaves: Vec<Tensor>,
        build: B,
        eval: F,
    ) {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = leaves.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = build(&mut g, &ids);
        g.backward(loss).unwrap();
        for (which, id) in ids.iter().enumerate() {
            let analytic = g.grad(*id).unwrap().to_vec();
            for coord in 0..analytic.len() {
                let fd = finite_diff(&eval, &leaves, which, coord, 1e-4);
                let scale = analytic[coord].abs().max(fd.abs()).max(1e-6);
                let rel = (analytic[coord] - fd).abs() / scale;
                assert!(
                    rel < 1e-3,
                    "leaf {} coord {}: analytic {} vs fd {} (rel {})",
                    which,
                    coord,
                    analytic[coord],
                    fd,
                    rel
                );
            }
        }
    }

    #[test]
    fn silu_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let x = rand_tensor(&mut rng, vec![4], -2.0, 2.0);
            check_grads(
                vec![x],
                |g, ids| {
                    let y = g.silu(ids[0]);
                    g.sum(y)
                },
                |leaves| leaves[0].data().iter().map(|&v| v * sigmoid(v)).sum(),
            );
        }
    }

    /// Gradient soundness over randomized composite graphs of the supported
    /// primitives: at least 100 trials in total, each checked coordinate
    /// against central finite differences at 1e-4.
    #[test]
    fn composite_graphs_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);

        // conv -> bias -> silu -> mean
        for _ in 0..15 {
            let x = rand_tensor(&mut rng, vec![5, 5, 2], -1.0, 1.0);
            let k = rand_tensor(&mut rng, vec![3, 3, 2, 2], -1.0, 1.0);
            let b = rand_tensor(&mut rng, vec![2], -0.5, 0.5);
            check_grads(
                vec![x, k, b],
                |g, ids| {
                    let c = g.conv2d(ids[0], ids[1], 1, 1).unwrap();
                    let c = g.channel_bias(c, ids[2]).unwrap();
                    let a = g.silu(c);
                    g.mean(a)
                },
                |leaves| {
                    let mut g = Graph::new();
                    let ids: Vec<NodeId> = leaves.iter().map(|t| g.leaf(t.clone())).collect();
                    let c = g.conv2d(ids[0], ids[1], 1, 1).unwrap();
                    let c = g.channel_bias(c, ids[2]).unwrap();
                    let a = g.silu(c);
                    let m = g.mean(a);
                    g.data(m)[0]
                },
            );
        }

        // linear -> leaky_relu -> softmax -> cross entropy
        for trial in 0..15 {
            let x = rand_tensor(&mut rng, vec![4], -1.5, 1.5);
            let w = rand_tensor(&mut rng, vec![4, 3], -1.0, 1.0);
            let b = rand_tensor(&mut rng, vec![3], -0.5, 0.5);
            let target = trial % 3;
            check_grads(
                vec![x, w, b],
                |g, ids| {
                    let y = g.linear(ids[0], ids[1], ids[2]).unwrap();
                    let y = g.leaky_relu(y, 0.1);
                    g.softmax_cross_entropy(y, target).unwrap()
                },
                |leaves| {
                    let mut g = Graph::new();
                    let ids: Vec<NodeId> = leaves.iter().map(|t| g.leaf(t.clone())).collect();
                    let y = g.linear(ids[0], ids[1], ids[2]).unwrap();
                    let y = g.leaky_relu(y, 0.1);
                    let l = g.softmax_cross_entropy(y, target).unwrap();
                    g.data(l)[0]
                },
            );
        }

        // bce over sigmoid logits plus elementwise arithmetic
        for _ in 0..15 {
            let a = rand_tensor(&mut rng, vec![6], -2.0, 2.0);
            let b = rand_tensor(&mut rng, vec![6], -2.0, 2.0);
            let t = rand_tensor(&mut rng, vec![6], 0.0, 1.0);
            check_grads(
                vec![a, b, t],
                |g, ids| {
                    let s = g.sub(ids[0], ids[1]).unwrap();
                    let m = g.mul(s, ids[0]).unwrap();
                    let m = g.add_scalar(m, 0.3);
                    let m = g.mul_scalar(m, 0.7);
                    g.bce_with_logits(m, ids[2]).unwrap()
                },
                |leaves| {
                    let mut g = Graph::new();
                    let ids: Vec<NodeId> = leaves.iter().map(|t| g.leaf(t.clone())).collect();
                    let s = g.sub(ids[0], ids[1]).unwrap();
                    let m = g.mul(s, ids[0]).unwrap();
                    let m = g.add_scalar(m, 0.3);
                    let m = g.mul_scalar(m, 0.7);
                    let l = g.bce_with_logits(m, ids[2]).unwrap();
                    g.data(l)[0]
                },
            );
        }

        // margin-style graph: gather / softmax / max / min
        for _ in 0..20 {
            let grid = rand_tensor(&mut rng, vec![2, 2, 4], -1.0, 1.0);
            let obj = rand_tensor(&mut rng, vec![2, 2, 1], -1.0, 1.0);
            check_grads(
                vec![grid, obj],
                |g, ids| {
                    let cls = g.gather_cell(ids[0], 1, 0).unwrap();
                    let probs = g.softmax_lastdim(cls);
                    let p = g.index(probs, 2).unwrap();
                    let rest = g.gather_except(probs, 2).unwrap();
                    let best = g.reduce_max(rest).unwrap();
                    let cm = g.sub(p, best).unwrap();
                    let o = g.gather_cell(ids[1], 1, 0).unwrap();
                    let o = g.sigmoid(o);
                    let om = g.add_scalar(o, -0.25);
                    g.min2(om, cm).unwrap()
                },
                |leaves| {
                    let mut g = Graph::new();
                    let ids: Vec<NodeId> = leaves.iter().map(|t| g.leaf(t.clone())).collect();
                    let cls = g.gather_cell(ids[0], 1, 0).unwrap();
                    let probs = g.softmax_lastdim(cls);
                    let p = g.index(probs, 2).unwrap();
                    let rest = g.gather_except(probs, 2).unwrap();
                    let best = g.reduce_max(rest).unwrap();
                    let cm = g.sub(p, best).unwrap();
                    let o = g.gather_cell(ids[1], 1, 0).unwrap();
                    let o = g.sigmoid(o);
                    let om = g.add_scalar(o, -0.25);
                    let m = g.min2(om, cm).unwrap();
                    g.data(m)[0]
                },
            );
        }

        // total variation and bilinear paste
        for _ in 0..20 {
            let patch = rand_tensor(&mut rng, vec![4, 4, 1], 0.1, 0.9);
            let base = rand_tensor(&mut rng, vec![8, 8, 1], 0.1, 0.9);
            let placements = vec![
                Placement { center_x: 3.0, center_y: 3.0, side: 4 },
                Placement { center_x: 6.0, center_y: 6.0, side: 3 },
            ];
            let pl2 = placements.clone();
            check_grads(
                vec![patch, base],
                move |g, ids| {
                    let pasted = g.paste_resized(ids[0], ids[1], placements.clone()).unwrap();
                    let m = g.mean(pasted);
                    let tv = g.total_variation(ids[0]).unwrap();
                    g.add(m, tv).unwrap()
                },
                move |leaves| {
                    let mut g = Graph::new();
                    let ids: Vec<NodeId> = leaves.iter().map(|t| g.leaf(t.clone())).collect();
                    let pasted = g.paste_resized(ids[0], ids[1], pl2.clone()).unwrap();
                    let m = g.mean(pasted);
                    let tv = g.total_variation(ids[0]).unwrap();
                    let l = g.add(m, tv).unwrap();
                    g.data(l)[0]
                },
            );
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, vec![6, 6, 2], -1.0, 1.0);
        let k = rand_tensor(&mut rng, vec![3, 3, 2, 3], -1.0, 1.0);
        let run = || {
            let mut g = Graph::new();
            let xi = g.leaf(x.clone());
            let ki = g.leaf(k.clone());
            let c = g.conv2d(xi, ki, 2, 1).unwrap();
            let a = g.silu(c);
            let loss = g.mean(a);
            g.backward(loss).unwrap();
            (g.data(loss).to_vec(), g.grad(xi).unwrap().to_vec())
        };
        let (v1, g1) = run();
        let (v2, g2) = run();
        assert_eq!(v1, v2);
        assert_eq!(g1, g2);
    }

    #[test]
    fn sgd_zero_lr_keeps_params() {
        let mut p = Tensor::from_vec(vec![2], vec![1.0, -1.0]).unwrap();
        p.set_grad(vec![5.0, 5.0]).unwrap();
        let mut opt = Sgd::new(0.0, 0.9);
        opt.step(&mut [&mut p]).unwrap();
        assert_eq!(p.data(), &[1.0, -1.0]);
        assert!(p.grad().is_none());
    }

    #[test]
    fn sgd_single_step_arithmetic() {
        let mut p = Tensor::from_vec(vec![1], vec![1.0]).unwrap();
        p.set_grad(vec![2.0]).unwrap();
        let mut opt = Sgd::new(0.1, 0.0);
        opt.step(&mut [&mut p]).unwrap();
        assert!((p.data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn sgd_converges_on_quadratic() {
        // f(p) = p^2, grad = 2p; with lr 0.1 each step multiplies p by 0.8.
        let mut p = Tensor::from_vec(vec![1], vec![1.0]).unwrap();
        let mut opt = Sgd::new(0.1, 0.0);
        for _ in 0..10 {
            let g = 2.0 * p.data()[0];
            p.set_grad(vec![g]).unwrap();
            opt.step(&mut [&mut p]).unwrap();
        }
        assert!((p.data()[0] - 0.8f64.powi(10)).abs() < 1e-12);
    }

    #[test]
    fn sgd_missing_grad_errors() {
        let mut p = Tensor::from_vec(vec![1], vec![1.0]).unwrap();
        let mut opt = Sgd::new(0.1, 0.0);
        assert!(opt.step(&mut [&mut p]).is_err());
    }

    #[test]
    fn tensor_shape_mismatch_errors() {
        assert!(Tensor::from_vec(vec![2, 3], vec![0.0; 5]).is_err());
    }
}
