use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvDims {
    batch: usize,
    in_channels: usize,
    out_channels: usize,
    height: usize,
    width: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul {
        a: NodeId,
        b: NodeId,
    },
    AddBias {
        x: NodeId,
        bias: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        factor: f32,
    },
    Sum {
        x: NodeId,
    },
    Relu {
        x: NodeId,
    },
    Conv2d {
        x: NodeId,
        kernels: NodeId,
        bias: NodeId,
        dims: ConvDims,
    },
    MaxPool2 {
        x: NodeId,
        argmax: Vec<usize>,
    },
    Reshape {
        x: NodeId,
    },
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<f32>,
    },
    Mse {
        pred: NodeId,
        target: Vec<f32>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    out: Tensor,
}

/// Append-only tape of operations. Node ids are handed out in topological
/// order, so the backward sweep is a single reverse scan.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_passes: usize,
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

    /// Number of completed `backward` calls on this graph.
    pub fn backward_passes(&self) -> usize {
        self.backward_passes
    }

    pub fn leaf(&mut self, tensor: Tensor) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            out: tensor,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].out
    }

    pub fn grad(&self, id: NodeId) -> &[f32] {
        self.nodes[id.0].out.grad()
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.out.zero_grad();
        }
    }

    fn push(&mut self, op: Op, out: Tensor, name: &'static str) -> Result<NodeId> {
        if !out.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node { op, out });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].out.shape()
    }

    fn vals(&self, id: NodeId) -> &[f32] {
        self.nodes[id.0].out.values()
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (av, bv) = (self.vals(a), self.vals(b));
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = av[i * k + p];
                let brow = &bv[p * n..(p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        }
        let out = Tensor::new(vec![m, n], out)?;
        self.push(Op::MatMul { a, b }, out, "matmul")
    }

    /// Adds a bias vector to every row of a 2-D tensor.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(Error::Dimension {
                op: "add_bias",
                lhs: sx.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let cols = sb[0];
        let bv = self.vals(bias);
        let out: Vec<f32> = self.vals(x).iter().enumerate().map(|(i, v)| v + bv[i % cols]).collect();
        let out = Tensor::new(sx.to_vec(), out)?;
        self.push(Op::AddBias { x, bias }, out, "add_bias")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let out: Vec<f32> = self.vals(a).iter().zip(self.vals(b)).map(|(x, y)| x + y).collect();
        let out = Tensor::new(self.shape(a).to_vec(), out)?;
        self.push(Op::Add { a, b }, out, "add")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let out: Vec<f32> = self.vals(a).iter().zip(self.vals(b)).map(|(x, y)| x * y).collect();
        let out = Tensor::new(self.shape(a).to_vec(), out)?;
        self.push(Op::Mul { a, b }, out, "mul")
    }

    pub fn scale(&mut self, x: NodeId, factor: f32) -> Result<NodeId> {
        let out: Vec<f32> = self.vals(x).iter().map(|v| v * factor).collect();
        let out = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push(Op::Scale { x, factor }, out, "scale")
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let total: f32 = self.vals(x).iter().sum();
        self.push(Op::Sum { x }, Tensor::scalar(total), "sum")
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let out: Vec<f32> = self.vals(x).iter().map(|v| v.max(0.0)).collect();
        let out = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push(Op::Relu { x }, out, "relu")
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let out = self.value(x).reshaped(shape)?;
        self.push(Op::Reshape { x }, out, "reshape")
    }

    /// 3x3 cross-correlation, stride 1, zero same-padding.
    ///
    /// `x` is `[c_in, h, w]` or batched `[n, c_in, h, w]`; `kernels` is
    /// `[c_out, c_in, 3, 3]` and `bias` is `[c_out]`. The output keeps the
    /// rank of `x`.
    pub fn conv2d(&mut self, x: NodeId, kernels: NodeId, bias: NodeId) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        let sk = self.shape(kernels).to_vec();
        let sb = self.shape(bias).to_vec();
        let (batch, chw) = match sx.len() {
            3 => (1, &sx[..]),
            4 => (sx[0], &sx[1..]),
            _ => {
                return Err(Error::Dimension {
                    op: "conv2d",
                    lhs: sx.clone(),
                    rhs: sk,
                })
            }
        };
        if sk.len() != 4 || sk[2] != 3 || sk[3] != 3 || sk[1] != chw[0] {
            return Err(Error::Dimension {
                op: "conv2d",
                lhs: sx.clone(),
                rhs: sk,
            });
        }
        if sb != [sk[0]] {
            return Err(Error::Dimension {
                op: "conv2d bias",
                lhs: sk,
                rhs: sb,
            });
        }
        let dims = ConvDims {
            batch,
            in_channels: chw[0],
            out_channels: sk[0],
            height: chw[1],
            width: chw[2],
        };
        let out = conv_forward(self.vals(x), self.vals(kernels), self.vals(bias), dims);
        let shape = if sx.len() == 3 {
            vec![dims.out_channels, dims.height, dims.width]
        } else {
            vec![batch, dims.out_channels, dims.height, dims.width]
        };
        let out = Tensor::new(shape, out)?;
        self.push(Op::Conv2d { x, kernels, bias, dims }, out, "conv2d")
    }

    /// 2x2 max-pooling, stride 2, ceil mode. Odd trailing rows/columns form
    /// partial windows; ties resolve to the first element in row-major order.
    pub fn maxpool2(&mut self, x: NodeId) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 {
            return Err(Error::Dimension {
                op: "maxpool2",
                lhs: sx,
                rhs: vec![],
            });
        }
        let (h, w) = (sx[sx.len() - 2], sx[sx.len() - 1]);
        let planes: usize = sx[..sx.len() - 2].iter().product();
        let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
        let xv = self.vals(x);
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = usize::MAX;
                    for y in 2 * oy..(2 * oy + 2).min(h) {
                        for xx in 2 * ox..(2 * ox + 2).min(w) {
                            let idx = base + y * w + xx;
                            if best_idx == usize::MAX || xv[idx] > best {
                                best = xv[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_idx);
                }
            }
        }
        let mut shape = sx[..sx.len() - 2].to_vec();
        shape.extend([oh, ow]);
        let out = Tensor::new(shape, out)?;
        self.push(Op::MaxPool2 { x, argmax }, out, "maxpool2")
    }

    /// Batch-mean softmax cross-entropy of `[n, C]` logits against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 || sl[0] != labels.len() {
            return Err(Error::Dimension {
                op: "softmax_cross_entropy",
                lhs: sl,
                rhs: vec![labels.len()],
            });
        }
        let (n, classes) = (sl[0], sl[1]);
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Label { label, classes });
        }
        let lv = self.vals(logits);
        let mut probs = vec![0.0f32; n * classes];
        let mut total = 0.0f64;
        for i in 0..n {
            let row = &lv[i * classes..(i + 1) * classes];
            let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
            let denom: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
            let lse = max + denom.ln();
            for (c, &v) in row.iter().enumerate() {
                probs[i * classes + c] = ((v as f64 - max).exp() / denom) as f32;
            }
            total += lse - row[labels[i]] as f64;
        }
        let loss = Tensor::scalar((total / n as f64) as f32);
        self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            loss,
            "softmax_cross_entropy",
        )
    }

    /// Mean squared error over every element.
    pub fn mse(&mut self, pred: NodeId, target: &[f32]) -> Result<NodeId> {
        if self.value(pred).len() != target.len() {
            return Err(Error::Dimension {
                op: "mse",
                lhs: self.shape(pred).to_vec(),
                rhs: vec![target.len()],
            });
        }
        let total: f64 = self
            .vals(pred)
            .iter()
            .zip(target)
            .map(|(&p, &t)| {
                let d = p as f64 - t as f64;
                d * d
            })
            .sum();
        let loss = Tensor::scalar((total / target.len() as f64) as f32);
        self.push(
            Op::Mse {
                pred,
                target: target.to_vec(),
            },
            loss,
            "mse",
        )
    }

    /// Reverse sweep from a scalar `loss`. Gradients accumulate into every
    /// node's grad buffer, so repeated calls sum; use `zero_grads` to reset.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Usage(format!("node {} is not in the graph", loss.0)));
        }
        if !self.nodes[loss.0].out.is_scalar() {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].out.shape()
            )));
        }
        let mut adj: Vec<Vec<f32>> = vec![Vec::new(); loss.0 + 1];
        adj[loss.0] = vec![1.0];
        for i in (0..=loss.0).rev() {
            let g = std::mem::take(&mut adj[i]);
            if g.is_empty() {
                continue;
            }
            self.propagate(i, &g, &mut adj);
            adj[i] = g;
        }
        for (node, g) in self.nodes.iter_mut().zip(&adj) {
            if g.is_empty() {
                continue;
            }
            for (dst, src) in node.out.grad_mut().iter_mut().zip(g) {
                *dst += src;
            }
            if !node.out.grad().iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite { op: "backward" });
            }
        }
        self.backward_passes += 1;
        Ok(())
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f32], adj: &mut [Vec<f32>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (self.vals(*a), self.vals(*b));
                let da = slot(adj, *a, m * k);
                for r in 0..m {
                    for p in 0..k {
                        let mut acc = 0.0f32;
                        for c in 0..n {
                            acc += g[r * n + c] * bv[p * n + c];
                        }
                        da[r * k + p] += acc;
                    }
                }
                let mut local = vec![0.0f32; k * n];
                for r in 0..m {
                    for p in 0..k {
                        let arp = av[r * k + p];
                        for c in 0..n {
                            local[p * n + c] += arp * g[r * n + c];
                        }
                    }
                }
                add_into(slot(adj, *b, k * n), &local);
            }
            Op::AddBias { x, bias } => {
                let cols = self.shape(*bias)[0];
                let dx = slot(adj, *x, g.len());
                for (d, v) in dx.iter_mut().zip(g) {
                    *d += v;
                }
                let mut local = vec![0.0f32; cols];
                for (idx, v) in g.iter().enumerate() {
                    local[idx % cols] += v;
                }
                add_into(slot(adj, *bias, cols), &local);
            }
            Op::Add { a, b } => {
                for id in [*a, *b] {
                    let d = slot(adj, id, g.len());
                    for (d, v) in d.iter_mut().zip(g) {
                        *d += v;
                    }
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.vals(*a), self.vals(*b));
                let da = slot(adj, *a, g.len());
                for ((d, v), o) in da.iter_mut().zip(g).zip(bv) {
                    *d += v * o;
                }
                let db = slot(adj, *b, g.len());
                for ((d, v), o) in db.iter_mut().zip(g).zip(av) {
                    *d += v * o;
                }
            }
            Op::Scale { x, factor } => {
                let dx = slot(adj, *x, g.len());
                for (d, v) in dx.iter_mut().zip(g) {
                    *d += v * factor;
                }
            }
            Op::Sum { x } => {
                let n = self.value(*x).len();
                let dx = slot(adj, *x, n);
                for d in dx.iter_mut() {
                    *d += g[0];
                }
            }
            Op::Relu { x } => {
                let xv = self.vals(*x);
                let dx = slot(adj, *x, g.len());
                for ((d, v), &xi) in dx.iter_mut().zip(g).zip(xv) {
                    if xi > 0.0 {
                        *d += v;
                    }
                }
            }
            Op::Reshape { x } => {
                let dx = slot(adj, *x, g.len());
                for (d, v) in dx.iter_mut().zip(g) {
                    *d += v;
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let n = self.value(*x).len();
                let dx = slot(adj, *x, n);
                for (&src, v) in argmax.iter().zip(g) {
                    dx[src] += v;
                }
            }
            Op::Conv2d { x, kernels, bias, dims } => {
                let (xv, kv) = (self.vals(*x), self.vals(*kernels));
                let (dx, dk, db) = conv_backward(xv, kv, g, *dims);
                for (id, grad) in [(*x, dx), (*kernels, dk), (*bias, db)] {
                    add_into(slot(adj, id, grad.len()), &grad);
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let n = labels.len();
                let classes = probs.len() / n;
                let scale = g[0] / n as f32;
                let d = slot(adj, *logits, probs.len());
                for (r, &label) in labels.iter().enumerate() {
                    for c in 0..classes {
                        let onehot = if c == label { 1.0 } else { 0.0 };
                        d[r * classes + c] += (probs[r * classes + c] - onehot) * scale;
                    }
                }
            }
            Op::Mse { pred, target } => {
                let pv = self.vals(*pred);
                let scale = 2.0 * g[0] / target.len() as f32;
                let d = slot(adj, *pred, target.len());
                for ((d, &p), &t) in d.iter_mut().zip(pv).zip(target) {
                    *d += (p - t) * scale;
                }
            }
        }
    }
}

/// Each op's contribution is formed in full before one add into the
/// adjoint, so backward(L1 + L2) rounds like backward(L1) + backward(L2).
fn add_into(dst: &mut [f32], src: &[f32]) {
    for (d, v) in dst.iter_mut().zip(src) {
        *d += v;
    }
}

fn slot(adj: &mut [Vec<f32>], id: NodeId, len: usize) -> &mut [f32] {
    let v = &mut adj[id.0];
    if v.is_empty() {
        v.resize(len, 0.0);
    }
    v
}

fn conv_forward(x: &[f32], k: &[f32], bias: &[f32], d: ConvDims) -> Vec<f32> {
    let (h, w) = (d.height, d.width);
    let plane = h * w;
    let mut out = vec![0.0f32; d.batch * d.out_channels * plane];
    for n in 0..d.batch {
        for o in 0..d.out_channels {
            let dst = &mut out[(n * d.out_channels + o) * plane..][..plane];
            dst.iter_mut().for_each(|v| *v = bias[o]);
            for c in 0..d.in_channels {
                let src = &x[(n * d.in_channels + c) * plane..][..plane];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let wgt = k[((o * d.in_channels + c) * 3 + ky) * 3 + kx];
                        for y in 0..h {
                            let iy = y + ky;
                            if iy < 1 || iy > h {
                                continue;
                            }
                            let iy = iy - 1;
                            for xx in 0..w {
                                let ix = xx + kx;
                                if ix < 1 || ix > w {
                                    continue;
                                }
                                dst[y * w + xx] += wgt * src[iy * w + ix - 1];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_backward(x: &[f32], k: &[f32], g: &[f32], d: ConvDims) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let (h, w) = (d.height, d.width);
    let plane = h * w;
    let mut dx = vec![0.0f32; x.len()];
    let mut dk = vec![0.0f32; k.len()];
    let mut db = vec![0.0f32; d.out_channels];
    for n in 0..d.batch {
        for o in 0..d.out_channels {
            let go = &g[(n * d.out_channels + o) * plane..][..plane];
            db[o] += go.iter().sum::<f32>();
            for c in 0..d.in_channels {
                let xoff = (n * d.in_channels + c) * plane;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let kidx = ((o * d.in_channels + c) * 3 + ky) * 3 + kx;
                        let wgt = k[kidx];
                        let mut acc = 0.0f32;
                        for y in 0..h {
                            let iy = y + ky;
                            if iy < 1 || iy > h {
                                continue;
                            }
                            let iy = iy - 1;
                            for xx in 0..w {
                                let ix = xx + kx;
                                if ix < 1 || ix > w {
                                    continue;
                                }
                                let src = xoff + iy * w + ix - 1;
                                let gv = go[y * w + xx];
                                acc += gv * x[src];
                                dx[src] += wgt * gv;
                            }
                        }
                        dk[kidx] += acc;
                    }
                }
            }
        }
    }
    (dx, dk, db)
}
