use super::kernels;
use super::params::ParamId;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle into a [`Graph`] arena.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct NodeId(u32);

impl NodeId {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf { param: Option<ParamId> },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddScalar(NodeId),
    MulScalar(NodeId, f64),
    Exp(NodeId),
    Log(NodeId),
    Recip(NodeId),
    Square(NodeId),
    Sqrt(NodeId),
    Softplus(NodeId),
    Sigmoid(NodeId),
    LeakyRelu(NodeId, f64),
    Clamp(NodeId, f64, f64),
    Sum(NodeId),
    /// Scalar broadcast to the node's own shape.
    Broadcast(NodeId),
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Conv { x: NodeId, k: NodeId, stride: usize },
    /// Adjoint of `Conv` in `x`; the node's own shape fixes the input dims.
    ConvBwdInput { g: NodeId, k: NodeId, stride: usize },
    /// Adjoint of `Conv` in `k`.
    ConvBwdKernel { g: NodeId, x: NodeId, stride: usize },
    /// `[c, h, w] + [c]` with the bias broadcast over the spatial grid.
    BiasChw(NodeId, NodeId),
    /// `[c, h, w] -> [c]`, summing over the spatial grid.
    ChanSum(NodeId),
    /// `[c] -> [c, h, w]`; the node's own shape fixes `h, w`.
    SpatialBroadcast(NodeId),
    Upsample2x(NodeId),
    SumPool2x(NodeId),
    /// Same data, new shape (recorded on the node itself).
    Reshape(NodeId),
    /// Concatenation along axis 0; trailing dims must agree.
    Concat0(Vec<NodeId>),
    /// `start..start+len` along axis 0.
    Slice0 { x: NodeId, start: usize, len: usize },
}

struct NodeData {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Append-only computation arena. Node insertion order is a topological
/// order, and `backward` walks it in reverse, so evaluation is deterministic
/// given a deterministic construction sequence.
pub struct Graph {
    nodes: Vec<NodeData>,
}

/// Gradient nodes produced by one `backward` call, indexed by the node ids
/// that existed when it ran.
pub struct Grads {
    map: Vec<Option<NodeId>>,
}

impl Grads {
    /// Gradient of the backward root with respect to `id`, if any flows.
    pub fn get(&self, id: NodeId) -> Option<NodeId> {
        self.map.get(id.idx()).copied().flatten()
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        // Training graphs run to a few thousand nodes; one up-front block
        // avoids repeated arena growth.
        Graph { nodes: Vec::with_capacity(4096) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.idx()].value
    }

    /// Copy of the value, detached from the graph.
    pub fn detach(&self, id: NodeId) -> Tensor {
        self.nodes[id.idx()].value.clone()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(NodeData { value, op, needs_grad });
        id
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.idx()].needs_grad
    }

    // ── Leaves ──────────────────────────────────────────────────────────

    /// Constant input; no gradient flows into it.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf { param: None }, false)
    }

    /// Trainable parameter leaf, tagged for gradient collection.
    pub fn param_leaf(&mut self, value: Tensor, param: ParamId) -> NodeId {
        self.push(value, Op::Leaf { param: Some(param) }, true)
    }

    /// Non-parameter leaf that still accumulates a gradient (used for
    /// input-gradient computations such as the critic penalty).
    pub fn var_leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf { param: None }, true)
    }

    pub fn constf(&mut self, v: f64) -> NodeId {
        self.leaf(Tensor::scalar(v))
    }

    // ── Elementwise ─────────────────────────────────────────────────────

    fn binary_zip(&mut self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(format!(
                "elementwise op on mismatched shapes {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data: Vec<f64> = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let needs = self.ng(a) || self.ng(b);
        Ok(self.push(value, op, needs))
    }

    fn unary_map(&mut self, a: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let value = self.value(a).map(f);
        let needs = self.ng(a);
        self.push(value, op, needs)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary_map(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary_map(a, |x| x * c, Op::MulScalar(a, c))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.mul_scalar(a, -1.0)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary_map(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.unary_map(a, f64::ln, Op::Log(a))
    }

    pub fn recip(&mut self, a: NodeId) -> NodeId {
        self.unary_map(a, |x| 1.0 / x, Op::Recip(a))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary_map(a, |x| x * x, Op::Square(a))
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.unary_map(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.unary_map(a, kernels::softplus, Op::Softplus(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary_map(a, kernels::sigmoid, Op::Sigmoid(a))
    }

    /// `x * sigmoid(x)`, composed from primitives so its derivative (and the
    /// derivative of that) come from the chain rule.
    pub fn swish(&mut self, a: NodeId) -> NodeId {
        let s = self.sigmoid(a);
        self.mul(a, s).expect("same shape by construction")
    }

    /// `max(x, slope * x)` for `slope` in `(0, 1)`. Far cheaper than the
    /// smooth activations; the derivative is a value-derived constant mask,
    /// so double backward treats it as locally linear (exact off the kink).
    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> NodeId {
        self.unary_map(a, |x| if x > 0.0 { x } else { slope * x }, Op::LeakyRelu(a, slope))
    }

    /// Hard clamp. The gradient passes unchanged inside `[lo, hi]` and is
    /// zero outside.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        self.unary_map(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    // ── Reductions and shape ops ───────────────────────────────────────

    /// Full reduction to a `[1]` scalar, summed in element order.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).data().iter().sum();
        let needs = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), needs)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.mul_scalar(s, 1.0 / n)
    }

    /// Broadcast a `[1]` scalar to `shape`.
    pub fn broadcast(&mut self, s: NodeId, shape: &[usize]) -> Result<NodeId> {
        if self.value(s).numel() != 1 {
            return Err(Error::shape("broadcast expects a scalar"));
        }
        let v = self.value(s).item();
        let needs = self.ng(s);
        Ok(self.push(Tensor::filled(shape, v), Op::Broadcast(s), needs))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(a).reshape(shape)?;
        let needs = self.ng(a);
        Ok(self.push(value, Op::Reshape(a), needs))
    }

    pub fn concat0(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::shape("concat of zero tensors"));
        }
        let first = self.value(parts[0]).shape().to_vec();
        let trailing = &first[1..];
        let mut dim0 = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if &s[1..] != trailing {
                return Err(Error::shape(format!(
                    "concat trailing dims differ: {:?} vs {:?}",
                    s, first
                )));
            }
            dim0 += s[0];
        }
        let mut shape = first.clone();
        shape[0] = dim0;
        let mut data = Vec::with_capacity(shape.iter().product());
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(shape, data)?;
        let needs = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(value, Op::Concat0(parts.to_vec()), needs))
    }

    pub fn slice0(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let v = self.value(a);
        let shape = v.shape().to_vec();
        if start + len > shape[0] || len == 0 {
            return Err(Error::shape(format!(
                "slice {start}..{} out of axis-0 bound {}",
                start + len,
                shape[0]
            )));
        }
        let row: usize = shape[1..].iter().product::<usize>().max(1);
        let data = v.data()[start * row..(start + len) * row].to_vec();
        let mut out_shape = shape.clone();
        out_shape[0] = len;
        let value = Tensor::new(out_shape, data)?;
        let needs = self.ng(a);
        Ok(self.push(value, Op::Slice0 { x: a, start, len }, needs))
    }

    // ── Linear algebra and spatial ops ──────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!("matmul on {:?} x {:?}", sa, sb)));
        }
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), sa[0], sa[1], sb[1]);
        let value = Tensor::new(vec![sa[0], sb[1]], data)?;
        let needs = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Matmul(a, b), needs))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).shape().to_vec();
        if s.len() != 2 {
            return Err(Error::shape(format!("transpose on rank-{} tensor", s.len())));
        }
        let data = kernels::transpose(self.value(a).data(), s[0], s[1]);
        let value = Tensor::new(vec![s[1], s[0]], data)?;
        let needs = self.ng(a);
        Ok(self.push(value, Op::Transpose(a), needs))
    }

    fn chw(&self, id: NodeId, what: &str) -> Result<(usize, usize, usize)> {
        let s = self.value(id).shape();
        if s.len() != 3 {
            return Err(Error::shape(format!("{what} expects [c, h, w], got {s:?}")));
        }
        Ok((s[0], s[1], s[2]))
    }

    fn kernel_dims(&self, id: NodeId) -> Result<(usize, usize)> {
        let s = self.value(id).shape();
        if s.len() != 4 || s[2] != 3 || s[3] != 3 {
            return Err(Error::shape(format!("conv kernel must be [cout, cin, 3, 3], got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    fn check_stride(stride: usize) -> Result<()> {
        if stride == 1 || stride == 2 {
            Ok(())
        } else {
            Err(Error::contract(format!("conv stride must be 1 or 2, got {stride}")))
        }
    }

    /// 3x3 convolution with zero padding 1. Stride 2 halves spatial dims
    /// rounding up.
    pub fn conv2d(&mut self, x: NodeId, k: NodeId, stride: usize) -> Result<NodeId> {
        Self::check_stride(stride)?;
        let (cin, h, w) = self.chw(x, "conv2d input")?;
        let (cout, kcin) = self.kernel_dims(k)?;
        if kcin != cin {
            return Err(Error::shape(format!(
                "conv2d channel mismatch: input has {cin}, kernel wants {kcin}"
            )));
        }
        let (oh, ow) = kernels::conv_out_dims(h, w, stride);
        let data = kernels::conv3x3(self.value(x).data(), cin, h, w, self.value(k).data(), cout, stride);
        let value = Tensor::new(vec![cout, oh, ow], data)?;
        let needs = self.ng(x) || self.ng(k);
        Ok(self.push(value, Op::Conv { x, k, stride }, needs))
    }

    /// Adjoint of [`Graph::conv2d`] in its input: maps an output-shaped `g`
    /// back to an input of dims `(h, w)`.
    pub fn conv2d_bwd_input(&mut self, g: NodeId, k: NodeId, stride: usize, h: usize, w: usize) -> Result<NodeId> {
        Self::check_stride(stride)?;
        let (gc, gh, gw) = self.chw(g, "conv2d_bwd_input grad")?;
        let (cout, cin) = self.kernel_dims(k)?;
        let (oh, ow) = kernels::conv_out_dims(h, w, stride);
        if gc != cout || gh != oh || gw != ow {
            return Err(Error::shape(format!(
                "conv2d_bwd_input grad shape [{gc}, {gh}, {gw}] inconsistent with kernel/dims"
            )));
        }
        let data =
            kernels::conv3x3_bwd_input(self.value(g).data(), cout, self.value(k).data(), cin, h, w, stride);
        let value = Tensor::new(vec![cin, h, w], data)?;
        let needs = self.ng(g) || self.ng(k);
        Ok(self.push(value, Op::ConvBwdInput { g, k, stride }, needs))
    }

    /// Adjoint of [`Graph::conv2d`] in its kernel.
    pub fn conv2d_bwd_kernel(&mut self, g: NodeId, x: NodeId, stride: usize) -> Result<NodeId> {
        Self::check_stride(stride)?;
        let (cout, gh, gw) = self.chw(g, "conv2d_bwd_kernel grad")?;
        let (cin, h, w) = self.chw(x, "conv2d_bwd_kernel input")?;
        let (oh, ow) = kernels::conv_out_dims(h, w, stride);
        if gh != oh || gw != ow {
            return Err(Error::shape("conv2d_bwd_kernel grad dims inconsistent with input"));
        }
        let data =
            kernels::conv3x3_bwd_kernel(self.value(g).data(), cout, self.value(x).data(), cin, h, w, stride);
        let value = Tensor::new(vec![cout, cin, 3, 3], data)?;
        let needs = self.ng(g) || self.ng(x);
        Ok(self.push(value, Op::ConvBwdKernel { g, x, stride }, needs))
    }

    /// `[c, h, w] + [c]` per-channel bias.
    pub fn bias_chw(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (c, h, w) = self.chw(x, "bias_chw input")?;
        if self.value(b).shape() != [c] {
            return Err(Error::shape(format!(
                "bias shape {:?} does not match {c} channels",
                self.value(b).shape()
            )));
        }
        let mut data = self.value(x).data().to_vec();
        for ch in 0..c {
            let bv = self.value(b).data()[ch];
            for v in &mut data[ch * h * w..(ch + 1) * h * w] {
                *v += bv;
            }
        }
        let value = Tensor::new(vec![c, h, w], data)?;
        let needs = self.ng(x) || self.ng(b);
        Ok(self.push(value, Op::BiasChw(x, b), needs))
    }

    /// `[c, h, w] -> [c]` summing over the spatial grid.
    pub fn chan_sum(&mut self, x: NodeId) -> Result<NodeId> {
        let (c, h, w) = self.chw(x, "chan_sum input")?;
        let data: Vec<f64> = (0..c)
            .map(|ch| self.value(x).data()[ch * h * w..(ch + 1) * h * w].iter().sum())
            .collect();
        let value = Tensor::new(vec![c], data)?;
        let needs = self.ng(x);
        Ok(self.push(value, Op::ChanSum(x), needs))
    }

    pub fn chan_mean(&mut self, x: NodeId) -> Result<NodeId> {
        let (_, h, w) = self.chw(x, "chan_mean input")?;
        let s = self.chan_sum(x)?;
        Ok(self.mul_scalar(s, 1.0 / (h * w) as f64))
    }

    /// `[c] -> [c, h, w]` replicating each channel value over the grid.
    pub fn spatial_broadcast(&mut self, v: NodeId, h: usize, w: usize) -> Result<NodeId> {
        let s = self.value(v).shape().to_vec();
        if s.len() != 1 {
            return Err(Error::shape(format!("spatial_broadcast expects [c], got {s:?}")));
        }
        let c = s[0];
        let mut data = vec![0.0; c * h * w];
        for ch in 0..c {
            data[ch * h * w..(ch + 1) * h * w].fill(self.value(v).data()[ch]);
        }
        let value = Tensor::new(vec![c, h, w], data)?;
        let needs = self.ng(v);
        Ok(self.push(value, Op::SpatialBroadcast(v), needs))
    }

    pub fn upsample2x(&mut self, x: NodeId) -> Result<NodeId> {
        let (c, h, w) = self.chw(x, "upsample2x input")?;
        let data = kernels::upsample2x(self.value(x).data(), c, h, w);
        let value = Tensor::new(vec![c, 2 * h, 2 * w], data)?;
        let needs = self.ng(x);
        Ok(self.push(value, Op::Upsample2x(x), needs))
    }

    pub fn sum_pool2x(&mut self, x: NodeId) -> Result<NodeId> {
        let (c, h, w) = self.chw(x, "sum_pool2x input")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(format!("sum_pool2x needs even dims, got {h}x{w}")));
        }
        let data = kernels::sum_pool2x(self.value(x).data(), c, h, w);
        let value = Tensor::new(vec![c, h / 2, w / 2], data)?;
        let needs = self.ng(x);
        Ok(self.push(value, Op::SumPool2x(x), needs))
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar `root`. Gradients are new nodes in
    /// this same graph, so they can be composed further and differentiated
    /// again. Forward values are never mutated.
    pub fn backward(&mut self, root: NodeId) -> Result<Grads> {
        if self.value(root).numel() != 1 {
            return Err(Error::contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let upto = root.idx() + 1;
        let mut map: Vec<Option<NodeId>> = vec![None; self.nodes.len()];
        let seed = self.leaf(Tensor::scalar(1.0));
        map[root.idx()] = Some(seed);

        for id in (0..upto).rev() {
            let Some(u) = map[id] else { continue };
            if !self.nodes[id].needs_grad {
                continue;
            }
            let op = self.nodes[id].op.clone();
            let out = NodeId(id as u32);
            match op {
                Op::Leaf { .. } => {}
                Op::Add(a, b) => {
                    self.acc(&mut map, a, u)?;
                    self.acc(&mut map, b, u)?;
                }
                Op::Sub(a, b) => {
                    self.acc(&mut map, a, u)?;
                    let nu = self.neg(u);
                    self.acc(&mut map, b, nu)?;
                }
                Op::Mul(a, b) => {
                    if self.ng(a) {
                        let c = self.mul(u, b)?;
                        self.acc(&mut map, a, c)?;
                    }
                    if self.ng(b) {
                        let c = self.mul(u, a)?;
                        self.acc(&mut map, b, c)?;
                    }
                }
                Op::AddScalar(a) => self.acc(&mut map, a, u)?,
                Op::MulScalar(a, c) => {
                    let g = self.mul_scalar(u, c);
                    self.acc(&mut map, a, g)?;
                }
                Op::Exp(a) => {
                    let g = self.mul(u, out)?;
                    self.acc(&mut map, a, g)?;
                }
                Op::Log(a) => {
                    let r = self.recip(a);
                    let g = self.mul(u, r)?;
                    self.acc(&mut map, a, g)?;
                }
                Op::Recip(a) => {
                    let o2 = self.square(out);
                    let m = self.mul(u, o2)?;
                    let g = self.neg(m);
                    self.acc(&mut map, a, g)?;
                }
                Op::Square(a) => {
                    let m = self.mul(u, a)?;
                    let g = self.mul_scalar(m, 2.0);
                    self.acc(&mut map, a, g)?;
                }
                Op::Sqrt(a) => {
                    let r = self.recip(out);
                    let m = self.mul(u, r)?;
                    let g = self.mul_scalar(m, 0.5);
                    self.acc(&mut map, a, g)?;
                }
                Op::Softplus(a) => {
                    let s = self.sigmoid(a);
                    let g = self.mul(u, s)?;
                    self.acc(&mut map, a, g)?;
                }
                Op::Sigmoid(a) => {
                    let neg_o = self.mul_scalar(out, -1.0);
                    let one_minus = self.add_scalar(neg_o, 1.0);
                    let d = self.mul(out, one_minus)?;
                    let g = self.mul(u, d)?;
                    self.acc(&mut map, a, g)?;
                }
                Op::LeakyRelu(a, slope) => {
                    let mask = self.value(a).map(|v| if v > 0.0 { 1.0 } else { slope });
                    let mask = self.leaf(mask);
                    let g = self.mul(u, mask)?;
                    self.acc(&mut map, a, g)?;
                }
                Op::Clamp(a, lo, hi) => {
                    let mask = self.value(a).map(|v| if (lo..=hi).contains(&v) { 1.0 } else { 0.0 });
                    let mask = self.leaf(mask);
                    let g = self.mul(u, mask)?;
                    self.acc(&mut map, a, g)?;
                }
                Op::Sum(a) => {
                    let shape = self.value(a).shape().to_vec();
                    let g = self.broadcast(u, &shape)?;
                    self.acc(&mut map, a, g)?;
                }
                Op::Broadcast(s) => {
                    let g = self.sum(u);
                    self.acc(&mut map, s, g)?;
                }
                Op::Matmul(a, b) => {
                    if self.ng(a) {
                        let bt = self.transpose(b)?;
                        let g = self.matmul(u, bt)?;
                        self.acc(&mut map, a, g)?;
                    }
                    if self.ng(b) {
                        let at = self.transpose(a)?;
                        let g = self.matmul(at, u)?;
                        self.acc(&mut map, b, g)?;
                    }
                }
                Op::Transpose(a) => {
                    let g = self.transpose(u)?;
                    self.acc(&mut map, a, g)?;
                }
                Op::Conv { x, k, stride } => {
                    if self.ng(x) {
                        let s = self.value(x).shape().to_vec();
                        let g = self.conv2d_bwd_input(u, k, stride, s[1], s[2])?;
                        self.acc(&mut map, x, g)?;
                    }
                    if self.ng(k) {
                        let g = self.conv2d_bwd_kernel(u, x, stride)?;
                        self.acc(&mut map, k, g)?;
                    }
                }
                Op::ConvBwdInput { g: gn, k, stride } => {
                    // out = I(g, k); <v, I(g, k)> = <C(v, k), g> = <K(g, v), k>
                    if self.ng(gn) {
                        let g = self.conv2d(u, k, stride)?;
                        self.acc(&mut map, gn, g)?;
                    }
                    if self.ng(k) {
                        let g = self.conv2d_bwd_kernel(gn, u, stride)?;
                        self.acc(&mut map, k, g)?;
                    }
                }
                Op::ConvBwdKernel { g: gn, x, stride } => {
                    // out = K(g, x); <w, K(g, x)> = <C(x, w), g> = <I(g, w), x>
                    if self.ng(gn) {
                        let g = self.conv2d(x, u, stride)?;
                        self.acc(&mut map, gn, g)?;
                    }
                    if self.ng(x) {
                        let s = self.value(x).shape().to_vec();
                        let g = self.conv2d_bwd_input(gn, u, stride, s[1], s[2])?;
                        self.acc(&mut map, x, g)?;
                    }
                }
                Op::BiasChw(x, b) => {
                    self.acc(&mut map, x, u)?;
                    if self.ng(b) {
                        let g = self.chan_sum(u)?;
                        self.acc(&mut map, b, g)?;
                    }
                }
                Op::ChanSum(x) => {
                    let s = self.value(x).shape().to_vec();
                    let g = self.spatial_broadcast(u, s[1], s[2])?;
                    self.acc(&mut map, x, g)?;
                }
                Op::SpatialBroadcast(v) => {
                    let g = self.chan_sum(u)?;
                    self.acc(&mut map, v, g)?;
                }
                Op::Upsample2x(x) => {
                    let g = self.sum_pool2x(u)?;
                    self.acc(&mut map, x, g)?;
                }
                Op::SumPool2x(x) => {
                    let g = self.upsample2x(u)?;
                    self.acc(&mut map, x, g)?;
                }
                Op::Reshape(a) => {
                    let shape = self.value(a).shape().to_vec();
                    let g = self.reshape(u, &shape)?;
                    self.acc(&mut map, a, g)?;
                }
                Op::Concat0(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let len = self.value(p).shape()[0];
                        if self.ng(p) {
                            let g = self.slice0(u, start, len)?;
                            self.acc(&mut map, p, g)?;
                        }
                        start += len;
                    }
                }
                Op::Slice0 { x, start, len } => {
                    let dim0 = self.value(x).shape()[0];
                    let trailing = self.value(x).shape()[1..].to_vec();
                    let mut parts = Vec::with_capacity(3);
                    if start > 0 {
                        let mut s = vec![start];
                        s.extend_from_slice(&trailing);
                        parts.push(self.leaf(Tensor::zeros(&s)));
                    }
                    parts.push(u);
                    if start + len < dim0 {
                        let mut s = vec![dim0 - start - len];
                        s.extend_from_slice(&trailing);
                        parts.push(self.leaf(Tensor::zeros(&s)));
                    }
                    let g = if parts.len() == 1 { parts[0] } else { self.concat0(&parts)? };
                    self.acc(&mut map, x, g)?;
                }
            }
        }
        Ok(Grads { map })
    }

    fn acc(&mut self, map: &mut [Option<NodeId>], target: NodeId, contrib: NodeId) -> Result<()> {
        if !self.ng(target) {
            return Ok(());
        }
        let slot = &mut map[target.idx()];
        *slot = Some(match *slot {
            None => contrib,
            Some(existing) => self.add(existing, contrib)?,
        });
        Ok(())
    }

    /// Parameter gradients of one backward sweep, in value form.
    pub fn param_grads(&self, grads: &Grads) -> Vec<(ParamId, Tensor)> {
        let mut out = Vec::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(pid) } = node.op {
                if let Some(g) = grads.get(NodeId(idx as u32)) {
                    out.push((pid, self.detach(g)));
                }
            }
        }
        out
    }
}
