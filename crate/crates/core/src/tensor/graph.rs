use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv { x: Var, w: Var, geom: ConvGeom },
    Matmul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: f64 },
    Relu { x: Var },
    Sigmoid { x: Var },
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    GroupNorm { x: Var, groups: usize, inv_std: Vec<f64> },
    Sum { x: Var },
    Reshape { x: Var },
    Stack { xs: Vec<Var> },
    Select { x: Var, index: usize },
    Upsample { x: Var },
    StopGradient { #[allow(dead_code)] x: Var },
    FocalLoss { p: Var, labels: Vec<i8>, alpha: f64, gamma: f64, norm: f64 },
    SmoothL1 { x: Var, targets: Vec<f64>, mask: Vec<bool>, beta: f64, norm: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Tape of operations in creation order, which is also a topological order.
///
/// Leaves are added with [`Graph::constant`] or [`Graph::param`]; every op
/// method appends one node and returns its [`Var`]. A node requires a
/// gradient when any of its inputs does, except behind
/// [`Graph::stop_gradient`].
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

/// Probabilities are clamped to this margin before taking logs.
pub const PROB_EPS: f64 = 1e-12;

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

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
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

    /// Gradient of the last backward pass, shaped like the variable.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    /// Gradient of `v`, or zeros when no gradient reached it.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v)
            .unwrap_or_else(|| Tensor::zeros(self.shape(v).to_vec()))
    }

    /// Clears all gradients so that [`Graph::backward`] may run again.
    pub fn reset_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.backward_done = false;
    }

    fn push(&mut self, op: Op, value: Tensor, inputs: &[Var]) -> Var {
        debug_assert!(value.all_finite(), "non-finite output from {op:?}");
        let requires_grad = !matches!(op, Op::StopGradient { .. })
            && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    // ---- convolutions and products ----------------------------------------

    /// Bias-free convolution of `x: [C_in,H,W]` with `w: [C_out,C_in,k,k]`,
    /// or with `w: [C_out,C_in]` as a 1×1 kernel.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let mismatch = || Error::ShapeMismatch {
            op: "conv2d",
            lhs: xs.clone(),
            rhs: ws.clone(),
        };
        if xs.len() != 3 {
            return Err(mismatch());
        }
        let k = match ws.len() {
            2 => 1,
            4 if ws[2] == ws[3] => ws[2],
            _ => return Err(mismatch()),
        };
        if ws[1] != xs[0] {
            return Err(mismatch());
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be positive"));
        }
        let (h, wd) = (xs[1], xs[2]);
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::invalid(format!(
                "conv2d output would be empty for input {xs:?}, kernel {k}, pad {pad}"
            )));
        }
        let geom = ConvGeom {
            c_in: xs[0],
            h,
            w: wd,
            c_out: ws[0],
            k,
            stride,
            pad,
            h_out: (h + 2 * pad - k) / stride + 1,
            w_out: (wd + 2 * pad - k) / stride + 1,
        };
        let out = kernels::conv_forward(self.value(x).data(), self.value(w).data(), &geom);
        let value = Tensor::new([geom.c_out, geom.h_out, geom.w_out], out)?;
        Ok(self.push(Op::Conv { x, w, geom }, value, &[x, w]))
    }

    /// `out[c,h,w] = Σ_k w[c,k]·x[k,h,w]`.
    pub fn conv1x1(&mut self, x: Var, w: Var) -> Result<Var> {
        if self.shape(w).len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "conv1x1",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(w).to_vec(),
            });
        }
        self.conv2d(x, w, 1, 0)
    }

    /// 3×3 cross-correlation with stride ∈ {1,2} and pad ∈ {0,1}.
    pub fn conv3x3(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let ws = self.shape(w);
        if ws.len() != 4 || ws[2] != 3 || ws[3] != 3 {
            return Err(Error::ShapeMismatch {
                op: "conv3x3",
                lhs: self.shape(x).to_vec(),
                rhs: ws.to_vec(),
            });
        }
        if !(1..=2).contains(&stride) || pad > 1 {
            return Err(Error::invalid(format!(
                "conv3x3 supports stride 1|2 and pad 0|1, got stride {stride} pad {pad}"
            )));
        }
        self.conv2d(x, w, stride, pad)
    }

    /// Matrix product over the two trailing axes; leading axes must match.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let ok = sa.len() >= 2
            && sa.len() == sb.len()
            && sa[..sa.len() - 2] == sb[..sb.len() - 2]
            && sa[sa.len() - 1] == sb[sb.len() - 2];
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let r = sa.len();
        let (m, k, n) = (sa[r - 2], sa[r - 1], sb[r - 1]);
        let batch: usize = sa[..r - 2].iter().product();
        let mut out = vec![0.0; batch * m * n];
        {
            let (va, vb) = (self.value(a).data(), self.value(b).data());
            for bi in 0..batch {
                kernels::gemm(
                    m,
                    k,
                    n,
                    &va[bi * m * k..],
                    false,
                    &vb[bi * k * n..],
                    false,
                    &mut out[bi * m * n..],
                    false,
                );
            }
        }
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(Op::Matmul { a, b, m, k, n }, value, &[a, b]))
    }

    // ---- elementwise ------------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, Vec<usize>)> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = kernels::broadcast_shape(&sa, &sb).ok_or_else(|| Error::ShapeMismatch {
            op: name,
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let out = if sa == sb {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let mut out = vec![0.0; out_shape.iter().product()];
            let stra = kernels::broadcast_strides(&sa, &out_shape);
            let strb = kernels::broadcast_strides(&sb, &out_shape);
            kernels::for_each_broadcast(&out_shape, &stra, &strb, |i, oa, ob| {
                out[i] = f(va[oa], vb[ob])
            });
            out
        };
        Ok((Tensor::new(out_shape.clone(), out)?, out_shape))
    }

    /// Broadcasting addition; operands must have equal rank.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, _) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(Op::Add { a, b }, value, &[a, b]))
    }

    /// Broadcasting elementwise product; operands must have equal rank.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, _) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(Op::Mul { a, b }, value, &[a, b]))
    }

    /// Adds a per-channel vector `v: [C]` to every position of `x: [C,H,W]`.
    pub fn broadcast_add(&mut self, x: Var, v: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let vs = self.shape(v).to_vec();
        let c = vs.iter().product::<usize>();
        if xs.is_empty() || xs[0] != c || vs.iter().filter(|&&d| d != 1).count() > 1 {
            return Err(Error::ShapeMismatch {
                op: "broadcast_add",
                lhs: xs,
                rhs: vs,
            });
        }
        let mut col = vec![1; xs.len()];
        col[0] = c;
        let v = self.reshape(v, col)?;
        self.add(x, v)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).map(|v| v * factor);
        self.push(Op::Scale { x, factor }, value, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(Op::Relu { x }, value, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        self.push(Op::Sigmoid { x }, value, &[x])
    }

    /// Max-subtracted exponential normalisation along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(format!("softmax axis {axis} for shape {shape:?}")));
        }
        let outer = shape[..axis].iter().product();
        let len = shape[axis];
        let inner = shape[axis + 1..].iter().product();
        let y = kernels::softmax_forward(self.value(x).data(), outer, len, inner);
        let value = Tensor::new(shape, y)?;
        Ok(self.push(Op::Softmax { x, outer, len, inner }, value, &[x]))
    }

    /// Normalises each of `groups` channel groups of `x: [C,H,W]` to zero
    /// mean and unit variance over the group's channels and positions.
    pub fn group_norm(&mut self, x: Var, groups: usize, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || groups == 0 || shape[0] % groups != 0 {
            return Err(Error::invalid(format!("group norm with {groups} groups on shape {shape:?}")));
        }
        let n = shape.iter().product::<usize>() / groups;
        let mut y = self.value(x).data().to_vec();
        let mut inv_std = Vec::with_capacity(groups);
        for chunk in y.chunks_mut(n) {
            let mean = chunk.iter().sum::<f64>() / n as f64;
            let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            chunk.iter_mut().for_each(|v| *v = (*v - mean) * r);
            inv_std.push(r);
        }
        let value = Tensor::new(shape, y)?;
        Ok(self.push(Op::GroupNorm { x, groups, inv_std }, value, &[x]))
    }

    // ---- reductions and shape ops ----------------------------------------

    /// Sums over `axes`, keeping them as size-1 dimensions.
    pub fn sum_over(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut out_shape = shape.clone();
        for &a in axes {
            if a >= shape.len() {
                return Err(Error::invalid(format!("sum axis {a} for shape {shape:?}")));
            }
            out_shape[a] = 1;
        }
        let out = kernels::reduce_to_shape(self.value(x).data(), &shape, &out_shape);
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(Op::Sum { x }, value, &[x]))
    }

    /// Mean over `axes`, keeping them as size-1 dimensions.
    pub fn mean_over(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let count: usize = axes.iter().filter_map(|&a| shape.get(a)).product();
        let s = self.sum_over(x, axes)?;
        Ok(self.scale(s, 1.0 / count.max(1) as f64))
    }

    /// Sum of all elements as a scalar.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        let s = self.sum_over(x, &axes)?;
        self.reshape(s, Vec::<usize>::new())
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(Op::Reshape { x }, value, &[x]))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::invalid("stack of zero tensors"))?;
        let shape = self.shape(*first).to_vec();
        let mut data = Vec::with_capacity(xs.len() * shape.iter().product::<usize>());
        for &v in xs {
            if self.shape(v) != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "stack",
                    lhs: shape,
                    rhs: self.shape(v).to_vec(),
                });
            }
            data.extend_from_slice(self.value(v).data());
        }
        let mut out_shape = vec![xs.len()];
        out_shape.extend(&shape);
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(Op::Stack { xs: xs.to_vec() }, value, xs))
    }

    /// Slice `index` of the leading axis.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let shape = self.shape(x);
        if shape.is_empty() || index >= shape[0] {
            return Err(Error::invalid(format!("select {index} from shape {shape:?}")));
        }
        let value = self.value(x).index0(index);
        Ok(self.push(Op::Select { x, index }, value, &[x]))
    }

    /// Nearest-neighbour resize of `x: [C,H,W]` to `[C,h,w]`.
    pub fn upsample_nearest(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || h == 0 || w == 0 {
            return Err(Error::invalid(format!("upsample {shape:?} to {h}x{w}")));
        }
        let (c, hi, wi) = (shape[0], shape[1], shape[2]);
        let src = self.value(x).data();
        let mut out = vec![0.0; c * h * w];
        for ch in 0..c {
            for y in 0..h {
                let sy = kernels::nearest_src(y, hi, h);
                for xo in 0..w {
                    let sx = kernels::nearest_src(xo, wi, w);
                    out[(ch * h + y) * w + xo] = src[(ch * hi + sy) * wi + sx];
                }
            }
        }
        let value = Tensor::new([c, h, w], out)?;
        Ok(self.push(Op::Upsample { x }, value, &[x]))
    }

    /// Identity in the forward pass; blocks all gradient flow into `x`.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(Op::StopGradient { x }, value, &[x])
    }

    // ---- losses -----------------------------------------------------------

    /// Focal loss over probabilities `p`, one label per element: 1 positive,
    /// 0 negative, -1 ignored. The sum is divided by `norm`.
    pub fn focal_loss(&mut self, p: Var, labels: Vec<i8>, alpha: f64, gamma: f64, norm: f64) -> Result<Var> {
        let pv = self.value(p).data();
        if labels.len() != pv.len() {
            return Err(Error::ShapeMismatch {
                op: "focal_loss",
                lhs: self.shape(p).to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let mut total = 0.0;
        for (&prob, &label) in pv.iter().zip(&labels) {
            total += focal_term(prob, label, alpha, gamma);
        }
        let value = Tensor::scalar(total / norm);
        Ok(self.push(
            Op::FocalLoss { p, labels, alpha, gamma, norm },
            value,
            &[p],
        ))
    }

    /// Smooth-L1 over the elements of `x` where `mask` is set, divided by
    /// `norm`. Quadratic for `|d| < beta`.
    pub fn smooth_l1(&mut self, x: Var, targets: Vec<f64>, mask: Vec<bool>, beta: f64, norm: f64) -> Result<Var> {
        let xv = self.value(x).data();
        if targets.len() != xv.len() || mask.len() != xv.len() {
            return Err(Error::ShapeMismatch {
                op: "smooth_l1",
                lhs: self.shape(x).to_vec(),
                rhs: vec![targets.len(), mask.len()],
            });
        }
        let mut total = 0.0;
        for i in 0..xv.len() {
            if mask[i] {
                total += smooth_l1(xv[i] - targets[i], beta);
            }
        }
        let value = Tensor::scalar(total / norm);
        Ok(self.push(
            Op::SmoothL1 { x, targets, mask, beta, norm },
            value,
            &[x],
        ))
    }

    // ---- reverse pass -----------------------------------------------------

    /// Populates gradients of every `requires_grad` node reachable from the
    /// scalar `loss`. Errors when called again before [`Graph::reset_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Graph(
                "backward already ran on this graph; call reset_grads first".into(),
            ));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let (head, tail) = self.nodes.split_at_mut(i);
            let node = &tail[0];
            let Some(dy) = node.grad.as_deref() else {
                continue;
            };
            if !node.requires_grad {
                continue;
            }
            for (v, g) in local_grads(&node.op, &node.value, dy, head) {
                let target = &mut head[v.0];
                match &mut target.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn focal_term(prob: f64, label: i8, alpha: f64, gamma: f64) -> f64 {
    let p = prob.clamp(PROB_EPS, 1.0 - PROB_EPS);
    match label {
        1 => -alpha * (1.0 - p).powf(gamma) * p.ln(),
        0 => -(1.0 - alpha) * p.powf(gamma) * (1.0 - p).ln(),
        _ => 0.0,
    }
}

fn focal_grad(prob: f64, label: i8, alpha: f64, gamma: f64) -> f64 {
    if !(PROB_EPS..=1.0 - PROB_EPS).contains(&prob) {
        return 0.0;
    }
    let p = prob;
    match label {
        1 => {
            let q = 1.0 - p;
            let dpow = if gamma == 0.0 { 0.0 } else { gamma * q.powf(gamma - 1.0) };
            -alpha * (-dpow * p.ln() + q.powf(gamma) / p)
        }
        0 => {
            let dpow = if gamma == 0.0 { 0.0 } else { gamma * p.powf(gamma - 1.0) };
            -(1.0 - alpha) * (dpow * (1.0 - p).ln() - p.powf(gamma) / (1.0 - p))
        }
        _ => 0.0,
    }
}

pub(crate) fn smooth_l1(d: f64, beta: f64) -> f64 {
    let a = d.abs();
    if a < beta {
        0.5 * a * a / beta
    } else {
        a - 0.5 * beta
    }
}

fn smooth_l1_grad(d: f64, beta: f64) -> f64 {
    if d.abs() < beta {
        d / beta
    } else {
        d.signum()
    }
}

/// Gradient contributions of one node to its inputs that require them.
fn local_grads(op: &Op, y: &Tensor, dy: &[f64], nodes: &[Node]) -> Vec<(Var, Vec<f64>)> {
    let val = |v: &Var| &nodes[v.0].value;
    let wants = |v: &Var| nodes[v.0].requires_grad;
    let mut out = Vec::new();
    match op {
        Op::Leaf => {}
        Op::Conv { x, w, geom } => {
            let (dx, dw) = kernels::conv_backward(
                val(x).data(),
                val(w).data(),
                dy,
                geom,
                wants(x),
                wants(w),
            );
            out.extend(dx.map(|g| (*x, g)));
            out.extend(dw.map(|g| (*w, g)));
        }
        Op::Matmul { a, b, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            let batch = y.numel() / (m * n).max(1);
            if wants(a) {
                let mut da = vec![0.0; batch * m * k];
                for bi in 0..batch {
                    kernels::gemm(m, n, k, &dy[bi * m * n..], false, &val(b).data()[bi * k * n..], true, &mut da[bi * m * k..], false);
                }
                out.push((*a, da));
            }
            if wants(b) {
                let mut db = vec![0.0; batch * k * n];
                for bi in 0..batch {
                    kernels::gemm(k, m, n, &val(a).data()[bi * m * k..], true, &dy[bi * m * n..], false, &mut db[bi * k * n..], false);
                }
                out.push((*b, db));
            }
        }
        Op::Add { a, b } => {
            for v in [a, b] {
                if wants(v) {
                    out.push((*v, kernels::reduce_to_shape(dy, y.shape(), val(v).shape())));
                }
            }
        }
        Op::Mul { a, b } => {
            for (v, other) in [(a, b), (b, a)] {
                if !wants(v) {
                    continue;
                }
                let os = val(other).shape();
                let od = val(other).data();
                let full: Vec<f64> = if os == y.shape() {
                    dy.iter().zip(od).map(|(g, o)| g * o).collect()
                } else {
                    let strides = kernels::broadcast_strides(os, y.shape());
                    let mut full = vec![0.0; dy.len()];
                    kernels::for_each_broadcast(y.shape(), &strides, &strides, |i, o, _| {
                        full[i] = dy[i] * od[o]
                    });
                    full
                };
                out.push((*v, kernels::reduce_to_shape(&full, y.shape(), val(v).shape())));
            }
        }
        Op::Scale { x, factor } => {
            if wants(x) {
                out.push((*x, dy.iter().map(|g| g * factor).collect()));
            }
        }
        Op::Relu { x } => {
            if wants(x) {
                let xv = val(x).data();
                out.push((*x, dy.iter().zip(xv).map(|(&g, &v)| if v > 0.0 { g } else { 0.0 }).collect()));
            }
        }
        Op::Sigmoid { x } => {
            if wants(x) {
                out.push((*x, dy.iter().zip(y.data()).map(|(g, s)| g * s * (1.0 - s)).collect()));
            }
        }
        Op::Softmax { x, outer, len, inner } => {
            if wants(x) {
                out.push((*x, kernels::softmax_backward(y.data(), dy, *outer, *len, *inner)));
            }
        }
        Op::GroupNorm { x, groups, inv_std } => {
            if wants(x) {
                let n = dy.len() / groups;
                let mut g = Vec::with_capacity(dy.len());
                for ((gy, yv), r) in dy.chunks(n).zip(y.data().chunks(n)).zip(inv_std) {
                    let mean_g = gy.iter().sum::<f64>() / n as f64;
                    let mean_gy = gy.iter().zip(yv).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    g.extend(gy.iter().zip(yv).map(|(a, b)| r * (a - mean_g - b * mean_gy)));
                }
                out.push((*x, g));
            }
        }
        Op::Sum { x } => {
            if wants(x) {
                let xs = val(x).shape();
                let strides = kernels::broadcast_strides(y.shape(), xs);
                let mut g = vec![0.0; val(x).numel()];
                kernels::for_each_broadcast(xs, &strides, &strides, |i, o, _| g[i] = dy[o]);
                out.push((*x, g));
            }
        }
        Op::Reshape { x } | Op::Select { x, .. } | Op::Upsample { x } if !wants(x) => {}
        Op::Reshape { x } => out.push((*x, dy.to_vec())),
        Op::Select { x, index } => {
            let mut g = vec![0.0; val(x).numel()];
            let inner = dy.len();
            g[index * inner..(index + 1) * inner].copy_from_slice(dy);
            out.push((*x, g));
        }
        Op::Upsample { x } => {
            let xs = val(x).shape();
            let (c, hi, wi) = (xs[0], xs[1], xs[2]);
            let (h, w) = (y.shape()[1], y.shape()[2]);
            let mut g = vec![0.0; c * hi * wi];
            for ch in 0..c {
                for yo in 0..h {
                    let sy = kernels::nearest_src(yo, hi, h);
                    for xo in 0..w {
                        let sx = kernels::nearest_src(xo, wi, w);
                        g[(ch * hi + sy) * wi + sx] += dy[(ch * h + yo) * w + xo];
                    }
                }
            }
            out.push((*x, g));
        }
        Op::Stack { xs } => {
            let inner = dy.len() / xs.len();
            for (i, v) in xs.iter().enumerate() {
                if wants(v) {
                    out.push((*v, dy[i * inner..(i + 1) * inner].to_vec()));
                }
            }
        }
        Op::StopGradient { .. } => {}
        Op::FocalLoss { p, labels, alpha, gamma, norm } => {
            if wants(p) {
                let scale = dy[0] / norm;
                let g = val(p)
                    .data()
                    .iter()
                    .zip(labels)
                    .map(|(&prob, &l)| scale * focal_grad(prob, l, *alpha, *gamma))
                    .collect();
                out.push((*p, g));
            }
        }
        Op::SmoothL1 { x, targets, mask, beta, norm } => {
            if wants(x) {
                let scale = dy[0] / norm;
                let xv = val(x).data();
                let g = (0..xv.len())
                    .map(|i| if mask[i] { scale * smooth_l1_grad(xv[i] - targets[i], *beta) } else { 0.0 })
                    .collect();
                out.push((*x, g));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_sum_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![3.0]));
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum_all(sq).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn group_norm_standardises_each_group() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 1, 2], vec![1.0, 3.0, 10.0, 10.0]).unwrap());
        let y = g.group_norm(x, 2, 1e-5).unwrap();
        let r = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert_eq!(g.value(y).data(), &[-r, r, 0.0, 0.0]);
        assert!(g.group_norm(x, 3, 1e-5).is_err());
    }

    #[test]
    fn independent_param_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![1.0, 2.0]));
        let w = g.param(Tensor::from_vec(vec![5.0]));
        let loss = g.sum_all(x).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(w).is_none());
        assert_eq!(g.grad_or_zeros(w).data(), &[0.0]);
    }

    #[test]
    fn second_backward_without_reset_fails() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![1.0]));
        let loss = g.sum_all(x).unwrap();
        g.backward(loss).unwrap();
        assert!(matches!(g.backward(loss), Err(Error::Graph(_))));
        g.reset_grads();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn stop_gradient_blocks_flow() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![2.0]));
        let s = g.stop_gradient(x);
        let y = g.mul(s, x).unwrap();
        let loss = g.sum_all(y).unwrap();
        assert_eq!(g.value(loss).data(), &[4.0]);
        g.backward(loss).unwrap();
        // only the unblocked factor contributes
        assert_eq!(g.grad(x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn conv1x1_reports_both_shapes() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros([2, 3, 3]));
        let w = g.constant(Tensor::zeros([4, 5]));
        let err = g.conv1x1(x, w).unwrap_err().to_string();
        assert!(err.contains("[2, 3, 3]") && err.contains("[4, 5]"), "{err}");
    }

    #[test]
    fn conv3x3_rejects_empty_output_and_bad_stride() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros([1, 2, 2]));
        let w = g.constant(Tensor::zeros([1, 1, 3, 3]));
        assert!(g.conv3x3(x, w, 1, 0).is_err());
        assert!(g.conv3x3(x, w, 3, 1).is_err());
        assert!(g.conv3x3(x, w, 1, 1).is_ok());
    }

    #[test]
    fn broadcast_add_per_channel() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros([2, 2, 2]));
        let v = g.constant(Tensor::from_vec(vec![1.0, 2.0]));
        let y = g.broadcast_add(x, v).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0]);
        let bad = g.constant(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        assert!(g.broadcast_add(x, bad).is_err());
    }

    #[test]
    fn relu_and_identity_matmul() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
        let a = Tensor::new([2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let i = g.constant(Tensor::eye(2));
        let av = g.constant(a.clone());
        let p = g.matmul(i, av).unwrap();
        assert_eq!(g.value(p), &a);
    }

    #[test]
    fn softmax_closed_forms() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![0.0, 0.0]));
        let s = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
        let x = g.constant(Tensor::from_vec(vec![0.0, 2f64.ln()]));
        let s = g.softmax(x, 0).unwrap();
        let d = g.value(s).data();
        assert!((d[0] - 1.0 / 3.0).abs() < 1e-15 && (d[1] - 2.0 / 3.0).abs() < 1e-15);
        let x = g.constant(Tensor::from_vec(vec![7.5]));
        let s = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(s).data(), &[1.0]);
    }

    #[test]
    fn focal_reduces_to_half_bce_without_focusing() {
        for (p, label) in [(0.3, 1i8), (0.8, 0), (0.55, 1)] {
            let bce = if label == 1 { -f64::ln(p) } else { -f64::ln(1.0 - p) };
            let fl = focal_term(p, label, 0.5, 0.0);
            assert!((fl - 0.5 * bce).abs() < 1e-15);
        }
    }

    #[test]
    fn focal_single_positive_at_half() {
        let expected = 0.25 * 0.25 * 2f64.ln();
        assert!((focal_term(0.5, 1, 0.25, 2.0) - expected).abs() < 1e-15);
        assert!((expected - 0.043322).abs() < 1e-6);
    }

    #[test]
    fn focal_vanishes_monotonically_as_target_prob_rises() {
        let mut prev = f64::INFINITY;
        for i in 1..=100 {
            let p = 0.5 + 0.5 * i as f64 / 100.0;
            let l = focal_term(p, 1, 0.25, 2.0);
            assert!(l <= prev);
            prev = l;
        }
        assert!(prev < 1e-20);
    }

    #[test]
    fn smooth_l1_at_transition() {
        let beta = 1.0 / 9.0;
        assert!((smooth_l1(beta * 0.5, beta) - (beta * 0.5).powi(2) / (2.0 * beta)).abs() < 1e-16);
        assert!((smooth_l1(beta, beta) - beta / 2.0).abs() < 1e-16);
    }
}
