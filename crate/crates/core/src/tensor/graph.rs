//! Define-by-run tape with reverse-mode differentiation.
//!
//! Nodes are appended in execution order, so reverse index order is a valid
//! topological order for the backward sweep: each node is visited exactly
//! once and leaf gradients accumulate additively.

use super::{matmul_acc, matmul_at_acc, matmul_bt_acc, Result, Tensor, TensorError};
use crate::real::{ordered_sum, Real};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op<S> {
    Leaf,
    /// Batched or plain matmul; `ta`/`tb` transpose the last two axes.
    Matmul { a: Var, b: Var, ta: bool, tb: bool },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Div { a: Var, b: Var },
    Neg { a: Var },
    Scale { a: Var, c: S },
    AddScalar { a: Var, c: S },
    Relu { a: Var },
    Gelu { a: Var },
    Tanh { a: Var },
    Sigmoid { a: Var },
    Exp { a: Var },
    Softmax { a: Var, axis: usize },
    SumAxis { a: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<S>, rstd: Vec<S> },
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    Upsample2x { a: Var },
    BroadcastSpatial { a: Var, h: usize, w: usize },
    MseLoss { pred: Var, target: Var },
    Sum { a: Var },
    Mean { a: Var },
    Slice { a: Var, axis: usize, start: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Reshape { a: Var },
    SwapAxes { a: Var, d0: usize, d1: usize },
    /// Fused scaled-dot-product attention; `weights` are the saved softmax
    /// probabilities, `invariant` selects order-canonical reductions over
    /// the key axis (exact permutation invariance of the key/value set).
    Attention { q: Var, k: Var, v: Var, weights: Vec<S>, invariant: bool },
}

struct Node<S> {
    value: Tensor<S>,
    requires: bool,
    op: Op<S>,
}

/// Gradients of one backward sweep, indexed by [`Var`].
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Real> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

pub struct Graph<S: Real> {
    nodes: Vec<Node<S>>,
}

impl<S: Real> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Real> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires
    }

    /// Register an input tensor.
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Register a non-differentiable input.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<S>, requires: bool, op: Op<S>) -> Var {
        self.nodes.push(Node { value, requires, op });
        Var(self.nodes.len() - 1)
    }

    fn req(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires)
    }

    // ---- elementwise and broadcast ops ------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_binary("add", self.value(a), self.value(b), |x, y| x + y)?;
        Ok(self.push(out, self.req(&[a, b]), Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_binary("sub", self.value(a), self.value(b), |x, y| x - y)?;
        Ok(self.push(out, self.req(&[a, b]), Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_binary("mul", self.value(a), self.value(b), |x, y| x * y)?;
        Ok(self.push(out, self.req(&[a, b]), Op::Mul { a, b }))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_binary("div", self.value(a), self.value(b), |x, y| x / y)?;
        Ok(self.push(out, self.req(&[a, b]), Op::Div { a, b }))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| -x);
        self.push(out, self.req(&[a]), Op::Neg { a })
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, self.req(&[a]), Op::Scale { a, c })
    }

    pub fn add_scalar(&mut self, a: Var, c: S) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push(out, self.req(&[a]), Op::AddScalar { a, c })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > S::zero() { x } else { S::zero() });
        self.push(out, self.req(&[a]), Op::Relu { a })
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu_fwd);
        self.push(out, self.req(&[a]), Op::Gelu { a })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.tanh());
        self.push(out, self.req(&[a]), Op::Tanh { a })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| S::one() / (S::one() + (-x).exp()));
        self.push(out, self.req(&[a]), Op::Sigmoid { a })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.exp());
        self.push(out, self.req(&[a]), Op::Exp { a })
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s: S = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), self.req(&[a]), Op::Sum { a })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = S::of(self.value(a).len() as f64);
        let s: S = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s / n), self.req(&[a]), Op::Mean { a })
    }

    /// Sum along `axis`, keeping it as an axis of extent 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        let shape = t.shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Invalid {
                op: "sum_axis",
                msg: format!("axis {} out of range for {:?}", axis, shape),
            });
        }
        let (outer, extent, inner) = split_axis(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape[axis] = 1;
        let mut out = vec![S::zero(); outer * inner];
        let data = t.data();
        for o in 0..outer {
            for e in 0..extent {
                let base = (o * extent + e) * inner;
                let obase = o * inner;
                for i in 0..inner {
                    out[obase + i] += data[base + i];
                }
            }
        }
        let out = Tensor::new(out_shape, out)?;
        Ok(self.push(out, self.req(&[a]), Op::SumAxis { a, axis }))
    }

    /// Numerically stable softmax along `axis`.
    ///
    /// With `invariant`, the normalizer is accumulated in ascending value
    /// order so the result is exactly invariant to permutations along the
    /// axis (used on slot/condition axes).
    pub fn softmax(&mut self, a: Var, axis: usize, invariant: bool) -> Result<Var> {
        let t = self.value(a);
        let shape = t.shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Invalid {
                op: "softmax",
                msg: format!("axis {} out of range for {:?}", axis, shape),
            });
        }
        let (outer, extent, inner) = split_axis(&shape, axis);
        let data = t.data();
        let mut out = vec![S::zero(); data.len()];
        let mut lane = vec![S::zero(); extent];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |e: usize| (o * extent + e) * inner + i;
                let mut m = data[idx(0)];
                for e in 1..extent {
                    if data[idx(e)] > m {
                        m = data[idx(e)];
                    }
                }
                for e in 0..extent {
                    lane[e] = (data[idx(e)] - m).exp();
                }
                let z = if invariant {
                    let mut tmp = lane.clone();
                    ordered_sum(&mut tmp)
                } else {
                    let mut z = S::zero();
                    for &l in lane.iter() {
                        z += l;
                    }
                    z
                };
                for e in 0..extent {
                    out[idx(e)] = lane[e] / z;
                }
            }
        }
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, self.req(&[a]), Op::Softmax { a, axis }))
    }

    // ---- shape ops ---------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(out, self.req(&[a]), Op::Reshape { a }))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let shape = t.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(TensorError::Invalid {
                op: "slice",
                msg: format!("range {}..{} on axis {} of {:?}", start, start + len, axis, shape),
            });
        }
        let (outer, extent, inner) = split_axis(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut out = Vec::with_capacity(outer * len * inner);
        let data = t.data();
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            out.extend_from_slice(&data[base..base + len * inner]);
        }
        let out = Tensor::new(out_shape, out)?;
        Ok(self.push(out, self.req(&[a]), Op::Slice { a, axis, start }))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::Invalid { op: "concat", msg: "no inputs".into() });
        }
        let first = self.value(parts[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(TensorError::Invalid {
                op: "concat",
                msg: format!("axis {} out of range for {:?}", axis, first),
            });
        }
        let mut total = 0usize;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = split_axis(&out_shape, axis);
        let mut out = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let e = t.shape()[axis];
                let base = o * e * inner;
                out.extend_from_slice(&t.data()[base..base + e * inner]);
            }
        }
        let out = Tensor::new(out_shape, out)?;
        Ok(self.push(out, self.req(parts), Op::Concat { parts: parts.to_vec(), axis }))
    }

    pub fn swap_axes(&mut self, a: Var, d0: usize, d1: usize) -> Result<Var> {
        let out = swap_axes_tensor(self.value(a), d0, d1)?;
        Ok(self.push(out, self.req(&[a]), Op::SwapAxes { a, d0, d1 }))
    }

    // ---- matmul ------------------------------------------------------------

    /// Matrix product over the last two axes, with optional transposes.
    ///
    /// Supported shapes: `(m,k)x(k,n)`, `(B,m,k)x(k,n)`, `(B,m,k)x(B,k,n)`
    /// (dimensions quoted after applying the transpose flags).
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let out = matmul_forward(self.value(a), self.value(b), ta, tb)?;
        Ok(self.push(out, self.req(&[a, b]), Op::Matmul { a, b, ta, tb }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    // ---- neural-net ops ----------------------------------------------------

    /// Layer norm over the last axis with learned gain/bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: S) -> Result<Var> {
        let t = self.value(x);
        let shape = t.shape().to_vec();
        let d = *shape.last().ok_or(TensorError::Invalid {
            op: "layer_norm",
            msg: "input must have at least one axis".into(),
        })?;
        if self.value(gamma).shape() != [d] || self.value(beta).shape() != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: shape,
                rhs: self.value(gamma).shape().to_vec(),
            });
        }
        let rows = t.len() / d;
        let mut out = vec![S::zero(); t.len()];
        let mut means = vec![S::zero(); rows];
        let mut rstds = vec![S::zero(); rows];
        let nd = S::of(d as f64);
        let g = self.value(gamma).data().to_vec();
        let bvec = self.value(beta).data().to_vec();
        let data = t.data();
        for r in 0..rows {
            let row = &data[r * d..(r + 1) * d];
            let mut m = S::zero();
            for &v in row {
                m += v;
            }
            m /= nd;
            let mut var = S::zero();
            for &v in row {
                var += (v - m) * (v - m);
            }
            var /= nd;
            let rstd = S::one() / (var + eps).sqrt();
            means[r] = m;
            rstds[r] = rstd;
            for i in 0..d {
                out[r * d + i] = (row[i] - m) * rstd * g[i] + bvec[i];
            }
        }
        let out = Tensor::new(shape, out)?;
        Ok(self.push(
            out,
            self.req(&[x, gamma, beta]),
            Op::LayerNorm { x, gamma, beta, mean: means, rstd: rstds },
        ))
    }

    /// 2D convolution: x `(B,Cin,H,W)`, w `(Cout,Cin,kh,kw)`, b `(Cout)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.value(x).shape().to_vec(), self.value(w).shape().to_vec());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(TensorError::ShapeMismatch { op: "conv2d", lhs: xs, rhs: ws });
        }
        if stride == 0 {
            return Err(TensorError::Invalid { op: "conv2d", msg: "stride must be >= 1".into() });
        }
        let (bsz, cin, h, wdt) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, _, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if h + 2 * pad < kh || wdt + 2 * pad < kw {
            return Err(TensorError::Invalid {
                op: "conv2d",
                msg: format!("kernel {}x{} larger than padded input", kh, kw),
            });
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wdt + 2 * pad - kw) / stride + 1;
        if self.value(b).shape() != [cout] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: vec![cout],
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let ckk = cin * kh * kw;
        let mut out = vec![S::zero(); bsz * cout * oh * ow];
        let mut cols = vec![S::zero(); ckk * oh * ow];
        let xdata = self.value(x).data();
        let wdata = self.value(w).data();
        let bias = self.value(b).data().to_vec();
        for bi in 0..bsz {
            let xb = &xdata[bi * cin * h * wdt..(bi + 1) * cin * h * wdt];
            im2col(xb, cin, h, wdt, kh, kw, stride, pad, oh, ow, &mut cols);
            let yb = &mut out[bi * cout * oh * ow..(bi + 1) * cout * oh * ow];
            matmul_acc(wdata, &cols, yb, cout, ckk, oh * ow);
            for co in 0..cout {
                let row = &mut yb[co * oh * ow..(co + 1) * oh * ow];
                for v in row.iter_mut() {
                    *v += bias[co];
                }
            }
        }
        let out = Tensor::new(vec![bsz, cout, oh, ow], out)?;
        Ok(self.push(out, self.req(&[x, w, b]), Op::Conv2d { x, w, b, stride, pad }))
    }

    /// Nearest-neighbour 2x upsampling of `(B,C,H,W)`.
    pub fn upsample2x(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.shape().to_vec();
        if s.len() != 4 {
            return Err(TensorError::Invalid {
                op: "upsample2x",
                msg: format!("expected 4D input, got {:?}", s),
            });
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let mut out = vec![S::zero(); b * c * 4 * h * w];
        let data = t.data();
        for bc in 0..b * c {
            let src = &data[bc * h * w..(bc + 1) * h * w];
            let dst = &mut out[bc * 4 * h * w..(bc + 1) * 4 * h * w];
            for i in 0..h {
                for j in 0..w {
                    let v = src[i * w + j];
                    let base = (2 * i) * (2 * w) + 2 * j;
                    dst[base] = v;
                    dst[base + 1] = v;
                    dst[base + 2 * w] = v;
                    dst[base + 2 * w + 1] = v;
                }
            }
        }
        let out = Tensor::new(vec![b, c, 2 * h, 2 * w], out)?;
        Ok(self.push(out, self.req(&[a]), Op::Upsample2x { a }))
    }

    /// Tile feature vectors `(B,D)` over a spatial grid -> `(B,D,h,w)`.
    pub fn broadcast_spatial(&mut self, a: Var, h: usize, w: usize) -> Result<Var> {
        let t = self.value(a);
        let s = t.shape().to_vec();
        if s.len() != 2 {
            return Err(TensorError::Invalid {
                op: "broadcast_spatial",
                msg: format!("expected 2D input, got {:?}", s),
            });
        }
        let (b, d) = (s[0], s[1]);
        let mut out = vec![S::zero(); b * d * h * w];
        let data = t.data();
        for bi in 0..b {
            for di in 0..d {
                let v = data[bi * d + di];
                let dst = &mut out[(bi * d + di) * h * w..(bi * d + di + 1) * h * w];
                for o in dst.iter_mut() {
                    *o = v;
                }
            }
        }
        let out = Tensor::new(vec![b, d, h, w], out)?;
        Ok(self.push(out, self.req(&[a]), Op::BroadcastSpatial { a, h, w }))
    }

    /// Mean squared error over all elements.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "mse_loss",
                lhs: p.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        let n = S::of(p.len() as f64);
        let mut s = S::zero();
        for (&a, &b) in p.data().iter().zip(t.data()) {
            s += (a - b) * (a - b);
        }
        Ok(self.push(Tensor::scalar(s / n), self.req(&[pred, target]), Op::MseLoss { pred, target }))
    }

    /// Fused scaled-dot-product attention.
    ///
    /// q `(B,Tq,d)`, k `(B,Tk,d)`, v `(B,Tk,d)` -> `(B,Tq,d)`.
    /// With `invariant`, reductions over the `Tk` axis use order-canonical
    /// sums, making the output exactly invariant to permutations of the
    /// key/value pairs.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, invariant: bool) -> Result<Var> {
        let (qs, ks, vs) = (
            self.value(q).shape().to_vec(),
            self.value(k).shape().to_vec(),
            self.value(v).shape().to_vec(),
        );
        if qs.len() != 3 || ks.len() != 3 || vs.len() != 3 || qs[0] != ks[0] || ks != vs
            || qs[2] != ks[2]
        {
            return Err(TensorError::ShapeMismatch { op: "attention", lhs: qs, rhs: ks });
        }
        let (b, tq, d) = (qs[0], qs[1], qs[2]);
        let tk = ks[1];
        let scale = S::one() / S::of(d as f64).sqrt();
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut weights = vec![S::zero(); b * tq * tk];
        let mut out = vec![S::zero(); b * tq * d];
        let mut terms = vec![S::zero(); tk];
        for bi in 0..b {
            for ti in 0..tq {
                let qrow = &qd[(bi * tq + ti) * d..(bi * tq + ti + 1) * d];
                let wrow = &mut weights[(bi * tq + ti) * tk..(bi * tq + ti + 1) * tk];
                for tj in 0..tk {
                    let krow = &kd[(bi * tk + tj) * d..(bi * tk + tj + 1) * d];
                    let mut s = S::zero();
                    for e in 0..d {
                        s += qrow[e] * krow[e];
                    }
                    wrow[tj] = s * scale;
                }
                let mut m = wrow[0];
                for &x in wrow.iter().skip(1) {
                    if x > m {
                        m = x;
                    }
                }
                for x in wrow.iter_mut() {
                    *x = (*x - m).exp();
                }
                let z = if invariant {
                    terms.copy_from_slice(wrow);
                    ordered_sum(&mut terms)
                } else {
                    let mut z = S::zero();
                    for &x in wrow.iter() {
                        z += x;
                    }
                    z
                };
                for x in wrow.iter_mut() {
                    *x /= z;
                }
                let orow = &mut out[(bi * tq + ti) * d..(bi * tq + ti + 1) * d];
                if invariant {
                    for e in 0..d {
                        for tj in 0..tk {
                            terms[tj] = wrow[tj] * vd[(bi * tk + tj) * d + e];
                        }
                        orow[e] = ordered_sum(&mut terms);
                    }
                } else {
                    for tj in 0..tk {
                        let wv = wrow[tj];
                        let vrow = &vd[(bi * tk + tj) * d..(bi * tk + tj + 1) * d];
                        for e in 0..d {
                            orow[e] += wv * vrow[e];
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![b, tq, d], out)?;
        Ok(self.push(out, self.req(&[q, k, v]), Op::Attention { q, k, v, weights, invariant }))
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from a scalar loss. Returns gradients for every node
    /// that requires them (leaves included).
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<S>> {
        if !self.value(loss).shape().is_empty() && self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<S>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(self.value(loss).shape().to_vec(), vec![S::one()]).unwrap());
        for idx in (0..n).rev() {
            if grads[idx].is_none() || !self.nodes[idx].requires {
                continue;
            }
            let gout = grads[idx].take().unwrap();
            self.backprop_node(idx, &gout, &mut grads);
            // keep the gradient available for callers (e.g. parameter leaves)
            grads[idx] = Some(gout);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<S>>], v: Var, delta: Tensor<S>) {
        if !self.nodes[v.0].requires {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                debug_assert_eq!(g.shape(), delta.shape());
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += *b;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn backprop_node(&self, idx: usize, gout: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        // Clone the op descriptor (parent indices + small saved state).
        let op = self.nodes[idx].op.clone();
        match op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                self.accumulate(grads, a, gout.clone());
                self.accumulate(grads, b, reduce_to_shape(gout, self.value(b).shape()));
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, a, gout.clone());
                let gb = reduce_to_shape(&gout.map(|x| -x), self.value(b).shape());
                self.accumulate(grads, b, gb);
            }
            Op::Mul { a, b } => {
                if self.nodes[a.0].requires {
                    let ga = broadcast_binary("mul", gout, self.value(b), |g, y| g * y).unwrap();
                    self.accumulate(grads, a, ga);
                }
                if self.nodes[b.0].requires {
                    let full = broadcast_binary("mul", gout, self.value(a), |g, x| g * x).unwrap();
                    self.accumulate(grads, b, reduce_to_shape(&full, self.value(b).shape()));
                }
            }
            Op::Div { a, b } => {
                if self.nodes[a.0].requires {
                    let ga = broadcast_binary("div", gout, self.value(b), |g, y| g / y).unwrap();
                    self.accumulate(grads, a, ga);
                }
                if self.nodes[b.0].requires {
                    // d(a/b)/db = -a/b^2
                    let quot = broadcast_binary("div", self.value(a), self.value(b), |x, y| x / y)
                        .unwrap();
                    let tmp = broadcast_binary("mul", gout, &quot, |g, q| g * q).unwrap();
                    let full = broadcast_binary("div", &tmp, self.value(b), |t, y| -(t / y)).unwrap();
                    self.accumulate(grads, b, reduce_to_shape(&full, self.value(b).shape()));
                }
            }
            Op::Neg { a } => self.accumulate(grads, a, gout.map(|x| -x)),
            Op::Scale { a, c } => self.accumulate(grads, a, gout.map(|x| x * c)),
            Op::AddScalar { a, .. } => self.accumulate(grads, a, gout.clone()),
            Op::Relu { a } => {
                let x = self.value(a);
                let g = zip_map(gout, x, |g, x| if x > S::zero() { g } else { S::zero() });
                self.accumulate(grads, a, g);
            }
            Op::Gelu { a } => {
                let x = self.value(a);
                let g = zip_map(gout, x, |g, x| g * gelu_grad(x));
                self.accumulate(grads, a, g);
            }
            Op::Tanh { a } => {
                let y = self.value(Var(idx));
                let g = zip_map(gout, y, |g, y| g * (S::one() - y * y));
                self.accumulate(grads, a, g);
            }
            Op::Sigmoid { a } => {
                let y = self.value(Var(idx));
                let g = zip_map(gout, y, |g, y| g * y * (S::one() - y));
                self.accumulate(grads, a, g);
            }
            Op::Exp { a } => {
                let y = self.value(Var(idx));
                let g = zip_map(gout, y, |g, y| g * y);
                self.accumulate(grads, a, g);
            }
            Op::Softmax { a, axis } => {
                let y = self.value(Var(idx));
                let shape = y.shape().to_vec();
                let (outer, extent, inner) = split_axis(&shape, axis);
                let mut gx = vec![S::zero(); y.len()];
                let yd = y.data();
                let gd = gout.data();
                for o in 0..outer {
                    for i in 0..inner {
                        let idxf = |e: usize| (o * extent + e) * inner + i;
                        let mut dot = S::zero();
                        for e in 0..extent {
                            dot += gd[idxf(e)] * yd[idxf(e)];
                        }
                        for e in 0..extent {
                            gx[idxf(e)] = yd[idxf(e)] * (gd[idxf(e)] - dot);
                        }
                    }
                }
                self.accumulate(grads, a, Tensor::new(shape, gx).unwrap());
            }
            Op::SumAxis { a, axis } => {
                let in_shape = self.value(a).shape().to_vec();
                let (outer, extent, inner) = split_axis(&in_shape, axis);
                let mut gx = vec![S::zero(); self.value(a).len()];
                let gd = gout.data();
                for o in 0..outer {
                    for e in 0..extent {
                        let base = (o * extent + e) * inner;
                        let obase = o * inner;
                        for i in 0..inner {
                            gx[base + i] = gd[obase + i];
                        }
                    }
                }
                self.accumulate(grads, a, Tensor::new(in_shape, gx).unwrap());
            }
            Op::LayerNorm { x, gamma, beta, mean, rstd } => {
                let xt = self.value(x);
                let d = *xt.shape().last().unwrap();
                let rows = xt.len() / d;
                let nd = S::of(d as f64);
                let g = self.value(gamma).data();
                let xd = xt.data();
                let gd = gout.data();
                let mut gx = vec![S::zero(); xt.len()];
                let mut ggamma = vec![S::zero(); d];
                let mut gbeta = vec![S::zero(); d];
                for r in 0..rows {
                    let (m, rs) = (mean[r], rstd[r]);
                    let xrow = &xd[r * d..(r + 1) * d];
                    let grow = &gd[r * d..(r + 1) * d];
                    let mut sum_dyg = S::zero();
                    let mut sum_dyg_xhat = S::zero();
                    for i in 0..d {
                        let xhat = (xrow[i] - m) * rs;
                        let dyg = grow[i] * g[i];
                        sum_dyg += dyg;
                        sum_dyg_xhat += dyg * xhat;
                        ggamma[i] += grow[i] * xhat;
                        gbeta[i] += grow[i];
                    }
                    sum_dyg /= nd;
                    sum_dyg_xhat /= nd;
                    for i in 0..d {
                        let xhat = (xrow[i] - m) * rs;
                        gx[r * d + i] = rs * (grow[i] * g[i] - sum_dyg - xhat * sum_dyg_xhat);
                    }
                }
                self.accumulate(grads, x, Tensor::new(xt.shape().to_vec(), gx).unwrap());
                self.accumulate(grads, gamma, Tensor::new(vec![d], ggamma).unwrap());
                self.accumulate(grads, beta, Tensor::new(vec![d], gbeta).unwrap());
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                self.backprop_conv2d(x, w, b, stride, pad, gout, grads);
            }
            Op::Upsample2x { a } => {
                let s = self.value(a).shape().to_vec();
                let (bn, c, h, wd) = (s[0], s[1], s[2], s[3]);
                let gd = gout.data();
                let mut gx = vec![S::zero(); bn * c * h * wd];
                for bc in 0..bn * c {
                    let src = &gd[bc * 4 * h * wd..(bc + 1) * 4 * h * wd];
                    let dst = &mut gx[bc * h * wd..(bc + 1) * h * wd];
                    for i in 0..h {
                        for j in 0..wd {
                            let base = (2 * i) * (2 * wd) + 2 * j;
                            dst[i * wd + j] =
                                src[base] + src[base + 1] + src[base + 2 * wd] + src[base + 2 * wd + 1];
                        }
                    }
                }
                self.accumulate(grads, a, Tensor::new(s, gx).unwrap());
            }
            Op::BroadcastSpatial { a, h, w } => {
                let s = self.value(a).shape().to_vec();
                let (bn, d) = (s[0], s[1]);
                let gd = gout.data();
                let mut gx = vec![S::zero(); bn * d];
                for i in 0..bn * d {
                    let block = &gd[i * h * w..(i + 1) * h * w];
                    let mut acc = S::zero();
                    for &v in block {
                        acc += v;
                    }
                    gx[i] = acc;
                }
                self.accumulate(grads, a, Tensor::new(s, gx).unwrap());
            }
            Op::MseLoss { pred, target } => {
                let p = self.value(pred);
                let t = self.value(target);
                let n = S::of(p.len() as f64);
                let c = gout.item() * S::of(2.0) / n;
                if self.nodes[pred.0].requires {
                    let g = zip_map(p, t, |a, b| c * (a - b));
                    self.accumulate(grads, pred, g);
                }
                if self.nodes[target.0].requires {
                    let g = zip_map(p, t, |a, b| -c * (a - b));
                    self.accumulate(grads, target, g);
                }
            }
            Op::Sum { a } => {
                let g = Tensor::full(self.value(a).shape().to_vec(), gout.item());
                self.accumulate(grads, a, g);
            }
            Op::Mean { a } => {
                let n = S::of(self.value(a).len() as f64);
                let g = Tensor::full(self.value(a).shape().to_vec(), gout.item() / n);
                self.accumulate(grads, a, g);
            }
            Op::Slice { a, axis, start } => {
                let in_shape = self.value(a).shape().to_vec();
                let (outer, extent, inner) = split_axis(&in_shape, axis);
                let len = gout.shape()[axis];
                let mut gx = vec![S::zero(); self.value(a).len()];
                let gd = gout.data();
                for o in 0..outer {
                    let src = &gd[o * len * inner..(o + 1) * len * inner];
                    let base = (o * extent + start) * inner;
                    gx[base..base + len * inner].copy_from_slice(src);
                }
                self.accumulate(grads, a, Tensor::new(in_shape, gx).unwrap());
            }
            Op::Concat { parts, axis } => {
                let out_shape = self.value(Var(idx)).shape().to_vec();
                let (outer, _, inner) = split_axis(&out_shape, axis);
                let gd = gout.data();
                let mut offset = 0usize;
                let total = out_shape[axis];
                for &p in &parts {
                    let e = self.value(p).shape()[axis];
                    if self.nodes[p.0].requires {
                        let mut gp = Vec::with_capacity(outer * e * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            gp.extend_from_slice(&gd[base..base + e * inner]);
                        }
                        self.accumulate(
                            grads,
                            p,
                            Tensor::new(self.value(p).shape().to_vec(), gp).unwrap(),
                        );
                    }
                    offset += e;
                }
            }
            Op::Reshape { a } => {
                let g = gout.clone().reshaped(self.value(a).shape().to_vec()).unwrap();
                self.accumulate(grads, a, g);
            }
            Op::SwapAxes { a, d0, d1 } => {
                let g = swap_axes_tensor(gout, d0, d1).unwrap();
                self.accumulate(grads, a, g);
            }
            Op::Matmul { a, b, ta, tb } => {
                self.backprop_matmul(a, b, ta, tb, gout, grads);
            }
            Op::Attention { q, k, v, weights, .. } => {
                self.backprop_attention(q, k, v, &weights, gout, grads);
            }
        }
    }

    fn backprop_conv2d(
        &self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        gout: &Tensor<S>,
        grads: &mut [Option<Tensor<S>>],
    ) {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let (bsz, cin, h, wdt) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, _, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        let os = gout.shape();
        let (oh, ow) = (os[2], os[3]);
        let ckk = cin * kh * kw;
        let xdata = self.value(x).data();
        let wdata = self.value(w).data();
        let gd = gout.data();
        let need_x = self.nodes[x.0].requires;
        let need_w = self.nodes[w.0].requires;
        let need_b = self.nodes[b.0].requires;
        let mut gxd = vec![S::zero(); bsz * cin * h * wdt];
        let mut gwd = vec![S::zero(); cout * ckk];
        let mut gbd = vec![S::zero(); cout];
        let mut cols = vec![S::zero(); ckk * oh * ow];
        let mut gcols = vec![S::zero(); ckk * oh * ow];
        for bi in 0..bsz {
            let gyb = &gd[bi * cout * oh * ow..(bi + 1) * cout * oh * ow];
            if need_w {
                let xb = &xdata[bi * cin * h * wdt..(bi + 1) * cin * h * wdt];
                im2col(xb, cin, h, wdt, kh, kw, stride, pad, oh, ow, &mut cols);
                matmul_bt_acc(gyb, &cols, &mut gwd, cout, oh * ow, ckk);
            }
            if need_b {
                for co in 0..cout {
                    let row = &gyb[co * oh * ow..(co + 1) * oh * ow];
                    for &v in row {
                        gbd[co] += v;
                    }
                }
            }
            if need_x {
                for g in gcols.iter_mut() {
                    *g = S::zero();
                }
                matmul_at_acc(wdata, gyb, &mut gcols, ckk, cout, oh * ow);
                let gxb = &mut gxd[bi * cin * h * wdt..(bi + 1) * cin * h * wdt];
                col2im(&gcols, cin, h, wdt, kh, kw, stride, pad, oh, ow, gxb);
            }
        }
        if need_x {
            self.accumulate(grads, x, Tensor::new(xs, gxd).unwrap());
        }
        if need_w {
            self.accumulate(grads, w, Tensor::new(ws, gwd).unwrap());
        }
        if need_b {
            self.accumulate(grads, b, Tensor::new(vec![cout], gbd).unwrap());
        }
    }

    fn backprop_matmul(
        &self,
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        gout: &Tensor<S>,
        grads: &mut [Option<Tensor<S>>],
    ) {
        // dA = dC @ op(B)ᵀ, dB = op(A)ᵀ @ dC, mapped back through the
        // transpose flags. Handled per batch with the raw kernels.
        let av = self.value(a);
        let bv = self.value(b);
        let (ash, bsh) = (av.shape().to_vec(), bv.shape().to_vec());
        let batch_a = ash.len() == 3;
        let batch_b = bsh.len() == 3;
        let nb = if batch_a { ash[0] } else { 1 };
        let (am, ak) = mat_dims(&ash, ta);
        let (_, bn) = mat_dims(&bsh, tb);
        let a_sz = am * ak;
        let b_sz: usize = if batch_b { bsh[1] * bsh[2] } else { bsh.iter().product() };
        let c_sz = am * bn;
        let gd = gout.data();
        let mut ga = if self.nodes[a.0].requires { Some(vec![S::zero(); av.len()]) } else { None };
        let mut gb = if self.nodes[b.0].requires { Some(vec![S::zero(); bv.len()]) } else { None };
        for bi in 0..nb {
            let a_off = if batch_a { bi * a_sz } else { 0 };
            let b_off = if batch_b { bi * b_sz } else { 0 };
            let adat = &av.data()[a_off..a_off + a_sz];
            let bdat = &bv.data()[b_off..b_off + b_sz];
            let gc = &gd[bi * c_sz..(bi + 1) * c_sz];
            if let Some(ga) = ga.as_mut() {
                let gslice = &mut ga[a_off..a_off + a_sz];
                match (ta, tb) {
                    (false, false) => matmul_bt_acc(gc, bdat, gslice, am, bn, ak),
                    (false, true) => matmul_acc(gc, bdat, gslice, am, bn, ak),
                    (true, false) => {
                        // A stored as (k x m): dA_stored = B @ dCᵀ -> (k,m)
                        matmul_bt_acc(bdat, gc, gslice, ak, bn, am)
                    }
                    (true, true) => {
                        // dA_stored = (dC @ B)ᵀ computed as Bᵀ... use at on gc
                        matmul_at_acc(gc, bdat, gslice, ak, am, bn)
                    }
                }
            }
            if let Some(gb) = gb.as_mut() {
                let gslice = &mut gb[b_off..b_off + b_sz];
                match (ta, tb) {
                    (false, false) => matmul_at_acc(adat, gc, gslice, ak, am, bn),
                    (true, false) => matmul_acc(adat, gc, gslice, ak, am, bn),
                    (false, true) => {
                        // B stored as (n x k): dB_stored = dCᵀ @ A -> (n,k)
                        matmul_at_acc(gc, adat, gslice, bn, am, ak)
                    }
                    (true, true) => matmul_bt_acc(gc, adat, gslice, bn, am, ak),
                }
            }
        }
        if let Some(ga) = ga {
            self.accumulate(grads, a, Tensor::new(ash, ga).unwrap());
        }
        if let Some(gb) = gb {
            self.accumulate(grads, b, Tensor::new(bsh, gb).unwrap());
        }
    }

    fn backprop_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        weights: &[S],
        gout: &Tensor<S>,
        grads: &mut [Option<Tensor<S>>],
    ) {
        let qs = self.value(q).shape().to_vec();
        let ks = self.value(k).shape().to_vec();
        let (b, tq, d) = (qs[0], qs[1], qs[2]);
        let tk = ks[1];
        let scale = S::one() / S::of(d as f64).sqrt();
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let gd = gout.data();
        let mut gq = vec![S::zero(); qd.len()];
        let mut gk = vec![S::zero(); kd.len()];
        let mut gv = vec![S::zero(); vd.len()];
        let mut dw = vec![S::zero(); tk];
        for bi in 0..b {
            for ti in 0..tq {
                let wrow = &weights[(bi * tq + ti) * tk..(bi * tq + ti + 1) * tk];
                let grow = &gd[(bi * tq + ti) * d..(bi * tq + ti + 1) * d];
                // dV += wᵀ dOut ; dW = dOut · Vᵀ
                let mut dot = S::zero();
                for tj in 0..tk {
                    let vrow = &vd[(bi * tk + tj) * d..(bi * tk + tj + 1) * d];
                    let gvrow = &mut gv[(bi * tk + tj) * d..(bi * tk + tj + 1) * d];
                    let mut s = S::zero();
                    for e in 0..d {
                        s += grow[e] * vrow[e];
                        gvrow[e] += wrow[tj] * grow[e];
                    }
                    dw[tj] = s;
                    dot += s * wrow[tj];
                }
                // softmax backward + scale
                let qrow = &qd[(bi * tq + ti) * d..(bi * tq + ti + 1) * d];
                let gqrow_base = (bi * tq + ti) * d;
                for tj in 0..tk {
                    let dl = wrow[tj] * (dw[tj] - dot) * scale;
                    let krow = &kd[(bi * tk + tj) * d..(bi * tk + tj + 1) * d];
                    let gkrow = &mut gk[(bi * tk + tj) * d..(bi * tk + tj + 1) * d];
                    for e in 0..d {
                        gq[gqrow_base + e] += dl * krow[e];
                        gkrow[e] += dl * qrow[e];
                    }
                }
            }
        }
        if self.nodes[q.0].requires {
            self.accumulate(grads, q, Tensor::new(qs, gq).unwrap());
        }
        if self.nodes[k.0].requires {
            self.accumulate(grads, k, Tensor::new(ks.clone(), gk).unwrap());
        }
        if self.nodes[v.0].requires {
            self.accumulate(grads, v, Tensor::new(ks, gv).unwrap());
        }
    }
}

// ---- free helpers ----------------------------------------------------------

fn gelu_fwd<S: Real>(x: S) -> S {
    // tanh approximation
    let c = S::of(0.7978845608028654); // sqrt(2/pi)
    let k = S::of(0.044715);
    let half = S::of(0.5);
    half * x * (S::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<S: Real>(x: S) -> S {
    let c = S::of(0.7978845608028654);
    let k = S::of(0.044715);
    let half = S::of(0.5);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let du = c * (S::one() + S::of(3.0) * k * x * x);
    half * (S::one() + t) + half * x * (S::one() - t * t) * du
}

/// (outer, extent, inner) strides around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let extent = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, extent, inner)
}

fn mat_dims(shape: &[usize], transposed: bool) -> (usize, usize) {
    let n = shape.len();
    let (r, c) = (shape[n - 2], shape[n - 1]);
    if transposed {
        (c, r)
    } else {
        (r, c)
    }
}

fn matmul_forward<S: Real>(a: &Tensor<S>, b: &Tensor<S>, ta: bool, tb: bool) -> Result<Tensor<S>> {
    let ash = a.shape();
    let bsh = b.shape();
    let ok = matches!((ash.len(), bsh.len()), (2, 2) | (3, 2) | (3, 3));
    if !ok {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            lhs: ash.to_vec(),
            rhs: bsh.to_vec(),
        });
    }
    if ash.len() == 3 && bsh.len() == 3 && ash[0] != bsh[0] {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            lhs: ash.to_vec(),
            rhs: bsh.to_vec(),
        });
    }
    let (am, ak) = mat_dims(ash, ta);
    let (bk, bn) = mat_dims(bsh, tb);
    if ak != bk {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            lhs: ash.to_vec(),
            rhs: bsh.to_vec(),
        });
    }
    let batch_a = ash.len() == 3;
    let batch_b = bsh.len() == 3;
    let nb = if batch_a { ash[0] } else { 1 };
    let out_shape: Vec<usize> = if batch_a { vec![nb, am, bn] } else { vec![am, bn] };
    let a_sz = ash[ash.len() - 2] * ash[ash.len() - 1];
    let b_sz = bsh[bsh.len() - 2] * bsh[bsh.len() - 1];
    let mut out = vec![S::zero(); nb * am * bn];
    for bi in 0..nb {
        let adat = &a.data()[if batch_a { bi * a_sz } else { 0 }..][..a_sz];
        let bdat = &b.data()[if batch_b { bi * b_sz } else { 0 }..][..b_sz];
        let c = &mut out[bi * am * bn..(bi + 1) * am * bn];
        match (ta, tb) {
            (false, false) => matmul_acc(adat, bdat, c, am, ak, bn),
            (false, true) => matmul_bt_acc(adat, bdat, c, am, ak, bn),
            (true, false) => matmul_at_acc(adat, bdat, c, am, ak, bn),
            (true, true) => {
                // rare; materialize Aᵀ then use bt kernel
                let (r, cdim) = (ash[ash.len() - 2], ash[ash.len() - 1]);
                let mut at = vec![S::zero(); a_sz];
                for i in 0..r {
                    for j in 0..cdim {
                        at[j * r + i] = adat[i * cdim + j];
                    }
                }
                matmul_bt_acc(&at, bdat, c, am, ak, bn);
            }
        }
    }
    Tensor::new(out_shape, out)
}

fn zip_map<S: Real>(a: &Tensor<S>, b: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
    debug_assert_eq!(a.shape(), b.shape());
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
    .unwrap()
}

/// Right-aligned broadcasting of `b` onto `a`'s shape.
fn broadcast_binary<S: Real>(
    op: &'static str,
    a: &Tensor<S>,
    b: &Tensor<S>,
    f: impl Fn(S, S) -> S,
) -> Result<Tensor<S>> {
    if a.shape() == b.shape() {
        return Ok(zip_map(a, b, f));
    }
    let ash = a.shape();
    let bsh = b.shape();
    if bsh.len() > ash.len() {
        return Err(TensorError::ShapeMismatch { op, lhs: ash.to_vec(), rhs: bsh.to_vec() });
    }
    // pad b's shape on the left with 1s
    let offset = ash.len() - bsh.len();
    let mut bstrides = vec![0usize; ash.len()];
    {
        let mut stride = 1usize;
        for i in (0..bsh.len()).rev() {
            let dim = bsh[i];
            if dim != ash[offset + i] && dim != 1 {
                return Err(TensorError::ShapeMismatch { op, lhs: ash.to_vec(), rhs: bsh.to_vec() });
            }
            bstrides[offset + i] = if dim == 1 { 0 } else { stride };
            stride *= dim;
        }
    }
    let mut out = Vec::with_capacity(a.len());
    let mut idx = vec![0usize; ash.len()];
    let ad = a.data();
    let bd = b.data();
    let mut boff = 0usize;
    for &av in ad.iter() {
        out.push(f(av, bd[boff]));
        // odometer increment
        for d in (0..ash.len()).rev() {
            idx[d] += 1;
            boff += bstrides[d];
            if idx[d] < ash[d] {
                break;
            }
            boff -= bstrides[d] * ash[d];
            idx[d] = 0;
        }
    }
    Tensor::new(ash.to_vec(), out)
}

/// Sum `g` down to `shape` (inverse of right-aligned broadcasting).
fn reduce_to_shape<S: Real>(g: &Tensor<S>, shape: &[usize]) -> Tensor<S> {
    if g.shape() == shape {
        return g.clone();
    }
    let gsh = g.shape();
    let offset = gsh.len() - shape.len();
    let mut out = Tensor::zeros(shape.to_vec());
    let mut bstrides = vec![0usize; gsh.len()];
    {
        let mut stride = 1usize;
        for i in (0..shape.len()).rev() {
            bstrides[offset + i] = if shape[i] == 1 { 0 } else { stride };
            stride *= shape[i];
        }
    }
    let mut idx = vec![0usize; gsh.len()];
    let mut boff = 0usize;
    let od = out.data_mut();
    for &gv in g.data().iter() {
        od[boff] += gv;
        for d in (0..gsh.len()).rev() {
            idx[d] += 1;
            boff += bstrides[d];
            if idx[d] < gsh[d] {
                break;
            }
            boff -= bstrides[d] * gsh[d];
            idx[d] = 0;
        }
    }
    out
}

fn swap_axes_tensor<S: Real>(t: &Tensor<S>, d0: usize, d1: usize) -> Result<Tensor<S>> {
    let shape = t.shape().to_vec();
    if d0 >= shape.len() || d1 >= shape.len() {
        return Err(TensorError::Invalid {
            op: "swap_axes",
            msg: format!("axes ({}, {}) out of range for {:?}", d0, d1, shape),
        });
    }
    if d0 == d1 {
        return Ok(t.clone());
    }
    let mut new_shape = shape.clone();
    new_shape.swap(d0, d1);
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len() - 1).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let mut new_strides = strides.clone();
    new_strides.swap(d0, d1);
    let mut out = vec![S::zero(); t.len()];
    let data = t.data();
    let mut idx = vec![0usize; new_shape.len()];
    let mut src = 0usize;
    for o in out.iter_mut() {
        *o = data[src];
        for d in (0..new_shape.len()).rev() {
            idx[d] += 1;
            src += new_strides[d];
            if idx[d] < new_shape[d] {
                break;
            }
            src -= new_strides[d] * new_shape[d];
            idx[d] = 0;
        }
    }
    Tensor::new(new_shape, out)
}

#[allow(clippy::too_many_arguments)]
fn im2col<S: Real>(
    x: &[S],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    cols: &mut [S],
) {
    debug_assert_eq!(cols.len(), cin * kh * kw * oh * ow);
    let mut row = 0usize;
    for ci in 0..cin {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                row += 1;
                for oi in 0..oh {
                    let si = (oi * stride + ki) as isize - pad as isize;
                    for oj in 0..ow {
                        let sj = (oj * stride + kj) as isize - pad as isize;
                        dst[oi * ow + oj] = if si >= 0 && si < h as isize && sj >= 0 && sj < w as isize
                        {
                            plane[si as usize * w + sj as usize]
                        } else {
                            S::zero()
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<S: Real>(
    cols: &[S],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    x: &mut [S],
) {
    let mut row = 0usize;
    for ci in 0..cin {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                row += 1;
                for oi in 0..oh {
                    let si = (oi * stride + ki) as isize - pad as isize;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    for oj in 0..ow {
                        let sj = (oj * stride + kj) as isize - pad as isize;
                        if sj >= 0 && sj < w as isize {
                            plane[si as usize * w + sj as usize] += src[oi * ow + oj];
                        }
                    }
                }
            }
        }
    }
}
