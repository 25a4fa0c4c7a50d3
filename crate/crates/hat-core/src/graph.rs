//! Reverse-mode autodiff on an arena tape.
//!
//! A [`Graph`] owns every intermediate tensor of one forward evaluation.
//! Ops append nodes in topological order by construction; [`Graph::backward`]
//! walks the arena in reverse and accumulates gradients into shared inputs.
//! A graph is confined to one thread; tensors moving in and out of it are
//! value-semantic and freely shareable.
//!
//! Instrumentation: every executed matmul contributes M*K*N multiply-accumulates
//! (batched variants scale by batch) and every convolution contributes
//! B*C_out*H'*W'*C_in*kh*kw, padded taps included, to the per-graph MAC counter.
//! Backward passes run through the same kernels and are counted when they
//! execute. Softmax, norms and activations are never counted. The graph also
//! logs the shape of every softmax it executes, which is how attention-matrix
//! geometry is observed from the outside.

use std::collections::HashMap;
use std::sync::Arc;

use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

/// Handle to a node in one specific [`Graph`]. Never valid across graphs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Value(usize);

#[derive(Debug)]
enum Op<T: Scalar> {
    Leaf,
    Matmul { a: Value, b: Value },
    Bmm { a: Value, b: Value },
    AddSame { a: Value, b: Value },
    /// `b` trailing-broadcast over the leading dims of `a`.
    AddBcast { a: Value, b: Value },
    SubSame { a: Value, b: Value },
    MulSame { a: Value, b: Value },
    MulBcast { a: Value, b: Value },
    Scale { a: Value, c: T },
    Softmax { a: Value },
    Gelu { a: Value },
    Relu { a: Value },
    Reshape { a: Value },
    Permute { a: Value, perm: Vec<usize> },
    Concat { parts: Vec<Value>, axis: usize },
    Slice { a: Value, axis: usize, start: usize, len: usize },
    SumAll { a: Value },
    MeanAxis { a: Value, axis: usize },
    GatherRows { a: Value, idx: Arc<Vec<usize>> },
    Expand { a: Value },
    Conv2d { x: Value, w: Value, b: Option<Value>, stride: usize, pad: usize },
    BatchNorm { x: Value, scale: Value, shift: Value },
    LayerNormLast { x: Value, scale: Value, shift: Value },
    LayerNorm2d { x: Value, scale: Value, shift: Value },
    AdaptiveAvgPool { x: Value, g: usize },
    UpsampleNearest { x: Value, h: usize },
    WindowPartition { x: Value, k: usize },
    WindowMerge { x: Value, h: usize, k: usize },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    /// Saved auxiliaries for backward (normalized values, inverse stddevs).
    aux: Vec<Tensor<T>>,
}

/// Arena tape. `Graph::new` records gradients; `Graph::inference` skips the
/// backward bookkeeping (and enables bias-table caching upstream) but runs the
/// identical forward arithmetic.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    leaf_by_buffer: HashMap<usize, Value>,
    grad_enabled: bool,
    instrument: bool,
    macs: u64,
    softmax_log: Vec<Vec<usize>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            leaf_by_buffer: HashMap::new(),
            grad_enabled: true,
            instrument: true,
            macs: 0,
            softmax_log: Vec::new(),
        }
    }

    /// Forward-only graph: backward() is unavailable, aux saves are skipped.
    pub fn inference() -> Self {
        let mut g = Self::new();
        g.grad_enabled = false;
        g
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn set_instrument(&mut self, on: bool) {
        self.instrument = on;
    }

    /// Multiply-accumulates executed so far (0 while instrumentation is off).
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn reset_macs(&mut self) {
        self.macs = 0;
    }

    /// Shapes of every softmax executed, in order.
    pub fn softmax_shapes(&self) -> &[Vec<usize>] {
        &self.softmax_log
    }

    pub fn value(&self, v: Value) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad_of(&self, v: Value) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of the leaf registered for this exact tensor buffer.
    pub fn grad_for(&self, t: &Tensor<T>) -> Option<&Tensor<T>> {
        self.leaf_by_buffer.get(&t.buffer_id()).and_then(|&v| self.grad_of(v))
    }

    pub fn reset_grads(&mut self) {
        self.grads.clear();
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, aux: Vec<Tensor<T>>) -> Value {
        let keep_aux = if self.grad_enabled { aux } else { Vec::new() };
        self.nodes.push(Node { value, op, aux: keep_aux });
        Value(self.nodes.len() - 1)
    }

    fn count_macs(&mut self, n: u64) {
        if self.instrument {
            self.macs += n;
        }
    }

    /// Registers a parameter leaf. The same buffer registered twice maps to the
    /// same node, so a parameter used in several places accumulates one gradient.
    pub fn param(&mut self, t: &Tensor<T>) -> Value {
        if let Some(&v) = self.leaf_by_buffer.get(&t.buffer_id()) {
            return v;
        }
        let id = t.buffer_id();
        let v = self.push(t.clone(), Op::Leaf, Vec::new());
        self.leaf_by_buffer.insert(id, v);
        v
    }

    /// Registers a non-parameter leaf (inputs, coordinate tables).
    pub fn constant(&mut self, t: Tensor<T>) -> Value {
        self.push(t, Op::Leaf, Vec::new())
    }

    // ---- elementwise ----

    /// Elementwise add. Equal shapes, or `b` aligned to the trailing dims of `a`
    /// (or vice versa; the smaller operand broadcasts).
    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if sa == sb {
            let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
            return Ok(self.push(data, Op::AddSame { a, b }, Vec::new()));
        }
        if trailing_aligned(&sa, &sb) {
            let out = bcast_combine(self.value(a), self.value(b), |x, y| x + y);
            return Ok(self.push(out, Op::AddBcast { a, b }, Vec::new()));
        }
        if trailing_aligned(&sb, &sa) {
            let out = bcast_combine(self.value(b), self.value(a), |x, y| x + y);
            return Ok(self.push(out, Op::AddBcast { a: b, b: a }, Vec::new()));
        }
        Err(Error::dim("add", format!("shapes {sa:?} and {sb:?} neither match nor trailing-align")))
    }

    /// Elementwise subtract; shapes must match exactly.
    pub fn sub(&mut self, a: Value, b: Value) -> Result<Value> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if sa != sb {
            return Err(Error::dim("sub", format!("shapes {sa:?} and {sb:?} differ")));
        }
        let data = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(data, Op::SubSame { a, b }, Vec::new()))
    }

    /// Elementwise multiply with the same broadcast rule as [`Graph::add`].
    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if sa == sb {
            let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
            return Ok(self.push(data, Op::MulSame { a, b }, Vec::new()));
        }
        if trailing_aligned(&sa, &sb) {
            let out = bcast_combine(self.value(a), self.value(b), |x, y| x * y);
            return Ok(self.push(out, Op::MulBcast { a, b }, Vec::new()));
        }
        if trailing_aligned(&sb, &sa) {
            let out = bcast_combine(self.value(b), self.value(a), |x, y| x * y);
            return Ok(self.push(out, Op::MulBcast { a: b, b: a }, Vec::new()));
        }
        Err(Error::dim("mul", format!("shapes {sa:?} and {sb:?} neither match nor trailing-align")))
    }

    pub fn scale(&mut self, a: Value, c: T) -> Value {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale { a, c }, Vec::new())
    }

    // ---- matmul ----

    /// 2-D matrix product [M,K]x[K,N] -> [M,N].
    pub fn matmul(&mut self, a: Value, b: Value) -> Result<Value> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", format!("incompatible shapes {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::ZERO; m * n];
        mm(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        self.count_macs((m * k * n) as u64);
        let t = Tensor::new(&[m, n], out)?;
        Ok(self.push(t, Op::Matmul { a, b }, Vec::new()))
    }

    /// Batched matmul [..,M,K]x[..,K,N] -> [..,M,N]; leading dims must match exactly.
    pub fn bmm(&mut self, a: Value, b: Value) -> Result<Value> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if sa.len() < 3 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(Error::dim("bmm", format!("incompatible shapes {sa:?} x {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(Error::dim("bmm", format!("inner dims disagree: {sa:?} x {sb:?}")));
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut out = vec![T::ZERO; batch * m * n];
        {
            let da = self.value(a).data();
            let db = self.value(b).data();
            for i in 0..batch {
                mm(&da[i * m * k..(i + 1) * m * k], &db[i * k * n..(i + 1) * k * n], m, k, n, &mut out[i * m * n..(i + 1) * m * n]);
            }
        }
        self.count_macs((batch * m * k * n) as u64);
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.push(m);
        shape.push(n);
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::Bmm { a, b }, Vec::new()))
    }

    // ---- nonlinearities ----

    /// Numerically stabilized softmax over the last dim. Non-finite input is a
    /// domain error. Logs the input shape for geometry observability.
    pub fn softmax_lastdim(&mut self, a: Value) -> Result<Value> {
        let x = self.value(a);
        let shape = x.shape().to_vec();
        let n = *shape.last().ok_or_else(|| Error::dim("softmax", "rank-0 input".to_string()))?;
        if let Some(bad) = x.data().iter().find(|v| !v.is_finite()) {
            return Err(Error::domain("softmax", format!("non-finite input element {bad}")));
        }
        let rows = x.len() / n;
        let mut out = vec![T::ZERO; x.len()];
        for r in 0..rows {
            let row = &x.data()[r * n..(r + 1) * n];
            let mut mx = row[0];
            for &v in row {
                mx = mx.maximum(v);
            }
            let mut sum = T::ZERO;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - mx).exp();
                out[r * n + j] = e;
                sum = sum + e;
            }
            for j in 0..n {
                out[r * n + j] = out[r * n + j] / sum;
            }
        }
        self.softmax_log.push(shape.clone());
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::Softmax { a }, Vec::new()))
    }

    /// Exact-erf GELU: 0.5 * x * (1 + erf(x / sqrt(2))).
    pub fn gelu(&mut self, a: Value) -> Value {
        let half = T::from_f64(0.5);
        let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
        let out = self.value(a).map(|x| half * x * (T::ONE + (x * inv_sqrt2).erf()));
        self.push(out, Op::Gelu { a }, Vec::new())
    }

    pub fn relu(&mut self, a: Value) -> Value {
        let out = self.value(a).map(|x| x.maximum(T::ZERO));
        self.push(out, Op::Relu { a }, Vec::new())
    }

    // ---- shape ops ----

    /// O(1) metadata reshape.
    pub fn reshape(&mut self, a: Value, shape: &[usize]) -> Result<Value> {
        let t = self.value(a).reshaped(shape)?;
        Ok(self.push(t, Op::Reshape { a }, Vec::new()))
    }

    /// Axis permutation; output axis `ax` takes input axis `perm[ax]`.
    pub fn permute(&mut self, a: Value, perm: &[usize]) -> Result<Value> {
        let x = self.value(a);
        let rank = x.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::dim("permute", format!("invalid permutation {perm:?} for rank {rank}")));
        }
        let out = permute_tensor(x, perm);
        Ok(self.push(out, Op::Permute { a, perm: perm.to_vec() }, Vec::new()))
    }

    /// Concatenation along `axis`; all other dims must match.
    pub fn concat(&mut self, parts: &[Value], axis: usize) -> Result<Value> {
        if parts.is_empty() {
            return Err(Error::dim("concat", "no inputs".to_string()));
        }
        let first = self.value(parts[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(Error::dim("concat", format!("axis {axis} out of range for shape {first:?}")));
        }
        let mut axis_total = 0usize;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != first.len()
                || s.iter().zip(first.iter()).enumerate().any(|(ax, (x, y))| ax != axis && x != y)
            {
                return Err(Error::dim(
                    "concat",
                    format!("shape {s:?} incompatible with {first:?} along axis {axis}"),
                ));
            }
            axis_total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = vec![T::ZERO; shape.iter().product()];
        let mut offset = 0usize;
        for &p in parts {
            let t = self.value(p);
            let len_ax = t.shape()[axis];
            let src = t.data();
            for o in 0..outer {
                let dst_start = (o * axis_total + offset) * inner;
                let src_start = o * len_ax * inner;
                out[dst_start..dst_start + len_ax * inner]
                    .copy_from_slice(&src[src_start..src_start + len_ax * inner]);
            }
            offset += len_ax;
        }
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::Concat { parts: parts.to_vec(), axis }, Vec::new()))
    }

    /// Contiguous sub-range along `axis`.
    pub fn slice(&mut self, a: Value, axis: usize, start: usize, len: usize) -> Result<Value> {
        let x = self.value(a);
        let s = x.shape().to_vec();
        if axis >= s.len() || start + len > s[axis] || len == 0 {
            return Err(Error::dim(
                "slice",
                format!("range {start}..{} invalid for axis {axis} of shape {s:?}", start + len),
            ));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let mut shape = s.clone();
        shape[axis] = len;
        let mut out = vec![T::ZERO; outer * len * inner];
        for o in 0..outer {
            let src_start = (o * s[axis] + start) * inner;
            out[o * len * inner..(o + 1) * len * inner]
                .copy_from_slice(&x.data()[src_start..src_start + len * inner]);
        }
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::Slice { a, axis, start, len }, Vec::new()))
    }

    /// Sum of all elements; result has shape [1].
    pub fn sum_all(&mut self, a: Value) -> Value {
        let mut acc = T::ZERO;
        for &v in self.value(a).data() {
            acc = acc + v;
        }
        self.push(Tensor::scalar(acc), Op::SumAll { a }, Vec::new())
    }

    /// Mean over one axis; the axis is squeezed out.
    pub fn mean_axis(&mut self, a: Value, axis: usize) -> Result<Value> {
        let x = self.value(a);
        let s = x.shape().to_vec();
        if axis >= s.len() || s.len() < 2 {
            return Err(Error::dim("mean_axis", format!("axis {axis} invalid for shape {s:?}")));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let n = s[axis];
        let inv = T::ONE / T::from_f64(n as f64);
        let mut out = vec![T::ZERO; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let base = (o * n + j) * inner;
                for i in 0..inner {
                    out[o * inner + i] = out[o * inner + i] + x.data()[base + i];
                }
            }
        }
        for v in out.iter_mut() {
            *v = *v * inv;
        }
        let mut shape: Vec<usize> = s[..axis].to_vec();
        shape.extend_from_slice(&s[axis + 1..]);
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::MeanAxis { a, axis }, Vec::new()))
    }

    /// Row gather from a [N,C] matrix: out[i,:] = a[idx[i],:].
    pub fn gather_rows(&mut self, a: Value, idx: Arc<Vec<usize>>) -> Result<Value> {
        let x = self.value(a);
        let s = x.shape().to_vec();
        if s.len() != 2 {
            return Err(Error::dim("gather_rows", format!("expected rank-2 source, got {s:?}")));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= s[0]) {
            return Err(Error::dim("gather_rows", format!("index {bad} out of range for {} rows", s[0])));
        }
        let c = s[1];
        let mut out = vec![T::ZERO; idx.len() * c];
        for (i, &r) in idx.iter().enumerate() {
            out[i * c..(i + 1) * c].copy_from_slice(&x.data()[r * c..(r + 1) * c]);
        }
        let t = Tensor::new(&[idx.len(), c], out)?;
        Ok(self.push(t, Op::GatherRows { a, idx }, Vec::new()))
    }

    /// Explicit broadcast: size-1 axes of `a` replicate to `target`; ranks equal.
    pub fn expand(&mut self, a: Value, target: &[usize]) -> Result<Value> {
        let x = self.value(a);
        let s = x.shape().to_vec();
        if s.len() != target.len()
            || s.iter().zip(target.iter()).any(|(&d, &t)| d != t && d != 1)
        {
            return Err(Error::dim("expand", format!("cannot expand {s:?} to {target:?}")));
        }
        let out = expand_tensor(x, target);
        Ok(self.push(out, Op::Expand { a }, Vec::new()))
    }

    // ---- structured ops ----

    /// 2-D cross-correlation, NCHW. Output spatial size floor((H+2p-kh)/stride)+1.
    pub fn conv2d(&mut self, x: Value, w: Value, b: Option<Value>, stride: usize, pad: usize) -> Result<Value> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::dim("conv2d", format!("expected NCHW input and OIHW weight, got {xs:?} and {ws:?}")));
        }
        let (bs, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, cin_w, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if cin != cin_w {
            return Err(Error::dim("conv2d", format!("input channels {cin} != weight channels {cin_w} (input {xs:?}, weight {ws:?})")));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d", "stride must be positive".to_string()));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::dim("conv2d", format!("kernel {kh}x{kw} exceeds padded input {}x{}", h + 2 * pad, wd + 2 * pad)));
        }
        if let Some(bv) = b {
            let bshape = self.value(bv).shape();
            if bshape != [cout] {
                return Err(Error::dim("conv2d", format!("bias shape {bshape:?} != [{cout}]")));
            }
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let mut out = vec![T::ZERO; bs * cout * ho * wo];
        {
            let xd = self.value(x).data();
            let wdat = self.value(w).data();
            let bd = b.map(|bv| self.value(bv).data().to_vec());
            for bi in 0..bs {
                for co in 0..cout {
                    let bias = bd.as_ref().map_or(T::ZERO, |v| v[co]);
                    for oh in 0..ho {
                        for ow in 0..wo {
                            let mut acc = bias;
                            for ci in 0..cin {
                                for ki in 0..kh {
                                    let ih = oh * stride + ki;
                                    if ih < pad || ih - pad >= h {
                                        continue;
                                    }
                                    let ih = ih - pad;
                                    for kj in 0..kw {
                                        let iw = ow * stride + kj;
                                        if iw < pad || iw - pad >= wd {
                                            continue;
                                        }
                                        let iw = iw - pad;
                                        acc = acc
                                            + xd[((bi * cin + ci) * h + ih) * wd + iw]
                                                * wdat[((co * cin + ci) * kh + ki) * kw + kj];
                                    }
                                }
                            }
                            out[((bi * cout + co) * ho + oh) * wo + ow] = acc;
                        }
                    }
                }
            }
        }
        self.count_macs((bs * cout * ho * wo * cin * kh * kw) as u64);
        let t = Tensor::new(&[bs, cout, ho, wo], out)?;
        Ok(self.push(t, Op::Conv2d { x, w, b, stride, pad }, Vec::new()))
    }

    /// Inference batch norm over NCHW channels with stored statistics.
    pub fn batchnorm(
        &mut self,
        x: Value,
        scale: Value,
        shift: Value,
        mean: &Tensor<T>,
        var: &Tensor<T>,
        eps: T,
    ) -> Result<Value> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::dim("batchnorm", format!("expected NCHW input, got {xs:?}")));
        }
        let c = xs[1];
        for (name, s) in [("scale", self.value(scale).shape()), ("shift", self.value(shift).shape())] {
            if s != [c] {
                return Err(Error::dim("batchnorm", format!("{name} shape {s:?} != [{c}]")));
            }
        }
        if mean.shape() != [c] || var.shape() != [c] {
            return Err(Error::dim(
                "batchnorm",
                format!("statistics shapes {:?}/{:?} != [{c}]", mean.shape(), var.shape()),
            ));
        }
        let hw: usize = xs[2] * xs[3];
        let inv: Vec<T> = var.data().iter().map(|&v| T::ONE / (v + eps).sqrt()).collect();
        let mut out = vec![T::ZERO; self.value(x).len()];
        {
            let xd = self.value(x).data();
            let sc = self.value(scale).data();
            let sh = self.value(shift).data();
            for b in 0..xs[0] {
                for ci in 0..c {
                    let a = sc[ci] * inv[ci];
                    let base = (b * c + ci) * hw;
                    for i in 0..hw {
                        out[base + i] = (xd[base + i] - mean.data()[ci]) * a + sh[ci];
                    }
                }
            }
        }
        let t = Tensor::new(&xs, out)?;
        let aux = vec![Tensor::new(&[c], inv)?, mean.clone()];
        Ok(self.push(t, Op::BatchNorm { x, scale, shift }, aux))
    }

    /// Layer norm over the trailing dim with per-feature affine.
    pub fn layernorm_lastdim(&mut self, x: Value, scale: Value, shift: Value, eps: T) -> Result<Value> {
        let xs = self.value(x).shape().to_vec();
        let d = *xs.last().ok_or_else(|| Error::dim("layernorm", "rank-0 input".to_string()))?;
        for (name, s) in [("scale", self.value(scale).shape()), ("shift", self.value(shift).shape())] {
            if s != [d] {
                return Err(Error::dim("layernorm", format!("{name} shape {s:?} != [{d}]")));
            }
        }
        let rows = self.value(x).len() / d;
        let mut out = vec![T::ZERO; self.value(x).len()];
        let mut xhat = vec![T::ZERO; self.value(x).len()];
        let mut inv_std = vec![T::ZERO; rows];
        {
            let xd = self.value(x).data();
            let sc = self.value(scale).data();
            let sh = self.value(shift).data();
            let invn = T::ONE / T::from_f64(d as f64);
            for r in 0..rows {
                let row = &xd[r * d..(r + 1) * d];
                let mut mean = T::ZERO;
                for &v in row {
                    mean = mean + v;
                }
                mean = mean * invn;
                let mut var = T::ZERO;
                for &v in row {
                    let dv = v - mean;
                    var = var + dv * dv;
                }
                var = var * invn;
                let inv = T::ONE / (var + eps).sqrt();
                inv_std[r] = inv;
                for j in 0..d {
                    let h = (row[j] - mean) * inv;
                    xhat[r * d + j] = h;
                    out[r * d + j] = h * sc[j] + sh[j];
                }
            }
        }
        let t = Tensor::new(&xs, out)?;
        let aux = vec![Tensor::new(&xs, xhat)?, Tensor::new(&[rows], inv_std)?];
        Ok(self.push(t, Op::LayerNormLast { x, scale, shift }, aux))
    }

    /// 2D layer norm: per-sample, per-position normalization over NCHW channels.
    pub fn layernorm_2d(&mut self, x: Value, scale: Value, shift: Value, eps: T) -> Result<Value> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::dim("layernorm_2d", format!("expected NCHW input, got {xs:?}")));
        }
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        for (name, s) in [("scale", self.value(scale).shape()), ("shift", self.value(shift).shape())] {
            if s != [c] {
                return Err(Error::dim("layernorm_2d", format!("{name} shape {s:?} != [{c}]")));
            }
        }
        let hw = h * w;
        let mut out = vec![T::ZERO; self.value(x).len()];
        let mut xhat = vec![T::ZERO; self.value(x).len()];
        let mut inv_std = vec![T::ZERO; b * hw];
        {
            let xd = self.value(x).data();
            let sc = self.value(scale).data();
            let sh = self.value(shift).data();
            let invn = T::ONE / T::from_f64(c as f64);
            for bi in 0..b {
                for p in 0..hw {
                    let mut mean = T::ZERO;
                    for ci in 0..c {
                        mean = mean + xd[(bi * c + ci) * hw + p];
                    }
                    mean = mean * invn;
                    let mut var = T::ZERO;
                    for ci in 0..c {
                        let dv = xd[(bi * c + ci) * hw + p] - mean;
                        var = var + dv * dv;
                    }
                    var = var * invn;
                    let inv = T::ONE / (var + eps).sqrt();
                    inv_std[bi * hw + p] = inv;
                    for ci in 0..c {
                        let idx = (bi * c + ci) * hw + p;
                        let hv = (xd[idx] - mean) * inv;
                        xhat[idx] = hv;
                        out[idx] = hv * sc[ci] + sh[ci];
                    }
                }
            }
        }
        let t = Tensor::new(&xs, out)?;
        let aux = vec![Tensor::new(&xs, xhat)?, Tensor::new(&[b * hw], inv_std)?];
        Ok(self.push(t, Op::LayerNorm2d { x, scale, shift }, aux))
    }

    /// Adaptive average pooling on square NCHW maps. Output cell (i,j) averages
    /// the block rows floor(i*H/G)..ceil((i+1)*H/G) (cols alike); blocks overlap
    /// when G does not divide H and reduce to exact (H/G)^2 blocks when it does.
    pub fn adaptive_avgpool(&mut self, x: Value, g: usize) -> Result<Value> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 || xs[2] != xs[3] {
            return Err(Error::dim("adaptive_avgpool", format!("expected square NCHW input, got {xs:?}")));
        }
        if g == 0 {
            return Err(Error::dim("adaptive_avgpool", "output grid must be positive".to_string()));
        }
        let (b, c, h) = (xs[0], xs[1], xs[2]);
        let mut out = vec![T::ZERO; b * c * g * g];
        {
            let xd = self.value(x).data();
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * h * h;
                    for gi in 0..g {
                        let (r0, r1) = pool_bounds(gi, h, g);
                        for gj in 0..g {
                            let (c0, c1) = pool_bounds(gj, h, g);
                            let mut acc = T::ZERO;
                            for r in r0..r1 {
                                for cc in c0..c1 {
                                    acc = acc + xd[base + r * h + cc];
                                }
                            }
                            let cnt = T::from_f64(((r1 - r0) * (c1 - c0)) as f64);
                            out[((bi * c + ci) * g + gi) * g + gj] = acc / cnt;
                        }
                    }
                }
            }
        }
        let t = Tensor::new(&[b, c, g, g], out)?;
        Ok(self.push(t, Op::AdaptiveAvgPool { x, g }, Vec::new()))
    }

    /// Nearest-neighbor upsampling on square NCHW maps: out(i,j) = in(floor(i*G/H), floor(j*G/H)).
    /// Exact block replication when G divides H.
    pub fn upsample_nearest(&mut self, x: Value, h_out: usize) -> Result<Value> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 || xs[2] != xs[3] {
            return Err(Error::dim("upsample_nearest", format!("expected square NCHW input, got {xs:?}")));
        }
        if h_out == 0 {
            return Err(Error::dim("upsample_nearest", "output size must be positive".to_string()));
        }
        let (b, c, g) = (xs[0], xs[1], xs[2]);
        let mut out = vec![T::ZERO; b * c * h_out * h_out];
        {
            let xd = self.value(x).data();
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * g * g;
                    for i in 0..h_out {
                        let si = i * g / h_out;
                        for j in 0..h_out {
                            let sj = j * g / h_out;
                            out[((bi * c + ci) * h_out + i) * h_out + j] = xd[base + si * g + sj];
                        }
                    }
                }
            }
        }
        let t = Tensor::new(&[b, c, h_out, h_out], out)?;
        Ok(self.push(t, Op::UpsampleNearest { x, h: h_out }, Vec::new()))
    }

    /// [B,H,H,d] -> [B*(H/k)^2, k^2, d]; windows in raster order over the window
    /// grid, tokens in raster order within each window.
    pub fn window_partition(&mut self, x: Value, k: usize) -> Result<Value> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 || xs[1] != xs[2] {
            return Err(Error::dim("window_partition", format!("expected [B,H,H,d] input, got {xs:?}")));
        }
        let (b, h, d) = (xs[0], xs[1], xs[3]);
        if k == 0 || h % k != 0 {
            return Err(Error::config(
                "window_size_divides_feature_size",
                format!("window size {k} does not divide feature size {h}"),
            ));
        }
        let nw_side = h / k;
        let t = partition_windows(self.value(x), b, h, d, k, nw_side);
        Ok(self.push(t, Op::WindowPartition { x, k }, Vec::new()))
    }

    /// Exact inverse of [`Graph::window_partition`].
    pub fn window_merge(&mut self, x: Value, h: usize, k: usize) -> Result<Value> {
        let xs = self.value(x).shape().to_vec();
        if k == 0 || h % k != 0 {
            return Err(Error::config(
                "window_size_divides_feature_size",
                format!("window size {k} does not divide feature size {h}"),
            ));
        }
        let nw = (h / k) * (h / k);
        if xs.len() != 3 || xs[1] != k * k || xs[0] % nw != 0 {
            return Err(Error::dim(
                "window_merge",
                format!("shape {xs:?} incompatible with H={h}, k={k} ({nw} windows of {} tokens)", k * k),
            ));
        }
        let b = xs[0] / nw;
        let d = xs[2];
        let t = merge_windows(self.value(x), b, h, d, k, h / k);
        Ok(self.push(t, Op::WindowMerge { x, h, k }, Vec::new()))
    }

    // ---- backward ----

    /// Reverse accumulation from a scalar loss. Leaf gradients from repeated
    /// calls accumulate until [`Graph::reset_grads`].
    pub fn backward(&mut self, loss: Value) -> Result<()> {
        if !self.grad_enabled {
            return Err(Error::Usage("backward() on an inference graph".to_string()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward() needs a scalar loss; got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = self.nodes.len();
        let mut prop: Vec<Option<Tensor<T>>> = vec![None; n];
        prop[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::ONE));

        for i in (0..=loss.0).rev() {
            let Some(g) = prop[i].clone() else { continue };
            self.propagate(i, &g, &mut prop)?;
        }

        if self.grads.len() < n {
            self.grads.resize(n, None);
        }
        for (slot, new) in self.grads.iter_mut().zip(prop.into_iter()) {
            if let Some(t) = new {
                match slot {
                    Some(acc) => add_into(acc, &t),
                    None => *slot = Some(t),
                }
            }
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &Tensor<T>, prop: &mut [Option<Tensor<T>>]) -> Result<()> {
        // Local helper: accumulate into the pending-gradient slot of node `v`.
        fn acc<T: Scalar>(prop: &mut [Option<Tensor<T>>], v: Value, t: Tensor<T>) {
            match &mut prop[v.0] {
                Some(existing) => add_into(existing, &t),
                slot @ None => *slot = Some(t),
            }
        }

        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.value(a).shape()[0], self.value(a).shape()[1]);
                let n2 = self.value(b).shape()[1];
                let mut da = vec![T::ZERO; m * k];
                mm_nt(g.data(), self.value(b).data(), m, n2, k, &mut da);
                let mut db = vec![T::ZERO; k * n2];
                mm_tn(self.value(a).data(), g.data(), m, k, n2, &mut db);
                self.count_macs((2 * m * k * n2) as u64);
                acc(prop, a, Tensor::new(&[m, k], da)?);
                acc(prop, b, Tensor::new(&[k, n2], db)?);
            }
            Op::Bmm { a, b } => {
                let (a, b) = (*a, *b);
                let sa = self.value(a).shape().to_vec();
                let sb = self.value(b).shape().to_vec();
                let (m, k, n2) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
                let batch: usize = sa[..sa.len() - 2].iter().product();
                let mut da = vec![T::ZERO; batch * m * k];
                let mut db = vec![T::ZERO; batch * k * n2];
                {
                    let ad = self.value(a).data();
                    let bd = self.value(b).data();
                    for t in 0..batch {
                        mm_nt(&g.data()[t * m * n2..(t + 1) * m * n2], &bd[t * k * n2..(t + 1) * k * n2], m, n2, k, &mut da[t * m * k..(t + 1) * m * k]);
                        mm_tn(&ad[t * m * k..(t + 1) * m * k], &g.data()[t * m * n2..(t + 1) * m * n2], m, k, n2, &mut db[t * k * n2..(t + 1) * k * n2]);
                    }
                }
                self.count_macs((2 * batch * m * k * n2) as u64);
                acc(prop, a, Tensor::new(&sa, da)?);
                acc(prop, b, Tensor::new(&sb, db)?);
            }
            Op::AddSame { a, b } => {
                let (a, b) = (*a, *b);
                acc(prop, a, g.clone());
                acc(prop, b, g.clone());
            }
            Op::AddBcast { a, b } => {
                let (a, b) = (*a, *b);
                acc(prop, a, g.clone());
                acc(prop, b, reduce_to_trailing(g, self.value(b).shape()));
            }
            Op::SubSame { a, b } => {
                let (a, b) = (*a, *b);
                acc(prop, a, g.clone());
                acc(prop, b, g.map(|v| -v));
            }
            Op::MulSame { a, b } => {
                let (a, b) = (*a, *b);
                let da = zip_map(g, self.value(b), |x, y| x * y);
                let db = zip_map(g, self.value(a), |x, y| x * y);
                acc(prop, a, da);
                acc(prop, b, db);
            }
            Op::MulBcast { a, b } => {
                let (a, b) = (*a, *b);
                let da = bcast_combine(g, self.value(b), |x, y| x * y);
                let gb_full = zip_map(g, self.value(a), |x, y| x * y);
                acc(prop, a, da);
                acc(prop, b, reduce_to_trailing(&gb_full, self.value(b).shape()));
            }
            Op::Scale { a, c } => {
                let (a, c) = (*a, *c);
                acc(prop, a, g.map(|v| v * c));
            }
            Op::Softmax { a } => {
                let a = *a;
                let y = &self.nodes[i].value;
                let d = *y.shape().last().unwrap();
                let rows = y.len() / d;
                let mut dx = vec![T::ZERO; y.len()];
                for r in 0..rows {
                    let yr = &y.data()[r * d..(r + 1) * d];
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let mut dot = T::ZERO;
                    for j in 0..d {
                        dot = dot + yr[j] * gr[j];
                    }
                    for j in 0..d {
                        dx[r * d + j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(prop, a, Tensor::new(y.shape(), dx)?);
            }
            Op::Gelu { a } => {
                let a = *a;
                let x = self.value(a).clone();
                let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
                let inv_sqrt2pi = T::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
                let half = T::from_f64(0.5);
                let dx = zip_map(g, &x, |gv, xv| {
                    let cdf = half * (T::ONE + (xv * inv_sqrt2).erf());
                    let pdf = (-(xv * xv) * half).exp() * inv_sqrt2pi;
                    gv * (cdf + xv * pdf)
                });
                acc(prop, a, dx);
            }
            Op::Relu { a } => {
                let a = *a;
                let x = self.value(a).clone();
                let dx = zip_map(g, &x, |gv, xv| if xv > T::ZERO { gv } else { T::ZERO });
                acc(prop, a, dx);
            }
            Op::Reshape { a } => {
                let a = *a;
                let target = self.value(a).shape().to_vec();
                acc(prop, a, g.reshaped(&target)?);
            }
            Op::Permute { a, perm } => {
                let (a, perm) = (*a, perm.clone());
                let mut inv = vec![0usize; perm.len()];
                for (ax, &p) in perm.iter().enumerate() {
                    inv[p] = ax;
                }
                acc(prop, a, permute_tensor(g, &inv));
            }
            Op::Concat { parts, axis } => {
                let (parts, axis) = (parts.clone(), *axis);
                let gs = g.shape().to_vec();
                let outer: usize = gs[..axis].iter().product();
                let inner: usize = gs[axis + 1..].iter().product();
                let total = gs[axis];
                let mut offset = 0usize;
                for &p in &parts {
                    let len_ax = self.value(p).shape()[axis];
                    let mut part_shape = gs.clone();
                    part_shape[axis] = len_ax;
                    let mut dp = vec![T::ZERO; outer * len_ax * inner];
                    for o in 0..outer {
                        let src_start = (o * total + offset) * inner;
                        dp[o * len_ax * inner..(o + 1) * len_ax * inner]
                            .copy_from_slice(&g.data()[src_start..src_start + len_ax * inner]);
                    }
                    acc(prop, p, Tensor::new(&part_shape, dp)?);
                    offset += len_ax;
                }
            }
            Op::Slice { a, axis, start, len } => {
                let (a, axis, start, len) = (*a, *axis, *start, *len);
                let src_shape = self.value(a).shape().to_vec();
                let outer: usize = src_shape[..axis].iter().product();
                let inner: usize = src_shape[axis + 1..].iter().product();
                let mut dx = vec![T::ZERO; self.value(a).len()];
                for o in 0..outer {
                    let dst_start = (o * src_shape[axis] + start) * inner;
                    dx[dst_start..dst_start + len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                acc(prop, a, Tensor::new(&src_shape, dx)?);
            }
            Op::SumAll { a } => {
                let a = *a;
                let gv = g.item();
                acc(prop, a, Tensor::full(self.value(a).shape(), gv));
            }
            Op::MeanAxis { a, axis } => {
                let (a, axis) = (*a, *axis);
                let src_shape = self.value(a).shape().to_vec();
                let n = src_shape[axis];
                let outer: usize = src_shape[..axis].iter().product();
                let inner: usize = src_shape[axis + 1..].iter().product();
                let inv = T::ONE / T::from_f64(n as f64);
                let mut dx = vec![T::ZERO; self.value(a).len()];
                for o in 0..outer {
                    for j in 0..n {
                        for ii in 0..inner {
                            dx[(o * n + j) * inner + ii] = g.data()[o * inner + ii] * inv;
                        }
                    }
                }
                acc(prop, a, Tensor::new(&src_shape, dx)?);
            }
            Op::GatherRows { a, idx } => {
                let (a, idx) = (*a, Arc::clone(idx));
                let src_shape = self.value(a).shape().to_vec();
                let c = src_shape[1];
                let mut dx = vec![T::ZERO; self.value(a).len()];
                for (i2, &r) in idx.iter().enumerate() {
                    for j in 0..c {
                        dx[r * c + j] = dx[r * c + j] + g.data()[i2 * c + j];
                    }
                }
                acc(prop, a, Tensor::new(&src_shape, dx)?);
            }
            Op::Expand { a } => {
                let a = *a;
                let src_shape = self.value(a).shape().to_vec();
                acc(prop, a, reduce_expanded(g, &src_shape));
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (x, w, b, stride, pad) = (*x, *w, *b, *stride, *pad);
                let xs = self.value(x).shape().to_vec();
                let ws = self.value(w).shape().to_vec();
                let (bs, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let (cout, _, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
                let gs = g.shape().to_vec();
                let (ho, wo) = (gs[2], gs[3]);
                let mut dx = vec![T::ZERO; self.value(x).len()];
                let mut dw = vec![T::ZERO; self.value(w).len()];
                {
                    let xd = self.value(x).data();
                    let wdat = self.value(w).data();
                    for bi in 0..bs {
                        for co in 0..cout {
                            for oh in 0..ho {
                                for ow in 0..wo {
                                    let gv = g.data()[((bi * cout + co) * ho + oh) * wo + ow];
                                    for ci in 0..cin {
                                        for ki in 0..kh {
                                            let ih = oh * stride + ki;
                                            if ih < pad || ih - pad >= h {
                                                continue;
                                            }
                                            let ih = ih - pad;
                                            for kj in 0..kw {
                                                let iw = ow * stride + kj;
                                                if iw < pad || iw - pad >= wd {
                                                    continue;
                                                }
                                                let iw = iw - pad;
                                                let xi = ((bi * cin + ci) * h + ih) * wd + iw;
                                                let wi = ((co * cin + ci) * kh + ki) * kw + kj;
                                                dx[xi] = dx[xi] + wdat[wi] * gv;
                                                dw[wi] = dw[wi] + xd[xi] * gv;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                self.count_macs(2 * (bs * cout * ho * wo * cin * kh * kw) as u64);
                acc(prop, x, Tensor::new(&xs, dx)?);
                acc(prop, w, Tensor::new(&ws, dw)?);
                if let Some(bv) = b {
                    let mut db = vec![T::ZERO; cout];
                    for bi in 0..bs {
                        for co in 0..cout {
                            for p in 0..ho * wo {
                                db[co] = db[co] + g.data()[(bi * cout + co) * ho * wo + p];
                            }
                        }
                    }
                    acc(prop, bv, Tensor::new(&[cout], db)?);
                }
            }
            Op::BatchNorm { x, scale, shift } => {
                let (x, scale, shift) = (*x, *scale, *shift);
                let inv = self.nodes[i].aux[0].clone();
                let mean = self.nodes[i].aux[1].clone();
                let xs = self.value(x).shape().to_vec();
                let (bs, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                let mut dx = vec![T::ZERO; self.value(x).len()];
                let mut dscale = vec![T::ZERO; c];
                let mut dshift = vec![T::ZERO; c];
                {
                    let xd = self.value(x).data();
                    let sc = self.value(scale).data();
                    for bi in 0..bs {
                        for ci in 0..c {
                            let a_coef = sc[ci] * inv.data()[ci];
                            let base = (bi * c + ci) * hw;
                            for p in 0..hw {
                                let gv = g.data()[base + p];
                                dx[base + p] = gv * a_coef;
                                dscale[ci] = dscale[ci] + gv * (xd[base + p] - mean.data()[ci]) * inv.data()[ci];
                                dshift[ci] = dshift[ci] + gv;
                            }
                        }
                    }
                }
                acc(prop, x, Tensor::new(&xs, dx)?);
                acc(prop, scale, Tensor::new(&[c], dscale)?);
                acc(prop, shift, Tensor::new(&[c], dshift)?);
            }
            Op::LayerNormLast { x, scale, shift } => {
                let (x, scale, shift) = (*x, *scale, *shift);
                let xhat = self.nodes[i].aux[0].clone();
                let inv_std = self.nodes[i].aux[1].clone();
                let xs = self.value(x).shape().to_vec();
                let d = *xs.last().unwrap();
                let rows = self.value(x).len() / d;
                let invn = T::ONE / T::from_f64(d as f64);
                let mut dx = vec![T::ZERO; self.value(x).len()];
                let mut dscale = vec![T::ZERO; d];
                let mut dshift = vec![T::ZERO; d];
                {
                    let sc = self.value(scale).data();
                    for r in 0..rows {
                        let hr = &xhat.data()[r * d..(r + 1) * d];
                        let gr = &g.data()[r * d..(r + 1) * d];
                        let mut mean_gh = T::ZERO;
                        let mut mean_ghh = T::ZERO;
                        for j in 0..d {
                            let gh = gr[j] * sc[j];
                            mean_gh = mean_gh + gh;
                            mean_ghh = mean_ghh + gh * hr[j];
                            dscale[j] = dscale[j] + gr[j] * hr[j];
                            dshift[j] = dshift[j] + gr[j];
                        }
                        mean_gh = mean_gh * invn;
                        mean_ghh = mean_ghh * invn;
                        let inv = inv_std.data()[r];
                        for j in 0..d {
                            let gh = gr[j] * sc[j];
                            dx[r * d + j] = inv * (gh - mean_gh - hr[j] * mean_ghh);
                        }
                    }
                }
                acc(prop, x, Tensor::new(&xs, dx)?);
                acc(prop, scale, Tensor::new(&[d], dscale)?);
                acc(prop, shift, Tensor::new(&[d], dshift)?);
            }
            Op::LayerNorm2d { x, scale, shift } => {
                let (x, scale, shift) = (*x, *scale, *shift);
                let xhat = self.nodes[i].aux[0].clone();
                let inv_std = self.nodes[i].aux[1].clone();
                let xs = self.value(x).shape().to_vec();
                let (bs, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                let invn = T::ONE / T::from_f64(c as f64);
                let mut dx = vec![T::ZERO; self.value(x).len()];
                let mut dscale = vec![T::ZERO; c];
                let mut dshift = vec![T::ZERO; c];
                {
                    let sc = self.value(scale).data();
                    for bi in 0..bs {
                        for p in 0..hw {
                            let mut mean_gh = T::ZERO;
                            let mut mean_ghh = T::ZERO;
                            for ci in 0..c {
                                let idx = (bi * c + ci) * hw + p;
                                let gh = g.data()[idx] * sc[ci];
                                mean_gh = mean_gh + gh;
                                mean_ghh = mean_ghh + gh * xhat.data()[idx];
                                dscale[ci] = dscale[ci] + g.data()[idx] * xhat.data()[idx];
                                dshift[ci] = dshift[ci] + g.data()[idx];
                            }
                            mean_gh = mean_gh * invn;
                            mean_ghh = mean_ghh * invn;
                            let inv = inv_std.data()[bi * hw + p];
                            for ci in 0..c {
                                let idx = (bi * c + ci) * hw + p;
                                let gh = g.data()[idx] * sc[ci];
                                dx[idx] = inv * (gh - mean_gh - xhat.data()[idx] * mean_ghh);
                            }
                        }
                    }
                }
                acc(prop, x, Tensor::new(&xs, dx)?);
                acc(prop, scale, Tensor::new(&[c], dscale)?);
                acc(prop, shift, Tensor::new(&[c], dshift)?);
            }
            Op::AdaptiveAvgPool { x, g: grid } => {
                let (x, grid) = (*x, *grid);
                let xs = self.value(x).shape().to_vec();
                let (bs, c, h) = (xs[0], xs[1], xs[2]);
                let mut dx = vec![T::ZERO; self.value(x).len()];
                for bi in 0..bs {
                    for ci in 0..c {
                        let base = (bi * c + ci) * h * h;
                        for gi in 0..grid {
                            let (r0, r1) = pool_bounds(gi, h, grid);
                            for gj in 0..grid {
                                let (c0, c1) = pool_bounds(gj, h, grid);
                                let cnt = T::from_f64(((r1 - r0) * (c1 - c0)) as f64);
                                let gv = g.data()[((bi * c + ci) * grid + gi) * grid + gj] / cnt;
                                for r in r0..r1 {
                                    for cc in c0..c1 {
                                        dx[base + r * h + cc] = dx[base + r * h + cc] + gv;
                                    }
                                }
                            }
                        }
                    }
                }
                acc(prop, x, Tensor::new(&xs, dx)?);
            }
            Op::UpsampleNearest { x, h } => {
                let (x, h_out) = (*x, *h);
                let xs = self.value(x).shape().to_vec();
                let (bs, c, grid) = (xs[0], xs[1], xs[2]);
                let mut dx = vec![T::ZERO; self.value(x).len()];
                for bi in 0..bs {
                    for ci in 0..c {
                        let base = (bi * c + ci) * grid * grid;
                        for i2 in 0..h_out {
                            let si = i2 * grid / h_out;
                            for j in 0..h_out {
                                let sj = j * grid / h_out;
                                dx[base + si * grid + sj] = dx[base + si * grid + sj]
                                    + g.data()[((bi * c + ci) * h_out + i2) * h_out + j];
                            }
                        }
                    }
                }
                acc(prop, x, Tensor::new(&xs, dx)?);
            }
            Op::WindowPartition { x, k } => {
                let (x, k) = (*x, *k);
                let xs = self.value(x).shape().to_vec();
                let (b, h, d) = (xs[0], xs[1], xs[3]);
                acc(prop, x, merge_windows(g, b, h, d, k, h / k));
            }
            Op::WindowMerge { x, h, k } => {
                let (x, h, k) = (*x, *h, *k);
                let xs = self.value(x).shape().to_vec();
                let b = xs[0] / ((h / k) * (h / k));
                let d = xs[2];
                acc(prop, x, partition_windows(g, b, h, d, k, h / k));
            }
        }
        Ok(())
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

// ---- kernels ----

/// C += A*B for row-major A [M,K], B [K,N]; ikj order for contiguous streaming.
fn mm<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + av * brow[j];
            }
        }
    }
}

/// C += A*B^T for A [M,N], B [K,N] -> C [M,K] (dots of contiguous rows).
fn mm_nt<T: Scalar>(a: &[T], b: &[T], m: usize, n: usize, k: usize, out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for kk in 0..k {
            let brow = &b[kk * n..(kk + 1) * n];
            let mut acc = T::ZERO;
            for j in 0..n {
                acc = acc + arow[j] * brow[j];
            }
            out[i * k + kk] = out[i * k + kk] + acc;
        }
    }
}

/// C += A^T*B for A [M,K], B [M,N] -> C [K,N].
fn mm_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let orow = &mut out[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + av * brow[j];
            }
        }
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data: Vec<T> = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("zip_map: shapes validated by caller")
}

/// True iff `small` equals the trailing dims of `big` (strict suffix match).
fn trailing_aligned(big: &[usize], small: &[usize]) -> bool {
    small.len() < big.len() && big[big.len() - small.len()..] == *small
}

/// Combine with `b` broadcast over the leading dims of `a`.
fn bcast_combine<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let bn = b.len();
    let data: Vec<T> = a
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| f(x, b.data()[i % bn]))
        .collect();
    Tensor::new(a.shape(), data).expect("bcast_combine: shapes validated by caller")
}

/// Sum `g` over its leading dims so the result has `target` (trailing) shape.
fn reduce_to_trailing<T: Scalar>(g: &Tensor<T>, target: &[usize]) -> Tensor<T> {
    let n: usize = target.iter().product();
    let mut out = vec![T::ZERO; n];
    for (i, &v) in g.data().iter().enumerate() {
        out[i % n] = out[i % n] + v;
    }
    Tensor::new(target, out).expect("reduce_to_trailing: target shape positive")
}

/// Sum `g` over axes where `src_shape` is 1 (inverse of expand).
fn reduce_expanded<T: Scalar>(g: &Tensor<T>, src_shape: &[usize]) -> Tensor<T> {
    let gs = g.shape();
    let rank = gs.len();
    let g_strides = g.strides();
    let mut src_strides = vec![0usize; rank];
    {
        let mut s = 1usize;
        for ax in (0..rank).rev() {
            src_strides[ax] = if src_shape[ax] == 1 { 0 } else { s };
            s *= src_shape[ax];
        }
    }
    let n_src: usize = src_shape.iter().product();
    let mut out = vec![T::ZERO; n_src];
    for (lin, &v) in g.data().iter().enumerate() {
        let mut rem = lin;
        let mut src = 0usize;
        for ax in 0..rank {
            let q = rem / g_strides[ax];
            rem %= g_strides[ax];
            src += if src_shape[ax] == 1 { 0 } else { q * src_strides[ax] };
        }
        out[src] = out[src] + v;
    }
    Tensor::new(src_shape, out).expect("reduce_expanded: shape positive")
}

fn expand_tensor<T: Scalar>(x: &Tensor<T>, target: &[usize]) -> Tensor<T> {
    let rank = target.len();
    let xs = x.shape();
    let x_strides = x.strides();
    let mut out_strides = vec![1usize; rank];
    for ax in (0..rank.saturating_sub(1)).rev() {
        out_strides[ax] = out_strides[ax + 1] * target[ax + 1];
    }
    let n: usize = target.iter().product();
    let mut out = vec![T::ZERO; n];
    for (lin, slot) in out.iter_mut().enumerate() {
        let mut rem = lin;
        let mut src = 0usize;
        for ax in 0..rank {
            let q = rem / out_strides[ax];
            rem %= out_strides[ax];
            if xs[ax] != 1 {
                src += q * x_strides[ax];
            }
        }
        *slot = x.data()[src];
    }
    Tensor::new(target, out).expect("expand_tensor: target positive")
}

fn permute_tensor<T: Scalar>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let xs = x.shape();
    let rank = xs.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| xs[p]).collect();
    let in_strides = x.strides();
    let mut out_strides = vec![1usize; rank];
    for ax in (0..rank.saturating_sub(1)).rev() {
        out_strides[ax] = out_strides[ax + 1] * out_shape[ax + 1];
    }
    let mut out = vec![T::ZERO; x.len()];
    for (lin, slot) in out.iter_mut().enumerate() {
        let mut rem = lin;
        let mut src = 0usize;
        for ax in 0..rank {
            let q = rem / out_strides[ax];
            rem %= out_strides[ax];
            src += q * in_strides[perm[ax]];
        }
        *slot = x.data()[src];
    }
    Tensor::new(&out_shape, out).expect("permute_tensor: shape positive")
}

/// [B,H,H,d] -> [B*nw^2, k^2, d], raster windows, raster tokens.
fn partition_windows<T: Scalar>(x: &Tensor<T>, b: usize, h: usize, d: usize, k: usize, nw_side: usize) -> Tensor<T> {
    let mut out = vec![T::ZERO; x.len()];
    let xd = x.data();
    for bi in 0..b {
        for wr in 0..nw_side {
            for wc in 0..nw_side {
                let win = (bi * nw_side + wr) * nw_side + wc;
                for r in 0..k {
                    let src_row = ((bi * h) + wr * k + r) * h + wc * k;
                    let dst = (win * k * k + r * k) * d;
                    out[dst..dst + k * d].copy_from_slice(&xd[src_row * d..(src_row + k) * d]);
                }
            }
        }
    }
    Tensor::new(&[b * nw_side * nw_side, k * k, d], out).expect("partition_windows")
}

/// Exact inverse of [`partition_windows`].
fn merge_windows<T: Scalar>(x: &Tensor<T>, b: usize, h: usize, d: usize, k: usize, nw_side: usize) -> Tensor<T> {
    let mut out = vec![T::ZERO; x.len()];
    let xd = x.data();
    for bi in 0..b {
        for wr in 0..nw_side {
            for wc in 0..nw_side {
                let win = (bi * nw_side + wr) * nw_side + wc;
                for r in 0..k {
                    let dst_row = ((bi * h) + wr * k + r) * h + wc * k;
                    let src = (win * k * k + r * k) * d;
                    out[dst_row * d..(dst_row + k) * d].copy_from_slice(&xd[src..src + k * d]);
                }
            }
        }
    }
    Tensor::new(&[b, h, h, d], out).expect("merge_windows")
}

/// In-place elementwise add; shapes must match.
fn add_into<T: Scalar>(acc: &mut Tensor<T>, add: &Tensor<T>) {
    debug_assert_eq!(acc.shape(), add.shape());
    let dst = acc.data_mut();
    for (d, &s) in dst.iter_mut().zip(add.data().iter()) {
        *d = *d + s;
    }
}

/// Adaptive-pool block bounds: rows floor(i*H/G) .. ceil((i+1)*H/G).
pub fn pool_bounds(i: usize, h: usize, g: usize) -> (usize, usize) {
    (i * h / g, ((i + 1) * h).div_ceil(g))
}
