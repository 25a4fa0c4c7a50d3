//! Attention variants over square token maps, plus the learned position-bias
//! tables they share.
//!
//! All variants consume feature maps laid out [B, H, H, d] and return the same
//! shape, so they compose with the window partition ops and with each other.
//! Multiply-accumulate accounting: projections and attention matmuls land on
//! the owning graph's counter; bias-table MLPs are counted only when they run
//! on the tape (gradient mode). In inference mode tables come from a scratch
//! graph and a per-table cache, leaving the main counter comparable to the
//! closed-form formulas.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::graph::{Graph, Value};
use crate::init::Initializer;
use crate::nn::{join, LinearParams, Visit};
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

// ---- multi-head self-attention ----

#[derive(Debug, Clone)]
pub struct MhsaParams<T: Scalar> {
    pub q: LinearParams<T>,
    pub k: LinearParams<T>,
    pub v: LinearParams<T>,
    pub out: LinearParams<T>,
    pub heads: usize,
}

impl<T: Scalar> MhsaParams<T> {
    pub fn new(d: usize, heads: usize, bias: bool, init: &mut Initializer) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::config(
                "heads_divide_channels",
                format!("{heads} heads do not divide {d} channels"),
            ));
        }
        Ok(MhsaParams {
            q: LinearParams::new(d, d, bias, init),
            k: LinearParams::new(d, d, bias, init),
            v: LinearParams::new(d, d, bias, init),
            out: LinearParams::new(d, d, bias, init),
            heads,
        })
    }

    pub fn channels(&self) -> usize {
        self.q.d_in()
    }

    fn split_heads(&self, g: &mut Graph<T>, x: Value) -> Result<Value> {
        let s = g.value(x).shape().to_vec();
        let (b, t, d) = (s[0], s[1], s[2]);
        let r = g.reshape(x, &[b, t, self.heads, d / self.heads])?;
        g.permute(r, &[0, 2, 1, 3])
    }

    /// Scaled dot-product attention with optional additive score bias
    /// [heads, T, T]. x: [B, T, d].
    pub fn forward(&self, g: &mut Graph<T>, x: Value, score_bias: Option<Value>) -> Result<Value> {
        self.attend(g, x, x, score_bias)
    }

    /// Queries from `q_src` [B, Tq, d], keys/values from `kv_src` [B, Tkv, d].
    pub fn forward_cross(&self, g: &mut Graph<T>, q_src: Value, kv_src: Value) -> Result<Value> {
        self.attend(g, q_src, kv_src, None)
    }

    fn attend(&self, g: &mut Graph<T>, q_src: Value, kv_src: Value, score_bias: Option<Value>) -> Result<Value> {
        let qs = g.value(q_src).shape().to_vec();
        let ks = g.value(kv_src).shape().to_vec();
        let d = self.channels();
        if qs.len() != 3 || qs[2] != d || ks.len() != 3 || ks[2] != d || qs[0] != ks[0] {
            return Err(Error::dim(
                "attention",
                format!("expected [B,T,{d}] operands with equal batch, got {qs:?} and {ks:?}"),
            ));
        }
        let (b, tq) = (qs[0], qs[1]);
        let hd = d / self.heads;

        let q = self.q.forward(g, q_src)?;
        let k = self.k.forward(g, kv_src)?;
        let v = self.v.forward(g, kv_src)?;
        let q = self.split_heads(g, q)?;
        let k = self.split_heads(g, k)?;
        let v = self.split_heads(g, v)?;

        let kt = g.permute(k, &[0, 1, 3, 2])?;
        let mut scores = g.bmm(q, kt)?;
        scores = g.scale(scores, T::from_f64(1.0 / (hd as f64).sqrt()));
        if let Some(bias) = score_bias {
            scores = g.add(scores, bias)?;
        }
        let attn = g.softmax_lastdim(scores)?;
        let ctx = g.bmm(attn, v)?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let merged = g.reshape(ctx, &[b, tq, d])?;
        self.out.forward(g, merged)
    }
}

impl<T: Scalar> Visit<T> for MhsaParams<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.q.visit_params(&join(prefix, "q"), f);
        self.k.visit_params(&join(prefix, "k"), f);
        self.v.visit_params(&join(prefix, "v"), f);
        self.out.visit_params(&join(prefix, "out"), f);
    }
}

// ---- learned position biases ----

/// Log-spaced relative-position bias: for each token pair the coordinate
/// delta (dy, dx) maps through sign(v)*log2(1+|v|) and a small MLP to one
/// additive score per head. Deltas are deduplicated before the MLP and the
/// per-pair table is scattered back by index.
pub struct RelBiasMlp<T: Scalar> {
    pub fc1: LinearParams<T>,
    pub fc2: LinearParams<T>,
    cache: Mutex<HashMap<CacheKey, Tensor<T>>>,
    hits: AtomicU64,
}

/// Cache key: the exact bits of the token coordinates and of every MLP
/// parameter, so any geometry change or in-place weight update misses.
type CacheKey = Vec<u64>;

impl<T: Scalar> Clone for RelBiasMlp<T> {
    fn clone(&self) -> Self {
        RelBiasMlp {
            fc1: self.fc1.clone(),
            fc2: self.fc2.clone(),
            cache: Mutex::new(HashMap::new()),
            hits: AtomicU64::new(0),
        }
    }
}

impl<T: Scalar> std::fmt::Debug for RelBiasMlp<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RelBiasMlp")
            .field("hidden", &self.fc1.d_out())
            .field("heads", &self.fc2.d_out())
            .finish()
    }
}

fn log_scaled(v: f64) -> f64 {
    v.signum() * (1.0 + v.abs()).log2()
}

impl<T: Scalar> RelBiasMlp<T> {
    pub fn new(hidden: usize, heads: usize, init: &mut Initializer) -> Self {
        RelBiasMlp {
            fc1: LinearParams::new(2, hidden, true, init),
            fc2: LinearParams::new(hidden, heads, true, init),
            cache: Mutex::new(HashMap::new()),
            hits: AtomicU64::new(0),
        }
    }

    pub fn heads(&self) -> usize {
        self.fc2.d_out()
    }

    pub fn cache_hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    /// Bias table [heads, T, T] for tokens at the given grid coordinates.
    ///
    /// Gradient-mode graphs build the table on the tape so MLP parameters
    /// receive gradients. Inference-mode graphs consult the cache, computing
    /// at most once per (geometry, parameter state).
    pub fn table(&self, g: &mut Graph<T>, coords: &[(f64, f64)]) -> Result<Value> {
        if g.grad_enabled() {
            return self.build_on(g, coords);
        }
        let mut key: CacheKey = coords
            .iter()
            .flat_map(|&(y, x)| [y.to_bits(), x.to_bits()])
            .collect();
        for p in [&self.fc1.weight, &self.fc2.weight] {
            key.extend(p.iter().map(|v| v.bits()));
        }
        for b in [&self.fc1.bias, &self.fc2.bias].into_iter().flatten() {
            key.extend(b.iter().map(|v| v.bits()));
        }
        let mut cache = self.cache.lock().expect("rel bias cache poisoned");
        if let Some(t) = cache.get(&key) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            let t = t.clone();
            drop(cache);
            return Ok(g.constant(t));
        }
        let mut scratch = Graph::inference();
        scratch.set_instrument(false);
        let v = self.build_on(&mut scratch, coords)?;
        let table = scratch.value(v).clone();
        cache.insert(key, table.clone());
        drop(cache);
        Ok(g.constant(table))
    }

    fn build_on(&self, g: &mut Graph<T>, coords: &[(f64, f64)]) -> Result<Value> {
        let t = coords.len();
        let mut unique: Vec<(f64, f64)> = Vec::new();
        let mut index_of: HashMap<(u64, u64), usize> = HashMap::new();
        let mut idx = Vec::with_capacity(t * t);
        for &(yi, xi) in coords {
            for &(yj, xj) in coords {
                let key = ((yi - yj).to_bits(), (xi - xj).to_bits());
                let u = *index_of.entry(key).or_insert_with(|| {
                    unique.push((yi - yj, xi - xj));
                    unique.len() - 1
                });
                idx.push(u);
            }
        }
        let mut delta_data = Vec::with_capacity(unique.len() * 2);
        for &(dy, dx) in &unique {
            delta_data.push(T::from_f64(log_scaled(dy)));
            delta_data.push(T::from_f64(log_scaled(dx)));
        }
        let deltas = g.constant(Tensor::new(&[unique.len(), 2], delta_data)?);
        let h = self.fc1.forward(g, deltas)?;
        let h = g.relu(h);
        let per_delta = self.fc2.forward(g, h)?;
        let gathered = g.gather_rows(per_delta, Arc::new(idx))?;
        let cube = g.reshape(gathered, &[t, t, self.heads()])?;
        g.permute(cube, &[2, 0, 1])
    }
}

impl<T: Scalar> Visit<T> for RelBiasMlp<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.fc1.visit_params(&join(prefix, "fc1"), f);
        self.fc2.visit_params(&join(prefix, "fc2"), f);
    }
}

/// Absolute-position embedding: normalized coordinates in [-1, 1] (no log
/// scale) through an MLP to a per-token channel offset.
pub struct AbsBiasMlp<T: Scalar> {
    pub fc1: LinearParams<T>,
    pub fc2: LinearParams<T>,
    cache: Mutex<HashMap<CacheKey, Tensor<T>>>,
}

impl<T: Scalar> Clone for AbsBiasMlp<T> {
    fn clone(&self) -> Self {
        AbsBiasMlp { fc1: self.fc1.clone(), fc2: self.fc2.clone(), cache: Mutex::new(HashMap::new()) }
    }
}

impl<T: Scalar> std::fmt::Debug for AbsBiasMlp<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AbsBiasMlp")
            .field("hidden", &self.fc1.d_out())
            .field("channels", &self.fc2.d_out())
            .finish()
    }
}

impl<T: Scalar> AbsBiasMlp<T> {
    pub fn new(hidden: usize, d: usize, init: &mut Initializer) -> Self {
        AbsBiasMlp {
            fc1: LinearParams::new(2, hidden, true, init),
            fc2: LinearParams::new(hidden, d, true, init),
            cache: Mutex::new(HashMap::new()),
        }
    }

    /// Embedding [N, d] for raw grid coordinates with the given extent.
    ///
    /// Same caching discipline as [`RelBiasMlp::table`]: on-tape in gradient
    /// mode, cached off-graph in inference mode.
    pub fn table(&self, g: &mut Graph<T>, coords: &[(f64, f64)], extent: f64) -> Result<Value> {
        if g.grad_enabled() {
            return self.build_on(g, coords, extent);
        }
        let mut key: CacheKey = coords
            .iter()
            .flat_map(|&(y, x)| [y.to_bits(), x.to_bits()])
            .collect();
        key.push(extent.to_bits());
        for p in [&self.fc1.weight, &self.fc2.weight] {
            key.extend(p.iter().map(|v| v.bits()));
        }
        for b in [&self.fc1.bias, &self.fc2.bias].into_iter().flatten() {
            key.extend(b.iter().map(|v| v.bits()));
        }
        let mut cache = self.cache.lock().expect("abs bias cache poisoned");
        if let Some(t) = cache.get(&key) {
            let t = t.clone();
            drop(cache);
            return Ok(g.constant(t));
        }
        let mut scratch = Graph::inference();
        scratch.set_instrument(false);
        let v = self.build_on(&mut scratch, coords, extent)?;
        let table = scratch.value(v).clone();
        cache.insert(key, table.clone());
        drop(cache);
        Ok(g.constant(table))
    }

    fn build_on(&self, g: &mut Graph<T>, coords: &[(f64, f64)], extent: f64) -> Result<Value> {
        let mut data = Vec::with_capacity(coords.len() * 2);
        for &(y, x) in coords {
            data.push(T::from_f64(normalize_coord(y, extent)));
            data.push(T::from_f64(normalize_coord(x, extent)));
        }
        let input = g.constant(Tensor::new(&[coords.len(), 2], data)?);
        let h = self.fc1.forward(g, input)?;
        let h = g.relu(h);
        self.fc2.forward(g, h)
    }
}

/// Linear map of [0, extent-1] onto [-1, 1]; a single point maps to 0.
pub fn normalize_coord(v: f64, extent: f64) -> f64 {
    if extent <= 1.0 {
        0.0
    } else {
        2.0 * v / (extent - 1.0) - 1.0
    }
}

impl<T: Scalar> Visit<T> for AbsBiasMlp<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.fc1.visit_params(&join(prefix, "fc1"), f);
        self.fc2.visit_params(&join(prefix, "fc2"), f);
    }
}

// ---- attention variants over [B, H, H, d] maps ----

/// Every token attends to every token.
pub fn full_attention<T: Scalar>(
    g: &mut Graph<T>,
    x: Value,
    p: &MhsaParams<T>,
    score_bias: Option<Value>,
) -> Result<Value> {
    let s = g.value(x).shape().to_vec();
    if s.len() != 4 || s[1] != s[2] {
        return Err(Error::dim("full_attention", format!("expected [B,H,H,d] input, got {s:?}")));
    }
    let (b, h, d) = (s[0], s[1], s[3]);
    let seq = g.reshape(x, &[b, h * h, d])?;
    let y = p.forward(g, seq, score_bias)?;
    g.reshape(y, &[b, h, h, d])
}

/// Attention confined to non-overlapping k x k windows.
pub fn windowed_attention<T: Scalar>(
    g: &mut Graph<T>,
    x: Value,
    p: &MhsaParams<T>,
    k: usize,
    score_bias: Option<Value>,
) -> Result<Value> {
    let s = g.value(x).shape().to_vec();
    if s.len() != 4 || s[1] != s[2] {
        return Err(Error::dim("windowed_attention", format!("expected [B,H,H,d] input, got {s:?}")));
    }
    let h = s[1];
    let windows = g.window_partition(x, k)?;
    let y = p.forward(g, windows, score_bias)?;
    g.window_merge(y, h, k)
}

/// Two-level global attention: a windowed (local) pass followed by a global
/// pass whose keys and values come from a spatially subsampled copy of the
/// map. Keys/values are projected once per sample, not once per window.
#[derive(Debug, Clone)]
pub struct TwinsParams<T: Scalar> {
    pub local: MhsaParams<T>,
    pub global: MhsaParams<T>,
    pub window_size: usize,
    pub sub_ratio: usize,
}

impl<T: Scalar> TwinsParams<T> {
    /// `sub_ratio` defaults to the window size when 0.
    pub fn new(d: usize, heads: usize, k: usize, sub_ratio: usize, init: &mut Initializer) -> Result<Self> {
        let s = if sub_ratio == 0 { k } else { sub_ratio };
        Ok(TwinsParams {
            local: MhsaParams::new(d, heads, true, init)?,
            global: MhsaParams::new(d, heads, true, init)?,
            window_size: k,
            sub_ratio: s,
        })
    }
}

impl<T: Scalar> Visit<T> for TwinsParams<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.local.visit_params(&join(prefix, "local"), f);
        self.global.visit_params(&join(prefix, "global"), f);
    }
}

pub fn twins_attention<T: Scalar>(g: &mut Graph<T>, x: Value, p: &TwinsParams<T>) -> Result<Value> {
    let s = g.value(x).shape().to_vec();
    if s.len() != 4 || s[1] != s[2] {
        return Err(Error::dim("twins_attention", format!("expected [B,H,H,d] input, got {s:?}")));
    }
    let (b, h, d) = (s[0], s[1], s[3]);
    if h % p.sub_ratio != 0 {
        return Err(Error::dim(
            "twins_attention",
            format!("sub_ratio {} does not divide feature size {h}", p.sub_ratio),
        ));
    }
    let local = windowed_attention(g, x, &p.local, p.window_size, None)?;

    let grid = h / p.sub_ratio;
    let nchw = g.permute(local, &[0, 3, 1, 2])?;
    let pooled = g.adaptive_avgpool(nchw, grid)?;
    let nhwc = g.permute(pooled, &[0, 2, 3, 1])?;
    let kv = g.reshape(nhwc, &[b, grid * grid, d])?;

    let seq = g.reshape(local, &[b, h * h, d])?;
    let y = p.global.forward_cross(g, seq, kv)?;
    g.reshape(y, &[b, h, h, d])
}
