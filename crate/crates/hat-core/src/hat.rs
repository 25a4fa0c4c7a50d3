//! Carrier-token stages.
//!
//! A stage interleaves two attention scopes over a square feature map:
//! local attention inside k x k windows, and a compact set of carrier tokens
//! (L per window, a square grid) that attend to each other globally and ride
//! along inside each window's local attention. The carrier summary is pooled
//! from each window at stage entry and scattered back over the map at stage
//! exit, so windows exchange information without any token-level global pass.
//!
//! With zero carrier tokens, or with a single window, the carrier path
//! vanishes and the stage follows the windowed-only code path exactly; the
//! windowed variant is the same machinery with the carrier path never taken.

use crate::attention::{AbsBiasMlp, MhsaParams, RelBiasMlp};
use crate::graph::{pool_bounds, Graph, Value};
use crate::init::Initializer;
use crate::nn::{join, Conv2dParams, LnParams, MlpParams, Visit};
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

pub const LAYER_SCALE_INIT: f64 = 1e-5;
pub const MLP_RATIO: usize = 4;

// ---- geometry ----

/// Static shape facts of one stage: feature size H, window size k, carrier
/// tokens per window L.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageGeometry {
    pub feature_size: usize,
    pub window_size: usize,
    pub carrier_tokens: usize,
}

impl StageGeometry {
    pub fn new(feature_size: usize, window_size: usize, carrier_tokens: usize) -> Result<Self> {
        let g = StageGeometry { feature_size, window_size, carrier_tokens };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let (h, k, l) = (self.feature_size, self.window_size, self.carrier_tokens);
        if k == 0 || h == 0 || h % k != 0 {
            return Err(Error::config(
                "window_size_divides_feature_size",
                format!("window size {k} does not divide feature size {h}"),
            ));
        }
        if l > 0 {
            let side = (l as f64).sqrt().round() as usize;
            if side * side != l {
                return Err(Error::config(
                    "carrier_tokens_square",
                    format!("{l} carrier tokens do not form a square grid"),
                ));
            }
        }
        if l > k * k {
            return Err(Error::config(
                "carrier_tokens_at_most_window_tokens",
                format!("{l} carrier tokens exceed {} window tokens", k * k),
            ));
        }
        Ok(())
    }

    pub fn windows_per_side(&self) -> usize {
        self.feature_size / self.window_size
    }

    pub fn n_windows(&self) -> usize {
        self.windows_per_side() * self.windows_per_side()
    }

    /// Side of the per-window carrier grid (sqrt of L).
    pub fn ct_side(&self) -> usize {
        (self.carrier_tokens as f64).sqrt().round() as usize
    }

    /// Side of the global carrier grid across all windows.
    pub fn ct_grid_side(&self) -> usize {
        self.windows_per_side() * self.ct_side()
    }

    /// Carrier tokens participate only when present and when there is more
    /// than one window to bridge.
    pub fn ct_active(&self) -> bool {
        self.carrier_tokens > 0 && self.n_windows() > 1
    }

    pub fn window_tokens(&self) -> usize {
        self.window_size * self.window_size
    }

    /// Tokens per window inside local attention (window tokens + riders).
    pub fn mixed_tokens(&self) -> usize {
        self.window_tokens() + if self.ct_active() { self.carrier_tokens } else { 0 }
    }

    pub fn total_carrier_tokens(&self) -> usize {
        if self.ct_active() {
            self.n_windows() * self.carrier_tokens
        } else {
            0
        }
    }
}

// ---- token coordinates ----

/// Local coordinates of the k x k window tokens, raster order.
pub fn window_token_coords(k: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(k * k);
    for r in 0..k {
        for c in 0..k {
            out.push((r as f64, c as f64));
        }
    }
    out
}

/// Local coordinates of each carrier token: the center of the window block it
/// summarizes (pooled blocks may overlap when the side does not divide k).
pub fn ct_local_coords(k: usize, ct_side: usize) -> Vec<(f64, f64)> {
    let center = |i: usize| {
        let (lo, hi) = pool_bounds(i, k, ct_side);
        (lo + hi - 1) as f64 / 2.0
    };
    let mut out = Vec::with_capacity(ct_side * ct_side);
    for r in 0..ct_side {
        for c in 0..ct_side {
            out.push((center(r), center(c)));
        }
    }
    out
}

/// Window tokens followed by their carrier tokens, in local-attention order.
pub fn mixed_token_coords(k: usize, ct_side: usize) -> Vec<(f64, f64)> {
    let mut out = window_token_coords(k);
    out.extend(ct_local_coords(k, ct_side));
    out
}

/// Global integer coordinates of all carrier tokens, window-major: outer
/// raster over windows, inner raster over each window's carrier grid.
pub fn ct_global_coords(windows_per_side: usize, ct_side: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(windows_per_side * windows_per_side * ct_side * ct_side);
    for wr in 0..windows_per_side {
        for wc in 0..windows_per_side {
            for r in 0..ct_side {
                for c in 0..ct_side {
                    out.push(((wr * ct_side + r) as f64, (wc * ct_side + c) as f64));
                }
            }
        }
    }
    out
}

/// Global coordinates of all window tokens, window-major to match the
/// partitioned layout.
pub fn window_global_coords(h: usize, k: usize) -> Vec<(f64, f64)> {
    let nw = h / k;
    let mut out = Vec::with_capacity(h * h);
    for wr in 0..nw {
        for wc in 0..nw {
            for r in 0..k {
                for c in 0..k {
                    out.push(((wr * k + r) as f64, (wc * k + c) as f64));
                }
            }
        }
    }
    out
}

// ---- parameters ----

/// Pre-norm residual block: x + g1*Attn(LN(x)) then x + g2*MLP(LN(x)), with
/// per-channel layer scales and a relative-position bias table for the
/// attention scores.
pub struct BlockParams<T: Scalar> {
    pub norm1: LnParams<T>,
    pub attn: MhsaParams<T>,
    pub gamma1: Tensor<T>,
    pub norm2: LnParams<T>,
    pub mlp: MlpParams<T>,
    pub gamma2: Tensor<T>,
    pub rel_bias: RelBiasMlp<T>,
}

impl<T: Scalar> Clone for BlockParams<T> {
    fn clone(&self) -> Self {
        BlockParams {
            norm1: self.norm1.clone(),
            attn: self.attn.clone(),
            gamma1: self.gamma1.clone(),
            norm2: self.norm2.clone(),
            mlp: self.mlp.clone(),
            gamma2: self.gamma2.clone(),
            rel_bias: self.rel_bias.clone(),
        }
    }
}

impl<T: Scalar> std::fmt::Debug for BlockParams<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BlockParams")
            .field("channels", &self.attn.channels())
            .field("heads", &self.attn.heads)
            .finish()
    }
}

impl<T: Scalar> BlockParams<T> {
    pub fn new(d: usize, heads: usize, bias_hidden: usize, eps: f64, init: &mut Initializer) -> Result<Self> {
        Ok(BlockParams {
            norm1: LnParams::new(d, eps),
            attn: MhsaParams::new(d, heads, true, init)?,
            gamma1: Tensor::full(&[d], T::from_f64(LAYER_SCALE_INIT)),
            norm2: LnParams::new(d, eps),
            mlp: MlpParams::new(d, MLP_RATIO, true, init),
            gamma2: Tensor::full(&[d], T::from_f64(LAYER_SCALE_INIT)),
            rel_bias: RelBiasMlp::new(bias_hidden, heads, init),
        })
    }

    /// tokens: [N, T, d]; `rel_coords` enables the score bias table.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        tokens: Value,
        rel_coords: Option<&[(f64, f64)]>,
    ) -> Result<Value> {
        let bias = match rel_coords {
            Some(coords) => Some(self.rel_bias.table(g, coords)?),
            None => None,
        };
        let n1 = self.norm1.forward(g, tokens)?;
        let a = self.attn.forward(g, n1, bias)?;
        let g1 = g.param(&self.gamma1);
        let a = g.mul(a, g1)?;
        let x = g.add(tokens, a)?;

        let n2 = self.norm2.forward(g, x)?;
        let m = self.mlp.forward(g, n2)?;
        let g2 = g.param(&self.gamma2);
        let m = g.mul(m, g2)?;
        g.add(x, m)
    }
}

impl<T: Scalar> Visit<T> for BlockParams<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.norm1.visit_params(&join(prefix, "norm1"), f);
        self.attn.visit_params(&join(prefix, "attn"), f);
        f(join(prefix, "gamma1"), &mut self.gamma1);
        self.norm2.visit_params(&join(prefix, "norm2"), f);
        self.mlp.visit_params(&join(prefix, "mlp"), f);
        f(join(prefix, "gamma2"), &mut self.gamma2);
        self.rel_bias.visit_params(&join(prefix, "rel_bias"), f);
    }
}

/// Full parameter set of one stage. Carrier-path fields are `None`/empty for
/// a windowed-only stage; [`plug_hat_into`] upgrades such a stage in place of
/// retraining by adding fresh carrier parameters around the shared window path.
pub struct HatStageParams<T: Scalar> {
    pub win_blocks: Vec<BlockParams<T>>,
    pub ct_blocks: Vec<BlockParams<T>>,
    pub ct_conv: Option<Conv2dParams<T>>,
    pub abs_win: AbsBiasMlp<T>,
    pub abs_ct: Option<AbsBiasMlp<T>>,
}

impl<T: Scalar> Clone for HatStageParams<T> {
    fn clone(&self) -> Self {
        HatStageParams {
            win_blocks: self.win_blocks.clone(),
            ct_blocks: self.ct_blocks.clone(),
            ct_conv: self.ct_conv.clone(),
            abs_win: self.abs_win.clone(),
            abs_ct: self.abs_ct.clone(),
        }
    }
}

impl<T: Scalar> std::fmt::Debug for HatStageParams<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HatStageParams")
            .field("depth", &self.win_blocks.len())
            .field("carrier_path", &self.ct_conv.is_some())
            .finish()
    }
}

impl<T: Scalar> HatStageParams<T> {
    pub fn windowed(
        d: usize,
        heads: usize,
        depth: usize,
        bias_hidden: usize,
        eps: f64,
        init: &mut Initializer,
    ) -> Result<Self> {
        if depth == 0 {
            return Err(Error::config("positive_depth", "stage depth must be at least 1".to_string()));
        }
        let win_blocks = (0..depth)
            .map(|_| BlockParams::new(d, heads, bias_hidden, eps, init))
            .collect::<Result<Vec<_>>>()?;
        Ok(HatStageParams {
            win_blocks,
            ct_blocks: Vec::new(),
            ct_conv: None,
            abs_win: AbsBiasMlp::new(bias_hidden, d, init),
            abs_ct: None,
        })
    }

    pub fn hat(
        d: usize,
        heads: usize,
        depth: usize,
        bias_hidden: usize,
        eps: f64,
        init: &mut Initializer,
    ) -> Result<Self> {
        let base = Self::windowed(d, heads, depth, bias_hidden, eps, init)?;
        plug_hat_into(&base, bias_hidden, eps, init)
    }

    pub fn channels(&self) -> usize {
        self.win_blocks[0].attn.channels()
    }

    pub fn depth(&self) -> usize {
        self.win_blocks.len()
    }

    pub fn has_carrier_path(&self) -> bool {
        self.ct_conv.is_some()
    }
}

impl<T: Scalar> Visit<T> for HatStageParams<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (i, b) in self.win_blocks.iter_mut().enumerate() {
            b.visit_params(&join(prefix, &format!("win{i}")), f);
        }
        for (i, b) in self.ct_blocks.iter_mut().enumerate() {
            b.visit_params(&join(prefix, &format!("ct{i}")), f);
        }
        if let Some(c) = &mut self.ct_conv {
            c.visit_params(&join(prefix, "ct_conv"), f);
        }
        self.abs_win.visit_params(&join(prefix, "abs_win"), f);
        if let Some(a) = &mut self.abs_ct {
            a.visit_params(&join(prefix, "abs_ct"), f);
        }
    }
}

/// Upgrades a windowed-only stage to a carrier-token stage. Window-path
/// tensors are shared with the original (clones of the same buffers), so the
/// upgrade adds only carrier-path parameters; running the result at L = 0
/// reproduces the original stage exactly.
pub fn plug_hat_into<T: Scalar>(
    base: &HatStageParams<T>,
    bias_hidden: usize,
    eps: f64,
    init: &mut Initializer,
) -> Result<HatStageParams<T>> {
    let d = base.channels();
    let heads = base.win_blocks[0].attn.heads;
    let ct_blocks = (0..base.depth())
        .map(|_| BlockParams::new(d, heads, bias_hidden, eps, init))
        .collect::<Result<Vec<_>>>()?;
    Ok(HatStageParams {
        win_blocks: base.win_blocks.clone(),
        ct_blocks,
        ct_conv: Some(Conv2dParams::new(d, d, 3, 1, 1, true, init)),
        abs_win: base.abs_win.clone(),
        abs_ct: Some(AbsBiasMlp::new(bias_hidden, d, init)),
    })
}

// ---- stage ops ----

/// Pools each window to its carrier tokens: a 3x3 same-channel convolution
/// applied per window (zero padding stops at window borders) followed by
/// adaptive averaging down to the carrier grid. [B,H,H,d] -> [B*n_w, L, d].
pub fn ct_init<T: Scalar>(
    g: &mut Graph<T>,
    x: Value,
    conv: &Conv2dParams<T>,
    geom: &StageGeometry,
) -> Result<Value> {
    let (k, side) = (geom.window_size, geom.ct_side());
    let d = g.value(x).shape()[3];
    let windows = g.window_partition(x, k)?;
    let bw = g.value(windows).shape()[0];
    let spatial = g.reshape(windows, &[bw, k, k, d])?;
    let nchw = g.permute(spatial, &[0, 3, 1, 2])?;
    let conved = conv.forward(g, nchw)?;
    let pooled = g.adaptive_avgpool(conved, side)?;
    let nhwc = g.permute(pooled, &[0, 2, 3, 1])?;
    g.reshape(nhwc, &[bw, side * side, d])
}

/// One global self-attention + MLP block over all carrier tokens.
/// ct: [B*n_w, L, d] in window-major order.
pub fn ct_attention_block<T: Scalar>(
    g: &mut Graph<T>,
    ct: Value,
    block: &BlockParams<T>,
    geom: &StageGeometry,
    use_bias: bool,
) -> Result<Value> {
    let s = g.value(ct).shape().to_vec();
    let (bw, l, d) = (s[0], s[1], s[2]);
    let nw = geom.n_windows();
    let b = bw / nw;
    let flat = g.reshape(ct, &[b, nw * l, d])?;
    let coords;
    let rel = if use_bias {
        coords = ct_global_coords(geom.windows_per_side(), geom.ct_side());
        Some(coords.as_slice())
    } else {
        None
    };
    let y = block.forward(g, flat, rel)?;
    g.reshape(y, &[bw, l, d])
}

/// One local block: window tokens and their carrier tokens attend jointly
/// inside the window, then split back apart. With no carrier tokens this is a
/// plain windowed block.
pub fn hat_window_block<T: Scalar>(
    g: &mut Graph<T>,
    windows: Value,
    ct: Option<Value>,
    block: &BlockParams<T>,
    geom: &StageGeometry,
    use_bias: bool,
) -> Result<(Value, Option<Value>)> {
    let k = geom.window_size;
    let kk = k * k;
    match ct {
        Some(ct) => {
            let l = g.value(ct).shape()[1];
            let joint = g.concat(&[windows, ct], 1)?;
            let coords;
            let rel = if use_bias {
                coords = mixed_token_coords(k, geom.ct_side());
                Some(coords.as_slice())
            } else {
                None
            };
            let y = block.forward(g, joint, rel)?;
            let w = g.slice(y, 1, 0, kk)?;
            let c = g.slice(y, 1, kk, l)?;
            Ok((w, Some(c)))
        }
        None => {
            let coords;
            let rel = if use_bias {
                coords = window_token_coords(k);
                Some(coords.as_slice())
            } else {
                None
            };
            let y = block.forward(g, windows, rel)?;
            Ok((y, None))
        }
    }
}

/// Stage exit: merge windows back to the map and add the upsampled carrier
/// grid on top. windows: [B*n_w, k*k, d]; ct: [B*n_w, L, d].
pub fn global_propagation<T: Scalar>(
    g: &mut Graph<T>,
    windows: Value,
    ct: Value,
    geom: &StageGeometry,
) -> Result<Value> {
    let (h, k) = (geom.feature_size, geom.window_size);
    let merged = g.window_merge(windows, h, k)?;
    let grid = g.window_merge(ct, geom.ct_grid_side(), geom.ct_side())?;
    let nchw = g.permute(grid, &[0, 3, 1, 2])?;
    let up = g.upsample_nearest(nchw, h)?;
    let nhwc = g.permute(up, &[0, 2, 3, 1])?;
    g.add(merged, nhwc)
}

fn stage_core<T: Scalar>(
    g: &mut Graph<T>,
    x: Value,
    p: &HatStageParams<T>,
    geom: &StageGeometry,
    use_bias: bool,
    with_ct: bool,
) -> Result<Value> {
    geom.validate()?;
    let s = g.value(x).shape().to_vec();
    let (h, k) = (geom.feature_size, geom.window_size);
    // Zero-depth stages (pure pool/propagate composition) take d from the input.
    let d = if p.win_blocks.is_empty() { *s.last().unwrap_or(&0) } else { p.channels() };
    if s.len() != 4 || s[1] != h || s[2] != h || s[3] != d {
        return Err(Error::dim(
            "stage",
            format!("expected [B,{h},{h},{d}] input, got {s:?}"),
        ));
    }
    let active = with_ct && geom.ct_active();
    if active {
        if !p.has_carrier_path() {
            return Err(Error::State(format!(
                "geometry requests {} carrier tokens but the stage has no carrier parameters",
                geom.carrier_tokens
            )));
        }
        if p.ct_blocks.len() != p.win_blocks.len() {
            return Err(Error::State(format!(
                "carrier depth {} != window depth {}",
                p.ct_blocks.len(),
                p.win_blocks.len()
            )));
        }
    }
    let b = s[0];
    let nw = geom.n_windows();
    let kk = k * k;

    let mut windows = g.window_partition(x, k)?;
    if use_bias {
        let coords = window_global_coords(h, k);
        let table = p.abs_win.table(g, &coords, h as f64)?;
        let table = g.reshape(table, &[nw, kk, d])?;
        let grouped = g.reshape(windows, &[b, nw, kk, d])?;
        let biased = g.add(grouped, table)?;
        windows = g.reshape(biased, &[b * nw, kk, d])?;
    }

    let mut ct = if active {
        let conv = p.ct_conv.as_ref().expect("carrier path checked above");
        let mut ct = ct_init(g, x, conv, geom)?;
        if use_bias {
            let abs = p.abs_ct.as_ref().expect("carrier path checked above");
            let coords = ct_global_coords(geom.windows_per_side(), geom.ct_side());
            let table = abs.table(g, &coords, geom.ct_grid_side() as f64)?;
            let l = geom.carrier_tokens;
            let table = g.reshape(table, &[nw * l, d])?;
            let grouped = g.reshape(ct, &[b, nw * l, d])?;
            let biased = g.add(grouped, table)?;
            ct = g.reshape(biased, &[b * nw, l, d])?;
        }
        Some(ct)
    } else {
        None
    };

    for (i, win_block) in p.win_blocks.iter().enumerate() {
        if let Some(c) = ct {
            let c = ct_attention_block(g, c, &p.ct_blocks[i], geom, use_bias)?;
            ct = Some(c);
        }
        let (w, c) = hat_window_block(g, windows, ct, win_block, geom, use_bias)?;
        windows = w;
        ct = c;
    }

    match ct {
        Some(c) => global_propagation(g, windows, c, geom),
        None => g.window_merge(windows, h, k),
    }
}

/// Carrier-token stage over [B,H,H,d]. Falls back to the windowed-only path
/// when the geometry deactivates carrier tokens (L = 0 or a single window).
pub fn hat_stage<T: Scalar>(
    g: &mut Graph<T>,
    x: Value,
    p: &HatStageParams<T>,
    geom: &StageGeometry,
    use_bias: bool,
) -> Result<Value> {
    stage_core(g, x, p, geom, use_bias, true)
}

/// Windowed-only stage: identical to [`hat_stage`] with the carrier path
/// disabled, whatever the geometry says.
pub fn windowed_stage<T: Scalar>(
    g: &mut Graph<T>,
    x: Value,
    p: &HatStageParams<T>,
    geom: &StageGeometry,
    use_bias: bool,
) -> Result<Value> {
    stage_core(g, x, p, geom, use_bias, false)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom(h: usize, k: usize, l: usize) -> StageGeometry {
        StageGeometry::new(h, k, l).unwrap()
    }

    #[test]
    fn geometry_invariants_are_named() {
        let err = StageGeometry::new(15, 4, 4).unwrap_err();
        assert_eq!(err.invariant_name(), Some("window_size_divides_feature_size"));
        let err = StageGeometry::new(16, 4, 3).unwrap_err();
        assert_eq!(err.invariant_name(), Some("carrier_tokens_square"));
        let err = StageGeometry::new(16, 2, 9).unwrap_err();
        assert_eq!(err.invariant_name(), Some("carrier_tokens_at_most_window_tokens"));
    }

    #[test]
    fn geometry_counts() {
        let g = geom(14, 7, 4);
        assert_eq!(g.n_windows(), 4);
        assert_eq!(g.ct_side(), 2);
        assert_eq!(g.ct_grid_side(), 4);
        assert_eq!(g.mixed_tokens(), 53);
        assert_eq!(g.total_carrier_tokens(), 16);
        assert!(g.ct_active());
    }

    #[test]
    fn single_window_deactivates_carriers() {
        let g = geom(7, 7, 4);
        assert!(!g.ct_active());
        assert_eq!(g.mixed_tokens(), 49);
        assert_eq!(g.total_carrier_tokens(), 0);
    }

    #[test]
    fn ct_centers_for_window7_grid2() {
        // Pooled halves of a 7-wide window overlap in the middle; their
        // centers sit at 1.5 and 4.5.
        let coords = ct_local_coords(7, 2);
        assert_eq!(coords, vec![(1.5, 1.5), (1.5, 4.5), (4.5, 1.5), (4.5, 4.5)]);
    }

    #[test]
    fn ct_global_coords_cover_grid_window_major() {
        let coords = ct_global_coords(2, 2);
        assert_eq!(coords.len(), 16);
        // First window's four tokens occupy the top-left 2x2 of the 4x4 grid.
        assert_eq!(&coords[..4], &[(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0)]);
        // Second window starts at column 2.
        assert_eq!(coords[4], (0.0, 2.0));
        let mut sorted = coords.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let full: Vec<(f64, f64)> =
            (0..4).flat_map(|r| (0..4).map(move |c| (r as f64, c as f64))).collect();
        assert_eq!(sorted, full);
    }

    #[test]
    fn stage_preserves_shape_and_reports_attention_geometry() {
        let geom = geom(14, 7, 4);
        let mut init = Initializer::new(11);
        let p = HatStageParams::<f64>::hat(8, 2, 1, 16, 1e-5, &mut init).unwrap();
        let mut g = Graph::inference();
        let x = g.constant(Tensor::from_fn(&[1, 14, 14, 8], |ix| {
            ((ix[1] * 17 + ix[2] * 5 + ix[3]) % 23) as f64 * 0.03
        }));
        let y = hat_stage(&mut g, x, &p, &geom, true).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 14, 14, 8]);
        // One carrier pass over all 16 carriers, one mixed pass over 49+4
        // tokens in each of the 4 windows.
        assert_eq!(g.softmax_shapes(), &[vec![1, 2, 16, 16], vec![4, 2, 53, 53]]);
    }

    #[test]
    fn windowed_stage_never_touches_carrier_params() {
        let geom = geom(8, 4, 4);
        let mut init = Initializer::new(12);
        let p = HatStageParams::<f64>::hat(8, 2, 2, 16, 1e-5, &mut init).unwrap();
        let mut g = Graph::inference();
        let x = g.constant(Tensor::full(&[1, 8, 8, 8], 0.1));
        windowed_stage(&mut g, x, &p, &geom, false).unwrap();
        // Two window blocks over 16-token windows, nothing else.
        assert_eq!(g.softmax_shapes(), &[vec![4, 2, 16, 16], vec![4, 2, 16, 16]]);
    }

    #[test]
    fn zero_carriers_is_bit_identical_to_windowed() {
        let geom0 = geom(8, 4, 0);
        let mut init = Initializer::new(13);
        let base = HatStageParams::<f64>::windowed(8, 2, 2, 16, 1e-5, &mut init).unwrap();
        let upgraded = plug_hat_into(&base, 16, 1e-5, &mut init).unwrap();
        let x = Tensor::from_fn(&[2, 8, 8, 8], |ix| ((ix[0] + ix[1] * 3 + ix[2] * 7 + ix[3]) % 11) as f64 * 0.1 - 0.5);

        let mut g1 = Graph::inference();
        let x1 = g1.constant(x.clone());
        let y1 = windowed_stage(&mut g1, x1, &base, &geom0, true).unwrap();

        let mut g2 = Graph::inference();
        let x2 = g2.constant(x);
        let y2 = hat_stage(&mut g2, x2, &upgraded, &geom0, true).unwrap();

        assert!(g1.value(y1).bit_eq(g2.value(y2)));
    }

    #[test]
    fn plug_hat_into_shares_window_buffers() {
        let mut init = Initializer::new(14);
        let base = HatStageParams::<f64>::windowed(8, 2, 1, 16, 1e-5, &mut init).unwrap();
        let upgraded = plug_hat_into(&base, 16, 1e-5, &mut init).unwrap();
        assert_eq!(
            base.win_blocks[0].attn.q.weight.buffer_id(),
            upgraded.win_blocks[0].attn.q.weight.buffer_id()
        );
        assert!(upgraded.has_carrier_path());
        assert!(!base.has_carrier_path());
    }

    #[test]
    fn carrier_tokens_bridge_windows() {
        // Perturbing one window moves outputs in another window through the
        // carrier path, but not through the windowed-only path.
        let geom4 = geom(8, 4, 4);
        let mut init = Initializer::new(15);
        let p = HatStageParams::<f64>::hat(4, 1, 1, 8, 1e-5, &mut init).unwrap();
        let x0 = Tensor::from_fn(&[1, 8, 8, 4], |ix| ((ix[1] * 13 + ix[2] * 3 + ix[3]) % 7) as f64 * 0.1);
        let mut bumped = x0.clone();
        // Element inside window (0,0).
        bumped.data_mut()[0] += 1.0;

        let run = |hat: bool, x: &Tensor<f64>| {
            let mut g = Graph::inference();
            let xv = g.constant(x.clone());
            let y = if hat {
                hat_stage(&mut g, xv, &p, &geom4, false).unwrap()
            } else {
                windowed_stage(&mut g, xv, &p, &geom4, false).unwrap()
            };
            g.value(y).clone()
        };

        // Bottom-right window region of the output map.
        let far_region = |t: &Tensor<f64>| {
            let mut out = Vec::new();
            for r in 4..8 {
                for c in 4..8 {
                    for ch in 0..4 {
                        out.push(t.data()[((r * 8) + c) * 4 + ch]);
                    }
                }
            }
            out
        };

        let hat_diff: f64 = far_region(&run(true, &x0))
            .iter()
            .zip(far_region(&run(true, &bumped)))
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(hat_diff > 1e-9, "carrier path should leak across windows, diff {hat_diff}");

        let win_diff: f64 = far_region(&run(false, &x0))
            .iter()
            .zip(far_region(&run(false, &bumped)))
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert_eq!(win_diff, 0.0, "windowed path must confine influence");
    }

    #[test]
    fn stage_rejects_mismatched_input() {
        let geom4 = geom(8, 4, 4);
        let mut init = Initializer::new(16);
        let p = HatStageParams::<f64>::hat(4, 1, 1, 8, 1e-5, &mut init).unwrap();
        let mut g = Graph::inference();
        let x = g.constant(Tensor::zeros(&[1, 8, 8, 5]));
        assert!(hat_stage(&mut g, x, &p, &geom4, false).is_err());
    }
}
