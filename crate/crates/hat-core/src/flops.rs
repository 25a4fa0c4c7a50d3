//! Closed-form multiply-accumulate counts for the attention variants, per
//! sample, mirroring exactly what the graph counter records for the
//! corresponding ops run with position biases disabled. Pooling, upsampling,
//! norms, softmax and activations cost no MACs in either accounting.
//!
//! Two families live here:
//!
//! - exact per-op budgets ([`macs_full_attention`] .. [`macs_twins_attention`],
//!   [`macs_hat_stage`]) that the instrumented counter must reproduce;
//! - headline scaling estimates ([`extra_factor_hat`], [`extra_factor_twins`])
//!   that charge only the attention-score work added on top of a windowed
//!   pass, normalized by H^2 * d. The hat estimate counts carriers as extra
//!   keys for window tokens (L per query) plus the carrier-carrier pass;
//!   the two-level estimate counts the global pass over the subsampled map.

use crate::hat::StageGeometry;

/// Full self-attention over H^2 tokens: 4 projections plus score and value
/// matmuls against all tokens.
pub fn macs_full_attention(h: u64, d: u64) -> u64 {
    4 * h * h * d * d + 2 * h.pow(4) * d
}

/// Windowed self-attention: same projection cost, score/value work confined
/// to k^2 tokens per window.
pub fn macs_windowed_attention(h: u64, k: u64, d: u64) -> u64 {
    4 * h * h * d * d + 2 * k * k * h * h * d
}

/// Local-then-global pair: a windowed pass followed by a global pass whose
/// keys/values come from the map subsampled by `s` (projected once).
pub fn macs_twins_attention(h: u64, k: u64, s: u64, d: u64) -> u64 {
    let p = (h / s) * (h / s);
    let local = macs_windowed_attention(h, k, d);
    let global = 2 * h * h * d * d + 2 * p * d * d + 2 * h * h * p * d;
    local + global
}

/// Itemized budget for one carrier-token stage (batch 1, biases off).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HatStageMacs {
    pub window_attention: u64,
    pub window_projections: u64,
    pub window_mlp: u64,
    pub ct_attention: u64,
    pub ct_projections: u64,
    pub ct_mlp: u64,
    pub ct_conv: u64,
}

impl HatStageMacs {
    /// Attention score/value matmuls plus q/k/v/out projections; at L = 0 this
    /// equals [`macs_windowed_attention`] times depth.
    pub fn attention_plus_projections(&self) -> u64 {
        self.window_attention + self.window_projections + self.ct_attention + self.ct_projections
    }

    pub fn total(&self) -> u64 {
        self.attention_plus_projections() + self.window_mlp + self.ct_mlp + self.ct_conv
    }
}

/// Exact per-sample budget of `depth` carrier-token blocks, matching the
/// instrumented stage forward term by term.
pub fn macs_hat_stage(geom: &StageGeometry, d: u64, depth: u64) -> HatStageMacs {
    let nw = geom.n_windows() as u64;
    let tw = geom.mixed_tokens() as u64;
    let h = geom.feature_size as u64;
    if geom.ct_active() {
        let tc = geom.total_carrier_tokens() as u64;
        HatStageMacs {
            window_attention: depth * nw * 2 * tw * tw * d,
            window_projections: depth * nw * 4 * tw * d * d,
            window_mlp: depth * nw * 8 * tw * d * d,
            ct_attention: depth * 2 * tc * tc * d,
            ct_projections: depth * 4 * tc * d * d,
            ct_mlp: depth * 8 * tc * d * d,
            ct_conv: 9 * h * h * d * d,
        }
    } else {
        HatStageMacs {
            window_attention: depth * nw * 2 * tw * tw * d,
            window_projections: depth * nw * 4 * tw * d * d,
            window_mlp: depth * nw * 8 * tw * d * d,
            ct_attention: 0,
            ct_projections: 0,
            ct_mlp: 0,
            ct_conv: 0,
        }
    }
}

/// Attention-score work a carrier-token pass adds over a windowed pass, per
/// H^2 * d: L extra keys per window token, plus the carrier-carrier pass of
/// (H^2 L / k^2)^2 * d.
pub fn extra_factor_hat(h: u64, k: u64, l: u64) -> f64 {
    let h = h as f64;
    let k = k as f64;
    let l = l as f64;
    l + h * h * l * l / (k * k * k * k)
}

/// Score work the global subsampled pass adds over a windowed pass, per
/// H^2 * d, at the default subsample ratio s = k.
pub fn extra_factor_twins(h: u64, k: u64) -> f64 {
    (h as f64 / k as f64).powi(2)
}

/// Attention score + value MACs only (no projections), for scaling studies.
pub fn hat_attention_only_macs(geom: &StageGeometry, d: u64) -> u64 {
    let nw = geom.n_windows() as u64;
    let tw = geom.mixed_tokens() as u64;
    let tc = geom.total_carrier_tokens() as u64;
    nw * 2 * tw * tw * d + 2 * tc * tc * d
}

pub fn full_attention_only_macs(h: u64, d: u64) -> u64 {
    2 * h.pow(4) * d
}

/// Least-squares slope of ln(y) against ln(x).
pub fn fit_loglog_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in xs.iter().zip(ys.iter()) {
        num += (x - mx) * (y - my);
        den += (x - mx) * (x - mx);
    }
    num / den
}

/// (token count H^2, attention-only MACs) per feature size, for slope fits.
pub fn hat_scaling_points(hs: &[usize], k: usize, l: usize, d: u64) -> crate::Result<Vec<(f64, f64)>> {
    hs.iter()
        .map(|&h| {
            let geom = StageGeometry::new(h, k, l)?;
            Ok(((h * h) as f64, hat_attention_only_macs(&geom, d) as f64))
        })
        .collect()
}

pub fn full_scaling_points(hs: &[usize], d: u64) -> Vec<(f64, f64)> {
    hs.iter()
        .map(|&h| ((h * h) as f64, full_attention_only_macs(h as u64, d) as f64))
        .collect()
}
