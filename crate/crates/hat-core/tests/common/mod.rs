//! Loop-based oracles shared by the integration suites. Everything here is
//! written against the documented layer semantics with plain nested loops and
//! no calls into the graph engine, so agreement is evidence, not tautology.

#![allow(dead_code)]

use hat_core::init::Initializer;
use hat_core::nn::LinearParams;
use hat_core::{Scalar, Tensor};

/// Row softmax with max subtraction.
pub fn softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / z).collect()
}

/// Dense layer oracle: x [rows, d_in] times weight [d_in, d_out] plus bias.
pub fn linear_rows(x: &[f64], rows: usize, p: &LinearParams<f64>) -> Vec<f64> {
    let (di, n_out) = (p.d_in(), p.d_out());
    let w = p.weight.data();
    let mut out = vec![0.0; rows * n_out];
    for r in 0..rows {
        for o in 0..n_out {
            let mut acc = 0.0;
            for i in 0..di {
                acc += x[r * di + i] * w[i * n_out + o];
            }
            if let Some(b) = &p.bias {
                acc += b.data()[o];
            }
            out[r * n_out + o] = acc;
        }
    }
    out
}

/// Multi-head attention oracle over [b, t, d] with optional additive score
/// bias [heads, t, t]. Mirrors the documented contract, not the kernels.
pub fn mhsa_oracle(
    x: &[f64],
    b: usize,
    t: usize,
    d: usize,
    heads: usize,
    q: &LinearParams<f64>,
    k: &LinearParams<f64>,
    v: &LinearParams<f64>,
    out: &LinearParams<f64>,
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut result = vec![0.0; b * t * d];
    for bi in 0..b {
        let rows = &x[bi * t * d..(bi + 1) * t * d];
        let qs = linear_rows(rows, t, q);
        let ks = linear_rows(rows, t, k);
        let vs = linear_rows(rows, t, v);
        let mut ctx = vec![0.0; t * d];
        for h in 0..heads {
            for i in 0..t {
                let mut scores = vec![0.0; t];
                for j in 0..t {
                    let mut dot = 0.0;
                    for c in 0..hd {
                        dot += qs[i * d + h * hd + c] * ks[j * d + h * hd + c];
                    }
                    scores[j] = dot * scale;
                    if let Some(tbl) = bias {
                        scores[j] += tbl[(h * t + i) * t + j];
                    }
                }
                let w = softmax_row(&scores);
                for c in 0..hd {
                    let mut acc = 0.0;
                    for j in 0..t {
                        acc += w[j] * vs[j * d + h * hd + c];
                    }
                    ctx[i * d + h * hd + c] = acc;
                }
            }
        }
        let projected = linear_rows(&ctx, t, out);
        result[bi * t * d..(bi + 1) * t * d].copy_from_slice(&projected);
    }
    result
}

/// Adaptive average pooling oracle on [b, c, h, h] -> [b, c, g, g] with the
/// floor/ceil bin convention: cell i covers [i*h/g, ceil((i+1)*h/g)).
pub fn adaptive_pool_oracle(x: &[f64], b: usize, c: usize, h: usize, g: usize) -> Vec<f64> {
    let bounds = |i: usize| (i * h / g, (i + 1) * h / g + usize::from(((i + 1) * h) % g != 0));
    let mut out = vec![0.0; b * c * g * g];
    for bi in 0..b {
        for ci in 0..c {
            for oy in 0..g {
                for ox in 0..g {
                    let (y0, y1) = bounds(oy);
                    let (x0, x1) = bounds(ox);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            acc += x[((bi * c + ci) * h + y) * h + xx];
                        }
                    }
                    out[((bi * c + ci) * g + oy) * g + ox] =
                        acc / ((y1 - y0) * (x1 - x0)) as f64;
                }
            }
        }
    }
    out
}

/// Nearest-neighbor upsampling oracle on [b, c, g, g] -> [b, c, h, h]:
/// output pixel (y, x) reads input (y*g/h, x*g/h).
pub fn upsample_oracle(x: &[f64], b: usize, c: usize, g: usize, h: usize) -> Vec<f64> {
    let mut out = vec![0.0; b * c * h * h];
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..h {
                    out[((bi * c + ci) * h + y) * h + xx] =
                        x[((bi * c + ci) * g + y * g / h) * g + xx * g / h];
                }
            }
        }
    }
    out
}

/// Same-padding 3x3 convolution oracle via explicit im2col + matmul, a
/// different decomposition from the direct kernel. x: [b, ci, h, h] NCHW,
/// weight [co, ci, 3, 3].
pub fn conv3x3_im2col_oracle(
    x: &[f64],
    b: usize,
    ci: usize,
    h: usize,
    weight: &[f64],
    co: usize,
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let cols = 9 * ci;
    let mut patches = vec![0.0; b * h * h * cols];
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..h {
                let row = ((bi * h + y) * h + xx) * cols;
                for c in 0..ci {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let sy = y as isize + ky as isize - 1;
                            let sx = xx as isize + kx as isize - 1;
                            let v = if sy < 0 || sx < 0 || sy >= h as isize || sx >= h as isize {
                                0.0
                            } else {
                                x[((bi * ci + c) * h + sy as usize) * h + sx as usize]
                            };
                            patches[row + (c * 3 + ky) * 3 + kx] = v;
                        }
                    }
                }
            }
        }
    }
    let mut out = vec![0.0; b * co * h * h];
    for bi in 0..b {
        for o in 0..co {
            for p in 0..h * h {
                let row = (bi * h * h + p) * cols;
                let mut acc = 0.0;
                for c in 0..cols {
                    acc += patches[row + c] * weight[o * cols + c];
                }
                if let Some(bv) = bias {
                    acc += bv[o];
                }
                out[(bi * co + o) * h * h + p] = acc;
            }
        }
    }
    out
}

/// Rearranges whole k x k windows of an NHWC map: output window w holds the
/// content of input window perm[w].
pub fn permute_windows(
    x: &[f64],
    b: usize,
    h: usize,
    k: usize,
    d: usize,
    perm: &[usize],
) -> Vec<f64> {
    let wps = h / k;
    assert_eq!(perm.len(), wps * wps);
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        for (w, &src) in perm.iter().enumerate() {
            let (wr, wc) = (w / wps, w % wps);
            let (sr, sc) = (src / wps, src % wps);
            for y in 0..k {
                for xx in 0..k {
                    for c in 0..d {
                        out[(((bi * h) + wr * k + y) * h + wc * k + xx) * d + c] =
                            x[(((bi * h) + sr * k + y) * h + sc * k + xx) * d + c];
                    }
                }
            }
        }
    }
    out
}

/// Deterministic pseudo-random tensor for test stimulus.
pub fn random_tensor<T: Scalar>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut init = Initializer::new(seed);
    init.weight(shape, 1.0)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---- closed-form parameter counting ----

fn linear_params(i: u64, o: u64, bias: bool) -> u64 {
    i * o + if bias { o } else { 0 }
}

fn conv_params(ci: u64, co: u64, k: u64, bias: bool) -> u64 {
    co * ci * k * k + if bias { co } else { 0 }
}

/// One pre-norm attention block: two layer norms, four biased projections,
/// two layer scales, a 4x MLP, and a 2->hidden->heads bias table MLP.
fn block_params(d: u64, heads: u64, hidden: u64) -> u64 {
    4 * d
        + 4 * linear_params(d, d, true)
        + 2 * d
        + linear_params(d, 4 * d, true)
        + linear_params(4 * d, d, true)
        + linear_params(2, hidden, true)
        + linear_params(hidden, heads, true)
}

fn abs_bias_params(hidden: u64, d: u64) -> u64 {
    linear_params(2, hidden, true) + linear_params(hidden, d, true)
}

fn attn_stage_params(d: u64, heads: u64, depth: u64, hidden: u64, carrier: bool) -> u64 {
    let mut n = depth * block_params(d, heads, hidden) + abs_bias_params(hidden, d);
    if carrier {
        n += depth * block_params(d, heads, hidden);
        n += conv_params(d, d, 3, true);
        n += abs_bias_params(hidden, d);
    }
    n
}

/// Closed-form parameter count of a registry variant at `1/width_div` width,
/// derived from the documented architecture alone.
pub fn model_params_oracle(
    stem_mid: u64,
    channels: [u64; 4],
    depths: [u64; 4],
    heads: [u64; 2],
    width_div: u64,
    input_size: u64,
    window: u64,
    carriers: u64,
    classes: u64,
    bias_hidden: u64,
) -> u64 {
    let mid = stem_mid / width_div;
    let c: Vec<u64> = channels.iter().map(|&v| v / width_div).collect();
    let heads3 = (heads[0] / width_div).max(1);
    let heads4 = (heads[1] / width_div).max(1);
    let carrier_on = |h: u64| carriers > 0 && h / window > 1;

    let stem = conv_params(3, mid, 3, false) + 2 * mid + conv_params(mid, c[0], 3, false) + 2 * c[0];
    let res = |cc: u64| 2 * conv_params(cc, cc, 3, false) + 4 * cc;
    let down = |ci: u64, co: u64| 2 * ci + conv_params(ci, co, 3, false);
    let head = 2 * c[3] + linear_params(c[3], classes, true);

    stem + depths[0] * res(c[0])
        + down(c[0], c[1])
        + depths[1] * res(c[1])
        + down(c[1], c[2])
        + attn_stage_params(c[2], heads3, depths[2], bias_hidden, carrier_on(input_size / 16))
        + down(c[2], c[3])
        + attn_stage_params(c[3], heads4, depths[3], bias_hidden, carrier_on(input_size / 32))
        + head
}
