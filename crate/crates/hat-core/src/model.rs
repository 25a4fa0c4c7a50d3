//! Backbone assembly: conv stem, two residual-conv stages, two attention
//! stages with carrier tokens where the geometry allows them, and a linear
//! classifier head.
//!
//! The registry names four configurations, faster_vit_1 .. faster_vit_4.
//! `width_div` scales every channel count down by an integer factor (heads
//! shrink with it, floored at one) so the full graph structure can run on
//! modest hardware. Carrier-path parameters are only materialized for stages
//! whose geometry actually activates them at the chosen input size.

use std::collections::BTreeMap;

use crate::graph::{Graph, Value};
use crate::hat::{hat_stage, HatStageParams, StageGeometry};
use crate::init::Initializer;
use crate::nn::{join, BnParams, Conv2dParams, LinearParams, LnParams, Visit};
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

pub const DEFAULT_INPUT_SIZE: usize = 224;
pub const DEFAULT_NUM_CLASSES: usize = 1000;
/// Hidden width of the position-bias MLPs in full-size models.
pub const MODEL_BIAS_HIDDEN: usize = 512;
const STAGE_EPS: f64 = 1e-5;

// ---- registry ----

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VariantSpec {
    pub name: &'static str,
    /// Output channels of the first stem convolution.
    pub stem_mid: usize,
    /// Channels entering each of the four stages.
    pub channels: [usize; 4],
    /// Blocks per stage.
    pub depths: [usize; 4],
    /// Attention heads for stages 3 and 4.
    pub heads: [usize; 2],
    pub window_size: usize,
    pub carrier_tokens: usize,
}

pub const VARIANTS: [VariantSpec; 4] = [
    VariantSpec {
        name: "faster_vit_1",
        stem_mid: 32,
        channels: [160, 320, 640, 1280],
        depths: [1, 3, 8, 5],
        heads: [8, 16],
        window_size: 7,
        carrier_tokens: 4,
    },
    VariantSpec {
        name: "faster_vit_2",
        stem_mid: 64,
        channels: [192, 384, 768, 1536],
        depths: [3, 3, 8, 5],
        heads: [8, 16],
        window_size: 7,
        carrier_tokens: 4,
    },
    VariantSpec {
        name: "faster_vit_3",
        stem_mid: 64,
        channels: [256, 512, 1024, 2048],
        depths: [3, 3, 12, 5],
        heads: [8, 16],
        window_size: 7,
        carrier_tokens: 4,
    },
    VariantSpec {
        name: "faster_vit_4",
        stem_mid: 64,
        channels: [392, 768, 1568, 3136],
        depths: [3, 3, 12, 5],
        heads: [16, 32],
        window_size: 7,
        carrier_tokens: 4,
    },
];

/// Reference full-width parameter counts in millions, for display next to the
/// counts of whatever width is actually built. Never asserted.
pub const REFERENCE_PARAMS_M: [(&str, f64); 4] = [
    ("faster_vit_1", 53.4),
    ("faster_vit_2", 75.9),
    ("faster_vit_3", 159.5),
    ("faster_vit_4", 424.6),
];

pub fn variant(name: &str) -> Result<&'static VariantSpec> {
    VARIANTS.iter().find(|v| v.name == name).ok_or_else(|| {
        let known: Vec<&str> = VARIANTS.iter().map(|v| v.name).collect();
        Error::Usage(format!("unknown variant {name:?}; known: {known:?}"))
    })
}

// ---- components ----

/// Two stride-2 conv+BN+ReLU steps: 3 -> mid -> C1, overall stride 4.
#[derive(Debug, Clone)]
pub struct Stem<T: Scalar> {
    pub conv1: Conv2dParams<T>,
    pub bn1: BnParams<T>,
    pub conv2: Conv2dParams<T>,
    pub bn2: BnParams<T>,
}

impl<T: Scalar> Stem<T> {
    fn new(mid: usize, c_out: usize, init: &mut Initializer) -> Self {
        Stem {
            conv1: Conv2dParams::new(3, mid, 3, 2, 1, false, init),
            bn1: BnParams::new(mid, STAGE_EPS),
            conv2: Conv2dParams::new(mid, c_out, 3, 2, 1, false, init),
            bn2: BnParams::new(c_out, STAGE_EPS),
        }
    }

    fn forward(&self, g: &mut Graph<T>, x: Value) -> Result<Value> {
        let x = self.conv1.forward(g, x)?;
        let x = self.bn1.forward(g, x)?;
        let x = g.relu(x);
        let x = self.conv2.forward(g, x)?;
        let x = self.bn2.forward(g, x)?;
        Ok(g.relu(x))
    }
}

impl<T: Scalar> Visit<T> for Stem<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.conv1.visit_params(&join(prefix, "conv1"), f);
        self.bn1.visit_params(&join(prefix, "bn1"), f);
        self.conv2.visit_params(&join(prefix, "conv2"), f);
        self.bn2.visit_params(&join(prefix, "bn2"), f);
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.bn1.visit_buffers(&join(prefix, "bn1"), f);
        self.bn2.visit_buffers(&join(prefix, "bn2"), f);
    }
}

/// Conv residual block: x + BN(Conv(GELU(BN(Conv(x))))).
#[derive(Debug, Clone)]
pub struct ResBlock<T: Scalar> {
    pub conv1: Conv2dParams<T>,
    pub bn1: BnParams<T>,
    pub conv2: Conv2dParams<T>,
    pub bn2: BnParams<T>,
}

impl<T: Scalar> ResBlock<T> {
    fn new(c: usize, init: &mut Initializer) -> Self {
        ResBlock {
            conv1: Conv2dParams::new(c, c, 3, 1, 1, false, init),
            bn1: BnParams::new(c, STAGE_EPS),
            conv2: Conv2dParams::new(c, c, 3, 1, 1, false, init),
            bn2: BnParams::new(c, STAGE_EPS),
        }
    }

    fn forward(&self, g: &mut Graph<T>, x: Value) -> Result<Value> {
        let y = self.conv1.forward(g, x)?;
        let y = self.bn1.forward(g, y)?;
        let y = g.gelu(y);
        let y = self.conv2.forward(g, y)?;
        let y = self.bn2.forward(g, y)?;
        g.add(x, y)
    }
}

impl<T: Scalar> Visit<T> for ResBlock<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.conv1.visit_params(&join(prefix, "conv1"), f);
        self.bn1.visit_params(&join(prefix, "bn1"), f);
        self.conv2.visit_params(&join(prefix, "conv2"), f);
        self.bn2.visit_params(&join(prefix, "bn2"), f);
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.bn1.visit_buffers(&join(prefix, "bn1"), f);
        self.bn2.visit_buffers(&join(prefix, "bn2"), f);
    }
}

/// Between-stage reduction: channel layer norm then stride-2 3x3 conv.
#[derive(Debug, Clone)]
pub struct Downsampler<T: Scalar> {
    pub norm: LnParams<T>,
    pub conv: Conv2dParams<T>,
}

impl<T: Scalar> Downsampler<T> {
    fn new(c_in: usize, c_out: usize, init: &mut Initializer) -> Self {
        Downsampler {
            norm: LnParams::new(c_in, STAGE_EPS),
            conv: Conv2dParams::new(c_in, c_out, 3, 2, 1, false, init),
        }
    }

    fn forward(&self, g: &mut Graph<T>, x: Value) -> Result<Value> {
        let x = self.norm.forward_2d(g, x)?;
        self.conv.forward(g, x)
    }
}

impl<T: Scalar> Visit<T> for Downsampler<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.norm.visit_params(&join(prefix, "norm"), f);
        self.conv.visit_params(&join(prefix, "conv"), f);
    }
}

/// Attention stage plus its fixed geometry.
pub struct AttnStage<T: Scalar> {
    pub params: HatStageParams<T>,
    pub geom: StageGeometry,
}

impl<T: Scalar> std::fmt::Debug for AttnStage<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AttnStage").field("geom", &self.geom).finish()
    }
}

impl<T: Scalar> Visit<T> for AttnStage<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.params.visit_params(prefix, f);
    }
}

#[derive(Debug, Clone)]
pub struct Head<T: Scalar> {
    pub norm: LnParams<T>,
    pub fc: LinearParams<T>,
}

impl<T: Scalar> Visit<T> for Head<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.norm.visit_params(&join(prefix, "norm"), f);
        self.fc.visit_params(&join(prefix, "fc"), f);
    }
}

// ---- model ----

pub struct Model<T: Scalar> {
    pub name: String,
    pub width_div: usize,
    pub input_size: usize,
    pub num_classes: usize,
    pub stem: Stem<T>,
    pub stage1: Vec<ResBlock<T>>,
    pub down12: Downsampler<T>,
    pub stage2: Vec<ResBlock<T>>,
    pub down23: Downsampler<T>,
    pub stage3: AttnStage<T>,
    pub down34: Downsampler<T>,
    pub stage4: AttnStage<T>,
    pub head: Head<T>,
}

impl<T: Scalar> std::fmt::Debug for Model<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("name", &self.name)
            .field("width_div", &self.width_div)
            .field("input_size", &self.input_size)
            .finish()
    }
}

fn divided(label: &str, value: usize, div: usize) -> Result<usize> {
    if div == 0 || value % div != 0 {
        return Err(Error::config(
            "width_divides_channels",
            format!("{label} {value} is not divisible by width divisor {div}"),
        ));
    }
    Ok(value / div)
}

fn attn_stage<T: Scalar>(
    h: usize,
    window: usize,
    carriers: usize,
    d: usize,
    heads: usize,
    depth: usize,
    init: &mut Initializer,
) -> Result<AttnStage<T>> {
    let geom = StageGeometry::new(h, window, carriers)?;
    let params = if geom.ct_active() {
        HatStageParams::hat(d, heads, depth, MODEL_BIAS_HIDDEN, STAGE_EPS, init)?
    } else {
        HatStageParams::windowed(d, heads, depth, MODEL_BIAS_HIDDEN, STAGE_EPS, init)?
    };
    Ok(AttnStage { params, geom })
}

/// Builds a registry variant at `1/width_div` of its published width.
pub fn build_variant<T: Scalar>(
    name: &str,
    width_div: usize,
    input_size: usize,
    num_classes: usize,
    seed: u64,
) -> Result<Model<T>> {
    let spec = variant(name)?;
    if input_size % 32 != 0 {
        return Err(Error::config(
            "window_size_divides_feature_size",
            format!("input size {input_size} is not a multiple of 32"),
        ));
    }
    let mut init = Initializer::new(seed);
    let mid = divided("stem width", spec.stem_mid, width_div)?;
    let mut c = [0usize; 4];
    for (i, slot) in c.iter_mut().enumerate() {
        *slot = divided("stage channels", spec.channels[i], width_div)?;
    }
    let heads3 = (spec.heads[0] / width_div).max(1);
    let heads4 = (spec.heads[1] / width_div).max(1);

    let h3 = input_size / 16;
    let h4 = input_size / 32;

    Ok(Model {
        name: spec.name.to_string(),
        width_div,
        input_size,
        num_classes,
        stem: Stem::new(mid, c[0], &mut init),
        stage1: (0..spec.depths[0]).map(|_| ResBlock::new(c[0], &mut init)).collect(),
        down12: Downsampler::new(c[0], c[1], &mut init),
        stage2: (0..spec.depths[1]).map(|_| ResBlock::new(c[1], &mut init)).collect(),
        down23: Downsampler::new(c[1], c[2], &mut init),
        stage3: attn_stage(h3, spec.window_size, spec.carrier_tokens, c[2], heads3, spec.depths[2], &mut init)?,
        down34: Downsampler::new(c[2], c[3], &mut init),
        stage4: attn_stage(h4, spec.window_size, spec.carrier_tokens, c[3], heads4, spec.depths[3], &mut init)?,
        head: Head {
            norm: LnParams::new(c[3], STAGE_EPS),
            fc: LinearParams::new(c[3], num_classes, true, &mut init),
        },
    })
}

/// Resolution and channel count of a stage output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageTrace {
    pub resolution: usize,
    pub channels: usize,
}

impl<T: Scalar> Model<T> {
    /// x: [B, 3, S, S] -> logits [B, num_classes].
    pub fn forward(&self, g: &mut Graph<T>, x: Value) -> Result<Value> {
        Ok(self.forward_features(g, x)?.0)
    }

    /// Forward pass that also reports each stage's output map shape.
    pub fn forward_features(&self, g: &mut Graph<T>, x: Value) -> Result<(Value, Vec<StageTrace>)> {
        let s = g.value(x).shape().to_vec();
        if s.len() != 4 || s[1] != 3 || s[2] != self.input_size || s[3] != self.input_size {
            return Err(Error::dim(
                "model",
                format!("expected [B,3,{0},{0}] input, got {s:?}", self.input_size),
            ));
        }
        let mut trace = Vec::with_capacity(4);
        let record = |g: &Graph<T>, v: Value, trace: &mut Vec<StageTrace>| {
            let sh = g.value(v).shape();
            trace.push(StageTrace { resolution: sh[2], channels: sh[1] });
        };

        let mut y = self.stem.forward(g, x)?;
        for b in &self.stage1 {
            y = b.forward(g, y)?;
        }
        record(g, y, &mut trace);
        y = self.down12.forward(g, y)?;
        for b in &self.stage2 {
            y = b.forward(g, y)?;
        }
        record(g, y, &mut trace);
        y = self.down23.forward(g, y)?;
        y = self.run_attn(g, y, &self.stage3)?;
        record(g, y, &mut trace);
        y = self.down34.forward(g, y)?;
        y = self.run_attn(g, y, &self.stage4)?;
        record(g, y, &mut trace);

        // Head: global average pool, channel norm, linear classifier.
        let sh = g.value(y).shape().to_vec();
        let seq = g.reshape(y, &[sh[0], sh[1], sh[2] * sh[3]])?;
        let pooled = g.mean_axis(seq, 2)?;
        let normed = self.head.norm.forward(g, pooled)?;
        let logits = self.head.fc.forward(g, normed)?;
        Ok((logits, trace))
    }

    fn run_attn(&self, g: &mut Graph<T>, x: Value, stage: &AttnStage<T>) -> Result<Value> {
        let nhwc = g.permute(x, &[0, 2, 3, 1])?;
        let y = hat_stage(g, nhwc, &stage.params, &stage.geom, true)?;
        g.permute(y, &[0, 3, 1, 2])
    }

    /// Learnable scalars only; batch-norm running statistics excluded.
    pub fn param_count(&mut self) -> u64 {
        Visit::param_count(self)
    }

    /// Parameter count per top-level component, in forward order.
    pub fn param_breakdown(&mut self) -> Vec<(String, u64)> {
        let mut order: Vec<String> = Vec::new();
        let mut counts: BTreeMap<String, u64> = BTreeMap::new();
        self.visit_params("", &mut |name, t| {
            let top = name.split('/').next().unwrap_or(&name).to_string();
            if !counts.contains_key(&top) {
                order.push(top.clone());
            }
            *counts.entry(top).or_insert(0) += t.len() as u64;
        });
        order.into_iter().map(|k| { let n = counts[&k]; (k, n) }).collect()
    }

    /// Every named tensor (parameters and buffers), for archiving.
    pub fn state(&mut self) -> BTreeMap<String, Tensor<T>> {
        let mut out = BTreeMap::new();
        self.visit_params("", &mut |name, t| {
            out.insert(name, t.clone());
        });
        self.visit_buffers("", &mut |name, t| {
            out.insert(name, t.clone());
        });
        out
    }

    /// Replaces every named tensor from `state`. Names and shapes must match
    /// the built structure exactly, in both directions.
    pub fn load_state(&mut self, state: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        let mut used: std::collections::BTreeSet<String> = std::collections::BTreeSet::new();
        let mut error: Option<Error> = None;
        let mut apply = |name: String, slot: &mut Tensor<T>| {
            if error.is_some() {
                return;
            }
            match state.get(&name) {
                None => error = Some(Error::State(format!("missing tensor {name}"))),
                Some(t) if t.shape() != slot.shape() => {
                    error = Some(Error::State(format!(
                        "shape mismatch for {name}: stored {:?}, model {:?}",
                        t.shape(),
                        slot.shape()
                    )));
                }
                Some(t) => {
                    *slot = t.clone();
                    used.insert(name);
                }
            }
        };
        self.visit_params("", &mut apply);
        self.visit_buffers("", &mut apply);
        if let Some(e) = error {
            return Err(e);
        }
        if let Some(extra) = state.keys().find(|k| !used.contains(*k)) {
            return Err(Error::State(format!("unknown tensor {extra} in state")));
        }
        Ok(())
    }
}

impl<T: Scalar> Visit<T> for Model<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        let p = |name: &str| {
            if prefix.is_empty() {
                name.to_string()
            } else {
                format!("{prefix}/{name}")
            }
        };
        self.stem.visit_params(&p("stem"), f);
        for (i, b) in self.stage1.iter_mut().enumerate() {
            b.visit_params(&p(&format!("stage1/block{i}")), f);
        }
        self.down12.visit_params(&p("down12"), f);
        for (i, b) in self.stage2.iter_mut().enumerate() {
            b.visit_params(&p(&format!("stage2/block{i}")), f);
        }
        self.down23.visit_params(&p("down23"), f);
        self.stage3.visit_params(&p("stage3"), f);
        self.down34.visit_params(&p("down34"), f);
        self.stage4.visit_params(&p("stage4"), f);
        self.head.visit_params(&p("head"), f);
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        let p = |name: &str| {
            if prefix.is_empty() {
                name.to_string()
            } else {
                format!("{prefix}/{name}")
            }
        };
        self.stem.visit_buffers(&p("stem"), f);
        for (i, b) in self.stage1.iter_mut().enumerate() {
            b.visit_buffers(&p(&format!("stage1/block{i}")), f);
        }
        for (i, b) in self.stage2.iter_mut().enumerate() {
            b.visit_buffers(&p(&format!("stage2/block{i}")), f);
        }
    }
}
