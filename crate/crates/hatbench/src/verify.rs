//! Self-contained property suite: structural roundtrips, numeric oracles,
//! isolation probes, degenerate equivalences and the counter-vs-formula
//! audit, each reported on its own line.

use std::collections::BTreeMap;

use clap::Args as ClapArgs;
use hat_core::archive;
use hat_core::attention::{full_attention, windowed_attention, MhsaParams};
use hat_core::config::parse_config;
use hat_core::flops::{extra_factor_hat, extra_factor_twins, macs_hat_stage};
use hat_core::gradcheck::check_module_gradients;
use hat_core::hat::{hat_stage, windowed_stage, BlockParams, HatStageParams, StageGeometry};
use hat_core::init::Initializer;
use hat_core::nn::Conv2dParams;
use hat_core::tensor::Tensor;
use hat_core::{Graph, Result};

use crate::flops::{row, AttnKind};
use crate::{EXIT_FAIL, EXIT_OK};

#[derive(Debug, ClapArgs)]
pub struct Args {
    /// Keep running properties after the first failure.
    #[arg(long)]
    pub all: bool,
}

type Check = fn() -> std::result::Result<(), String>;

pub struct Property {
    pub name: &'static str,
    pub check: Check,
}

fn err(msg: impl Into<String>) -> std::result::Result<(), String> {
    Err(msg.into())
}

fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
    Initializer::new(seed).weight(shape, 0.5)
}

fn partition_merge_roundtrip() -> std::result::Result<(), String> {
    for (b, h, k, d) in [(1usize, 8usize, 4usize, 3usize), (2, 6, 2, 1), (1, 4, 4, 2)] {
        let t = rand(&[b, h, h, d], 41);
        let mut g = Graph::<f64>::inference();
        let x = g.constant(t.clone());
        let parts = g.window_partition(x, k).map_err(|e| e.to_string())?;
        let back = g.window_merge(parts, h, k).map_err(|e| e.to_string())?;
        if !g.value(back).bit_eq(&t) {
            return err(format!("merge(partition(x)) != x for b={b} h={h} k={k} d={d}"));
        }
    }
    Ok(())
}

fn softmax_normalizes() -> std::result::Result<(), String> {
    let t = rand(&[4, 7], 43);
    let shifted = Tensor::from_vec(&[4, 7], t.data().iter().map(|v| v + 3.25).collect())
        .expect("same shape");
    let mut g = Graph::<f64>::inference();
    let a = g.constant(t);
    let b = g.constant(shifted);
    let sa = g.softmax_lastdim(a).map_err(|e| e.to_string())?;
    let sb = g.softmax_lastdim(b).map_err(|e| e.to_string())?;
    let ya = g.value(sa).data();
    let yb = g.value(sb).data();
    for r in 0..4 {
        let sum: f64 = ya[r * 7..(r + 1) * 7].iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return err(format!("row {r} sums to {sum}"));
        }
    }
    if ya.iter().zip(yb).any(|(x, y)| (x - y).abs() > 1e-12) {
        return err("softmax is not shift-invariant");
    }
    Ok(())
}

fn matmul_matches_loop() -> std::result::Result<(), String> {
    let (m, k, n) = (3, 4, 5);
    let a = rand(&[m, k], 47);
    let b = rand(&[k, n], 48);
    let mut g = Graph::<f64>::inference();
    let va = g.constant(a.clone());
    let vb = g.constant(b.clone());
    let vc = g.matmul(va, vb).map_err(|e| e.to_string())?;
    let got = g.value(vc).data();
    for i in 0..m {
        for j in 0..n {
            let want: f64 = (0..k).map(|t| a.data()[i * k + t] * b.data()[t * n + j]).sum();
            if (got[i * n + j] - want).abs() > 1e-12 {
                return err(format!("matmul[{i},{j}] = {} want {want}", got[i * n + j]));
            }
        }
    }
    Ok(())
}

fn conv_matches_loop() -> std::result::Result<(), String> {
    let (ci, co, h, k, pad) = (2usize, 2usize, 4usize, 3usize, 1usize);
    let mut init = Initializer::new(51);
    let p = Conv2dParams::<f64>::new(ci, co, k, 1, pad, true, &mut init);
    let x = rand(&[1, ci, h, h], 52);
    let mut g = Graph::<f64>::inference();
    let v = g.constant(x.clone());
    let y = p.forward(&mut g, v).map_err(|e| e.to_string())?;
    let got = g.value(y).data();
    let w = p.weight.data();
    let b = p.bias.as_ref().expect("bias enabled").data();
    for o in 0..co {
        for r in 0..h {
            for c in 0..h {
                let mut want = b[o];
                for i in 0..ci {
                    for dr in 0..k {
                        for dc in 0..k {
                            let (sr, sc) = (r + dr, c + dc);
                            if sr < pad || sc < pad || sr - pad >= h || sc - pad >= h {
                                continue;
                            }
                            want += x.data()[(i * h + (sr - pad)) * h + (sc - pad)]
                                * w[((o * ci + i) * k + dr) * k + dc];
                        }
                    }
                }
                let got_v = got[(o * h + r) * h + c];
                if (got_v - want).abs() > 1e-12 {
                    return err(format!("conv[{o},{r},{c}] = {got_v} want {want}"));
                }
            }
        }
    }
    Ok(())
}

fn pooling_extremes() -> std::result::Result<(), String> {
    let t = rand(&[1, 2, 6, 6], 53);
    let mut g = Graph::<f64>::inference();
    let x = g.constant(t.clone());
    let same = g.adaptive_avgpool(x, 6).map_err(|e| e.to_string())?;
    if !g.value(same).bit_eq(&t) {
        return err("full-grid pooling should be the identity");
    }
    let one = g.adaptive_avgpool(x, 1).map_err(|e| e.to_string())?;
    for ch in 0..2 {
        let plane = &t.data()[ch * 36..(ch + 1) * 36];
        let mean = plane.iter().sum::<f64>() / 36.0;
        let got = g.value(one).data()[ch];
        if (got - mean).abs() > 1e-12 {
            return err(format!("1x1 pooling of channel {ch} gave {got}, want {mean}"));
        }
    }
    Ok(())
}

fn upsample_replicates() -> std::result::Result<(), String> {
    let t = rand(&[1, 2, 3, 3], 54);
    let mut g = Graph::<f64>::inference();
    let x = g.constant(t.clone());
    let up = g.upsample_nearest(x, 6).map_err(|e| e.to_string())?;
    let out = g.value(up);
    for ch in 0..2 {
        for r in 0..6 {
            for c in 0..6 {
                let want = t.data()[(ch * 3 + r * 3 / 6) * 3 + c * 3 / 6];
                let got = out.data()[(ch * 6 + r) * 6 + c];
                if got.to_bits() != want.to_bits() {
                    return err(format!("upsample[{ch},{r},{c}] = {got} want {want}"));
                }
            }
        }
    }
    Ok(())
}

fn full_equals_single_window() -> std::result::Result<(), String> {
    let (h, d) = (4usize, 6usize);
    let mut init = Initializer::new(55);
    let p = MhsaParams::<f64>::new(d, 2, true, &mut init).map_err(|e| e.to_string())?;
    let t = rand(&[2, h, h, d], 56);
    let mut g = Graph::<f64>::inference();
    let x = g.constant(t);
    let a = full_attention(&mut g, x, &p, None).map_err(|e| e.to_string())?;
    let b = windowed_attention(&mut g, x, &p, h, None).map_err(|e| e.to_string())?;
    if !g.value(a).bit_eq(g.value(b)) {
        return err("full attention and one-window attention disagree at k = H");
    }
    Ok(())
}

fn carrier_free_equals_windowed() -> std::result::Result<(), String> {
    let geom = StageGeometry::new(8, 4, 0).map_err(|e| e.to_string())?;
    let mut init = Initializer::new(57);
    let p = HatStageParams::<f64>::windowed(4, 2, 2, 16, 1e-5, &mut init).map_err(|e| e.to_string())?;
    for seed in 58..61u64 {
        let t = rand(&[1, 8, 8, 4], seed);
        let mut g = Graph::<f64>::inference();
        let x = g.constant(t.clone());
        let a = hat_stage(&mut g, x, &p, &geom, true).map_err(|e| e.to_string())?;
        let b = windowed_stage(&mut g, x, &p, &geom, true).map_err(|e| e.to_string())?;
        if !g.value(a).bit_eq(g.value(b)) {
            return err(format!("carrier-free stage diverged from the windowed stage (seed {seed})"));
        }
    }
    Ok(())
}

fn window_influence_is_confined() -> std::result::Result<(), String> {
    let geom = StageGeometry::new(8, 4, 0).map_err(|e| e.to_string())?;
    let mut init = Initializer::new(61);
    let p = HatStageParams::<f64>::windowed(4, 2, 1, 16, 1e-5, &mut init).map_err(|e| e.to_string())?;
    let base = rand(&[1, 8, 8, 4], 62);
    let mut bumped = base.clone();
    bumped.data_mut()[0] += 0.75; // row 0, col 0: inside window (0,0)

    let run = |t: &Tensor<f64>| -> std::result::Result<Vec<f64>, String> {
        let mut g = Graph::<f64>::inference();
        let x = g.constant(t.clone());
        let y = windowed_stage(&mut g, x, &p, &geom, false).map_err(|e| e.to_string())?;
        Ok(g.value(y).data().to_vec())
    };
    let (a, b) = (run(&base)?, run(&bumped)?);
    for r in 0..8 {
        for c in 0..8 {
            for ch in 0..4 {
                let i = (r * 8 + c) * 4 + ch;
                let inside = r < 4 && c < 4;
                if !inside && a[i] != b[i] {
                    return err(format!("perturbation leaked to ({r},{c}) without carriers"));
                }
                if inside && r == 0 && c == 0 && ch == 0 && a[i] == b[i] {
                    return err("perturbation had no effect at its own site".to_string());
                }
            }
        }
    }
    Ok(())
}

fn carriers_cross_windows() -> std::result::Result<(), String> {
    let geom = StageGeometry::new(8, 4, 4).map_err(|e| e.to_string())?;
    let mut init = Initializer::new(63);
    let p = HatStageParams::<f64>::hat(4, 2, 1, 16, 1e-5, &mut init).map_err(|e| e.to_string())?;
    let base = rand(&[1, 8, 8, 4], 64);
    let mut bumped = base.clone();
    bumped.data_mut()[0] += 0.75;

    let run = |t: &Tensor<f64>| -> std::result::Result<Vec<f64>, String> {
        let mut g = Graph::<f64>::inference();
        let x = g.constant(t.clone());
        let y = hat_stage(&mut g, x, &p, &geom, false).map_err(|e| e.to_string())?;
        Ok(g.value(y).data().to_vec())
    };
    let (a, b) = (run(&base)?, run(&bumped)?);
    // Farthest window: rows 4..8, cols 4..8.
    let moved = (4..8).any(|r| {
        (4..8).any(|c| (0..4).any(|ch| a[(r * 8 + c) * 4 + ch] != b[(r * 8 + c) * 4 + ch]))
    });
    if !moved {
        return err("one carrier round trip failed to move information across windows");
    }
    Ok(())
}

fn counter_matches_formulas() -> std::result::Result<(), String> {
    for kind in [AttnKind::Full, AttnKind::Window, AttnKind::Hat, AttnKind::Twins] {
        let r = row(kind, 8, 4, 4, 8).map_err(|e| e.to_string())?;
        if r.analytical_macs != r.instrumented_macs {
            return err(format!(
                "{}: analytical {} != instrumented {}",
                r.attn, r.analytical_macs, r.instrumented_macs
            ));
        }
    }
    // Whole stage, carriers on, biases on: still exact in inference mode.
    let geom = StageGeometry::new(8, 4, 4).map_err(|e| e.to_string())?;
    let mut init = Initializer::new(65);
    let p = HatStageParams::<f64>::hat(8, 2, 2, 16, 1e-5, &mut init).map_err(|e| e.to_string())?;
    let mut g = Graph::<f64>::inference();
    let x = g.constant(rand(&[1, 8, 8, 8], 66));
    hat_stage(&mut g, x, &p, &geom, true).map_err(|e| e.to_string())?;
    let want = macs_hat_stage(&geom, 8, 2).total();
    if g.macs() != want {
        return err(format!("stage counter {} != formula {want}", g.macs()));
    }
    Ok(())
}

fn headline_factors() -> std::result::Result<(), String> {
    let hat = extra_factor_hat(32, 8, 4);
    let twins = extra_factor_twins(32, 8);
    if hat != 8.0 {
        return err(format!("carrier factor at the reference point is {hat}, want 8"));
    }
    if twins != 16.0 {
        return err(format!("two-level factor at the reference point is {twins}, want 16"));
    }
    Ok(())
}

fn archive_detects_corruption() -> std::result::Result<(), String> {
    let mut m = BTreeMap::new();
    m.insert("a".to_string(), Tensor::from_vec(&[2], vec![1.0f32, -2.0]).expect("shape"));
    m.insert("b/w".to_string(), Tensor::from_vec(&[2, 2], vec![0.5f32, 0.0, -0.0, 3.5]).expect("shape"));
    let bytes = archive::encode(&m);
    match archive::decode::<f32>(&bytes) {
        Ok(back) if archive::encode(&back) == bytes => {}
        Ok(_) => return err("roundtrip is not byte-exact"),
        Err(e) => return err(format!("clean archive failed to decode: {e}")),
    }
    for pos in 0..bytes.len() {
        let mut dirty = bytes.clone();
        dirty[pos] ^= 0xFF;
        match archive::decode::<f32>(&dirty) {
            Err(_) => {}
            Ok(back) => {
                let same = back.len() == m.len()
                    && back.iter().zip(&m).all(|((kn, kt), (mn, mt))| kn == mn && kt.bit_eq(mt));
                if same {
                    return err(format!("flipping byte {pos} went unnoticed"));
                }
            }
        }
    }
    Ok(())
}

fn block_gradients() -> std::result::Result<(), String> {
    let mut init = Initializer::new(67);
    let mut block = BlockParams::<f64>::new(4, 2, 8, 1e-5, &mut init).map_err(|e| e.to_string())?;
    let input = rand(&[1, 4, 4], 68);
    let coords: Vec<(f64, f64)> = vec![(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0)];
    let report = check_module_gradients(&mut block, 1e-5, |g, m| {
        let x = g.constant(input.clone());
        m.forward(g, x, Some(&coords))
    })
    .map_err(|e| e.to_string())?;
    // Residual-branch scaling keeps some gradients tiny; 1e-4 is the
    // contract the full-stage check also meets.
    if report.max_rel_err > 1e-4 {
        return err(format!("max rel err {:.3e} at {}", report.max_rel_err, report.worst));
    }
    Ok(())
}

fn config_violations_are_named() -> std::result::Result<(), String> {
    let cases = [
        (r#"{"kind":"stage","feature_size":15,"window_size":7,"channels":8}"#, "window_size_divides_feature_size"),
        (r#"{"kind":"stage","feature_size":14,"window_size":7,"channels":8,"carrier_tokens":5}"#, "carrier_tokens_square"),
        (r#"{"kind":"stage","feature_size":14,"window_size":7,"channels":8,"heads":3}"#, "heads_divide_channels"),
    ];
    for (text, want) in cases {
        match parse_config(text) {
            Ok(_) => return err(format!("invalid config accepted: {text}")),
            Err(e) => {
                if e.invariant_name() != Some(want) {
                    return err(format!("expected invariant {want}, got {e}"));
                }
            }
        }
    }
    Ok(())
}

pub fn properties() -> Vec<Property> {
    vec![
        Property { name: "window partition/merge roundtrips bit-exactly", check: partition_merge_roundtrip },
        Property { name: "softmax rows are shift-invariant distributions", check: softmax_normalizes },
        Property { name: "matmul matches the naive triple loop", check: matmul_matches_loop },
        Property { name: "conv2d matches a direct zero-padded loop", check: conv_matches_loop },
        Property { name: "adaptive pooling is identity at full grid and mean at 1x1", check: pooling_extremes },
        Property { name: "nearest upsampling replicates source pixels", check: upsample_replicates },
        Property { name: "full attention equals one-window attention at k = H", check: full_equals_single_window },
        Property { name: "a carrier-free stage equals the windowed stage bit for bit", check: carrier_free_equals_windowed },
        Property { name: "a windowed stage confines influence to the perturbed window", check: window_influence_is_confined },
        Property { name: "one carrier round trip moves information across windows", check: carriers_cross_windows },
        Property { name: "the MAC counter reproduces every closed-form budget", check: counter_matches_formulas },
        Property { name: "headline extra-cost factors are 8 and 16 at H=32 k=8 L=4", check: headline_factors },
        Property { name: "the weight archive roundtrips byte-exactly and flags corruption", check: archive_detects_corruption },
        Property { name: "analytic block gradients match finite differences", check: block_gradients },
        Property { name: "config violations name the broken invariant", check: config_violations_are_named },
    ]
}

pub fn run(args: &Args) -> Result<u8> {
    let props = properties();
    let total = props.len();
    let mut passed = 0usize;
    let mut failed = 0usize;
    for p in props {
        match (p.check)() {
            Ok(()) => {
                println!("ok   {}", p.name);
                passed += 1;
            }
            Err(reason) => {
                println!("FAIL {}: {reason}", p.name);
                failed += 1;
                if !args.all {
                    break;
                }
            }
        }
    }
    println!("verify: {passed}/{total} properties passed");
    Ok(if failed == 0 { EXIT_OK } else { EXIT_FAIL })
}
