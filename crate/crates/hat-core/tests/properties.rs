//! Randomized invariants: structural identities that must hold for every
//! shape and every bit pattern, not just the worked examples.

mod common;

use std::collections::BTreeMap;

use common::softmax_row;
use hat_core::archive;
use hat_core::flops::{extra_factor_hat, macs_hat_stage};
use hat_core::hat::StageGeometry;
use hat_core::tensor::Tensor;
use hat_core::Graph;
use proptest::collection::vec;
use proptest::prelude::*;

fn finite_f64() -> impl Strategy<Value = f64> {
    (-1e3f64..1e3).prop_map(|v| if v == 0.0 { 0.0 } else { v })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn window_partition_then_merge_is_identity(
        b in 1usize..3,
        wins in 1usize..4,
        k in 1usize..5,
        d in 1usize..4,
        seed in 0u64..1000,
    ) {
        let h = wins * k;
        let t = common::random_tensor::<f64>(&[b, h, h, d], seed);
        let mut g = Graph::<f64>::inference();
        let x = g.constant(t.clone());
        let parts = g.window_partition(x, k).unwrap();
        prop_assert_eq!(g.value(parts).shape(), &[b * wins * wins, k * k, d]);
        let back = g.window_merge(parts, h, k).unwrap();
        prop_assert!(g.value(back).bit_eq(&t));
    }

    #[test]
    fn softmax_rows_are_distributions_and_shift_invariant(
        rows in 1usize..4,
        cols in 1usize..6,
        data in vec(-30.0f64..30.0, 1..24),
        shift in -5.0f64..5.0,
    ) {
        let mut cells = vec![0.0; rows * cols];
        for (i, c) in cells.iter_mut().enumerate() {
            *c = data[i % data.len()];
        }
        let t = Tensor::from_vec(&[rows, cols], cells.clone()).unwrap();
        let shifted = Tensor::from_vec(&[rows, cols], cells.iter().map(|v| v + shift).collect()).unwrap();

        let mut g = Graph::<f64>::inference();
        let a = g.constant(t);
        let b = g.constant(shifted);
        let sa = g.softmax_lastdim(a).unwrap();
        let sb = g.softmax_lastdim(b).unwrap();
        let ya = g.value(sa).data().to_vec();
        let yb = g.value(sb).data().to_vec();

        for r in 0..rows {
            let row = &ya[r * cols..(r + 1) * cols];
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12, "row {r} sums to {sum}");
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            let oracle = softmax_row(&cells[r * cols..(r + 1) * cols]);
            for (got, want) in row.iter().zip(&oracle) {
                prop_assert!((got - want).abs() < 1e-12);
            }
        }
        for (x, y) in ya.iter().zip(&yb) {
            prop_assert!((x - y).abs() < 1e-12, "shift changed softmax: {x} vs {y}");
        }
    }

    #[test]
    fn matmul_matches_the_naive_triple_loop(
        m in 1usize..5,
        k in 1usize..5,
        n in 1usize..5,
        seed in 0u64..1000,
    ) {
        let a = common::random_tensor::<f64>(&[m, k], seed);
        let b = common::random_tensor::<f64>(&[k, n], seed + 1);
        let mut g = Graph::<f64>::inference();
        let va = g.constant(a.clone());
        let vb = g.constant(b.clone());
        let vc = g.matmul(va, vb).unwrap();
        let got = g.value(vc).data();
        for i in 0..m {
            for j in 0..n {
                let mut want = 0.0;
                for t in 0..k {
                    want += a.data()[i * k + t] * b.data()[t * n + j];
                }
                prop_assert!((got[i * n + j] - want).abs() < 1e-12);
            }
        }
        prop_assert_eq!(g.macs(), (m * k * n) as u64);
    }

    #[test]
    fn archive_roundtrips_arbitrary_bit_patterns(
        entries in vec(("[a-z]{1,8}(/[a-z0-9]{1,6}){0,2}", vec(any::<u32>(), 1..12)), 1..5),
    ) {
        let mut m: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
        for (name, bits) in entries {
            let floats: Vec<f32> = bits.iter().map(|&b| f32::from_bits(b)).collect();
            m.insert(name, Tensor::from_vec(&[floats.len()], floats).unwrap());
        }
        let bytes = archive::encode(&m);
        let back = archive::decode::<f32>(&bytes).unwrap();
        prop_assert_eq!(back.len(), m.len());
        for (name, t) in &m {
            prop_assert!(back[name].bit_eq(t), "entry {name} changed");
        }
        prop_assert_eq!(archive::encode(&back), bytes);
    }

    #[test]
    fn adaptive_pool_bounds_and_extremes(
        c in 1usize..3,
        h in 1usize..9,
        gsel in 0usize..3,
        seed in 0u64..1000,
    ) {
        let g_out = [1, h, h.div_ceil(2)][gsel].max(1);
        let t = common::random_tensor::<f64>(&[1, c, h, h], seed);
        let mut g = Graph::<f64>::inference();
        let x = g.constant(t.clone());
        let pooled = g.adaptive_avgpool(x, g_out).unwrap();
        let out = g.value(pooled).data().to_vec();

        if g_out == h {
            // Identity grid.
            prop_assert!(g.value(pooled).bit_eq(&t));
        }
        if g_out == 1 {
            for ch in 0..c {
                let plane = &t.data()[ch * h * h..(ch + 1) * h * h];
                let mean = plane.iter().sum::<f64>() / (h * h) as f64;
                prop_assert!((out[ch] - mean).abs() < 1e-12);
            }
        }
        // Every pooled value stays inside the channel's range.
        for ch in 0..c {
            let plane = &t.data()[ch * h * h..(ch + 1) * h * h];
            let (lo, hi) = plane.iter().fold((f64::MAX, f64::MIN), |(l, u), &v| (l.min(v), u.max(v)));
            for &v in &out[ch * g_out * g_out..(ch + 1) * g_out * g_out] {
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn upsample_replicates_source_values(
        c in 1usize..3,
        src in 1usize..5,
        mult in 1usize..4,
        seed in 0u64..1000,
    ) {
        let h = src * mult;
        let t = common::random_tensor::<f64>(&[1, c, src, src], seed);
        let mut g = Graph::<f64>::inference();
        let x = g.constant(t.clone());
        let up = g.upsample_nearest(x, h).unwrap();
        let out = g.value(up);
        prop_assert_eq!(out.shape(), &[1, c, h, h]);
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..h {
                    let want = t.data()[ch * src * src + (y * src / h) * src + xx * src / h];
                    let got = out.data()[ch * h * h + y * h + xx];
                    prop_assert_eq!(got.to_bits(), want.to_bits());
                }
            }
        }
    }

    #[test]
    fn elementwise_ops_roundtrip_identities(data in vec(finite_f64(), 1..16)) {
        let n = data.len();
        let t = Tensor::from_vec(&[n], data.clone()).unwrap();
        let mut g = Graph::<f64>::inference();
        let x = g.constant(t);
        let zero = g.constant(Tensor::zeros(&[n]));
        // x + 0 = x, x - x = 0, 1 * x = x.
        let same = g.add(x, zero).unwrap();
        prop_assert_eq!(g.value(same).data(), &data[..]);
        let diff = g.sub(x, x).unwrap();
        prop_assert!(g.value(diff).data().iter().all(|&v| v == 0.0));
        let scaled = g.scale(x, 1.0);
        prop_assert_eq!(g.value(scaled).data(), &data[..]);
        prop_assert_eq!(g.macs(), 0);
    }

    #[test]
    fn carrier_budget_never_undercounts_the_windowed_one(
        wins in 2usize..5,
        k in 2usize..6,
        lsel in 0usize..3,
        d in 1u64..17,
        depth in 1u64..4,
    ) {
        let l = [1usize, 4, 9][lsel];
        prop_assume!(l <= k * k);
        let h = wins * k;
        let with = StageGeometry::new(h, k, l).unwrap();
        let without = StageGeometry::new(h, k, 0).unwrap();
        let a = macs_hat_stage(&with, d, depth).total();
        let b = macs_hat_stage(&without, d, depth).total();
        prop_assert!(a > b, "carriers should add work: {a} vs {b}");
        prop_assert!(extra_factor_hat(h as u64, k as u64, l as u64) > 0.0);
        prop_assert_eq!(extra_factor_hat(h as u64, k as u64, 0), 0.0);
    }
}
