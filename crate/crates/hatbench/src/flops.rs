//! MAC reports per attention operator: the closed-form budget next to the
//! count instrumented on a live forward, plus the headline cost factors.
//!
//! Every row covers the bare attention machinery at (H, k, L, d): score and
//! value matmuls plus q/k/v/out projections. The carrier-token row also
//! includes carrier construction (the 3x3 conv), since no carrier attention
//! exists without it; none of the rows include block MLPs or norms.
//! `ratio_to_full` divides the row's budget by full attention's at the same
//! (H, d); `extra_factor` is the headline score-work estimate added over a
//! windowed pass per H^2 d (0 for the two baselines).

use clap::{Args as ClapArgs, ValueEnum};
use hat_core::attention::{
    full_attention, twins_attention, windowed_attention, MhsaParams, TwinsParams,
};
use hat_core::flops::{
    extra_factor_hat, extra_factor_twins, macs_full_attention, macs_hat_stage,
    macs_twins_attention, macs_windowed_attention,
};
use hat_core::hat::{ct_init, StageGeometry};
use hat_core::init::Initializer;
use hat_core::nn::Conv2dParams;
use hat_core::{Graph, Result};
use serde::Serialize;

use crate::report::{csv_float, Format, SCHEMA_VERSION};
use crate::EXIT_OK;

pub const CSV_HEADER: &str =
    "attn,H,k,d,L,analytical_macs,instrumented_macs,ratio_to_full,extra_factor";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AttnKind {
    Full,
    Window,
    Hat,
    Twins,
}

impl AttnKind {
    pub fn name(self) -> &'static str {
        match self {
            AttnKind::Full => "full",
            AttnKind::Window => "window",
            AttnKind::Hat => "hat",
            AttnKind::Twins => "twins",
        }
    }
}

#[derive(Debug, ClapArgs)]
pub struct Args {
    /// Attention operator to account for.
    #[arg(long, value_enum)]
    pub attn: AttnKind,

    /// Feature map side length.
    #[arg(long = "H", default_value_t = 56, value_name = "H")]
    pub h: usize,

    /// Window side length.
    #[arg(long, default_value_t = 7)]
    pub k: usize,

    /// Channels.
    #[arg(long, default_value_t = 64)]
    pub d: usize,

    /// Carrier tokens per window (carrier rows only).
    #[arg(long = "L", default_value_t = 4, value_name = "L")]
    pub l: usize,

    /// Comma-separated feature sizes; replaces --H with one row per size.
    #[arg(long, value_delimiter = ',', value_name = "H1,H2,...")]
    pub sweep: Vec<usize>,

    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
}

#[derive(Debug, Clone, Serialize)]
pub struct Row {
    pub attn: &'static str,
    #[serde(rename = "H")]
    pub h: usize,
    pub k: usize,
    pub d: usize,
    #[serde(rename = "L")]
    pub l: usize,
    pub analytical_macs: u64,
    pub instrumented_macs: u64,
    pub ratio_to_full: f64,
    pub extra_factor: f64,
}

impl Row {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.attn,
            self.h,
            self.k,
            self.d,
            self.l,
            self.analytical_macs,
            self.instrumented_macs,
            csv_float(self.ratio_to_full),
            csv_float(self.extra_factor),
        )
    }
}

fn analytical(kind: AttnKind, h: usize, k: usize, l: usize, d: usize) -> Result<u64> {
    let (h64, k64, d64) = (h as u64, k as u64, d as u64);
    Ok(match kind {
        AttnKind::Full => macs_full_attention(h64, d64),
        AttnKind::Window => macs_windowed_attention(h64, k64, d64),
        AttnKind::Twins => macs_twins_attention(h64, k64, k64, d64),
        AttnKind::Hat => {
            let geom = StageGeometry::new(h, k, l)?;
            let m = macs_hat_stage(&geom, d64, 1);
            m.attention_plus_projections() + m.ct_conv
        }
    })
}

/// Runs the operator once on an inference graph and reads the MAC counter.
/// Parameter values are irrelevant to the count; batch is 1.
fn instrumented(kind: AttnKind, h: usize, k: usize, l: usize, d: usize) -> Result<u64> {
    let mut init = Initializer::new(0);
    let mut g = Graph::<f32>::inference();
    let x = g.constant(init.weight(&[1, h, h, d], 0.1));
    match kind {
        AttnKind::Full => {
            let p = MhsaParams::new(d, 1, false, &mut init)?;
            full_attention(&mut g, x, &p, None)?;
        }
        AttnKind::Window => {
            let p = MhsaParams::new(d, 1, false, &mut init)?;
            windowed_attention(&mut g, x, &p, k, None)?;
        }
        AttnKind::Twins => {
            let p = TwinsParams::new(d, 1, k, 0, &mut init)?;
            twins_attention(&mut g, x, &p)?;
        }
        AttnKind::Hat => {
            let geom = StageGeometry::new(h, k, l)?;
            let p = MhsaParams::new(d, 1, false, &mut init)?;
            if geom.ct_active() {
                let conv = Conv2dParams::new(d, d, 3, 1, 1, true, &mut init);
                let ct_attn = MhsaParams::new(d, 1, false, &mut init)?;
                let nw = geom.n_windows();
                let lt = geom.carrier_tokens;
                let ct = ct_init(&mut g, x, &conv, &geom)?;
                let flat = g.reshape(ct, &[1, nw * lt, d])?;
                let ct_out = ct_attn.forward(&mut g, flat, None)?;
                let ct_out = g.reshape(ct_out, &[nw, lt, d])?;
                let windows = g.window_partition(x, k)?;
                let joint = g.concat(&[windows, ct_out], 1)?;
                let mixed = p.forward(&mut g, joint, None)?;
                let win_only = g.slice(mixed, 1, 0, k * k)?;
                g.window_merge(win_only, h, k)?;
            } else {
                windowed_attention(&mut g, x, &p, k, None)?;
            }
        }
    }
    Ok(g.macs())
}

fn extra_factor(kind: AttnKind, h: usize, k: usize, l: usize) -> f64 {
    match kind {
        AttnKind::Hat => extra_factor_hat(h as u64, k as u64, l as u64),
        AttnKind::Twins => extra_factor_twins(h as u64, k as u64),
        AttnKind::Full | AttnKind::Window => 0.0,
    }
}

pub fn row(kind: AttnKind, h: usize, k: usize, l: usize, d: usize) -> Result<Row> {
    let analytical_macs = analytical(kind, h, k, l, d)?;
    let instrumented_macs = instrumented(kind, h, k, l, d)?;
    Ok(Row {
        attn: kind.name(),
        h,
        k,
        d,
        l: if kind == AttnKind::Hat { l } else { 0 },
        analytical_macs,
        instrumented_macs,
        ratio_to_full: analytical_macs as f64 / macs_full_attention(h as u64, d as u64) as f64,
        extra_factor: extra_factor(kind, h, k, l),
    })
}

pub fn run(args: &Args) -> Result<u8> {
    let hs: Vec<usize> = if args.sweep.is_empty() { vec![args.h] } else { args.sweep.clone() };
    let rows = hs
        .iter()
        .map(|&h| row(args.attn, h, args.k, args.l, args.d))
        .collect::<Result<Vec<_>>>()?;
    match args.format {
        Format::Csv => {
            println!("{CSV_HEADER}");
            for r in &rows {
                println!("{}", r.csv());
            }
        }
        Format::Json => {
            let doc = serde_json::json!({
                "schema_version": SCHEMA_VERSION,
                "report": "flops",
                "rows": rows,
            });
            println!("{}", serde_json::to_string_pretty(&doc).expect("report serializes"));
        }
    }
    Ok(EXIT_OK)
}
