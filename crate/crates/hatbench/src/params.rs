//! Parameter audit: per-component counts for a registry variant or a single
//! configured stage, with the published full-width figures shown (never
//! checked) next to full-width builds.

use std::collections::BTreeMap;
use std::path::PathBuf;

use clap::Args as ClapArgs;
use hat_core::config::{load_config, RunConfig, StageConfig};
use hat_core::hat::HatStageParams;
use hat_core::init::Initializer;
use hat_core::model::{build_variant, REFERENCE_PARAMS_M};
use hat_core::nn::Visit;
use hat_core::{Error, Result};

use crate::EXIT_OK;

#[derive(Debug, ClapArgs)]
#[command(group(clap::ArgGroup::new("target").required(true).args(["variant", "config"])))]
pub struct Args {
    /// Registry variant name (faster_vit_1 .. faster_vit_4).
    #[arg(long, value_name = "NAME")]
    pub variant: Option<String>,

    /// Stage or variant configuration file.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Divide every channel width by this factor.
    #[arg(long = "width-div", default_value_t = 1)]
    pub width_div: usize,
}

/// Sums parameter elements by the first path segment, in traversal order.
pub fn breakdown<M: Visit<f32>>(module: &mut M) -> (Vec<(String, u64)>, u64) {
    let mut order: Vec<String> = Vec::new();
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    let mut total = 0u64;
    module.visit_params("", &mut |name, t| {
        let top = name.split('/').next().unwrap_or(&name).to_string();
        if !counts.contains_key(&top) {
            order.push(top.clone());
        }
        *counts.entry(top).or_insert(0) += t.len() as u64;
        total += t.len() as u64;
    });
    (order.into_iter().map(|k| { let n = counts[&k]; (k, n) }).collect(), total)
}

fn print_table(rows: &[(String, u64)], total: u64) {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(5).max(5);
    println!("{:<width$}  {:>14}", "component", "parameters");
    for (name, count) in rows {
        println!("{name:<width$}  {count:>14}");
    }
    println!("{:<width$}  {total:>14}", "total");
}

fn reference_for(name: &str) -> Option<f64> {
    REFERENCE_PARAMS_M.iter().find(|(n, _)| *n == name).map(|(_, m)| *m)
}

fn run_variant(name: &str, width_div: usize) -> Result<u8> {
    let mut model = build_variant::<f32>(name, width_div, 224, 1000, 0)?;
    let (rows, total) = breakdown(&mut model);
    println!("{name} at 1/{width_div} width:");
    print_table(&rows, total);
    if width_div == 1 {
        if let Some(m) = reference_for(name) {
            println!("{name} paper-reported (not asserted): {m}M");
        }
    }
    Ok(EXIT_OK)
}

fn run_stage(cfg: &StageConfig) -> Result<u8> {
    cfg.validate()?;
    let geom = cfg.geometry()?;
    let mut init = Initializer::new(0);
    let mut params: HatStageParams<f32> = if geom.ct_active() {
        HatStageParams::hat(cfg.channels, cfg.heads, cfg.depth, cfg.bias_hidden, cfg.eps, &mut init)?
    } else {
        HatStageParams::windowed(cfg.channels, cfg.heads, cfg.depth, cfg.bias_hidden, cfg.eps, &mut init)?
    };
    let (rows, total) = breakdown(&mut params);
    println!(
        "stage H={} k={} L={} d={} heads={} depth={}:",
        geom.feature_size, geom.window_size, geom.carrier_tokens, cfg.channels, cfg.heads, cfg.depth
    );
    print_table(&rows, total);
    Ok(EXIT_OK)
}

pub fn run(args: &Args) -> Result<u8> {
    if let Some(name) = &args.variant {
        return run_variant(name, args.width_div);
    }
    let path = args.config.as_ref().expect("clap enforces one target");
    match load_config(path)? {
        RunConfig::Stage(s) => {
            if args.width_div != 1 {
                return Err(Error::Usage(
                    "--width-div applies to registry variants; set channels in the stage config instead".to_string(),
                ));
            }
            run_stage(&s)
        }
        RunConfig::Variant(v) => {
            if args.width_div != 1 && args.width_div != v.width_div {
                return Err(Error::Usage(format!(
                    "--width-div {} conflicts with width_div {} from the config",
                    args.width_div, v.width_div
                )));
            }
            run_variant(&v.name, v.width_div)
        }
    }
}
