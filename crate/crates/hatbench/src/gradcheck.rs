//! Finite-difference verification of every parameter of a configured stage.

use std::path::PathBuf;

use clap::Args as ClapArgs;
use hat_core::config::{load_config, preset, RunConfig, StageConfig, PRESETS};
use hat_core::gradcheck::{check_module_gradients, GradReport};
use hat_core::hat::{hat_stage, HatStageParams, StageGeometry};
use hat_core::init::Initializer;
use hat_core::{Error, Graph, Result};

use crate::{EXIT_FAIL, EXIT_OK};

/// Step for central differences; relative errors against the analytic pass
/// land around 1e-6 for well-conditioned parameters in f64.
const FD_EPS: f64 = 1e-5;

#[derive(Debug, ClapArgs)]
#[command(group(clap::ArgGroup::new("source").required(true).args(["config", "preset"])))]
pub struct Args {
    /// Stage configuration file (JSON, kind = "stage").
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Built-in stage preset.
    #[arg(long, value_name = "NAME")]
    pub preset: Option<String>,

    /// Seed for parameters and the probe input.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Max acceptable relative error between analytic and central-difference
    /// gradients.
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
}

fn resolve(args: &Args) -> Result<StageConfig> {
    if let Some(name) = &args.preset {
        return preset(name)
            .ok_or_else(|| Error::Usage(format!("unknown preset {name:?}; known: {PRESETS:?}")));
    }
    let path = args.config.as_ref().expect("clap enforces one source");
    match load_config(path)? {
        RunConfig::Stage(s) => Ok(s),
        RunConfig::Variant(v) => Err(Error::Usage(format!(
            "gradcheck needs a stage config, got the variant {:?}; describe one stage instead",
            v.name
        ))),
    }
}

/// Runs the check and returns the report next to the geometry it used.
pub fn check(cfg: &StageConfig, seed: u64) -> Result<(GradReport, StageGeometry)> {
    cfg.validate()?;
    let geom = cfg.geometry()?;
    let mut init = Initializer::new(seed);
    let mut params: HatStageParams<f64> = if geom.ct_active() {
        HatStageParams::hat(cfg.channels, cfg.heads, cfg.depth, cfg.bias_hidden, cfg.eps, &mut init)?
    } else {
        HatStageParams::windowed(cfg.channels, cfg.heads, cfg.depth, cfg.bias_hidden, cfg.eps, &mut init)?
    };
    let input = Initializer::new(seed.wrapping_add(1))
        .weight::<f64>(&[1, geom.feature_size, geom.feature_size, cfg.channels], 0.5);
    let report = check_module_gradients(&mut params, FD_EPS, |g: &mut Graph<f64>, m| {
        let x = g.constant(input.clone());
        hat_stage(g, x, m, &geom, true)
    })?;
    Ok((report, geom))
}

pub fn run(args: &Args) -> Result<u8> {
    let cfg = resolve(args)?;
    let (report, geom) = check(&cfg, args.seed)?;
    for p in &report.per_param {
        println!("{:<40} max rel err {:>10.3e}  ({} elements)", p.name, p.max_rel_err, p.elements);
    }
    let pass = report.max_rel_err <= args.tol;
    println!(
        "gradcheck H={} k={} L={} d={} heads={} depth={}: {} parameters, {} elements, max rel err {:.3e} at {} (tol {:e}): {}",
        geom.feature_size,
        geom.window_size,
        geom.carrier_tokens,
        cfg.channels,
        cfg.heads,
        cfg.depth,
        report.per_param.len(),
        report.elements,
        report.max_rel_err,
        report.worst,
        args.tol,
        if pass { "PASS" } else { "FAIL" },
    );
    Ok(if pass { EXIT_OK } else { EXIT_FAIL })
}
