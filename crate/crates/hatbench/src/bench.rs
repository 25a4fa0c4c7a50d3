//! Wall-clock microbenchmarks over the attention operators and registry
//! models. Inputs and parameters are deterministic given --seed; only the
//! timing fields vary between runs.

use std::time::Instant;

use clap::Args as ClapArgs;
use hat_core::attention::{
    full_attention, twins_attention, windowed_attention, MhsaParams, TwinsParams,
};
use hat_core::hat::{hat_stage, HatStageParams, StageGeometry};
use hat_core::init::Initializer;
use hat_core::model::{build_variant, Model, DEFAULT_INPUT_SIZE, DEFAULT_NUM_CLASSES};
use hat_core::tensor::Tensor;
use hat_core::{Error, Graph, Result};

use crate::flops::AttnKind;
use crate::report::{Format, SCHEMA_VERSION, WALL_CLOCK_DISCLAIMER};
use crate::EXIT_OK;

pub const CSV_HEADER: &str =
    "config,batch,workers,warmup,iters,median_ns,p10_ns,p90_ns,items_per_sec";

const STAGE_BIAS_HIDDEN: usize = 64;
const STAGE_EPS: f64 = 1e-5;

#[derive(Debug, ClapArgs)]
#[command(group(clap::ArgGroup::new("subject").required(true).args(["attn", "variant"])))]
pub struct Args {
    /// Attention operator to time.
    #[arg(long, value_enum)]
    pub attn: Option<AttnKind>,

    /// Registry variant to time end to end.
    #[arg(long, value_name = "NAME")]
    pub variant: Option<String>,

    /// Feature map side length (operator benches).
    #[arg(long = "H", default_value_t = 56, value_name = "H")]
    pub h: usize,

    /// Window side length (operator benches).
    #[arg(long, default_value_t = 7)]
    pub k: usize,

    /// Channels (operator benches).
    #[arg(long, default_value_t = 64)]
    pub d: usize,

    /// Carrier tokens per window (carrier benches).
    #[arg(long = "L", default_value_t = 4, value_name = "L")]
    pub l: usize,

    /// Divide variant channel widths by this factor.
    #[arg(long = "width-div", default_value_t = 1)]
    pub width_div: usize,

    /// Items evaluated per iteration.
    #[arg(long, default_value_t = 1)]
    pub batch: usize,

    /// Untimed warmup iterations (also fills the position-bias caches).
    #[arg(long, default_value_t = 2)]
    pub warmup: usize,

    /// Timed iterations.
    #[arg(long, default_value_t = 5)]
    pub iters: usize,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Worker threads; each evaluates whole batch items independently.
    /// Overridden by the HATBENCH_THREADS environment variable.
    #[arg(long, value_name = "WORKERS")]
    pub parallel: Option<usize>,

    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
}

enum Runner {
    Full(MhsaParams<f32>),
    Window(MhsaParams<f32>, usize),
    Hat { params: HatStageParams<f32>, geom: StageGeometry },
    Twins(TwinsParams<f32>),
    Model(Box<Model<f32>>),
}

impl Runner {
    fn eval(&self, x: &Tensor<f32>) -> Result<()> {
        let mut g = Graph::<f32>::inference();
        g.set_instrument(false);
        let v = g.constant(x.clone());
        match self {
            Runner::Full(p) => full_attention(&mut g, v, p, None)?,
            Runner::Window(p, k) => windowed_attention(&mut g, v, p, *k, None)?,
            Runner::Hat { params, geom } => hat_stage(&mut g, v, params, geom, true)?,
            Runner::Twins(p) => twins_attention(&mut g, v, p)?,
            Runner::Model(m) => m.forward(&mut g, v)?,
        };
        Ok(())
    }
}

struct Prepared {
    config_id: String,
    /// One tensor per batch item, for per-item workers.
    items: Vec<Tensor<f32>>,
    /// All items stacked along the batch axis, for the single-worker path.
    batched: Tensor<f32>,
    runner: Runner,
}

fn stack(items: &[Tensor<f32>]) -> Tensor<f32> {
    let shape = items[0].shape();
    let mut out_shape = shape.to_vec();
    out_shape[0] = items.len();
    let mut data = Vec::with_capacity(items.len() * items[0].len());
    for t in items {
        data.extend_from_slice(t.data());
    }
    Tensor::from_vec(&out_shape, data).expect("stacked batch")
}

fn prepare_attn(kind: AttnKind, args: &Args) -> Result<Prepared> {
    let (h, k, l, d) = (args.h, args.k, args.l, args.d);
    let mut init = Initializer::new(args.seed);
    let runner = match kind {
        AttnKind::Full => Runner::Full(MhsaParams::new(d, 1, false, &mut init)?),
        AttnKind::Window => Runner::Window(MhsaParams::new(d, 1, false, &mut init)?, k),
        AttnKind::Twins => Runner::Twins(TwinsParams::new(d, 1, k, 0, &mut init)?),
        AttnKind::Hat => {
            let geom = StageGeometry::new(h, k, l)?;
            let params = if geom.ct_active() {
                HatStageParams::hat(d, 1, 1, STAGE_BIAS_HIDDEN, STAGE_EPS, &mut init)?
            } else {
                HatStageParams::windowed(d, 1, 1, STAGE_BIAS_HIDDEN, STAGE_EPS, &mut init)?
            };
            Runner::Hat { params, geom }
        }
    };
    let items: Vec<Tensor<f32>> = (0..args.batch)
        .map(|i| Initializer::new(args.seed + 1 + i as u64).weight(&[1, h, h, d], 0.1))
        .collect();
    let config_id = match kind {
        AttnKind::Hat => format!("attn=hat H={h} k={k} L={l} d={d}"),
        _ => format!("attn={} H={h} k={k} d={d}", kind.name()),
    };
    Ok(Prepared { config_id, batched: stack(&items), items, runner })
}

fn prepare_variant(name: &str, args: &Args) -> Result<Prepared> {
    let model =
        build_variant::<f32>(name, args.width_div, DEFAULT_INPUT_SIZE, DEFAULT_NUM_CLASSES, args.seed)?;
    let items: Vec<Tensor<f32>> = (0..args.batch)
        .map(|i| {
            Initializer::new(args.seed + 1 + i as u64)
                .weight(&[1, 3, DEFAULT_INPUT_SIZE, DEFAULT_INPUT_SIZE], 0.1)
        })
        .collect();
    Ok(Prepared {
        config_id: format!("variant={name} width_div={} input={DEFAULT_INPUT_SIZE}", args.width_div),
        batched: stack(&items),
        items,
        runner: Runner::Model(Box::new(model)),
    })
}

fn one_pass(p: &Prepared, workers: usize) -> Result<()> {
    if workers == 1 {
        return p.runner.eval(&p.batched);
    }
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let runner = &p.runner;
                let items = &p.items;
                s.spawn(move || -> Result<()> {
                    for item in items.iter().skip(w).step_by(workers) {
                        runner.eval(item)?;
                    }
                    Ok(())
                })
            })
            .collect();
        for h in handles {
            h.join().expect("bench worker panicked")?;
        }
        Ok(())
    })
}

/// Nearest-rank percentile of a sorted sample list.
fn percentile(sorted: &[u64], q: f64) -> u64 {
    let n = sorted.len();
    let rank = (q * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

pub struct Measurement {
    pub samples_ns: Vec<u64>,
    pub median_ns: u64,
    pub p10_ns: u64,
    pub p90_ns: u64,
    pub items_per_sec: f64,
}

fn measure(p: &Prepared, args: &Args, workers: usize) -> Result<Measurement> {
    for _ in 0..args.warmup {
        one_pass(p, workers)?;
    }
    let mut samples_ns = Vec::with_capacity(args.iters);
    for _ in 0..args.iters {
        let t0 = Instant::now();
        one_pass(p, workers)?;
        samples_ns.push(u64::try_from(t0.elapsed().as_nanos()).expect("iteration under 584 years"));
    }
    let mut sorted = samples_ns.clone();
    sorted.sort_unstable();
    let median_ns = percentile(&sorted, 0.5);
    Ok(Measurement {
        samples_ns,
        median_ns,
        p10_ns: percentile(&sorted, 0.1),
        p90_ns: percentile(&sorted, 0.9),
        items_per_sec: args.batch as f64 / (median_ns as f64 * 1e-9),
    })
}

fn resolve_workers(args: &Args) -> Result<usize> {
    let n = match std::env::var("HATBENCH_THREADS") {
        Ok(s) => s
            .parse::<usize>()
            .map_err(|_| Error::Usage(format!("HATBENCH_THREADS must be a positive integer, got {s:?}")))?,
        Err(_) => args.parallel.unwrap_or(1),
    };
    if n == 0 {
        return Err(Error::Usage("worker count must be at least 1".to_string()));
    }
    Ok(n)
}

/// The headline operator comparison is only meaningful at this geometry.
fn at_reference_point(args: &Args) -> bool {
    args.attn == Some(AttnKind::Hat) && args.h == 56 && args.k == 7 && args.d == 64
}

pub fn run(args: &Args) -> Result<u8> {
    if args.iters == 0 {
        return Err(Error::Usage("--iters must be at least 1".to_string()));
    }
    if args.batch == 0 {
        return Err(Error::Usage("--batch must be at least 1".to_string()));
    }
    let workers = resolve_workers(args)?;
    let prepared = match (&args.attn, &args.variant) {
        (Some(kind), None) => prepare_attn(*kind, args)?,
        (None, Some(name)) => prepare_variant(name, args)?,
        _ => unreachable!("clap enforces one subject"),
    };
    eprintln!("{WALL_CLOCK_DISCLAIMER}");
    let m = measure(&prepared, args, workers)?;

    match args.format {
        Format::Csv => {
            println!("{CSV_HEADER}");
            println!(
                "{},{},{},{},{},{},{},{},{}",
                prepared.config_id,
                args.batch,
                workers,
                args.warmup,
                args.iters,
                m.median_ns,
                m.p10_ns,
                m.p90_ns,
                m.items_per_sec,
            );
        }
        Format::Json => {
            let doc = serde_json::json!({
                "schema_version": SCHEMA_VERSION,
                "report": "bench",
                "config": prepared.config_id,
                "batch": args.batch,
                "workers": workers,
                "warmup": args.warmup,
                "iters": args.iters,
                "samples_ns": m.samples_ns,
                "median_ns": m.median_ns,
                "p10_ns": m.p10_ns,
                "p90_ns": m.p90_ns,
                "items_per_sec": m.items_per_sec,
                "disclaimer": WALL_CLOCK_DISCLAIMER,
            });
            println!("{}", serde_json::to_string_pretty(&doc).expect("report serializes"));
        }
    }

    if at_reference_point(args) {
        let full = prepare_attn(AttnKind::Full, args)?;
        let fm = measure(&full, args, workers)?;
        eprintln!(
            "reference check: {} at {:.2} items/s vs {} at {:.2} items/s",
            prepared.config_id, m.items_per_sec, full.config_id, fm.items_per_sec,
        );
        if m.items_per_sec <= fm.items_per_sec {
            eprintln!(
                "warning: the carrier-token operator was not faster than full attention on this run; the MAC ratio predicts otherwise but wall clock is machine-dependent"
            );
        }
    }
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank_percentiles() {
        let s = [10u64, 20, 30, 40, 50];
        assert_eq!(percentile(&s, 0.5), 30);
        assert_eq!(percentile(&s, 0.1), 10);
        assert_eq!(percentile(&s, 0.9), 50);
        let one = [7u64];
        for q in [0.1, 0.5, 0.9] {
            assert_eq!(percentile(&one, q), 7);
        }
    }

    #[test]
    fn median_sits_between_the_other_percentiles() {
        let mut s: Vec<u64> = (0..37).map(|i| (i * 7919) % 101).collect();
        s.sort_unstable();
        let (p10, p50, p90) = (percentile(&s, 0.1), percentile(&s, 0.5), percentile(&s, 0.9));
        assert!(p10 <= p50 && p50 <= p90);
    }

    #[test]
    fn stacking_preserves_item_order() {
        let a = Tensor::from_vec(&[1, 2], vec![1.0f32, 2.0]).unwrap();
        let b = Tensor::from_vec(&[1, 2], vec![3.0f32, 4.0]).unwrap();
        let s = stack(&[a, b]);
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.data(), &[1.0, 2.0, 3.0, 4.0]);
    }
}
