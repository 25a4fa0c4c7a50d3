use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hatbench::{bench, flops, gradcheck, params, verify, EXIT_USAGE};

/// Verification and measurement harness for the hierarchical-attention
/// backbone: finite-difference gradient checks, MAC audits and sweeps,
/// parameter breakdowns, microbenchmarks and the self-check property suite.
///
/// Exit codes: 0 success, 1 verification failure, 2 usage or config error.
#[derive(Parser)]
#[command(name = "hatbench", version, about, max_term_width = 100)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Check analytic gradients of a configured stage against central
    /// finite differences, parameter by parameter.
    Gradcheck(gradcheck::Args),
    /// Report closed-form and instrumented MAC counts per attention operator.
    Flops(flops::Args),
    /// Break parameter counts down by component.
    Params(params::Args),
    /// Time forward passes with deterministic inputs.
    Bench(bench::Args),
    /// Run the property suite, one line per property.
    Verify(verify::Args),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.cmd {
        Cmd::Gradcheck(a) => gradcheck::run(a),
        Cmd::Flops(a) => flops::run(a),
        Cmd::Params(a) => params::run(a),
        Cmd::Bench(a) => bench::run(a),
        Cmd::Verify(a) => verify::run(a),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_USAGE)
        }
    }
}
