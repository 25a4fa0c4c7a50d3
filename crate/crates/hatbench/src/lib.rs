//! Command implementations behind the `hatbench` binary: gradient
//! verification, MAC audits and sweeps, parameter breakdowns, wall-clock
//! microbenchmarks and the self-check property suite.
//!
//! Every command returns the process exit code: 0 for success, 1 for a
//! verification failure (gradients over tolerance, a failed property), and 2
//! for configuration or usage errors. Library errors bubble up as
//! [`hat_core::Error`] and are mapped to exit code 2 by the binary.

pub mod bench;
pub mod flops;
pub mod gradcheck;
pub mod params;
pub mod report;
pub mod verify;

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAIL: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
