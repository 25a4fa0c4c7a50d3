//! Shared output plumbing: schema versioning, format selection and the
//! wall-clock disclaimer.

use clap::ValueEnum;

/// Bumped whenever a CSV column set or JSON field set changes.
pub const SCHEMA_VERSION: u32 = 1;

/// Printed (to stderr) with every wall-clock report. Scalar CPU timings on
/// this build say nothing about published accelerator throughput figures.
pub const WALL_CLOCK_DISCLAIMER: &str =
    "note: wall-clock figures come from this scalar CPU build and are not comparable to published accelerator throughput";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

/// Trims a float for CSV cells: integers print bare, everything else keeps
/// shortest-roundtrip formatting.
pub fn csv_float(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}
