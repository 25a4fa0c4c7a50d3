//! End-to-end tests of the compiled binary: exit codes, output contracts,
//! and report schemas. Everything here drives the real executable the way a
//! shell user would.

use std::collections::HashMap;
use std::path::PathBuf;
use std::process::{Command, Output};

fn hatbench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hatbench"))
        .args(args)
        .env_remove("HATBENCH_THREADS")
        .output()
        .expect("binary should spawn")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("no signal exits")
}

fn write_config(name: &str, body: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("hatbench-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).expect("temp dir");
    let path = dir.join(name);
    std::fs::write(&path, body).expect("config write");
    path
}

/// CSV rows keyed by header name; panics on ragged rows.
fn csv_row(text: &str) -> HashMap<String, String> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().expect("header").split(',').collect();
    let row: Vec<&str> = lines.next().expect("data row").split(',').collect();
    assert_eq!(header.len(), row.len(), "ragged csv: {text}");
    header.iter().map(|s| s.to_string()).zip(row.iter().map(|s| s.to_string())).collect()
}

#[test]
fn usage_errors_exit_2() {
    let out = hatbench(&["gradcheck", "--preset", "nope"]);
    assert_eq!(exit_code(&out), 2);
    assert!(stderr(&out).contains("unknown preset"), "{}", stderr(&out));
    assert!(stderr(&out).contains("hat-small"), "should list known presets");

    let out = hatbench(&["gradcheck"]);
    assert_eq!(exit_code(&out), 2, "a config source is required");

    let variant = write_config("variant.json", r#"{"kind":"variant","name":"faster_vit_2"}"#);
    let out = hatbench(&["gradcheck", "--config", variant.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 2);
    assert!(stderr(&out).contains("stage"), "{}", stderr(&out));

    let out = hatbench(&["flops", "--attn", "banana"]);
    assert_eq!(exit_code(&out), 2);

    let out = hatbench(&["params", "--variant", "not_a_variant"]);
    assert_eq!(exit_code(&out), 2);
    assert!(stderr(&out).contains("faster_vit_1"), "should list known variants");

    let out = hatbench(&["bench", "--iters", "1"]);
    assert_eq!(exit_code(&out), 2, "bench needs --attn or --variant");
}

#[test]
fn broken_configs_exit_2_and_name_the_invariant() {
    let bad = write_config(
        "bad-stage.json",
        r#"{"kind":"stage","feature_size":15,"window_size":7,"channels":8}"#,
    );
    let out = hatbench(&["gradcheck", "--config", bad.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 2);
    assert!(
        stderr(&out).contains("window_size_divides_feature_size"),
        "error should name the violated rule: {}",
        stderr(&out)
    );
}

#[test]
fn failed_tolerance_exits_1() {
    let tiny = write_config(
        "tiny-stage.json",
        r#"{"kind":"stage","feature_size":4,"window_size":2,"carrier_tokens":0,
            "channels":2,"heads":1,"depth":1,"bias_hidden":4}"#,
    );
    let out = hatbench(&["gradcheck", "--config", tiny.to_str().unwrap(), "--tol", "0"]);
    assert_eq!(exit_code(&out), 1, "a zero tolerance can never be met");
    assert!(stdout(&out).contains("FAIL"), "{}", stdout(&out));

    let out = hatbench(&["gradcheck", "--config", tiny.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 0, "the same config passes at the default tolerance");
    assert!(stdout(&out).contains("PASS"), "{}", stdout(&out));
}

#[test]
fn preset_hat_small_passes_at_default_tolerance() {
    let out = hatbench(&["gradcheck", "--preset", "hat-small"]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("max rel err"), "per-parameter lines expected: {text}");
    assert!(text.contains("PASS"), "{text}");
    assert!(text.contains("H=14 k=7 L=4 d=8 heads=2 depth=1"), "{text}");
}

#[test]
fn flops_csv_carries_the_headline_factors() {
    let out = hatbench(&["flops", "--attn", "hat", "--H", "32", "--k", "8", "--L", "4", "--d", "16"]);
    assert_eq!(exit_code(&out), 0);
    let text = stdout(&out);
    assert_eq!(
        text.lines().next().unwrap(),
        "attn,H,k,d,L,analytical_macs,instrumented_macs,ratio_to_full,extra_factor",
    );
    let row = csv_row(&text);
    assert_eq!(row["extra_factor"], "8");
    assert_eq!(row["analytical_macs"], row["instrumented_macs"]);

    let out = hatbench(&["flops", "--attn", "twins", "--H", "32", "--k", "8", "--d", "16"]);
    assert_eq!(csv_row(&stdout(&out))["extra_factor"], "16");

    // One window spanning the whole map is full attention by another name.
    let out = hatbench(&["flops", "--attn", "window", "--H", "16", "--k", "16", "--d", "8"]);
    assert_eq!(csv_row(&stdout(&out))["ratio_to_full"], "1");
}

#[test]
fn flops_sweep_emits_one_row_per_size() {
    let out = hatbench(&[
        "flops", "--attn", "hat", "--k", "8", "--L", "4", "--d", "8", "--sweep", "16,32,64",
    ]);
    assert_eq!(exit_code(&out), 0);
    let text = stdout(&out);
    assert_eq!(text.lines().count(), 4, "header plus three rows: {text}");
    for (line, h) in text.lines().skip(1).zip(["16", "32", "64"]) {
        assert!(line.starts_with(&format!("hat,{h},")), "{line}");
    }
}

#[test]
fn json_reports_carry_a_schema_version() {
    let out = hatbench(&["flops", "--attn", "window", "--H", "16", "--k", "4", "--d", "8", "--format", "json"]);
    let doc: serde_json::Value = serde_json::from_str(&stdout(&out)).expect("valid json");
    assert_eq!(doc["schema_version"], 1);
    assert_eq!(doc["report"], "flops");
    assert!(doc["rows"].as_array().is_some_and(|r| r.len() == 1));

    let out = hatbench(&[
        "bench", "--attn", "window", "--H", "8", "--k", "4", "--d", "4", "--iters", "2",
        "--warmup", "0", "--format", "json",
    ]);
    let doc: serde_json::Value = serde_json::from_str(&stdout(&out)).expect("valid json");
    assert_eq!(doc["schema_version"], 1);
    assert_eq!(doc["samples_ns"].as_array().map(|s| s.len()), Some(2));
}

#[test]
fn bench_single_iteration_quotes_the_sample_everywhere() {
    let out = hatbench(&[
        "bench", "--attn", "window", "--H", "8", "--k", "4", "--d", "4", "--iters", "1",
        "--warmup", "0",
    ]);
    assert_eq!(exit_code(&out), 0);
    let row = csv_row(&stdout(&out));
    assert_eq!(row["median_ns"], row["p10_ns"]);
    assert_eq!(row["median_ns"], row["p90_ns"]);
    assert!(stderr(&out).contains("not comparable"), "disclaimer expected");
}

#[test]
fn bench_rejects_a_broken_thread_override() {
    for bad in ["zero", "0"] {
        let out = Command::new(env!("CARGO_BIN_EXE_hatbench"))
            .args(["bench", "--attn", "window", "--H", "8", "--k", "4", "--d", "4", "--iters", "1"])
            .env("HATBENCH_THREADS", bad)
            .output()
            .expect("binary should spawn");
        assert_eq!(exit_code(&out), 2, "HATBENCH_THREADS={bad}");
    }
}

#[test]
fn params_reference_appears_only_at_full_width() {
    let out = hatbench(&["params", "--variant", "faster_vit_1"]);
    assert_eq!(exit_code(&out), 0);
    let text = stdout(&out);
    assert!(text.contains("paper-reported (not asserted)"), "{text}");
    assert!(text.contains("53.4"), "{text}");
    assert!(text.contains("total"), "{text}");

    let out = hatbench(&["params", "--variant", "faster_vit_1", "--width-div", "8"]);
    assert_eq!(exit_code(&out), 0);
    let text = stdout(&out);
    assert!(
        !text.contains("paper-reported"),
        "reduced widths have no comparable reference: {text}"
    );
}

#[test]
fn verify_reports_every_property_on_its_own_line() {
    let out = hatbench(&["verify", "--all"]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr(&out));
    let text = stdout(&out);
    let passed = text.lines().filter(|l| l.starts_with("ok   ")).count();
    assert!(passed >= 12, "expected at least 12 property lines, saw {passed}:\n{text}");
    assert!(text.contains("properties passed"), "{text}");
}
