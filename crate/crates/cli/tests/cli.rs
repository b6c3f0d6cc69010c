//! End-to-end checks of the `rca` binary: artifact layout, caching,
//! reproducibility and error codes, all through the real process boundary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn rca_in(out_root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rca"))
        .arg("--out")
        .arg(out_root)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout_of(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

fn stderr_of(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

/// First stdout line: the artifact directory, with any cache marker
/// stripped.
fn artifact_dir(output: &Output) -> PathBuf {
    let text = stdout_of(output);
    let line = text.lines().next().unwrap_or_default();
    PathBuf::from(line.trim_end_matches(" (cached)"))
}

fn assert_ok(output: &Output) {
    assert!(
        output.status.success(),
        "command failed:\nstdout: {}\nstderr: {}",
        stdout_of(output),
        stderr_of(output)
    );
}

/// Error output must carry a stable machine-parseable code and a nonzero
/// exit status.
fn assert_error_code(output: &Output, code: &str) {
    assert!(!output.status.success(), "expected failure, got success");
    let err = stderr_of(output);
    assert!(
        err.starts_with(&format!("error[{code}]:")),
        "expected code {code}, got: {err}"
    );
}

#[test]
fn zero_duration_simulation_writes_a_header_only_trace() {
    let tmp = tempfile::tempdir().unwrap();
    let out = rca_in(tmp.path(), &["simulate", "--seed", "5", "--duration", "0"]);
    assert_ok(&out);
    let dir = artifact_dir(&out);
    assert!(dir.join("manifest.toml").exists());

    let trace = fs::read_to_string(dir.join("trace.csv")).unwrap();
    let mut lines = trace.lines().filter(|l| !l.starts_with('#'));
    let header = lines.next().expect("header line");
    assert!(header.starts_with("time,Grid,"));
    assert_eq!(lines.count(), 0, "no data rows for a zero-length run");
}

#[test]
fn identical_settings_share_one_artifact_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let args = ["simulate", "--seed", "5", "--duration", "120"];
    let first = rca_in(tmp.path(), &args);
    let second = rca_in(tmp.path(), &args);
    assert_ok(&first);
    assert_ok(&second);
    assert_eq!(artifact_dir(&first), artifact_dir(&second));
    assert!(stdout_of(&second).contains("(cached)"));

    let other = rca_in(tmp.path(), &["simulate", "--seed", "6", "--duration", "120"]);
    assert_ok(&other);
    assert_ne!(artifact_dir(&first), artifact_dir(&other));
}

#[test]
fn the_environment_variable_supplies_the_output_root() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_rca"))
        .env("RCA_OUT", tmp.path())
        .args(["simulate", "--seed", "1", "--duration", "0"])
        .output()
        .expect("binary runs");
    assert_ok(&out);
    assert!(artifact_dir(&out).starts_with(tmp.path()));
}

#[test]
fn bench_resumes_from_cached_artifacts_and_reproduces_every_byte() {
    let tmp = tempfile::tempdir().unwrap();
    let args = [
        "bench",
        "--seed",
        "42",
        "--truncated",
        "0,2",
        "--train-runs",
        "2",
        "--train-minutes",
        "6000",
        "--cases",
        "2",
        "--t-i",
        "400",
        "--tau",
        "30",
        "--trailing",
        "20",
        "--samples",
        "200",
        "--permutations",
        "40",
    ];
    let first = rca_in(tmp.path(), &args);
    assert_ok(&first);
    let dir = artifact_dir(&first);
    let rows = fs::read(dir.join("rows.csv")).unwrap();
    let report = fs::read(dir.join("report.txt")).unwrap();
    let curves = fs::read(dir.join("plots/hit_rate_vs_lags.csv")).unwrap();
    assert!(!rows.is_empty());

    let second = rca_in(tmp.path(), &args);
    assert_ok(&second);
    assert_eq!(artifact_dir(&second), dir);
    let log = stderr_of(&second);
    for stage in ["model truncated-L0: cached", "tree: cached", "corpus: cached", "scores: cached"]
    {
        assert!(log.contains(stage), "missing {stage:?} in: {log}");
    }
    assert_eq!(fs::read(dir.join("rows.csv")).unwrap(), rows);
    assert_eq!(fs::read(dir.join("report.txt")).unwrap(), report);
    assert_eq!(fs::read(dir.join("plots/hit_rate_vs_lags.csv")).unwrap(), curves);

    // The standalone renderer produces the same tables from the same rows.
    let rows_path = dir.join("rows.csv");
    let report_args = ["report", "--rows", rows_path.to_str().unwrap(), "--k", "1,3,5"];
    let rendered = rca_in(tmp.path(), &report_args);
    assert_ok(&rendered);
    let report_dir = artifact_dir(&rendered);
    let tables = |bytes: &[u8]| {
        String::from_utf8_lossy(bytes)
            .lines()
            .skip(1) // the manifest line names the producing run
            .collect::<Vec<_>>()
            .join("\n")
    };
    let rerendered = fs::read(report_dir.join("report.txt")).unwrap();
    assert_eq!(tables(&rerendered), tables(&report));

    let again = rca_in(tmp.path(), &report_args);
    assert_ok(&again);
    assert_eq!(fs::read(report_dir.join("report.txt")).unwrap(), rerendered);
}

#[test]
fn attribute_and_explain_cover_a_fitted_model() {
    let tmp = tempfile::tempdir().unwrap();
    let fit = rca_in(
        tmp.path(),
        &[
            "fit",
            "--seed",
            "7",
            "--train-runs",
            "2",
            "--train-minutes",
            "4000",
            "--lags",
            "2",
            "--mode",
            "truncated",
        ],
    );
    assert_ok(&fit);
    let model = artifact_dir(&fit).join("models/truncated-L2.json");
    assert!(model.exists());
    assert!(artifact_dir(&fit).join("tree.json").exists());

    let inject = rca_in(
        tmp.path(),
        &["inject", "--seed", "3", "--kind", "grid-noise", "--t-i", "400"],
    );
    assert_ok(&inject);
    let trace = artifact_dir(&inject).join("case/faulty.csv");

    let model_s = model.to_str().unwrap();
    let trace_s = trace.to_str().unwrap();
    let attribute = rca_in(
        tmp.path(),
        &[
            "attribute", "--model", model_s, "--trace", trace_s, "--t", "430", "--agg", "sum",
            "--samples", "200", "--permutations", "40",
        ],
    );
    assert_ok(&attribute);
    assert!(artifact_dir(&attribute).join("attribution.json").exists());
    assert!(stdout_of(&attribute).contains("Grid"));

    let explain = rca_in(
        tmp.path(),
        &[
            "explain", "--model", model_s, "--trace", trace_s, "--t", "430", "--samples",
            "200", "--permutations", "40",
        ],
    );
    assert_ok(&explain);
    assert!(artifact_dir(&explain).join("explain.json").exists());
    let table = stdout_of(&explain);
    assert!(table.contains("q25"), "quartile columns missing: {table}");

    // Errors on the same artifacts.
    let unknown_node = rca_in(
        tmp.path(),
        &["explain", "--model", model_s, "--trace", trace_s, "--t", "430", "--node", "Nope"],
    );
    assert_error_code(&unknown_node, "unknown-node");
    let too_early = rca_in(
        tmp.path(),
        &["explain", "--model", model_s, "--trace", trace_s, "--t", "1"],
    );
    assert_error_code(&too_early, "peak-not-found");
    let beyond_end = rca_in(
        tmp.path(),
        &["attribute", "--model", model_s, "--trace", trace_s, "--t", "99999"],
    );
    assert_error_code(&beyond_end, "peak-not-found");
}

#[test]
fn failures_exit_nonzero_with_stable_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let unknown = rca_in(tmp.path(), &["inject", "--kind", "bogus", "--t-i", "10"]);
    assert_error_code(&unknown, "unknown-injection");

    let no_model = rca_in(
        tmp.path(),
        &["attribute", "--model", "/nonexistent.json", "--trace", "/nonexistent.csv", "--t", "5"],
    );
    assert_error_code(&no_model, "corrupt-artifact");

    let no_rows = rca_in(tmp.path(), &["report", "--rows", "/nonexistent.csv"]);
    assert_error_code(&no_rows, "corrupt-artifact");

    let no_training = rca_in(
        tmp.path(),
        &[
            "fit",
            "--train-runs",
            "0",
            "--train-minutes",
            "4000",
            "--lags",
            "1",
            "--mode",
            "truncated",
        ],
    );
    assert_error_code(&no_training, "insufficient-data");

    let bad_config = tmp.path().join("bad.toml");
    fs::write(&bad_config, "peak_limit_kw = -3\n").unwrap();
    let invalid = rca_in(
        tmp.path(),
        &["--config", bad_config.to_str().unwrap(), "simulate", "--duration", "0"],
    );
    assert_error_code(&invalid, "invalid-config");
}
