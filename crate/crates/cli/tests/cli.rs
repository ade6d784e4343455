//! End-to-end runs of the `nlab` binary: exit codes, error wording, the
//! shape of report.json and the CSV tables, and payload determinism across
//! thread counts.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn nlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nlab"))
        .args(args)
        .output()
        .expect("the binary should launch")
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("exp.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn read_report(dir: &Path) -> serde_json::Value {
    let text = std::fs::read_to_string(dir.join("report.json")).unwrap();
    serde_json::from_str(&text).unwrap()
}

/// Reads a CSV written by a run: asserts the exact header, LF-only line
/// endings, and a trailing newline, then returns the data rows split on
/// commas.
fn read_csv(path: &Path, header: &str) -> Vec<Vec<String>> {
    let text = std::fs::read_to_string(path).unwrap();
    assert!(!text.contains('\r'), "{path:?} has CR line endings");
    assert!(text.ends_with('\n'), "{path:?} lacks a trailing newline");
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(header), "{path:?} header");
    lines
        .map(|l| l.split(',').map(str::to_owned).collect())
        .collect()
}

#[test]
fn bad_invocations_exit_with_one_and_help_with_zero() {
    let out = nlab(&[]);
    assert_eq!(out.status.code(), Some(1));
    let out = nlab(&["seminorm"]);
    assert_eq!(out.status.code(), Some(1));
    let out = nlab(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn unknown_config_keys_are_named_in_the_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "[kernel]\nkind = \"indicator\"\nd = 2\np = 2.0\nfrobnicate = 1\n",
    );
    let out = nlab(&["kernel-check", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_of(&out).contains("frobnicate"), "{}", stderr_of(&out));
}

#[test]
fn exponents_below_one_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "[kernel]\nkind = \"indicator\"\nd = 2\np = 0.5\n",
    );
    let out = nlab(&["kernel-check", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(
        stderr_of(&out).contains("p >= 1 required"),
        "{}",
        stderr_of(&out)
    );
}

#[test]
fn missing_field_files_are_caught_at_parse_time() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"
            [kernel]
            kind = "indicator"
            d = 1
            p = 2.0

            [domain]
            kind = "box"
            d = 1
            lo = [0.0]
            hi = [1.0]

            [grid]
            n = [8]

            [field]
            kind = "csv"
            path = "no/such/file.csv"
        "#,
    );
    let out = nlab(&["seminorm", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(
        stderr_of(&out).contains("no/such/file.csv"),
        "{}",
        stderr_of(&out)
    );
}

#[test]
fn kernel_check_reports_the_fractional_slope() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "[kernel]\nkind = \"fractional\"\nd = 2\np = 2.0\ns = 0.5\n",
    );
    let out_dir = dir.path().join("run");
    let out = nlab(&[
        "kernel-check",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));

    let report = read_report(&out_dir);
    let cond = &report["payload"]["condition"];
    assert_eq!(cond["verdict"], "satisfied");
    let slope = cond["fitted_log_slope"].as_f64().unwrap();
    assert!((slope - 1.0).abs() < 0.1, "slope {slope}");

    let rows = read_csv(&out_dir.join("mass_ratio.csv"), "radius,value");
    assert_eq!(rows.len(), cond["samples"].as_array().unwrap().len());
    for row in &rows {
        assert_eq!(row.len(), 2);
        row[0].parse::<f64>().unwrap();
        row[1].parse::<f64>().unwrap();
    }

    // The echoed config is the same experiment, byte for byte reparseable.
    let echoed = std::fs::read_to_string(out_dir.join("config.toml")).unwrap();
    assert!(echoed.contains("fractional"));
}

#[test]
fn rigid_fields_have_numerically_zero_seminorm() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"
            command = "seminorm"

            [kernel]
            kind = "fractional"
            d = 2
            p = 2.0
            s = 0.5

            [domain]
            kind = "box"
            d = 2
            lo = [0.0, 0.0]
            hi = [1.0, 1.0]

            [grid]
            n = [12, 12]

            [field]
            kind = "rigid"
            seed = 3
        "#,
    );
    let out_dir = dir.path().join("run");
    let out = nlab(&[
        "seminorm",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));
    let report = read_report(&out_dir);
    let value = report["payload"]["seminorm"]["value_p"].as_f64().unwrap();
    assert!(value <= 1e-12, "rigid seminorm {value}");
}

#[test]
fn payloads_are_identical_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"
            [kernel]
            kind = "fractional"
            d = 2
            p = 2.0
            s = 0.5

            [domain]
            kind = "box"
            d = 2
            lo = [0.0, 0.0]
            hi = [1.0, 1.0]

            [grid]
            n = [8, 8]

            [field]
            kind = "noise"
        "#,
    );
    let mut payloads = Vec::new();
    for (threads, sub) in [("1", "seminorm"), ("4", "seminorm"), ("1", "poincare"), ("4", "poincare")] {
        let out_dir = dir.path().join(format!("{sub}-{threads}"));
        let out = nlab(&[
            sub,
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
            "--threads",
            threads,
            "--seed",
            "11",
        ]);
        assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));
        payloads.push((sub, read_report(&out_dir)["payload"].to_string()));
    }
    assert_eq!(payloads[0].1, payloads[1].1, "seminorm payload drifts with threads");
    assert_eq!(payloads[2].1, payloads[3].1, "poincare payload drifts with threads");
    assert_ne!(payloads[0].1, payloads[2].1);
}

#[test]
fn mollify_writes_gap_table_and_fields() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"
            [domain]
            kind = "box"
            d = 2
            lo = [0.0, 0.0]
            hi = [1.0, 1.0]

            [grid]
            n = [16, 16]

            [field]
            kind = "bump"
            center = [0.5, 0.5]
            radius = 0.3
            amplitude = [1.0, -0.5]

            [params]
            p = 2.0
            deltas = [0.25, 0.125]
        "#,
    );
    let out_dir = dir.path().join("run");
    let out = nlab(&[
        "mollify",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));

    let rows = read_csv(&out_dir.join("gaps.csv"), "delta,gap,normalization_defect");
    assert_eq!(rows.len(), 2);
    for row in &rows {
        let gap: f64 = row[1].parse().unwrap();
        let defect: f64 = row[2].parse().unwrap();
        assert!(gap > 0.0 && gap.is_finite());
        assert!(defect.abs() < 0.5, "defect {defect}");
    }
    // The finer radius smooths less, so its gap is smaller.
    let g0: f64 = rows[0][1].parse().unwrap();
    let g1: f64 = rows[1][1].parse().unwrap();
    assert!(g1 < g0, "gaps {g0} then {g1}");

    for name in ["mollified_000.csv", "mollified_001.csv"] {
        let text = std::fs::read_to_string(out_dir.join(name)).unwrap();
        assert!(text.starts_with("x_1,x_2,u_1,u_2\n"), "{name} header");
    }
}

#[test]
fn boundary_writes_one_row_per_radius() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"
            [kernel]
            kind = "fractional"
            d = 2
            p = 2.0
            s = 0.5

            [domain]
            kind = "box"
            d = 2
            lo = [0.0, 0.0]
            hi = [1.0, 1.0]

            [grid]
            n = [16, 16]

            [field]
            kind = "bump"
            center = [0.5, 0.5]
            radius = 0.25
            amplitude = [0.0, 1.0]

            [params]
            radii = [0.4, 0.3]
        "#,
    );
    let out_dir = dir.path().join("run");
    let out = nlab(&[
        "boundary",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));
    let rows = read_csv(
        &out_dir.join("boundary_mass.csv"),
        "r,lhs,interior_term,seminorm_term,collar_term,implied_c2,vanishes_on_deep_interior",
    );
    assert_eq!(rows.len(), 2);
    let report = read_report(&out_dir);
    assert_eq!(report["payload"]["reports"].as_array().unwrap().len(), 2);
}

#[test]
fn compactness_probe_runs_and_names_a_verdict() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"
            [kernel]
            kind = "fractional"
            d = 2
            p = 2.0
            s = 0.5

            [domain]
            kind = "box"
            d = 2
            lo = [0.0, 0.0]
            hi = [1.0, 1.0]

            [grid]
            n = [16, 16]

            [sequence]
            kind = "random"
            count = 2
        "#,
    );
    let out_dir = dir.path().join("run");
    let out = nlab(&[
        "compactness",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));
    let report = read_report(&out_dir);
    let verdict = report["payload"]["report"]["verdict"].as_str().unwrap();
    assert!(
        ["no_obstruction", "concentration_detected", "oscillation_detected"].contains(&verdict),
        "verdict {verdict}"
    );
    let gap_rows = read_csv(&out_dir.join("gap_curve.csv"), "delta,sup_gap");
    assert!(!gap_rows.is_empty());
    read_csv(&out_dir.join("boundary_mass_curve.csv"), "tau,sup_mass");
}

#[test]
fn sequence_sweeps_an_approximation_family() {
    let dir = tempfile::tempdir().unwrap();
    // The interval is wider than the first inner truncation radius, so even
    // the term-1 kernel keeps some pairs and the energies stay comparable.
    let cfg = write_config(
        dir.path(),
        r#"
            [kernel]
            kind = "fractional"
            d = 1
            p = 2.0
            s = 0.5

            [domain]
            kind = "box"
            d = 1
            lo = [0.0]
            hi = [2.0]

            [grid]
            n = [96]

            [sequence]
            kind = "random"
            count = 3

            [params]
            family = "inner_truncated"
        "#,
    );
    let out_dir = dir.path().join("run");
    let out = nlab(&[
        "sequence",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));
    let report = read_report(&out_dir);
    assert_eq!(report["payload"]["family"], "inner_truncated");
    assert!(report["payload"]["report"]["sup_seminorm"].as_f64().unwrap() > 0.0);
}

#[test]
fn under_resolved_sequences_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    // An oscillation whose wavelength falls under two cells of this grid.
    let cfg = write_config(
        dir.path(),
        r#"
            [kernel]
            kind = "fractional"
            d = 2
            p = 2.0
            s = 0.5

            [domain]
            kind = "box"
            d = 2
            lo = [0.0, 0.0]
            hi = [1.0, 1.0]

            [grid]
            n = [8, 8]

            [sequence]
            kind = "oscillatory"
            count = 1
        "#,
    );
    let out = nlab(&["compactness", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr_of(&out));
    assert!(
        stderr_of(&out).contains("resolution"),
        "{}",
        stderr_of(&out)
    );
}

#[test]
fn declared_command_must_match_the_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "command = \"poincare\"\n\n[kernel]\nkind = \"indicator\"\nd = 2\np = 2.0\n",
    );
    let out = nlab(&["kernel-check", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr_of(&out);
    assert!(err.contains("poincare") && err.contains("kernel-check"), "{err}");
}
