//! End-to-end tests of the `spinpath` binary: run the real executable with
//! the bundled configs and check outputs, determinism, and exit codes.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn binary() -> &'static str {
    env!("CARGO_BIN_EXE_spinpath")
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

fn run(args: &[&str]) -> Output {
    Command::new(binary())
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

fn stderr(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

#[test]
fn simulate_is_byte_deterministic_under_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for out in [&out_a, &out_b] {
        let output = run(&[
            "simulate",
            "--config",
            config("mwp_2mm.toml").to_str().unwrap(),
            "--seed",
            "7",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(output.status.success(), "{}", stderr(&output));
    }
    let a = std::fs::read(out_a.join("dataset.csv")).unwrap();
    let b = std::fs::read(out_b.join("dataset.csv")).unwrap();
    assert_eq!(a, b);
    assert!(out_a.join("dataset.meta.toml").exists());
    assert!(out_a.join("manifest.toml").exists());
}

#[test]
fn zero_flux_warns_and_writes_zero_counts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let output = run(&[
        "simulate",
        "--config",
        config("mwp_2mm.toml").to_str().unwrap(),
        "--flux",
        "0",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(output.status.success(), "{}", stderr(&output));
    assert!(stderr(&output).contains("incident flux is zero"));
    let csv = std::fs::read_to_string(out.join("dataset.csv")).unwrap();
    for line in csv.lines().skip(1) {
        let counts: f64 = line.split(',').nth(3).unwrap().parse().unwrap();
        assert_eq!(counts, 0.0);
    }
}

#[test]
fn analyze_round_trip_recovers_the_polarization_scaled_witness() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let analysis = dir.path().join("analysis");
    let output = run(&[
        "simulate",
        "--config",
        config("mwp_2mm.toml").to_str().unwrap(),
        "--seed",
        "11",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(output.status.success(), "{}", stderr(&output));
    let output = run(&[
        "analyze",
        "--dataset",
        out.join("dataset.csv").to_str().unwrap(),
        "--out",
        analysis.to_str().unwrap(),
        "--trials",
        "200",
    ]);
    assert!(output.status.success(), "{}", stderr(&output));
    assert!(stdout(&output).contains("entanglement witnessed"));

    let report = std::fs::read_to_string(analysis.join("report.toml")).unwrap();
    let parsed: toml::Value = toml::from_str(&report).unwrap();
    let s = parsed["s"].as_float().unwrap();
    let sigma = parsed["sigma_s"].as_float().unwrap();
    let target = 2.0_f64.sqrt() * 2.0 * 0.89;
    assert!(
        (s - target).abs() < 3.0 * sigma + 1e-9,
        "S = {s} not within 3 sigma ({sigma}) of {target}"
    );
    assert!(analysis.join("fit_curves.csv").exists());
    assert!(analysis.join("summary.csv").exists());
}

#[test]
fn analyze_supports_raw_counts_and_angle_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    run(&[
        "simulate",
        "--config",
        config("mwp_2mm.toml").to_str().unwrap(),
        "--seed",
        "3",
        "--out",
        out.to_str().unwrap(),
    ]);
    let analysis = dir.path().join("raw");
    let output = run(&[
        "analyze",
        "--dataset",
        out.join("dataset.csv").to_str().unwrap(),
        "--out",
        analysis.to_str().unwrap(),
        "--trials",
        "0",
        "--raw-counts",
        "--angles",
        "-135,-45,-270,-180",
    ]);
    assert!(output.status.success(), "{}", stderr(&output));
    assert!(stdout(&output).contains("raw_counts"));
    assert!(stdout(&output).contains("entanglement witnessed"));
}

#[test]
fn malformed_dataset_exits_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "alpha,chi\n0,0\n").unwrap();
    let output = run(&[
        "analyze",
        "--dataset",
        bad.to_str().unwrap(),
        "--out",
        dir.path().join("x").to_str().unwrap(),
    ]);
    assert_eq!(output.status.code(), Some(2), "{}", stderr(&output));
    assert!(stderr(&output).contains("header"));
}

#[test]
fn focus_reproduces_the_published_frequency_table() {
    let output = run(&[
        "focus",
        "--nu1-khz",
        "600",
        "--l12-m",
        "1.20",
        "--l2s-m",
        "2.383",
        "--ls3-m",
        "1.065",
        "--l34-m",
        "1.18",
    ]);
    assert!(output.status.success(), "{}", stderr(&output));
    let text = stdout(&output);
    assert!(text.contains("nu2 = 902.140 kHz"), "{text}");
    assert!(text.contains("nu3 = 574.834 kHz"), "{text}");
    assert!(text.contains("nu4 = 272.694 kHz"), "{text}");
    assert!(text.contains("are zero"), "{text}");
}

#[test]
fn focus_conventional_echoes_equal_frequencies_with_reversal_note() {
    let output = run(&[
        "focus",
        "--nu1-khz",
        "500",
        "--l12-m",
        "1.20",
        "--l2s-m",
        "2.383",
        "--ls3-m",
        "1.065",
        "--l34-m",
        "1.18",
        "--conventional",
    ]);
    assert!(output.status.success());
    let text = stdout(&output);
    assert!(text.contains("nu1 = nu2 = nu3 = nu4 = 500.000 kHz"), "{text}");
    assert!(text.contains("guide field"), "{text}");
}

#[test]
fn focus_rejects_nonpositive_distances() {
    let output = run(&[
        "focus",
        "--nu1-khz",
        "600",
        "--l12-m",
        "-1.0",
        "--l2s-m",
        "2.383",
        "--ls3-m",
        "1.065",
        "--l34-m",
        "1.18",
    ]);
    assert_eq!(output.status.code(), Some(2), "{}", stderr(&output));
}

#[test]
fn coherence_writes_the_separation_profile() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("coh");
    let output = run(&[
        "coherence",
        "--config",
        config("rf_overlap.toml").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(output.status.success(), "{}", stderr(&output));
    let text = stdout(&output);
    assert!(text.contains("beta_t = 350.00 nm"), "{text}");
    assert!(text.contains("overlapping"), "{text}");
    let profile = std::fs::read_to_string(out.join("profile.csv")).unwrap();
    assert!(profile.starts_with("position_m,delta_y_m"));
}

#[test]
fn report_aggregates_and_flags() {
    let dir = tempfile::tempdir().unwrap();
    // simulate + analyze two configs, then aggregate their reports
    let mut report_paths = Vec::new();
    for (cfg, seed) in [("mwp_2mm.toml", "5"), ("rf_overlap.toml", "6")] {
        let out = dir.path().join(format!("run_{seed}"));
        let analysis = dir.path().join(format!("analysis_{seed}"));
        run(&[
            "simulate",
            "--config",
            config(cfg).to_str().unwrap(),
            "--seed",
            seed,
            "--out",
            out.to_str().unwrap(),
        ]);
        let output = run(&[
            "analyze",
            "--dataset",
            out.join("dataset.csv").to_str().unwrap(),
            "--out",
            analysis.to_str().unwrap(),
            "--trials",
            "150",
        ]);
        assert!(output.status.success(), "{}", stderr(&output));
        report_paths.push(analysis.join("report.toml"));
    }
    let summary_dir = dir.path().join("summary");
    let mut args = vec![
        "report".to_string(),
        "--out".to_string(),
        summary_dir.to_str().unwrap().to_string(),
    ];
    args.extend(report_paths.iter().map(|p| p.to_str().unwrap().to_string()));
    let arg_refs: Vec<&str> = args.iter().map(String::as_str).collect();
    let output = run(&arg_refs);
    assert!(output.status.success(), "{}", stderr(&output));
    let text = stdout(&output);
    assert!(text.contains("MWP 2 mm"));
    assert!(text.contains("RF Over."));
    let csv = std::fs::read_to_string(summary_dir.join("witness_summary.csv")).unwrap();
    assert!(csv.contains("classical_bound"));
    // xi/beta_t ratios from the bundled configs
    assert!(csv.contains("4.2857"), "{csv}");
    assert!(csv.contains("0.2657"), "{csv}");
}

#[test]
fn report_without_files_is_a_usage_error() {
    let output = run(&["report"]);
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn all_six_bundled_configs_aggregate_into_the_regime_table() {
    let dir = tempfile::tempdir().unwrap();
    let configs = [
        "rf_conv_prior.toml",
        "mwp_05mm.toml",
        "mwp_2mm.toml",
        "mwp_4mm.toml",
        "rf_conv.toml",
        "rf_overlap.toml",
    ];
    let mut report_paths = Vec::new();
    for (idx, name) in configs.iter().enumerate() {
        let run_dir = dir.path().join(format!("run{idx}"));
        let analysis_dir = dir.path().join(format!("analysis{idx}"));
        let output = run(&[
            "simulate",
            "--config",
            config(name).to_str().unwrap(),
            "--seed",
            "21",
            "--out",
            run_dir.to_str().unwrap(),
        ]);
        assert!(output.status.success(), "{name}: {}", stderr(&output));
        let output = run(&[
            "analyze",
            "--dataset",
            run_dir.join("dataset.csv").to_str().unwrap(),
            "--out",
            analysis_dir.to_str().unwrap(),
            "--trials",
            "0",
        ]);
        assert!(output.status.success(), "{name}: {}", stderr(&output));
        report_paths.push(analysis_dir.join("report.toml"));
    }

    let summary_dir = dir.path().join("summary");
    let mut args = vec![
        "report".to_string(),
        "--out".to_string(),
        summary_dir.to_str().unwrap().to_string(),
    ];
    args.extend(report_paths.iter().map(|p| p.to_str().unwrap().to_string()));
    let arg_refs: Vec<&str> = args.iter().map(String::as_str).collect();
    let output = run(&arg_refs);
    assert!(output.status.success(), "{}", stderr(&output));

    let csv = std::fs::read_to_string(summary_dir.join("witness_summary.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 6);
    // xi/beta_t for the six setups, in submission order
    for (row, expected) in rows.iter().zip([16.0, 1.0909, 4.2857, 8.5714, 0.2429, 0.2657]) {
        let ratio: f64 = row.split(',').nth(1).unwrap().parse().unwrap();
        assert!(
            (ratio - expected).abs() < 1e-3,
            "ratio {ratio} vs {expected} in row {row}"
        );
        // every setup violates the classical bound but respects the
        // quantum one once scaled by its polarization
        let s_over_pol: f64 = row.split(',').nth(5).unwrap().parse().unwrap();
        assert!(s_over_pol > 2.0 && s_over_pol < 2.0 * 2.0_f64.sqrt() + 0.2, "{row}");
        assert!(row.ends_with(','), "unexpected flag in {row}");
    }
}
