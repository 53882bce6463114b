//! End-to-end tests of the command-line interface: workflow wiring, file
//! contracts, determinism, configuration precedence, and exit codes.

use std::path::Path;
use std::process::{Command, Output};

use tempfile::tempdir;

fn mcgp() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mcgp"));
    cmd.env("MCGP_THREADS", "1");
    cmd
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn mcgp");
    assert!(
        out.status.success(),
        "command failed: {:?}\nstdout: {}\nstderr: {}",
        cmd,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn run_err(cmd: &mut Command, expected_code: i32) -> String {
    let out = cmd.output().expect("spawn mcgp");
    assert_eq!(
        out.status.code(),
        Some(expected_code),
        "unexpected exit for {:?}\nstdout: {}\nstderr: {}",
        cmd,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn generate(dir: &Path, h: &str, n: &str) {
    run_ok(mcgp().args([
        "generate",
        "--h",
        h,
        "--equispaced",
        n,
        "--out",
        dir.to_str().unwrap(),
    ]));
}

/// Small-but-nontrivial fit settings shared by the workflow tests.
fn fit_fast(data: &Path, model: &Path, extra: &[&str]) {
    let mut cmd = mcgp();
    cmd.args([
        "fit",
        "--data",
        data.to_str().unwrap(),
        "--out",
        model.to_str().unwrap(),
        "--clusters",
        "4",
        "--multistarts",
        "2",
        "--max-evals",
        "60",
        "--max-iter",
        "40",
    ]);
    cmd.args(extra);
    run_ok(&mut cmd);
}

fn read_lines(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
        .lines()
        .map(String::from)
        .collect()
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempdir().unwrap();
    let data = dir.path().join("data");
    let model = dir.path().join("model");
    let pred = dir.path().join("pred");
    let eval = dir.path().join("eval.json");
    let clusters = dir.path().join("clusters");

    generate(&data, "0.5", "4");
    for name in [
        "nodes.csv",
        "elements.csv",
        "boundary.csv",
        "design.csv",
        "solutions.csv",
        "manifest.json",
    ] {
        assert!(data.join(name).is_file(), "missing dataset file {name}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(data.join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["n_inputs"], 4);
    assert_eq!(manifest["n_nodes"], 25);

    fit_fast(&data, &model, &[]);
    assert!(model.join("model.json").is_file());
    assert!(model.join("elbo_trace.csv").is_file());
    assert!(model.join("fit.json").is_file());
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(model.join("fit.json")).unwrap()).unwrap();
    assert_eq!(summary["model_type"], "mcgp");
    assert!(summary["fit_seconds"].as_f64().unwrap() > 0.0);
    assert!(summary["iterations"].as_u64().unwrap() >= 1);

    run_ok(mcgp().args([
        "predict",
        "--model",
        model.to_str().unwrap(),
        "--grid",
        "5",
        "--out",
        pred.to_str().unwrap(),
    ]));
    let mean_rows = read_lines(&pred.join("pred_mean.csv"));
    let var_rows = read_lines(&pred.join("pred_var.csv"));
    assert_eq!(mean_rows.len(), 5, "one row per test input");
    assert_eq!(var_rows.len(), 5);
    assert_eq!(mean_rows[0].split(',').count(), 25, "one column per node");

    run_ok(mcgp().args([
        "evaluate",
        "--model",
        model.to_str().unwrap(),
        "--truth",
        data.to_str().unwrap(),
        "--grid",
        "9",
        "--out",
        eval.to_str().unwrap(),
    ]));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&eval).unwrap()).unwrap();
    for key in ["rmse", "mean_crps", "fit_seconds", "predict_ms_per_run"] {
        let value = report[key].as_f64().unwrap_or_else(|| panic!("{key} missing"));
        assert!(value.is_finite() && value >= 0.0, "{key} = {value}");
    }
    assert!(report["rmse"].as_f64().unwrap() < 0.1, "emulator far off truth");

    run_ok(mcgp().args([
        "clusters",
        "--model",
        model.to_str().unwrap(),
        "--out",
        clusters.to_str().unwrap(),
    ]));
    let assignments = read_lines(&clusters.join("assignments.csv"));
    assert_eq!(assignments[0], "node,cluster,responsibility");
    assert_eq!(assignments.len(), 26, "header plus one row per node");
    let summary_rows = read_lines(&clusters.join("cluster_summary.csv"));
    assert_eq!(summary_rows.len(), 5, "header plus one row per cluster");
}

#[test]
fn generate_is_byte_identical_on_rerun() {
    let dir = tempdir().unwrap();
    let first = dir.path().join("first");
    let second = dir.path().join("second");
    generate(&first, "0.34", "5");
    generate(&second, "0.34", "5");
    for name in [
        "nodes.csv",
        "elements.csv",
        "boundary.csv",
        "design.csv",
        "solutions.csv",
        "manifest.json",
    ] {
        let a = std::fs::read(first.join(name)).unwrap();
        let b = std::fs::read(second.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between reruns");
    }
}

#[test]
fn generate_midpoint_design_hits_printed_values() {
    let dir = tempdir().unwrap();
    generate(dir.path(), "0.2", "5");
    let rows = read_lines(&dir.path().join("design.csv"));
    let got: Vec<f64> = rows[1..].iter().map(|r| r.parse().unwrap()).collect();
    assert_eq!(got, vec![-0.8, -0.4, 0.0, 0.4, 0.8]);
}

#[test]
fn fit_rerun_is_byte_identical() {
    let dir = tempdir().unwrap();
    let data = dir.path().join("data");
    generate(&data, "0.5", "4");
    let first = dir.path().join("first");
    let second = dir.path().join("second");
    fit_fast(&data, &first, &[]);
    fit_fast(&data, &second, &[]);
    for name in ["model.json", "responsibilities.csv", "solutions.csv", "elbo_trace.csv"] {
        let a = std::fs::read(first.join(name)).unwrap();
        let b = std::fs::read(second.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between reruns");
    }
}

#[test]
fn fit_model_type_igp_writes_igp_model() {
    let dir = tempdir().unwrap();
    let data = dir.path().join("data");
    let model = dir.path().join("model");
    generate(&data, "0.5", "4");
    fit_fast(&data, &model, &["--model-type", "igp"]);
    let text = std::fs::read_to_string(model.join("model.json")).unwrap();
    let parsed: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(parsed["model_type"], "igp");
    let pred = dir.path().join("pred");
    run_ok(mcgp().args([
        "predict",
        "--model",
        model.to_str().unwrap(),
        "--grid",
        "3",
        "--out",
        pred.to_str().unwrap(),
    ]));
    assert_eq!(read_lines(&pred.join("pred_mean.csv")).len(), 3);
}

#[test]
fn corrupt_solutions_is_validation_error() {
    let dir = tempdir().unwrap();
    let data = dir.path().join("data");
    generate(&data, "0.5", "4");
    let path = data.join("solutions.csv");
    let text = std::fs::read_to_string(&path).unwrap();
    let truncated = text.lines().skip(3).collect::<Vec<_>>().join("\n");
    std::fs::write(&path, truncated).unwrap();
    let stderr = run_err(
        mcgp().args([
            "fit",
            "--data",
            data.to_str().unwrap(),
            "--out",
            dir.path().join("model").to_str().unwrap(),
        ]),
        2,
    );
    assert!(
        stderr.contains("solutions.csv"),
        "stderr should name the offending file: {stderr}"
    );
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempdir().unwrap();
    let data = dir.path().join("data");
    generate(&data, "0.5", "4");
    let config = dir.path().join("config.json");
    std::fs::write(&config, "{\"max_itr\": 5}\n").unwrap();
    let stderr = run_err(
        mcgp().args([
            "fit",
            "--data",
            data.to_str().unwrap(),
            "--out",
            dir.path().join("model").to_str().unwrap(),
            "--config",
            config.to_str().unwrap(),
        ]),
        2,
    );
    assert!(
        stderr.contains("config.json") && stderr.contains("max_itr"),
        "stderr should name the file and the bad key: {stderr}"
    );
}

#[test]
fn flags_override_config_file() {
    let dir = tempdir().unwrap();
    let data = dir.path().join("data");
    generate(&data, "0.5", "4");
    let config = dir.path().join("config.json");
    std::fs::write(
        &config,
        "{\"max_iter\": 3, \"multistarts\": 1, \"max_evals\": 40, \"priors\": {\"clusters\": 3}}\n",
    )
    .unwrap();

    let from_file = dir.path().join("from_file");
    run_ok(mcgp().args([
        "fit",
        "--data",
        data.to_str().unwrap(),
        "--out",
        from_file.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
    ]));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(from_file.join("fit.json")).unwrap())
            .unwrap();
    assert!(summary["iterations"].as_u64().unwrap() <= 3);

    let from_flag = dir.path().join("from_flag");
    run_ok(mcgp().args([
        "fit",
        "--data",
        data.to_str().unwrap(),
        "--out",
        from_flag.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--max-iter",
        "1",
    ]));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(from_flag.join("fit.json")).unwrap())
            .unwrap();
    assert_eq!(summary["iterations"].as_u64().unwrap(), 1);
}

#[test]
fn predict_rejects_wrong_input_dimension() {
    let dir = tempdir().unwrap();
    let data = dir.path().join("data");
    let model = dir.path().join("model");
    generate(&data, "0.5", "4");
    fit_fast(&data, &model, &[]);
    let inputs = dir.path().join("inputs.csv");
    std::fs::write(&inputs, "x1,x2\n0.0,0.0\n").unwrap();
    run_err(
        mcgp().args([
            "predict",
            "--model",
            model.to_str().unwrap(),
            "--inputs",
            inputs.to_str().unwrap(),
            "--out",
            dir.path().join("pred").to_str().unwrap(),
        ]),
        2,
    );
}

#[test]
fn evaluate_rejects_mismatched_mesh() {
    let dir = tempdir().unwrap();
    let coarse = dir.path().join("coarse");
    let fine = dir.path().join("fine");
    let model = dir.path().join("model");
    generate(&coarse, "0.5", "4");
    generate(&fine, "0.25", "4");
    fit_fast(&coarse, &model, &[]);
    let stderr = run_err(
        mcgp().args([
            "evaluate",
            "--model",
            model.to_str().unwrap(),
            "--truth",
            fine.to_str().unwrap(),
            "--grid",
            "5",
            "--out",
            dir.path().join("eval.json").to_str().unwrap(),
        ]),
        2,
    );
    assert!(stderr.contains("nodes"), "mismatch message: {stderr}");
}

#[test]
fn clusters_rejects_baseline_model() {
    let dir = tempdir().unwrap();
    let data = dir.path().join("data");
    let model = dir.path().join("model");
    generate(&data, "0.5", "4");
    fit_fast(&data, &model, &["--model-type", "ugp"]);
    let stderr = run_err(
        mcgp().args([
            "clusters",
            "--model",
            model.to_str().unwrap(),
            "--out",
            dir.path().join("clusters").to_str().unwrap(),
        ]),
        2,
    );
    assert!(stderr.contains("ugp"), "message names the model type: {stderr}");
}

#[test]
fn missing_model_dir_is_validation_error() {
    let dir = tempdir().unwrap();
    run_err(
        mcgp().args([
            "predict",
            "--model",
            dir.path().join("nope").to_str().unwrap(),
            "--grid",
            "3",
            "--out",
            dir.path().join("pred").to_str().unwrap(),
        ]),
        2,
    );
}

#[test]
fn at_field_query_prints_field_rows() {
    let dir = tempdir().unwrap();
    let data = dir.path().join("data");
    let model = dir.path().join("model");
    generate(&data, "0.5", "4");
    fit_fast(&data, &model, &[]);
    let out = run_ok(mcgp().args([
        "predict",
        "--model",
        model.to_str().unwrap(),
        "--grid",
        "3",
        "--at",
        "0.5,0.5",
        "--out",
        dir.path().join("pred").to_str().unwrap(),
    ]));
    let stdout = String::from_utf8_lossy(&out.stdout);
    let lines: Vec<&str> = stdout.lines().collect();
    let header = lines
        .iter()
        .position(|l| *l == "x1,mean,var")
        .expect("field table header");
    assert_eq!(lines.len() - header - 1, 3, "one field row per test input");
    for row in &lines[header + 1..] {
        let cells: Vec<f64> = row.split(',').map(|c| c.parse().unwrap()).collect();
        assert_eq!(cells.len(), 3);
        assert!(cells[2] >= 0.0, "field variance must be nonnegative");
    }
}

#[test]
fn at_query_outside_mesh_is_validation_error() {
    let dir = tempdir().unwrap();
    let data = dir.path().join("data");
    let model = dir.path().join("model");
    generate(&data, "0.5", "4");
    fit_fast(&data, &model, &[]);
    run_err(
        mcgp().args([
            "predict",
            "--model",
            model.to_str().unwrap(),
            "--grid",
            "3",
            "--at",
            "1.5,0.5",
            "--out",
            dir.path().join("pred").to_str().unwrap(),
        ]),
        2,
    );
}

#[test]
fn convergence_small_study_writes_grid_and_rates() {
    let dir = tempdir().unwrap();
    let out = dir.path().join("conv");
    run_ok(mcgp().args([
        "convergence",
        "--out",
        out.to_str().unwrap(),
        "--n-grid",
        "3,4,5,6",
        "--h-grid",
        "0.5",
        "--samples",
        "50",
        "--clusters",
        "3",
        "--multistarts",
        "1",
        "--max-evals",
        "40",
        "--max-iter",
        "20",
    ]));
    let rows = read_lines(&out.join("convergence_grid.csv"));
    assert_eq!(rows[0], "h_X,h_T,error");
    assert_eq!(rows.len(), 5, "header plus one row per grid cell");
    let rates: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("convergence.json")).unwrap())
            .unwrap();
    for key in ["a", "b", "r_squared"] {
        assert!(rates[key].as_f64().unwrap().is_finite());
    }
    assert!(rates["nu"].as_u64().unwrap() >= 1);
}

#[test]
fn convergence_from_grid_with_constant_errors_is_degeneracy() {
    let dir = tempdir().unwrap();
    let grid = dir.path().join("grid.csv");
    std::fs::write(
        &grid,
        "h_X,h_T,error\n0.5,0.4,0.0\n0.25,0.4,0.0\n0.5,0.2,0.0\n0.25,0.2,0.0\n",
    )
    .unwrap();
    run_err(
        mcgp().args([
            "convergence",
            "--out",
            dir.path().join("conv").to_str().unwrap(),
            "--from-grid",
            grid.to_str().unwrap(),
        ]),
        3,
    );
}

#[test]
fn convergence_from_grid_refits_rates() {
    let dir = tempdir().unwrap();
    let grid = dir.path().join("grid.csv");
    // Exact two-term power law: 0.01 * h_X^2 + 0.2 * h_T^3.
    let mut text = String::from("h_X,h_T,error\n");
    for &hx in &[0.5_f64, 0.25, 0.125] {
        for &ht in &[0.4_f64, 0.2, 0.1] {
            let e = 0.01 * hx.powi(2) + 0.2 * ht.powi(3);
            text.push_str(&format!("{hx},{ht},{e}\n"));
        }
    }
    std::fs::write(&grid, text).unwrap();
    run_ok(mcgp().args([
        "convergence",
        "--out",
        dir.path().join("conv").to_str().unwrap(),
        "--from-grid",
        grid.to_str().unwrap(),
    ]));
    let rates: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("conv").join("convergence.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(rates["nu"].as_u64().unwrap(), 2);
    assert_eq!(rates["r"].as_u64().unwrap(), 2);
}
