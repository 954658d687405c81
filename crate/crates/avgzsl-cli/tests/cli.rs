//! End-to-end tests of the compiled binary: exit codes, artifact layouts,
//! determinism, and the stage dependency chain, all on a tiny configuration.

use std::path::{Path, PathBuf};
use std::process::Output;

fn run_cli(args: &[&str]) -> Output {
    std::process::Command::new(env!("CARGO_BIN_EXE_avgzsl"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_success(out: &Output, context: &str) {
    assert!(
        out.status.success(),
        "{context} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stderr_error(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().unwrap_or_default();
    serde_json::from_str(line).unwrap_or_else(|_| panic!("stderr is not an error object: {text}"))
}

/// Tiny config: every stage a few epochs, small dims, one seed.
fn tiny_config(out_dir: &Path) -> String {
    format!(
        r#"{{
  "seeds": [5],
  "out_dir": {out:?},
  "threshold_sweep_points": 12,
  "pipeline": {{
    "dataset": {{
      "seen_classes": 4, "unseen_classes": 2,
      "audio_dim": 6, "visual_dim": 6, "text_dim": 8, "latent_dim": 3,
      "samples_per_class": 30, "spread": 0.3, "text_noise": 0.01
    }},
    "generator": {{
      "noise_dim": 4, "gen_hidden": [16], "critic_hidden": [16],
      "epochs": 3, "batch_size": 16, "lr": 0.0005
    }},
    "ood": {{ "hidden": [16], "epochs": 4, "batch_size": 16, "lr": 0.001,
              "synthetic_per_class": 10 }},
    "seen": {{ "hidden": [16], "epochs": 5, "batch_size": 16, "lr": 0.003 }},
    "unseen": {{ "block_hidden": 8, "joint_dim": 6, "epochs": 4,
                 "batch_size": 16, "lr": 0.001 }}
  }}
}}"#,
        out = out_dir.display().to_string()
    )
}

fn write_tiny_config(dir: &Path) -> (PathBuf, PathBuf) {
    let out_dir = dir.join("run");
    let config_path = dir.join("config.json");
    std::fs::write(&config_path, tiny_config(&out_dir)).unwrap();
    (config_path, out_dir)
}

fn csv_lines(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("missing {}: {e}", path.display()))
        .lines()
        .map(str::to_string)
        .collect()
}

#[test]
fn gen_data_round_trips_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (config, out_dir) = write_tiny_config(dir.path());
    let config = config.to_str().unwrap();

    let out = run_cli(&["gen-data", "--config", config]);
    assert_success(&out, "gen-data");
    let dataset_dir = out_dir.join("dataset");
    let dataset = avgzsl::Dataset::load(&dataset_dir).expect("generated dataset loads");
    assert_eq!(dataset.seen_class_ids().len(), 4);
    assert_eq!(dataset.unseen_class_ids().len(), 2);

    // Second run into a different directory: identical dataset bytes.
    let out_dir2 = dir.path().join("run2");
    let out = run_cli(&["gen-data", "--config", config, "--out", out_dir2.to_str().unwrap()]);
    assert_success(&out, "gen-data rerun");
    let second = out_dir2.join("dataset");
    for entry in std::fs::read_dir(&dataset_dir).unwrap() {
        let name = entry.unwrap().file_name();
        let a = std::fs::read(dataset_dir.join(&name)).unwrap();
        let b = std::fs::read(second.join(&name)).unwrap();
        assert_eq!(a, b, "dataset file {name:?} differs between identical runs");
    }

    // Provenance sidecar parses back to the same document shape.
    let effective = std::fs::read(out_dir.join("effective-config.json")).unwrap();
    let parsed: serde_json::Value = serde_json::from_slice(&effective).unwrap();
    assert_eq!(parsed["seeds"], serde_json::json!([5]));
    assert_eq!(parsed["pipeline"]["dataset"]["seen_classes"], 4);
}

#[test]
fn gen_data_with_zero_classes_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("bad.json");
    std::fs::write(
        &config_path,
        format!(
            r#"{{ "out_dir": {:?}, "pipeline": {{ "dataset": {{ "seen_classes": 0 }} }} }}"#,
            dir.path().join("run").display().to_string()
        ),
    )
    .unwrap();
    let out = run_cli(&["gen-data", "--config", config_path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_error(&out);
    assert_eq!(err["error"]["kind"], "usage");
}

#[test]
fn unknown_preset_is_a_usage_error() {
    let out = run_cli(&["evaluate", "--preset", "imagenet"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_error(&out)["error"]["kind"], "usage");
}

#[test]
fn train_ood_without_generator_is_a_dependency_error() {
    let dir = tempfile::tempdir().unwrap();
    let (config, _) = write_tiny_config(dir.path());
    let out = run_cli(&["train", "ood", "--config", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    let err = stderr_error(&out);
    assert_eq!(err["error"]["kind"], "dependency");
    assert!(
        err["error"]["message"].as_str().unwrap().contains("generator"),
        "dependency error must name the missing stage: {err}"
    );
}

#[test]
fn stage_chain_evaluate_ablate_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let (config_path, out_dir) = write_tiny_config(dir.path());
    let config = config_path.to_str().unwrap();

    for stage in ["generator", "ood", "seen", "unseen"] {
        let out = run_cli(&["train", stage, "--config", config]);
        assert_success(&out, &format!("train {stage}"));
    }

    // Loss traces: one row per epoch plus the header.
    assert_eq!(csv_lines(&out_dir.join("generator/loss_trace.csv")).len(), 1 + 3);
    assert_eq!(csv_lines(&out_dir.join("ood/loss_trace.csv")).len(), 1 + 4);
    assert_eq!(csv_lines(&out_dir.join("seen/loss_trace.csv")).len(), 1 + 5);
    assert_eq!(csv_lines(&out_dir.join("unseen/loss_trace.csv")).len(), 1 + 4);

    let out = run_cli(&["evaluate", "--config", config]);
    assert_success(&out, "evaluate");
    let report_path = out_dir.join("report.json");
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(&report_path).unwrap()).unwrap();
    for field in
        ["gating", "seen_acc", "unseen_acc", "harmonic", "zsl_acc", "auc", "routed_seen"]
    {
        assert!(!report[field].is_null(), "report missing {field}: {report}");
    }
    // Harmonic mean recomputed from the same file.
    let (s, u) = (report["seen_acc"].as_f64().unwrap(), report["unseen_acc"].as_f64().unwrap());
    let expected = if s + u > 0.0 { 2.0 * s * u / (s + u) } else { 0.0 };
    assert!((report["harmonic"].as_f64().unwrap() - expected).abs() < 1e-12);

    // Rerun is byte-identical: timestamps live only in run.log.
    let first = std::fs::read(&report_path).unwrap();
    let out = run_cli(&["evaluate", "--config", config]);
    assert_success(&out, "evaluate rerun");
    assert_eq!(first, std::fs::read(&report_path).unwrap(), "report.json not deterministic");

    // ROC plot data renders with the diagonal and a 2-decimal AUC legend.
    let roc_csv = out_dir.join("roc.csv");
    let svg_path = out_dir.join("roc.svg");
    let out = run_cli(&["plot", roc_csv.to_str().unwrap(), svg_path.to_str().unwrap()]);
    assert_success(&out, "plot roc");
    let svg = std::fs::read_to_string(&svg_path).unwrap();
    assert!(svg.contains("stroke-dasharray"), "missing diagonal reference line");
    assert!(svg.contains("(AUC = 0."), "missing AUC legend: {svg}");

    // Threshold sweep: n_points rows, exactly one flagged operating row.
    let out = run_cli(&["ablate", "threshold-sweep", "--config", config]);
    assert_success(&out, "ablate threshold-sweep");
    let sweep_csv = out_dir.join("ablate-threshold-sweep.csv");
    let lines = csv_lines(&sweep_csv);
    assert_eq!(lines.len(), 1 + 12);
    let operating: Vec<&String> = lines[1..].iter().filter(|l| l.ends_with(",1")).collect();
    assert_eq!(operating.len(), 1, "expected exactly one operating row: {lines:?}");

    let sweep_svg = out_dir.join("sweep.svg");
    let out = run_cli(&["plot", sweep_csv.to_str().unwrap(), sweep_svg.to_str().unwrap()]);
    assert_success(&out, "plot sweep");
    let svg = std::fs::read_to_string(&sweep_svg).unwrap();
    assert!(svg.contains("<circle"), "operating threshold not highlighted");

    // Malformed plot data is a usage error.
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "nonsense,columns\n1,2\n").unwrap();
    let out = run_cli(&["plot", bad.to_str().unwrap(), svg_path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn ablation_tables_have_the_documented_row_counts() {
    let dir = tempfile::tempdir().unwrap();
    let (config_path, out_dir) = write_tiny_config(dir.path());
    let config = config_path.to_str().unwrap();

    let out = run_cli(&["ablate", "bias", "--config", config]);
    assert_success(&out, "ablate bias");
    let lines = csv_lines(&out_dir.join("ablate-bias.csv"));
    assert_eq!(lines.len(), 1 + 3, "bias table: one row per gate: {lines:?}");
    let roc_lines = csv_lines(&out_dir.join("ablate-bias-roc.csv"));
    assert_eq!(roc_lines[0], "method,auc,fpr,tpr");
    assert!(roc_lines.len() > 3);

    let svg_path = out_dir.join("bias-roc.svg");
    let out = run_cli(&[
        "plot",
        out_dir.join("ablate-bias-roc.csv").to_str().unwrap(),
        svg_path.to_str().unwrap(),
    ]);
    assert_success(&out, "plot bias roc");
    let svg = std::fs::read_to_string(&svg_path).unwrap();
    assert_eq!(svg.matches("(AUC = ").count(), 3, "one legend entry per gate");

    let out = run_cli(&["ablate", "neg-loss", "--config", config]);
    assert_success(&out, "ablate neg-loss");
    let lines = csv_lines(&out_dir.join("ablate-neg-loss.csv"));
    assert_eq!(lines.len(), 1 + 5, "neg-loss table: one row per mask: {lines:?}");
    for mask in ["L+,", "L+trip-,", "L+rec-,", "L+reg-,", "full,"] {
        assert!(lines.iter().any(|l| l.starts_with(mask)), "missing row {mask}: {lines:?}");
    }

    let out = run_cli(&["ablate", "classifiers", "--config", config]);
    assert_success(&out, "ablate classifiers");
    let lines = csv_lines(&out_dir.join("ablate-classifiers.csv"));
    assert_eq!(lines.len(), 1 + 3, "classifier table: one row per pairing: {lines:?}");
}
