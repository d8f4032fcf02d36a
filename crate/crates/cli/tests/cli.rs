//! End-to-end CLI behavior: exit codes, subcommands, output-file coherence,
//! and the IDX ingestion path.

use std::path::Path;
use std::process::{Command, Output};

fn fedamp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedamp"))
        .args(args)
        .output()
        .unwrap()
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

const GOOD_CONFIG: &str = r#"{"algorithm": "fedamp", "rounds": 8, "groups": 2,
    "clients_per_group": 3, "classes": 4, "features": 5, "train_per_client": [40],
    "test_per_client": 30, "attention_sigma": 0.2, "learning_rate": 0.003,
    "batch_size": 20, "seed": 1}"#;

#[test]
fn validate_accepts_good_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "good.json", GOOD_CONFIG);
    let out = fedamp(&["validate", "--config", &config]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("config OK"));
}

#[test]
fn shipped_example_configs_validate() {
    let configs_dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(configs_dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "json") {
            let out = fedamp(&["validate", "--config", path.to_str().unwrap()]);
            assert!(
                out.status.success(),
                "{}: {}",
                path.display(),
                String::from_utf8_lossy(&out.stderr)
            );
            seen += 1;
        }
    }
    assert!(seen >= 3, "expected shipped configs, found {seen}");
}

#[test]
fn config_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let unknown_key = write_config(
        dir.path(),
        "bad.json",
        r#"{"algorithm": "fedamp", "rounds": 5, "mystery": true}"#,
    );
    let out = fedamp(&["validate", "--config", &unknown_key]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("mystery"));

    let out = fedamp(&["validate", "--config", "/does/not/exist.json"]);
    assert_eq!(out.status.code(), Some(2));

    let bad_value = write_config(
        dir.path(),
        "bad2.json",
        r#"{"algorithm": "fedamp", "rounds": 5, "drop_rate": 1.5}"#,
    );
    let out = fedamp(&["validate", "--config", &bad_value]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("drop_rate"));
}

#[test]
fn runtime_errors_exit_with_3() {
    // Strict weights with the huge default alpha0 fail in round 1.
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        "strict.json",
        r#"{"algorithm": "fedamp", "rounds": 5, "groups": 2, "clients_per_group": 2,
            "classes": 4, "train_per_client": [30], "weight_mode": "strict",
            "attention_sigma": 0.2, "seed": 0}"#,
    );
    let out_dir = dir.path().join("out");
    let out = fedamp(&[
        "run",
        "--config",
        &config,
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("step size"));
}

#[test]
fn presets_lists_builtin_layouts() {
    let out = fedamp(&["presets"]);
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    for name in ["emnist62", "mnist100", "fmnist100", "cifar100_100"] {
        assert!(stdout.contains(name), "missing {name} in:\n{stdout}");
    }
}

#[test]
fn oracle_check_reports_pass() {
    let out = fedamp(&["oracle-check", "--seed", "4", "--instances", "6"]);
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("PASS"), "{stdout}");
    assert!(stdout.contains("max per-entry deviation"));
}

#[test]
fn run_outputs_are_coherent() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "run.json", GOOD_CONFIG);
    let out_dir = dir.path().join("out");
    let out = fedamp(&[
        "run",
        "--config",
        &config,
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let csv = std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "round,alpha,G,grad_norm,mean_test_acc,dropped_count"
    );
    let mut max_acc = f64::NEG_INFINITY;
    let mut rows = 0;
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), 6, "bad row: {line}");
        max_acc = max_acc.max(fields[4].parse::<f64>().unwrap());
        rows += 1;
    }
    assert_eq!(rows, 8);

    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("summary.json")).unwrap())
            .unwrap();
    assert_eq!(summary["algorithm"], "fedamp");
    assert_eq!(summary["seed"], 1);
    // The summary's best accuracy is exactly the max of the CSV column.
    assert_eq!(summary["bmta"].as_f64().unwrap(), max_acc);

    let collab: fedamp_core::metrics::CollabExport =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("collab.json")).unwrap())
            .unwrap();
    assert_eq!(collab.m, 6);
    assert_eq!(collab.groups, vec![0, 0, 0, 1, 1, 1]);
    for row in &collab.weights {
        let sum: f64 = row.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }
}

#[test]
fn zero_round_run_writes_empty_history() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        "zero.json",
        r#"{"algorithm": "separate", "rounds": 0, "groups": 2, "clients_per_group": 2,
            "classes": 4, "train_per_client": [30], "test_per_client": 20, "seed": 0}"#,
    );
    let out_dir = dir.path().join("out");
    let out = fedamp(&[
        "run",
        "--config",
        &config,
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1, "expected header only: {csv}");
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("summary.json")).unwrap())
            .unwrap();
    assert_eq!(summary["rounds"], 0);
    assert!(summary.get("final_g").is_none());
}

#[test]
fn seed_flag_overrides_config_seed() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "seeded.json", GOOD_CONFIG);
    let run = |label: &str, extra: &[&str]| -> Vec<u8> {
        let out_dir = dir.path().join(label);
        let mut args = vec![
            "run",
            "--config",
            &config,
            "--out",
            out_dir.to_str().unwrap(),
        ];
        args.extend_from_slice(extra);
        let out = fedamp(&args);
        assert!(out.status.success());
        std::fs::read(out_dir.join("metrics.csv")).unwrap()
    };
    let base = run("base", &[]);
    let same = run("same", &["--seed", "1"]);
    let different = run("diff", &["--seed", "2"]);
    assert_eq!(base, same, "--seed equal to config seed changed the run");
    assert_ne!(base, different, "--seed 2 did not change the run");
}

#[test]
fn separate_run_exports_identity_collab() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        "sep.json",
        r#"{"algorithm": "separate", "rounds": 2, "groups": 2, "clients_per_group": 2,
            "classes": 4, "train_per_client": [30], "test_per_client": 20, "seed": 0}"#,
    );
    let out_dir = dir.path().join("out");
    let out = fedamp(&[
        "run",
        "--config",
        &config,
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let collab: fedamp_core::metrics::CollabExport =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("collab.json")).unwrap())
            .unwrap();
    for (i, row) in collab.weights.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            assert_eq!(v, if i == j { 1.0 } else { 0.0 });
        }
    }
}

fn write_idx_pair(dir: &Path, n: usize, classes: usize) -> (String, String) {
    // 2x2 images whose pixel pattern tracks the label.
    let mut images: Vec<u8> = vec![0, 0, 8, 3];
    images.extend_from_slice(&(n as u32).to_be_bytes());
    images.extend_from_slice(&2u32.to_be_bytes());
    images.extend_from_slice(&2u32.to_be_bytes());
    let mut labels: Vec<u8> = vec![0, 0, 8, 1];
    labels.extend_from_slice(&(n as u32).to_be_bytes());
    for i in 0..n {
        let label = (i % classes) as u8;
        for p in 0..4u8 {
            images.push(label * 40 + p * 11 + (i % 7) as u8);
        }
        labels.push(label);
    }
    let images_path = dir.join("images.idx");
    let labels_path = dir.join("labels.idx");
    std::fs::write(&images_path, images).unwrap();
    std::fs::write(&labels_path, labels).unwrap();
    (
        images_path.to_str().unwrap().to_string(),
        labels_path.to_str().unwrap().to_string(),
    )
}

#[test]
fn idx_files_feed_the_iid_partition() {
    let dir = tempfile::tempdir().unwrap();
    let (images, labels) = write_idx_pair(dir.path(), 240, 4);
    let config = write_config(
        dir.path(),
        "idx.json",
        &format!(
            r#"{{"algorithm": "fedavg", "rounds": 3, "data": "idx",
                "train_images": "{images}", "train_labels": "{labels}",
                "partition": "iid", "clients": 4, "classes": 4,
                "test_per_client": 10, "seed": 0}}"#
        ),
    );
    let out_dir = dir.path().join("out");
    let out = fedamp(&[
        "run",
        "--config",
        &config,
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("summary.json")).unwrap())
            .unwrap();
    assert!(summary["bmta"].as_f64().unwrap() > 0.0);
}

#[test]
fn idx_truncated_file_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let (images, labels) = write_idx_pair(dir.path(), 60, 4);
    // Chop the image payload.
    let mut bytes = std::fs::read(&images).unwrap();
    bytes.truncate(bytes.len() - 3);
    std::fs::write(&images, bytes).unwrap();
    let config = write_config(
        dir.path(),
        "idx.json",
        &format!(
            r#"{{"algorithm": "fedavg", "rounds": 2, "data": "idx",
                "train_images": "{images}", "train_labels": "{labels}",
                "partition": "iid", "clients": 2, "classes": 4,
                "test_per_client": 5, "seed": 0}}"#
        ),
    );
    let out = fedamp(&["run", "--config", &config, "--out", dir.path().join("out").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("expected"));
}
